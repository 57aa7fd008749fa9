//! Synthetic street-like scenes standing in for backbone features.
//!
//! The background drifts linearly from `background` at the top row by
//! `background_gradient` toward the bottom row, mimicking how backbone
//! features change with distance along the ground plane. Objects are
//! rectangles carrying their own feature signature.

use atoken::cce::{KeypointSet, DEFAULT_GAUSSIAN_SIGMA};
use atoken::fmcore::KITTI_CAMERA_HEIGHT;
use atoken::{CameraIntrinsics, FeatureMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    /// Left column of the rectangle.
    pub u: usize,
    /// Top row of the rectangle.
    pub v: usize,
    pub width: usize,
    pub height: usize,
    pub signature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub camera: CameraIntrinsics,
    pub background: Vec<f64>,
    #[serde(default)]
    pub background_gradient: Option<Vec<f64>>,
    #[serde(default = "default_noise")]
    pub noise_amplitude: f64,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default = "default_sigma")]
    pub gaussian_sigma: f64,
}

fn default_noise() -> f64 {
    0.05
}

fn default_sigma() -> f64 {
    DEFAULT_GAUSSIAN_SIGMA
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err("scene dimensions must be positive".into());
        }
        self.camera.validate().map_err(|e| e.to_string())?;
        if self.background.len() != self.channels {
            return Err(format!(
                "background has {} channels, scene has {}",
                self.background.len(),
                self.channels
            ));
        }
        if let Some(g) = &self.background_gradient {
            if g.len() != self.channels {
                return Err("background_gradient length must equal channels".into());
            }
        }
        if !self.noise_amplitude.is_finite() || self.noise_amplitude < 0.0 {
            return Err("noise_amplitude must be a non-negative number".into());
        }
        if self.gaussian_sigma.is_nan() || self.gaussian_sigma <= 0.0 {
            return Err("gaussian_sigma must be positive".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.width == 0 || o.height == 0 {
                return Err(format!("object {i} is empty"));
            }
            if o.u + o.width > self.width || o.v + o.height > self.height {
                return Err(format!("object {i} extends outside the map"));
            }
            if o.signature.len() != self.channels {
                return Err(format!("object {i} signature has the wrong length"));
            }
        }
        let all_finite = self
            .background
            .iter()
            .chain(self.background_gradient.iter().flatten())
            .chain(self.objects.iter().flat_map(|o| o.signature.iter()))
            .all(|v| v.is_finite());
        if !all_finite {
            return Err("scene features must be finite".into());
        }
        Ok(())
    }

    /// Street-like scene: horizon a quarter of the way down, objects standing
    /// on the ground plane and scaled by their distance.
    pub fn random(seed: u64, width: usize, height: usize, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = width as f64;
        let cy = (height as f64 * 0.25).floor() - 0.5;
        let camera = CameraIntrinsics::new(f, f, width as f64 / 2.0 - 0.5, cy, KITTI_CAMERA_HEIGHT)
            .expect("valid synthetic camera");

        let background: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect();
        let dir: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let gradient = dir.iter().map(|v| 2.0 * v / norm).collect();

        let count = rng.random_range(3..=6);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            // Row where the object touches the ground; apparent size grows
            // linearly with the distance below the horizon.
            let lo = (cy + 3.0).ceil() as usize;
            let foot = rng.random_range(lo.min(height - 1)..height);
            let below = (foot as f64 - cy).max(1.0);
            let h = ((below * 0.9).round() as usize).max(2).min(foot + 1);
            let w = ((below * rng.random_range(0.8..1.6)).round() as usize)
                .max(2)
                .min(width);
            let u = rng.random_range(0..=width - w);
            let v = foot + 1 - h;
            let sig: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.5..1.5)).collect();
            objects.push(SceneObject {
                u,
                v,
                width: w,
                height: h,
                signature: sig,
            });
        }
        Self {
            width,
            height,
            channels,
            camera,
            background,
            background_gradient: Some(gradient),
            noise_amplitude: 0.05,
            objects,
            gaussian_sigma: DEFAULT_GAUSSIAN_SIGMA,
        }
    }

    pub fn default_scene() -> Self {
        Self::random(7, 32, 32, 8)
    }
}

/// Renders the scene's feature map and its object-corner keypoints.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(FeatureMap, KeypointSet), String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let mut data = vec![0.0; w * h * c];
    let denom = (h.max(2) - 1) as f64;
    for v in 0..h {
        let t = v as f64 / denom - 0.5;
        for u in 0..w {
            let px = &mut data[(v * w + u) * c..(v * w + u + 1) * c];
            for k in 0..c {
                let drift = spec.background_gradient.as_ref().map_or(0.0, |g| g[k] * t);
                px[k] = spec.background[k] + drift;
            }
        }
    }
    let mut points = Vec::new();
    for o in &spec.objects {
        for v in o.v..o.v + o.height {
            for u in o.u..o.u + o.width {
                data[(v * w + u) * c..(v * w + u + 1) * c].copy_from_slice(&o.signature);
            }
        }
        let (r, b) = ((o.u + o.width - 1) as f64, (o.v + o.height - 1) as f64);
        points.extend([
            [o.u as f64, o.v as f64],
            [r, o.v as f64],
            [o.u as f64, b],
            [r, b],
        ]);
    }
    if spec.noise_amplitude > 0.0 {
        let a = spec.noise_amplitude;
        for x in data.iter_mut() {
            *x += rng.random_range(-a..=a);
        }
    }
    let fm = FeatureMap::new(w, h, c, data).map_err(|e| e.to_string())?;
    Ok((fm, KeypointSet::new(points, spec.gaussian_sigma)))
}
