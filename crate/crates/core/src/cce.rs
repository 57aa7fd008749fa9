//! Cluster center estimation: ground-plane depth prior, semantic scoring,
//! score combination, token ranking and the keypoint focal-loss objective.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmcore::{CameraIntrinsics, FeatureMap, TokenSet};
use crate::weights::WeightLayer;

/// Per-pixel scalar scores, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "score map {width}x{height} given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(
                "score map values must be finite".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    fn same_shape(&self, other: &ScoreMap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(format!(
                "score maps {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Back-projects pixel `(u, v)` at depth `z_hat` into camera coordinates.
pub fn back_project(u: f64, v: f64, z_hat: f64, k: &CameraIntrinsics) -> Result<[f64; 3]> {
    if z_hat.is_nan() || z_hat <= 0.0 {
        return Err(Error::NonPositiveDepth(z_hat));
    }
    Ok([(u - k.cx) / k.fx * z_hat, (v - k.cy) / k.fy * z_hat, z_hat])
}

/// Depth at which the ray through row `v` meets a ground plane `cam_height`
/// below the camera.
pub fn ground_depth(v: f64, k: &CameraIntrinsics) -> Result<f64> {
    if v.is_nan() || v <= k.cy {
        return Err(Error::AboveHorizon { v, cy: k.cy });
    }
    Ok(k.fy * k.cam_height / (v - k.cy))
}

/// Depth score of a single row: the negated, rectified inverse ground depth.
pub fn depth_score_row(v: f64, k: &CameraIntrinsics) -> f64 {
    let arg = k.score_gain * (v - k.cy) / (k.fy * k.cam_height);
    -arg.max(0.0)
}

/// Depth score map. Each row is computed once and broadcast across columns.
pub fn depth_score(k: &CameraIntrinsics, height: usize, width: usize) -> ScoreMap {
    let mut values = Vec::with_capacity(width * height);
    for v in 0..height {
        let s = depth_score_row(v as f64, k);
        values.extend(std::iter::repeat_n(s, width));
    }
    ScoreMap {
        width,
        height,
        values,
    }
}

/// One stride-1, zero-padded convolution of the semantic scorer.
/// Weights are laid out `(out, in, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} must have odd extents"
            )));
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::shape("convolution with zero channels"));
        }
        if weights.len() != out_channels * in_channels * kh * kw || biases.len() != out_channels {
            return Err(Error::shape(format!(
                "conv ({out_channels},{in_channels},{kh},{kw}) given {} weights, {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            biases,
        })
    }

    /// Channel-last input of `width × height × in_channels`.
    fn forward(&self, input: &[f64], width: usize, height: usize) -> Vec<f64> {
        let (co, ci, kh, kw) = (self.out_channels, self.in_channels, self.kh, self.kw);
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut out = vec![0.0; width * height * co];
        out.par_chunks_mut(width * co)
            .enumerate()
            .for_each(|(v, orow)| {
                for u in 0..width {
                    for o in 0..co {
                        let mut acc = self.biases[o];
                        for dy in 0..kh {
                            let y = v as isize + dy as isize - ph;
                            if y < 0 || y >= height as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let x = u as isize + dx as isize - pw;
                                if x < 0 || x >= width as isize {
                                    continue;
                                }
                                let px = (y as usize * width + x as usize) * ci;
                                for c in 0..ci {
                                    let w = self.weights[((o * ci + c) * kh + dy) * kw + dx];
                                    acc += w * input[px + c];
                                }
                            }
                        }
                        orow[u * co + o] = acc;
                    }
                }
            });
        out
    }
}

/// Small convolutional stack producing one semantic score per pixel, with
/// ReLU between layers and a linear last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScorer {
    layers: Vec<ConvLayer>,
}

pub const SCORER_HIDDEN: usize = 16;

impl SemanticScorer {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("semantic scorer needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::shape(format!(
                    "layer with {} outputs feeds a layer with {} inputs",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        if layers.last().unwrap().out_channels != 1 {
            return Err(Error::shape("semantic scorer must output one channel"));
        }
        Ok(Self { layers })
    }

    /// Default architecture: 3×3 conv `C → 16`, ReLU, 3×3 conv `16 → 1`,
    /// weights drawn from `N(0, 1/fan_in)`.
    pub fn seeded<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut layer = |co: usize, ci: usize| {
            let fan_in = (ci * 9) as f64;
            let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).unwrap();
            let weights = (0..co * ci * 9).map(|_| normal.sample(rng)).collect();
            ConvLayer::new(co, ci, 3, 3, weights, vec![0.0; co]).unwrap()
        };
        let first = layer(SCORER_HIDDEN, channels);
        let second = layer(1, SCORER_HIDDEN);
        Self {
            layers: vec![first, second],
        }
    }

    pub fn zeros(channels: usize) -> Self {
        let l1 = ConvLayer::new(
            SCORER_HIDDEN,
            channels,
            3,
            3,
            vec![0.0; SCORER_HIDDEN * channels * 9],
            vec![0.0; SCORER_HIDDEN],
        )
        .unwrap();
        let l2 = ConvLayer::new(
            1,
            SCORER_HIDDEN,
            3,
            3,
            vec![0.0; SCORER_HIDDEN * 9],
            vec![0.0],
        )
        .unwrap();
        Self {
            layers: vec![l1, l2],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn to_weight_layers(&self) -> Vec<WeightLayer> {
        self.layers
            .iter()
            .map(|l| WeightLayer {
                out: l.out_channels,
                inp: l.in_channels,
                kh: l.kh,
                kw: l.kw,
                weights: l.weights.clone(),
                biases: l.biases.clone(),
            })
            .collect()
    }

    pub fn from_weight_layers(layers: &[WeightLayer]) -> Result<Self> {
        let convs = layers
            .iter()
            .map(|l| {
                ConvLayer::new(
                    l.out,
                    l.inp,
                    l.kh,
                    l.kw,
                    l.weights.clone(),
                    l.biases.clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(convs)
    }
}

/// Runs the semantic scorer over a feature map.
pub fn semantic_score(fm: &FeatureMap, scorer: &SemanticScorer) -> Result<ScoreMap> {
    if scorer.in_channels() != fm.channels() {
        return Err(Error::shape(format!(
            "scorer expects {} channels, feature map has {}",
            scorer.in_channels(),
            fm.channels()
        )));
    }
    let (w, h) = (fm.width(), fm.height());
    let last = scorer.layers.len() - 1;
    let mut act = fm.as_slice().to_vec();
    for (i, layer) in scorer.layers.iter().enumerate() {
        act = layer.forward(&act, w, h);
        if i < last {
            act.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    ScoreMap::new(w, h, act)
}

/// Element-wise `sd + alpha·ss`.
pub fn combine_scores(sd: &ScoreMap, ss: &ScoreMap, alpha: f64) -> Result<ScoreMap> {
    sd.same_shape(ss)?;
    let values = sd
        .values
        .iter()
        .zip(&ss.values)
        .map(|(d, s)| d + alpha * s)
        .collect();
    ScoreMap::new(sd.width, sd.height, values)
}

/// Mean pixel score over each token's region.
pub fn token_scores(ts: &TokenSet, s: &ScoreMap) -> Result<Vec<f64>> {
    if ts.width() != s.width || ts.height() != s.height {
        return Err(Error::shape(format!(
            "token grid {}x{} against score map {}x{}",
            ts.width(),
            ts.height(),
            s.width,
            s.height
        )));
    }
    Ok(ts
        .regions()
        .iter()
        .map(|r| r.iter().fold(0.0, |acc, &p| acc + s.values[p]) / r.len() as f64)
        .collect())
}

/// Indices of the `n_l` highest-scoring tokens, ordered by descending score
/// and then ascending index.
pub fn select_centers(ts: &TokenSet, n_l: usize, scores: &[f64]) -> Result<Vec<usize>> {
    if scores.len() != ts.len() {
        return Err(Error::shape(format!(
            "{} scores for {} tokens",
            scores.len(),
            ts.len()
        )));
    }
    rank_top(scores, n_l)
}

pub(crate) fn rank_top(scores: &[f64], n_l: usize) -> Result<Vec<usize>> {
    if n_l == 0 || n_l > scores.len() {
        return Err(Error::Index(format!(
            "cannot pick {n_l} centers from {} tokens",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n_l);
    Ok(order)
}

/// Ground-truth keypoints in pixel units plus the splat width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<[f64; 2]>,
    pub gaussian_sigma: f64,
}

pub const DEFAULT_GAUSSIAN_SIGMA: f64 = 2.0;

impl KeypointSet {
    pub fn new(points: Vec<[f64; 2]>, gaussian_sigma: f64) -> Self {
        Self {
            points,
            gaussian_sigma,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.gaussian_sigma.is_nan() || self.gaussian_sigma <= 0.0 {
            return Err(Error::InvalidValue(
                "gaussian sigma must be positive".into(),
            ));
        }
        for &[u, v] in &self.points {
            let inside =
                u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64;
            if !inside {
                return Err(Error::InvalidValue(format!(
                    "keypoint ({u}, {v}) outside the {width}x{height} map"
                )));
            }
        }
        Ok(())
    }
}

/// Splats each keypoint (snapped to its nearest pixel) as a Gaussian and takes
/// the per-pixel maximum.
pub fn keypoint_heatmap(kps: &KeypointSet, width: usize, height: usize) -> Result<ScoreMap> {
    kps.validate(width, height)?;
    let denom = 2.0 * kps.gaussian_sigma * kps.gaussian_sigma;
    let centers: Vec<(f64, f64)> = kps
        .points
        .iter()
        .map(|&[u, v]| (u.round(), v.round()))
        .collect();
    let mut values = vec![0.0; width * height];
    for v in 0..height {
        for u in 0..width {
            let mut best: f64 = 0.0;
            for &(cu, cv) in &centers {
                let (du, dv) = (u as f64 - cu, v as f64 - cv);
                best = best.max((-(du * du + dv * dv) / denom).exp());
            }
            values[v * width + u] = best;
        }
    }
    ScoreMap::new(width, height, values)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Penalty-reduced focal loss between sigmoid-squashed logits and a keypoint
/// heatmap, normalized by the number of exact-one ground-truth pixels.
pub fn focal_loss(pred: &ScoreMap, gt_heatmap: &ScoreMap) -> Result<f64> {
    pred.same_shape(gt_heatmap)?;
    let mut total = 0.0;
    let mut positives = 0usize;
    for (&z, &g) in pred.values.iter().zip(&gt_heatmap.values) {
        let p = sigmoid(z);
        if g == 1.0 {
            positives += 1;
            // log σ(z) = −softplus(−z)
            total += (1.0 - p).powi(2) * softplus(-z);
        } else {
            // log(1 − σ(z)) = −softplus(z)
            total += (1.0 - g).powi(4) * p * p * softplus(z);
        }
    }
    Ok(total / positives.max(1) as f64)
}
