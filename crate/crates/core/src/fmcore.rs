//! Feature maps, token sets and stage traces.
//!
//! Pixels are indexed row-major with `u` the column and `v` the row, origin at
//! the top-left corner, so pixel `i` sits at `(i % width, i / width)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Dense `width × height × channels` feature array, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"ATFM";

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidValue(format!(
                "feature map dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "feature map {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "feature map value {i} is not finite"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Channel vector of pixel `(u, v)`.
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_by_index(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Views the map as a `pixels × channels` matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.num_pixels(), self.channels, self.data.clone())
            .expect("feature map invariant")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FEATURE_MAP_MAGIC)?;
        for d in [self.width, self.height, self.channels] {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidValue(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 8);
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            kind: "feature map",
            msg,
        };
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|e| fmt(format!("short header: {e}")))?;
        if &header[..4] != FEATURE_MAP_MAGIC {
            return Err(fmt("bad magic, expected ATFM".into()));
        }
        let dim = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        let (w, h, c) = (dim(0) as usize, dim(1) as usize, dim(2) as usize);
        let n = w
            .checked_mul(h)
            .and_then(|x| x.checked_mul(c))
            .ok_or_else(|| fmt("dimensions overflow".into()))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != n * 8 {
            return Err(fmt(format!(
                "expected {} payload bytes for {w}x{h}x{c}, found {}",
                n * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        FeatureMap::new(w, h, c, data).map_err(|e| fmt(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

/// Pinhole intrinsics plus the camera's height above the ground plane and the
/// gain applied to the depth score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_height: f64,
    #[serde(default = "default_score_gain")]
    pub score_gain: f64,
}

fn default_score_gain() -> f64 {
    1.0
}

/// Average camera mounting height of the KITTI recording vehicles, in meters.
pub const KITTI_CAMERA_HEIGHT: f64 = 1.65;

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, cam_height: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            cam_height,
            score_gain: 1.0,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn with_score_gain(mut self, gain: f64) -> Result<Self> {
        self.score_gain = gain;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.cam_height,
            self.score_gain,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidValue(
                "camera parameters must be finite".into(),
            ));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidValue("focal lengths must be positive".into()));
        }
        if self.cam_height <= 0.0 {
            return Err(Error::InvalidValue("camera height must be positive".into()));
        }
        if self.score_gain <= 0.0 {
            return Err(Error::InvalidValue("score gain must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn pixel_coords(idx: usize, width: usize) -> (usize, usize) {
    (idx % width, idx / width)
}

/// Mean `(u, v)` of a region's pixels.
pub fn region_centroid(region: &[usize], width: usize) -> Result<[f64; 2]> {
    if region.is_empty() {
        return Err(Error::Partition("empty token region".into()));
    }
    let (mut su, mut sv) = (0.0, 0.0);
    for &idx in region {
        let (u, v) = pixel_coords(idx, width);
        su += u as f64;
        sv += v as f64;
    }
    let n = region.len() as f64;
    Ok([su / n, sv / n])
}

/// A set of tokens over a `width × height` pixel grid whose regions partition
/// the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    width: usize,
    height: usize,
    features: Matrix,
    regions: Vec<Vec<usize>>,
    positions: Vec<[f64; 2]>,
}

impl TokenSet {
    /// Builds a token set, sorting each region and checking the partition
    /// property. Positions are recomputed from the regions.
    pub fn new(
        width: usize,
        height: usize,
        features: Matrix,
        mut regions: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if features.rows() != regions.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} regions",
                features.rows(),
                regions.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidValue("token features must be finite".into()));
        }
        for r in regions.iter_mut() {
            r.sort_unstable();
        }
        check_partition(width, height, &regions)?;
        let positions = regions
            .iter()
            .map(|r| region_centroid(r, width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width,
            height,
            features,
            regions,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn regions(&self) -> &[Vec<usize>] {
        &self.regions
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    /// Same regions, new features.
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} tokens",
                features.rows(),
                self.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidValue("token features must be finite".into()));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Token index owning each pixel.
    pub fn pixel_labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.width * self.height];
        for (t, r) in self.regions.iter().enumerate() {
            for &p in r {
                labels[p] = t;
            }
        }
        labels
    }

    /// Scatters token features back onto the pixel grid.
    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        let c = self.dim();
        let mut data = vec![0.0; self.width * self.height * c];
        for (t, r) in self.regions.iter().enumerate() {
            for &p in r {
                data[p * c..(p + 1) * c].copy_from_slice(self.feature(t));
            }
        }
        FeatureMap::new(self.width, self.height, c, data)
    }
}

/// Checks that `regions` are non-empty, pairwise disjoint and cover
/// `0..width*height`.
pub fn check_partition(width: usize, height: usize, regions: &[Vec<usize>]) -> Result<()> {
    let n = width * height;
    let mut seen = vec![false; n];
    let mut covered = 0usize;
    for (t, r) in regions.iter().enumerate() {
        if r.is_empty() {
            return Err(Error::Partition(format!("token {t} has an empty region")));
        }
        for &p in r {
            if p >= n {
                return Err(Error::Partition(format!(
                    "token {t} references pixel {p} outside the {width}x{height} grid"
                )));
            }
            if seen[p] {
                return Err(Error::Partition(format!("pixel {p} belongs to two tokens")));
            }
            seen[p] = true;
            covered += 1;
        }
    }
    if covered != n {
        return Err(Error::Partition(format!(
            "regions cover {covered} of {n} pixels"
        )));
    }
    Ok(())
}

/// Every pixel becomes its own token.
pub fn slice_to_tokens(fm: &FeatureMap) -> TokenSet {
    let n = fm.num_pixels();
    let regions: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let positions = (0..n)
        .map(|i| {
            let (u, v) = pixel_coords(i, fm.width());
            [u as f64, v as f64]
        })
        .collect();
    TokenSet {
        width: fm.width(),
        height: fm.height(),
        features: fm.to_matrix(),
        regions,
        positions,
    }
}

/// Recomputes the centroid of every token region.
pub fn token_centroids(ts: &TokenSet) -> Result<Vec<[f64; 2]>> {
    ts.regions()
        .iter()
        .map(|r| region_centroid(r, ts.width()))
        .collect()
}

/// Record of one clustering stage, consumed by reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub stage_index: usize,
    pub assignment: Vec<usize>,
    pub center_token_indices: Vec<usize>,
    pub attention_scores: Vec<f64>,
    pub input_features: Matrix,
}

impl StageTrace {
    pub fn new(
        stage_index: usize,
        assignment: Vec<usize>,
        center_token_indices: Vec<usize>,
        attention_scores: Vec<f64>,
        input_features: Matrix,
    ) -> Result<Self> {
        let trace = Self {
            stage_index,
            assignment,
            center_token_indices,
            attention_scores,
            input_features,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn num_inputs(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.center_token_indices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n_in = self.assignment.len();
        let k = self.center_token_indices.len();
        if self.attention_scores.len() != n_in || self.input_features.rows() != n_in {
            return Err(Error::shape(format!(
                "stage {} trace: {} assignments, {} scores, {} feature rows",
                self.stage_index,
                n_in,
                self.attention_scores.len(),
                self.input_features.rows()
            )));
        }
        let mut used = vec![false; k];
        for &a in &self.assignment {
            if a >= k {
                return Err(Error::Index(format!(
                    "cluster index {a} with only {k} clusters"
                )));
            }
            used[a] = true;
        }
        if let Some(j) = used.iter().position(|u| !u) {
            return Err(Error::Partition(format!("cluster {j} is empty")));
        }
        for (j, &c) in self.center_token_indices.iter().enumerate() {
            if c >= n_in || self.assignment[c] != j {
                return Err(Error::Partition(format!(
                    "center {c} is not a member of its own cluster {j}"
                )));
            }
        }
        Ok(())
    }
}

/// Settings for the multi-stage token pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub num_stages: usize,
    pub token_schedule: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub d_k: usize,
    pub rng_seed: u64,
    /// Hidden width of feed-forward and reconstruction MLPs; `None` means
    /// twice the token feature width.
    pub mlp_hidden: Option<usize>,
    pub num_heads: usize,
    /// Divide positions by `max(width, height)` before the spatial term of
    /// the grouping indicator.
    pub normalize_positions: bool,
}

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.05;
pub const DEFAULT_NUM_STAGES: usize = 3;

impl PipelineConfig {
    /// Schedule shrinking the token count by `1/4` per stage.
    pub fn quarter_schedule(num_pixels: usize, num_stages: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(num_stages);
        let mut n = num_pixels;
        for _ in 0..num_stages {
            n = (n / 4).max(1);
            out.push(n);
        }
        out
    }

    pub fn with_schedule(token_schedule: Vec<usize>) -> Self {
        Self {
            num_stages: token_schedule.len(),
            token_schedule,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            d_k: 16,
            rng_seed: 0,
            mlp_hidden: None,
            num_heads: 1,
            normalize_positions: true,
        }
    }

    pub fn hidden_width(&self, channels: usize) -> usize {
        self.mlp_hidden.unwrap_or(2 * channels)
    }

    /// Validates against an input grid of `num_pixels` tokens.
    pub fn validate(&self, num_pixels: usize) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::config("at least one stage is required"));
        }
        if self.token_schedule.len() != self.num_stages {
            return Err(Error::config(format!(
                "num_stages is {} but token_schedule has {} entries",
                self.num_stages,
                self.token_schedule.len()
            )));
        }
        let mut prev = num_pixels;
        for (l, &n) in self.token_schedule.iter().enumerate() {
            if n == 0 {
                return Err(Error::config(format!("stage {} has zero tokens", l + 1)));
            }
            if l == 0 && n > num_pixels {
                return Err(Error::config(format!(
                    "stage 1 asks for {n} tokens but the map has only {num_pixels} pixels"
                )));
            }
            if l > 0 && n >= prev {
                return Err(Error::config(format!(
                    "token schedule must be strictly decreasing, got {prev} then {n}"
                )));
            }
            prev = n;
        }
        if self.d_k == 0 || self.num_heads == 0 || !self.d_k.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_k = {} must be a positive multiple of num_heads = {}",
                self.d_k, self.num_heads
            )));
        }
        if self.mlp_hidden == Some(0) {
            return Err(Error::config("mlp_hidden must be positive"));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::config("alpha and beta must be finite"));
        }
        Ok(())
    }
}
