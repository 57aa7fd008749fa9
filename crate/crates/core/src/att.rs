//! Adaptive token transformer: outline-preferred grouping, attention-weighted
//! merging and score-biased cross attention, repeated over the stage schedule.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::cce::{select_centers, token_scores, ScoreMap};
use crate::error::{Error, Result};
use crate::fmcore::{slice_to_tokens, FeatureMap, PipelineConfig, StageTrace, TokenSet};
use crate::linalg::{dot, gelu, softmax_in_place, LayerNorm, Linear, Matrix};
use crate::weights::WeightLayer;

/// Standard deviation of seeded transformer weights.
pub const INIT_STD: f64 = 0.02;

pub(crate) fn seeded_linear<R: Rng>(rng: &mut R, input: usize, output: usize, std: f64) -> Linear {
    let normal = Normal::new(0.0, std).unwrap();
    let w = (0..input * output).map(|_| normal.sample(rng)).collect();
    Linear::new(
        Matrix::from_vec(output, input, w).unwrap(),
        vec![0.0; output],
    )
    .unwrap()
}

/// Linear read-out of the per-token attention score `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScoreHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl AttentionScoreHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn seeded<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        Self {
            weight: (0..dim).map(|_| normal.sample(rng)).collect(),
            bias: 0.0,
        }
    }

    pub fn to_weight_layer(&self) -> WeightLayer {
        WeightLayer {
            out: 1,
            inp: self.weight.len(),
            kh: 1,
            kw: 1,
            weights: self.weight.clone(),
            biases: vec![self.bias],
        }
    }

    pub fn from_weight_layer(l: &WeightLayer) -> Result<Self> {
        let lin = l.to_linear()?;
        if lin.out_dim() != 1 {
            return Err(Error::shape("attention score head must have one output"));
        }
        Ok(Self {
            weight: lin.weight.into_vec(),
            bias: lin.bias[0],
        })
    }
}

/// Pre-norm cross-attention block: merged tokens query the stage's input
/// tokens, followed by a two-layer feed-forward. Both sub-layers are residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub num_heads: usize,
}

impl TransformerBlock {
    pub fn zeros(dim: usize, d_k: usize, hidden: usize, num_heads: usize) -> Self {
        Self {
            norm1: LayerNorm {
                gamma: vec![0.0; dim],
                beta: vec![0.0; dim],
            },
            query: Linear::zeros(dim, d_k),
            key: Linear::zeros(dim, d_k),
            value: Linear::zeros(dim, d_k),
            output: Linear::zeros(d_k, dim),
            norm2: LayerNorm {
                gamma: vec![0.0; dim],
                beta: vec![0.0; dim],
            },
            ff1: Linear::zeros(dim, hidden),
            ff2: Linear::zeros(hidden, dim),
            num_heads,
        }
    }

    pub fn seeded<R: Rng>(
        dim: usize,
        d_k: usize,
        hidden: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::identity(dim),
            query: seeded_linear(rng, dim, d_k, INIT_STD),
            key: seeded_linear(rng, dim, d_k, INIT_STD),
            value: seeded_linear(rng, dim, d_k, INIT_STD),
            output: seeded_linear(rng, d_k, dim, INIT_STD),
            norm2: LayerNorm::identity(dim),
            ff1: seeded_linear(rng, dim, hidden, INIT_STD),
            ff2: seeded_linear(rng, hidden, dim, INIT_STD),
            num_heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.norm1.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.dim();
        let d_k = self.query.out_dim();
        let ok = self.norm2.dim() == c
            && self.query.in_dim() == c
            && self.key.in_dim() == c
            && self.value.in_dim() == c
            && self.key.out_dim() == d_k
            && self.value.out_dim() == d_k
            && self.output.in_dim() == d_k
            && self.output.out_dim() == c
            && self.ff1.in_dim() == c
            && self.ff2.in_dim() == self.ff1.out_dim()
            && self.ff2.out_dim() == c
            && self.num_heads > 0
            && d_k.is_multiple_of(self.num_heads);
        if !ok {
            return Err(Error::shape("transformer block shapes do not chain"));
        }
        Ok(())
    }

    /// Layers in order: norm1, query, key, value, output, norm2, ff1, ff2.
    /// Norms are stored as `(C, 1, 1, 1)` layers with gamma as weights and
    /// beta as biases.
    pub fn to_weight_layers(&self) -> Vec<WeightLayer> {
        let norm = |n: &LayerNorm| WeightLayer {
            out: n.dim(),
            inp: 1,
            kh: 1,
            kw: 1,
            weights: n.gamma.clone(),
            biases: n.beta.clone(),
        };
        vec![
            norm(&self.norm1),
            WeightLayer::from_linear(&self.query),
            WeightLayer::from_linear(&self.key),
            WeightLayer::from_linear(&self.value),
            WeightLayer::from_linear(&self.output),
            norm(&self.norm2),
            WeightLayer::from_linear(&self.ff1),
            WeightLayer::from_linear(&self.ff2),
        ]
    }

    pub fn from_weight_layers(layers: &[WeightLayer], num_heads: usize) -> Result<Self> {
        if layers.len() != 8 {
            return Err(Error::shape(format!(
                "transformer block needs 8 layers, got {}",
                layers.len()
            )));
        }
        let norm = |l: &WeightLayer| -> Result<LayerNorm> {
            if l.inp != 1 || l.kh != 1 || l.kw != 1 {
                return Err(Error::shape("normalization layer must be (C,1,1,1)"));
            }
            Ok(LayerNorm {
                gamma: l.weights.clone(),
                beta: l.biases.clone(),
            })
        };
        let blk = Self {
            norm1: norm(&layers[0])?,
            query: layers[1].to_linear()?,
            key: layers[2].to_linear()?,
            value: layers[3].to_linear()?,
            output: layers[4].to_linear()?,
            norm2: norm(&layers[5])?,
            ff1: layers[6].to_linear()?,
            ff2: layers[7].to_linear()?,
            num_heads,
        };
        blk.validate()?;
        Ok(blk)
    }
}

/// Assigns every token to the center minimizing squared feature distance
/// minus `beta` times squared centroid distance. Ties go to the lower center
/// index and each center is pinned to its own cluster.
pub fn assign_clusters(ts: &TokenSet, centers: &[usize], beta: f64) -> Result<Vec<usize>> {
    check_centers(ts.len(), centers)?;
    let c = ts.dim();
    let mut center_feats = Vec::with_capacity(centers.len() * c);
    for &j in centers {
        center_feats.extend_from_slice(ts.feature(j));
    }
    let center_pos: Vec<[f64; 2]> = centers.iter().map(|&j| ts.positions()[j]).collect();

    let mut assignment: Vec<usize> = (0..ts.len())
        .into_par_iter()
        .map(|i| {
            let x = ts.feature(i);
            let [u, v] = ts.positions()[i];
            let mut best = 0usize;
            let mut best_delta = f64::INFINITY;
            for j in 0..centers.len() {
                let feat = sq_dist(x, &center_feats[j * c..(j + 1) * c]);
                let [cu, cv] = center_pos[j];
                let (du, dv) = (u - cu, v - cv);
                let delta = feat - beta * (du * du + dv * dv);
                if delta < best_delta {
                    best_delta = delta;
                    best = j;
                }
            }
            best
        })
        .collect();
    for (j, &ci) in centers.iter().enumerate() {
        assignment[ci] = j;
    }
    Ok(assignment)
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub(crate) fn check_centers(n: usize, centers: &[usize]) -> Result<()> {
    if centers.is_empty() {
        return Err(Error::Index("no cluster centers given".into()));
    }
    let mut seen = vec![false; n];
    for &c in centers {
        if c >= n {
            return Err(Error::Index(format!("center {c} with only {n} tokens")));
        }
        if seen[c] {
            return Err(Error::DuplicateCenter(c));
        }
        seen[c] = true;
    }
    Ok(())
}

/// Per-token attention score `p_i = w·x_i + b`.
pub fn attention_scores(ts: &TokenSet, head: &AttentionScoreHead) -> Result<Vec<f64>> {
    if head.weight.len() != ts.dim() {
        return Err(Error::shape(format!(
            "score head over {} channels applied to {}-channel tokens",
            head.weight.len(),
            ts.dim()
        )));
    }
    Ok((0..ts.len())
        .map(|i| dot(&head.weight, ts.feature(i)) + head.bias)
        .collect())
}

/// Members of each cluster in ascending token order.
pub(crate) fn cluster_members(assignment: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        members[a].push(i);
    }
    members
}

/// Softmax-of-`p` weighted mean of the rows `members` of `x`.
pub(crate) fn weighted_mean(x: &Matrix, p: &[f64], members: &[usize]) -> Vec<f64> {
    let max = members
        .iter()
        .map(|&j| p[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut num = vec![0.0; x.cols()];
    let mut den = 0.0;
    for &j in members {
        let w = (p[j] - max).exp();
        den += w;
        for (n, &xv) in num.iter_mut().zip(x.row(j)) {
            *n += w * xv;
        }
    }
    num.iter_mut().for_each(|n| *n /= den);
    num
}

/// Merges each cluster into one token whose feature is the `e^p`-weighted mean
/// of its members and whose region is the union of theirs. Merged token `j`
/// corresponds to `centers[j]`.
pub fn merge_clusters(
    ts: &TokenSet,
    assignment: &[usize],
    p: &[f64],
    centers: &[usize],
    stage_index: usize,
) -> Result<(TokenSet, StageTrace)> {
    if assignment.len() != ts.len() || p.len() != ts.len() {
        return Err(Error::shape(format!(
            "{} tokens, {} assignments, {} scores",
            ts.len(),
            assignment.len(),
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue(
            "attention scores must be finite".into(),
        ));
    }
    let trace = StageTrace::new(
        stage_index,
        assignment.to_vec(),
        centers.to_vec(),
        p.to_vec(),
        ts.features().clone(),
    )?;
    let k = centers.len();
    let members = cluster_members(assignment, k);
    let merged: Vec<(Vec<f64>, Vec<usize>)> = members
        .par_iter()
        .map(|m| {
            let feat = weighted_mean(ts.features(), p, m);
            let mut region: Vec<usize> = m
                .iter()
                .flat_map(|&j| ts.regions()[j].iter().copied())
                .collect();
            region.sort_unstable();
            (feat, region)
        })
        .collect();
    let c = ts.dim();
    let mut data = Vec::with_capacity(k * c);
    let mut regions = Vec::with_capacity(k);
    for (f, r) in merged {
        data.extend_from_slice(&f);
        regions.push(r);
    }
    let out = TokenSet::new(
        ts.width(),
        ts.height(),
        Matrix::from_vec(k, c, data)?,
        regions,
    )?;
    Ok((out, trace))
}

/// `softmax(Q Kᵀ / √d_k + 1 pᵀ) V` together with the attention matrix.
pub fn biased_attention_with_weights(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    p: &[f64],
) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() || k.rows() != v.rows() || p.len() != k.rows() {
        return Err(Error::shape(format!(
            "attention with Q {}x{}, K {}x{}, V {}x{}, p {}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols(),
            p.len()
        )));
    }
    if k.rows() == 0 {
        return Err(Error::shape("attention over zero keys"));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut weights = q.matmul_t(k)?;
    let m = k.rows();
    weights.as_mut_slice().par_chunks_mut(m).for_each(|row| {
        for (s, &pj) in row.iter_mut().zip(p) {
            *s = *s * scale + pj;
        }
        softmax_in_place(row);
    });
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

pub fn biased_attention(q: &Matrix, k: &Matrix, v: &Matrix, p: &[f64]) -> Result<Matrix> {
    biased_attention_with_weights(q, k, v, p).map(|(o, _)| o)
}

fn columns(m: &Matrix, start: usize, len: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * len);
    for i in 0..m.rows() {
        data.extend_from_slice(&m.row(i)[start..start + len]);
    }
    Matrix::from_vec(m.rows(), len, data).unwrap()
}

/// Runs the cross-attention block with merged tokens as queries and the
/// stage's input tokens as keys and values. Regions are untouched.
pub fn transformer_stage(
    merged: &TokenSet,
    original: &TokenSet,
    p: &[f64],
    blk: &TransformerBlock,
) -> Result<TokenSet> {
    blk.validate()?;
    if merged.dim() != blk.dim() || original.dim() != blk.dim() {
        return Err(Error::shape(format!(
            "block over {} channels given tokens of {} and {}",
            blk.dim(),
            merged.dim(),
            original.dim()
        )));
    }
    let x = merged.features();
    let qn = blk.norm1.forward(x)?;
    let kn = blk.norm1.forward(original.features())?;
    let q = blk.query.forward(&qn)?;
    let k = blk.key.forward(&kn)?;
    let v = blk.value.forward(&kn)?;

    let d_k = q.cols();
    let hd = d_k / blk.num_heads;
    let mut heads = Matrix::zeros(q.rows(), d_k);
    for h in 0..blk.num_heads {
        let o = biased_attention(
            &columns(&q, h * hd, hd),
            &columns(&k, h * hd, hd),
            &columns(&v, h * hd, hd),
            p,
        )?;
        for i in 0..o.rows() {
            heads.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(o.row(i));
        }
    }
    let x = x.add(&blk.output.forward(&heads)?)?;

    let mut hidden = blk.ff1.forward(&blk.norm2.forward(&x)?)?;
    hidden.as_mut_slice().iter_mut().for_each(|h| *h = gelu(*h));
    let x = x.add(&blk.ff2.forward(&hidden)?)?;
    merged.with_features(x)
}

/// Per-stage learned parameters of the token transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttModel {
    pub heads: Vec<AttentionScoreHead>,
    pub blocks: Vec<TransformerBlock>,
}

impl AttModel {
    pub fn seeded<R: Rng>(cfg: &PipelineConfig, dim: usize, rng: &mut R) -> Self {
        let hidden = cfg.hidden_width(dim);
        let mut heads = Vec::with_capacity(cfg.num_stages);
        let mut blocks = Vec::with_capacity(cfg.num_stages);
        for _ in 0..cfg.num_stages {
            heads.push(AttentionScoreHead::seeded(dim, rng));
            blocks.push(TransformerBlock::seeded(
                dim,
                cfg.d_k,
                hidden,
                cfg.num_heads,
                rng,
            ));
        }
        Self { heads, blocks }
    }

    pub fn zeros(cfg: &PipelineConfig, dim: usize) -> Self {
        let hidden = cfg.hidden_width(dim);
        Self {
            heads: vec![AttentionScoreHead::zeros(dim); cfg.num_stages],
            blocks: vec![
                TransformerBlock::zeros(dim, cfg.d_k, hidden, cfg.num_heads);
                cfg.num_stages
            ],
        }
    }
}

/// Spatial weight actually applied to raw pixel centroids.
pub fn effective_beta(cfg: &PipelineConfig, width: usize, height: usize) -> f64 {
    if cfg.normalize_positions {
        let s = width.max(height) as f64;
        cfg.beta / (s * s)
    } else {
        cfg.beta
    }
}

/// Output of one grouping-and-merging stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub tokens: TokenSet,
    pub trace: StageTrace,
    pub token_scores: Vec<f64>,
}

/// Runs one stage: rank tokens, pick centers, group, score, merge, attend.
pub fn run_stage(
    tokens: &TokenSet,
    s: &ScoreMap,
    n_l: usize,
    beta: f64,
    head: &AttentionScoreHead,
    blk: &TransformerBlock,
    stage_index: usize,
) -> Result<StageOutput> {
    let scores = token_scores(tokens, s)?;
    let centers = select_centers(tokens, n_l, &scores)?;
    let assignment = assign_clusters(tokens, &centers, beta)?;
    let p = attention_scores(tokens, head)?;
    let (merged, trace) = merge_clusters(tokens, &assignment, &p, &centers, stage_index)?;
    let out = transformer_stage(&merged, tokens, &p, blk)?;
    Ok(StageOutput {
        tokens: out,
        trace,
        token_scores: scores,
    })
}

/// Runs every stage of the schedule starting from per-pixel tokens.
pub fn run_att(
    fm: &FeatureMap,
    s: &ScoreMap,
    cfg: &PipelineConfig,
    model: &AttModel,
) -> Result<(TokenSet, Vec<StageTrace>)> {
    cfg.validate(fm.num_pixels())?;
    if model.heads.len() != cfg.num_stages || model.blocks.len() != cfg.num_stages {
        return Err(Error::config(format!(
            "{} stages configured but model has {} heads and {} blocks",
            cfg.num_stages,
            model.heads.len(),
            model.blocks.len()
        )));
    }
    if s.width() != fm.width() || s.height() != fm.height() {
        return Err(Error::shape("score map does not match the feature map"));
    }
    let beta = effective_beta(cfg, fm.width(), fm.height());
    let mut tokens = slice_to_tokens(fm);
    let mut traces = Vec::with_capacity(cfg.num_stages);
    for (l, &n_l) in cfg.token_schedule.iter().enumerate() {
        let stage = run_stage(
            &tokens,
            s,
            n_l,
            beta,
            &model.heads[l],
            &model.blocks[l],
            l + 1,
        )?;
        tokens = stage.tokens;
        traces.push(stage.trace);
    }
    Ok((tokens, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(width: usize, height: usize, feats: &[Vec<f64>]) -> TokenSet {
        let regions = (0..feats.len()).map(|i| vec![i]).collect();
        TokenSet::new(width, height, Matrix::from_rows(feats).unwrap(), regions).unwrap()
    }

    #[test]
    fn assign_pure_feature_nearest() {
        let ts = tokens(3, 1, &[vec![0.0], vec![10.0], vec![1.0]]);
        assert_eq!(assign_clusters(&ts, &[0, 1], 0.0).unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn assign_hand_evaluated_indicator() {
        // 5x5 grid. Token at (0,0) = pixel 0 with feature (0,0); center A at
        // (3,4) = pixel 23 with feature (1,0); center B at (0,1) = pixel 5
        // with feature (0,2). delta_A = 1 - 0.04*25 = 0, delta_B = 4 - 0.04 = 3.96.
        let mut feats = vec![vec![9.0, 9.0]; 25];
        feats[0] = vec![0.0, 0.0];
        feats[23] = vec![1.0, 0.0];
        feats[5] = vec![0.0, 2.0];
        let ts = tokens(5, 5, &feats);
        let a = assign_clusters(&ts, &[23, 5], 0.04).unwrap();
        assert_eq!(a[0], 0);
        assert_eq!(a[23], 0);
        assert_eq!(a[5], 1);
    }

    #[test]
    fn assign_identical_token_goes_to_that_center() {
        let ts = tokens(4, 1, &[vec![1.0], vec![5.0], vec![5.0], vec![3.0]]);
        // Token 2 duplicates center 1's feature but sits elsewhere; with
        // beta = 0 its delta to center 1 is zero.
        assert_eq!(assign_clusters(&ts, &[3, 1], 0.0).unwrap()[2], 1);
        assert_eq!(assign_clusters(&ts, &[3, 1], 0.0).unwrap()[1], 1);
    }

    #[test]
    fn assign_ties_go_to_lower_center_and_centers_are_pinned() {
        let ts = tokens(3, 1, &[vec![0.0], vec![1.0], vec![-1.0]]);
        assert_eq!(assign_clusters(&ts, &[1, 2], 0.0).unwrap(), vec![0, 0, 1]);
        // A large beta would pull center 0 toward the far center 1.
        let a = assign_clusters(&ts, &[0, 2], 100.0).unwrap();
        assert_eq!(a[0], 0);
        assert_eq!(a[2], 1);
    }

    #[test]
    fn assign_rejects_bad_centers() {
        let ts = tokens(2, 1, &[vec![0.0], vec![1.0]]);
        assert!(matches!(
            assign_clusters(&ts, &[1, 1], 0.0),
            Err(Error::DuplicateCenter(1))
        ));
        assert!(assign_clusters(&ts, &[], 0.0).is_err());
        assert!(assign_clusters(&ts, &[2], 0.0).is_err());
    }

    #[test]
    fn attention_score_examples() {
        let ts = tokens(1, 1, &[vec![3.0, 7.0]]);
        assert_eq!(
            attention_scores(&ts, &AttentionScoreHead::zeros(2)).unwrap(),
            vec![0.0]
        );
        let head = AttentionScoreHead {
            weight: vec![1.0, 0.0],
            bias: 0.0,
        };
        assert_eq!(attention_scores(&ts, &head).unwrap(), vec![3.0]);
        assert!(attention_scores(&ts, &AttentionScoreHead::zeros(3)).is_err());

        let ts = tokens(3, 1, &[vec![0.1, 0.2], vec![-1.0, 4.0], vec![2.0, 2.0]]);
        let h1 = AttentionScoreHead::seeded(2, &mut ChaCha8Rng::seed_from_u64(4));
        let h2 = AttentionScoreHead::seeded(2, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(
            attention_scores(&ts, &h1).unwrap(),
            attention_scores(&ts, &h2).unwrap()
        );
    }

    #[test]
    fn merge_examples() {
        let ts = tokens(2, 1, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (m, trace) = merge_clusters(&ts, &[0, 0], &[0.0, 0.0], &[0], 1).unwrap();
        assert_eq!(m.feature(0), &[0.5, 0.5]);
        assert_eq!(m.regions(), &[vec![0, 1]]);
        assert_eq!(m.positions(), &[[0.5, 0.0]]);
        assert_eq!(trace.input_features, *ts.features());

        let (m, _) = merge_clusters(&ts, &[0, 0], &[3f64.ln(), 0.0], &[0], 1).unwrap();
        assert!((m.feature(0)[0] - 0.75).abs() < 1e-15);
        assert!((m.feature(0)[1] - 0.25).abs() < 1e-15);

        let (m, _) = merge_clusters(&ts, &[0, 1], &[5.0, -3.0], &[0, 1], 1).unwrap();
        assert_eq!(m.features(), ts.features());
    }

    #[test]
    fn merge_rejects_invalid_assignment() {
        let ts = tokens(3, 1, &[vec![1.0], vec![2.0], vec![3.0]]);
        assert!(merge_clusters(&ts, &[0, 0, 0], &[0.0; 3], &[0, 1], 1).is_err());
        assert!(merge_clusters(&ts, &[0, 1, 1], &[0.0; 3], &[1, 2], 1).is_err());
        assert!(merge_clusters(&ts, &[0, 1], &[0.0; 3], &[0, 1], 1).is_err());
    }

    #[test]
    fn biased_attention_hand_evaluated() {
        let q = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![4.0], vec![0.0]]).unwrap();
        let (o, w) = biased_attention_with_weights(&q, &k, &v, &[3f64.ln(), 0.0]).unwrap();
        assert!((w.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((o.get(0, 0) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn biased_attention_masks_very_negative_scores() {
        let q = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.3, 0.2], vec![1.0, 2.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0], vec![100.0]]).unwrap();
        let o = biased_attention(&q, &k, &v, &[0.0, -1e4]).unwrap();
        assert_eq!(o.get(0, 0), 1.0);
        assert!(biased_attention(&q, &k, &v, &[0.0]).is_err());
    }

    #[test]
    fn zero_block_is_residual_only() {
        let orig = tokens(3, 1, &[vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]]);
        let (merged, _) = merge_clusters(&orig, &[0, 0, 1], &[0.0; 3], &[0, 2], 1).unwrap();
        let blk = TransformerBlock::zeros(2, 4, 4, 2);
        let out = transformer_stage(&merged, &orig, &[0.1, 0.2, 0.3], &blk).unwrap();
        assert_eq!(out.features(), merged.features());
        assert_eq!(out.regions(), merged.regions());
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let ts = tokens(1, 1, &[vec![0.7, -0.2, 1.5]]);
        let blk = TransformerBlock::seeded(3, 4, 6, 1, &mut ChaCha8Rng::seed_from_u64(2));
        let qn = blk.norm1.forward(ts.features()).unwrap();
        let q = blk.query.forward(&qn).unwrap();
        let k = blk.key.forward(&qn).unwrap();
        let v = blk.value.forward(&qn).unwrap();
        let (o, w) = biased_attention_with_weights(&q, &k, &v, &[0.0]).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
        assert_eq!(o, v);
    }

    #[test]
    fn block_weight_layers_roundtrip() {
        let blk = TransformerBlock::seeded(3, 4, 6, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let back = TransformerBlock::from_weight_layers(&blk.to_weight_layers(), 2).unwrap();
        assert_eq!(back, blk);
        let head = AttentionScoreHead::seeded(3, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(
            AttentionScoreHead::from_weight_layer(&head.to_weight_layer()).unwrap(),
            head
        );
    }

    fn ramp_map(w: usize, h: usize, c: usize) -> FeatureMap {
        let data = (0..w * h * c)
            .map(|i| ((i * 7919) % 97) as f64 / 97.0)
            .collect();
        FeatureMap::new(w, h, c, data).unwrap()
    }

    #[test]
    fn single_stage_every_token_a_center() {
        let fm = ramp_map(4, 4, 3);
        let s = ScoreMap::new(4, 4, (0..16).map(|i| i as f64).collect()).unwrap();
        let cfg = PipelineConfig::with_schedule(vec![16]);
        let model = AttModel::seeded(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let tokens = slice_to_tokens(&fm);
        let stage = run_stage(&tokens, &s, 16, 0.05, &model.heads[0], &model.blocks[0], 1).unwrap();
        let centers = &stage.trace.center_token_indices;
        for (i, &a) in stage.trace.assignment.iter().enumerate() {
            assert_eq!(centers[a], i);
        }
        // Before the block, merged token j is exactly the input token centers[j].
        let p = &stage.trace.attention_scores;
        let (merged, _) = merge_clusters(&tokens, &stage.trace.assignment, p, centers, 1).unwrap();
        for (j, &c) in centers.iter().enumerate() {
            assert_eq!(merged.feature(j), tokens.feature(c));
        }
    }

    #[test]
    fn three_stage_schedule_counts() {
        let fm = ramp_map(8, 8, 4);
        let s = ScoreMap::new(8, 8, (0..64).map(|i| -(i as f64 / 8.0).floor()).collect()).unwrap();
        let cfg = PipelineConfig::with_schedule(vec![64, 16, 4]);
        let model = AttModel::seeded(&cfg, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let (out, traces) = run_att(&fm, &s, &cfg, &model).unwrap();
        assert_eq!(out.len(), 4);
        let counts: Vec<(usize, usize)> = traces
            .iter()
            .map(|t| (t.num_inputs(), t.num_clusters()))
            .collect();
        assert_eq!(counts, vec![(64, 64), (64, 16), (16, 4)]);
        crate::fmcore::check_partition(8, 8, out.regions()).unwrap();

        let (again, traces2) = run_att(&fm, &s, &cfg, &model).unwrap();
        assert_eq!(again, out);
        assert_eq!(traces2, traces);

        let bad = PipelineConfig::with_schedule(vec![65, 16]);
        assert!(run_att(
            &fm,
            &s,
            &bad,
            &AttModel::seeded(&bad, 4, &mut ChaCha8Rng::seed_from_u64(1))
        )
        .is_err());
    }
}
