//! Attention-cost accounting and token-size statistics.

use atoken::cce::ScoreMap;
use atoken::{StageTrace, TokenSet};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub scoring_ms: f64,
    pub tokens_ms: f64,
    pub reconstruction_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Per-pixel token count `n_0`.
    pub input_tokens: usize,
    /// `n_1 … n_N`.
    pub stage_token_counts: Vec<usize>,
    /// `n_l · n_{l−1}` query-key pairs per stage.
    pub attention_pairs: Vec<u64>,
    pub total_attention_pairs: u64,
    /// `n_0² · N` pairs for full-resolution grid tokens at every stage.
    pub grid_attention_pairs: u64,
    pub reduction_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cce_focal_loss: Option<f64>,
    /// Reported on stdout only; never present in the metrics file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PhaseTimings>,
}

impl RunMetrics {
    pub fn from_counts(input_tokens: usize, stage_token_counts: &[usize]) -> Self {
        let mut prev = input_tokens as u64;
        let attention_pairs: Vec<u64> = stage_token_counts
            .iter()
            .map(|&n| {
                let pairs = n as u64 * prev;
                prev = n as u64;
                pairs
            })
            .collect();
        let total: u64 = attention_pairs.iter().sum();
        let n0 = input_tokens as u64;
        let grid = n0 * n0 * stage_token_counts.len() as u64;
        Self {
            input_tokens,
            stage_token_counts: stage_token_counts.to_vec(),
            attention_pairs,
            total_attention_pairs: total,
            grid_attention_pairs: grid,
            reduction_factor: grid as f64 / total as f64,
            cce_focal_loss: None,
            timings: None,
        }
    }

    pub fn from_traces(traces: &[StageTrace]) -> Self {
        let n0 = traces.first().map_or(0, StageTrace::num_inputs);
        let counts: Vec<usize> = traces.iter().map(StageTrace::num_clusters).collect();
        Self::from_counts(n0, &counts)
    }
}

/// Mean token area (in pixels) over the highest- and lowest-scoring tenth of
/// the pixels. Ties in score are broken by pixel index.
pub fn decile_token_areas(tokens: &TokenSet, scores: &ScoreMap) -> (f64, f64) {
    let labels = tokens.pixel_labels();
    let area: Vec<f64> = labels
        .iter()
        .map(|&t| tokens.regions()[t].len() as f64)
        .collect();
    let vals = scores.values();
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let k = (vals.len() / 10).max(1);
    let mean = |idx: &[usize]| idx.iter().map(|&i| area[i]).sum::<f64>() / idx.len() as f64;
    (mean(&order[..k]), mean(&order[order.len() - k..]))
}
