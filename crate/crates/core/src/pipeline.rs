//! End-to-end pipeline: scores, adaptive token stages, reconstruction.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::att::{run_att, AttModel};
use crate::cce::{
    combine_scores, depth_score, semantic_score, token_scores, ScoreMap, SemanticScorer,
};
use crate::error::{Error, Result};
use crate::fmcore::{CameraIntrinsics, FeatureMap, PipelineConfig, StageTrace, TokenSet};
use crate::mfr::{reconstruct, MlpBlock};

/// Every learned parameter of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub scorer: SemanticScorer,
    pub att: AttModel,
    pub mlps: Vec<MlpBlock>,
}

impl Model {
    /// Draws all weights from a ChaCha8 stream seeded with `cfg.rng_seed`, in
    /// the order scorer, per-stage head and block, per-stage MLP.
    pub fn seeded(cfg: &PipelineConfig, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let scorer = SemanticScorer::seeded(channels, &mut rng);
        let att = AttModel::seeded(cfg, channels, &mut rng);
        let hidden = cfg.hidden_width(channels);
        let mlps = (0..cfg.num_stages)
            .map(|_| MlpBlock::seeded(channels, hidden, &mut rng))
            .collect();
        Self { scorer, att, mlps }
    }
}

/// Wall-clock time spent in each phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseDurations {
    pub scoring: Duration,
    pub tokens: Duration,
    pub reconstruction: Duration,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub depth_scores: ScoreMap,
    pub semantic_scores: ScoreMap,
    pub scores: ScoreMap,
    pub final_tokens: TokenSet,
    pub final_token_scores: Vec<f64>,
    pub traces: Vec<StageTrace>,
    pub reconstructed: FeatureMap,
    pub timings: PhaseDurations,
}

/// Scores the map once and reuses those pixel scores at every stage.
pub fn compute_scores(
    fm: &FeatureMap,
    camera: &CameraIntrinsics,
    scorer: &SemanticScorer,
    alpha: f64,
) -> Result<(ScoreMap, ScoreMap, ScoreMap)> {
    camera.validate()?;
    let sd = depth_score(camera, fm.height(), fm.width());
    let ss = semantic_score(fm, scorer)?;
    let s = combine_scores(&sd, &ss, alpha)?;
    Ok((sd, ss, s))
}

pub fn run_pipeline(
    fm: &FeatureMap,
    camera: &CameraIntrinsics,
    cfg: &PipelineConfig,
    model: &Model,
) -> Result<PipelineOutput> {
    cfg.validate(fm.num_pixels())?;
    if model.mlps.len() != cfg.num_stages {
        return Err(Error::config(format!(
            "{} stages configured but {} reconstruction MLPs",
            cfg.num_stages,
            model.mlps.len()
        )));
    }
    let t0 = Instant::now();
    let (sd, ss, s) = compute_scores(fm, camera, &model.scorer, cfg.alpha)?;
    let t1 = Instant::now();
    let (final_tokens, traces) = run_att(fm, &s, cfg, &model.att)?;
    let t2 = Instant::now();
    let reconstructed = reconstruct(&final_tokens, &traces, &model.mlps)?;
    let t3 = Instant::now();
    let final_token_scores = token_scores(&final_tokens, &s)?;
    Ok(PipelineOutput {
        depth_scores: sd,
        semantic_scores: ss,
        scores: s,
        final_tokens,
        final_token_scores,
        traces,
        reconstructed,
        timings: PhaseDurations {
            scoring: t1 - t0,
            tokens: t2 - t1,
            reconstruction: t3 - t2,
        },
    })
}
