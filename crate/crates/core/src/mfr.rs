//! Multi-stage feature reconstruction: replay the recorded cluster
//! assignments backwards to turn the final tokens into a dense feature map.

use rand::Rng;

use crate::att::{seeded_linear, INIT_STD};
use crate::error::{Error, Result};
use crate::fmcore::{FeatureMap, StageTrace, TokenSet};
use crate::linalg::{gelu, Linear, Matrix};
use crate::weights::WeightLayer;

/// Residual two-layer MLP: `x + fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    pub fn seeded<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: seeded_linear(rng, dim, hidden, INIT_STD),
            fc2: seeded_linear(rng, hidden, dim, INIT_STD),
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if self.fc2.in_dim() != self.fc1.out_dim() || self.fc2.out_dim() != self.fc1.in_dim() {
            return Err(Error::shape("MLP block shapes do not chain"));
        }
        let mut h = self.fc1.forward(x)?;
        h.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        x.add(&self.fc2.forward(&h)?)
    }

    pub fn to_weight_layers(&self) -> Vec<WeightLayer> {
        vec![
            WeightLayer::from_linear(&self.fc1),
            WeightLayer::from_linear(&self.fc2),
        ]
    }

    pub fn from_weight_layers(layers: &[WeightLayer]) -> Result<Self> {
        match layers {
            [a, b] => Ok(Self {
                fc1: a.to_linear()?,
                fc2: b.to_linear()?,
            }),
            _ => Err(Error::shape(format!(
                "MLP block needs 2 layers, got {}",
                layers.len()
            ))),
        }
    }
}

/// Copies each merged token's feature back to every token of its cluster.
pub fn upsample_stage(merged_feats: &Matrix, trace: &StageTrace) -> Result<Matrix> {
    if merged_feats.rows() != trace.num_clusters() {
        return Err(Error::shape(format!(
            "{} merged tokens for a stage with {} clusters",
            merged_feats.rows(),
            trace.num_clusters()
        )));
    }
    let c = merged_feats.cols();
    let mut out = Matrix::zeros(trace.num_inputs(), c);
    for (i, &a) in trace.assignment.iter().enumerate() {
        if a >= merged_feats.rows() {
            return Err(Error::Index(format!(
                "assignment {a} with {} merged tokens",
                merged_feats.rows()
            )));
        }
        out.row_mut(i).copy_from_slice(merged_feats.row(a));
    }
    Ok(out)
}

/// Adds the stage's recorded input features to the upsampled tokens.
pub fn aggregate_stage(upsampled: &Matrix, trace: &StageTrace) -> Result<Matrix> {
    upsampled.add(&trace.input_features)
}

/// Unwinds the stages from last to first (upsample, aggregate, MLP) and lays
/// the resulting per-pixel tokens out as a feature map.
pub fn reconstruct(
    final_tokens: &TokenSet,
    traces: &[StageTrace],
    mlps: &[MlpBlock],
) -> Result<FeatureMap> {
    let (w, h) = (final_tokens.width(), final_tokens.height());
    if traces.is_empty() {
        return Err(Error::config(
            "reconstruction needs at least one stage trace",
        ));
    }
    if mlps.len() != traces.len() {
        return Err(Error::config(format!(
            "{} stage traces but {} MLP blocks",
            traces.len(),
            mlps.len()
        )));
    }
    if traces[0].num_inputs() != w * h {
        return Err(Error::config(format!(
            "first stage consumed {} tokens, expected one per pixel ({})",
            traces[0].num_inputs(),
            w * h
        )));
    }
    for pair in traces.windows(2) {
        if pair[0].num_clusters() != pair[1].num_inputs() {
            return Err(Error::config(format!(
                "stage {} produced {} tokens but stage {} consumed {}",
                pair[0].stage_index,
                pair[0].num_clusters(),
                pair[1].stage_index,
                pair[1].num_inputs()
            )));
        }
    }
    if final_tokens.len() != traces.last().unwrap().num_clusters() {
        return Err(Error::config(format!(
            "{} final tokens for a last stage with {} clusters",
            final_tokens.len(),
            traces.last().unwrap().num_clusters()
        )));
    }

    let mut feats = final_tokens.features().clone();
    for (trace, mlp) in traces.iter().zip(mlps).rev() {
        let up = upsample_stage(&feats, trace)?;
        let agg = aggregate_stage(&up, trace)?;
        feats = mlp.forward(&agg)?;
    }
    // Stage-0 tokens are single pixels in pixel-index order.
    let c = feats.cols();
    FeatureMap::new(w, h, c, feats.into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmcore::slice_to_tokens;

    fn trace(assignment: Vec<usize>, centers: Vec<usize>, feats: Matrix) -> StageTrace {
        let n = assignment.len();
        StageTrace::new(1, assignment, centers, vec![0.0; n], feats).unwrap()
    }

    #[test]
    fn upsample_copies() {
        let t = trace(vec![0, 0, 1], vec![0, 2], Matrix::zeros(3, 1));
        let merged = Matrix::from_rows(&[vec![2.0], vec![5.0]]).unwrap();
        assert_eq!(
            upsample_stage(&merged, &t).unwrap().as_slice(),
            &[2.0, 2.0, 5.0]
        );
        let id = trace(vec![0, 1], vec![0, 1], Matrix::zeros(2, 2));
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(upsample_stage(&m, &id).unwrap(), m);
        assert!(upsample_stage(&Matrix::zeros(3, 1), &t).is_err());
    }

    #[test]
    fn aggregate_adds() {
        let t = trace(vec![0], vec![0], Matrix::from_rows(&[vec![1.0]]).unwrap());
        let up = Matrix::from_rows(&[vec![2.0]]).unwrap();
        assert_eq!(aggregate_stage(&up, &t).unwrap().as_slice(), &[3.0]);
        let z = trace(vec![0], vec![0], Matrix::zeros(1, 1));
        assert_eq!(aggregate_stage(&up, &z).unwrap(), up);
        assert!(aggregate_stage(&Matrix::zeros(1, 2), &t).is_err());
    }

    #[test]
    fn identity_single_stage_lays_out_final_features() {
        let fm = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ts = slice_to_tokens(&fm);
        let t = trace(vec![0, 1, 2, 3], vec![0, 1, 2, 3], Matrix::zeros(4, 1));
        let out = reconstruct(&ts, &[t], &[MlpBlock::zeros(1, 2)]).unwrap();
        assert_eq!(out, fm);
    }

    #[test]
    fn singleton_two_stage_sums_inputs() {
        // Stage 1 maps 3 pixels to 3 singletons in a permuted order, stage 2
        // keeps all three. Zero MLPs: output = final + stage2 input + stage1 input.
        let s1_in = Matrix::from_rows(&[vec![1.0], vec![10.0], vec![100.0]]).unwrap();
        let t1 = StageTrace::new(1, vec![2, 0, 1], vec![1, 2, 0], vec![0.0; 3], s1_in).unwrap();
        let s2_in = Matrix::from_rows(&[vec![0.5], vec![0.25], vec![0.125]]).unwrap();
        let t2 = StageTrace::new(2, vec![0, 1, 2], vec![0, 1, 2], vec![0.0; 3], s2_in).unwrap();
        let fin = Matrix::from_rows(&[vec![7.0], vec![8.0], vec![9.0]]).unwrap();
        let final_tokens = TokenSet::new(3, 1, fin, vec![vec![1], vec![2], vec![0]]).unwrap();
        let mlps = vec![MlpBlock::zeros(1, 2), MlpBlock::zeros(1, 2)];
        let out = reconstruct(&final_tokens, &[t1, t2], &mlps).unwrap();
        // Pixel 0 belongs to stage-1 cluster 2, i.e. stage-2 token 2.
        assert_eq!(
            out.as_slice(),
            &[9.0 + 0.125 + 1.0, 7.0 + 0.5 + 10.0, 8.0 + 0.25 + 100.0]
        );
    }

    #[test]
    fn reconstruct_rejects_mismatched_traces() {
        let fm = FeatureMap::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let ts = slice_to_tokens(&fm);
        let t = trace(vec![0, 1], vec![0, 1], Matrix::zeros(2, 1));
        assert!(reconstruct(&ts, std::slice::from_ref(&t), &[]).is_err());
        assert!(reconstruct(&ts, &[], &[]).is_err());
        let short = trace(vec![0], vec![0], Matrix::zeros(1, 1));
        assert!(reconstruct(&ts, &[short], &[MlpBlock::zeros(1, 1)]).is_err());
    }
}
