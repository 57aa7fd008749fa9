#![allow(clippy::needless_range_loop)]

use atoken::cce::{keypoint_heatmap, token_scores, KeypointSet, ScoreMap};
use atoken::mfr::{aggregate_stage, upsample_stage};
use atoken::numerics::random_token_set;
use atoken::{
    run_pipeline, CameraIntrinsics, FeatureMap, Matrix, Model, PipelineConfig, StageTrace,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn token_scores_match_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(1..=64);
        let ts = random_token_set(&mut rng, 8, 8, n, 1);
        let vals: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = ScoreMap::new(8, 8, vals.clone()).unwrap();
        let got = token_scores(&ts, &s).unwrap();
        for (t, region) in ts.regions().iter().enumerate() {
            let mut sum = 0.0;
            for v in 0..8 {
                for u in 0..8 {
                    if region.contains(&(v * 8 + u)) {
                        sum += vals[v * 8 + u];
                    }
                }
            }
            assert!((got[t] - sum / region.len() as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn heatmap_matches_pixel_loop() {
    let kps = KeypointSet::new(vec![[2.3, 3.6], [6.0, 1.0]], 1.5);
    let hm = keypoint_heatmap(&kps, 9, 7).unwrap();
    for v in 0..7 {
        for u in 0..9 {
            let g = |cu: f64, cv: f64| {
                let d2 = (u as f64 - cu).powi(2) + (v as f64 - cv).powi(2);
                (-d2 / (2.0 * 1.5 * 1.5)).exp()
            };
            let want = g(2.0, 4.0).max(g(6.0, 1.0));
            assert!((hm.get(u, v) - want).abs() <= 1e-15, "pixel ({u},{v})");
        }
    }
}

#[test]
fn upsample_and_aggregate_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let n = rng.random_range(2..=30);
        let k = rng.random_range(1..=n);
        let c = rng.random_range(1..=5);
        let mut assignment: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let centers: Vec<usize> = (0..k).collect();
        assignment[..k]
            .iter_mut()
            .enumerate()
            .for_each(|(j, a)| *a = j);
        let inputs = Matrix::from_vec(
            n,
            c,
            (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let merged = Matrix::from_vec(
            k,
            c,
            (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let trace =
            StageTrace::new(1, assignment.clone(), centers, vec![0.0; n], inputs.clone()).unwrap();
        let up = upsample_stage(&merged, &trace).unwrap();
        let agg = aggregate_stage(&up, &trace).unwrap();
        for i in 0..n {
            for ch in 0..c {
                assert_eq!(up.get(i, ch), merged.get(assignment[i], ch));
                assert_eq!(
                    agg.get(i, ch),
                    merged.get(assignment[i], ch) + inputs.get(i, ch)
                );
            }
        }
    }
}

#[test]
fn pipeline_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data: Vec<f64> = (0..12 * 10 * 3)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let fm = FeatureMap::new(12, 10, 3, data).unwrap();
    let cam = CameraIntrinsics::new(12.0, 12.0, 6.0, 2.0, 1.65).unwrap();
    let mut cfg = PipelineConfig::with_schedule(vec![40, 12, 3]);
    cfg.rng_seed = 99;
    let a = run_pipeline(&fm, &cam, &cfg, &Model::seeded(&cfg, 3)).unwrap();
    let b = run_pipeline(&fm, &cam, &cfg, &Model::seeded(&cfg, 3)).unwrap();
    assert_eq!(a.reconstructed.to_bytes(), b.reconstructed.to_bytes());
    assert_eq!(a.final_tokens, b.final_tokens);
    assert_eq!(a.traces, b.traces);
}
