//! Bitwise replays of stored outputs. Set `ATOKEN_BLESS=1` (or delete a file)
//! to regenerate.

use std::fs;
use std::path::PathBuf;

use atoken::att::{transformer_stage, TransformerBlock};
use atoken::numerics::random_token_set;
use atoken::{run_pipeline, CameraIntrinsics, FeatureMap, Model, PipelineConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_golden(name: &str, values: &[f64]) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    let text: String = values
        .iter()
        .map(|v| format!("{:016x}\n", v.to_bits()))
        .collect();
    if std::env::var_os("ATOKEN_BLESS").is_some() || !path.exists() {
        fs::write(&path, &text).unwrap();
        return;
    }
    let stored = fs::read_to_string(&path).unwrap();
    let want: Vec<u64> = stored
        .lines()
        .map(|l| u64::from_str_radix(l, 16).unwrap())
        .collect();
    let got: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
    assert_eq!(got.len(), want.len(), "{name}: length changed");
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        assert_eq!(
            g,
            w,
            "{name}[{i}]: {} != {}",
            f64::from_bits(*g),
            f64::from_bits(*w)
        );
    }
}

#[test]
fn transformer_stage_golden() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let original = random_token_set(&mut rng, 6, 6, 12, 4);
    let merged = random_token_set(&mut rng, 6, 6, 3, 4);
    let p: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let blk = TransformerBlock::seeded(4, 8, 16, 2, &mut rng);
    let out = transformer_stage(&merged, &original, &p, &blk).unwrap();
    check_golden("transformer_stage.hex", out.features().as_slice());
}

#[test]
fn reconstruct_golden() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let data: Vec<f64> = (0..8 * 8 * 3)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let fm = FeatureMap::new(8, 8, 3, data).unwrap();
    let cam = CameraIntrinsics::new(8.0, 8.0, 3.5, 1.5, 1.65).unwrap();
    let mut cfg = PipelineConfig::with_schedule(vec![16, 4]);
    cfg.rng_seed = 5;
    let out = run_pipeline(&fm, &cam, &cfg, &Model::seeded(&cfg, 3)).unwrap();
    check_golden("reconstruct_8x8.hex", out.reconstructed.as_slice());
}
