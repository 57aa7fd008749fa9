use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atoken::FeatureMap;
use atoken_cli::render::{token_color, TokenMap, BACKDROP};
use atoken_cli::run::RENDER_SCALE;
use atoken_cli::scene::SceneSpec;
use serde_json::Value;

fn atoken(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atoken"))
        .args(args)
        .output()
        .expect("spawn atoken")
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn small_scene(dir: &Path) -> String {
    let spec = SceneSpec::random(3, 8, 8, 4);
    write(
        &dir.join("scene.json"),
        &serde_json::to_string(&spec).unwrap(),
    )
}

#[test]
fn run_reports_schedule_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        &tmp.path().join("c.json"),
        r#"{"token_schedule": [64, 16, 4], "rng_seed": 1}"#,
    );
    let scene = small_scene(tmp.path());
    let out = tmp.path().join("out");
    let o = atoken(&[
        "run",
        "--config",
        &cfg,
        "--scene",
        &scene,
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["input_tokens"], 64);
    assert_eq!(
        metrics["stage_token_counts"],
        serde_json::json!([64, 16, 4])
    );
    assert_eq!(metrics["total_attention_pairs"], 64 * 64 + 16 * 64 + 4 * 16);
    assert!(metrics.get("timings").is_none());

    let fm = FeatureMap::from_bytes(&fs::read(out.join("features.atfm")).unwrap()).unwrap();
    assert_eq!((fm.width(), fm.height(), fm.channels()), (8, 8, 4));

    let map: TokenMap =
        serde_json::from_str(&fs::read_to_string(out.join("tokens.json")).unwrap()).unwrap();
    assert_eq!(map.regions.len(), 4);
    assert!(map.labels().is_ok());
}

#[test]
fn oversized_schedule_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        &tmp.path().join("c.json"),
        r#"{"token_schedule": [65, 16, 4]}"#,
    );
    let scene = small_scene(tmp.path());
    let out = tmp.path().join("out");
    let o = atoken(&[
        "run",
        "--config",
        &cfg,
        "--scene",
        &scene,
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("metrics.json").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(&tmp.path().join("c.json"), r#"{"gamma": 1.0}"#);
    let out = tmp.path().join("out");
    let o = atoken(&["run", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(&tmp.path().join("c.json"), "{}");
    let missing = tmp.path().join("nope.atfm");
    let out = tmp.path().join("out");
    let o = atoken(&[
        "run",
        "--config",
        &cfg,
        "--input",
        missing.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn input_feature_map_round_trips_through_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data: Vec<f64> = (0..6 * 5 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
    let fm = FeatureMap::new(6, 5, 2, data).unwrap();
    let input = tmp.path().join("in.atfm");
    fs::write(&input, fm.to_bytes()).unwrap();
    let cfg = write(&tmp.path().join("c.json"), r#"{"token_schedule": [10, 3]}"#);
    let out = tmp.path().join("out");
    let o = atoken(&[
        "run",
        "--config",
        &cfg,
        "--input",
        input.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let back = FeatureMap::from_bytes(&fs::read(out.join("features.atfm")).unwrap()).unwrap();
    assert_eq!((back.width(), back.height(), back.channels()), (6, 5, 2));
}

#[test]
fn verify_passes() {
    let o = atoken(&["verify", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|r| r["pass"] == true));
}

fn parse_ppm(bytes: &[u8]) -> (usize, usize, &[u8]) {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap().to_owned());
    }
    assert_eq!(fields[0], "P6");
    (
        fields[1].parse().unwrap(),
        fields[2].parse().unwrap(),
        &bytes[pos + 1..],
    )
}

#[test]
fn render_covers_every_pixel_with_its_token_color() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(&tmp.path().join("c.json"), r#"{"token_schedule": [20, 5]}"#);
    let scene = small_scene(tmp.path());
    let out = tmp.path().join("out");
    assert!(atoken(&[
        "run",
        "--config",
        &cfg,
        "--scene",
        &scene,
        "--out-dir",
        out.to_str().unwrap()
    ])
    .status
    .success());
    let tokens = out.join("tokens.json");
    let ppm = tmp.path().join("again.ppm");
    let svg = tmp.path().join("again.svg");
    assert!(atoken(&[
        "render",
        "--tokens",
        tokens.to_str().unwrap(),
        "--out",
        ppm.to_str().unwrap()
    ])
    .status
    .success());
    assert!(atoken(&[
        "render",
        "--tokens",
        tokens.to_str().unwrap(),
        "--out",
        svg.to_str().unwrap()
    ])
    .status
    .success());
    assert_eq!(
        fs::read(&ppm).unwrap(),
        fs::read(out.join("tokens.ppm")).unwrap()
    );
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let map: TokenMap = serde_json::from_str(&fs::read_to_string(&tokens).unwrap()).unwrap();
    let labels = map.labels().unwrap();
    let bytes = fs::read(&ppm).unwrap();
    let (w, h, px) = parse_ppm(&bytes);
    assert!(w >= map.width * RENDER_SCALE && h == map.height * RENDER_SCALE);
    for v in 0..map.height {
        for u in 0..map.width {
            // The top-left sample of each block is never on an outline.
            let (x, y) = (u * RENDER_SCALE, v * RENDER_SCALE);
            let i = 3 * (y * w + x);
            let rgb = [px[i], px[i + 1], px[i + 2]];
            assert_ne!(rgb, BACKDROP);
            assert_eq!(
                rgb,
                token_color(labels[v * map.width + u]),
                "pixel ({u},{v})"
            );
        }
    }
}
