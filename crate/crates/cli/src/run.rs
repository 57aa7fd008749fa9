//! The `run`, `verify` and `render` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use atoken::cce::{focal_loss, keypoint_heatmap, SemanticScorer};
use atoken::numerics::{verification_suite, GradCheckReport};
use atoken::pipeline::{run_pipeline, Model};
use atoken::weights::read_layers;
use atoken::FeatureMap;

use crate::config::RunConfig;
use crate::metrics::{PhaseTimings, RunMetrics};
use crate::render::{render_token_map, render_token_svg, TokenMap};
use crate::scene::{generate_scene, SceneSpec};

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Io(anyhow::Error),
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Verification(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e:#}"),
            Failure::Io(e) => write!(f, "i/o error: {e:#}"),
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<atoken::Error> for Failure {
    fn from(e: atoken::Error) -> Self {
        match e {
            atoken::Error::Io(_) | atoken::Error::Format { .. } => Failure::Io(e.into()),
            other => Failure::Config(other.into()),
        }
    }
}

fn io_err<E: Into<anyhow::Error>>(path: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Io(e.into().context(format!("{}", path.display())))
}

pub enum Source {
    Scene(PathBuf),
    Input(PathBuf),
    DefaultScene,
}

pub struct RunArgs {
    pub config: PathBuf,
    pub source: Source,
    pub out_dir: PathBuf,
}

/// File names written into the output directory.
pub const FEATURES_FILE: &str = "features.atfm";
pub const TOKENS_FILE: &str = "tokens.json";
pub const TOKENS_PPM: &str = "tokens.ppm";
pub const TOKENS_SVG: &str = "tokens.svg";
pub const METRICS_FILE: &str = "metrics.json";
pub const RENDER_SCALE: usize = 8;

/// Executes scoring, token stages and reconstruction, and writes the dense
/// output map, the final token map (JSON, PPM, SVG) and the metrics.
pub fn run(args: &RunArgs) -> Result<RunMetrics, Failure> {
    let start = Instant::now();
    let text = fs::read_to_string(&args.config).map_err(io_err(&args.config))?;
    let rc = RunConfig::from_json(&text)
        .map_err(|e| Failure::Config(anyhow!(e).context(args.config.display().to_string())))?;

    let (fm, camera, keypoints) = match &args.source {
        Source::Input(path) => {
            let bytes = fs::read(path).map_err(io_err(path))?;
            let fm = FeatureMap::from_bytes(&bytes).map_err(io_err(path))?;
            let cam = rc
                .camera_for(fm.width(), fm.height())
                .map_err(|e| Failure::Config(anyhow!(e)))?;
            (fm, cam, None)
        }
        Source::Scene(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let spec: SceneSpec = serde_json::from_str(&text)
                .map_err(|e| Failure::Config(anyhow!(e).context(path.display().to_string())))?;
            scene_inputs(&spec, rc.rng_seed.unwrap_or(0))?
        }
        Source::DefaultScene => {
            scene_inputs(&SceneSpec::default_scene(), rc.rng_seed.unwrap_or(0))?
        }
    };

    let cfg = rc
        .pipeline_config(fm.num_pixels())
        .map_err(|e| Failure::Config(anyhow!(e)))?;
    let mut model = Model::seeded(&cfg, fm.channels());
    if let Some(path) = &rc.scorer_weights {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let layers = read_layers(&bytes[..]).map_err(io_err(path))?;
        model.scorer = SemanticScorer::from_weight_layers(&layers)?;
    }

    let out = run_pipeline(&fm, &camera, &cfg, &model)?;
    let mut metrics = RunMetrics::from_traces(&out.traces);
    if let Some(kps) = &keypoints {
        let gt = keypoint_heatmap(kps, fm.width(), fm.height())?;
        metrics.cce_focal_loss = Some(focal_loss(&out.scores, &gt)?);
    }

    fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    let write = |name: &str, bytes: &[u8]| -> Result<(), Failure> {
        let p = args.out_dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))
    };
    write(FEATURES_FILE, &out.reconstructed.to_bytes())?;

    let tm = TokenMap {
        width: fm.width(),
        height: fm.height(),
        regions: out.final_tokens.regions().to_vec(),
        pixel_scores: Some(out.scores.values().to_vec()),
    };
    write(TOKENS_FILE, &to_json(&tm)?)?;
    let labels = out.final_tokens.pixel_labels();
    let img = render_token_map(
        fm.width(),
        fm.height(),
        &labels,
        Some(&out.scores),
        RENDER_SCALE,
    );
    write(TOKENS_PPM, &img.to_ppm())?;
    write(
        TOKENS_SVG,
        render_token_svg(fm.width(), fm.height(), &labels, RENDER_SCALE).as_bytes(),
    )?;
    write(METRICS_FILE, &to_json(&metrics)?)?;

    let total = start.elapsed().as_secs_f64() * 1e3;
    metrics.timings = Some(PhaseTimings {
        scoring_ms: out.timings.scoring.as_secs_f64() * 1e3,
        tokens_ms: out.timings.tokens.as_secs_f64() * 1e3,
        reconstruction_ms: out.timings.reconstruction.as_secs_f64() * 1e3,
        total_ms: total,
    });
    Ok(metrics)
}

fn scene_inputs(
    spec: &SceneSpec,
    seed: u64,
) -> Result<
    (
        FeatureMap,
        atoken::CameraIntrinsics,
        Option<atoken::cce::KeypointSet>,
    ),
    Failure,
> {
    let (fm, kps) = generate_scene(spec, seed).map_err(|e| Failure::Config(anyhow!(e)))?;
    Ok((fm, spec.camera, Some(kps)))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>, Failure> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Failure::Io(e.into()))?;
    s.push(b'\n');
    Ok(s)
}

/// Runs the numerics suite; every report is returned even when some fail.
pub fn verify(seed: u64) -> Result<Vec<GradCheckReport>, Failure> {
    Ok(verification_suite(seed)?)
}

/// Renders a `tokens.json` file to PPM, or SVG when `out` ends in `.svg`.
pub fn render(tokens: &Path, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(tokens).map_err(io_err(tokens))?;
    let tm: TokenMap = serde_json::from_str(&text)
        .with_context(|| tokens.display().to_string())
        .map_err(Failure::Config)?;
    let labels = tm.labels().map_err(|e| Failure::Config(anyhow!(e)))?;
    let bytes = if out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("svg"))
    {
        render_token_svg(tm.width, tm.height, &labels, RENDER_SCALE).into_bytes()
    } else {
        let scores = tm.score_map().map_err(|e| Failure::Config(anyhow!(e)))?;
        render_token_map(tm.width, tm.height, &labels, scores.as_ref(), RENDER_SCALE).to_ppm()
    };
    fs::write(out, bytes).map_err(io_err(out))
}
