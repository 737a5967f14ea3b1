//! Command-line entry points: dataset generation, training, rendering,
//! animation, evaluation, exports, and the gradient audit.
//!
//! Every run writes a `run_manifest.json` into its output directory before
//! long work starts and updates it on completion. All randomness flows from
//! `--seed`; `--deterministic` additionally removes sampling jitter so
//! repeated invocations are bit-identical.

use crate::diff::{gradcheck, GradcheckCfg};
use crate::eval::{
    extract_density_grid, hausdorff_pct, project_bbox_mask, region_metrics, tracking_error,
    RegionMetrics,
};
use crate::render::{render_image, Layer, PipelineCfg, RenderModel};
use crate::scene::{
    generate_dataset_named, load_dataset, load_scene_file, preset_by_name, save_f32_sidecar,
    Camera, Dataset, Image,
};
use crate::se3::{compose, exp, inverse, log, PoseRows, RigidTransform, Twist};
use crate::loss::LossBreakdown;
use crate::trainer::{
    checkpoint_load, checkpoint_save, resume_training, run_training, Phase, TrainConfig,
    TrainMode, TrainState,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "splitnerf",
    version,
    about = "Reconstructs a rigidly moving object and its static background from multi-view video by jointly optimizing two radiance fields and per-frame poses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Master seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: hardware concurrency; env SPLITNERF_THREADS
    /// overrides the default, the flag overrides both).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Fully deterministic sampling (midpoint/quantile rules, no jitter).
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand)]
pub enum Command {
    /// Render a procedural scene into a dataset directory.
    Gen(GenArgs),
    /// Train on a generated dataset.
    Train(TrainArgs),
    /// Render views from a checkpoint.
    Render(RenderArgs),
    /// Re-render with a user-supplied object trajectory.
    Animate(AnimateArgs),
    /// Held-out-view metrics, pose tracking error, reconstruction quality.
    Eval(EvalArgs),
    /// Export occupancy point clouds or the estimated trajectory.
    Export(ExportArgs),
    /// Finite-difference audit of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Bundled scene preset (`desk` or `bar`).
    #[arg(long, conflicts_with = "scene")]
    pub preset: Option<String>,
    /// Custom scene description (JSON).
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference-renderer quadrature intervals per ray.
    #[arg(long, default_value_t = 2048)]
    pub oracle_samples: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config; defaults to the desk-scale preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model variant.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Ablation switches (repeatable): no_init, no_online, no_entropy.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps (caps both phase budgets).
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr_field: Option<f64>,
    #[arg(long)]
    pub lr_pose: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Star,
    NerfStatic,
    NerfTime,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LayerArg {
    Composed,
    Static,
    Dynamic,
}

impl From<LayerArg> for Layer {
    fn from(l: LayerArg) -> Layer {
        match l {
            LayerArg::Composed => Layer::Composed,
            LayerArg::Static => Layer::StaticOnly,
            LayerArg::Dynamic => Layer::DynamicOnly,
        }
    }
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory providing the cameras.
    #[arg(long)]
    pub dataset: PathBuf,
    /// View index (defaults to the held-out view).
    #[arg(long)]
    pub view: Option<usize>,
    /// Integer frame to render (uses the stored pose exactly).
    #[arg(long, conflicts_with = "time")]
    pub frame: Option<usize>,
    /// Continuous time; object poses interpolate in twist space.
    #[arg(long)]
    pub time: Option<f64>,
    /// Replace estimated poses with a trajectory file (object motion,
    /// one row-major 3x4 pose per line).
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "composed")]
    pub layer: LayerArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Object-motion trajectory file; one frame is rendered per line.
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long)]
    pub view: Option<usize>,
    #[arg(long, value_enum, default_value = "composed")]
    pub layer: LayerArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Density threshold for the reconstruction occupancy grid.
    #[arg(long, default_value_t = 50.0)]
    pub sigma_min: f64,
    /// Occupancy grid resolution per axis over the scene cube.
    #[arg(long, default_value_t = 96)]
    pub grid_resolution: usize,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ExportWhat {
    /// Dynamic-field occupancy point cloud (XYZ text).
    DensityGrid,
    /// Estimated object-motion trajectory (3x4 rows per line).
    Poses,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub what: ExportWhat,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50.0)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 96)]
    pub grid_resolution: usize,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub rays: usize,
    /// Check at most this many coordinates per field (default: all).
    #[arg(long)]
    pub coords_per_field: Option<usize>,
}

/// Provenance record written into every run directory.
#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command_line: Vec<String>,
    pub seed: u64,
    pub deterministic: bool,
    pub threads: usize,
    pub started_unix: u64,
    pub status: String,
    pub duration_secs: Option<f64>,
    pub outputs: Vec<String>,
    pub config_echo: Option<String>,
}

impl RunManifest {
    fn begin(cli_seed: u64, deterministic: bool) -> Self {
        RunManifest {
            tool: "splitnerf".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command_line: std::env::args().collect(),
            seed: cli_seed,
            deterministic,
            threads: rayon::current_num_threads(),
            started_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            status: "running".into(),
            duration_secs: None,
            outputs: Vec::new(),
            config_echo: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("run_manifest.json"), json)?;
        Ok(())
    }
}

/// Applies `--threads` / SPLITNERF_THREADS before any parallel work runs.
pub fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("SPLITNERF_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args, cli.seed, cli.deterministic),
        Command::Train(args) => cmd_train(args, cli.seed, cli.deterministic),
        Command::Render(args) => cmd_render(args, cli.seed, cli.deterministic),
        Command::Animate(args) => cmd_animate(args, cli.seed, cli.deterministic),
        Command::Eval(args) => cmd_eval(args, cli.seed, cli.deterministic),
        Command::Export(args) => cmd_export(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

pub fn cmd_gen(args: GenArgs, seed: u64, deterministic: bool) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::begin(seed, deterministic);
    manifest.write(&args.out)?;

    let (scene, views, preset_name) = match (&args.preset, &args.scene) {
        (Some(name), None) => {
            let (scene, views) = preset_by_name(name)
                .with_context(|| format!("unknown preset `{name}` (available: desk, bar)"))?;
            (scene, views, Some(name.as_str()))
        }
        (None, Some(path)) => {
            let (scene, views) = load_scene_file(path)?;
            (scene, views, None)
        }
        _ => bail!("exactly one of --preset or --scene is required"),
    };
    let dataset =
        generate_dataset_named(&scene, &views, &args.out, args.oracle_samples, preset_name)?;
    let trains = dataset.train_view_indices().len();
    let evals = dataset.eval_view_indices().len();
    println!(
        "wrote {} images ({} train views + {} eval views x {} frames) to {}",
        dataset.views.len() * dataset.frame_count,
        trains,
        evals,
        dataset.frame_count,
        args.out.display()
    );

    manifest.status = "ok".into();
    manifest.duration_secs = Some(started.elapsed().as_secs_f64());
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&args.out)?;
    Ok(())
}

fn build_train_config(args: &TrainArgs, seed: u64, deterministic: bool) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_toml(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?,
        )?,
        None => TrainConfig::desk(),
    };
    if let Some(mode) = args.mode {
        cfg.mode = match mode {
            ModeArg::Star => TrainMode::Star,
            ModeArg::NerfStatic => TrainMode::NerfStatic,
            ModeArg::NerfTime => TrainMode::NerfTime,
        };
    }
    for flag in &args.ablate {
        match flag.as_str() {
            "no_init" => cfg.no_init = true,
            "no_online" => cfg.no_online = true,
            "no_entropy" => cfg.no_entropy = true,
            other => bail!("unknown ablation `{other}` (no_init, no_online, no_entropy)"),
        }
    }
    if let Some(steps) = args.max_steps {
        cfg.max_init_steps = cfg.max_init_steps.min(steps);
        cfg.max_online_steps = cfg.max_online_steps.min(steps);
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(beta) = args.beta {
        cfg.beta = beta;
    }
    if let Some(lr) = args.lr_field {
        cfg.lr_field = lr;
    }
    if let Some(lr) = args.lr_pose {
        cfg.lr_pose = lr;
    }
    cfg.seed = seed;
    cfg.deterministic = deterministic;
    Ok(cfg)
}

pub fn cmd_train(args: TrainArgs, seed: u64, deterministic: bool) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::begin(seed, deterministic);
    manifest.write(&args.out)?;

    let dataset = load_dataset(&args.dataset)?;
    std::fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train_log.csv");
    let checkpoint_path = args.out.join("checkpoint.bin");

    let mut log = std::fs::File::create(&log_path)?;
    use std::io::Write as _;
    writeln!(log, "{}", LossBreakdown::csv_header())?;

    let (mut state, cfg) = match &args.resume {
        Some(path) => {
            let (state, cfg) = checkpoint_load(path)?;
            println!("resuming from {} at step {}", path.display(), state.step);
            (state, cfg)
        }
        None => {
            let cfg = build_train_config(&args, seed, deterministic)?;
            (TrainState::new(&cfg, dataset.frame_count), cfg)
        }
    };
    manifest.config_echo = Some(cfg.to_toml());
    manifest.write(&args.out)?;

    let log_every = cfg.log_every.max(1);
    let ckpt_every = cfg.checkpoint_every;
    let mut last_print = Instant::now();
    {
        let ckpt_cfg = cfg;
        let ckpt_path = checkpoint_path.clone();
        let mut hook = move |s: &TrainState, loss: &LossBreakdown| {
            if s.step.is_multiple_of(log_every) {
                let _ = writeln!(log, "{}", loss.csv_row(s.step, s.k));
            }
            if ckpt_every > 0 && s.step.is_multiple_of(ckpt_every) {
                let _ = checkpoint_save(s, &ckpt_cfg, &ckpt_path);
            }
            if last_print.elapsed().as_secs() >= 15 {
                last_print = Instant::now();
                let phase = match s.phase {
                    Phase::Init => "init",
                    Phase::Online => "online",
                    Phase::Done => "done",
                };
                println!(
                    "step {:>7} [{phase}] k={} loss {:.5e} (mse_f {:.5e})",
                    s.step, s.k, loss.total, loss.mse_fine
                );
            }
        };
        if args.resume.is_some() {
            resume_training(&mut state, &dataset, &cfg, Some(&mut hook))?;
        } else {
            state = run_training(&dataset, &cfg, Some(&mut hook))?;
        }
    }

    checkpoint_save(&state, &cfg, &checkpoint_path)?;
    println!(
        "finished at step {} (k = {} of {} frames); checkpoint: {}",
        state.step,
        state.k,
        dataset.frame_count,
        checkpoint_path.display()
    );

    manifest.status = "ok".into();
    manifest.duration_secs = Some(started.elapsed().as_secs_f64());
    manifest.outputs = vec![
        checkpoint_path.display().to_string(),
        log_path.display().to_string(),
    ];
    manifest.write(&args.out)?;
    Ok(())
}

/// Estimated object-motion trajectory: the inverse of each stored
/// world-to-canonical transform.
pub fn estimated_object_trajectory(state: &TrainState) -> Vec<RigidTransform> {
    state.poses.iter().map(inverse).collect()
}

/// Twist-space interpolation of the relative motion between neighboring
/// poses (constant-velocity screw). Integer times reproduce the stored
/// poses exactly.
pub fn interpolate_pose(trajectory: &[RigidTransform], time: f64) -> Result<RigidTransform> {
    if trajectory.is_empty() {
        bail!("empty trajectory");
    }
    let max_t = (trajectory.len() - 1) as f64;
    if !(0.0..=max_t).contains(&time) {
        bail!("time {time} outside [0, {max_t}]");
    }
    let a = time.floor() as usize;
    let frac = time - a as f64;
    if frac == 0.0 {
        return Ok(trajectory[a]);
    }
    let rel = crate::se3::relative(&trajectory[a], &trajectory[a + 1]);
    let xi = log(&rel).to_vector6() * frac;
    Ok(compose(&trajectory[a], &exp(&Twist::from_vector6(&xi))))
}

fn read_trajectory_file(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        if values.len() != 12 {
            bail!("{}:{}: expected 12 values, got {}", path.display(), lineno + 1, values.len());
        }
        let pose = PoseRows(values)
            .to_transform()
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        out.push(pose);
    }
    if out.is_empty() {
        bail!("trajectory file {} has no poses", path.display());
    }
    Ok(out)
}

pub fn write_trajectory_file(poses: &[RigidTransform], path: &Path) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# object-motion poses, one row-major 3x4 matrix per line")?;
    for pose in poses {
        let rows = pose.to_rows_3x4();
        let line: Vec<String> = rows.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    Ok(())
}

struct LoadedModel {
    state: TrainState,
    cfg: TrainConfig,
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    let (state, cfg) = checkpoint_load(path)?;
    Ok(LoadedModel { state, cfg })
}

fn model_for_layer<'a>(state: &'a TrainState, layer: Layer) -> Result<RenderModel<'a>> {
    let model = match layer {
        Layer::Composed => RenderModel {
            statics: Some(&state.statics),
            dynamics: state.dynamics.as_ref(),
            time_codes: state.time_codes.as_deref(),
        },
        Layer::StaticOnly => RenderModel {
            statics: Some(&state.statics),
            dynamics: None,
            time_codes: state.time_codes.as_deref(),
        },
        Layer::DynamicOnly => RenderModel {
            statics: None,
            dynamics: Some(
                state.dynamics.as_ref().context("checkpoint has no dynamic field")?,
            ),
            time_codes: None,
        },
    };
    Ok(model)
}

fn pick_camera(dataset: &Dataset, view: Option<usize>) -> Result<(usize, Camera)> {
    let idx = match view {
        Some(v) => {
            if v >= dataset.views.len() {
                bail!("view {v} out of range (dataset has {})", dataset.views.len());
            }
            v
        }
        None => *dataset
            .eval_view_indices()
            .first()
            .context("dataset has no held-out view; pass --view")?,
    };
    Ok((idx, dataset.views[idx].camera.clone()))
}

fn save_image_outputs(img: &Image, depth: &ndarray::Array2<f64>, stem: &Path) -> Result<()> {
    // Stems may contain dots (fractional times), so extensions are appended
    // rather than substituted.
    let with_suffix = |suffix: &str| PathBuf::from(format!("{}{suffix}", stem.display()));
    let mut buf = image::RgbImage::new(img.shape()[1] as u32, img.shape()[0] as u32);
    for r in 0..img.shape()[0] {
        for c in 0..img.shape()[1] {
            buf.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([
                    (img[[r, c, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (img[[r, c, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (img[[r, c, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    buf.save(with_suffix(".png"))?;
    save_f32_sidecar(img, &with_suffix(".f32"))?;
    let depth_img =
        Image::from_shape_fn((depth.nrows(), depth.ncols(), 3), |(r, c, _)| depth[[r, c]]);
    save_f32_sidecar(&depth_img, &with_suffix("_depth.f32"))?;
    Ok(())
}

fn render_pipe(cfg: &TrainConfig, deterministic: bool) -> PipelineCfg {
    PipelineCfg {
        n_coarse: cfg.n_coarse,
        n_fine: cfg.n_fine,
        deterministic,
        noise_std: 0.0,
        seed: cfg.seed,
        step: 0,
    }
}

pub fn cmd_render(args: RenderArgs, seed: u64, deterministic: bool) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::begin(seed, deterministic);
    manifest.write(&args.out)?;

    let LoadedModel { state, cfg } = load_model(&args.checkpoint)?;
    let dataset = load_dataset(&args.dataset)?;
    let (_, camera) = pick_camera(&dataset, args.view)?;
    let layer: Layer = args.layer.into();
    let model = model_for_layer(&state, layer)?;

    // Object trajectory: estimated by default, replaced by --poses.
    let trajectory = match &args.poses {
        Some(path) => read_trajectory_file(path)?,
        None => estimated_object_trajectory(&state),
    };

    let (frame_label, pose_world_to_canonical) = match (args.frame, args.time) {
        (Some(f), None) => {
            if f >= trajectory.len() {
                bail!("frame {f} has no pose (trajectory covers {} frames)", trajectory.len());
            }
            (format!("f{f:03}"), inverse(&trajectory[f]))
        }
        (None, Some(t)) => (format!("t{t:.3}"), inverse(&interpolate_pose(&trajectory, t)?)),
        (None, None) => ("f000".into(), inverse(&trajectory[0])),
        _ => unreachable!("clap conflicts_with"),
    };

    let pipe = render_pipe(&cfg, deterministic);
    // Frame index 0 with an explicit pose slot: rendering always looks up
    // poses[frame], so pass a one-element pose table.
    let poses = vec![pose_world_to_canonical];
    let (img, depth) = render_image(&model, &poses, &camera, 0, &pipe);
    let layer_name = match layer {
        Layer::Composed => "composed",
        Layer::StaticOnly => "static",
        Layer::DynamicOnly => "dynamic",
    };
    let stem = args.out.join(format!("render_{frame_label}_{layer_name}"));
    save_image_outputs(&img, &depth, &stem)?;
    println!("wrote {}.png", stem.display());

    manifest.status = "ok".into();
    manifest.duration_secs = Some(started.elapsed().as_secs_f64());
    manifest.outputs = vec![format!("{}.png", stem.display())];
    manifest.write(&args.out)?;
    Ok(())
}

pub fn cmd_animate(args: AnimateArgs, seed: u64, deterministic: bool) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::begin(seed, deterministic);
    manifest.write(&args.out)?;

    let LoadedModel { state, cfg } = load_model(&args.checkpoint)?;
    let dataset = load_dataset(&args.dataset)?;
    let (_, camera) = pick_camera(&dataset, args.view)?;
    let model = model_for_layer(&state, args.layer.into())?;
    let trajectory = read_trajectory_file(&args.trajectory)?;
    let pipe = render_pipe(&cfg, deterministic);

    let mut outputs = Vec::new();
    for (t, motion) in trajectory.iter().enumerate() {
        let poses = vec![inverse(motion)];
        let (img, depth) = render_image(&model, &poses, &camera, 0, &pipe);
        let stem = args.out.join(format!("anim_{t:03}"));
        save_image_outputs(&img, &depth, &stem)?;
        outputs.push(format!("{}.png", stem.display()));
    }
    println!("wrote {} animation frames to {}", trajectory.len(), args.out.display());

    manifest.status = "ok".into();
    manifest.duration_secs = Some(started.elapsed().as_secs_f64());
    manifest.outputs = outputs;
    manifest.write(&args.out)?;
    Ok(())
}

/// One evaluated frame of the held-out view.
pub struct FrameMetrics {
    pub frame: usize,
    pub full: RegionMetrics,
    pub fg: Option<RegionMetrics>,
    pub bg: Option<RegionMetrics>,
}

pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_full: RegionMetrics,
    pub mean_fg: Option<RegionMetrics>,
    pub mean_bg: Option<RegionMetrics>,
    pub tracking: Option<crate::eval::PoseErrorReport>,
    pub hausdorff_pct: Option<f64>,
    pub occupancy_outside_pct: Option<f64>,
}

fn mean_metrics(values: &[RegionMetrics]) -> Option<RegionMetrics> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    Some(RegionMetrics {
        psnr: values.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: values.iter().map(|m| m.ssim).sum::<f64>() / n,
    })
}

/// Runs the full evaluation protocol on a checkpoint: per-frame held-out
/// PSNR/SSIM with fg/bg split (bounding box placed at the ground-truth
/// pose), relative pose tracking error, and dynamic-field occupancy
/// measures.
pub fn evaluate_checkpoint(
    state: &TrainState,
    cfg: &TrainConfig,
    dataset: &Dataset,
    sigma_min: f64,
    grid_resolution: usize,
) -> Result<EvalReport> {
    let (eval_idx, camera) = pick_camera(dataset, None)?;
    // Evaluation always renders deterministically: midpoint/quantile
    // quadrature is the reproducible, lower-variance estimate of the model.
    let pipe = render_pipe(cfg, true);
    let model = RenderModel {
        statics: Some(&state.statics),
        dynamics: state.dynamics.as_ref(),
        time_codes: state.time_codes.as_deref(),
    };
    let gt_trajectory = dataset.gt_trajectory_for_eval();
    let frames_with_pose = state.poses.len().min(dataset.frame_count);
    if frames_with_pose < dataset.frame_count {
        eprintln!(
            "warning: checkpoint has poses for {frames_with_pose} of {} frames; evaluating those",
            dataset.frame_count
        );
    }

    let mut frames = Vec::new();
    let mut fulls = Vec::new();
    let mut fgs = Vec::new();
    let mut bgs = Vec::new();
    for frame in 0..frames_with_pose {
        let (img, _) = render_image(&model, &state.poses, &camera, frame, &pipe);
        let target = &dataset.images[eval_idx][frame];
        let mask = match (gt_trajectory, dataset.object_bbox) {
            (Some(gt), Some(bbox)) => project_bbox_mask(&bbox, &gt[frame], &camera),
            _ => crate::eval::RegionMask {
                mask: ndarray::Array2::from_elem((camera.height, camera.width), false),
            },
        };
        let (full, fg, bg) = region_metrics(&img, target, &mask);
        fulls.push(full);
        if let Some(m) = fg {
            fgs.push(m);
        }
        if let Some(m) = bg {
            bgs.push(m);
        }
        frames.push(FrameMetrics { frame, full, fg, bg });
    }

    let tracking = match (gt_trajectory, dataset.object_bbox, cfg.mode) {
        (Some(gt), Some(bbox), TrainMode::Star) if frames_with_pose >= 2 => {
            let est = estimated_object_trajectory(state);
            Some(tracking_error(&est[..frames_with_pose], &gt[..frames_with_pose], &bbox))
        }
        _ => {
            if gt_trajectory.is_none() {
                eprintln!("warning: dataset has no ground-truth poses; skipping tracking error");
            }
            None
        }
    };

    // Reconstruction occupancy: dynamic field sampled over the scene cube.
    let (hausdorff, occupancy_outside) = match (&state.dynamics, dataset.object_bbox) {
        (Some(dynamics), Some(bbox)) => {
            let cube = crate::scene::Aabb::new([-1.0; 3], [1.0; 3]);
            let cloud = extract_density_grid(&dynamics.fine, &cube, grid_resolution, sigma_min);
            let occupancy_outside = if cloud.is_empty() {
                None
            } else {
                let swept = gt_trajectory
                    .map(|gt| bbox.swept(gt))
                    .unwrap_or(bbox);
                let outside =
                    cloud.iter().filter(|p| !swept.contains(p)).count() as f64;
                Some(outside / cloud.len() as f64 * 100.0)
            };
            // Hausdorff needs a ground-truth cloud; rebuild it from the
            // bundled preset when the dataset names one.
            let hausdorff = (!cloud.is_empty())
                .then(|| {
                    dataset.scene_preset.as_deref().and_then(preset_by_name).map(
                        |(scene, _)| {
                            let gt_cloud = crate::eval::density_grid_fn(
                                |p| scene.eval_dynamic(p, &nalgebra::Vector3::z(), 0).0,
                                &cube,
                                grid_resolution,
                                sigma_min,
                            );
                            (!gt_cloud.is_empty())
                                .then(|| hausdorff_pct(&cloud, &gt_cloud, &bbox))
                        },
                    )
                })
                .flatten()
                .flatten();
            (hausdorff, occupancy_outside)
        }
        _ => (None, None),
    };

    Ok(EvalReport {
        mean_full: mean_metrics(&fulls).context("no frames evaluated")?,
        mean_fg: mean_metrics(&fgs),
        mean_bg: mean_metrics(&bgs),
        frames,
        tracking,
        hausdorff_pct: hausdorff,
        occupancy_outside_pct: occupancy_outside,
    })
}

pub fn format_eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let fmt = |m: Option<RegionMetrics>| -> (String, String) {
        match m {
            Some(m) => (format!("{:8.3}", m.psnr), format!("{:8.4}", m.ssim)),
            None => ("       -".into(), "       -".into()),
        }
    };
    out.push_str("metric        full     static-bg  dynamic-fg\n");
    let full = fmt(Some(report.mean_full));
    let bg = fmt(report.mean_bg);
    let fg = fmt(report.mean_fg);
    out.push_str(&format!("psnr (dB) {} {}   {}\n", full.0, bg.0, fg.0));
    out.push_str(&format!("ssim      {} {}   {}\n", full.1, bg.1, fg.1));
    if let Some(tr) = &report.tracking {
        out.push_str(&format!(
            "tracking: rotation {:.3} deg, translation {:.3}% of bbox diagonal (means over {} key-frame pairs)\n",
            tr.mean_rotation_deg,
            tr.mean_translation_pct,
            tr.rotation_deg.len()
        ));
    }
    if let Some(h) = report.hausdorff_pct {
        out.push_str(&format!("reconstruction: mean hausdorff {h:.3}% of bbox diagonal\n"));
    }
    if let Some(o) = report.occupancy_outside_pct {
        out.push_str(&format!("reconstruction: {o:.3}% of occupied voxels outside swept bbox\n"));
    }
    out
}

pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "frame,psnr_full,ssim_full,psnr_bg,ssim_bg,psnr_fg,ssim_fg")?;
    let cell = |m: Option<RegionMetrics>| match m {
        Some(m) => format!("{:.6},{:.6}", m.psnr, m.ssim),
        None => ",".into(),
    };
    for fm in &report.frames {
        writeln!(
            f,
            "{},{},{},{}",
            fm.frame,
            cell(Some(fm.full)),
            cell(fm.bg),
            cell(fm.fg)
        )?;
    }
    writeln!(
        f,
        "mean,{},{},{}",
        cell(Some(report.mean_full)),
        cell(report.mean_bg),
        cell(report.mean_fg)
    )?;
    if let Some(tr) = &report.tracking {
        writeln!(f, "tracking_rotation_deg,{:.6}", tr.mean_rotation_deg)?;
        writeln!(f, "tracking_translation_pct,{:.6}", tr.mean_translation_pct)?;
    }
    if let Some(h) = report.hausdorff_pct {
        writeln!(f, "hausdorff_pct,{h:.6}")?;
    }
    if let Some(o) = report.occupancy_outside_pct {
        writeln!(f, "occupancy_outside_pct,{o:.6}")?;
    }
    Ok(())
}

pub fn cmd_eval(args: EvalArgs, seed: u64, deterministic: bool) -> Result<()> {
    let LoadedModel { state, cfg } = load_model(&args.checkpoint)?;
    let dataset = load_dataset(&args.dataset)?;
    let report =
        evaluate_checkpoint(&state, &cfg, &dataset, args.sigma_min, args.grid_resolution)?;
    print!("{}", format_eval_table(&report));
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        let mut manifest = RunManifest::begin(seed, deterministic);
        let csv = out.join("eval_report.csv");
        write_eval_csv(&report, &csv)?;
        manifest.status = "ok".into();
        manifest.outputs = vec![csv.display().to_string()];
        manifest.write(out)?;
        println!("wrote {}", csv.display());
    }
    Ok(())
}

pub fn cmd_export(args: ExportArgs) -> Result<()> {
    let LoadedModel { state, .. } = load_model(&args.checkpoint)?;
    match args.what {
        ExportWhat::DensityGrid => {
            let dynamics = state
                .dynamics
                .as_ref()
                .context("checkpoint has no dynamic field to export")?;
            let cube = crate::scene::Aabb::new([-1.0; 3], [1.0; 3]);
            let cloud =
                extract_density_grid(&dynamics.fine, &cube, args.grid_resolution, args.sigma_min);
            use std::io::Write as _;
            let mut f = std::fs::File::create(&args.out)?;
            for p in &cloud {
                writeln!(f, "{} {} {}", p[0], p[1], p[2])?;
            }
            println!("wrote {} points to {}", cloud.len(), args.out.display());
        }
        ExportWhat::Poses => {
            let trajectory = estimated_object_trajectory(&state);
            write_trajectory_file(&trajectory, &args.out)?;
            println!("wrote {} poses to {}", trajectory.len(), args.out.display());
        }
    }
    Ok(())
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = gradcheck(&GradcheckCfg {
        width: args.width,
        n_rays: args.rays,
        coords_per_field: args.coords_per_field,
        ..GradcheckCfg::default()
    });
    println!("{report}");
    if !report.pass {
        bail!("gradient check failed (max rel error {:.3e})", report.max_rel_error);
    }
    Ok(())
}
