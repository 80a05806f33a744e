//! `epidiff`: reproducible experiments and invariant suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use epidiff_core::camera::{
    generate_layout, CameraIntrinsics, ViewLayout, AZIMUTHS_PER_RING, DEFAULT_FOV_Y_DEG, DEFAULT_RADIUS,
    DEFAULT_RESOLUTION, TRAIN_ELEVATIONS_DEG,
};
use epidiff_core::checks::{run_gradcheck, run_suites, GradcheckOptions, GradcheckSize, Suite};
use epidiff_core::diffusion::demo::{demo_layout, load_denoiser, run_train_demo, TrainDemoConfig};
use epidiff_core::diffusion::{sample_multiview, BoundDenoiser, ConditionEmbedding, NoiseSchedule, SamplerOptions};
use epidiff_core::sampling::{build_sample_volume, default_near_far};
use epidiff_core::scene::{downsample, make_dataset, SceneKind, SyntheticScene};
use epidiff_core::tensor::{tensor_read, tensor_write, DeterministicRng};

const EXIT_USAGE: u8 = 1;
const EXIT_CHECK_FAILED: u8 = 2;

#[derive(Debug, Parser, Serialize)]
#[command(name = "epidiff", version, about = "Epipolar-attention multiview diffusion toolkit")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
enum Command {
    /// Write a camera layout JSON (default: the 96-view training layout).
    Layout(LayoutArgs),
    /// Sample the epipolar feature volume of one target view.
    SampleMap(SampleMapArgs),
    /// Run invariant suites; exit 2 on any failure.
    Check(CheckArgs),
    /// Finite-difference verification of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Raycast a synthetic scene from every camera of a layout.
    Render(RenderArgs),
    /// Train the attention blocks of the toy denoiser on two synthetic scenes.
    TrainDemo(TrainDemoArgs),
    /// Jointly sample every view of a layout from a trained checkpoint.
    Sample(SampleArgs),
}

#[derive(Debug, Args, Serialize)]
struct LayoutArgs {
    /// Comma-separated ring elevations in degrees.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = TRAIN_ELEVATIONS_DEG.to_vec())]
    elevations: Vec<f64>,
    /// Cameras per ring.
    #[arg(long, default_value_t = AZIMUTHS_PER_RING)]
    azimuths: usize,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    radius: f64,
    /// Square image resolution.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: usize,
    #[arg(long, default_value_t = DEFAULT_FOV_Y_DEG)]
    fov: f64,
}

#[derive(Debug, Args, Serialize)]
struct SampleMapArgs {
    /// Camera layout JSON.
    #[arg(long)]
    cameras: PathBuf,
    /// Directory holding one `<prefix>_NNN.etz` map `[H, W, C]` per camera.
    #[arg(long)]
    features_dir: PathBuf,
    #[arg(long, default_value = "rgb")]
    prefix: String,
    #[arg(long)]
    target: usize,
    #[arg(short = 'K', default_value_t = 4)]
    k: usize,
    #[arg(short = 'S', default_value_t = 16)]
    s: usize,
    /// Defaults to camera distance minus 1.
    #[arg(long)]
    near: Option<f64>,
    /// Defaults to camera distance plus 1.
    #[arg(long)]
    far: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SuiteArg {
    Geometry,
    Encoding,
    Attention,
    Diffusion,
    Oracle,
    All,
}

#[derive(Debug, Args, Serialize)]
struct CheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    /// Test hook: corrupt one measurement per suite.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SizeArg {
    Micro,
    Small,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "micro")]
    size: SizeArg,
    /// Test hook: offset the analytic gradients.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SceneArg {
    Sphere,
    Voxel,
}

impl From<SceneArg> for SceneKind {
    fn from(s: SceneArg) -> Self {
        match s {
            SceneArg::Sphere => SceneKind::Sphere,
            SceneArg::Voxel => SceneKind::Voxel,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct RenderArgs {
    #[arg(long, value_enum, default_value = "sphere")]
    scene: SceneArg,
    /// Camera layout JSON; defaults to the 16-view 30° ring.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Also write 8-bit PPM previews.
    #[arg(long)]
    ppm: bool,
}

#[derive(Debug, Args, Serialize)]
struct TrainDemoArgs {
    #[arg(long, default_value_t = TrainDemoConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainDemoConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainDemoConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = TrainDemoConfig::default().channels)]
    channels: usize,
    #[arg(long, default_value_t = TrainDemoConfig::default().draws_per_scene)]
    draws_per_scene: usize,
}

#[derive(Debug, Args, Serialize)]
struct SampleArgs {
    /// Checkpoint directory written by `train-demo`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Camera layout JSON; defaults to the training ring.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Scene whose input view conditions the samples.
    #[arg(long, value_enum, default_value = "sphere")]
    scene: SceneArg,
    /// Condition on this view of the layout.
    #[arg(long, default_value_t = 0)]
    input_view: usize,
    /// Deterministic posterior mean at every step.
    #[arg(long)]
    no_posterior_noise: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
    Check(String),
}

impl From<epidiff_core::Error> for Failure {
    fn from(e: epidiff_core::Error) -> Self {
        match e {
            epidiff_core::Error::InvalidArgument(_) | epidiff_core::Error::OutOfRange { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    let out = &cli.out;
    fs::create_dir_all(out)?;
    fs::write(out.join("run.json"), serde_json::to_string_pretty(cli)?)?;
    match &cli.command {
        Command::Layout(a) => cmd_layout(a, out),
        Command::SampleMap(a) => cmd_sample_map(a, out),
        Command::Check(a) => cmd_check(a, cli.seed, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.seed, out),
        Command::Render(a) => cmd_render(a, out),
        Command::TrainDemo(a) => cmd_train_demo(a, cli.seed, out),
        Command::Sample(a) => cmd_sample(a, cli.seed, out),
    }
}

fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_layout(a: &LayoutArgs, out: &Path) -> CmdResult {
    if a.azimuths == 0 {
        return Err(Failure::Usage("--azimuths must be >= 1".into()));
    }
    let intr = CameraIntrinsics::new(a.resolution, a.resolution, a.fov.to_radians())?;
    let layout = generate_layout(&a.elevations, a.azimuths, a.radius, intr)?;
    layout.write_json(out.join("cameras.json"))?;
    println!("{} views -> {}", layout.len(), out.join("cameras.json").display());
    Ok(())
}

#[derive(Serialize)]
struct SampleMapSidecar {
    view_indices: Vec<usize>,
    near: f64,
    far: f64,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "S")]
    s: usize,
    target: usize,
    files: [&'static str; 4],
}

fn cmd_sample_map(a: &SampleMapArgs, out: &Path) -> CmdResult {
    let layout = ViewLayout::read_json(&a.cameras)?;
    if a.target >= layout.len() {
        return Err(Failure::Usage(format!("--target {} not in 0..{}", a.target, layout.len())));
    }
    if a.k == 0 || a.k > layout.len() || a.s == 0 {
        return Err(Failure::Usage(format!("need 1 <= K <= {} and S >= 1", layout.len())));
    }
    let maps = (0..layout.len())
        .map(|i| tensor_read(a.features_dir.join(format!("{}_{i:03}.etz", a.prefix))))
        .collect::<Result<Vec<_>, _>>()?;
    let (dn, df) = default_near_far(&layout.cameras[a.target])?;
    let (near, far) = (a.near.unwrap_or(dn), a.far.unwrap_or(df));
    let map = build_sample_volume(a.target, &layout, &maps, a.k, a.s, near, far)?;
    let files = ["features.etz", "valid.etz", "depths.etz", "view_indices.etz"];
    tensor_write(&map.features, out.join(files[0]))?;
    tensor_write(&map.valid_tensor(), out.join(files[1]))?;
    tensor_write(&map.depths, out.join(files[2]))?;
    tensor_write(&map.view_indices_tensor(), out.join(files[3]))?;
    write_json(
        out.join("sample_map.json"),
        &SampleMapSidecar {
            view_indices: map.view_indices.clone(),
            near,
            far,
            k: a.k,
            s: a.s,
            target: a.target,
            files,
        },
    )?;
    println!("sample map {:?} for target {} -> {}", map.features.shape(), a.target, out.display());
    Ok(())
}

fn cmd_check(a: &CheckArgs, seed: u64, out: &Path) -> CmdResult {
    let suites = match a.suite {
        SuiteArg::Geometry => vec![Suite::Geometry],
        SuiteArg::Encoding => vec![Suite::Encoding],
        SuiteArg::Attention => vec![Suite::Attention],
        SuiteArg::Diffusion => vec![Suite::Diffusion],
        SuiteArg::Oracle => vec![Suite::Oracle],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let report = run_suites(
        &suites,
        epidiff_core::checks::CheckOptions {
            seed,
            inject_fault: a.inject_fault,
        },
    )?;
    write_json(out.join("check_report.json"), &report)?;
    for s in &report.suites {
        for c in &s.checks {
            let op = if c.strict { "<" } else { "<=" };
            let tag = if c.passed { "ok  " } else { "FAIL" };
            println!("{tag} {}/{}: {:e} {op} {:e}", s.suite.name(), c.name, c.value, c.tolerance);
        }
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Check("at least one invariant is violated".into()))
    }
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64, out: &Path) -> CmdResult {
    let size = match a.size {
        SizeArg::Micro => GradcheckSize::Micro,
        SizeArg::Small => GradcheckSize::Small,
    };
    let report = run_gradcheck(GradcheckOptions {
        seed,
        size,
        corrupt_gradient: a.corrupt_gradient,
    })?;
    write_json(out.join("gradcheck_report.json"), &report)?;
    println!("max relative error: eca params {:e}", report.max_eca_param_error);
    println!("max relative error: eca input maps {:e}", report.max_eca_map_error);
    println!("max relative error: end-to-end train loss {:e}", report.max_end_to_end_error);
    for c in report.checks.iter().filter(|c| !c.passed) {
        println!("FAIL {}: {:e} >= {:e}", c.name, c.value, c.tolerance);
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Check("gradient mismatch".into()))
    }
}

/// The layout with every camera's image resized to `res × res`.
fn at_resolution(mut layout: ViewLayout, res: usize) -> Result<ViewLayout, Failure> {
    for cam in &mut layout.cameras {
        cam.intrinsics = CameraIntrinsics::new(res, res, cam.intrinsics.fov_y)?;
    }
    Ok(layout)
}

fn cmd_render(a: &RenderArgs, out: &Path) -> CmdResult {
    let layout = match &a.layout {
        Some(p) => at_resolution(ViewLayout::read_json(p)?, a.res)?,
        None => ViewLayout::eval_ring(CameraIntrinsics::square(a.res)?)?,
    };
    let set = make_dataset(&SyntheticScene::from_kind(a.scene.into()), &layout, a.res, a.res)?;
    set.write(out, a.ppm)?;
    layout.write_json(out.join("cameras.json"))?;
    println!("{} renders at {}x{} -> {}", set.len(), a.res, a.res, out.display());
    Ok(())
}

fn cmd_train_demo(a: &TrainDemoArgs, seed: u64, out: &Path) -> CmdResult {
    let cfg = TrainDemoConfig {
        steps: a.steps,
        learning_rate: a.lr,
        momentum: a.momentum,
        channels: a.channels,
        draws_per_scene: a.draws_per_scene,
        seed,
        final_window: TrainDemoConfig::default().final_window.min(a.steps.max(1)),
        ..TrainDemoConfig::default()
    };
    let outcome = run_train_demo(&cfg)?;
    outcome.write(out)?;
    let c = &outcome.curve;
    println!(
        "step-1 loss {:.6}, final loss {:.6} (mean of last {}), ratio {:.4}, frozen base unchanged: {}",
        c.initial_loss, c.final_loss, cfg.final_window, c.ratio, c.frozen_unchanged
    );
    Ok(())
}

#[derive(Serialize)]
struct SampleManifest {
    views: usize,
    latent_shape: Vec<usize>,
    input_view: usize,
    posterior_noise: bool,
    files: Vec<String>,
}

fn cmd_sample(a: &SampleArgs, seed: u64, out: &Path) -> CmdResult {
    let (denoiser, demo) = load_denoiser(&a.checkpoint)?;
    let layout = match &a.layout {
        Some(p) => at_resolution(ViewLayout::read_json(p)?, demo.render_res)?,
        None => demo_layout(demo.render_res)?,
    };
    if a.input_view >= layout.len() {
        return Err(Failure::Usage(format!("--input-view {} not in 0..{}", a.input_view, layout.len())));
    }
    let input_cam = layout.select(&[a.input_view])?;
    let render = make_dataset(&SyntheticScene::from_kind(a.scene.into()), &input_cam, demo.render_res, demo.render_res)?;
    let input_latent = downsample(&render.rgb_maps()[0], demo.render_res / demo.latent_res)?.map(|v| 2.0 * v - 1.0);
    let cond = ConditionEmbedding::new(&layout, a.input_view, &input_latent)?;
    let bound = BoundDenoiser::new(&denoiser, &layout, demo.latent_res, demo.latent_res)?;
    let shape = [demo.latent_res, demo.latent_res, denoiser.config().latent_channels];
    let options = SamplerOptions {
        posterior_noise: !a.no_posterior_noise,
    };
    let mut rng = DeterministicRng::new(seed).fork(300);
    let latents = sample_multiview(&bound, &NoiseSchedule::toy_default(), &cond, &mut rng, &shape, options)?;
    let mut files = Vec::with_capacity(latents.len());
    for (i, z) in latents.iter().enumerate() {
        let name = format!("latent_{i:03}.etz");
        tensor_write(z, out.join(&name))?;
        files.push(name);
    }
    write_json(
        out.join("samples.json"),
        &SampleManifest {
            views: latents.len(),
            latent_shape: shape.to_vec(),
            input_view: a.input_view,
            posterior_noise: options.posterior_noise,
            files,
        },
    )?;
    println!("{} latents {:?} -> {}", latents.len(), shape, out.display());
    Ok(())
}
