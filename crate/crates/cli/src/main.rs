use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flowdepth::camera::{Intrinsics, RelativePose};
use flowdepth::fusion::{fuse_proposals, ExternalProposal, FusionConfig, Proposal};
use flowdepth::geometry::{check_frame_size, flow_to_depth, ConfidenceParams, DEFAULT_SIGMA};
use flowdepth::io;
use flowdepth::kv::KvConfig;
use flowdepth::metrics::{evaluate_with, EvalOptions, MetricReport};
use flowdepth::pipeline::{flow_file_name, metrics_to_kv, run_pipeline, PipelineConfig};
use flowdepth::refine::{refine_pose, RefinementConfig};
use flowdepth::synth::{perturb_pose, render, SyntheticScene};

#[derive(Parser)]
#[command(name = "flowdepth", version, about = "Depth from optical flow and camera pose")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Triangulate a depth proposal and confidence map from flow and pose.
    Depth(DepthArgs),
    /// Refine a relative pose by maximizing summed confidence.
    Refine(RefineArgs),
    /// Fuse depth proposals into one depth map.
    Fuse(FuseArgs),
    /// Evaluate a predicted depth map against ground truth.
    Eval(EvalArgs),
    /// Render a synthetic scene to flow, pose and ground-truth files.
    Synth(SynthArgs),
    /// Run the whole pipeline from a config file.
    Pipeline(PipelineArgs),
    /// Write a color-mapped 8-bit preview of a depth or confidence map.
    Viz(VizArgs),
}

#[derive(Args)]
struct PoseArgs {
    /// Target-to-source pose: one line of 12 numbers, row-major [R | t].
    #[arg(long, conflicts_with = "poses")]
    pose: Option<PathBuf>,
    /// World-from-camera pose list; needs --target and --source.
    #[arg(long, requires_all = ["target", "source"])]
    poses: Option<PathBuf>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    source: Option<usize>,
}

impl PoseArgs {
    fn load(&self) -> Result<RelativePose> {
        if let Some(path) = &self.pose {
            let poses = io::read_poses(path)?;
            return match poses.as_slice() {
                [p] => Ok(*p),
                _ => bail!("{}: expected exactly one pose line, found {}", path.display(), poses.len()),
            };
        }
        let path = self.poses.as_ref().ok_or_else(|| anyhow!("give --pose or --poses"))?;
        let poses = io::read_poses(path)?;
        let (t, s) = (self.target.expect("required"), self.source.expect("required"));
        let get = |i: usize| {
            poses
                .get(i)
                .ok_or_else(|| anyhow!("{}: frame {i} not present ({} frames)", path.display(), poses.len()))
        };
        Ok(io::relative_pose(get(t)?, get(s)?))
    }
}

#[derive(Args)]
struct CameraArgs {
    /// Target intrinsics file: fx fy cx cy [width height].
    #[arg(long)]
    intrinsics: PathBuf,
    /// Source intrinsics file (default: same as target).
    #[arg(long)]
    source_intrinsics: Option<PathBuf>,
    /// Confidence scale in pixels.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
}

struct Camera {
    target: Intrinsics,
    source: Intrinsics,
    size: Option<(usize, usize)>,
    params: ConfidenceParams,
}

impl CameraArgs {
    fn load(&self) -> Result<Camera> {
        let target = io::read_intrinsics(&self.intrinsics)?;
        let source = match &self.source_intrinsics {
            Some(p) => io::read_intrinsics(p)?.intrinsics,
            None => target.intrinsics,
        };
        Ok(Camera {
            target: target.intrinsics,
            source,
            size: target.size,
            params: ConfidenceParams::new(self.sigma)?,
        })
    }
}

fn read_flow_checked(path: &Path, cam: &Camera) -> Result<flowdepth::FlowField> {
    let flow = io::read_flow(path)?;
    if let Some((w, h)) = cam.size {
        check_frame_size(&flow, w, h)?;
    }
    Ok(flow)
}

#[derive(Args)]
struct DepthArgs {
    #[arg(long)]
    flow: PathBuf,
    #[command(flatten)]
    camera: CameraArgs,
    #[command(flatten)]
    pose: PoseArgs,
    /// Depth output (.fdm or .png); invalid pixels are written as missing.
    #[arg(long)]
    out_depth: PathBuf,
    /// Confidence output (float map).
    #[arg(long)]
    out_confidence: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    flow: PathBuf,
    #[command(flatten)]
    camera: CameraArgs,
    #[command(flatten)]
    pose: PoseArgs,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    gradient_tolerance: f64,
    #[arg(long, default_value_t = 1e-9)]
    objective_tolerance: f64,
    /// Box bound on each axis-angle coordinate, radians.
    #[arg(long, default_value_t = std::f64::consts::PI)]
    rotation_bound: f64,
    /// Use central differences instead of the analytic gradient.
    #[arg(long)]
    finite_differences: bool,
    /// Refined target-to-source pose.
    #[arg(long)]
    out_pose: PathBuf,
    /// Per-iteration objective and gradient norm.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Driving,
    Indoor,
}

#[derive(Args)]
struct FuseArgs {
    /// `DEPTH[,CONFIDENCE]`; repeat for each proposal.
    #[arg(long = "proposal", required = true)]
    proposals: Vec<String>,
    #[arg(long, value_enum, default_value_t = Preset::Driving)]
    preset: Preset,
    #[arg(long)]
    min_confidence: Option<f64>,
    /// Confidence of proposals given without a confidence map.
    #[arg(long)]
    external_confidence: Option<f64>,
    #[arg(long)]
    depth_cap: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 80.0)]
    depth_cap: f64,
    /// Report SIlog ×100 as the driving benchmark does.
    #[arg(long)]
    silog_scaling: bool,
    /// Also write `key = value` metrics here (`-` for stdout).
    #[arg(long)]
    kv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene config file; a 64x48 plane scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Random scene of the given size instead of a config (`WxH`).
    #[arg(long, conflicts_with = "scene")]
    random: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VizKind {
    Depth,
    Confidence,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long, value_enum)]
    kind: VizKind,
    #[arg(long)]
    input: PathBuf,
    /// PNG output.
    #[arg(long)]
    output: PathBuf,
}

fn cmd_depth(a: &DepthArgs) -> Result<()> {
    let cam = a.camera.load()?;
    let flow = read_flow_checked(&a.flow, &cam)?;
    let pose = a.pose.load()?;
    let proposal = flow_to_depth(&flow, &cam.target, &pose, &cam.source, &cam.params)?;
    io::write_depth(&a.out_depth, &proposal.masked_depth())?;
    io::write_confidence(&a.out_confidence, &proposal.confidence)?;
    println!(
        "{} of {} pixels with positive depth, confidence sum {:.3}",
        proposal.positive_mask.as_slice().iter().filter(|&&m| m).count(),
        flow.len(),
        proposal.confidence_sum()
    );
    Ok(())
}

fn cmd_refine(a: &RefineArgs) -> Result<()> {
    let cam = a.camera.load()?;
    let flow = read_flow_checked(&a.flow, &cam)?;
    let initial = a.pose.load()?;
    let cfg = RefinementConfig {
        max_iterations: a.max_iterations,
        gradient_tolerance: a.gradient_tolerance,
        objective_tolerance: a.objective_tolerance,
        rotation_bounds: (-a.rotation_bound, a.rotation_bound),
        finite_difference_gradient: a.finite_differences,
        ..RefinementConfig::default()
    };
    let res = refine_pose(&flow, &cam.target, &initial, &cam.source, &cam.params, &cfg)?;
    io::write_poses(&a.out_pose, &[res.refined_pose])?;
    if let Some(path) = &a.trace {
        let mut text = String::from("# iteration objective gradient_norm\n");
        for (i, e) in res.trace.iter().enumerate() {
            text.push_str(&format!("{i} {:e} {:e}\n", e.objective, e.gradient_norm));
        }
        fs::write(path, text).with_context(|| path.display().to_string())?;
    }
    println!(
        "confidence {:.6} -> {:.6} in {} iterations ({})",
        res.initial_objective,
        res.final_objective,
        res.iterations,
        if res.converged { "converged" } else { "iteration limit" }
    );
    Ok(())
}

fn cmd_fuse(a: &FuseArgs) -> Result<()> {
    let mut cfg = match a.preset {
        Preset::Driving => FusionConfig::driving(),
        Preset::Indoor => FusionConfig::indoor(),
    };
    if let Some(v) = a.min_confidence {
        cfg.min_confidence = v;
    }
    if let Some(v) = a.external_confidence {
        cfg.external_confidence = v;
    }
    if let Some(v) = a.depth_cap {
        cfg.depth_cap = v;
    }
    let proposals = a
        .proposals
        .iter()
        .map(|spec| {
            let (depth, conf) = match spec.split_once(',') {
                Some((d, c)) => (d, Some(c)),
                None => (spec.as_str(), None),
            };
            Ok(Proposal::External(ExternalProposal {
                depth: io::read_depth(depth)?,
                confidence: conf.map(io::read_confidence).transpose()?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_proposals(&proposals, &cfg)?;
    io::write_depth(&a.out, &fused)?;
    Ok(())
}

fn metric_table(r: &MetricReport) -> String {
    let entries = r.entries();
    let width = 11;
    let mut head = String::new();
    let mut vals = String::new();
    for (name, v) in &entries[..9] {
        head.push_str(&format!("{name:>width$}"));
        vals.push_str(&format!("{v:>width$.3}"));
    }
    format!(
        "{head}\n{vals}\n{} pixels, loss_depth {:.6}, loss_smooth {:.6}",
        r.n_pixels, r.loss_depth, r.loss_smooth
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pred = io::read_depth(&a.pred)?;
    let gt = io::read_depth(&a.gt)?;
    let opts = EvalOptions {
        depth_cap: a.depth_cap,
        silog_benchmark_scale: a.silog_scaling,
    };
    let report = evaluate_with(&pred, &gt, &opts)?;
    println!("{}", metric_table(&report));
    match a.kv.as_deref() {
        Some(p) if p == Path::new("-") => print!("{}", metrics_to_kv(&report)),
        Some(p) => fs::write(p, metrics_to_kv(&report).to_string()).with_context(|| p.display().to_string())?,
        None => {}
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once('x').ok_or_else(|| anyhow!("size must look like 64x48, got `{s}`"))?;
    Ok((w.parse()?, h.parse()?))
}

/// Writes a two-frame sequence: frame 0 is the target, frame 1 the source.
fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let scene = match (&a.scene, &a.random) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
            SyntheticScene::from_config(&KvConfig::parse(&text)?)?
        }
        (None, Some(size)) => {
            let (w, h) = parse_size(size)?;
            SyntheticScene::random(w, h, a.seed)
        }
        (None, None) => SyntheticScene::plane(64, 48),
    };
    let rendered = render(&scene, a.seed)?;
    let out = &a.out;
    for sub in ["flow", "gt"] {
        fs::create_dir_all(out.join(sub)).with_context(|| out.join(sub).display().to_string())?;
    }
    io::write_flow(out.join("flow").join(flow_file_name(0, 1)), &rendered.flow)?;

    // ground truth only where the target pixel is seen by the source camera
    let mut gt = rendered.gt_depth.clone();
    for i in 0..gt.len() {
        if rendered.flow.at(i).is_none() {
            gt.as_mut_slice()[i] = 0.0;
        }
    }
    io::write_depth(out.join("gt").join("000000.fdm"), &gt)?;

    let true_pose = rendered.true_pose;
    let noise = scene.noise;
    let initial = perturb_pose(&true_pose, noise.perturb_rot_deg, noise.perturb_trans_frac, a.seed);
    // world frame = target camera; the source camera is the inverse of target-to-source
    io::write_poses(out.join("poses.txt"), &[RelativePose::identity(), initial.inverse()])?;
    io::write_poses(out.join("true_poses.txt"), &[RelativePose::identity(), true_pose.inverse()])?;
    io::write_intrinsics(
        out.join("intrinsics.txt"),
        &io::CameraFile {
            intrinsics: scene.intrinsics,
            size: Some((scene.width, scene.height)),
        },
    )?;
    fs::write(out.join("scene.txt"), scene.to_config().to_string())?;

    let max_depth = gt.as_slice().iter().cloned().fold(0.0, f64::max);
    let mut cfg = KvConfig::new();
    cfg.set("flow_dir", "flow");
    cfg.set("pose_file", "poses.txt");
    cfg.set("intrinsics_file", "intrinsics.txt");
    cfg.set("gt_dir", "gt");
    cfg.set("output_dir", "out");
    cfg.set("frames", 0);
    cfg.set("translation_threshold", 0.5 * true_pose.translation().norm());
    cfg.set("depth_cap", (max_depth + 1.0).ceil().max(FusionConfig::driving().depth_cap));
    fs::write(out.join("pipeline.txt"), cfg.to_string())?;
    println!(
        "{}x{} scene, {} valid flow vectors, written to {}",
        scene.width,
        scene.height,
        rendered.flow.valid_count(),
        out.display()
    );
    Ok(())
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config)?;
    let outcomes = run_pipeline(&cfg)?;
    for o in &outcomes {
        let sources = o.sources.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        let mut line = format!(
            "frame {}: sources [{}], {} external, depth {}",
            o.target,
            sources,
            o.external,
            o.depth_path.display()
        );
        if let Some(m) = &o.metrics {
            line.push_str(&format!(", abs_rel {:.6}, delta1 {:.3}", m.abs_rel, m.delta1));
        }
        println!("{line}");
    }
    Ok(())
}

fn cmd_viz(a: &VizArgs) -> Result<()> {
    match a.kind {
        VizKind::Depth => io::write_depth_image(&a.output, &io::read_depth(&a.input)?)?,
        VizKind::Confidence => io::write_confidence_image(&a.output, &io::read_confidence(&a.input)?)?,
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Depth(a) => cmd_depth(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Viz(a) => cmd_viz(a),
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
