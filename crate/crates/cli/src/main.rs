use std::path::{Path, PathBuf};
use std::process::ExitCode;

use changeseg::eval::{self, IouMode};
use changeseg::io::{self, GroundTruth, Scene};
use changeseg::pipeline::{self, AssignmentFile, Baseline, LabelOutput, PipelineConfig, SweepParam};
use changeseg::postprocess::{self, DetectionSet};
use changeseg::seeds::{SeedSet, ThresholdMode};
use changeseg::supervoxel::SupervoxelGraph;
use changeseg::synth::{self, SceneSpec};
use changeseg::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Parser)]
#[command(name = "changeseg", version, about = "Unsupervised 3D change segmentation between two scans")]
struct Cli {
    /// Pipeline configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, or a file path ending in .json for single-artifact commands.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render depth maps of both scans for every view.
    Render(SceneArg),
    /// Detect seed points from depth residuals.
    Seed(SeedArgs),
    /// Build the supervoxel graph of the rescan.
    Supervoxel(SupervoxelArgs),
    /// Project label maps onto supervoxels and build edge constraints.
    Assign(AssignArgs),
    /// Solve for changing supervoxels.
    Optimize(OptimizeArgs),
    /// Group changing supervoxels into scored detections.
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic scene pair.
    Synth(SynthArgs),
    /// Run every stage and write all artifacts.
    Run(RunArgs),
    /// Run the pipeline once per parameter value.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SceneArg {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Fixed,
    Mad,
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    policy: Option<Policy>,
}

#[derive(Args)]
struct SupervoxelArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    voxel: Option<f64>,
    #[arg(long)]
    seed_res: Option<f64>,
}

#[derive(Args)]
struct AssignArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to graph.json next to the output.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    sources: Vec<String>,
    #[arg(long)]
    depth_tol: Option<f64>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    assignments: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    p_seed: Option<f64>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// Also write the rescan colored by detection.
    #[arg(long)]
    ply: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum IouArg {
    Point,
    Box,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_KS.to_vec())]
    ks: Vec<f64>,
    #[arg(long, value_enum, default_value = "point")]
    iou: IouArg,
    /// Scene manifest; needed for box IoU.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec (JSON).
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in spec: three-cuboids, slid-object or unchanged.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Split every oracle mask region into this many fragments.
    #[arg(long)]
    fragment: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Full,
    SeedsOnly,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    p_seed: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Also write detections.ply with the rescan colored by detection.
    #[arg(long)]
    ply: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// lambda, p_seed or tau.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
}

struct Ctx {
    config: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    /// Path for an artifact: `--out` itself when it names a .json file,
    /// else `name` inside the `--out` directory.
    fn artifact(&self, name: &str) -> PathBuf {
        if self.out.extension().is_some_and(|e| e == "json") {
            self.out.clone()
        } else {
            self.out.join(name)
        }
    }

    /// Upstream artifact: the explicit path, or `name` in the output directory.
    fn input(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| {
            let dir = if self.out.extension().is_some_and(|e| e == "json") {
                self.out.parent().map(Path::to_path_buf).unwrap_or_default()
            } else {
                self.out.clone()
            };
            dir.join(name)
        })
    }

    fn write<T: serde::Serialize>(&self, name: &str, value: &T) -> changeseg::Result<PathBuf> {
        let path = self.artifact(name);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        io::write_json(&path, value)?;
        info!("wrote {}", path.display());
        Ok(path)
    }
}

fn load_scene(manifest: &Path) -> changeseg::Result<Scene> {
    let m = io::load_manifest(manifest)?;
    io::load_scene(&m)
}

fn baseline(b: BaselineArg) -> Baseline {
    match b {
        BaselineArg::Full => Baseline::Full,
        BaselineArg::SeedsOnly => Baseline::SeedsOnly,
    }
}

fn execute(cmd: Command, ctx: &mut Ctx) -> changeseg::Result<()> {
    match cmd {
        Command::Render(a) => {
            let scene = load_scene(&a.manifest)?;
            let r = pipeline::render_stage(&scene, &ctx.config)?;
            std::fs::create_dir_all(&ctx.out).map_err(|e| Error::Io {
                path: ctx.out.clone(),
                source: e,
            })?;
            for (i, (a, b)) in r.reference.iter().zip(&r.rescan).enumerate() {
                io::save_depth(&ctx.out.join(format!("reference_depth_{i:03}.png")), a, 0.001)?;
                io::save_depth(&ctx.out.join(format!("rescan_depth_{i:03}.png")), b, 0.001)?;
            }
            info!("rendered {} views into {}", r.reference.len(), ctx.out.display());
        }
        Command::Seed(a) => {
            if let Some(t) = a.tau {
                ctx.config.threshold.tau_fixed = t;
            }
            match a.policy {
                Some(Policy::Fixed) => ctx.config.threshold.mode = ThresholdMode::Fixed,
                Some(Policy::Mad) => ctx.config.threshold.mode = ThresholdMode::RobustMad,
                None => {}
            }
            ctx.config.validate()?;
            let scene = load_scene(&a.manifest)?;
            let r = pipeline::render_stage(&scene, &ctx.config)?;
            let seeds = pipeline::seed_stage(&scene, &r, &ctx.config)?;
            info!("{} seed points", seeds.len());
            ctx.write("seeds.json", &seeds)?;
        }
        Command::Supervoxel(a) => {
            if let Some(v) = a.voxel {
                ctx.config.supervoxel.voxel_resolution = v;
            }
            if let Some(v) = a.seed_res {
                ctx.config.supervoxel.seed_resolution = v;
            }
            ctx.config.validate()?;
            let scene = load_scene(&a.manifest)?;
            let graph = pipeline::supervoxel_stage(&scene, &ctx.config)?;
            info!("{} supervoxels, {} edges", graph.len(), graph.edges.len());
            ctx.write("graph.json", &graph)?;
        }
        Command::Assign(a) => {
            if !a.sources.is_empty() {
                ctx.config.sources = a.sources;
            }
            if let Some(t) = a.depth_tol {
                ctx.config.depth_tol = t;
            }
            ctx.config.validate()?;
            let scene = load_scene(&a.manifest)?;
            let graph: SupervoxelGraph = io::read_json(&ctx.input(&a.graph, "graph.json"))?;
            graph.validate(scene.rescan.len())?;
            let r = pipeline::render_stage(&scene, &ctx.config)?;
            let assignments = pipeline::assign_stage(&scene, &r, &graph, &ctx.config)?;
            let edges = pipeline::edge_weights(&scene.rescan, &graph, &assignments, &ctx.config)?;
            info!("{} of {} edges constrained", edges.active_count(), edges.edges.len());
            ctx.write("assignments.json", &AssignmentFile { assignments, edges })?;
        }
        Command::Optimize(a) => {
            if let Some(l) = a.lambda {
                ctx.config.lambda = l;
            }
            if let Some(p) = a.p_seed {
                ctx.config.p_seed = p;
            }
            if let Some(b) = a.baseline {
                ctx.config.baseline = baseline(b);
            }
            ctx.config.validate()?;
            let graph: SupervoxelGraph = io::read_json(&ctx.input(&a.graph, "graph.json"))?;
            let seeds: SeedSet = io::read_json(&ctx.input(&a.seeds, "seeds.json"))?;
            let file: AssignmentFile = io::read_json(&ctx.input(&a.assignments, "assignments.json"))?;
            let out = pipeline::optimize_stage(&graph, &seeds, &file.edges, &ctx.config)?;
            info!("{} of {} supervoxels changing", out.labels.iter().filter(|l| **l).count(), out.labels.len());
            ctx.write("labels.json", &out)?;
        }
        Command::Detect(a) => {
            ctx.config.validate()?;
            let scene = load_scene(&a.manifest)?;
            let graph: SupervoxelGraph = io::read_json(&ctx.input(&a.graph, "graph.json"))?;
            let labels: LabelOutput = io::read_json(&ctx.input(&a.labels, "labels.json"))?;
            let seeds: SeedSet = io::read_json(&ctx.input(&a.seeds, "seeds.json"))?;
            seeds.validate(scene.rescan.len())?;
            let dets = pipeline::detect_stage(&scene.rescan, &graph, &labels.labels, &seeds, &ctx.config)?;
            info!("{} detections", dets.len());
            ctx.write("detections.json", &dets)?;
            if let Some(p) = a.ply {
                postprocess::export_colored(&p, &scene.rescan, &dets)?;
            }
        }
        Command::Eval(a) => {
            let dets: DetectionSet = io::read_json(&a.pred)?;
            let gt: GroundTruth = io::read_json(&a.gt)?;
            let mode = match a.iou {
                IouArg::Point => IouMode::Point,
                IouArg::Box => IouMode::Box,
            };
            let cloud = match &a.manifest {
                Some(m) => Some(io::load_point_cloud(&io::load_manifest(m)?.rescan)?),
                None => None,
            };
            let report = eval::evaluate(&dets, &gt, &a.ks, mode, cloud.as_ref())?;
            print!("{}", report.table());
            ctx.write("report.json", &report)?;
        }
        Command::Synth(a) => {
            let mut spec = match (&a.spec, &a.preset) {
                (Some(p), _) => io::read_json::<SceneSpec>(p)?,
                (None, Some(name)) => SceneSpec::preset(name)?,
                (None, None) => SceneSpec::three_cuboids(),
            };
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let mut scene = synth::generate(&spec)?;
            if let Some(parts) = a.fragment {
                scene.fragment(parts, spec.seed)?;
            }
            let manifest = scene.write(&ctx.out)?;
            println!("{}", manifest.display());
        }
        Command::Run(a) => {
            if let Some(b) = a.baseline {
                ctx.config.baseline = baseline(b);
            }
            if let Some(l) = a.lambda {
                ctx.config.lambda = l;
            }
            if let Some(p) = a.p_seed {
                ctx.config.p_seed = p;
            }
            if let Some(t) = a.tau {
                ctx.config.threshold.tau_fixed = t;
            }
            ctx.config.validate()?;
            let scene = load_scene(&a.manifest)?;
            let out = pipeline::run(&scene, &ctx.config)?;
            out.write(&ctx.out)?;
            if a.ply {
                postprocess::export_colored(&ctx.out.join("detections.ply"), &scene.rescan, &out.detections)?;
            }
            println!("{} detections written to {}", out.detections.len(), ctx.out.display());
            if let Some(r) = &out.report {
                print!("{}", r.table());
            }
        }
        Command::Sweep(a) => {
            let param: SweepParam = a.param.parse()?;
            if let Some(b) = a.baseline {
                ctx.config.baseline = baseline(b);
            }
            ctx.config.validate()?;
            let scene = load_scene(&a.manifest)?;
            let table = pipeline::sweep(&scene, &ctx.config, param, &a.values)?;
            print!("{}", table.table());
            ctx.write("sweep.json", &table)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let config = match &cli.config {
        Some(p) => match io::read_json::<PipelineConfig>(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => PipelineConfig::default(),
    };
    let mut ctx = Ctx { config, out: cli.out };
    match execute(cli.command, &mut ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
