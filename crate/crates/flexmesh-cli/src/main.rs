//! Command-line front end: rest-shape fitting, trajectory optimization,
//! motion metrics, and the transport consistency demo.
//!
//! Settings come from three layers, lowest priority first: built-in
//! defaults, an optional flat `key = value` config file, and command-line
//! flags. `FLEXMESH_SEED` supplies the seed when neither a flag nor the
//! file does. Exit codes: 0 on success, 1 on numerical failure, 2 on
//! configuration or I/O problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flexmesh::error::{Error, Result};
use flexmesh::pipeline::{
    run_animate, run_fit_rest, run_metrics, run_pfode_demo, OracleChoice, PfodeDemoConfig,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "flexmesh", version, about = "2D mesh deformation animation from a single image")]
struct Cli {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the rest Jacobian field of a mesh and write it as a checkpoint.
    FitRest(RunArgs),
    /// Optimize keypoint trajectories against the chosen oracle and emit
    /// frames, a GIF, trajectories, a motion record, and a loss log.
    Animate(RunArgs),
    /// Report deformation smoothness and animation energy for a motion
    /// record.
    Metrics(MetricsArgs),
    /// Transport an ensemble with both the stochastic and the
    /// deterministic dynamics and check their covariances agree.
    PfodeDemo(PfodeArgs),
}

/// Flags shared by `fit-rest` and `animate`; every field mirrors a config
/// file key of the same (kebab-case) name.
#[derive(Args)]
struct RunArgs {
    /// Mesh JSON file.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Source PNG the mesh is pinned to.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Directory receiving checkpoints and artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Opaque condition forwarded to the oracle.
    #[arg(long)]
    prompt: Option<String>,
    /// Animation frame count.
    #[arg(long)]
    frames: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Weight of the flow-matching term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Keypoint constraint weight of the deformation solve.
    #[arg(long)]
    constraint_weight: Option<f64>,
    /// Temporal attention window.
    #[arg(long)]
    window: Option<usize>,
    /// Iteration budget of the rest fit.
    #[arg(long)]
    fit_iterations: Option<usize>,
    /// Oracle: `gaussian`, `teacher:<path>`, or `remote:<url>`.
    #[arg(long)]
    oracle: Option<String>,
    /// Square resolution of the frames the oracle sees.
    #[arg(long)]
    oracle_size: Option<usize>,
    /// Damping applied to predicted trajectory offsets.
    #[arg(long)]
    motion_scale: Option<f64>,
    /// Monte-Carlo samples per gradient estimate.
    #[arg(long)]
    samples: Option<usize>,
    /// GIF playback rate.
    #[arg(long)]
    fps: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Motion record JSON (`motion.json` from an animate run).
    record: PathBuf,
    /// Also write the CSV report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PfodeArgs {
    #[arg(long)]
    particles: Option<usize>,
    /// Integration steps for both dynamics.
    #[arg(long)]
    steps: Option<usize>,
    /// Maximum relative covariance error counted as a pass.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Scales the stochastic diffusion; anything other than 1.0
    /// deliberately breaks the consistency condition.
    #[arg(long)]
    fault_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitRest(args) => {
            let config = build_run_config(cli.config.as_deref(), &args, false)?;
            let fit = run_fit_rest(&config)?;
            println!(
                "rest fit: objective {:e} after {} iterations",
                fit.objective, fit.iterations_run
            );
            println!("checkpoint: {}", fit.checkpoint.display());
            Ok(())
        }
        Command::Animate(args) => {
            let config = build_run_config(cli.config.as_deref(), &args, true)?;
            let summary = run_animate(&config)?;
            if let Some(last) = summary.loss_log.last() {
                println!(
                    "final losses: sds {:e}  flow {:e}  total {:e}",
                    last.sds, last.flow, last.total
                );
            }
            if let Some(dir) = summary.frame_paths.first().and_then(|p| p.parent()) {
                println!("frames: {} files under {}", summary.frame_paths.len(), dir.display());
            }
            println!("gif: {}", summary.gif_path.display());
            println!("trajectories: {}", summary.trajectory_path.display());
            println!("motion record: {}", summary.motion_path.display());
            println!("loss log: {}", summary.loss_log_path.display());
            Ok(())
        }
        Command::Metrics(args) => {
            let csv = run_metrics(&args.record, args.out.as_deref())?;
            print!("{csv}");
            Ok(())
        }
        Command::PfodeDemo(args) => {
            let mut config = PfodeDemoConfig::default();
            if let Some(n) = args.particles {
                config.particles = n;
            }
            if let Some(n) = args.steps {
                config.steps = n;
            }
            if let Some(x) = args.tolerance {
                config.tolerance = x;
            }
            if let Some(x) = args.fault_scale {
                config.fault_scale = x;
            }
            config.seed = match args.seed {
                Some(s) => s,
                None => seed_from_env()?.unwrap_or(config.seed),
            };
            let report = run_pfode_demo(&config)?;
            println!("{report}");
            if report.passed {
                Ok(())
            } else {
                Err(Error::numeric("covariance consistency check failed"))
            }
        }
    }
}

/// Defaults, then the config file, then flags; the seed falls back to
/// `FLEXMESH_SEED` when neither a flag nor the file pins it.
fn build_run_config(file: Option<&Path>, args: &RunArgs, needs_image: bool) -> Result<RunConfig> {
    let mut config = RunConfig::new(PathBuf::new(), PathBuf::new(), PathBuf::from("out"));
    let mut seed_pinned = false;
    if let Some(path) = file {
        seed_pinned = apply_config_file(&mut config, path)?;
    }
    apply_flags(&mut config, args)?;
    if args.seed.is_none() && !seed_pinned {
        if let Some(seed) = seed_from_env()? {
            config.seed = seed;
        }
    }
    if config.mesh_path.as_os_str().is_empty() {
        return Err(Error::config("no mesh given; pass --mesh or set `mesh` in the config file"));
    }
    if needs_image && config.image_path.as_os_str().is_empty() {
        return Err(Error::config(
            "no source image given; pass --image or set `image` in the config file",
        ));
    }
    Ok(config)
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("FLEXMESH_SEED") {
        Ok(text) => Ok(Some(parse_value("FLEXMESH_SEED", &text)?)),
        Err(_) => Ok(None),
    }
}

/// Applies a flat `key = value` file. `#` starts a comment; blank lines are
/// skipped; keys may use `-` or `_`. Returns whether the file set the seed.
fn apply_config_file(config: &mut RunConfig, path: &Path) -> Result<bool> {
    if !path.exists() {
        return Err(Error::config(format!("config file not found: {}", path.display())));
    }
    let text = std::fs::read_to_string(path)?;
    let mut seed_pinned = false;
    for (index, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("{}:{}: expected `key = value`", path.display(), index + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        seed_pinned |= key == "seed";
        apply_key(config, &key, value).map_err(|err| {
            Error::config(format!("{}:{}: {err}", path.display(), index + 1))
        })?;
    }
    Ok(seed_pinned)
}

fn apply_key(config: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "mesh" => config.mesh_path = PathBuf::from(value),
        "image" => config.image_path = PathBuf::from(value),
        "out-dir" => config.out_dir = PathBuf::from(value),
        "prompt" => config.prompt = Some(value.to_string()),
        "frames" => config.frames = parse_value(key, value)?,
        "steps" => config.steps = parse_value(key, value)?,
        "learning-rate" => config.learning_rate = parse_value(key, value)?,
        "guidance-scale" => config.guidance_scale = parse_value(key, value)?,
        "lambda" => config.lambda = parse_value(key, value)?,
        "constraint-weight" => config.constraint_weight = parse_value(key, value)?,
        "window" => config.window = parse_value(key, value)?,
        "fit-iterations" => config.fit_iterations = parse_value(key, value)?,
        "oracle" => config.oracle = OracleChoice::parse(value)?,
        "oracle-size" => config.oracle_size = parse_value(key, value)?,
        "motion-scale" => config.motion_scale = parse_value(key, value)?,
        "samples" => config.samples = parse_value(key, value)?,
        "fps" => config.fps = parse_value(key, value)?,
        "seed" => config.seed = parse_value(key, value)?,
        _ => return Err(Error::config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

fn apply_flags(config: &mut RunConfig, args: &RunArgs) -> Result<()> {
    if let Some(p) = &args.mesh {
        config.mesh_path = p.clone();
    }
    if let Some(p) = &args.image {
        config.image_path = p.clone();
    }
    if let Some(p) = &args.out_dir {
        config.out_dir = p.clone();
    }
    if let Some(p) = &args.prompt {
        config.prompt = Some(p.clone());
    }
    if let Some(n) = args.frames {
        config.frames = n;
    }
    if let Some(n) = args.steps {
        config.steps = n;
    }
    if let Some(x) = args.learning_rate {
        config.learning_rate = x;
    }
    if let Some(x) = args.guidance_scale {
        config.guidance_scale = x;
    }
    if let Some(x) = args.lambda {
        config.lambda = x;
    }
    if let Some(x) = args.constraint_weight {
        config.constraint_weight = x;
    }
    if let Some(n) = args.window {
        config.window = n;
    }
    if let Some(n) = args.fit_iterations {
        config.fit_iterations = n;
    }
    if let Some(text) = &args.oracle {
        config.oracle = OracleChoice::parse(text)?;
    }
    if let Some(n) = args.oracle_size {
        config.oracle_size = n;
    }
    if let Some(x) = args.motion_scale {
        config.motion_scale = x;
    }
    if let Some(n) = args.samples {
        config.samples = n;
    }
    if let Some(n) = args.fps {
        config.fps = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    Ok(())
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("cannot parse {value:?} as a value for {key}")))
}
