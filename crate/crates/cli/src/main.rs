//! `vo-kit`: runs the Monte-Carlo studies and writes CSV results.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vokit::config::ExperimentConfig;
use vokit::experiments::{
    run_ba_effect, run_consistency, run_kf_compare, run_single_pipeline, scene_seed, with_workers,
    ExperimentError,
};
use vokit::scene::Scene;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "vo-kit", version, about = "Stereo visual odometry experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Error of the noise and pose estimators against the number of points.
    Consistency(RunArgs),
    /// Latest, two- and three-keyframe tracking, and latest with bundle adjustment.
    KfCompare(RunArgs),
    /// Latest-keyframe tracking with and without bundle adjustment.
    BaEffect(RunArgs),
    /// The configured trajectory and keyframe policy.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    Smoke,
    Full,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured repetitions.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_enum, default_value = "full")]
    profile: Profile,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also write the first repetition's scene to `scene.txt`.
    #[arg(long)]
    dump_scene: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

struct Prepared {
    cfg: ExperimentConfig,
    seed: u64,
    reps: usize,
}

fn prepare(args: &RunArgs, consistency: bool) -> Result<Prepared, Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.scene.seed = seed;
    }
    let default_reps = match (args.profile, consistency) {
        (Profile::Smoke, true) => 30,
        (Profile::Smoke, false) => 2,
        (Profile::Full, true) => 1000,
        (Profile::Full, false) => 10,
    };
    let reps = args.reps.or(cfg.repetitions).unwrap_or(default_reps);
    if reps == 0 {
        return Err(Failure::Config(
            "repetitions must be at least 1".to_string(),
        ));
    }
    if args.profile == Profile::Smoke {
        cfg.consistency.point_counts.retain(|&n| n <= 240);
        // truncate the trajectory rather than compress it
        cfg.scene.circle_frames_per_loop = Some(
            cfg.scene
                .circle_frames_per_loop
                .unwrap_or(cfg.scene.n_frames),
        );
        cfg.scene.n_frames = cfg.scene.n_frames.min(100);
    }
    cfg.repetitions = Some(reps);
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(Prepared {
        seed: cfg.scene.seed,
        cfg,
        reps,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn meta(command: &str, args: &RunArgs, p: &Prepared) -> String {
    let profile = match args.profile {
        Profile::Smoke => "smoke",
        Profile::Full => "full",
    };
    format!(
        "command = {command}\nversion = {}\nseed = {}\nrepetitions = {}\nprofile = {profile}\n\n{}",
        env!("CARGO_PKG_VERSION"),
        p.seed,
        p.reps,
        p.cfg.echo()
    )
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (name, args) = match &cli.command {
        Command::Consistency(a) => ("consistency", a),
        Command::KfCompare(a) => ("kf-compare", a),
        Command::BaEffect(a) => ("ba-effect", a),
        Command::Pipeline(a) => ("pipeline", &a.run),
    };
    let p = prepare(args, matches!(cli.command, Command::Consistency(_)))?;
    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", args.out.display())))?;
    log::info!("{name}: seed {}, {} repetitions", p.seed, p.reps);

    let files: Vec<(&str, String)> =
        with_workers(args.workers, || -> Result<_, ExperimentError> {
            Ok(match &cli.command {
                Command::Consistency(_) => {
                    let r = run_consistency(&p.cfg, p.seed, p.reps)?;
                    vec![
                        ("results.csv", r.results_csv()),
                        ("summary.csv", r.summary_csv()),
                    ]
                }
                Command::KfCompare(_) => {
                    let r = run_kf_compare(&p.cfg, p.seed, p.reps)?;
                    vec![
                        ("results.csv", r.frames_csv()),
                        ("runs.csv", r.runs_csv()),
                        ("summary.csv", r.summary_csv()),
                    ]
                }
                Command::BaEffect(_) => {
                    let r = run_ba_effect(&p.cfg, p.seed, p.reps)?;
                    vec![
                        ("results.csv", r.frames_csv()),
                        ("runs.csv", r.runs_csv()),
                        ("summary.csv", r.paired_ba_csv()),
                    ]
                }
                Command::Pipeline(a) => {
                    let r = run_single_pipeline(&p.cfg, p.seed, p.reps)?;
                    let mut files = vec![
                        ("results.csv", r.frames_csv()),
                        ("runs.csv", r.runs_csv()),
                        ("summary.csv", r.summary_csv()),
                    ];
                    if a.dump_scene {
                        let mut scene_cfg = p.cfg.scene.clone();
                        scene_cfg.seed = scene_seed(p.seed, scene_cfg.trajectory, 0);
                        files.push(("scene.txt", Scene::generate(&scene_cfg)?.write_text()));
                    }
                    files
                }
            })
        })??;

    for (file, contents) in &files {
        write(&args.out, file, contents)?;
    }
    write(&args.out, "meta.txt", &meta(name, args, &p))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
