use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmrefine_cli::commands;
use mmrefine_cli::config::CfarMode;
use mmrefine_cli::report;
use mmrefine_cli::{CliError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "mmrefine",
    version,
    about = "Radar point-cloud refinement on simulated scenes"
)]
struct Cli {
    /// JSON configuration: a scene config for `simulate`, a run config otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scene and write it with its manifest.
    Simulate,
    /// Run the refinement pipeline on a scene and score it against truth.
    Run {
        /// Scene directory, overriding the config.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Disable dynamic reconstruction.
        #[arg(long)]
        no_dvir: bool,
        /// Disable spurious-point removal.
        #[arg(long)]
        no_pr: bool,
    },
    /// Run a CFAR detector on the scene's range-Doppler matrices.
    Cfar {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Compare finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Pfa,
    DbOffset,
}

fn run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(cli: &Cli, from_config: Option<&Path>, fallback: &str) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| from_config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate => {
            let cfg = commands::load_scene_config(cli.config.as_deref())?;
            let out = out_dir(cli, None, "scene");
            let s = commands::simulate(&cfg, &out)?;
            println!("scene written to {}", out.display());
            println!(
                "frames {}  objects {}  radar points {} ({} mirrored)  tracks {}  matrices {}  files {} in {} groups",
                s.frames,
                s.objects,
                s.radar_points,
                s.mirror_points,
                s.feature_tracks,
                s.range_doppler_matrices,
                s.files,
                s.groups
            );
        }
        Command::Run {
            scene,
            no_dvir,
            no_pr,
        } => {
            let mut cfg = run_config(cli.config.as_deref())?;
            if let Some(s) = scene {
                cfg.scene = s.clone();
            }
            cfg.dynamic_reconstruction &= !no_dvir;
            cfg.spurious_filter &= !no_pr;
            let out = out_dir(cli, cfg.output.as_deref(), "run");
            let (summary, _) = commands::run(&cfg, &out)?;
            let column = report::Column {
                label: summary.method.clone(),
                summary,
            };
            print!("{}", report::table(&[column]));
        }
        Command::Cfar { scene, mode } => {
            let mut cfg = run_config(cli.config.as_deref())?;
            if let Some(s) = scene {
                cfg.scene = s.clone();
            }
            if let Some(m) = mode {
                cfg.cfar.mode = match m {
                    ModeArg::Pfa => CfarMode::Pfa,
                    ModeArg::DbOffset => CfarMode::DbOffset,
                };
            }
            cfg.validate()?;
            let out = out_dir(cli, cfg.output.as_deref(), "cfar");
            let (cfar, _, _) = commands::cfar(&cfg, &out)?;
            for s in &cfar.settings {
                println!(
                    "{:<24} points {:>7}  detection rate {:.3e}",
                    s.label, s.total_points, s.detection_rate
                );
            }
        }
        Command::Report { runs } => {
            let out = out_dir(cli, None, "report");
            let (text, _) = report::report(runs, &out)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
