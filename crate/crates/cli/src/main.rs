use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stereo_patch::harness::{self, CalibKeys, ExperimentConfig, RunReport, SweepKind};
use stereo_patch::Error;

#[derive(Parser)]
#[command(name = "stereo-patch", version, about = "Adversarial patches against stereo depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `attack.steps=50`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (also settable through STEREOPATCH_OUT).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a patch and write patch, trace, report and panels.
    Attack {
        #[command(flatten)]
        common: Common,
        /// `grid` or `depth-vanish`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a saved patch directory or a plain PNG.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patch: PathBuf,
    },
    /// Run an interval, rotation, distance or size sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "interval")]
        kind: String,
    },
    /// Render disparity panels for a saved patch.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patch: PathBuf,
    },
    /// Parse a calibration file and print the derived rig.
    ParseCalib { file: PathBuf },
}

fn load(common: &Common, extra: Vec<String>) -> stereo_patch::Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend(extra);
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print_report(run: &RunReport, out: &Path) {
    let r = &run.report;
    println!("scenes:    {}", run.eval_scenes.len());
    println!("D1:        {:.2} ± {:.2} %", r.d1.mean, r.d1.std);
    println!("EPE:       {:.3} ± {:.3} px", r.epe.mean, r.epe.std);
    println!("attack-D1: {:.2} ± {:.2} %", r.attack_d1.mean, r.attack_d1.std);
    println!("output:    {}", out.display());
}

fn run(cli: Cli) -> stereo_patch::Result<()> {
    match cli.command {
        Command::Attack { common, mode, steps, seed } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(format!("attack.mode=\"{m}\""));
            }
            if let Some(s) = steps {
                extra.push(format!("attack.steps={s}"));
            }
            if let Some(s) = seed {
                extra.push(format!("attack.seed={s}"));
            }
            let cfg = load(&common, extra)?;
            let run = harness::run_attack(&cfg)?;
            print_report(&run, &cfg.output_dir);
        }
        Command::Eval { common, patch } => {
            let cfg = load(&common, Vec::new())?;
            let run = harness::run_eval(&cfg, &patch)?;
            print_report(&run, &cfg.output_dir);
        }
        Command::Sweep { common, kind } => {
            let kind: SweepKind = kind.parse()?;
            let cfg = load(&common, Vec::new())?;
            let rows = harness::run_sweep(&cfg, kind)?;
            for r in &rows {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
                println!(
                    "{:<12} {:>7.2}  disparity {:>8}  depth {:>8}  attack-D1 {:>7}  {}",
                    r.series,
                    r.x,
                    fmt(r.mean_disparity),
                    fmt(r.mean_depth_m),
                    fmt(r.attack_d1),
                    r.note
                );
            }
            println!("output: {}", cfg.output_dir.join(format!("sweep_{}.csv", kind.name())).display());
        }
        Command::Render { common, patch } => {
            let cfg = load(&common, Vec::new())?;
            for p in harness::run_render(&cfg, &patch)? {
                println!("{}", p.display());
            }
        }
        Command::ParseCalib { file } => {
            let rig = harness::load_kitti_calibration(&file, &CalibKeys::default())?;
            println!("focal_px:   {}", rig.focal_px);
            println!("baseline_m: {}", rig.baseline_m);
            println!("image_size: {}x{} (h x w)", rig.image_size.0, rig.image_size.1);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
