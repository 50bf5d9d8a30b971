//! The `gdmd` command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gdmd_core::nn::checkpoint;

use crate::config::ExperimentConfig;
use crate::diagnose::diagnose_run;
use crate::error::{HarnessError, Result};
use crate::matrix::run_ablation_matrix;
use crate::preset;
use crate::run::{evaluate, prepare_init, run_experiment, write_atomic, RunStatus};

/// Environment variable that overrides `output_dir` when `--out` is absent.
pub const OUTPUT_DIR_ENV: &str = "GDMD_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "gdmd", version, about = "Few-step distillation with gradient-scored preference optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain (or load from cache) the network runs start from.
    TrainTeacher(ConfigArgs),
    /// Run one experiment over its seeds.
    Run(ConfigArgs),
    /// Run the configuration's ablation grid and write summary.csv.
    Matrix(ConfigArgs),
    /// Re-evaluate a generator checkpoint.
    Eval(EvalArgs),
    /// Emit gradient-cosine and reward plot data for a finished run.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in preset name instead of a file (`paper-analog`, `paper-analog-ablation`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Restrict the run to this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the `config.toml` of the run holding the checkpoint.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Evaluation seed; defaults to the checkpoint's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Run directory (`<out>/<hash>`).
    #[arg(long, required_unless_present_any = ["config", "preset"])]
    pub run: Option<PathBuf>,
    /// Locate the run through its configuration instead.
    #[arg(long, conflicts_with_all = ["run", "preset"])]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "run")]
    pub preset: Option<String>,
    /// Where plot data goes; defaults to `<run>-diagnose`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_config(config: Option<&Path>, preset_name: Option<&str>) -> Result<ExperimentConfig> {
    match (config, preset_name) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(name)) => {
            preset::by_name(name).ok_or_else(|| HarnessError::Config(format!("unknown preset `{name}`")))
        }
        (None, None) => Err(HarnessError::Config("either --config or --preset is required".into())),
    }
}

fn apply_overrides(config: &mut ExperimentConfig, seed: Option<u64>, out: Option<&Path>) {
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    if let Some(o) = out {
        config.output_dir = o.to_path_buf();
    } else if let Some(env) = std::env::var_os(OUTPUT_DIR_ENV) {
        config.output_dir = PathBuf::from(env);
    }
}

fn configured(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut config = load_config(args.config.as_deref(), args.preset.as_deref())?;
    apply_overrides(&mut config, args.seed, args.out.as_deref());
    config.validate()?;
    Ok(config)
}

fn status_result(what: &str, status: RunStatus) -> Result<()> {
    match status {
        RunStatus::Complete => Ok(()),
        other => Err(HarnessError::Runtime(format!("{what} finished with status {other:?}"))),
    }
}

fn cmd_train_teacher(args: &ConfigArgs) -> Result<()> {
    let config = configured(args)?;
    let init = prepare_init(&config)?;
    match &init.losses {
        Some(l) => println!(
            "trained init network ({} steps, final loss {:.5}) -> {}",
            l.len(),
            l.last().copied().unwrap_or(f64::NAN),
            init.cache_path.display()
        ),
        None => println!("init network already cached at {}", init.cache_path.display()),
    }
    Ok(())
}

fn cmd_run(args: &ConfigArgs) -> Result<()> {
    let config = configured(args)?;
    let manifest = run_experiment(&config)?;
    println!("{}", manifest.run_dir.join(crate::run::MANIFEST_FILE).display());
    for s in &manifest.seeds {
        if let Some(e) = &s.error {
            eprintln!("seed {} failed: {e}", s.seed);
        }
    }
    status_result("run", manifest.status)
}

fn cmd_matrix(args: &ConfigArgs) -> Result<()> {
    let config = configured(args)?;
    let axes = config.matrix.clone().unwrap_or_default();
    let result = run_ablation_matrix(&config, &axes)?;
    println!("{}", result.summary_path.display());
    for (v, m) in &result.variants {
        status_result(&v.label, m.status)?;
    }
    Ok(())
}

/// `<run>/<seed>/checkpoints/<file>` -> (`<run>`, seed).
fn run_of_checkpoint(path: &Path) -> Option<(PathBuf, Option<u64>)> {
    let seed_dir = path.parent()?.parent()?;
    let seed = seed_dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse().ok());
    Some((seed_dir.parent()?.to_path_buf(), seed))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if !args.checkpoint.exists() {
        return Err(HarnessError::Config(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let located = run_of_checkpoint(&args.checkpoint);
    let config = match (&args.config, &args.preset, &located) {
        (None, None, Some((run, _))) => ExperimentConfig::load(&run.join("config.toml"))?,
        (None, None, None) => {
            return Err(HarnessError::Config("cannot locate a config for this checkpoint; pass --config".into()))
        }
        (c, p, _) => load_config(c.as_deref(), p.as_deref())?,
    };
    let seed = args.seed.or(located.and_then(|(_, s)| s)).unwrap_or(0);
    let model = checkpoint::load::<f64>(&args.checkpoint)?;
    let report = evaluate(&config, &model, seed)?;
    let json = report.to_json()?;
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
            }
            write_atomic(path, format!("{json}\n").as_bytes())?;
            println!("{}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let run_dir = match &args.run {
        Some(r) => r.clone(),
        None => {
            let mut c = load_config(args.config.as_deref(), args.preset.as_deref())?;
            apply_overrides(&mut c, None, None);
            c.run_dir()
        }
    };
    if !run_dir.join(crate::run::MANIFEST_FILE).exists() {
        return Err(HarnessError::Config(format!("{} holds no run manifest", run_dir.display())));
    }
    let out = args.out.clone().unwrap_or_else(|| {
        let mut name = run_dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push("-diagnose");
        run_dir.with_file_name(name)
    });
    let report = diagnose_run(&run_dir, &out)?;
    let t = report.total;
    println!(
        "steps {} negative-cosine {} favourable {} non-negative when favourable {}",
        t.steps,
        t.negative_steps,
        t.favourable_steps,
        report
            .favourable_nonnegative_fraction
            .map_or("n/a".to_string(), |f| format!("{:.1}%", 100.0 * f))
    );
    println!("{}", out.display());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::Run(a) => cmd_run(a),
        Command::Matrix(a) => cmd_matrix(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage or configuration errors, 1 otherwise.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
