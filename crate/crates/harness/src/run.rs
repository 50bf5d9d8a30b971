//! Seeded runs: init preparation, the training loop, evaluation and
//! on-disk persistence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use gdmd_core::eval::{full_eval, EvalReport, GeneratorSampler, Sampler};
use gdmd_core::gdmd::{train_step, StepMetrics, TrainContext, TrainState};
use gdmd_core::nn::{checkpoint, Mlp};
use gdmd_core::reward::RewardModel;
use gdmd_core::teacher::{train_learned_teacher, FrozenTeacher, LabeledData, TeacherModel};
use gdmd_core::{Mlp64, TeacherModel64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, TeacherMode};
use crate::diagnose::write_plotdata;
use crate::error::{HarnessError, Result};

pub const CODE_VERSION: &str = concat!("gdmd-harness ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINALIZED_MARKER: &str = "FINALIZED";

const EVAL_SEED_SALT: u64 = 0xE7A1_5EED_0000_0001;
const SAMPLES_PER_LABEL: usize = 250;

/// Seed of the evaluation stream for a training seed. Independent of the
/// method and the step, so every evaluation of a seed sees the same noise.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_SEED_SALT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
    /// Some seeds failed.
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    /// Relative to the run directory.
    pub path: PathBuf,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_eval: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub code_version: String,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub seeds: Vec<SeedRecord>,
    pub status: RunStatus,
    /// Absolute or output-relative path of the run directory.
    pub run_dir: PathBuf,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Final reports of the seeds that completed, in seed order.
    pub fn final_evals(&self) -> Vec<(u64, &EvalReport)> {
        self.seeds
            .iter()
            .filter_map(|s| s.final_eval.as_ref().map(|e| (s.seed, e)))
            .collect()
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let io = |e| HarnessError::io(path, e);
    {
        let mut f = File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

/// The flow-matching network every run of a configuration starts from.
#[derive(Debug, Clone)]
pub struct PreparedInit {
    pub model: Mlp64,
    pub cache_path: PathBuf,
    /// Present only when the network was trained rather than loaded.
    pub losses: Option<Vec<f64>>,
}

/// Key of the init cache: depends on the world and the init settings only.
pub fn init_key(config: &ExperimentConfig) -> String {
    let value = serde_json::json!({ "world": config.world, "init": config.init });
    let digest = Sha256::digest(value.to_string().as_bytes());
    hex::encode(&digest[..8])
}

/// Loads the init network from `<out>/init-cache/` or trains and caches it.
pub fn prepare_init(config: &ExperimentConfig) -> Result<PreparedInit> {
    let dir = config.output_dir.join("init-cache");
    let cache_path = dir.join(format!("{}.ckpt", init_key(config)));
    if cache_path.exists() {
        let model = checkpoint::load(&cache_path)?;
        return Ok(PreparedInit {
            model,
            cache_path,
            losses: None,
        });
    }
    create_dir(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init.seed);
    let data = LabeledData::<f64>::sample(&config.world, config.init.n_data, &mut rng)?;
    let trained = train_learned_teacher(&data, &config.init.train_config(&config.world), &mut rng)?;
    let model = trained
        .teacher
        .learned()
        .map(|f| f.model().clone())
        .ok_or_else(|| HarnessError::Runtime("init training returned no network".into()))?;
    checkpoint::save(&model, &cache_path)?;
    Ok(PreparedInit {
        model,
        cache_path,
        losses: Some(trained.losses),
    })
}

pub fn build_teacher(config: &ExperimentConfig, init: &Mlp64) -> TeacherModel64 {
    match config.teacher {
        TeacherMode::Analytic => TeacherModel::Analytic(config.world.clone()),
        TeacherMode::Learned => TeacherModel::Learned(FrozenTeacher::freeze(init.clone())),
    }
}

/// Evaluates `model` with the seed's evaluation stream.
pub fn evaluate(config: &ExperimentConfig, model: &Mlp64, seed: u64) -> Result<EvalReport> {
    let sampler = GeneratorSampler {
        model,
        schedule: &config.gdmd.schedule,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(seed));
    Ok(full_eval(&sampler, &config.world, &config.rewards, &config.eval, &mut rng)?)
}

#[derive(Serialize)]
struct TimingLine {
    step: u64,
    wall_ms: f64,
}

struct EvalSink {
    dir: PathBuf,
    csv: BufWriter<File>,
    header_written: bool,
}

impl EvalSink {
    fn new(dir: PathBuf) -> Result<Self> {
        create_dir(&dir)?;
        let path = dir.join("evals.csv");
        let csv = BufWriter::new(File::create(&path).map_err(|e| HarnessError::io(&path, e))?);
        Ok(Self {
            dir,
            csv,
            header_written: false,
        })
    }

    fn record(&mut self, step: u64, report: &EvalReport) -> Result<()> {
        write_json(&self.dir.join(format!("step_{step:06}.json")), report)?;
        let path = self.dir.join("evals.csv");
        let io = |e| HarnessError::io(&path, e);
        if !self.header_written {
            writeln!(self.csv, "step,{}", report.csv_header()).map_err(io)?;
            self.header_written = true;
        }
        writeln!(self.csv, "{step},{}", report.csv_row()).map_err(io)?;
        self.csv.flush().map_err(io)
    }
}

/// Output of one seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub checkpoint_hash: String,
    pub final_eval: EvalReport,
    pub metrics: Vec<StepMetrics>,
}

/// Trains one seed and writes everything under `dir`.
pub fn run_seed(
    config: &ExperimentConfig,
    init: &Mlp64,
    teacher: &TeacherModel64,
    reward: &RewardModel,
    seed: u64,
    dir: &Path,
) -> Result<SeedOutcome> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    for sub in ["checkpoints", "plotdata"] {
        create_dir(&dir.join(sub))?;
    }
    let mut evals = EvalSink::new(dir.join("eval"))?;
    let metrics_path = dir.join("metrics.jsonl");
    let timing_path = dir.join("timing.jsonl");
    let mut metrics_out = BufWriter::new(File::create(&metrics_path).map_err(|e| HarnessError::io(&metrics_path, e))?);
    let mut timing_out = BufWriter::new(File::create(&timing_path).map_err(|e| HarnessError::io(&timing_path, e))?);

    let ctx = TrainContext {
        teacher,
        world: &config.world,
        reward,
        decoder: config.gdmd.decoder,
    };
    let mut state = TrainState::new(init, &config.gdmd, seed);
    let mut final_eval = evaluate(config, &state.generator, seed)?;
    evals.record(0, &final_eval)?;
    let mut all = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        let batch = state.sample_batch(&config.world, config.gdmd.batch_size)?;
        let start = Instant::now();
        let m = train_step(config.method, &mut state, &ctx, &batch, &config.gdmd)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let line = serde_json::to_string(&m).map_err(|source| HarnessError::Json {
            path: metrics_path.clone(),
            source,
        })?;
        writeln!(metrics_out, "{line}").map_err(|e| HarnessError::io(&metrics_path, e))?;
        let timing = serde_json::to_string(&TimingLine { step: m.step, wall_ms }).expect("timing serializes");
        writeln!(timing_out, "{timing}").map_err(|e| HarnessError::io(&timing_path, e))?;
        all.push(m);
        if state.step % config.eval_every == 0 || state.step == config.steps {
            final_eval = evaluate(config, &state.generator, seed)?;
            evals.record(state.step, &final_eval)?;
        }
    }
    metrics_out.flush().map_err(|e| HarnessError::io(&metrics_path, e))?;
    timing_out.flush().map_err(|e| HarnessError::io(&timing_path, e))?;

    checkpoint::save(&state.generator, &dir.join("checkpoints").join("final.ckpt"))?;
    write_plotdata(&all, &dir.join("plotdata"))?;
    write_samples(config, &state.generator, seed, &dir.join("plotdata").join("samples.csv"))?;
    Ok(SeedOutcome {
        checkpoint_hash: checkpoint::param_hash(&state.generator),
        final_eval,
        metrics: all,
    })
}

fn write_samples(config: &ExperimentConfig, model: &Mlp<f64>, seed: u64, path: &Path) -> Result<()> {
    let sampler = GeneratorSampler {
        model,
        schedule: &config.gdmd.schedule,
    };
    let labels: Vec<usize> = (0..config.world.n_labels())
        .flat_map(|l| std::iter::repeat(l).take(SAMPLES_PER_LABEL))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(seed).rotate_left(17));
    let x = sampler.sample(&labels, &mut rng)?;
    let mut text = String::from("label");
    for d in 0..config.world.dim() {
        text.push_str(&format!(",x{d}"));
    }
    text.push('\n');
    for (l, row) in labels.iter().zip(x.iter_rows()) {
        text.push_str(&l.to_string());
        for v in row {
            text.push_str(&format!(",{v:?}"));
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn overall_status(seeds: &[SeedRecord]) -> RunStatus {
    let ok = seeds.iter().filter(|s| s.status == RunStatus::Complete).count();
    match ok {
        n if n == seeds.len() => RunStatus::Complete,
        0 => RunStatus::Failed,
        _ => RunStatus::Partial,
    }
}

/// Runs every seed of `config` under `<output_dir>/<hash>/`.
///
/// A failing seed is recorded in the manifest and the remaining seeds still
/// run. A directory holding a finalized run is never touched.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let run_dir = config.run_dir();
    if run_dir.join(FINALIZED_MARKER).exists() {
        return Err(HarnessError::Finalized(run_dir));
    }
    create_dir(&run_dir)?;
    write_atomic(&run_dir.join("config.toml"), config.to_toml_string()?.as_bytes())?;

    let mut manifest = RunManifest {
        name: config.name.clone(),
        config_hash: config.config_hash(),
        code_version: CODE_VERSION.to_string(),
        started_at: unix_now(),
        finished_at: None,
        seeds: config
            .seeds
            .iter()
            .map(|&seed| SeedRecord {
                seed,
                path: PathBuf::from(seed.to_string()),
                status: RunStatus::Incomplete,
                error: None,
                checkpoint_hash: None,
                final_eval: None,
            })
            .collect(),
        status: RunStatus::Incomplete,
        run_dir: run_dir.clone(),
    };
    let manifest_path = run_dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;

    let init = prepare_init(config)?;
    let teacher = build_teacher(config, &init.model);
    let reward = config.rewards.training_reward();
    for record in &mut manifest.seeds {
        let dir = run_dir.join(&record.path);
        log::info!("{}: seed {} ({})", config.name, record.seed, config.method.name());
        match run_seed(config, &init.model, &teacher, &reward, record.seed, &dir) {
            Ok(out) => {
                record.status = RunStatus::Complete;
                record.checkpoint_hash = Some(out.checkpoint_hash);
                record.final_eval = Some(out.final_eval);
            }
            Err(e) => {
                log::error!("{}: seed {} failed: {e}", config.name, record.seed);
                record.status = RunStatus::Failed;
                record.error = Some(e.to_string());
            }
        }
    }
    manifest.status = overall_status(&manifest.seeds);
    manifest.finished_at = Some(unix_now());
    write_json(&manifest_path, &manifest)?;
    write_atomic(&run_dir.join(FINALIZED_MARKER), manifest.config_hash.as_bytes())?;
    Ok(manifest)
}

/// Reads the metrics stream of one seed.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| HarnessError::Json {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}
