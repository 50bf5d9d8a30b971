//! Gradient-cosine and reward-trajectory summaries of finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gdmd_core::gdmd::StepMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::run::{read_metrics, write_atomic, RunManifest, RunStatus, MANIFEST_FILE};

/// Counts over the logged preference/distillation gradient cosine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    /// Steps that updated the generator.
    pub steps: usize,
    pub negative_steps: usize,
    /// Steps with mean optimality probability above one half.
    pub favourable_steps: usize,
    /// Favourable steps whose cosine is non-negative.
    pub favourable_nonnegative: usize,
}

impl CosineSummary {
    pub fn from_metrics(metrics: &[StepMetrics]) -> Self {
        let mut s = Self::default();
        for m in metrics.iter().filter(|m| !m.skipped) {
            s.steps += 1;
            if m.rl_dmd_cosine < 0.0 {
                s.negative_steps += 1;
            }
            if m.mean_r > 0.5 {
                s.favourable_steps += 1;
                if m.rl_dmd_cosine >= 0.0 {
                    s.favourable_nonnegative += 1;
                }
            }
        }
        s
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            steps: self.steps + other.steps,
            negative_steps: self.negative_steps + other.negative_steps,
            favourable_steps: self.favourable_steps + other.favourable_steps,
            favourable_nonnegative: self.favourable_nonnegative + other.favourable_nonnegative,
        }
    }

    /// `None` when no step was favourable.
    pub fn favourable_nonnegative_fraction(&self) -> Option<f64> {
        (self.favourable_steps > 0).then(|| self.favourable_nonnegative as f64 / self.favourable_steps as f64)
    }
}

/// Writes `rewards.csv` and `cosine.csv` for one metrics stream.
pub fn write_plotdata(metrics: &[StepMetrics], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut rewards = String::from("step,mean_r,frac_r_above_half,mean_r_raw_x0,mean_r_raw_tar,skipped\n");
    let mut cosine = String::from("step,rl_dmd_cosine,mean_r,grad_norm_dmd,grad_norm_rl,grad_norm_total\n");
    for m in metrics {
        let _ = writeln!(
            rewards,
            "{},{:?},{:?},{:?},{:?},{}",
            m.step, m.mean_r, m.frac_r_above_half, m.mean_r_raw_x0, m.mean_r_raw_tar, m.skipped
        );
        let _ = writeln!(
            cosine,
            "{},{:?},{:?},{:?},{:?},{:?}",
            m.step, m.rl_dmd_cosine, m.mean_r, m.grad_norm_dmd, m.grad_norm_rl, m.grad_norm_total
        );
    }
    write_atomic(&dir.join("rewards.csv"), rewards.as_bytes())?;
    write_atomic(&dir.join("cosine.csv"), cosine.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub run_dir: PathBuf,
    pub per_seed: BTreeMap<u64, CosineSummary>,
    pub total: CosineSummary,
    pub favourable_nonnegative_fraction: Option<f64>,
}

/// Summarizes every completed seed of the run at `run_dir` and writes plot
/// data for each to `<out_dir>/<seed>/`.
pub fn diagnose_run(run_dir: &Path, out_dir: &Path) -> Result<DiagnoseReport> {
    let manifest = RunManifest::load(&run_dir.join(MANIFEST_FILE))?;
    let mut per_seed = BTreeMap::new();
    let mut total = CosineSummary::default();
    for rec in manifest.seeds.iter().filter(|s| s.status == RunStatus::Complete) {
        let metrics = read_metrics(&run_dir.join(&rec.path).join("metrics.jsonl"))?;
        write_plotdata(&metrics, &out_dir.join(rec.seed.to_string()))?;
        let s = CosineSummary::from_metrics(&metrics);
        total = total.merge(&s);
        per_seed.insert(rec.seed, s);
    }
    let report = DiagnoseReport {
        run_dir: run_dir.to_path_buf(),
        per_seed,
        total,
        favourable_nonnegative_fraction: total.favourable_nonnegative_fraction(),
    };
    let path = out_dir.join("diagnose.json");
    let text = serde_json::to_string_pretty(&report).map_err(|source| HarnessError::Json {
        path: path.clone(),
        source,
    })?;
    write_atomic(&path, text.as_bytes())?;
    Ok(report)
}
