//! Cross-product ablation grids and their summary table.

use std::path::{Path, PathBuf};

use gdmd_core::eval::EvalReport;
use gdmd_core::gdmd::Method;

use crate::config::{parse_collection, ExperimentConfig, MatrixAxes};
use crate::error::{HarnessError, Result};
use crate::run::{run_experiment, write_atomic, RunManifest};

/// One cell of the grid.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Expands `axes` over `base`. Empty axes keep the base value, so no axes
/// at all yield the base run alone.
pub fn expand(base: &ExperimentConfig, axes: &MatrixAxes) -> Result<Vec<Variant>> {
    let methods: Vec<Method> = if axes.methods.is_empty() {
        vec![base.method]
    } else {
        axes.methods.clone()
    };
    let collections = if axes.collections.is_empty() {
        vec![base.gdmd.collection]
    } else {
        axes.collections.iter().map(|c| parse_collection(c)).collect::<Result<_>>()?
    };
    let mut out = Vec::new();
    for &method in &methods {
        for &collection in &collections {
            let mut config = base.clone();
            config.method = method;
            config.gdmd.collection = collection;
            config.matrix = None;
            let label = format!("{}/{}", method.name(), collection.name());
            config.name = format!("{}:{label}", base.name);
            config.validate()?;
            out.push(Variant { label, config });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MatrixResult {
    pub variants: Vec<(Variant, RunManifest)>,
    pub summary_path: PathBuf,
}

/// Column-wise mean of the final reports, in seed order. `None` when no
/// seed completed.
pub fn seed_average(reports: &[&EvalReport]) -> Option<Vec<(String, f64)>> {
    let first = reports.first()?;
    let mut cols = first.columns();
    for r in &reports[1..] {
        for ((name, acc), (other, v)) in cols.iter_mut().zip(r.columns()) {
            debug_assert_eq!(*name, other);
            *acc += v;
        }
    }
    let n = reports.len() as f64;
    for (_, v) in &mut cols {
        *v /= n;
    }
    Some(cols)
}

fn summary_csv(results: &[(Variant, RunManifest)]) -> String {
    let averaged: Vec<Option<Vec<(String, f64)>>> = results
        .iter()
        .map(|(_, m)| seed_average(&m.final_evals().into_iter().map(|(_, r)| r).collect::<Vec<_>>()))
        .collect();
    let header: Vec<String> = averaged
        .iter()
        .flatten()
        .next()
        .map(|c| c.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let mut text = String::from("variant,method,collection,seeds_completed");
    for h in &header {
        text.push(',');
        text.push_str(h);
    }
    text.push('\n');
    for ((variant, manifest), avg) in results.iter().zip(&averaged) {
        let c = &variant.config;
        text.push_str(&format!(
            "{},{},{},{}",
            variant.label,
            c.method.name(),
            c.gdmd.collection.name(),
            manifest.final_evals().len()
        ));
        match avg {
            Some(cols) => cols.iter().for_each(|(_, v)| text.push_str(&format!(",{v:?}"))),
            None => header.iter().for_each(|_| text.push(',')),
        }
        text.push('\n');
    }
    text
}

/// Runs every cell and writes `<output_dir>/summary.csv`, one row per
/// variant with seed-averaged final metrics.
pub fn run_ablation_matrix(base: &ExperimentConfig, axes: &MatrixAxes) -> Result<MatrixResult> {
    base.validate()?;
    let variants = expand(base, axes)?;
    let mut results = Vec::with_capacity(variants.len());
    for v in variants {
        log::info!("matrix cell {}", v.label);
        let manifest = run_experiment(&v.config)?;
        results.push((v, manifest));
    }
    let summary_path = base.output_dir.join("summary.csv");
    write_summary(&summary_path, &results)?;
    Ok(MatrixResult {
        variants: results,
        summary_path,
    })
}

fn write_summary(path: &Path, results: &[(Variant, RunManifest)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    write_atomic(path, summary_csv(results).as_bytes())
}
