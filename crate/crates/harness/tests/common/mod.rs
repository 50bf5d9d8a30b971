use std::path::Path;

use gdmd_core::eval::EvalConfig;
use gdmd_harness::preset::paper_analog;
use gdmd_harness::ExperimentConfig;

/// The preset shrunk to run in well under a second per seed.
#[allow(dead_code)]
pub fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = paper_analog();
    c.name = "tiny".into();
    c.init.hidden = vec![16, 16];
    c.init.steps = 40;
    c.init.n_data = 500;
    c.gdmd.batch_size = 8;
    c.steps = 6;
    c.eval_every = 3;
    c.seeds = vec![0, 1];
    c.eval = EvalConfig {
        n_per_condition: 40,
        n_projections: 8,
        outlier_sigma: 3.0,
        n_per_task: 100,
    };
    c.output_dir = out.to_path_buf();
    c
}
