//! Sweeps the phase count with two query heads and one KV head per phase
//! and tabulates angle counts and pinned residuals.
//!
//! THREEPHASE_THREADS=4 cargo run --release --example n_sweep -- [steps]

use threephase::cli::{sweep_n, sweep_table, RunConfig};

fn main() -> threephase::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let mut cfg = RunConfig::toy();
    cfg.model.d_model = 96;
    cfg.optim.total_steps = steps;
    cfg.optim.warmup_steps = cfg.optim.warmup_steps.min(steps);
    cfg.train.eval_every = 0;
    cfg.out_dir = std::env::temp_dir().join("threephase-sweep");
    let rows = sweep_n(&cfg, &[1, 2, 3, 4, 6, 8, 12])?;
    print!("{}", sweep_table(&rows));
    Ok(())
}
