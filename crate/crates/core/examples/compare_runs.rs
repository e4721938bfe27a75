//! Trains the toy phase model and its baseline through the CLI layer,
//! then writes the comparison report and loss-curve SVG.
//!
//! cargo run --release --example compare_runs -- [steps]

use threephase::cli::{compare, compare_table, train, RunConfig};

fn main() -> threephase::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let root = std::env::temp_dir().join("threephase-compare");
    let mut dirs = Vec::new();
    for baseline in [false, true] {
        let mut cfg = RunConfig::toy();
        cfg.optim.total_steps = steps;
        if baseline {
            cfg.model = cfg.model.to_baseline();
        }
        cfg.out_dir = root.join(cfg.label());
        let s = train(&cfg)?;
        println!("{}: {:.4} -> val {:.4}", s.label, s.initial_loss, s.final_val_loss);
        dirs.push(cfg.out_dir);
    }
    let report = compare(&dirs, &root.join("compare"))?;
    print!("{}", compare_table(&report));
    Ok(())
}
