//! Trains the toy model briefly, then writes the per-pair angle drift as a
//! CSV table and SVG heatmap.
//!
//! cargo run --release --example theta_drift_heatmap -- [out_dir]

use std::path::PathBuf;

use threephase::cli::RunConfig;
use threephase::diagnostics::{export_heatmap, theta_drift};
use threephase::train::Trainer;

fn main() -> threephase::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("threephase-heatmap"), PathBuf::from);
    let mut cfg = RunConfig::toy();
    cfg.optim.total_steps = 150;
    let corpus = cfg.corpus()?;
    let mut trainer = Trainer::<f32>::new(cfg.model.clone(), cfg.optim.clone(), cfg.train.clone(), &corpus, cfg.seed, true)?;
    for _ in 0..cfg.optim.total_steps {
        trainer.step()?;
    }
    let drift = theta_drift(&trainer.model().theta_bank());
    std::fs::create_dir_all(&out).map_err(|e| threephase::Error::io(&out, e))?;
    let hm = export_heatmap(&drift.per_pair, 0.0, &out)?;
    for (l, (l2, rms)) in drift.l2.iter().zip(drift.per_theta_rms()).enumerate() {
        println!("layer {l}: l2 drift {l2:.4}, per-angle rms {rms:.4} rad ({:.2}°)", rms.to_degrees());
    }
    println!("row maxima at {:?}; wrote {}", hm.marked, out.display());
    Ok(())
}
