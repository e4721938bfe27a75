//! Saves a trainer mid-run, resumes it from disk and checks the resumed
//! run matches an uninterrupted one bit for bit.
//!
//! cargo run --release --example checkpoint_resume

use threephase::cli::RunConfig;
use threephase::train::Trainer;

fn main() -> threephase::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.optim.total_steps = 60;
    let corpus = cfg.corpus()?;
    let dir = std::env::temp_dir().join("threephase-resume-example");

    let make = || Trainer::<f32>::new(cfg.model.clone(), cfg.optim.clone(), cfg.train.clone(), &corpus, cfg.seed, true);
    let mut straight = make()?;
    let mut interrupted = make()?;
    for _ in 0..30 {
        straight.step()?;
        interrupted.step()?;
    }
    interrupted.save(&dir)?;
    drop(interrupted);
    let mut resumed = Trainer::<f32>::resume(&dir, &corpus)?;
    let mut worst = 0.0f64;
    for _ in 30..60 {
        let (a, b) = (straight.step()?, resumed.step()?);
        assert_eq!(a, b);
        for (x, y) in straight.model().params().tensors().iter().zip(resumed.model().params().tensors()) {
            worst = worst.max(x.max_abs_diff(y)?);
        }
    }
    println!("resumed at step 30; after step 60 max parameter difference = {worst}");
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
