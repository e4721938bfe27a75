//! Trains the toy phase model and its matched baseline on a synthetic
//! corpus and prints their loss curves side by side.
//!
//! cargo run --release --example train_toy -- [steps]

use threephase::data::{synthetic_text, Corpus};
use threephase::model::ModelConfig;
use threephase::train::{Event, OptimizerConfig, TrainConfig, Trainer};

fn main() -> threephase::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let corpus = Corpus::from_text(&synthetic_text(100_000, 42), 1_000)?;
    let model = ModelConfig {
        vocab_size: corpus.vocab.len(),
        d_model: 48,
        n_layers: 2,
        n_phases: 3,
        n_q_heads: 6,
        n_kv_heads: 3,
        d_ff: 128,
        ..ModelConfig::small(corpus.vocab.len(), 32)
    };
    let optim = OptimizerConfig {
        lr: 1e-2,
        warmup_steps: 20,
        ..OptimizerConfig::new(steps)
    };
    let train = TrainConfig {
        eval_every: 50,
        ..TrainConfig::new(16, 32)
    };
    for cfg in [model.clone(), model.to_baseline()] {
        let label = if cfg.baseline_mode { "baseline" } else { "3pt" };
        let mut trainer = Trainer::<f32>::new(cfg, optim.clone(), train.clone(), &corpus, 42, true)?;
        let mut first = None;
        let start = std::time::Instant::now();
        trainer.run_until(steps, &mut |e| {
            match e {
                Event::Step(s) => {
                    first.get_or_insert(s.loss);
                }
                Event::Eval(d) => println!(
                    "{label:>8} step {:>4}  train {:.4}  val {:.4}  ppl {:.3}  residual {:.5}",
                    d.step, d.train_loss, d.val_loss, d.ppl, d.zero_sum_residual
                ),
            }
            Ok(())
        })?;
        println!("{label:>8} initial loss {:.4}, {:.1}s", first.unwrap_or(f64::NAN), start.elapsed().as_secs_f64());
    }
    Ok(())
}
