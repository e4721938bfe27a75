//! Rotary position embedding makes query-key scores depend only on the
//! offset between positions.
//!
//! cargo run --release --example rope_relative

use threephase::model::RopeCache;
use threephase::tensor::{Rng, Tensor};

fn main() -> threephase::Result<()> {
    let cache = RopeCache::new(32, 512, 10_000.0)?;
    let mut rng = Rng::new(3);
    let q = Tensor::<f64>::randn(&[1, 32], 1.0, &mut rng)?;
    let k = Tensor::<f64>::randn(&[1, 32], 1.0, &mut rng)?;
    let score = |p: usize, r: usize| -> threephase::Result<f64> {
        let (a, b) = (cache.apply(&q, p)?, cache.apply(&k, r)?);
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
    };
    for offset in [0usize, 1, 4, 16] {
        let row: Vec<String> = [0usize, 7, 100, 400]
            .iter()
            .map(|&s| score(s + offset, s).map(|v| format!("{v:+.10}")))
            .collect::<threephase::Result<_>>()?;
        println!("offset {offset:>2}: {}", row.join("  "));
    }
    Ok(())
}
