//! Horn substitution pins the cross-phase residual to `N·H_T/T` whatever
//! the input; prints measured against analytic values, then the
//! depth-linear angle schedule.
//!
//! cargo run --release --example phase_geometry

use threephase::geometry::{
    analytic_pinned_residual, horn_substitute, theta_init, zero_sum_residual, HornProfile, PhaseConfig,
};
use threephase::tensor::{Rng, Tensor};

fn main() -> threephase::Result<()> {
    let mut rng = Rng::new(0);
    println!("{:>3} {:>5} {:>12} {:>12} {:>9}", "N", "T", "measured", "N·H_T/T", "|err|");
    for n in [1, 2, 3, 4, 6, 8, 12] {
        for t in [8, 128, 1024] {
            let cfg = PhaseConfig::new(n, 24 * n)?;
            let x = Tensor::<f32>::randn(&[2, t, cfg.d_model()], 3.0, &mut rng)?;
            let pinned = horn_substitute(&x, &HornProfile::fixed(t), &cfg)?;
            let measured = zero_sum_residual(&pinned, &cfg)?;
            let analytic = analytic_pinned_residual(n, t);
            println!("{n:>3} {t:>5} {measured:>12.8} {analytic:>12.8} {:>9.1e}", (measured - analytic).abs());
        }
    }

    println!("\nmean initial angle per layer, L = 12");
    for l in 0..12 {
        let th = theta_init(l, 12, 64)?;
        println!("  layer {l:>2}: {:.4} rad", th.iter().sum::<f64>() / th.len() as f64);
    }
    Ok(())
}
