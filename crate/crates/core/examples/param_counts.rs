//! Parameter counts of the phase model against its matched baseline, by
//! tensor group, without allocating any weights.
//!
//! cargo run --release --example param_counts

use std::collections::BTreeMap;

use threephase::model::{count_params, layout, ModelConfig, ParamKind};

fn breakdown(cfg: &ModelConfig) -> threephase::Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for spec in layout(cfg)? {
        let key = match spec.kind {
            ParamKind::Embedding => "embedding",
            ParamKind::Linear if spec.name.starts_with("lm_head") => "lm head",
            ParamKind::Linear => "linear",
            ParamKind::NormGain => "norm gains",
            ParamKind::Theta => "rotation angles",
            ParamKind::Horn => "horn profile",
        };
        *out.entry(key.to_string()).or_default() += spec.numel();
    }
    Ok(out)
}

fn main() -> threephase::Result<()> {
    let small = ModelConfig::small(10_000, 128);
    let large = ModelConfig::large(32_000, 1024);
    let learnable = ModelConfig {
        learnable_horn: true,
        ..small.clone()
    };
    for (name, cfg) in [("small", &small), ("large", &large), ("small, learnable horn", &learnable)] {
        let base = cfg.to_baseline();
        let (p, b) = (count_params(cfg)?, count_params(&base)?);
        println!("{name}: {p} vs baseline {b} (delta {:+})", p as i64 - b as i64);
        for (k, v) in breakdown(cfg)? {
            println!("  {k:<16} {v:>12}");
        }
    }
    Ok(())
}
