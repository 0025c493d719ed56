//! Nested CV of MHAttnSurv and AvgPool on the default planted-signal cohort.
//!
//! Usage: `cargo run --release --example synthetic_benchmark -- [epochs] [lr] [heads] [rates]`

use std::time::Instant;

use mhattnsurv::cv::{nested_cv, FoldPlan};
use mhattnsurv::data::{generate_synthetic, SyntheticConfig};
use mhattnsurv::{ModelKind, TrainConfig};

fn main() -> mhattnsurv::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let synth = generate_synthetic(&SyntheticConfig::default())?;
    let data = &synth.dataset;
    println!("oracle c-index {:.4}, events {}", synth.oracle_cindex()?, data.summary().events);
    let config = TrainConfig {
        max_epochs: arg(0, "200").parse().unwrap(),
        base_lr: arg(1, "1e-3").parse().unwrap(),
        heads: arg(2, "4").parse().unwrap(),
        eval_every: 10,
        schedule_period: 4000,
        patience: 1000,
        seed: 42,
        ..TrainConfig::default()
    };
    let rates: Vec<f64> = arg(3, "0.0").split(',').map(|r| r.parse().unwrap()).collect();
    let plan = FoldPlan::new(data, 5, 4, 42)?;
    let index: std::collections::HashMap<&str, usize> =
        data.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut oracle = 0.0;
    for fold in &plan.outer {
        let idx: Vec<usize> = fold.test.iter().map(|id| index[id.as_str()]).collect();
        let z: Vec<f64> = idx.iter().map(|&i| synth.latent[i]).collect();
        oracle += mhattnsurv::eval::c_index(&z, &data.times(&idx), &data.events(&idx))? / plan.outer.len() as f64;
    }
    println!("fold-mean oracle c-index {oracle:.4}");
    for kind in [ModelKind::MhAttn, ModelKind::AvgPool] {
        let start = Instant::now();
        let report = nested_cv(data, &plan, &rates, &config, kind)?;
        let folds: Vec<String> = report.outer.iter().map(|o| format!("{:.3}", o.test_cindex)).collect();
        println!(
            "{kind}: mean test c-index {:.4} folds [{}] in {:.1}s",
            report.mean_cindex,
            folds.join(", "),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
