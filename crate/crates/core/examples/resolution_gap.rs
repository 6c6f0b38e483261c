//! Trains the dual-resolution model and a low-resolution-only baseline with
//! the same run configuration and reports held-out accuracy for each.
//!
//! Usage: resolution_gap [config.toml] [seeds]

use std::path::PathBuf;
use std::time::Instant;

use mra_core::config::RunConfig;
use mra_core::model::Stage;
use mra_core::train::{evaluate_accuracy, run_pipeline};

fn main() -> mra_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(
        args.next()
            .unwrap_or_else(|| "crates/cli/configs/default.toml".into()),
    );
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let base = RunConfig::load(&path)?;
    let mut gaps = Vec::new();
    for seed in 0..seeds {
        let mut acc = [0.0; 2];
        for (i, high_pathway) in [true, false].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.high_pathway = high_pathway;
            let t = Instant::now();
            let train = cfg.train_set()?;
            let eval = cfg.eval_set()?;
            let (_, s2) = run_pipeline(&cfg, &train)?;
            let curve: Vec<String> = s2
                .metrics
                .chunks(50)
                .map(|c| {
                    format!(
                        "{:.2}",
                        c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64
                    )
                })
                .collect();
            acc[i] = evaluate_accuracy(&s2.model(), Stage::Two, &eval, true)?;
            println!(
                "seed {seed} {}: accuracy {:.3} ({:.0}s) loss {}",
                if high_pathway { "mra" } else { "baseline" },
                acc[i],
                t.elapsed().as_secs_f64(),
                curve.join(" ")
            );
        }
        gaps.push(acc[0] - acc[1]);
    }
    println!(
        "mean gap {:.3}",
        gaps.iter().sum::<f64>() / gaps.len() as f64
    );
    Ok(())
}
