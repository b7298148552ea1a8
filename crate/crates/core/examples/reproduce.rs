//! Trains every model behind the directional comparisons, one after another,
//! then the latent-feature classifiers and the decomposition self-consistency
//! experiment.
//!
//! Usage: `cargo run --release --example reproduce -- [mnist_dir] [results_dir]`.
//! Finished runs are cached, so an interrupted invocation resumes at the
//! first missing run.

use std::path::PathBuf;

use cstvae::experiments::{self, Mnist, SelfConsistencySpec};
use cstvae::model::ModelKind;

const STEPS: u64 = 20_000;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mnist = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let results = PathBuf::from(args.next().unwrap_or_else(|| "results".into()));
    let mnist = Mnist::load(&mnist)?;
    let mut specs = Vec::new();
    for seed in 0..3 {
        for kind in [ModelKind::Stvae, ModelKind::Vae] {
            specs.push(experiments::translated_spec(kind, seed, STEPS));
        }
    }
    for seed in 0..3 {
        for kind in [ModelKind::Cstvae, ModelKind::Stvae, ModelKind::Vae] {
            specs.push(experiments::superimposed_spec(kind, seed, STEPS));
        }
    }
    let mut failed = 0;
    let mut done = Vec::new();
    for spec in &specs {
        match experiments::run(&mnist, spec, &results, |line| eprintln!("{line}")) {
            Ok(r) => {
                println!(
                    "{} final test elbo {:.3} ({} evaluated, {} skipped) in {:.0}s",
                    spec.name, r.final_test.elbo, r.final_test.evaluated, r.final_test.skipped, r.seconds
                );
                done.push(r);
            }
            Err(e) => {
                failed += 1;
                println!("{} failed: {e:#}", spec.name);
            }
        }
    }
    for r in &done {
        let hidden = if r.spec.name.starts_with("translated") { 32 } else { 256 };
        if r.spec.name.starts_with("superimposed-stvae") {
            continue;
        }
        match experiments::latent_classifier(&mnist, r, &results, hidden) {
            Ok(c) => println!("{} classifier test accuracy {:.4} (train {:.4})", r.spec.name, c.test.both, c.train.both),
            Err(e) => {
                failed += 1;
                println!("{} classifier failed: {e:#}", r.spec.name);
            }
        }
    }
    let best = done
        .iter()
        .filter(|r| r.spec.name.starts_with("superimposed-cstvae"))
        .max_by(|a, b| a.final_test.elbo.total_cmp(&b.final_test.elbo));
    if let Some(g) = best {
        match experiments::self_consistency(g, &results, &SelfConsistencySpec::default()) {
            Ok(s) => println!(
                "self-consistency on {}: mae {:.4} (before fine-tuning {:.4}, blank {:.4}, layer fill {:.3?})",
                g.spec.name, s.mae, s.mae_before, s.mae_blank, s.layer_fill
            ),
            Err(e) => {
                failed += 1;
                println!("self-consistency failed: {e:#}");
            }
        }
    }
    if failed > 0 {
        anyhow::bail!("{failed} runs failed");
    }
    Ok(())
}
