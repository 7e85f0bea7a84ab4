//! Runs every finetuning variant over seeds 0–9 and prints mean accuracies.
//! Usage: `cargo run --release --example calibrate [config.json]`.

use std::time::Instant;

use arf_core::experiment::{mean_accuracy, run_seed, Variant};
use arf_core::io::config::RunConfig;

fn main() -> arf_core::Result<()> {
    let path = std::env::args().nth(1);
    let cfg = RunConfig::load(path.as_deref().map(std::path::Path::new))?;
    let mut outcomes = Vec::new();
    for seed in 0..10 {
        let t = Instant::now();
        let o = run_seed(&cfg, seed, &Variant::ALL)?;
        let zsl = |v| {
            o.metrics(v)
                .and_then(|m| m.accuracy("zsl"))
                .unwrap_or(f64::NAN)
        };
        println!(
            "seed {seed}: pre zsl {:.1} | cl {:.1} cap {:.1} ret {:.1} arf {:.1} | {:.1?}",
            o.pretrained.accuracy("zsl").unwrap_or(f64::NAN),
            zsl(Variant::Baseline),
            zsl(Variant::ClCap),
            zsl(Variant::ClRet),
            zsl(Variant::Arf),
            t.elapsed()
        );
        outcomes.push(o);
    }
    let pre = mean_accuracy(&outcomes, None);
    println!(
        "pretrained   id {:6.2} ds {:6.2} zsl {:6.2}",
        pre.id, pre.ds, pre.zsl
    );
    for v in Variant::ALL {
        let m = mean_accuracy(&outcomes, Some(v));
        let wins = outcomes
            .iter()
            .filter(|o| {
                o.metrics(v).unwrap().accuracy("zsl")
                    > o.metrics(Variant::Baseline).unwrap().accuracy("zsl")
            })
            .count();
        println!(
            "{:<12} id {:6.2} ds {:6.2} zsl {:6.2} zsl wins {wins}/10",
            v.name(),
            m.id,
            m.ds,
            m.zsl
        );
    }
    Ok(())
}
