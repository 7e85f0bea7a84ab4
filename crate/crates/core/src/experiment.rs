//! End-to-end runs comparing finetuning objectives on one generated
//! benchmark: pretrain, index the candidate pool, finetune each variant
//! from the same start, and evaluate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchors::{build_candidate_index, CaptionTable};
use crate::benchgen::{generate_benchmark, BenchmarkBundle};
use crate::error::{ArfError, Result};
use crate::evaluation::{evaluate_splits, Metrics};
use crate::io::config::RunConfig;
use crate::training::{pretrain, run_finetune, Checkpoint, FinetuneData, LossTerm, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Prompt alignment only.
    Baseline,
    ClCap,
    ClRet,
    /// Prompt, caption and retrieved-pair terms.
    Arf,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::ClCap,
        Variant::ClRet,
        Variant::Arf,
    ];

    pub fn losses(self) -> Vec<LossTerm> {
        match self {
            Variant::Baseline => vec![LossTerm::Cl],
            Variant::ClCap => vec![LossTerm::Cl, LossTerm::Cap],
            Variant::ClRet => vec![LossTerm::Cl, LossTerm::Ret],
            Variant::Arf => LossTerm::ALL.to_vec(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "cl",
            Variant::ClCap => "cl+cap",
            Variant::ClRet => "cl+ret",
            Variant::Arf => "cl+cap+ret",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ArfError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ArfError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// The finetune section of `cfg` restricted to `variant`'s losses.
pub fn variant_config(cfg: &TrainConfig, variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        enabled_losses: variant.losses(),
        seed,
        ..cfg.clone()
    }
}

/// `cfg` with every seed replaced by `seed`.
pub fn reseeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.gen.seed = seed;
    c.pretrain.seed = seed;
    c.finetune.seed = seed;
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub pretrained: Metrics,
    pub variants: Vec<VariantResult>,
}

impl SeedOutcome {
    pub fn metrics(&self, v: Variant) -> Option<&Metrics> {
        self.variants
            .iter()
            .find(|r| r.variant == v)
            .map(|r| &r.metrics)
    }
}

pub struct Prepared {
    pub bundle: BenchmarkBundle,
    pub pretrained: Checkpoint,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let bundle = generate_benchmark(&cfg.gen)?;
    let (pretrained, _) = pretrain(&bundle.pretrain_pool, &cfg.model, &cfg.pretrain)?;
    Ok(Prepared { bundle, pretrained })
}

pub fn finetune_variant(
    cfg: &RunConfig,
    prepared: &Prepared,
    variant: Variant,
) -> Result<Checkpoint> {
    let b = &prepared.bundle;
    let index = build_candidate_index(&prepared.pretrained, &b.candidates)?;
    let captions = CaptionTable::from_records(&b.captions);
    let data = FinetuneData {
        samples: &b.finetune,
        prompts: &b.prompts_id,
        captions: &captions,
        candidates: &b.candidates,
        index: Some(&index),
    };
    let train = variant_config(&cfg.finetune, variant, cfg.finetune.seed);
    Ok(run_finetune(data, &prepared.pretrained, &train)?.0)
}

/// Runs the whole comparison for one seed under `cfg`.
pub fn run_seed(cfg: &RunConfig, seed: u64, variants: &[Variant]) -> Result<SeedOutcome> {
    let cfg = reseeded(cfg, seed);
    let prepared = prepare(&cfg)?;
    let opts = cfg.eval.options();
    let pretrained = evaluate_splits(
        &prepared.pretrained.params,
        &prepared.bundle,
        &cfg.eval.splits,
        opts,
    )?;
    let variants = variants
        .iter()
        .map(|&variant| {
            let ft = finetune_variant(&cfg, &prepared, variant)?;
            Ok(VariantResult {
                variant,
                metrics: evaluate_splits(&ft.params, &prepared.bundle, &cfg.eval.splits, opts)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SeedOutcome {
        seed,
        pretrained,
        variants,
    })
}

/// Mean ID, DS and ZSL accuracy of one variant across outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanAccuracy {
    pub id: f64,
    pub ds: f64,
    pub zsl: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn mean_accuracy(outcomes: &[SeedOutcome], variant: Option<Variant>) -> MeanAccuracy {
    let pick = |o: &SeedOutcome| -> Metrics {
        match variant {
            Some(v) => o.metrics(v).cloned().expect("variant was run"),
            None => o.pretrained.clone(),
        }
    };
    MeanAccuracy {
        id: mean(
            outcomes
                .iter()
                .map(|o| pick(o).accuracy("id").unwrap_or(f64::NAN)),
        ),
        ds: mean(
            outcomes
                .iter()
                .map(|o| pick(o).mean_ds().unwrap_or(f64::NAN)),
        ),
        zsl: mean(
            outcomes
                .iter()
                .map(|o| pick(o).accuracy("zsl").unwrap_or(f64::NAN)),
        ),
    }
}
