//! Prompt-based classification, split-wise accuracy, and weight-space
//! ensembling between a pretrained and a finetuned checkpoint.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchors::Sample;
use crate::benchgen::BenchmarkBundle;
use crate::encoders::{encode, DualEncoderParams, Modality};
use crate::error::{ArfError, Result};
use crate::numerics::{dot, Matrix, Vector};
use crate::training::Checkpoint;

/// One raw text feature per class, in class-id order of `class_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTable {
    class_ids: Vec<u32>,
    prompt_features: Matrix,
    row_of: HashMap<u32, usize>,
}

impl PromptTable {
    pub fn new(class_ids: Vec<u32>, prompt_features: Matrix) -> Result<Self> {
        if class_ids.len() != prompt_features.rows() {
            return Err(ArfError::RowCountMismatch {
                manifest: class_ids.len(),
                matrix: prompt_features.rows(),
            });
        }
        let mut row_of = HashMap::with_capacity(class_ids.len());
        for (i, &c) in class_ids.iter().enumerate() {
            if row_of.insert(c, i).is_some() {
                return Err(ArfError::InvalidArgument(format!(
                    "duplicate class id {c} in prompt table"
                )));
            }
        }
        Ok(PromptTable {
            class_ids,
            prompt_features,
            row_of,
        })
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn features(&self) -> &Matrix {
        &self.prompt_features
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn feature_row(&self, class_id: u32) -> Result<&[f64]> {
        self.row_of
            .get(&class_id)
            .map(|&i| self.prompt_features.row(i))
            .ok_or_else(|| ArfError::InvalidArgument(format!("class {class_id} has no prompt")))
    }

    pub fn feature(&self, class_id: u32) -> Result<Vector> {
        Vector::new(self.feature_row(class_id)?.to_vec())
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &PromptTable) -> Result<PromptTable> {
        let cols = self.prompt_features.cols();
        let rows = self
            .prompt_features
            .row_iter()
            .chain(other.prompt_features.row_iter());
        let ids = self
            .class_ids
            .iter()
            .chain(&other.class_ids)
            .copied()
            .collect();
        PromptTable::new(ids, Matrix::from_rows(cols, rows)?)
    }
}

/// Text embeddings of every class prompt, one unit row per class.
pub fn build_prompt_classifier(
    params: &DualEncoderParams,
    prompts: &PromptTable,
) -> Result<Matrix> {
    let d = params.embed_dim();
    let mut out = Matrix::zeros(prompts.len(), d);
    for (i, row) in prompts.features().row_iter().enumerate() {
        out.row_mut(i)
            .copy_from_slice(&encode(params, Modality::Text, row)?);
    }
    Ok(out)
}

/// Class with the highest score; equal scores go to the lowest class id.
pub fn predict_from_scores(scores: &[f64], class_ids: &[u32]) -> Option<u32> {
    scores
        .iter()
        .zip(class_ids)
        .fold(None, |best: Option<(f64, u32)>, (&s, &c)| match best {
            Some((bs, bc)) if bs > s || (bs == s && bc < c) => Some((bs, bc)),
            _ => Some((s, c)),
        })
        .map(|(_, c)| c)
}

pub fn classify(
    params: &DualEncoderParams,
    images: &[Sample],
    classifier: &Matrix,
    class_ids: &[u32],
) -> Result<Vec<u32>> {
    if classifier.rows() == 0 {
        return Err(ArfError::InvalidArgument(
            "classifier has no classes".into(),
        ));
    }
    if classifier.rows() != class_ids.len() {
        return Err(ArfError::RowCountMismatch {
            manifest: class_ids.len(),
            matrix: classifier.rows(),
        });
    }
    let mut scores = vec![0.0; classifier.rows()];
    images
        .iter()
        .map(|s| {
            let e = encode(params, Modality::Image, &s.feature)?;
            for (score, row) in scores.iter_mut().zip(classifier.row_iter()) {
                *score = dot(&e, row);
            }
            Ok(predict_from_scores(&scores, class_ids).expect("classifier is non-empty"))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Id,
    Ds,
    Zsl,
}

impl FromStr for SplitKind {
    type Err = ArfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(SplitKind::Id),
            "ds" => Ok(SplitKind::Ds),
            "zsl" => Ok(SplitKind::Zsl),
            other => Err(ArfError::InvalidArgument(format!(
                "unknown split {other:?} (expected id, ds, zsl)"
            ))),
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Id => "id",
            SplitKind::Ds => "ds",
            SplitKind::Zsl => "zsl",
        })
    }
}

pub fn parse_split_list(s: &str) -> Result<Vec<SplitKind>> {
    let mut v: Vec<SplitKind> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    v.sort_unstable();
    v.dedup();
    if v.is_empty() {
        return Err(ArfError::InvalidArgument("no splits requested".into()));
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Classify zero-shot images over the union of in-distribution and
    /// zero-shot classes instead of the zero-shot classes alone.
    pub strict_zsl: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub split_name: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy_percent: f64,
}

impl SplitRecord {
    fn new(split_name: String, n: usize, correct: usize) -> Self {
        SplitRecord {
            split_name,
            n,
            correct,
            accuracy_percent: 100.0 * correct as f64 / n as f64,
        }
    }

    pub fn is_ood(&self) -> bool {
        self.split_name != "id"
    }

    pub fn is_ds(&self) -> bool {
        self.split_name.starts_with("ds_")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub splits: Vec<SplitRecord>,
    /// Unweighted mean over the non-ID splits; `None` if there are none.
    pub avg_ood: Option<f64>,
}

impl Metrics {
    pub fn from_records(splits: Vec<SplitRecord>) -> Self {
        let ood: Vec<f64> = splits
            .iter()
            .filter(|s| s.is_ood())
            .map(|s| s.accuracy_percent)
            .collect();
        let avg_ood = if ood.is_empty() {
            None
        } else {
            Some(ood.iter().sum::<f64>() / ood.len() as f64)
        };
        Metrics { splits, avg_ood }
    }

    pub fn get(&self, name: &str) -> Option<&SplitRecord> {
        self.splits.iter().find(|s| s.split_name == name)
    }

    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.get(name).map(|s| s.accuracy_percent)
    }

    /// Mean accuracy over the domain-shift splits.
    pub fn mean_ds(&self) -> Option<f64> {
        let ds: Vec<f64> = self
            .splits
            .iter()
            .filter(|s| s.is_ds())
            .map(|s| s.accuracy_percent)
            .collect();
        (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64)
    }
}

fn score_split(
    params: &DualEncoderParams,
    name: String,
    samples: &[Sample],
    prompts: &PromptTable,
) -> Result<SplitRecord> {
    if samples.is_empty() {
        return Err(ArfError::EmptySplit(name));
    }
    let classifier = build_prompt_classifier(params, prompts)?;
    let predictions = classify(params, samples, &classifier, prompts.class_ids())?;
    let correct = predictions
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.class_id)
        .count();
    Ok(SplitRecord::new(name, samples.len(), correct))
}

/// Accuracy on the requested splits: `id`, one `ds_<domain>` record per
/// shifted domain, and `zsl`. In-distribution and domain-shift images are
/// classified over the in-distribution classes; zero-shot images over the
/// zero-shot classes (or all classes with `strict_zsl`).
pub fn evaluate_splits(
    params: &DualEncoderParams,
    bundle: &BenchmarkBundle,
    splits: &[SplitKind],
    options: EvalOptions,
) -> Result<Metrics> {
    if splits.is_empty() {
        return Err(ArfError::InvalidArgument("no splits requested".into()));
    }
    let mut kinds = splits.to_vec();
    kinds.sort_unstable();
    kinds.dedup();
    let mut records = Vec::new();
    for kind in kinds {
        match kind {
            SplitKind::Id => records.push(score_split(
                params,
                "id".into(),
                &bundle.id_test,
                &bundle.prompts_id,
            )?),
            SplitKind::Ds => {
                if bundle.ds_tests.is_empty() {
                    return Err(ArfError::EmptySplit("ds".into()));
                }
                for split in &bundle.ds_tests {
                    records.push(score_split(
                        params,
                        split.name(),
                        &split.samples,
                        &bundle.prompts_id,
                    )?);
                }
            }
            SplitKind::Zsl => {
                let prompts = if options.strict_zsl {
                    bundle.prompts_id.concat(&bundle.prompts_zsl)?
                } else {
                    bundle.prompts_zsl.clone()
                };
                records.push(score_split(
                    params,
                    "zsl".into(),
                    &bundle.zsl_test,
                    &prompts,
                )?);
            }
        }
    }
    Ok(Metrics::from_records(records))
}

/// `(1 − α)·pre + α·ft` on every element, `log_tau` included. The
/// endpoints return the source parameters unchanged.
pub fn ensemble_weights(
    pre: &Checkpoint,
    ft: &Checkpoint,
    alpha: f64,
) -> Result<DualEncoderParams> {
    interpolate(&pre.params, &ft.params, alpha)
}

pub fn interpolate(
    pre: &DualEncoderParams,
    ft: &DualEncoderParams,
    alpha: f64,
) -> Result<DualEncoderParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ArfError::AlphaOutOfRange(alpha));
    }
    if !pre.same_shape(ft) {
        return Err(ArfError::ShapeMismatch("ensemble endpoints".into()));
    }
    if alpha == 0.0 {
        return Ok(pre.clone());
    }
    if alpha == 1.0 {
        return Ok(ft.clone());
    }
    let mut out = pre.clone();
    for (o, (p, f)) in out.weights_mut().zip(pre.weights().zip(ft.weights())) {
        *o = (1.0 - alpha) * p + alpha * f;
    }
    out.log_tau = (1.0 - alpha) * pre.log_tau + alpha * ft.log_tau;
    Ok(out)
}

/// Eleven evenly spaced coefficients from 0 to 1.
pub fn default_alphas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub alpha: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCurve {
    pub rows: Vec<CurveRow>,
    /// Coefficient with the highest ID accuracy (smallest on ties), if the ID
    /// split was evaluated.
    pub best_id_alpha: Option<f64>,
}

impl EnsembleCurve {
    /// Split names in column order: `id`, `ds_*` ascending, `zsl`.
    pub fn split_names(&self) -> Vec<String> {
        self.rows
            .first()
            .map(|r| {
                r.metrics
                    .splits
                    .iter()
                    .map(|s| s.split_name.clone())
                    .collect()
            })
            .unwrap_or_default()
    }
}

pub fn ensemble_sweep(
    pre: &Checkpoint,
    ft: &Checkpoint,
    alphas: &[f64],
    bundle: &BenchmarkBundle,
    splits: &[SplitKind],
    options: EvalOptions,
) -> Result<EnsembleCurve> {
    if alphas.is_empty() {
        return Err(ArfError::InvalidArgument(
            "no mixing coefficients given".into(),
        ));
    }
    if let Some(&a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(ArfError::AlphaOutOfRange(a));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ArfError::InvalidArgument(
            "mixing coefficients must be strictly increasing".into(),
        ));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let params = ensemble_weights(pre, ft, alpha)?;
        rows.push(CurveRow {
            alpha,
            metrics: evaluate_splits(&params, bundle, splits, options)?,
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for row in &rows {
        if let Some(acc) = row.metrics.accuracy("id") {
            if best.map_or(true, |(_, b)| acc > b) {
                best = Some((row.alpha, acc));
            }
        }
    }
    Ok(EnsembleCurve {
        rows,
        best_id_alpha: best.map(|(a, _)| a),
    })
}
