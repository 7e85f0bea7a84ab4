//! Contrastive pretraining of the toy dual encoder, anchor-regularized
//! finetuning, and the AdamW optimizer.
//!
//! The finetuning objective is `λ_cl·L_cl + λ_cap·L_cap + λ_ret·L_ret`, each
//! term the bidirectional contrastive loss over its own list of pairs:
//! finetune images with their class prompts, finetune images with their
//! captions, and retrieved candidate pairs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::build_candidate_index;
use crate::anchors::{
    assemble_anchor_batch, group_assignments, retrieval_queries, retrieve, AnchorBatch,
    AnchorLayout, AnchorPair, CandidateIndex, CandidateLookup, CandidatePair, CaptionTable,
    RetrievalMode, Sample,
};
use crate::benchgen::{generate_benchmark, GenConfig};
use crate::contrastive::{
    finite_difference_check, grad_check_params, pair_loss_and_accumulate, CheckReport,
    GradCheckDims, RawPair,
};
use crate::encoders::{init_params, DualEncoderParams, ParamGrads};
use crate::error::{ArfError, Result};
use crate::evaluation::PromptTable;
use crate::numerics::{derive_seed, RandomStream};

const SHUFFLE_TAG: u64 = 0x5348_5546;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Cl,
    Cap,
    Ret,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [LossTerm::Cl, LossTerm::Cap, LossTerm::Ret];

    pub fn as_str(self) -> &'static str {
        match self {
            LossTerm::Cl => "cl",
            LossTerm::Cap => "cap",
            LossTerm::Ret => "ret",
        }
    }
}

impl FromStr for LossTerm {
    type Err = ArfError;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                ArfError::InvalidArgument(format!(
                    "unknown loss term {s:?} (expected cl, cap, ret)"
                ))
            })
    }
}

/// Parses a comma-separated loss list such as `cl,cap,ret`.
pub fn parse_loss_list(s: &str) -> Result<Vec<LossTerm>> {
    let mut terms: Vec<LossTerm> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    terms.sort_unstable();
    terms.dedup();
    Ok(terms)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cl: f64,
    pub cap: f64,
    pub ret: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cl: 1.0,
            cap: 1.0,
            ret: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Cl => self.cl,
            LossTerm::Cap => self.cap,
            LossTerm::Ret => self.ret,
        }
    }

    fn set(&mut self, term: LossTerm, v: f64) {
        match term {
            LossTerm::Cl => self.cl = v,
            LossTerm::Cap => self.cap = v,
            LossTerm::Ret => self.ret = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub enabled_losses: Vec<LossTerm>,
    pub anchor_layout: AnchorLayout,
    pub retrieval_mode: RetrievalMode,
    pub retrieval_k: usize,
    pub tau_trainable: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Finetuning hyperparameters used at full scale: batch 512, learning
    /// rate 1e-5, weight decay 0.1, 10 epochs.
    pub fn with_paper_defaults(mut self) -> Self {
        self.batch_size = 512;
        self.learning_rate = 1e-5;
        self.weight_decay = 0.1;
        self.epochs = 10;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ArfError::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        for term in LossTerm::ALL {
            let w = self.loss_weights.get(term);
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!("loss weight for {} must be >= 0", term.as_str()));
            }
        }
        if self.retrieval_k < 1 {
            return fail("retrieval_k must be >= 1".into());
        }
        Ok(())
    }

    /// A term contributes iff it is enabled and has positive weight.
    pub fn is_active(&self, term: LossTerm) -> bool {
        self.enabled_losses.contains(&term) && self.loss_weights.get(term) > 0.0
    }

    /// Canonical form: inactive terms are removed from `enabled_losses` and
    /// their weights zeroed. Two configs with the same effective form train
    /// identically.
    pub fn effective(&self) -> TrainConfig {
        let mut c = self.clone();
        c.enabled_losses = LossTerm::ALL
            .into_iter()
            .filter(|&t| self.is_active(t))
            .collect();
        for term in LossTerm::ALL {
            if !c.enabled_losses.contains(&term) {
                c.loss_weights.set(term, 0.0);
            }
        }
        c
    }

    /// SHA-256 (hex) of the effective config's JSON.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.effective()).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Pretrained,
    Finetuned,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Pretrained => "pretrained",
            Provenance::Finetuned => "finetuned",
        })
    }
}

/// Parameters plus provenance, identified by a hash of their serialized
/// content.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DualEncoderParams,
    pub config_fingerprint: String,
    pub provenance: Provenance,
    id: String,
}

impl Checkpoint {
    pub fn new(
        params: DualEncoderParams,
        config_fingerprint: String,
        provenance: Provenance,
    ) -> Result<Self> {
        params.validate()?;
        let id = crate::io::checkpoint::content_hash(&params, &config_fingerprint, provenance);
        Ok(Checkpoint {
            params,
            config_fingerprint,
            provenance,
            id,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cl: f64,
    pub l_cap: f64,
    pub l_ret: f64,
    pub total: f64,
    pub skip_ret: bool,
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub l_cl: f64,
    pub l_cap: f64,
    pub l_ret: f64,
    pub total: f64,
    pub skip_ret: bool,
}

impl StepRecord {
    fn new(step: u64, epoch: u64, b: &LossBreakdown) -> Self {
        StepRecord {
            step,
            epoch,
            l_cl: b.l_cl,
            l_cap: b.l_cap,
            l_ret: b.l_ret,
            total: b.total,
            skip_ret: b.skip_ret,
        }
    }
}

pub type TrainingLog = Vec<StepRecord>;

/// Mean `total` per epoch, in epoch order.
pub fn epoch_mean_losses(log: &[StepRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in log {
        let e = r.epoch as usize;
        if out.len() <= e {
            out.resize(e + 1, (0.0, 0));
        }
        out[e].0 += r.total;
        out[e].1 += 1;
    }
    out.into_iter()
        .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect()
}

fn as_raw(pairs: &[AnchorPair]) -> Vec<RawPair<'_>> {
    pairs
        .iter()
        .map(|p| (p.image.as_slice(), p.text.as_slice()))
        .collect()
}

/// Weighted composite loss for one step and its parameter gradients.
/// Terms are accumulated in the order cl, cap, ret; within a term, in pair
/// order. In the merge layout the single anchor term over the concatenated
/// list is reported as `l_cap` and `l_ret` stays 0.
pub fn compute_total_loss_and_grads(
    params: &DualEncoderParams,
    batch: &[Sample],
    prompts: &PromptTable,
    anchors: &AnchorBatch,
    config: &TrainConfig,
) -> Result<(LossBreakdown, ParamGrads)> {
    let weights = config.loss_weights;
    let mut grads = params.zeros_like();
    let mut out = LossBreakdown {
        skip_ret: anchors.skip_ret,
        ..LossBreakdown::default()
    };

    if config.is_active(LossTerm::Cl) {
        let pairs: Vec<RawPair<'_>> = batch
            .iter()
            .map(|s| Ok((s.feature.as_slice(), prompts.feature_row(s.class_id)?)))
            .collect::<Result<_>>()?;
        out.l_cl = pair_loss_and_accumulate(params, &pairs, weights.cl, &mut grads)?.total;
    }
    if config.is_active(LossTerm::Cap) {
        out.l_cap = pair_loss_and_accumulate(
            params,
            &as_raw(&anchors.caption_pairs),
            weights.cap,
            &mut grads,
        )?
        .total;
    }
    if config.is_active(LossTerm::Ret) && anchors.layout == AnchorLayout::Sep && !anchors.skip_ret {
        out.l_ret = pair_loss_and_accumulate(
            params,
            &as_raw(&anchors.retrieved_pairs),
            weights.ret,
            &mut grads,
        )?
        .total;
    }
    out.total = weights.cl * out.l_cl + weights.cap * out.l_cap + weights.ret * out.l_ret;
    Ok((out, grads))
}

/// First and second moments shaped like the parameters, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &DualEncoderParams) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn adamw_element(
    theta: &mut f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    lr: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *theta -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *theta);
}

/// One AdamW step with bias correction and decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`. `log_tau` is updated only when
/// `tau_trainable`.
pub fn adamw_update(
    params: &mut DualEncoderParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    lr: f64,
    wd: f64,
    tau_trainable: bool,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(ArfError::ShapeMismatch(
            "optimizer state, gradients and parameters".into(),
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let OptimizerState { m, v, .. } = state;
    for (((theta, g), mi), vi) in params
        .weights_mut()
        .zip(grads.weights())
        .zip(m.weights_mut())
        .zip(v.weights_mut())
    {
        adamw_element(theta, *g, mi, vi, lr, wd, bc1, bc2);
    }
    if tau_trainable {
        adamw_element(
            &mut params.log_tau,
            grads.log_tau,
            &mut m.log_tau,
            &mut v.log_tau,
            lr,
            wd,
            bc1,
            bc2,
        );
    }
    Ok(())
}

/// Encoder widths; input widths come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed_dim: usize,
}

fn shuffled_order(stream: &mut RandomStream, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut order);
    order
}

/// Contrastive training from a fresh initialization over `pool`. Each
/// epoch visits a seeded shuffle in minibatches of `batch_size`; a final
/// partial batch is kept unless it has fewer than two pairs.
pub fn pretrain(
    pool: &[CandidatePair],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainingLog)> {
    config.validate()?;
    if pool.len() < config.batch_size {
        return Err(ArfError::PoolTooSmall {
            pool: pool.len(),
            batch: config.batch_size,
        });
    }
    let dims = (pool[0].image_feature.dim(), pool[0].text_feature.dim());
    let mut params = init_params(config.seed, dims, model.hidden, model.embed_dim)?;
    let mut state = OptimizerState::new(&params);
    let mut stream = RandomStream::new(derive_seed(config.seed, SHUFFLE_TAG));
    let mut log = TrainingLog::new();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = shuffled_order(&mut stream, pool.len());
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let pairs: Vec<RawPair<'_>> = chunk
                .iter()
                .map(|&i| {
                    (
                        pool[i].image_feature.as_slice(),
                        pool[i].text_feature.as_slice(),
                    )
                })
                .collect();
            let mut grads = params.zeros_like();
            let loss = pair_loss_and_accumulate(&params, &pairs, 1.0, &mut grads)?;
            adamw_update(
                &mut params,
                &grads,
                &mut state,
                config.learning_rate,
                config.weight_decay,
                config.tau_trainable,
            )?;
            let breakdown = LossBreakdown {
                l_cl: loss.total,
                total: loss.total,
                skip_ret: true,
                ..LossBreakdown::default()
            };
            log.push(StepRecord::new(step, epoch as u64, &breakdown));
            step += 1;
        }
    }
    let checkpoint = Checkpoint::new(params, config.fingerprint(), Provenance::Pretrained)?;
    Ok((checkpoint, log))
}

/// Everything finetuning reads besides the start checkpoint and config.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneData<'a> {
    pub samples: &'a [Sample],
    pub prompts: &'a PromptTable,
    pub captions: &'a CaptionTable,
    pub candidates: &'a [CandidatePair],
    /// Required only when the retrieved-pair term is active.
    pub index: Option<&'a CandidateIndex>,
}

/// Retrieval assignments for the finetune set under `start`, computed once.
pub fn precompute_assignments(
    data: &FinetuneData<'_>,
    start: &Checkpoint,
    mode: RetrievalMode,
    k: usize,
) -> Result<crate::anchors::AssignmentTable> {
    let index = data
        .index
        .ok_or_else(|| ArfError::InvalidArgument("retrieval needs a candidate index".into()))?;
    let queries = retrieval_queries(data.samples, data.prompts, mode)?;
    Ok(group_assignments(retrieve(
        index, &queries, start, mode, k,
    )?))
}

/// Finetunes from a pretrained checkpoint. Every epoch walks a seeded
/// shuffle in full minibatches (a trailing partial batch is dropped), so the
/// log has `epochs · ⌊N/B⌋` records.
pub fn run_finetune(
    data: FinetuneData<'_>,
    start: &Checkpoint,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainingLog)> {
    config.validate()?;
    if start.provenance != Provenance::Pretrained {
        return Err(ArfError::WrongProvenance {
            expected: Provenance::Pretrained.to_string(),
            got: start.provenance.to_string(),
        });
    }
    if data.samples.is_empty() {
        return Err(ArfError::EmptyFinetuneSet);
    }
    if data.samples.len() < config.batch_size {
        return Err(ArfError::PoolTooSmall {
            pool: data.samples.len(),
            batch: config.batch_size,
        });
    }
    let config = config.effective();
    let use_cap = config.is_active(LossTerm::Cap);
    let use_ret = config.is_active(LossTerm::Ret);

    let assignments = if use_ret {
        Some(precompute_assignments(
            &data,
            start,
            config.retrieval_mode,
            config.retrieval_k,
        )?)
    } else {
        None
    };
    let lookup = CandidateLookup::new(data.candidates);

    let mut params = start.params.clone();
    let mut state = OptimizerState::new(&params);
    let mut stream = RandomStream::new(derive_seed(config.seed, SHUFFLE_TAG));
    let mut log = TrainingLog::new();
    let mut step = 0u64;
    let b = config.batch_size;
    for epoch in 0..config.epochs {
        let order = shuffled_order(&mut stream, data.samples.len());
        for chunk in order.chunks_exact(b) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data.samples[i].clone()).collect();
            let anchors = if use_cap || use_ret {
                assemble_anchor_batch(
                    &batch,
                    data.captions,
                    assignments.as_ref(),
                    &lookup,
                    config.anchor_layout,
                )?
            } else {
                AnchorBatch {
                    caption_pairs: Vec::new(),
                    retrieved_pairs: Vec::new(),
                    retrieved_ids: Vec::new(),
                    layout: config.anchor_layout,
                    skip_ret: true,
                }
            };
            let (breakdown, grads) =
                compute_total_loss_and_grads(&params, &batch, data.prompts, &anchors, &config)?;
            adamw_update(
                &mut params,
                &grads,
                &mut state,
                config.learning_rate,
                config.weight_decay,
                config.tau_trainable,
            )?;
            log.push(StepRecord::new(step, epoch as u64, &breakdown));
            step += 1;
        }
    }
    let checkpoint = Checkpoint::new(params, config.fingerprint(), Provenance::Finetuned)?;
    Ok((checkpoint, log))
}

/// Finite-difference check of the full finetuning objective: prompt,
/// caption and retrieved-pair terms in the sep layout, with v2t retrieval
/// against an index built from the starting parameters. `dims.batch`
/// finetune samples are drawn evenly across the tiny benchmark's classes.
pub fn composite_grad_check(seed: u64, dims: GradCheckDims, eps: f64) -> Result<CheckReport> {
    composite_grad_check_with(seed, dims, eps, |_| {})
}

pub fn composite_grad_check_with<C>(
    seed: u64,
    dims: GradCheckDims,
    eps: f64,
    corrupt: C,
) -> Result<CheckReport>
where
    C: FnOnce(&mut ParamGrads),
{
    let mut gen = GenConfig::tiny(seed, dims.image_dim, dims.text_dim);
    gen.finetune_per_class = gen.finetune_per_class.max(dims.batch);
    let bundle = generate_benchmark(&gen)?;
    let n = bundle.finetune.len();
    if dims.batch < 2 || dims.batch > n {
        return Err(ArfError::InvalidArgument(format!(
            "gradient check batch {} must lie in [2, {n}]",
            dims.batch
        )));
    }
    let batch: Vec<Sample> = (0..dims.batch)
        .map(|i| bundle.finetune[i * n / dims.batch].clone())
        .collect();

    let params = grad_check_params(seed, dims)?;
    let start = Checkpoint::new(params.clone(), "gradcheck".into(), Provenance::Pretrained)?;
    let index = build_candidate_index(&start, &bundle.candidates)?;
    let captions = CaptionTable::from_records(&bundle.captions);
    let lookup = CandidateLookup::new(&bundle.candidates);
    let mut config = TrainConfig {
        batch_size: dims.batch,
        epochs: 1,
        learning_rate: 1e-3,
        weight_decay: 0.0,
        loss_weights: LossWeights {
            cl: 1.0,
            cap: 0.8,
            ret: 0.6,
        },
        enabled_losses: LossTerm::ALL.to_vec(),
        anchor_layout: AnchorLayout::Sep,
        retrieval_mode: RetrievalMode::V2T,
        retrieval_k: 1,
        tau_trainable: true,
        seed,
    };
    let data = FinetuneData {
        samples: &batch,
        prompts: &bundle.prompts_id,
        captions: &captions,
        candidates: &bundle.candidates,
        index: Some(&index),
    };
    // Widen k until at least two distinct anchors come back.
    let anchors = loop {
        let table =
            precompute_assignments(&data, &start, config.retrieval_mode, config.retrieval_k)?;
        let anchors =
            assemble_anchor_batch(&batch, &captions, Some(&table), &lookup, AnchorLayout::Sep)?;
        if !anchors.skip_ret || config.retrieval_k >= bundle.candidates.len() {
            break anchors;
        }
        config.retrieval_k += 1;
    };

    let (_, mut analytic) =
        compute_total_loss_and_grads(&params, &batch, &bundle.prompts_id, &anchors, &config)?;
    corrupt(&mut analytic);
    finite_difference_check(&params, &analytic, eps, |p| {
        Ok(
            compute_total_loss_and_grads(p, &batch, &bundle.prompts_id, &anchors, &config)?
                .0
                .total,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_scalar_problem() -> (DualEncoderParams, ParamGrads) {
        let mut p = init_params(0, (1, 1), 1, 2).unwrap();
        p.weights_mut().for_each(|v| *v = 0.0);
        p.image.w1.as_mut_slice()[0] = 1.5;
        let mut g = p.zeros_like();
        g.image.w1.as_mut_slice()[0] = 1.0;
        (p, g)
    }

    #[test]
    fn adamw_zero_grads_no_decay_is_identity() {
        let p0 = init_params(1, (3, 3), 4, 2).unwrap();
        let mut p = p0.clone();
        let mut st = OptimizerState::new(&p);
        let g = p.zeros_like();
        adamw_update(&mut p, &g, &mut st, 1e-3, 0.0, true).unwrap();
        assert_eq!(p, p0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_zero_grads_decay_shrinks() {
        let p0 = init_params(1, (3, 3), 4, 2).unwrap();
        let mut p = p0.clone();
        let mut st = OptimizerState::new(&p);
        let g = p.zeros_like();
        let (lr, wd) = (1e-2, 0.1);
        adamw_update(&mut p, &g, &mut st, lr, wd, false).unwrap();
        for (a, b) in p.weights().zip(p0.weights()) {
            assert!((a - b * (1.0 - lr * wd)).abs() <= 1e-15);
        }
        assert_eq!(p.log_tau, p0.log_tau);
    }

    #[test]
    fn adamw_first_step_hand_value() {
        let (mut p, g) = one_scalar_problem();
        let mut st = OptimizerState::new(&p);
        adamw_update(&mut p, &g, &mut st, 0.1, 0.0, false).unwrap();
        // m̂ = 1, v̂ = 1: step = 0.1 / (1 + 1e-8).
        let expected = 1.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.image.w1.as_slice()[0] - expected).abs() < 1e-15);
        assert!((1.5 - p.image.w1.as_slice()[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn adamw_shape_mismatch() {
        let mut p = init_params(1, (3, 3), 4, 2).unwrap();
        let g = init_params(1, (3, 2), 4, 2).unwrap();
        let mut st = OptimizerState::new(&p);
        assert!(matches!(
            adamw_update(&mut p, &g, &mut st, 0.1, 0.0, false),
            Err(ArfError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tau_moves_only_when_trainable() {
        let mut p = init_params(1, (3, 3), 4, 2).unwrap();
        let mut g = p.zeros_like();
        g.log_tau = 1.0;
        let before = p.log_tau;
        let mut st = OptimizerState::new(&p);
        adamw_update(&mut p, &g, &mut st, 0.1, 0.0, false).unwrap();
        assert_eq!(p.log_tau, before);
        adamw_update(&mut p, &g, &mut st, 0.1, 0.0, true).unwrap();
        assert!(p.log_tau < before);
    }

    #[test]
    fn loss_list_parsing() {
        assert_eq!(
            parse_loss_list("ret,cl").unwrap(),
            vec![LossTerm::Cl, LossTerm::Ret]
        );
        assert!(parse_loss_list("cl,foo").is_err());
    }

    #[test]
    fn epoch_means() {
        let rec = |epoch, total| StepRecord {
            step: 0,
            epoch,
            l_cl: total,
            l_cap: 0.0,
            l_ret: 0.0,
            total,
            skip_ret: true,
        };
        let log = vec![rec(0, 2.0), rec(0, 4.0), rec(1, 1.0)];
        assert_eq!(epoch_mean_losses(&log), vec![3.0, 1.0]);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let dims = GradCheckDims {
            batch: 4,
            ..GradCheckDims::default()
        };
        let r = composite_grad_check(0, dims, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
        let bad = composite_grad_check_with(0, dims, 1e-5, |g| g.log_tau += 1e-2).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.worst_element, Some(bad.elements_total - 1));
    }
}
