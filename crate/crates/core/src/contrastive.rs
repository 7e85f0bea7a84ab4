//! Bidirectional image–text contrastive loss over a minibatch of matched
//! pairs, its closed-form gradients, and a finite-difference harness.
//!
//! With unit embeddings `F` (images) and `G` (texts) and temperature `τ`,
//! `S = F Gᵀ / τ`. The loss is the mean over rows of `-log softmax_row(S)[i, i]`
//! plus the mean over columns of `-log softmax_col(S)[i, i]`. Writing `P` and
//! `Q` for the row and column softmaxes of `S`:
//!
//! ```text
//! dL/dS = ((P − I) + (Q − I)) / B
//! dL/dF = dL/dS · G / τ
//! dL/dG = (dL/dS)ᵀ · F / τ
//! dL/dlog τ = −Σ_ij (dL/dS)_ij S_ij
//! ```

use serde::{Deserialize, Serialize};

use crate::benchgen::{generate_benchmark, GenConfig};
use crate::encoders::{init_params, DualEncoderParams, EncoderTrace, Modality, ParamGrads};
use crate::error::{ArfError, Result};
use crate::numerics::{log_sum_exp, norm, Matrix};

/// Relative tolerance a gradient check must meet.
pub const GRAD_CHECK_TOL: f64 = 1e-4;
/// Elements whose analytic gradient is at or below this are not compared.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

const UNIT_TOL: f64 = 1e-9;

/// Matched unit embeddings; row `i` of each side forms the positive pair.
#[derive(Clone, Debug)]
pub struct PairBatch {
    image_embeddings: Matrix,
    text_embeddings: Matrix,
}

impl PairBatch {
    pub fn new(image_embeddings: Matrix, text_embeddings: Matrix) -> Result<Self> {
        if image_embeddings.rows() != text_embeddings.rows() {
            return Err(ArfError::dim(
                "pair batch rows",
                image_embeddings.rows(),
                text_embeddings.rows(),
            ));
        }
        if image_embeddings.rows() == 0 {
            return Err(ArfError::InvalidArgument(
                "pair batch must hold at least one pair".into(),
            ));
        }
        if image_embeddings.cols() != text_embeddings.cols() {
            return Err(ArfError::dim(
                "pair batch embedding dim",
                image_embeddings.cols(),
                text_embeddings.cols(),
            ));
        }
        for m in [&image_embeddings, &text_embeddings] {
            if m.row_iter().any(|r| (norm(r) - 1.0).abs() > UNIT_TOL) {
                return Err(ArfError::InvalidArgument(
                    "pair batch rows must be unit norm".into(),
                ));
            }
        }
        Ok(PairBatch {
            image_embeddings,
            text_embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.image_embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_embeddings(&self) -> &Matrix {
        &self.image_embeddings
    }

    pub fn text_embeddings(&self) -> &Matrix {
        &self.text_embeddings
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

#[derive(Clone, Debug)]
pub struct ContrastiveGrads {
    pub d_image: Matrix,
    pub d_text: Matrix,
    pub d_log_tau: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(ArfError::InvalidArgument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    Ok(())
}

fn logits(batch: &PairBatch, tau: f64) -> Matrix {
    let mut s = batch
        .image_embeddings
        .matmul_transposed(&batch.text_embeddings)
        .expect("congruent by construction");
    s.as_mut_slice().iter_mut().for_each(|v| *v /= tau);
    s
}

fn loss_from_logits(s: &Matrix) -> LossValue {
    let b = s.rows();
    let st = s.transpose();
    let mut row_sum = 0.0;
    let mut col_sum = 0.0;
    for i in 0..b {
        row_sum += log_sum_exp(s.row(i)) - s.get(i, i);
        col_sum += log_sum_exp(st.row(i)) - s.get(i, i);
    }
    let image_to_text = row_sum / b as f64;
    let text_to_image = col_sum / b as f64;
    LossValue {
        total: image_to_text + text_to_image,
        image_to_text,
        text_to_image,
    }
}

pub fn contrastive_loss(batch: &PairBatch, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    Ok(loss_from_logits(&logits(batch, tau)))
}

/// Loss and gradients with respect to the (already normalized) embeddings.
pub fn contrastive_loss_and_grads(
    batch: &PairBatch,
    tau: f64,
) -> Result<(LossValue, ContrastiveGrads)> {
    check_tau(tau)?;
    let s = logits(batch, tau);
    let loss = loss_from_logits(&s);
    let b = s.rows();
    let inv_b = 1.0 / b as f64;

    // dS = (P + Q − 2I) / B
    let mut ds = Matrix::zeros(b, b);
    for i in 0..b {
        let row = s.row(i);
        let lse = log_sum_exp(row);
        for (j, v) in row.iter().enumerate() {
            ds.set(i, j, (v - lse).exp() * inv_b);
        }
    }
    let st = s.transpose();
    for j in 0..b {
        let col = st.row(j);
        let lse = log_sum_exp(col);
        for (i, v) in col.iter().enumerate() {
            let q = (v - lse).exp() * inv_b;
            ds.set(i, j, ds.get(i, j) + q);
        }
    }
    for i in 0..b {
        ds.set(i, i, ds.get(i, i) - 2.0 * inv_b);
    }

    let d_log_tau = -ds
        .as_slice()
        .iter()
        .zip(s.as_slice())
        .map(|(d, v)| d * v)
        .sum::<f64>();

    let mut d_image = ds.matmul(&batch.text_embeddings)?;
    let mut d_text = ds.transpose().matmul(&batch.image_embeddings)?;
    d_image.as_mut_slice().iter_mut().for_each(|v| *v /= tau);
    d_text.as_mut_slice().iter_mut().for_each(|v| *v /= tau);
    Ok((
        loss,
        ContrastiveGrads {
            d_image,
            d_text,
            d_log_tau,
        },
    ))
}

pub fn contrastive_grads(batch: &PairBatch, tau: f64) -> Result<ContrastiveGrads> {
    Ok(contrastive_loss_and_grads(batch, tau)?.1)
}

/// Raw (pre-encoder) image and text features of one pair.
pub type RawPair<'a> = (&'a [f64], &'a [f64]);

/// Encodes `pairs`, evaluates the contrastive loss at the current
/// temperature, and accumulates `weight · ∂L/∂θ` into `grads` (towers and
/// `log_tau`). A single pair contributes zero loss and zero gradient.
pub fn pair_loss_and_accumulate(
    params: &DualEncoderParams,
    pairs: &[RawPair<'_>],
    weight: f64,
    grads: &mut ParamGrads,
) -> Result<LossValue> {
    if pairs.is_empty() {
        return Ok(LossValue::default());
    }
    let (image_traces, text_traces) = encode_pairs(params, pairs)?;
    let batch = batch_from_traces(params.embed_dim(), &image_traces, &text_traces)?;
    let (loss, g) = contrastive_loss_and_grads(&batch, params.tau())?;
    for (i, (raw_img, raw_txt)) in pairs.iter().enumerate() {
        params.image.backward_into(
            raw_img,
            &image_traces[i],
            g.d_image.row(i),
            weight,
            &mut grads.image,
        )?;
        params.text.backward_into(
            raw_txt,
            &text_traces[i],
            g.d_text.row(i),
            weight,
            &mut grads.text,
        )?;
    }
    grads.log_tau += weight * g.d_log_tau;
    Ok(loss)
}

/// Loss of `pairs` under `params`, no gradients.
pub fn pair_loss(params: &DualEncoderParams, pairs: &[RawPair<'_>]) -> Result<LossValue> {
    if pairs.is_empty() {
        return Ok(LossValue::default());
    }
    let (image_traces, text_traces) = encode_pairs(params, pairs)?;
    let batch = batch_from_traces(params.embed_dim(), &image_traces, &text_traces)?;
    contrastive_loss(&batch, params.tau())
}

fn encode_pairs(
    params: &DualEncoderParams,
    pairs: &[RawPair<'_>],
) -> Result<(Vec<EncoderTrace>, Vec<EncoderTrace>)> {
    let mut images = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for (img, txt) in pairs {
        images.push(params.encode_trace(Modality::Image, img)?);
        texts.push(params.encode_trace(Modality::Text, txt)?);
    }
    Ok((images, texts))
}

fn batch_from_traces(
    dim: usize,
    images: &[EncoderTrace],
    texts: &[EncoderTrace],
) -> Result<PairBatch> {
    let f = Matrix::from_rows(dim, images.iter().map(|t| t.embedding.as_slice()))?;
    let g = Matrix::from_rows(dim, texts.iter().map(|t| t.embedding.as_slice()))?;
    PairBatch::new(f, g)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst element, if any element was compared.
    pub worst_element: Option<usize>,
    pub elements_checked: usize,
    pub elements_total: usize,
    pub eps: f64,
    pub passed: bool,
}

/// Perturbs every parameter element by `±eps` and compares the central
/// difference of `objective` with `analytic`, over elements whose analytic
/// value exceeds [`GRAD_CHECK_FLOOR`] in magnitude. Relative error is
/// `|a − n| / max(|a|, |n|)`.
pub fn finite_difference_check<F>(
    params: &DualEncoderParams,
    analytic: &ParamGrads,
    eps: f64,
    mut objective: F,
) -> Result<CheckReport>
where
    F: FnMut(&DualEncoderParams) -> Result<f64>,
{
    if !(eps > 1e-8 && eps < 1e-2) {
        return Err(ArfError::InvalidArgument(format!(
            "eps {eps} outside (1e-8, 1e-2)"
        )));
    }
    if !params.same_shape(analytic) {
        return Err(ArfError::ShapeMismatch(
            "analytic gradient vs parameters".into(),
        ));
    }
    let base = params.to_flat();
    let grad = analytic.to_flat();
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut max_rel_err: f64 = 0.0;
    let mut worst_element = None;
    let mut checked = 0;
    for (k, &a) in grad.iter().enumerate() {
        if a.abs() <= GRAD_CHECK_FLOOR {
            continue;
        }
        flat[k] = base[k] + eps;
        probe.set_flat(&flat)?;
        let plus = objective(&probe)?;
        flat[k] = base[k] - eps;
        probe.set_flat(&flat)?;
        let minus = objective(&probe)?;
        flat[k] = base[k];

        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        checked += 1;
        if rel > max_rel_err || worst_element.is_none() {
            max_rel_err = max_rel_err.max(rel);
            worst_element = Some(k);
        }
    }
    Ok(CheckReport {
        max_rel_err,
        worst_element,
        elements_checked: checked,
        elements_total: grad.len(),
        eps,
        passed: max_rel_err <= GRAD_CHECK_TOL,
    })
}

/// Model and batch sizes for [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckDims {
    pub batch: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        GradCheckDims {
            batch: 8,
            image_dim: 6,
            text_dim: 5,
            hidden: 7,
            embed_dim: 4,
        }
    }
}

pub fn grad_check(seed: u64, dims: GradCheckDims, eps: f64) -> Result<CheckReport> {
    grad_check_with(seed, dims, eps, |_| {})
}

/// [`grad_check`] with a hook that may tamper with the analytic gradient
/// before comparison.
pub fn grad_check_with<C>(
    seed: u64,
    dims: GradCheckDims,
    eps: f64,
    corrupt: C,
) -> Result<CheckReport>
where
    C: FnOnce(&mut ParamGrads),
{
    let gen = GenConfig::tiny(seed, dims.image_dim, dims.text_dim);
    let bundle = generate_benchmark(&gen)?;
    if bundle.pretrain_pool.len() < dims.batch {
        return Err(ArfError::InvalidArgument(format!(
            "gradient check batch {} exceeds the generated pool",
            dims.batch
        )));
    }
    let pairs: Vec<RawPair<'_>> = bundle.pretrain_pool[..dims.batch]
        .iter()
        .map(|p| (p.image_feature.as_slice(), p.text_feature.as_slice()))
        .collect();
    let params = grad_check_params(seed, dims)?;
    let mut analytic = params.zeros_like();
    pair_loss_and_accumulate(&params, &pairs, 1.0, &mut analytic)?;
    corrupt(&mut analytic);
    finite_difference_check(&params, &analytic, eps, |p| Ok(pair_loss(p, &pairs)?.total))
}

/// Seeded initialization with small random first-layer biases, so the check
/// is not taken at the zero-bias point.
pub(crate) fn grad_check_params(seed: u64, dims: GradCheckDims) -> Result<DualEncoderParams> {
    let mut params = init_params(
        seed,
        (dims.image_dim, dims.text_dim),
        dims.hidden,
        dims.embed_dim,
    )?;
    let mut stream =
        crate::numerics::gaussian_stream(crate::numerics::derive_seed(seed, 0x6772_6164));
    for b in params.image.b1.iter_mut().chain(params.text.b1.iter_mut()) {
        *b = 0.1 * stream.gaussian();
    }
    Ok(params)
}
