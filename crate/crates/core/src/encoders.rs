//! Toy dual encoder: one affine → tanh → affine → normalize tower per
//! modality, with exact backpropagation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ArfError, Result};
use crate::numerics::{self, axpy, dot, gaussian_stream, Matrix, Vector, MIN_NORM};

/// Initial temperature.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

impl FromStr for Modality {
    type Err = ArfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" | "v" => Ok(Modality::Image),
            "text" | "t" => Ok(Modality::Text),
            other => Err(ArfError::InvalidArgument(format!(
                "unknown modality {other:?}"
            ))),
        }
    }
}

/// Weights of one tower: `W2 · tanh(W1 · x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub hidden: Vec<f64>,
    /// Norm of the pre-normalization output.
    pub norm: f64,
    pub embedding: Vector,
}

impl EncoderParams {
    pub fn zeros(input_dim: usize, hidden: usize, embed_dim: usize) -> Self {
        EncoderParams {
            w1: Matrix::zeros(hidden, input_dim),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(embed_dim, hidden),
            b2: vec![0.0; embed_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn num_elements(&self) -> usize {
        self.w1.as_slice().len() + self.b1.len() + self.w2.as_slice().len() + self.b2.len()
    }

    pub fn elements(&self) -> impl Iterator<Item = &f64> + '_ {
        self.w1
            .as_slice()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.as_slice())
            .chain(&self.b2)
    }

    pub fn elements_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.w1
            .as_mut_slice()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.as_mut_slice().iter_mut())
            .chain(self.b2.iter_mut())
    }

    fn same_shape(&self, other: &EncoderParams) -> bool {
        self.w1.rows() == other.w1.rows()
            && self.w1.cols() == other.w1.cols()
            && self.w2.rows() == other.w2.rows()
            && self.w2.cols() == other.w2.cols()
            && self.b1.len() == other.b1.len()
            && self.b2.len() == other.b2.len()
    }

    fn check_consistent(&self, which: Modality) -> Result<()> {
        let h = self.hidden();
        let e = self.embed_dim();
        if self.b1.len() != h || self.w2.cols() != h || self.b2.len() != e {
            return Err(ArfError::ShapeMismatch(format!(
                "{which} tower is internally inconsistent"
            )));
        }
        if self.elements().any(|v| !v.is_finite()) {
            return Err(ArfError::NonFinite("encoder parameters"));
        }
        Ok(())
    }

    pub fn forward(&self, raw: &[f64]) -> Result<EncoderTrace> {
        if raw.len() != self.input_dim() {
            return Err(ArfError::dim("encoder input", self.input_dim(), raw.len()));
        }
        let mut hidden = self.w1.matvec(raw);
        for (h, b) in hidden.iter_mut().zip(&self.b1) {
            *h = (*h + b).tanh();
        }
        let mut out = self.w2.matvec(&hidden);
        for (o, b) in out.iter_mut().zip(&self.b2) {
            *o += b;
        }
        let norm = numerics::norm(&out);
        if norm.is_nan() || norm <= MIN_NORM {
            return Err(ArfError::ZeroVector { norm });
        }
        out.iter_mut().for_each(|o| *o /= norm);
        Ok(EncoderTrace {
            hidden,
            norm,
            embedding: Vector::from_vec_unchecked(out),
        })
    }

    /// Accumulates `scale · ∂(grad_embedding · e)/∂θ` into `grads`.
    pub fn backward_into(
        &self,
        raw: &[f64],
        trace: &EncoderTrace,
        grad_embedding: &[f64],
        scale: f64,
        grads: &mut EncoderParams,
    ) -> Result<()> {
        let e = trace.embedding.as_slice();
        if grad_embedding.len() != e.len() {
            return Err(ArfError::dim(
                "embedding gradient",
                e.len(),
                grad_embedding.len(),
            ));
        }
        // Through the normalization: (I − e eᵀ) g / ‖u‖.
        let along = dot(e, grad_embedding);
        let grad_u: Vec<f64> = grad_embedding
            .iter()
            .zip(e)
            .map(|(g, ei)| scale * (g - along * ei) / trace.norm)
            .collect();

        axpy(1.0, &grad_u, &mut grads.b2);
        let hidden_dim = self.hidden();
        for (i, gu) in grad_u.iter().enumerate() {
            axpy(
                *gu,
                &trace.hidden,
                &mut grads.w2.as_mut_slice()[i * hidden_dim..(i + 1) * hidden_dim],
            );
        }

        let mut grad_z = vec![0.0; hidden_dim];
        self.w2.matvec_transposed_into(&grad_u, &mut grad_z);
        for (gz, h) in grad_z.iter_mut().zip(&trace.hidden) {
            *gz *= 1.0 - h * h;
        }

        axpy(1.0, &grad_z, &mut grads.b1);
        let input_dim = self.input_dim();
        for (i, gz) in grad_z.iter().enumerate() {
            axpy(
                *gz,
                raw,
                &mut grads.w1.as_mut_slice()[i * input_dim..(i + 1) * input_dim],
            );
        }
        Ok(())
    }
}

/// All trainable state: both towers and the log-temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderParams {
    pub image: EncoderParams,
    pub text: EncoderParams,
    pub log_tau: f64,
}

/// Gradients share the parameter layout.
pub type ParamGrads = DualEncoderParams;

impl DualEncoderParams {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn tower(&self, modality: Modality) -> &EncoderParams {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn tower_mut(&mut self, modality: Modality) -> &mut EncoderParams {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.image.embed_dim()
    }

    pub fn input_dim(&self, modality: Modality) -> usize {
        self.tower(modality).input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        DualEncoderParams {
            image: EncoderParams::zeros(
                self.image.input_dim(),
                self.image.hidden(),
                self.image.embed_dim(),
            ),
            text: EncoderParams::zeros(
                self.text.input_dim(),
                self.text.hidden(),
                self.text.embed_dim(),
            ),
            log_tau: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.check_consistent(Modality::Image)?;
        self.text.check_consistent(Modality::Text)?;
        if self.image.embed_dim() != self.text.embed_dim() {
            return Err(ArfError::ShapeMismatch(format!(
                "image embed_dim {} != text embed_dim {}",
                self.image.embed_dim(),
                self.text.embed_dim()
            )));
        }
        if self.embed_dim() < 2 {
            return Err(ArfError::ShapeMismatch("embed_dim must be >= 2".into()));
        }
        let tau = self.tau();
        if !(tau > 1e-4 && tau < 10.0) {
            return Err(ArfError::InvalidArgument(format!(
                "temperature {tau} outside (1e-4, 10)"
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &DualEncoderParams) -> bool {
        self.image.same_shape(&other.image) && self.text.same_shape(&other.text)
    }

    pub fn num_elements(&self) -> usize {
        self.image.num_elements() + self.text.num_elements() + 1
    }

    /// Every tower weight, image tower first. Excludes `log_tau`.
    pub fn weights(&self) -> impl Iterator<Item = &f64> + '_ {
        self.image.elements().chain(self.text.elements())
    }

    pub fn weights_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.image.elements_mut().chain(self.text.elements_mut())
    }

    /// Flat view in canonical order: image tower, text tower, then `log_tau`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.weights().copied().collect();
        out.push(self.log_tau);
        out
    }

    /// Overwrites every element from a flat vector in [`to_flat`](Self::to_flat) order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_elements() {
            return Err(ArfError::dim(
                "flat parameters",
                self.num_elements(),
                flat.len(),
            ));
        }
        for (dst, src) in self.weights_mut().zip(flat) {
            *dst = *src;
        }
        self.log_tau = flat[flat.len() - 1];
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.weights_mut().for_each(|v| *v *= c);
        self.log_tau *= c;
    }

    /// `self += c · other`, elementwise including `log_tau`.
    pub fn add_scaled(&mut self, c: f64, other: &DualEncoderParams) {
        for (dst, src) in self.weights_mut().zip(other.weights()) {
            *dst += c * src;
        }
        self.log_tau += c * other.log_tau;
    }

    pub fn encode_trace(&self, modality: Modality, raw: &[f64]) -> Result<EncoderTrace> {
        self.tower(modality).forward(raw)
    }
}

/// Weights drawn from `gaussian_stream(seed)` with scale `1/√fan_in`, in the
/// order image W1, image W2, text W1, text W2. Biases start at zero and
/// `log_tau = ln 0.07`.
pub fn init_params(
    seed: u64,
    input_dims: (usize, usize),
    hidden: usize,
    embed_dim: usize,
) -> Result<DualEncoderParams> {
    let (img, txt) = input_dims;
    if img == 0 || txt == 0 || hidden == 0 {
        return Err(ArfError::InvalidArgument(
            "encoder dimensions must be >= 1".into(),
        ));
    }
    if embed_dim < 2 {
        return Err(ArfError::InvalidArgument("embed_dim must be >= 2".into()));
    }
    let mut stream = gaussian_stream(seed);
    let mut tower = |input_dim: usize| -> Result<EncoderParams> {
        let w1 = stream.gaussian_vec(hidden * input_dim, 1.0 / (input_dim as f64).sqrt());
        let w2 = stream.gaussian_vec(embed_dim * hidden, 1.0 / (hidden as f64).sqrt());
        Ok(EncoderParams {
            w1: Matrix::from_vec(hidden, input_dim, w1)?,
            b1: vec![0.0; hidden],
            w2: Matrix::from_vec(embed_dim, hidden, w2)?,
            b2: vec![0.0; embed_dim],
        })
    };
    let image = tower(img)?;
    let text = tower(txt)?;
    Ok(DualEncoderParams {
        image,
        text,
        log_tau: DEFAULT_TAU.ln(),
    })
}

/// Unit embedding of `raw` under the given tower.
pub fn encode(params: &DualEncoderParams, modality: Modality, raw: &[f64]) -> Result<Vector> {
    Ok(params.encode_trace(modality, raw)?.embedding)
}

/// `∂(grad_embedding · e)/∂θ` for the chosen tower; the other tower and
/// `log_tau` are zero.
pub fn encoder_backward(
    params: &DualEncoderParams,
    modality: Modality,
    raw: &[f64],
    grad_embedding: &[f64],
) -> Result<ParamGrads> {
    let tower = params.tower(modality);
    if grad_embedding.len() != tower.embed_dim() {
        return Err(ArfError::dim(
            "embedding gradient",
            tower.embed_dim(),
            grad_embedding.len(),
        ));
    }
    let trace = tower.forward(raw)?;
    let mut grads = params.zeros_like();
    tower.backward_into(raw, &trace, grad_embedding, 1.0, grads.tower_mut(modality))?;
    Ok(grads)
}
