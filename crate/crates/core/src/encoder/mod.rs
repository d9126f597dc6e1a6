//! Trainable adapter encoder.
//!
//! A two-layer feed-forward block with a gated residual maps fixed input
//! features to unit-norm embeddings:
//!
//! ```text
//! y   = W2 · gelu(W1 · x + b1) + b2 + alpha · x
//! out = y / ‖y‖
//! ```
//!
//! One adapter is shared by every language.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{dot, norm, normalize_rows, Matrix, NORM_FLOOR};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Anything that maps feature rows to unit-norm embedding rows.
pub trait Encoder {
    fn encode(&self, features: &Matrix) -> Result<Matrix>;
}

/// The untrained base model: features are only normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl Encoder for IdentityEncoder {
    fn encode(&self, features: &Matrix) -> Result<Matrix> {
        normalize_rows(features)
    }
}

impl Encoder for AdapterParams {
    fn encode(&self, features: &Matrix) -> Result<Matrix> {
        encode_batch(self, features)
    }
}

/// Adapter weights. The same layout holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    /// hidden × dim
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// dim × hidden
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub alpha: f64,
}

impl AdapterParams {
    /// Xavier-uniform weights, zero biases and an open residual gate.
    pub fn init(d_in: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if d_in == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "adapter dims must be positive, got d_in={d_in}, hidden={hidden}"
            )));
        }
        let bound = (6.0 / (d_in + hidden) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
        };
        let w1 = Matrix::from_raw(hidden, d_in, draw(hidden * d_in));
        let w2 = Matrix::from_raw(d_in, hidden, draw(d_in * hidden));
        Ok(Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; d_in],
            alpha: 1.0,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, d_in),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(d_in, hidden),
            b2: vec![0.0; d_in],
            alpha: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.hidden())
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden(), self.dim());
        if self.b1.len() != h || self.w2.rows() != d || self.w2.cols() != h || self.b2.len() != d {
            return Err(Error::Shape(format!(
                "inconsistent adapter shapes: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                h,
                d,
                self.b1.len(),
                self.w2.rows(),
                self.w2.cols(),
                self.b2.len()
            )));
        }
        if !self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite())) {
            return Err(Error::NumericalInstability("non-finite adapter parameter".into()));
        }
        Ok(())
    }

    /// Named views over every tensor, in serialization order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("w1", self.w1.data()),
            ("b1", &self.b1),
            ("w2", self.w2.data()),
            ("b2", &self.b2),
            ("alpha", std::slice::from_ref(&self.alpha)),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 5] {
        [
            ("w1", self.w1.data_mut()),
            ("b1", &mut self.b1),
            ("w2", self.w2.data_mut()),
            ("b2", &mut self.b2),
            ("alpha", std::slice::from_mut(&mut self.alpha)),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &AdapterParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

struct RowForward {
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    pre_norm: Vec<f64>,
    norm: f64,
}

fn forward_row(p: &AdapterParams, x: &[f64]) -> RowForward {
    let pre_hidden: Vec<f64> = (0..p.hidden())
        .map(|k| dot(p.w1.row(k), x) + p.b1[k])
        .collect();
    let hidden: Vec<f64> = pre_hidden.iter().map(|&u| gelu(u)).collect();
    let pre_norm: Vec<f64> = (0..p.dim())
        .map(|j| dot(p.w2.row(j), &hidden) + p.b2[j] + p.alpha * x[j])
        .collect();
    let norm = norm(&pre_norm);
    RowForward {
        pre_hidden,
        hidden,
        pre_norm,
        norm,
    }
}

fn check_input(p: &AdapterParams, x: &Matrix) -> Result<()> {
    if x.cols() != p.dim() {
        return Err(Error::Shape(format!(
            "adapter expects {}-dim features, got {}",
            p.dim(),
            x.cols()
        )));
    }
    Ok(())
}

/// Encodes every row of `x` (n × dim) to a unit-norm embedding.
pub fn encode_batch(params: &AdapterParams, x: &Matrix) -> Result<Matrix> {
    check_input(params, x)?;
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for row in x.iter_rows() {
        let f = forward_row(params, row);
        if !(f.norm >= NORM_FLOOR) {
            return Err(Error::ZeroVector);
        }
        out.extend(f.pre_norm.iter().map(|v| v / f.norm));
    }
    Ok(Matrix::from_raw(x.rows(), x.cols(), out))
}

/// Back-propagates `upstream` (the loss gradient w.r.t. the unit-norm
/// outputs of [`encode_batch`]) to the parameters and to the inputs.
/// Parameter gradients are summed over rows in row order.
pub fn encoder_backward(
    params: &AdapterParams,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<(AdapterParams, Matrix)> {
    check_input(params, x)?;
    if upstream.rows() != x.rows() || upstream.cols() != x.cols() {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, outputs are {}x{}",
            upstream.rows(),
            upstream.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let (d, h) = (params.dim(), params.hidden());
    let mut grads = params.zeros_like();
    let mut g_x = Matrix::zeros(x.rows(), d);
    let mut g_pre_hidden = vec![0.0; h];

    for r in 0..x.rows() {
        let g_out = upstream.row(r);
        if g_out.iter().all(|&g| g == 0.0) {
            continue;
        }
        let xr = x.row(r);
        let f = forward_row(params, xr);
        if !(f.norm >= NORM_FLOOR) {
            return Err(Error::ZeroVector);
        }
        // through out = y / |y|:  g_y = (g_out - out <out, g_out>) / |y|
        let inv = 1.0 / f.norm;
        let radial = dot(&f.pre_norm, g_out) * inv;
        let g_y: Vec<f64> = f
            .pre_norm
            .iter()
            .zip(g_out)
            .map(|(y, g)| (g - y * inv * radial) * inv)
            .collect();

        grads.alpha += dot(&g_y, xr);
        for j in 0..d {
            grads.b2[j] += g_y[j];
            let row = grads.w2.row_mut(j);
            for (w, hk) in row.iter_mut().zip(&f.hidden) {
                *w += g_y[j] * hk;
            }
        }
        for k in 0..h {
            let mut g_h = 0.0;
            for j in 0..d {
                g_h += params.w2.get(j, k) * g_y[j];
            }
            g_pre_hidden[k] = g_h * gelu_grad(f.pre_hidden[k]);
        }
        let gx = g_x.row_mut(r);
        for (j, v) in gx.iter_mut().enumerate() {
            *v = params.alpha * g_y[j];
        }
        for k in 0..h {
            let g = g_pre_hidden[k];
            if g == 0.0 {
                continue;
            }
            grads.b1[k] += g;
            for (w, xv) in grads.w1.row_mut(k).iter_mut().zip(xr) {
                *w += g * xv;
            }
            for (v, w) in gx.iter_mut().zip(params.w1.row(k)) {
                *v += g * w;
            }
        }
    }
    Ok((grads, g_x))
}
