//! Forward and analytic backward passes for the composite cross-lingual
//! objective and its InfoNCE baseline.
//!
//! The composite loss is
//!
//! ```text
//! total = λ1 · NCE_en + λ2 · CL + λ3 · KL
//! ```
//!
//! * `NCE_en`: English query anchored InfoNCE over English passages.
//! * `CL`: the reversed cross-lingual term; the English gold passage is the
//!   anchor and target-language queries are the candidates.
//! * `KL`: row-wise KL divergence between the temperature-softmaxed
//!   English similarity matrix and the cross-lingual one.
//!
//! All contrastive terms use the `-ln softmax` form averaged over the rows
//! of the batch, and every candidate set is "all in-batch positives plus all
//! mined negatives of the whole batch".

mod contrastive;
mod gradcheck;
mod kl;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use contrastive::{baseline_infonce_forward, cl_reversed_forward, nce_en_forward};
pub use gradcheck::{finite_difference_check, grad_check};
pub use kl::{
    english_log_distribution, kl_alignment_forward, kl_alignment_forward_with,
    kl_alignment_to_target, KlGradient,
};

/// Temperature equivalent to a similarity scale of 20.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.4,
            lambda3: 0.2,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    /// Integer triples such as `(4, 4, 2)` normalized to sum to one.
    pub fn from_integers(parts: [u32; 3]) -> Result<Self> {
        let sum: u32 = parts.iter().sum();
        if sum == 0 {
            return Err(Error::InvalidWeights("all weights are zero".into()));
        }
        let s = f64::from(sum);
        Self::new(
            f64::from(parts[0]) / s,
            f64::from(parts[1]) / s,
            f64::from(parts[2]) / s,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "weights must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidWeights("all weights are zero".into()));
        }
        Ok(())
    }
}

/// Embeddings for one training batch, grouped by role.
///
/// Negative tensors are flattened: rows `i*K .. (i+1)*K` of `p_en_neg` are
/// the `K` mined passages of example `i`, and likewise for `q_tgt_neg`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub q_en: Matrix,
    pub p_en_pos: Matrix,
    pub p_en_neg: Matrix,
    pub q_tgt_pos: Matrix,
    pub q_tgt_neg: Matrix,
    pub tau: f64,
    pub example_ids: Vec<String>,
}

impl ContrastiveBatch {
    pub fn new(
        q_en: Matrix,
        p_en_pos: Matrix,
        p_en_neg: Matrix,
        q_tgt_pos: Matrix,
        q_tgt_neg: Matrix,
        tau: f64,
        example_ids: Vec<String>,
    ) -> Result<Self> {
        let batch = Self {
            q_en,
            p_en_pos,
            p_en_neg,
            q_tgt_pos,
            q_tgt_neg,
            tau,
            example_ids,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        let b = self.q_en.rows();
        if b == 0 {
            return Err(Error::DegenerateBatch("empty batch".into()));
        }
        let d = self.q_en.cols();
        for (name, m) in [
            ("p_en_pos", &self.p_en_pos),
            ("q_tgt_pos", &self.q_tgt_pos),
        ] {
            if m.rows() != b || m.cols() != d {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {b}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        for (name, m) in [("p_en_neg", &self.p_en_neg), ("q_tgt_neg", &self.q_tgt_neg)] {
            if m.rows() % b != 0 || (m.rows() > 0 && m.cols() != d) {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected a multiple of {b} rows of width {d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if self.example_ids.len() != b {
            return Err(Error::Shape(format!(
                "{} example ids for {b} rows",
                self.example_ids.len()
            )));
        }
        let mut ids: Vec<&str> = self.example_ids.iter().map(String::as_str).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::DegenerateBatch("duplicate example ids".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.q_en.rows()
    }

    pub fn dim(&self) -> usize {
        self.q_en.cols()
    }

    /// Mined passage negatives per example.
    pub fn passage_negatives(&self) -> usize {
        self.p_en_neg.rows() / self.batch_size()
    }

    /// Mined query negatives per example.
    pub fn query_negatives(&self) -> usize {
        self.q_tgt_neg.rows() / self.batch_size()
    }

    /// The five embedding tensors in a fixed order.
    pub fn fields(&self) -> [&Matrix; 5] {
        [
            &self.q_en,
            &self.p_en_pos,
            &self.p_en_neg,
            &self.q_tgt_pos,
            &self.q_tgt_neg,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Matrix; 5] {
        [
            &mut self.q_en,
            &mut self.p_en_pos,
            &mut self.p_en_neg,
            &mut self.q_tgt_pos,
            &mut self.q_tgt_neg,
        ]
    }
}

/// Gradients with respect to every embedding tensor of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub q_en: Matrix,
    pub p_en_pos: Matrix,
    pub p_en_neg: Matrix,
    pub q_tgt_pos: Matrix,
    pub q_tgt_neg: Matrix,
}

impl BatchGrads {
    pub fn zeros_like(batch: &ContrastiveBatch) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            q_en: z(&batch.q_en),
            p_en_pos: z(&batch.p_en_pos),
            p_en_neg: z(&batch.p_en_neg),
            q_tgt_pos: z(&batch.q_tgt_pos),
            q_tgt_neg: z(&batch.q_tgt_neg),
        }
    }

    pub fn fields(&self) -> [&Matrix; 5] {
        [
            &self.q_en,
            &self.p_en_pos,
            &self.p_en_neg,
            &self.q_tgt_pos,
            &self.q_tgt_neg,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Matrix; 5] {
        [
            &mut self.q_en,
            &mut self.p_en_pos,
            &mut self.p_en_neg,
            &mut self.q_tgt_pos,
            &mut self.q_tgt_neg,
        ]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &BatchGrads, scale: f64) {
        for (a, b) in self.fields_mut().into_iter().zip(other.fields()) {
            a.add_scaled(b, scale);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|m| m.is_finite())
    }
}

/// Value and gradients of a single loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermOutput {
    pub value: f64,
    pub grads: BatchGrads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    /// Unweighted term values.
    pub nce_en: f64,
    pub cl: f64,
    pub kl: f64,
    pub grads: BatchGrads,
}

/// Direction of the cross-lingual term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossLingualDirection {
    /// English passage anchors, target-language queries are candidates.
    #[default]
    Reversed,
    /// Target-language query anchors, English passages are candidates.
    Conventional,
}

/// Full wiring of the composite objective, including the ablation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClearOptions {
    pub weights: LossWeights,
    pub direction: CrossLingualDirection,
    pub kl_gradient: KlGradient,
}

pub fn clear_forward(batch: &ContrastiveBatch, weights: &LossWeights) -> Result<LossOutput> {
    clear_forward_with(
        batch,
        &ClearOptions {
            weights: *weights,
            ..ClearOptions::default()
        },
    )
}

pub fn clear_forward_with(batch: &ContrastiveBatch, opts: &ClearOptions) -> Result<LossOutput> {
    opts.weights.validate()?;
    let nce = nce_en_forward(batch)?;
    let cl = match opts.direction {
        CrossLingualDirection::Reversed => cl_reversed_forward(batch)?,
        CrossLingualDirection::Conventional => baseline_infonce_forward(batch)?,
    };
    let kl = kl_alignment_forward_with(batch, opts.kl_gradient)?;
    let w = &opts.weights;
    let total = w.lambda1 * nce.value + w.lambda2 * cl.value + w.lambda3 * kl.value;
    let mut grads = BatchGrads::zeros_like(batch);
    grads.add_scaled(&nce.grads, w.lambda1);
    grads.add_scaled(&cl.grads, w.lambda2);
    grads.add_scaled(&kl.grads, w.lambda3);
    Ok(LossOutput {
        total,
        nce_en: nce.value,
        cl: cl.value,
        kl: kl.value,
        grads,
    })
}

/// Composite objective value with the KL target held at `log_target`.
///
/// Finite differences of this function, with `log_target` taken from the
/// unperturbed batch, are the reference for the analytic gradient of
/// [`clear_forward_with`] under [`KlGradient::Detached`].
pub fn clear_value_with_target(
    batch: &ContrastiveBatch,
    opts: &ClearOptions,
    log_target: &Matrix,
) -> Result<f64> {
    let nce = nce_en_forward(batch)?.value;
    let cl = match opts.direction {
        CrossLingualDirection::Reversed => cl_reversed_forward(batch)?.value,
        CrossLingualDirection::Conventional => baseline_infonce_forward(batch)?.value,
    };
    let kl = match opts.kl_gradient {
        KlGradient::Detached => kl_alignment_to_target(batch, log_target)?.value,
        KlGradient::Bidirectional => kl_alignment_forward_with(batch, opts.kl_gradient)?.value,
    };
    let w = &opts.weights;
    Ok(w.lambda1 * nce + w.lambda2 * cl + w.lambda3 * kl)
}
