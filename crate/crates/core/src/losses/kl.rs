use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{dot, log_softmax_in_place, Matrix};

use super::{BatchGrads, ContrastiveBatch, TermOutput};

/// Which similarity matrix receives gradient in the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlGradient {
    /// The English distribution is a fixed target; only the cross-lingual
    /// side moves.
    #[default]
    Detached,
    /// Gradient flows through both distributions.
    Bidirectional,
}

/// KL alignment with the English side detached.
pub fn kl_alignment_forward(batch: &ContrastiveBatch) -> Result<TermOutput> {
    kl_alignment_forward_with(batch, KlGradient::Detached)
}

/// Row-wise `ln softmax(S_en / tau)` with `S_en[i][j] = <q_en_i, p_en_j>`:
/// the English target distribution of the KL term, in log space.
pub fn english_log_distribution(batch: &ContrastiveBatch) -> Result<Matrix> {
    batch.validate()?;
    Ok(log_distribution(&batch.q_en, &batch.p_en_pos, batch.tau))
}

fn log_distribution(queries: &Matrix, passages: &Matrix, tau: f64) -> Matrix {
    let b = queries.rows();
    let mut out = Matrix::zeros(b, passages.rows());
    for i in 0..b {
        let q = queries.row(i);
        let row = out.row_mut(i);
        for (j, z) in row.iter_mut().enumerate() {
            *z = dot(q, passages.row(j)) / tau;
        }
        log_softmax_in_place(row);
    }
    out
}

/// Mean over rows `i` of `KL(D_en[i] || D_cl[i])`, where
/// `D_en = softmax(S_en / tau)` with `S_en[i][j] = <q_en_i, p_en_j>` and
/// `D_cl = softmax(S_cl / tau)` with `S_cl[i][j] = <p_en_j, q_tgt_i>`.
/// Only in-batch positives take part.
pub fn kl_alignment_forward_with(batch: &ContrastiveBatch, mode: KlGradient) -> Result<TermOutput> {
    let log_target = english_log_distribution(batch)?;
    kl_core(batch, &log_target, mode)
}

/// KL term against a fixed English log-distribution. With the target taken
/// from the same batch this equals the detached [`kl_alignment_forward`];
/// holding it fixed while the batch is perturbed gives the finite-difference
/// oracle for that stop-gradient.
pub fn kl_alignment_to_target(batch: &ContrastiveBatch, log_target: &Matrix) -> Result<TermOutput> {
    batch.validate()?;
    let b = batch.batch_size();
    if log_target.rows() != b || log_target.cols() != b {
        return Err(crate::Error::Shape(format!(
            "target distribution is {}x{}, expected {b}x{b}",
            log_target.rows(),
            log_target.cols()
        )));
    }
    kl_core(batch, log_target, KlGradient::Detached)
}

fn kl_core(batch: &ContrastiveBatch, log_target: &Matrix, mode: KlGradient) -> Result<TermOutput> {
    let b = batch.batch_size();
    let inv_tau = 1.0 / batch.tau;
    let inv_b = 1.0 / b as f64;

    let mut grads = BatchGrads::zeros_like(batch);
    let log_cl_all = log_distribution(&batch.q_tgt_pos, &batch.p_en_pos, batch.tau);
    let mut total = 0.0;

    for i in 0..b {
        let q_en = batch.q_en.row(i);
        let q_tgt = batch.q_tgt_pos.row(i);
        let log_en = log_target.row(i);
        let log_cl = log_cl_all.row(i);

        let mut row_kl = 0.0;
        for j in 0..b {
            row_kl += log_en[j].exp() * (log_en[j] - log_cl[j]);
        }
        total += row_kl;

        for j in 0..b {
            let p_en = log_en[j].exp();
            let p_cl = log_cl[j].exp();
            // d KL_i / d logit_cl_j = p_cl - p_en
            let g_cl = (p_cl - p_en) * inv_b * inv_tau;
            add_pair_grad(
                &mut grads.q_tgt_pos,
                i,
                &mut grads.p_en_pos,
                j,
                q_tgt,
                batch.p_en_pos.row(j),
                g_cl,
            );
            if mode == KlGradient::Bidirectional {
                // d KL_i / d logit_en_j = p_en * (ln p_en - ln p_cl - KL_i)
                let g_en = p_en * (log_en[j] - log_cl[j] - row_kl) * inv_b * inv_tau;
                add_pair_grad(
                    &mut grads.q_en,
                    i,
                    &mut grads.p_en_pos,
                    j,
                    q_en,
                    batch.p_en_pos.row(j),
                    g_en,
                );
            }
        }
    }

    Ok(TermOutput {
        value: total * inv_b,
        grads,
    })
}

// Gradient of `g * <a_i, p_j>` into both factors.
fn add_pair_grad(
    ga: &mut Matrix,
    i: usize,
    gp: &mut Matrix,
    j: usize,
    a: &[f64],
    p: &[f64],
    g: f64,
) {
    if g == 0.0 {
        return;
    }
    for (x, y) in ga.row_mut(i).iter_mut().zip(p) {
        *x += g * y;
    }
    for (x, y) in gp.row_mut(j).iter_mut().zip(a) {
        *x += g * y;
    }
}
