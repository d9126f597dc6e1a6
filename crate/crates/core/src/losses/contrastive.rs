use crate::error::{Error, Result};
use crate::tensor::{dot, log_softmax_in_place, Matrix};

use super::{BatchGrads, ContrastiveBatch, TermOutput};

/// Gradients of [`info_nce`] with respect to its three inputs.
pub(crate) struct InfoNceGrads {
    pub anchors: Matrix,
    pub positives: Matrix,
    pub negatives: Matrix,
}

/// Mean `-ln softmax` over rows. Row `i` scores `anchors[i]` against every
/// row of `positives` followed by every row of `negatives`; the target is
/// `positives[i]`.
pub(crate) fn info_nce(
    anchors: &Matrix,
    positives: &Matrix,
    negatives: &Matrix,
    tau: f64,
) -> Result<(f64, Vec<f64>, InfoNceGrads)> {
    let b = anchors.rows();
    let d = anchors.cols();
    if b < 2 && negatives.rows() == 0 {
        return Err(Error::DegenerateBatch(format!(
            "{b} example(s) and no mined negatives leaves no negative candidates"
        )));
    }
    let n_cand = positives.rows() + negatives.rows();
    let candidate = |c: usize| -> &[f64] {
        if c < b {
            positives.row(c)
        } else {
            negatives.row(c - b)
        }
    };

    let mut g_anchor = Matrix::zeros(b, d);
    let mut g_pos = Matrix::zeros(positives.rows(), d);
    let mut g_neg = Matrix::zeros(negatives.rows(), d);
    let mut row_losses = Vec::with_capacity(b);
    let mut logits = vec![0.0; n_cand];
    let inv_tau = 1.0 / tau;
    let inv_b = 1.0 / b as f64;

    for i in 0..b {
        let a = anchors.row(i);
        for (c, z) in logits.iter_mut().enumerate() {
            *z = dot(a, candidate(c)) * inv_tau;
        }
        log_softmax_in_place(&mut logits);
        row_losses.push(-logits[i]);

        // d loss / d logit_c = (softmax_c - [c == i]) / B
        for c in 0..n_cand {
            let mut g = logits[c].exp();
            if c == i {
                g -= 1.0;
            }
            let g = g * inv_b * inv_tau;
            if g == 0.0 {
                continue;
            }
            let cand = candidate(c);
            for (ga, x) in g_anchor.row_mut(i).iter_mut().zip(cand) {
                *ga += g * x;
            }
            let gc = if c < b {
                g_pos.row_mut(c)
            } else {
                g_neg.row_mut(c - b)
            };
            for (gc, x) in gc.iter_mut().zip(a) {
                *gc += g * x;
            }
        }
    }
    let mean = row_losses.iter().sum::<f64>() * inv_b;
    Ok((
        mean,
        row_losses,
        InfoNceGrads {
            anchors: g_anchor,
            positives: g_pos,
            negatives: g_neg,
        },
    ))
}

/// English query → English passages, with in-batch and mined passage
/// negatives.
pub fn nce_en_forward(batch: &ContrastiveBatch) -> Result<TermOutput> {
    batch.validate()?;
    let (value, _, g) = info_nce(&batch.q_en, &batch.p_en_pos, &batch.p_en_neg, batch.tau)?;
    let mut grads = BatchGrads::zeros_like(batch);
    grads.q_en = g.anchors;
    grads.p_en_pos = g.positives;
    grads.p_en_neg = g.negatives;
    Ok(TermOutput { value, grads })
}

/// English gold passage → target-language queries. Candidates are the
/// in-batch target queries plus the mined query negatives; English queries
/// never appear.
pub fn cl_reversed_forward(batch: &ContrastiveBatch) -> Result<TermOutput> {
    batch.validate()?;
    let (value, _, g) = info_nce(
        &batch.p_en_pos,
        &batch.q_tgt_pos,
        &batch.q_tgt_neg,
        batch.tau,
    )?;
    let mut grads = BatchGrads::zeros_like(batch);
    grads.p_en_pos = g.anchors;
    grads.q_tgt_pos = g.positives;
    grads.q_tgt_neg = g.negatives;
    Ok(TermOutput { value, grads })
}

/// Target-language query → English passages. This is the standard
/// cross-lingual InfoNCE baseline and also the non-reversed cross-lingual
/// term used by the reversal ablation.
pub fn baseline_infonce_forward(batch: &ContrastiveBatch) -> Result<TermOutput> {
    batch.validate()?;
    let (value, _, g) = info_nce(
        &batch.q_tgt_pos,
        &batch.p_en_pos,
        &batch.p_en_neg,
        batch.tau,
    )?;
    let mut grads = BatchGrads::zeros_like(batch);
    grads.q_tgt_pos = g.anchors;
    grads.p_en_pos = g.positives;
    grads.p_en_neg = g.negatives;
    Ok(TermOutput { value, grads })
}
