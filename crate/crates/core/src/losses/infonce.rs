//! Softmax-normalized supervised contrastive losses (SupCon, CS-SupCon).

use super::style::{positive_sets, style_distance_penalty};
use super::{EmbeddingBatch, FieldPartition, LossOutput, PreparedFields, ScalarHypers};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// What to do with an anchor whose label appears nowhere else in the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoPositivePolicy {
    /// The anchor contributes nothing; a warning is logged.
    #[default]
    Skip,
    Error,
}

/// Supervised InfoNCE over the rows of `feat`:
/// `(1/B) Σᵢ (1/|P(i)|) Σ_p −log( exp(fᵢ·f_p/τ) / Σ_{j≠i} exp(fᵢ·f_j/τ) )`.
/// Returns the value and the gradient w.r.t. `feat`.
fn supervised_infonce(
    feat: &Matrix,
    positives: &[Vec<usize>],
    tau: f64,
    policy: NoPositivePolicy,
) -> Result<(f64, Matrix)> {
    let n = feat.rows();
    let sims = feat.matmul_transposed(feat)?;
    let inv_b = 1.0 / n as f64;
    let mut value = 0.0;
    // Gradient w.r.t. the logits a_ij = fᵢ·f_j/τ (diagonal unused).
    let mut g = Matrix::zeros(n, n);
    let mut logits = vec![0.0; n];
    let mut skipped = 0;
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            match policy {
                NoPositivePolicy::Skip => {
                    skipped += 1;
                    continue;
                }
                NoPositivePolicy::Error => return Err(Error::NoPositive { anchor: i }),
            }
        }
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            logits[j] = sims.get(i, j) / tau;
            if j != i && logits[j] > max {
                max = logits[j];
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (logits[j] - max).exp();
            }
        }
        let lse = max + denom.ln();
        let inv_p = 1.0 / pos.len() as f64;
        let mut anchor = 0.0;
        for &p in pos {
            anchor += lse - logits[p];
        }
        value += anchor * inv_p;
        for j in 0..n {
            if j != i {
                g.set(i, j, inv_b * (logits[j] - lse).exp());
            }
        }
        for &p in pos {
            let cur = g.get(i, p);
            g.set(i, p, cur - inv_b * inv_p);
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} anchor(s) without positives skipped");
    }
    // a = F·Fᵀ/τ ⇒ dL/dF = (G + Gᵀ)·F/τ.
    let mut g_sym = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g_sym.set(i, j, (g.get(i, j) + g.get(j, i)) / tau);
        }
    }
    let grad = g_sym.matmul(feat)?;
    Ok((value * inv_b, grad))
}

/// CS-SupCon with the default no-positive policy (skip).
pub fn cs_supcon_loss(batch: &EmbeddingBatch, hypers: &ScalarHypers) -> Result<LossOutput> {
    cs_supcon_loss_with_policy(batch, hypers, NoPositivePolicy::Skip)
}

/// InfoNCE on the common field, minus `α` times InfoNCE on the style field,
/// plus the style-distance penalty. All three terms are averaged over the
/// batch rows.
pub fn cs_supcon_loss_with_policy(
    batch: &EmbeddingBatch,
    hypers: &ScalarHypers,
    policy: NoPositivePolicy,
) -> Result<LossOutput> {
    hypers.validate()?;
    let fields = PreparedFields::new(batch);
    let positives = positive_sets(&batch.labels);

    let (mut value, grad_common) =
        supervised_infonce(&fields.common, &positives, hypers.tau, policy)?;

    let mut grad_style: Option<Matrix> = None;
    if batch.partition.d_style > 0 {
        if hypers.alpha != 0.0 {
            let (v, mut g) = supervised_infonce(&fields.style, &positives, hypers.tau, policy)?;
            value -= hypers.alpha * v;
            for x in g.data_mut() {
                *x *= -hypers.alpha;
            }
            grad_style = Some(g);
        }
        if hypers.beta != 0.0 {
            let st = style_distance_penalty(&fields.style, &batch.labels, hypers.beta)?;
            value += st.value;
            grad_style = Some(match grad_style {
                Some(mut g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(st.grad_s.data()) {
                        *a += b;
                    }
                    g
                }
                None => st.grad_s,
            });
        }
    }

    Ok(LossOutput {
        value,
        grad_z: fields.backward(&grad_common, grad_style.as_ref()),
        grad_t_log: 0.0,
        grad_b: 0.0,
        sigmoid_pairs: 0,
    })
}

/// Classical supervised contrastive loss over whole rows (no style field).
pub fn supcon_loss(z: &Matrix, labels: &[usize], tau: f64) -> Result<LossOutput> {
    let partition = FieldPartition::new(z.cols(), 0)?;
    let batch = EmbeddingBatch::new(z.clone(), labels.to_vec(), partition)?;
    cs_supcon_loss(
        &batch,
        &ScalarHypers {
            tau,
            alpha: 0.0,
            beta: 0.0,
        },
    )
}
