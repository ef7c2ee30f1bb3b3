use super::LossOutput;
use crate::error::{Error, Result};
use crate::math::Matrix;

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// `grad_z` holds the gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if n == 0 || classes == 0 {
        return Err(Error::param("logits", "must be non-empty"));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, classes);
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Index {
                row: r,
                label,
                classes,
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &x in row {
            sum += (x - max).exp();
        }
        let lse = max + sum.ln();
        value += lse - row[label];
        let g = grad.row_mut(r);
        for (gk, &x) in g.iter_mut().zip(row) {
            *gk = (x - lse).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok(LossOutput {
        value: value * inv_n,
        grad_z: grad,
        grad_t_log: 0.0,
        grad_b: 0.0,
        sigmoid_pairs: 0,
    })
}
