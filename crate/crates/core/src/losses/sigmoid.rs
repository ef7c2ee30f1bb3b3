use super::{BoundaryParams, PairLabelMatrix};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// `log(1 + eˣ)` without overflow for large `|x|`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function `1 / (1 + e⁻ˣ)`, the derivative of [`softplus`].
#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss of a single pair with similarity `r` and label sign `z` (+1 for a
/// positive pair, −1 for a negative one): `log(1 + exp(z(−t·r + b)))`.
#[inline]
pub fn pair_loss(r: f64, z: f64, params: &BoundaryParams) -> f64 {
    softplus(z * (-params.temperature() * r + params.b))
}

/// Sigmoid pair term with gradients w.r.t. every similarity entry and the
/// two boundary scalars.
#[derive(Clone, Debug)]
pub struct SigmoidTerm {
    pub value: f64,
    pub grad_r: Matrix,
    pub grad_t_log: f64,
    pub grad_b: f64,
    pub pairs_evaluated: usize,
}

/// Averages the pair loss over the batch with weight `1/B²`. With
/// `include_diagonal == false` the self-pairs are skipped but the weight is
/// unchanged.
pub fn sigmoid_pair_loss(
    r: &Matrix,
    zmat: &PairLabelMatrix,
    params: &BoundaryParams,
    include_diagonal: bool,
) -> Result<SigmoidTerm> {
    let n = r.rows();
    if r.cols() != n || zmat.len() != n {
        return Err(Error::shape(
            "sigmoid_pair_loss",
            format!("similarity {:?}, pair labels {}x{}", r.shape(), zmat.len(), zmat.len()),
        ));
    }
    if !r.is_finite() {
        return Err(Error::Input("non-finite similarity".into()));
    }
    let t = params.temperature();
    let weight = 1.0 / (n * n) as f64;

    let mut value = 0.0;
    let mut grad_t_log = 0.0;
    let mut grad_b = 0.0;
    let mut pairs = 0;
    let mut grad_r = Matrix::zeros(n, n);
    for u in 0..n {
        for v in 0..n {
            if u == v && !include_diagonal {
                continue;
            }
            let z = zmat.sign(u, v);
            let ruv = r.get(u, v);
            let x = z * (-t * ruv + params.b);
            value += softplus(x);
            let s = logistic(x) * z * weight;
            grad_r.set(u, v, -t * s);
            grad_t_log += -t * ruv * s;
            grad_b += s;
            pairs += 1;
        }
    }
    Ok(SigmoidTerm {
        value: value * weight,
        grad_r,
        grad_t_log,
        grad_b,
        pairs_evaluated: pairs,
    })
}
