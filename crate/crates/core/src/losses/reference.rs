//! Double-double reference evaluation of the contrastive losses.
//!
//! These are direct transcriptions of the loss definitions, written without
//! reference to the optimized f64 code paths. They exist to serve as a
//! finite-difference oracle: differencing a double-double evaluation at
//! `h = 1e-6` keeps roundoff around 1e-26, far below the size of the
//! smallest gradient entries that the f64 analytic gradients must match.

use std::sync::OnceLock;

use twofloat::TwoFloat;

use super::gradcheck::{max_relative_error, relative_error, GradCheckReport};
use super::{evaluate, BoundaryParams, EmbeddingBatch, FieldNormalization, FieldPartition, LossOutput};
use super::{LossKind, ScalarHypers};
use crate::error::{Error, Result};

pub type Dd = TwoFloat;

#[inline]
pub fn dd(x: f64) -> Dd {
    Dd::from(x)
}

// twofloat's own division and exponential carry ~1e-10 relative error,
// enough to swamp a central difference at h = 1e-6. These are refined.

fn div(a: Dd, b: Dd) -> Dd {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    Dd::new_add(q1, q2) + q3
}

// |r| <= ln2 / 2048 below, so ten Taylor terms reach double-double
// precision.
const EXP_TERMS: usize = 10;

fn inverse_factorials() -> &'static [Dd; EXP_TERMS + 1] {
    static TABLE: OnceLock<[Dd; EXP_TERMS + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [dd(1.0); EXP_TERMS + 1];
        for n in 1..=EXP_TERMS {
            t[n] = div(t[n - 1], dd(n as f64));
        }
        t
    })
}

fn exp(x: Dd) -> Dd {
    if x.hi() < -700.0 {
        return dd(0.0);
    }
    let k = (x.hi() / std::f64::consts::LN_2).round();
    let r = (x - twofloat::consts::LN_2 * k) * (1.0 / 1024.0);
    let inv = inverse_factorials();
    // Horner form of sum r^n / n!.
    let mut sum = inv[EXP_TERMS];
    for n in (0..EXP_TERMS).rev() {
        sum = sum * r + inv[n];
    }
    for _ in 0..10 {
        sum = sum * sum;
    }
    sum * 2f64.powi(k as i32)
}

fn ln(x: Dd) -> Dd {
    let mut y = dd(x.hi().ln());
    for _ in 0..2 {
        y = y + x * exp(-y) - 1.0;
    }
    y
}

fn sqrt(a: Dd) -> Dd {
    if a.hi() <= 0.0 {
        return dd(0.0);
    }
    let s = dd(a.hi().sqrt());
    s + div(a - s * s, s * 2.0)
}

fn dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).fold(dd(0.0), |acc, (x, y)| acc + *x * *y)
}

fn normalized(v: &[Dd]) -> Vec<Dd> {
    let n = sqrt(dot(v, v));
    if n.hi() < crate::math::NORM_EPS {
        v.to_vec()
    } else {
        v.iter().map(|x| div(*x, n)).collect()
    }
}

fn softplus(x: Dd) -> Dd {
    if x.hi() > 0.0 {
        x + ln(exp(-x) + 1.0)
    } else {
        ln(exp(x) + 1.0)
    }
}

/// Loss inputs shared by every reference evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceSetup<'a> {
    pub kind: LossKind,
    pub labels: &'a [usize],
    pub partition: FieldPartition,
    pub normalization: FieldNormalization,
    pub hypers: ScalarHypers,
    pub include_diagonal: bool,
}

/// Evaluates the selected loss on row-major embeddings `z` in double-double
/// precision.
pub fn reference_loss(setup: &ReferenceSetup<'_>, z: &[Dd], t_log: Dd, b: Dd) -> Dd {
    let n = setup.labels.len();
    let width = setup.partition.width();
    assert_eq!(z.len(), n * width, "embedding size mismatch");
    let split = match setup.kind {
        LossKind::Supcon => width,
        _ => setup.partition.d_common,
    };
    let prep = |v: &[Dd]| match setup.normalization {
        FieldNormalization::PerField => normalized(v),
        FieldNormalization::None => v.to_vec(),
    };
    let common: Vec<Vec<Dd>> = (0..n).map(|i| prep(&z[i * width..i * width + split])).collect();
    let style: Vec<Vec<Dd>> = (0..n)
        .map(|i| prep(&z[i * width + split..(i + 1) * width]))
        .collect();
    let h = &setup.hypers;
    match setup.kind {
        LossKind::Supcon => infonce(&common, setup.labels, h.tau),
        LossKind::CsSupcon => {
            let mut v = infonce(&common, setup.labels, h.tau);
            if split < width {
                if h.alpha != 0.0 {
                    v -= dd(h.alpha) * infonce(&style, setup.labels, h.tau);
                }
                v += style_penalty(&style, setup.labels, h.beta);
            }
            v
        }
        LossKind::ScsSupcon => {
            let t = exp(t_log);
            let mut sum = dd(0.0);
            for u in 0..n {
                for v in 0..n {
                    if u == v && !setup.include_diagonal {
                        continue;
                    }
                    let r = dot(&common[u], &common[v]);
                    let x = -t * r + b;
                    sum += if setup.labels[u] == setup.labels[v] {
                        softplus(x)
                    } else {
                        softplus(-x)
                    };
                }
            }
            let mut v = div(sum, dd((n * n) as f64));
            if split < width {
                v += style_penalty(&style, setup.labels, h.beta);
            }
            v
        }
    }
}

fn infonce(feat: &[Vec<Dd>], labels: &[usize], tau: f64) -> Dd {
    let n = feat.len();
    let inv_tau = div(dd(1.0), dd(tau));
    let mut total = dd(0.0);
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let logits: Vec<Dd> = (0..n).map(|j| dot(&feat[i], &feat[j]) * inv_tau).collect();
        let max = (0..n)
            .filter(|&j| j != i)
            .map(|j| logits[j])
            .reduce(|m, x| if x > m { x } else { m })
            .expect("batch has at least two rows");
        let denom = (0..n)
            .filter(|&j| j != i)
            .fold(dd(0.0), |acc, j| acc + exp(logits[j] - max));
        let lse = max + ln(denom);
        let anchor = pos.iter().fold(dd(0.0), |acc, &p| acc + (lse - logits[p]));
        total += div(anchor, dd(pos.len() as f64));
    }
    div(total, dd(n as f64))
}

fn style_penalty(style: &[Vec<Dd>], labels: &[usize], beta: f64) -> Dd {
    if beta == 0.0 {
        return dd(0.0);
    }
    let n = style.len();
    let mut total = dd(0.0);
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let mut acc = dd(0.0);
        for &p in &pos {
            let d: Vec<Dd> = style[i].iter().zip(&style[p]).map(|(a, b)| *a - *b).collect();
            acc += sqrt(dot(&d, &d));
        }
        total += div(acc, dd(pos.len() as f64));
    }
    -dd(beta) * div(total, dd(n as f64))
}

/// Central difference of `f` around `x[i]` using the exact double-double
/// distance between the two perturbed points.
pub(crate) fn central_difference<F>(f: &mut F, x: &mut [f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> Dd,
{
    let orig = x[i];
    let (xp, xm) = (orig + h, orig - h);
    x[i] = xp;
    let plus = f(x);
    x[i] = xm;
    let minus = f(x);
    x[i] = orig;
    div(plus - minus, dd(xp) - dd(xm)).hi()
}

/// Gradient of `f` by central differences evaluated in double-double.
pub fn reference_gradient<F>(mut f: F, x: &mut [f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Dd,
{
    (0..x.len())
        .map(|i| central_difference(&mut f, x, i, h))
        .collect()
}

/// Checks the analytic gradients of `kind` against central differences of
/// the double-double reference. `h` must lie in `[1e-8, 1e-4]`.
pub fn reference_gradient_check(
    kind: LossKind,
    batch: &EmbeddingBatch,
    params: &BoundaryParams,
    hypers: &ScalarHypers,
    include_diagonal: bool,
    h: f64,
) -> Result<GradCheckReport> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::Range {
            name: "h",
            reason: format!("step {h} outside [1e-8, 1e-4]"),
        });
    }
    let analytic = evaluate(kind, batch, params, hypers, include_diagonal)?;
    compare_with_reference(&analytic, kind, batch, params, hypers, include_diagonal, h)
}

/// Compares an already computed `analytic` result with central differences
/// of the double-double reference.
pub fn compare_with_reference(
    analytic: &LossOutput,
    kind: LossKind,
    batch: &EmbeddingBatch,
    params: &BoundaryParams,
    hypers: &ScalarHypers,
    include_diagonal: bool,
    h: f64,
) -> Result<GradCheckReport> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::Range {
            name: "h",
            reason: format!("step {h} outside [1e-8, 1e-4]"),
        });
    }
    if analytic.grad_z.shape() != batch.z.shape() {
        return Err(Error::shape(
            "compare_with_reference",
            format!("gradient {:?} vs embeddings {:?}", analytic.grad_z.shape(), batch.z.shape()),
        ));
    }
    let setup = ReferenceSetup {
        kind,
        labels: &batch.labels,
        partition: batch.partition,
        normalization: batch.normalization,
        hypers: *hypers,
        include_diagonal,
    };
    let (t0, b0) = (dd(params.t_log), dd(params.b));
    let mut z = batch.z.data().to_vec();
    let numeric_z = reference_gradient(
        |x| {
            let zz: Vec<Dd> = x.iter().map(|&v| dd(v)).collect();
            reference_loss(&setup, &zz, t0, b0)
        },
        &mut z,
        h,
    );
    let zz: Vec<Dd> = batch.z.data().iter().map(|&v| dd(v)).collect();
    let mut scalars = [params.t_log, params.b];
    let numeric_s = reference_gradient(
        |x| reference_loss(&setup, &zz, dd(x[0]), dd(x[1])),
        &mut scalars,
        h,
    );
    Ok(GradCheckReport {
        z: max_relative_error(analytic.grad_z.data(), &numeric_z),
        t_log: relative_error(analytic.grad_t_log, numeric_s[0]),
        b: relative_error(analytic.grad_b, numeric_s[1]),
    })
}
