use crate::error::{Error, Result};
use crate::math::{norm, Matrix};

/// Below this distance a pair contributes no gradient (subgradient 0 of the
/// Euclidean norm at the origin).
const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct StyleTerm {
    pub value: f64,
    pub grad_s: Matrix,
}

/// For each row, the other rows sharing its label.
pub fn positive_sets(labels: &[usize]) -> Vec<Vec<usize>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &li)| {
            labels
                .iter()
                .enumerate()
                .filter(|&(p, &lp)| p != i && lp == li)
                .map(|(p, _)| p)
                .collect()
        })
        .collect()
}

/// `−(β/B) Σᵢ (1/|P(i)|) Σ_{p∈P(i)} ‖sᵢ − s_p‖`. Anchors without positives
/// contribute nothing.
pub fn style_distance_penalty(s: &Matrix, labels: &[usize], beta: f64) -> Result<StyleTerm> {
    let n = s.rows();
    if labels.len() != n {
        return Err(Error::shape(
            "style_distance_penalty",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut grad_s = Matrix::zeros(n, s.cols());
    if beta == 0.0 || n == 0 {
        return Ok(StyleTerm { value: 0.0, grad_s });
    }
    let positives = positive_sets(labels);
    let mut diff = vec![0.0; s.cols()];
    let mut total = 0.0;
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        let coef = -beta / (n as f64 * pos.len() as f64);
        let mut anchor_sum = 0.0;
        for &p in pos {
            for ((d, a), b) in diff.iter_mut().zip(s.row(i)).zip(s.row(p)) {
                *d = a - b;
            }
            let dist = norm(&diff);
            anchor_sum += dist;
            if dist < DIST_EPS {
                continue;
            }
            let scale = coef / dist;
            for (g, d) in grad_s.row_mut(i).iter_mut().zip(&diff) {
                *g += scale * d;
            }
            for (g, d) in grad_s.row_mut(p).iter_mut().zip(&diff) {
                *g -= scale * d;
            }
        }
        total += anchor_sum / pos.len() as f64;
    }
    Ok(StyleTerm {
        value: -beta * total / n as f64,
        grad_s,
    })
}

/// Mean Euclidean distance over all pairs of distinct rows sharing a label.
/// Returns 0 when no such pair exists.
pub fn mean_intra_class_distance(s: &Matrix, labels: &[usize]) -> f64 {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut diff = vec![0.0; s.cols()];
    let mut start = 0;
    while start < order.len() {
        let label = labels[order[start]];
        let mut end = start;
        while end < order.len() && labels[order[end]] == label {
            end += 1;
        }
        let group = &order[start..end];
        for (a, &i) in group.iter().enumerate() {
            for &p in &group[a + 1..] {
                for ((d, x), y) in diff.iter_mut().zip(s.row(i)).zip(s.row(p)) {
                    *d = x - y;
                }
                sum += norm(&diff);
                count += 1;
            }
        }
        start = end;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
