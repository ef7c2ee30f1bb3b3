//! Randomized gradient-check instances for the loss family and the full
//! encoder + projection stack.

use crate::error::Result;
use crate::losses::{
    compare_with_reference, evaluate, BoundaryParams, EmbeddingBatch, FieldPartition, GradCheckReport, LossKind,
    LossOutput, ScalarHypers,
};
use crate::math::{Matrix, SeededRng};
use crate::model::{init_model, stack_gradient_check, ModelSizes, ModelState};

pub const BATCH_SIZES: [usize; 3] = [4, 8, 16];
pub const WIDTHS: [usize; 2] = [8, 16];

/// Batch size and projection width of instance `index`; cycles through
/// every combination.
pub fn instance_shape(index: usize) -> (usize, usize) {
    (BATCH_SIZES[index % 3], WIDTHS[(index / 3) % 2])
}

/// SupCon sees the whole projection; the others split it 3:1.
pub fn partition_for(kind: LossKind, width: usize) -> FieldPartition {
    match kind {
        LossKind::Supcon => FieldPartition {
            d_common: width,
            d_style: 0,
        },
        _ => FieldPartition {
            d_common: width - width / 4,
            d_style: width / 4,
        },
    }
}

#[derive(Clone, Debug)]
pub struct LossCase {
    pub kind: LossKind,
    pub batch: EmbeddingBatch,
    pub params: BoundaryParams,
    pub hypers: ScalarHypers,
    pub include_diagonal: bool,
}

impl LossCase {
    pub fn analytic(&self) -> Result<LossOutput> {
        evaluate(self.kind, &self.batch, &self.params, &self.hypers, self.include_diagonal)
    }

    pub fn check(&self, analytic: &LossOutput, h: f64) -> Result<GradCheckReport> {
        compare_with_reference(
            analytic,
            self.kind,
            &self.batch,
            &self.params,
            &self.hypers,
            self.include_diagonal,
            h,
        )
    }
}

/// Labels with between 2 and `rows/2` classes, every class holding at least
/// two rows, in shuffled order.
fn random_labels(rng: &mut SeededRng, rows: usize) -> Vec<usize> {
    let classes = 2 + rng.index(rows / 2 - 1);
    let mut labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    labels
}

fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Matrix::new(rows, cols, data).expect("sizes agree")
}

fn random_hypers(rng: &mut SeededRng) -> Result<ScalarHypers> {
    Ok(ScalarHypers {
        tau: rng.uniform(0.1, 0.5)?,
        alpha: rng.uniform(0.0, 0.5)?,
        beta: rng.uniform(0.0, 0.1)?,
    })
}

pub fn loss_case(kind: LossKind, seed: u64, index: usize) -> Result<LossCase> {
    let (rows, width) = instance_shape(index);
    let mut rng = SeededRng::new(SeededRng::derive_seed(seed, index as u64));
    let labels = random_labels(&mut rng, rows);
    let z = gaussian_matrix(&mut rng, rows, width);
    let t = rng.uniform(0.05f64.ln(), 5.0f64.ln())?.exp();
    let params = BoundaryParams::from_temperature(t, rng.uniform(-1.0, 1.0)?)?;
    let hypers = random_hypers(&mut rng)?;
    let include_diagonal = rng.index(2) == 0;
    Ok(LossCase {
        kind,
        batch: EmbeddingBatch::new(z, labels, partition_for(kind, width))?,
        params,
        hypers,
        include_diagonal,
    })
}

/// Checks the analytic loss gradients of instance `index` against the
/// double-double reference.
pub fn loss_check(kind: LossKind, seed: u64, index: usize, h: f64) -> Result<GradCheckReport> {
    let case = loss_case(kind, seed, index)?;
    case.check(&case.analytic()?, h)
}

const KINK_MARGIN: f64 = 1e-4;
const MIN_FIELD_NORM: f64 = 0.1;

fn smooth_at(state: &ModelState, x: &Matrix, labels: &[usize]) -> Result<bool> {
    let (z, cache) = state.forward(x)?;
    if cache.relu_margin() <= KINK_MARGIN {
        return Ok(false);
    }
    let raw = cache.raw_embedding();
    let d_common = state.partition.d_common;
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for r in 0..raw.rows() {
        let (common, style) = raw.row(r).split_at(d_common);
        if norm(common) <= MIN_FIELD_NORM || (!style.is_empty() && norm(style) <= MIN_FIELD_NORM) {
            return Ok(false);
        }
    }
    // The style distance is not differentiable where two positives coincide.
    if d_common < z.cols() {
        for i in 0..z.rows() {
            for p in i + 1..z.rows() {
                if labels[i] != labels[p] {
                    continue;
                }
                let d: Vec<f64> = z.row(i)[d_common..].iter().zip(&z.row(p)[d_common..]).map(|(a, b)| a - b).collect();
                if norm(&d) <= MIN_FIELD_NORM {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Same as [`loss_check`] for the whole network: a small MLP encoder and
/// projection head with a random input batch. The report's `z` entry
/// covers every network weight and bias.
pub fn stack_check(kind: LossKind, seed: u64, index: usize, h: f64) -> Result<GradCheckReport> {
    let (rows, width) = instance_shape(index);
    let mut rng = SeededRng::new(SeededRng::derive_seed(seed ^ 0x5eed, index as u64));
    let sizes = ModelSizes {
        input_dim: 5,
        encoder: vec![8, 6],
        projection_hidden: Some(7),
        partition: partition_for(kind, width),
    };
    let t0 = rng.uniform(0.05f64.ln(), 0.2f64.ln())?.exp();
    let b0 = rng.uniform(-0.2, 0.2)?;
    let labels = random_labels(&mut rng, rows);
    // Central differences are unreliable across a ReLU kink and near a field
    // that embeds close to zero. Redraw weights and inputs until neither is
    // near.
    let init_seed = SeededRng::derive_seed(seed, 1_000 + index as u64);
    let mut state = init_model(&sizes, init_seed, t0, b0)?;
    let mut x = gaussian_matrix(&mut rng, rows, 5);
    for attempt in 1..=1_000 {
        if smooth_at(&state, &x, &labels)? {
            break;
        }
        state = init_model(&sizes, SeededRng::derive_seed(init_seed, attempt), t0, b0)?;
        x = gaussian_matrix(&mut rng, rows, 5);
    }
    let hypers = random_hypers(&mut rng)?;
    let include_diagonal = rng.index(2) == 0;
    stack_gradient_check(kind, &state, &x, &labels, &hypers, include_diagonal, h)
}
