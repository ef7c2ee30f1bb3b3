//! Contrastive losses over partitioned embeddings, with exact gradients.
//!
//! An embedding row `z = [c; s]` is split into a common field `c` (the first
//! `d_common` columns) and a style field `s` (the remaining `d_style`
//! columns). Unless a batch is marked as pre-normalized, each field is
//! L2-normalized on its own before any loss term is evaluated, and the
//! returned `grad_z` is taken with respect to the raw rows.

mod cross_entropy;
mod gradcheck;
mod infonce;
pub mod reference;
mod sigmoid;
mod style;

use serde::{Deserialize, Serialize};

pub use cross_entropy::cross_entropy;
pub use gradcheck::{
    finite_difference_check, max_relative_error, numeric_gradient, relative_error,
    GradCheckReport,
};
pub use reference::{compare_with_reference, reference_gradient_check};
pub use infonce::{cs_supcon_loss, cs_supcon_loss_with_policy, supcon_loss, NoPositivePolicy};
pub use sigmoid::{pair_loss, sigmoid_pair_loss, SigmoidTerm};
pub use style::{mean_intra_class_distance, positive_sets, style_distance_penalty, StyleTerm};

use crate::error::{Error, Result};
use crate::math::{l2_normalize_rows, l2_normalize_rows_backward, Matrix, NormalizedRows, NORM_EPS};

/// Widths of the common and style fields of an embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldPartition {
    pub d_common: usize,
    pub d_style: usize,
}

impl FieldPartition {
    /// 192 common + 64 style dimensions, the split used for image backbones.
    pub const IMAGE_DEFAULT: FieldPartition = FieldPartition {
        d_common: 192,
        d_style: 64,
    };

    pub fn new(d_common: usize, d_style: usize) -> Result<Self> {
        let p = Self { d_common, d_style };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_common == 0 {
            return Err(Error::param("d_common", "must be at least 1"));
        }
        Ok(())
    }

    /// Total embedding width `D_p`.
    #[inline]
    pub fn width(&self) -> usize {
        self.d_common + self.d_style
    }
}

impl Default for FieldPartition {
    fn default() -> Self {
        Self::IMAGE_DEFAULT
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldNormalization {
    /// Common and style sub-rows are normalized separately.
    #[default]
    PerField,
    /// Rows are used as given (e.g. already normalized by the model).
    None,
}

/// A batch of embeddings with per-row class labels.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub z: Matrix,
    pub labels: Vec<usize>,
    pub partition: FieldPartition,
    pub normalization: FieldNormalization,
}

impl EmbeddingBatch {
    pub fn new(z: Matrix, labels: Vec<usize>, partition: FieldPartition) -> Result<Self> {
        partition.validate()?;
        if z.rows() < 2 {
            return Err(Error::BatchTooSmall(z.rows()));
        }
        if labels.len() != z.rows() {
            return Err(Error::shape(
                "EmbeddingBatch::new",
                format!("{} labels for {} rows", labels.len(), z.rows()),
            ));
        }
        if z.cols() != partition.width() {
            return Err(Error::shape(
                "EmbeddingBatch::new",
                format!("{} columns, partition width {}", z.cols(), partition.width()),
            ));
        }
        Ok(Self {
            z,
            labels,
            partition,
            normalization: FieldNormalization::PerField,
        })
    }

    pub fn with_normalization(mut self, normalization: FieldNormalization) -> Self {
        self.normalization = normalization;
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn common(&self) -> Matrix {
        self.z.column_block(0, self.partition.d_common)
    }

    pub fn style(&self) -> Matrix {
        self.z.column_block(self.partition.d_common, self.partition.width())
    }
}

/// `z_uv = +1` when rows `u` and `v` share a label, `-1` otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLabelMatrix {
    n: usize,
    signs: Vec<i8>,
}

impl PairLabelMatrix {
    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn sign(&self, u: usize, v: usize) -> f64 {
        f64::from(self.signs[u * self.n + v])
    }

    pub fn is_positive(&self, u: usize, v: usize) -> bool {
        self.signs[u * self.n + v] > 0
    }
}

pub fn build_pair_labels(labels: &[usize]) -> Result<PairLabelMatrix> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let mut signs = Vec::with_capacity(n * n);
    for &lu in labels {
        for &lv in labels {
            signs.push(if lu == lv { 1 } else { -1 });
        }
    }
    Ok(PairLabelMatrix { n, signs })
}

/// Learnable decision-boundary scalars. The temperature is `t = exp(t_log)`,
/// so it stays positive whatever value `t_log` takes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryParams {
    pub t_log: f64,
    pub b: f64,
}

impl BoundaryParams {
    /// Initial temperature 0.1 and zero bias.
    pub const DEFAULT_T0: f64 = 0.1;
    pub const DEFAULT_B0: f64 = 0.0;

    pub fn from_temperature(t0: f64, b0: f64) -> Result<Self> {
        if !(t0 > 0.0) || !t0.is_finite() {
            return Err(Error::param("t0", format!("temperature must be positive, got {t0}")));
        }
        if !b0.is_finite() {
            return Err(Error::param("b0", "must be finite"));
        }
        Ok(Self {
            t_log: t0.ln(),
            b: b0,
        })
    }

    #[inline]
    pub fn temperature(&self) -> f64 {
        self.t_log.exp()
    }

    /// Similarity at which a positive and a negative pair incur equal loss.
    pub fn boundary(&self) -> f64 {
        self.b / self.temperature()
    }
}

impl Default for BoundaryParams {
    fn default() -> Self {
        Self {
            t_log: Self::DEFAULT_T0.ln(),
            b: Self::DEFAULT_B0,
        }
    }
}


/// Loss value with gradients w.r.t. the embedding rows and the boundary
/// scalars. Losses that do not use the boundary leave its gradients at zero.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad_z: Matrix,
    pub grad_t_log: f64,
    pub grad_b: f64,
    /// Pairs touched by the sigmoid term (zero for other losses).
    pub sigmoid_pairs: usize,
}

impl LossOutput {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_z.is_finite()
            && self.grad_t_log.is_finite()
            && self.grad_b.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarHypers {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Weight of the style InfoNCE term in CS-SupCon.
    pub alpha: f64,
    /// Weight of the style-distance penalty.
    pub beta: f64,
}

impl ScalarHypers {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::param("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::param("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::param("beta", format!("must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

impl Default for ScalarHypers {
    fn default() -> Self {
        Self {
            tau: 0.1,
            alpha: 0.1,
            beta: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Supcon,
    CsSupcon,
    ScsSupcon,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Supcon, LossKind::CsSupcon, LossKind::ScsSupcon];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Supcon => "supcon",
            LossKind::CsSupcon => "cs_supcon",
            LossKind::ScsSupcon => "scs_supcon",
        }
    }

    /// Whether the loss reads the learnable boundary scalars.
    pub fn uses_boundary(&self) -> bool {
        matches!(self, LossKind::ScsSupcon)
    }

    /// Whether the embedding keeps a separate style field. SupCon treats
    /// the whole embedding as common.
    pub fn uses_style_field(&self) -> bool {
        !matches!(self, LossKind::Supcon)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::param(
                    "loss_kind",
                    format!("unknown loss `{s}`; expected one of supcon, cs_supcon, scs_supcon"),
                )
            })
    }
}

/// Evaluates the loss selected by `kind` on `batch`.
pub fn evaluate(
    kind: LossKind,
    batch: &EmbeddingBatch,
    params: &BoundaryParams,
    hypers: &ScalarHypers,
    include_diagonal: bool,
) -> Result<LossOutput> {
    match kind {
        LossKind::Supcon => {
            let whole = FieldPartition::new(batch.partition.width(), 0)?;
            let b = EmbeddingBatch {
                z: batch.z.clone(),
                labels: batch.labels.clone(),
                partition: whole,
                normalization: batch.normalization,
            };
            cs_supcon_loss(
                &b,
                &ScalarHypers {
                    alpha: 0.0,
                    beta: 0.0,
                    ..*hypers
                },
            )
        }
        LossKind::CsSupcon => cs_supcon_loss(batch, hypers),
        LossKind::ScsSupcon => scs_supcon_loss(batch, params, hypers, include_diagonal),
    }
}

/// SCS-SupCon: the sigmoid pair loss over common-field similarities plus the
/// style-distance penalty.
pub fn scs_supcon_loss(
    batch: &EmbeddingBatch,
    params: &BoundaryParams,
    hypers: &ScalarHypers,
    include_diagonal: bool,
) -> Result<LossOutput> {
    hypers.validate()?;
    let fields = PreparedFields::new(batch);
    let zmat = build_pair_labels(&batch.labels)?;

    let r = fields.common.matmul_transposed(&fields.common)?;
    let sig = sigmoid_pair_loss(&r, &zmat, params, include_diagonal)?;

    // dL/dC = (G + Gᵀ)·C for R = C·Cᵀ.
    let n = r.rows();
    let mut g_sym = Matrix::zeros(n, n);
    for u in 0..n {
        for v in 0..n {
            g_sym.set(u, v, sig.grad_r.get(u, v) + sig.grad_r.get(v, u));
        }
    }
    let grad_common = g_sym.matmul(&fields.common)?;

    let mut value = sig.value;
    let grad_style = if hypers.beta != 0.0 && batch.partition.d_style > 0 {
        let st = style_distance_penalty(&fields.style, &batch.labels, hypers.beta)?;
        value += st.value;
        Some(st.grad_s)
    } else {
        None
    };

    Ok(LossOutput {
        value,
        grad_z: fields.backward(&grad_common, grad_style.as_ref()),
        grad_t_log: sig.grad_t_log,
        grad_b: sig.grad_b,
        sigmoid_pairs: sig.pairs_evaluated,
    })
}

/// Common and style fields ready for loss evaluation, with enough state to
/// map field gradients back onto the raw rows.
pub(crate) struct PreparedFields {
    pub common: Matrix,
    pub style: Matrix,
    partition: FieldPartition,
    norms: Option<(NormalizedRows, NormalizedRows)>,
}

impl PreparedFields {
    pub fn new(batch: &EmbeddingBatch) -> Self {
        let common = batch.common();
        let style = batch.style();
        match batch.normalization {
            FieldNormalization::None => Self {
                common,
                style,
                partition: batch.partition,
                norms: None,
            },
            FieldNormalization::PerField => {
                let nc = l2_normalize_rows(&common, NORM_EPS);
                let ns = l2_normalize_rows(&style, NORM_EPS);
                if nc.any_degenerate() {
                    log::debug!("degenerate common rows left unnormalized");
                }
                Self {
                    common: nc.matrix.clone(),
                    style: ns.matrix.clone(),
                    partition: batch.partition,
                    norms: Some((nc, ns)),
                }
            }
        }
    }

    pub fn backward(&self, grad_common: &Matrix, grad_style: Option<&Matrix>) -> Matrix {
        let rows = grad_common.rows();
        let mut out = Matrix::zeros(rows, self.partition.width());
        let (gc, gs) = match &self.norms {
            Some((nc, ns)) => (
                l2_normalize_rows_backward(nc, grad_common),
                grad_style.map(|g| l2_normalize_rows_backward(ns, g)),
            ),
            None => (grad_common.clone(), grad_style.cloned()),
        };
        out.set_column_block(0, &gc);
        if let Some(gs) = gs {
            out.set_column_block(self.partition.d_common, &gs);
        }
        out
    }
}
