//! MLP encoder, two-layer projection head, field split and the learnable
//! boundary scalars.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::reference::{dd, reference_gradient, reference_loss, Dd, ReferenceSetup};
use crate::losses::{evaluate, max_relative_error, relative_error, BoundaryParams};
use crate::losses::{EmbeddingBatch, FieldNormalization, FieldPartition, GradCheckReport};
use crate::losses::{LossKind, LossOutput, ScalarHypers};
use crate::math::{l2_normalize_rows, l2_normalize_rows_backward, Matrix, NormalizedRows};
use crate::math::{SeededRng, NORM_EPS};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn passes(self, pre: f64) -> bool {
        match self {
            Activation::Relu => pre > 0.0,
            Activation::Identity => true,
        }
    }
}

/// Fully connected layer computing `x·W + bias` with `W` stored in×out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// Stack of dense layers. `hidden` is applied between layers, `output`
/// after the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(DenseLayer::outputs));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::param("layers", "network needs at least one layer"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    "mlp",
                    format!(
                        "layer {i} emits {} features but layer {} takes {}",
                        pair[0].outputs(),
                        i + 1,
                        pair[1].inputs()
                    ),
                ));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {i} bias has {} entries for {} outputs", l.bias.len(), l.outputs()),
                ));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::param("layers", format!("layer {i} has non-finite weights")));
            }
        }
        Ok(())
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Returns the output and the per-layer (input, pre-activation) pairs.
    fn forward(&self, x: &Matrix) -> Result<(Matrix, Vec<(Matrix, Matrix)>)> {
        let mut cur = x.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&cur)?;
            let act = self.activation(i);
            let mut out = pre.clone();
            for v in out.data_mut() {
                *v = act.apply(*v);
            }
            trace.push((cur, pre));
            cur = out;
        }
        Ok((cur, trace))
    }

    /// Backpropagates `grad_out`; returns parameter gradients (same layout
    /// as `self`) and the gradient w.r.t. the input.
    fn backward(&self, trace: &[(Matrix, Matrix)], grad_out: &Matrix) -> Result<(MlpParams, Matrix)> {
        let mut grads: Vec<DenseLayer> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (input, pre) = &trace[i];
            let act = self.activation(i);
            for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                if !act.passes(p) {
                    *gv = 0.0;
                }
            }
            let weight = input.transposed_matmul(&g)?;
            let mut bias = vec![0.0; layer.outputs()];
            for r in 0..g.rows() {
                for (b, v) in bias.iter_mut().zip(g.row(r)) {
                    *b += v;
                }
            }
            let next = g.matmul_transposed(&layer.weight)?;
            grads.push(DenseLayer { weight, bias });
            g = next;
        }
        grads.reverse();
        Ok((
            MlpParams {
                layers: grads,
                hidden: self.hidden,
                output: self.output,
            },
            g,
        ))
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
    }

    fn unflatten_from(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&src[at..at + n]);
            at += n;
            let m = l.bias.len();
            l.bias.copy_from_slice(&src[at..at + m]);
            at += m;
        }
        at
    }

    fn init(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut SeededRng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                let mut layer = DenseLayer::zeros(w[0], w[1]);
                for v in layer.weight.data_mut() {
                    *v = scale * rng.gaussian();
                }
                layer
            })
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }
}

/// Architecture of the trainable stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSizes {
    pub input_dim: usize,
    /// Widths of the encoder layers; the last entry is the feature width.
    pub encoder: Vec<usize>,
    /// Hidden width of the projection head; `None` uses the embedding width.
    #[serde(default)]
    pub projection_hidden: Option<usize>,
    pub partition: FieldPartition,
}

impl ModelSizes {
    pub fn new(input_dim: usize, partition: FieldPartition) -> Self {
        Self {
            input_dim,
            encoder: vec![64, 64],
            projection_hidden: None,
            partition,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.input_dim == 0 {
            return Err(Error::param("input_dim", "must be positive"));
        }
        if self.encoder.is_empty() || self.encoder.contains(&0) {
            return Err(Error::param("encoder", "needs at least one layer, all widths positive"));
        }
        if self.projection_hidden == Some(0) {
            return Err(Error::param("projection_hidden", "must be positive"));
        }
        Ok(())
    }
}

/// Encoder, projection head, boundary scalars and field partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub encoder: MlpParams,
    pub projection: MlpParams,
    pub boundary: BoundaryParams,
    pub partition: FieldPartition,
    /// Seed the state was initialized from.
    pub seed: u64,
}

/// Builds a fresh model. Weights are `N(0, 1)/sqrt(fan_in)`, biases zero,
/// `t_log = ln t0`, `b = b0`.
pub fn init_model(sizes: &ModelSizes, seed: u64, t0: f64, b0: f64) -> Result<ModelState> {
    sizes.validate()?;
    let boundary = BoundaryParams::from_temperature(t0, b0)?;
    let mut rng = SeededRng::new(seed);
    let mut enc = vec![sizes.input_dim];
    enc.extend(&sizes.encoder);
    let feat = *enc.last().expect("encoder has layers");
    let width = sizes.partition.width();
    let proj = [feat, sizes.projection_hidden.unwrap_or(width), width];
    Ok(ModelState {
        encoder: MlpParams::init(&enc, Activation::Relu, Activation::Relu, &mut rng),
        projection: MlpParams::init(&proj, Activation::Relu, Activation::Identity, &mut rng),
        boundary,
        partition: sizes.partition,
        seed,
    })
}

/// Activations kept from `forward` for `backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    encoder: Vec<(Matrix, Matrix)>,
    projection: Vec<(Matrix, Matrix)>,
    raw: Matrix,
    common: NormalizedRows,
    style: NormalizedRows,
}

impl ForwardCache {
    /// Projection output before field normalization.
    pub fn raw_embedding(&self) -> &Matrix {
        &self.raw
    }

    /// True when any common or style sub-row was too small to normalize.
    pub fn any_degenerate(&self) -> bool {
        self.common.any_degenerate() || (self.style.matrix.cols() > 0 && self.style.any_degenerate())
    }

    /// Smallest distance of any ReLU pre-activation from its kink.
    pub fn relu_margin(&self) -> f64 {
        let hidden = self.projection.len().saturating_sub(1);
        self.encoder
            .iter()
            .chain(&self.projection[..hidden])
            .flat_map(|(_, pre)| pre.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Gradients for every trainable quantity, laid out like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub encoder: MlpParams,
    pub projection: MlpParams,
    pub t_log: f64,
    pub b: f64,
}

impl ModelGrads {
    /// Same ordering as [`ModelState::network_params`].
    pub fn network_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.encoder.flatten_into(&mut out);
        self.projection.flatten_into(&mut out);
        out
    }
}

impl ModelState {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projection.validate()?;
        self.partition.validate()?;
        if self.encoder.output_dim() != self.projection.input_dim() {
            return Err(Error::shape(
                "model",
                format!(
                    "encoder emits {} features, projection takes {}",
                    self.encoder.output_dim(),
                    self.projection.input_dim()
                ),
            ));
        }
        if self.projection.output_dim() != self.partition.width() {
            return Err(Error::shape(
                "model",
                format!(
                    "projection emits {} columns, partition needs {}",
                    self.projection.output_dim(),
                    self.partition.width()
                ),
            ));
        }
        if !self.boundary.t_log.is_finite() || !self.boundary.b.is_finite() {
            return Err(Error::param("boundary", "t_log and b must be finite"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Encoder and projection weights flattened layer by layer.
    pub fn network_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.encoder.param_count() + self.projection.param_count());
        self.encoder.flatten_into(&mut out);
        self.projection.flatten_into(&mut out);
        out
    }

    pub fn set_network_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.encoder.param_count() + self.projection.param_count();
        if flat.len() != n {
            return Err(Error::shape(
                "set_network_params",
                format!("{} values for {n} parameters", flat.len()),
            ));
        }
        let used = self.encoder.unflatten_from(flat);
        self.projection.unflatten_from(&flat[used..]);
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter. Equal states give
    /// equal fingerprints; any bit change almost surely changes it.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for v in self.network_params() {
            eat(v);
        }
        eat(self.boundary.t_log);
        eat(self.boundary.b);
        eat(self.partition.d_common as f64);
        eat(self.partition.d_style as f64);
        h
    }

    /// Encoder, projection, field split and per-field normalization. The
    /// returned matrix holds the unit-norm common and style sub-rows side by
    /// side.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("input has {} columns, model takes {}", x.cols(), self.input_dim()),
            ));
        }
        let (feat, enc_trace) = self.encoder.forward(x)?;
        let (raw, proj_trace) = self.projection.forward(&feat)?;
        let dc = self.partition.d_common;
        let width = self.partition.width();
        let common = l2_normalize_rows(&raw.column_block(0, dc), NORM_EPS);
        let style = l2_normalize_rows(&raw.column_block(dc, width), NORM_EPS);
        let mut z = Matrix::zeros(raw.rows(), width);
        z.set_column_block(0, &common.matrix);
        z.set_column_block(dc, &style.matrix);
        Ok((
            z,
            ForwardCache {
                fingerprint: self.fingerprint(),
                encoder: enc_trace,
                projection: proj_trace,
                raw,
                common,
                style,
            },
        ))
    }

    /// Normalized embedding only.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Normalized common field only.
    pub fn common_features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.embed(x)?.column_block(0, self.partition.d_common))
    }

    /// Backpropagates a loss evaluated on the normalized embedding of
    /// `forward`.
    pub fn backward(&self, cache: &ForwardCache, loss: &LossOutput) -> Result<ModelGrads> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::StaleCache);
        }
        let dc = self.partition.d_common;
        let width = self.partition.width();
        if loss.grad_z.shape() != (cache.raw.rows(), width) {
            return Err(Error::shape(
                "backward",
                format!(
                    "embedding gradient is {:?}, expected {:?}",
                    loss.grad_z.shape(),
                    (cache.raw.rows(), width)
                ),
            ));
        }
        let gc = l2_normalize_rows_backward(&cache.common, &loss.grad_z.column_block(0, dc));
        let gs = l2_normalize_rows_backward(&cache.style, &loss.grad_z.column_block(dc, width));
        let mut g_raw = Matrix::zeros(cache.raw.rows(), width);
        g_raw.set_column_block(0, &gc);
        g_raw.set_column_block(dc, &gs);
        let (projection, g_feat) = self.projection.backward(&cache.projection, &g_raw)?;
        let (encoder, _) = self.encoder.backward(&cache.encoder, &g_feat)?;
        Ok(ModelGrads {
            encoder,
            projection,
            t_log: loss.grad_t_log,
            b: loss.grad_b,
        })
    }
}

/// Linear head over the common field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `D_c × C`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(d_common: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_common, classes),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `common·W + bias`.
    pub fn classify(&self, common: &Matrix) -> Result<Matrix> {
        if common.cols() != self.input_dim() {
            return Err(Error::shape(
                "classify",
                format!("features have {} columns, classifier takes {}", common.cols(), self.input_dim()),
            ));
        }
        let mut logits = common.matmul(&self.weight)?;
        for r in 0..logits.rows() {
            for (v, b) in logits.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(logits)
    }

    /// Classifies full embeddings by reading their leading common columns
    /// only.
    pub fn classify_embedding(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() < self.input_dim() {
            return Err(Error::shape(
                "classify_embedding",
                format!("embedding has {} columns, need at least {}", z.cols(), self.input_dim()),
            ));
        }
        self.classify(&z.column_block(0, self.input_dim()))
    }

    pub fn predict(&self, common: &Matrix) -> Result<Vec<usize>> {
        let logits = self.classify(common)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Versioned on-disk form of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub state: ModelState,
    #[serde(default)]
    pub classifier: Option<LinearClassifier>,
}

impl Checkpoint {
    pub fn new(state: ModelState, classifier: Option<LinearClassifier>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            state,
            classifier,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::param(
                "version",
                format!("checkpoint version {} not supported (expected {CHECKPOINT_VERSION})", ck.version),
            ));
        }
        ck.state.validate()?;
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn dd_mlp(mlp: &MlpParams, flat: &[f64], x: &[Vec<Dd>]) -> (Vec<Vec<Dd>>, usize) {
    let mut at = 0;
    let mut cur: Vec<Vec<Dd>> = x.to_vec();
    for (li, layer) in mlp.layers.iter().enumerate() {
        let (n_in, n_out) = (layer.inputs(), layer.outputs());
        let w = &flat[at..at + n_in * n_out];
        at += n_in * n_out;
        let bias = &flat[at..at + n_out];
        at += n_out;
        let act = mlp.activation(li);
        cur = cur
            .iter()
            .map(|row| {
                (0..n_out)
                    .map(|o| {
                        let mut acc = dd(bias[o]);
                        for (i, v) in row.iter().enumerate() {
                            acc += *v * w[i * n_out + o];
                        }
                        match act {
                            Activation::Relu if acc.hi() <= 0.0 => dd(0.0),
                            _ => acc,
                        }
                    })
                    .collect()
            })
            .collect();
    }
    (cur, at)
}

/// Checks `backward` for the whole stack (every weight, `t_log` and `b`)
/// against central differences of a double-double forward pass and loss.
/// The `z` entry of the report covers the network weights.
pub fn stack_gradient_check(
    kind: LossKind,
    state: &ModelState,
    x: &Matrix,
    labels: &[usize],
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
    let (z, cache) = state.forward(x)?;
    let batch = EmbeddingBatch::new(z, labels.to_vec(), state.partition)?
        .with_normalization(FieldNormalization::None);
    let loss = evaluate(kind, &batch, &state.boundary, hypers, include_diagonal)?;
    let grads = state.backward(&cache, &loss)?;

    let setup = ReferenceSetup {
        kind,
        labels,
        partition: state.partition,
        normalization: FieldNormalization::PerField,
        hypers: *hypers,
        include_diagonal,
    };
    let xd: Vec<Vec<Dd>> = (0..x.rows())
        .map(|r| x.row(r).iter().map(|&v| dd(v)).collect())
        .collect();
    let eval = |p: &[f64]| {
        let (feat, used) = dd_mlp(&state.encoder, p, &xd);
        let (out, _) = dd_mlp(&state.projection, &p[used..], &feat);
        let flat: Vec<Dd> = out.into_iter().flatten().collect();
        reference_loss(&setup, &flat, dd(p[p.len() - 2]), dd(p[p.len() - 1]))
    };
    let mut p = state.network_params();
    p.push(state.boundary.t_log);
    p.push(state.boundary.b);
    let numeric = reference_gradient(eval, &mut p, h);
    let n = numeric.len();
    Ok(GradCheckReport {
        z: max_relative_error(&grads.network_flat(), &numeric[..n - 2]),
        t_log: relative_error(grads.t_log, numeric[n - 2]),
        b: relative_error(grads.b, numeric[n - 1]),
    })
}

#[cfg(test)]
mod tests;
