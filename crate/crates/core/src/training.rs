//! Two-stage training: contrastive pre-training of encoder and projection
//! head, then a linear classifier on the frozen common field.

use serde::{Deserialize, Serialize};

use crate::data::{augment, kfold_split, Dataset};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, evaluate, mean_intra_class_distance};
use crate::losses::{EmbeddingBatch, FieldNormalization, FieldPartition, LossKind, ScalarHypers};
use crate::math::{Matrix, SeededRng};
use crate::model::{argmax, init_model, LinearClassifier, ModelSizes, ModelState};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Stage-1 losses above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryInit {
    pub t0: f64,
    pub b0: f64,
}

impl Default for BoundaryInit {
    fn default() -> Self {
        Self { t0: 0.1, b0: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub encoder: Vec<usize>,
    #[serde(default)]
    pub projection_hidden: Option<usize>,
    pub partition: FieldPartition,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder: vec![64, 64],
            projection_hidden: None,
            partition: FieldPartition {
                d_common: 24,
                d_style: 8,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 100,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 50,
            batch_size: 64,
            momentum: 0.9,
        }
    }
}

fn default_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}

/// Everything a two-stage run depends on besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub loss_kind: LossKind,
    #[serde(default)]
    pub hypers: ScalarHypers,
    #[serde(default)]
    pub boundary_init: BoundaryInit,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default = "default_views")]
    pub views_per_sample: usize,
    #[serde(default = "default_aug_sigma")]
    pub aug_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub include_diagonal: bool,
}

fn default_views() -> usize {
    2
}

fn default_aug_sigma() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(loss_kind: LossKind) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            loss_kind,
            hypers: ScalarHypers::default(),
            boundary_init: BoundaryInit::default(),
            model: Architecture::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            views_per_sample: default_views(),
            aug_sigma: default_aug_sigma(),
            seed: 0,
            include_diagonal: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::param(
                "schema_version",
                format!("unsupported {} (expected {CONFIG_SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.hypers.validate()?;
        self.model.partition.validate()?;
        if !(self.boundary_init.t0 > 0.0) || !self.boundary_init.t0.is_finite() {
            return Err(Error::param("boundary_init.t0", "must be positive"));
        }
        if !self.boundary_init.b0.is_finite() {
            return Err(Error::param("boundary_init.b0", "must be finite"));
        }
        let s1 = &self.stage1;
        check_lr("stage1.lr", s1.lr)?;
        check_momentum("stage1.momentum", s1.momentum)?;
        if !(s1.weight_decay >= 0.0) || !s1.weight_decay.is_finite() {
            return Err(Error::param("stage1.weight_decay", "must be non-negative"));
        }
        if s1.batch_size < 2 {
            return Err(Error::param("stage1.batch_size", "must be at least 2"));
        }
        let s2 = &self.stage2;
        check_lr("stage2.lr", s2.lr)?;
        check_momentum("stage2.momentum", s2.momentum)?;
        if s2.epochs < 1 {
            return Err(Error::param("stage2.epochs", "must be at least 1"));
        }
        if s2.batch_size < 1 {
            return Err(Error::param("stage2.batch_size", "must be positive"));
        }
        if self.views_per_sample < 1 {
            return Err(Error::param("views_per_sample", "must be at least 1"));
        }
        if !(self.aug_sigma >= 0.0) || !self.aug_sigma.is_finite() {
            return Err(Error::param("aug_sigma", "must be non-negative"));
        }
        Ok(())
    }

    /// Field split actually used: SupCon treats the whole embedding as one
    /// common field.
    pub fn effective_partition(&self) -> FieldPartition {
        match self.loss_kind {
            LossKind::Supcon => FieldPartition {
                d_common: self.model.partition.width(),
                d_style: 0,
            },
            _ => self.model.partition,
        }
    }

    pub fn model_sizes(&self, input_dim: usize) -> ModelSizes {
        ModelSizes {
            input_dim,
            encoder: self.model.encoder.clone(),
            projection_hidden: self.model.projection_hidden,
            partition: self.effective_partition(),
        }
    }

    pub fn init_state(&self, input_dim: usize) -> Result<ModelState> {
        init_model(
            &self.model_sizes(input_dim),
            SeededRng::derive_seed(self.seed, 1),
            self.boundary_init.t0,
            self.boundary_init.b0,
        )
    }
}

fn check_lr(name: &'static str, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::param(name, format!("must be positive, got {lr}")));
    }
    Ok(())
}

fn check_momentum(name: &'static str, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::param(name, format!("must lie in [0, 1), got {m}")));
    }
    Ok(())
}

/// `base_lr·(1 + cos(π·epoch/total))/2`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total: usize) -> Result<f64> {
    if epoch >= total {
        return Err(Error::Range {
            name: "epoch",
            reason: format!("epoch {epoch} not below total {total}"),
        });
    }
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    Ok(base_lr * (1.0 + phase.cos()) / 2.0)
}

/// In-place SGD with momentum and L2 weight decay:
/// `v ← momentum·v + g + weight_decay·p`, `p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Splits `indices` into batches in which every class present has at least
/// two rows. Each class is shuffled and cut into pairs (a trailing odd row
/// joins the last pair of its class); the pairs are shuffled and packed
/// greedily into batches of at most `batch_size` rows.
pub fn class_balanced_batches(
    labels: &[usize],
    indices: &[usize],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Vec<Vec<usize>> {
    let classes = indices.iter().map(|&i| labels[i]).max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for mut rows in by_class {
        if rows.len() < 2 {
            continue;
        }
        rng.shuffle(&mut rows);
        let mut chunks: Vec<Vec<usize>> = rows.chunks(2).map(<[usize]>::to_vec).collect();
        if chunks.last().is_some_and(|c| c.len() == 1) {
            let odd = chunks.pop().expect("non-empty")[0];
            chunks.last_mut().expect("class has two rows").push(odd);
        }
        groups.extend(chunks);
    }
    rng.shuffle(&mut groups);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::with_capacity(batch_size);
    for g in groups {
        if !cur.is_empty() && cur.len() + g.len() > batch_size {
            batches.push(std::mem::take(&mut cur));
        }
        cur.extend(g);
    }
    if cur.len() >= 2 {
        batches.push(cur);
    }
    batches
}

/// One row of the per-epoch log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean stage-1 loss over the epoch's batches.
    pub loss: f64,
    /// Temperature `exp(t_log)` at the end of the epoch.
    pub t: f64,
    pub b: f64,
    /// Mean intra-class distance between normalized style fields of the
    /// (unaugmented) training rows; 0 without a style field.
    pub style_dist: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<EpochRecord>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        use crate::data::format_f64 as f;
        let mut out = String::from("epoch,loss,t,b,style_dist,lr\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                f(r.loss),
                f(r.t),
                f(r.b),
                f(r.style_dist),
                f(r.lr)
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Reported after every stage-1 optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub t: f64,
    pub b: f64,
}

/// Mean intra-class style distance of `ds` under `state`.
pub fn style_spread(state: &ModelState, ds: &Dataset) -> Result<f64> {
    if state.partition.d_style == 0 {
        return Ok(0.0);
    }
    let z = state.embed(&ds.x)?;
    let s = z.column_block(state.partition.d_common, state.partition.width());
    Ok(mean_intra_class_distance(&s, &ds.labels))
}

pub fn train_stage1(config: &TrainConfig, ds: &Dataset) -> Result<(ModelState, Trajectory)> {
    train_stage1_observed(config, ds, |_| {})
}

/// Stage 1 with a callback after every optimizer step.
pub fn train_stage1_observed<F>(
    config: &TrainConfig,
    ds: &Dataset,
    mut observer: F,
) -> Result<(ModelState, Trajectory)>
where
    F: FnMut(&StepInfo),
{
    config.validate()?;
    if ds.n_classes < 2 {
        return Err(Error::param("dataset", "need at least two classes"));
    }
    let mut state = config.init_state(ds.dim())?;
    let mut rng = SeededRng::new(SeededRng::derive_seed(config.seed, 2));
    let s1 = config.stage1;
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut velocity = vec![0.0; state.network_params().len()];
    let mut boundary_velocity = [0.0; 2];
    let mut trajectory = Trajectory::default();
    let mut step = 0;

    for epoch in 0..s1.epochs {
        let lr = cosine_lr(s1.lr, epoch, s1.epochs)?;
        let batches = class_balanced_batches(&ds.labels, &all, s1.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let views = augment(ds, batch, config.views_per_sample, config.aug_sigma, &mut rng)?;
            let (z, cache) = state.forward(&views.x)?;
            let eb = EmbeddingBatch::new(z, views.labels, state.partition)?
                .with_normalization(FieldNormalization::None);
            let out = evaluate(
                config.loss_kind,
                &eb,
                &state.boundary,
                &config.hypers,
                config.include_diagonal,
            )?;
            if !out.value.is_finite() || out.value > DIVERGENCE_LIMIT || !out.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: out.value,
                });
            }
            let grads = state.backward(&cache, &out)?;

            let mut p = state.network_params();
            sgd_momentum_step(&mut p, &grads.network_flat(), &mut velocity, lr, s1.momentum, s1.weight_decay)?;
            state.set_network_params(&p)?;
            let mut bp = [state.boundary.t_log, state.boundary.b];
            sgd_momentum_step(&mut bp, &[grads.t_log, grads.b], &mut boundary_velocity, lr, s1.momentum, 0.0)?;
            state.boundary.t_log = bp[0];
            state.boundary.b = bp[1];

            let t = state.boundary.temperature();
            if !(t > 0.0 && t.is_finite()) || !state.boundary.b.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: out.value,
                });
            }
            observer(&StepInfo {
                epoch,
                step,
                loss: out.value,
                t,
                b: state.boundary.b,
            });
            loss_sum += out.value;
            step += 1;
        }
        trajectory.records.push(EpochRecord {
            epoch,
            loss: loss_sum / batches.len().max(1) as f64,
            t: state.boundary.temperature(),
            b: state.boundary.b,
            style_dist: style_spread(&state, ds)?,
            lr,
        });
    }
    Ok((state, trajectory))
}

/// Fraction of rows whose largest logit is the true class.
pub fn logits_accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let preds: Vec<usize> = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
    crate::stats::top1_accuracy(&preds, labels).unwrap_or(0.0)
}

/// Trains a linear classifier on the frozen common field of `train` and
/// reports top-1 accuracy on `test`.
pub fn train_stage2(
    frozen: &ModelState,
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(LinearClassifier, f64)> {
    config.validate()?;
    if test.is_empty() || train.is_empty() {
        return Err(Error::param("split", "train and test splits must be non-empty"));
    }
    let before = frozen.fingerprint();
    let classes = train.n_classes.max(test.n_classes);
    let dc = frozen.partition.d_common;
    let feats = frozen.common_features(&train.x)?;
    let test_feats = frozen.common_features(&test.x)?;

    let s2 = config.stage2;
    let mut clf = LinearClassifier::zeros(dc, classes);
    let n_params = dc * classes + classes;
    let mut velocity = vec![0.0; n_params];
    let mut rng = SeededRng::new(SeededRng::derive_seed(config.seed, 3));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..s2.epochs {
        let lr = cosine_lr(s2.lr, epoch, s2.epochs)?;
        rng.shuffle(&mut order);
        for chunk in order.chunks(s2.batch_size) {
            let x = feats.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let logits = clf.classify(&x)?;
            let ce = cross_entropy(&logits, &labels)?;
            let gw = x.transposed_matmul(&ce.grad_z)?;
            let mut grads = gw.into_data();
            for c in 0..classes {
                grads.push((0..ce.grad_z.rows()).map(|r| ce.grad_z.get(r, c)).sum());
            }
            let mut p: Vec<f64> = clf.weight.data().to_vec();
            p.extend_from_slice(&clf.bias);
            sgd_momentum_step(&mut p, &grads, &mut velocity, lr, s2.momentum, 0.0)?;
            clf.weight.data_mut().copy_from_slice(&p[..dc * classes]);
            clf.bias.copy_from_slice(&p[dc * classes..]);
        }
    }
    if frozen.fingerprint() != before {
        return Err(Error::param("frozen", "stage 2 modified the stage-1 state"));
    }
    let acc = logits_accuracy(&clf.classify(&test_feats)?, &test.labels);
    Ok((clf, acc))
}

/// Result of a full two-stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedRun {
    pub state: ModelState,
    pub classifier: LinearClassifier,
    pub trajectory: Trajectory,
    pub accuracy: f64,
    pub config: TrainConfig,
    pub seed: u64,
}

pub fn train_two_stage(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainedRun> {
    let (state, trajectory) = train_stage1(config, train)?;
    let (classifier, accuracy) = train_stage2(&state, config, train, test)?;
    Ok(TrainedRun {
        state,
        classifier,
        trajectory,
        accuracy,
        config: config.clone(),
        seed: config.seed,
    })
}

/// Per-fold accuracies of a k-fold run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub loss_kind: LossKind,
    pub fold_accuracies: Vec<f64>,
    pub fold_seeds: Vec<u64>,
    pub mean_accuracy: f64,
    pub seed: u64,
}

/// K-fold cross-validation of the two-stage pipeline. The split and every
/// fold's training seed derive from `config.seed`.
pub fn run_experiment(config: &TrainConfig, ds: &Dataset, k: usize) -> Result<ExperimentResult> {
    let folds = kfold_split(ds.len(), k, SeededRng::derive_seed(config.seed, 100))?;
    let mut accs = Vec::with_capacity(k);
    let mut seeds = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.seed = SeededRng::derive_seed(config.seed, 200 + f as u64);
        let run = train_two_stage(&cfg, &ds.subset(&fold.train), &ds.subset(&fold.test))?;
        log::info!("fold {f}: accuracy {:.4}", run.accuracy);
        accs.push(run.accuracy);
        seeds.push(cfg.seed);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok(ExperimentResult {
        loss_kind: config.loss_kind,
        fold_accuracies: accs,
        fold_seeds: seeds,
        mean_accuracy: mean,
        seed: config.seed,
    })
}

/// Sampling ranges for the boundary initialization and the style weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    /// Log-uniform.
    pub t0: (f64, f64),
    /// Uniform.
    pub b0: (f64, f64),
    /// Log-uniform.
    pub beta: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            t0: (0.05, 0.2),
            b0: (-0.2, 0.2),
            beta: (1e-5, 1e-1),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("t0", self.t0), ("beta", self.beta)] {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::param(
                    if name == "t0" { "space.t0" } else { "space.beta" },
                    format!("log-uniform range needs 0 < lo < hi, got [{lo}, {hi}]"),
                ));
            }
        }
        if !(self.b0.0 < self.b0.1) || !self.b0.0.is_finite() || !self.b0.1.is_finite() {
            return Err(Error::param("space.b0", "needs finite lo < hi"));
        }
        Ok(())
    }

    /// Draw for trial `index`; depends only on `(seed, index)`.
    pub fn sample(&self, seed: u64, index: usize) -> Result<TrialParams> {
        let mut rng = SeededRng::new(SeededRng::derive_seed(seed, index as u64));
        let t0 = rng.uniform(self.t0.0.ln(), self.t0.1.ln())?.exp();
        let b0 = rng.uniform(self.b0.0, self.b0.1)?;
        let beta = rng.uniform(self.beta.0.ln(), self.beta.1.ln())?.exp();
        Ok(TrialParams {
            t0: t0.clamp(self.t0.0, self.t0.1),
            b0,
            beta: beta.clamp(self.beta.0, self.beta.1),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub t0: f64,
    pub b0: f64,
    pub beta: f64,
}

impl TrialParams {
    pub fn apply(&self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        c.boundary_init = BoundaryInit {
            t0: self.t0,
            b0: self.b0,
        };
        c.hypers.beta = self.beta;
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub params: TrialParams,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_index: usize,
    pub best: TrialParams,
    pub best_score: f64,
    pub trials: Vec<TrialRecord>,
}

/// Random search maximizing `objective`. Ties go to the earliest trial;
/// NaN scores never win.
pub fn random_search<F>(space: &SearchSpace, trials: usize, seed: u64, mut objective: F) -> Result<SearchResult>
where
    F: FnMut(&TrialParams) -> Result<f64>,
{
    space.validate()?;
    if trials == 0 {
        return Err(Error::param("trials", "need at least one trial"));
    }
    let mut log = Vec::with_capacity(trials);
    let mut best: Option<usize> = None;
    for index in 0..trials {
        let params = space.sample(seed, index)?;
        let score = objective(&params)?;
        let better = match best {
            None => true,
            Some(b) => !score.is_nan() && score > log_score(&log, b),
        };
        if better {
            best = Some(index);
        }
        log.push(TrialRecord { index, params, score });
    }
    let b = best.expect("at least one trial");
    Ok(SearchResult {
        best_index: b,
        best: log[b].params,
        best_score: log[b].score,
        trials: log,
    })
}

fn log_score(log: &[TrialRecord], i: usize) -> f64 {
    let s = log[i].score;
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

/// Validation accuracy for a search trial: stage 1 and stage 2 on the
/// training part of a stratified 80/20 split of `train`, scored on the 20%.
pub fn holdout_score(config: &TrainConfig, train: &Dataset, holdout_seed: u64) -> Result<f64> {
    let (fit, val) = crate::data::stratified_holdout(&train.labels, 0.2, holdout_seed)?;
    let run = train_two_stage(config, &train.subset(&fit), &train.subset(&val))?;
    Ok(run.accuracy)
}
