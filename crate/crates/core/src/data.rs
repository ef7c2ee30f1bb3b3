//! Synthetic content/style datasets, multi-view augmentation, CSV I/O and
//! fold splitting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, SeededRng};

/// Generator settings. Each class has a fixed content vector; each sample
/// adds a class-independent style vector, and both are mapped into the
/// observed space by a fixed random isometry before noise is added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub observed_dim: usize,
    /// Root-mean-square distance between class content vectors.
    pub class_gap: f64,
    /// Per-coordinate standard deviation of the style vector.
    pub style_spread: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub const PRESET_NAMES: [&str; 2] = ["easy", "fine-grained"];

impl SyntheticSpec {
    /// Well separated classes with little style variation.
    pub fn easy(seed: u64) -> Self {
        Self {
            class_gap: 5.0,
            style_spread: 0.5,
            ..Self::base(seed)
        }
    }

    /// Close classes buried under large style variation.
    pub fn fine_grained(seed: u64) -> Self {
        Self {
            class_gap: 0.8,
            style_spread: 2.0,
            ..Self::base(seed)
        }
    }

    fn base(seed: u64) -> Self {
        Self {
            n_classes: 8,
            samples_per_class: 200,
            content_dim: 4,
            style_dim: 4,
            observed_dim: 16,
            class_gap: 1.0,
            style_spread: 1.0,
            noise_sigma: 0.1,
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "easy" => Ok(Self::easy(seed)),
            "fine-grained" | "fine_grained" => Ok(Self::fine_grained(seed)),
            _ => Err(Error::param(
                "preset",
                format!("unknown preset `{name}`; expected one of {}", PRESET_NAMES.join(", ")),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 1 || self.samples_per_class < 1 {
            return Err(Error::param("n_classes", "need at least one class and one sample per class"));
        }
        if self.content_dim < 1 {
            return Err(Error::param("content_dim", "must be positive"));
        }
        if self.observed_dim < self.content_dim + self.style_dim {
            return Err(Error::param(
                "observed_dim",
                format!(
                    "{} is smaller than content_dim + style_dim = {}",
                    self.observed_dim,
                    self.content_dim + self.style_dim
                ),
            ));
        }
        if !(self.class_gap > 0.0) || !self.class_gap.is_finite() {
            return Err(Error::param("class_gap", "must be positive"));
        }
        for (name, v) in [("style_spread", self.style_spread), ("noise_sigma", self.noise_sigma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Labelled feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Generator settings when the data is synthetic.
    pub spec: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != x.rows() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for {} rows", labels.len(), x.rows()),
            ));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; n_classes];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::param("labels", format!("class {k} has no rows")));
        }
        Ok(Self {
            x,
            labels,
            n_classes,
            spec: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows `indices` with their labels. The class count is kept.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            spec: self.spec.clone(),
        }
    }

    /// Row indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Rows of `rng` draws, orthonormalized column by column (Gram–Schmidt).
fn random_isometry(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let mut cols_v: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while cols_v.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.gaussian()).collect();
        for u in &cols_v {
            let p = crate::math::dot(&v, u);
            for (a, b) in v.iter_mut().zip(u) {
                *a -= p * b;
            }
        }
        let n = crate::math::norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            cols_v.push(v);
        }
    }
    let mut m = Matrix::zeros(rows, cols);
    for (c, v) in cols_v.iter().enumerate() {
        for (r, &a) in v.iter().enumerate() {
            m.set(r, c, a);
        }
    }
    m
}

/// Draws a dataset from `spec`. Rows are ordered class by class.
///
/// Class content vectors are `N(0, class_gap²/(2·content_dim)·I)`, so the
/// expected squared distance between two classes is `class_gap²`. Style is
/// `N(0, style_spread²·I)` per sample. The latent `[content; style]` goes
/// through a fixed random isometry into `observed_dim` columns and gets
/// `noise_sigma` Gaussian noise.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut means_rng = SeededRng::new(SeededRng::derive_seed(spec.seed, 1));
    let mut map_rng = SeededRng::new(SeededRng::derive_seed(spec.seed, 2));
    let mut sample_rng = SeededRng::new(SeededRng::derive_seed(spec.seed, 3));

    let latent = spec.content_dim + spec.style_dim;
    let mean_sd = spec.class_gap / (2.0 * spec.content_dim as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.content_dim).map(|_| mean_sd * means_rng.gaussian()).collect())
        .collect();
    let w = random_isometry(spec.observed_dim, latent, &mut map_rng);

    let n = spec.n_classes * spec.samples_per_class;
    let mut x = Matrix::zeros(n, spec.observed_dim);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; latent];
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let row = labels.len();
            z[..spec.content_dim].copy_from_slice(mean);
            for v in &mut z[spec.content_dim..] {
                *v = spec.style_spread * sample_rng.gaussian();
            }
            let out = x.row_mut(row);
            for (o, wr) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, zj) in z.iter().enumerate() {
                    acc += w.get(o, j) * zj;
                }
                *wr = acc + spec.noise_sigma * sample_rng.gaussian();
            }
            labels.push(k);
        }
    }
    let mut ds = Dataset::new(x, labels)?;
    ds.spec = Some(spec.clone());
    Ok(ds)
}

/// Resubstitution accuracy of a nearest-class-mean rule on the raw rows.
pub fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let d = ds.dim();
    let mut centroids = vec![vec![0.0; d]; ds.n_classes];
    let mut counts = vec![0usize; ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        counts[l] += 1;
        for (c, v) in centroids[l].iter_mut().zip(ds.x.row(i)) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut correct = 0;
    for (i, &l) in ds.labels.iter().enumerate() {
        let row = ds.x.row(i);
        let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut best = 0;
        for k in 1..ds.n_classes {
            if dist(&centroids[k]) < dist(&centroids[best]) {
                best = k;
            }
        }
        correct += usize::from(best == l);
    }
    correct as f64 / ds.len() as f64
}

/// `V` jittered copies of the selected rows. Row `v·B + i` is view `v` of
/// `indices[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub views: usize,
}

/// Additive Gaussian jitter standing in for image augmentation: each view
/// is `x + aug_sigma·N(0, I)`.
pub fn augment(
    ds: &Dataset,
    indices: &[usize],
    views: usize,
    aug_sigma: f64,
    rng: &mut SeededRng,
) -> Result<ViewBatch> {
    if indices.is_empty() {
        return Err(Error::param("indices", "must select at least one row"));
    }
    if views == 0 {
        return Err(Error::param("views", "need at least one view"));
    }
    if !(aug_sigma >= 0.0) || !aug_sigma.is_finite() {
        return Err(Error::param("aug_sigma", "must be finite and non-negative"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::param("indices", format!("row {bad} out of range for {} rows", ds.len())));
    }
    let b = indices.len();
    let mut x = Matrix::zeros(views * b, ds.dim());
    let mut labels = Vec::with_capacity(views * b);
    for v in 0..views {
        for (i, &src) in indices.iter().enumerate() {
            let out = x.row_mut(v * b + i);
            out.copy_from_slice(ds.x.row(src));
            if aug_sigma > 0.0 {
                for o in out.iter_mut() {
                    *o += aug_sigma * rng.gaussian();
                }
            }
            labels.push(ds.labels[src]);
        }
    }
    Ok(ViewBatch { x, labels, views })
}

/// Formats with 17 significant digits, enough to round-trip any f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn format_err(path: &Path, line: Option<u64>, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Reads a CSV with a header row, one integer column named `label` and
/// numeric feature columns.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| format_err(path, Some(1), "missing `label` column"))?;
    let width = headers.len() - 1;
    if width == 0 {
        return Err(format_err(path, Some(1), "no feature columns"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line());
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if c == label_col {
                let l: usize = cell
                    .parse()
                    .map_err(|_| format_err(path, line, format!("label `{cell}` is not a class index")))?;
                labels.push(l);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| format_err(path, line, format!("cell `{cell}` is not a number")))?;
                if !v.is_finite() {
                    return Err(format_err(path, line, format!("cell `{cell}` is not finite")));
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(format_err(path, None, "no data rows"));
    }
    let x = Matrix::new(labels.len(), width, data)?;
    Dataset::new(x, labels).map_err(|e| format_err(path, None, e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format_err(path, line, format!("row has {len} fields, expected {expected_len}")),
        other => format_err(path, line, format!("{other:?}")),
    }
}

/// Writes `label,f0,f1,…` rows with 17 significant digits per value.
pub fn to_csv_string(ds: &Dataset) -> String {
    let mut out = String::from("label");
    for c in 0..ds.dim() {
        out.push_str(&format!(",f{c}"));
    }
    out.push('\n');
    for (i, &l) in ds.labels.iter().enumerate() {
        out.push_str(&l.to_string());
        for &v in ds.x.row(i) {
            out.push(',');
            out.push_str(&format_f64(v));
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(ds))?;
    Ok(())
}

/// Sidecar describing how a CSV was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub generator: String,
    pub rows: usize,
    pub spec: SyntheticSpec,
}

/// `data.csv` → `data.provenance.json`.
pub fn provenance_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("provenance.json")
}

pub fn provenance_json(ds: &Dataset) -> Result<Option<String>> {
    let Some(spec) = &ds.spec else {
        return Ok(None);
    };
    let p = Provenance {
        generator: "synthetic-content-style".into(),
        rows: ds.len(),
        spec: spec.clone(),
    };
    Ok(Some(serde_json::to_string_pretty(&p)?))
}

/// Train and test row indices for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` and cuts it into `k` test blocks whose sizes differ by
/// at most one. Index lists are returned sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::param("k", format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::param("k", format!("{k} folds for {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = order[start..start + size].to_vec();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}

/// Per-class holdout: from each class, `round(fraction·count)` rows (at
/// least one when the class has two or more) go to the second list.
pub fn stratified_holdout(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param("fraction", format!("must lie in (0, 1), got {fraction}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = SeededRng::new(seed);
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for mut idx in by_class {
        rng.shuffle(&mut idx);
        let mut h = (fraction * idx.len() as f64).round() as usize;
        if idx.len() >= 2 {
            h = h.clamp(1, idx.len() - 1);
        } else {
            h = 0;
        }
        held.extend_from_slice(&idx[..h]);
        keep.extend_from_slice(&idx[h..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((keep, held))
}
