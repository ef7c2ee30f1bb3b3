//! Accuracy metrics and rank-based comparison of methods: paired t-test,
//! Friedman test and the Nemenyi critical difference.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::param("predictions", "must be non-empty"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "top1_accuracy",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

// ---------------------------------------------------------------------------
// Special functions

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine coefficients; relative
/// error around 1e-15).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    #[allow(clippy::excessive_precision)]
    const C: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail `P(|T| ≥ |t|)` of Student's t with `df` degrees of
/// freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series for P.
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        1.0 - sum * ln_front.exp()
    } else {
        // Continued fraction for Q (modified Lentz).
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        ln_front.exp() * h
    }
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    regularized_gamma_q(df / 2.0, x / 2.0)
}

// ---------------------------------------------------------------------------
// Paired t-test

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// All differences equal and nonzero; p is reported as 0.
    ConstantShift,
    /// All differences zero; p is reported as 1.
    Identical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
    /// `p < 0.05`.
    pub significant: bool,
    pub degenerate: Option<Degeneracy>,
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::shape("paired_t_test", format!("{} vs {} samples", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::param("samples", format!("need at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let ss: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum();
    let df = n - 1;
    // Differences equal up to roundoff count as constant.
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let constant = d.iter().all(|&v| (v - d[0]).abs() <= 1e-12 * scale.max(1.0));
    if ss == 0.0 || constant {
        let (t, p, kind) = if mean == 0.0 && scale == 0.0 {
            (0.0, 1.0, Degeneracy::Identical)
        } else {
            (f64::INFINITY.copysign(mean), 0.0, Degeneracy::ConstantShift)
        };
        return Ok(TTestResult {
            t,
            p,
            df,
            mean_diff: mean,
            significant: p < 0.05,
            degenerate: Some(kind),
        });
    }
    let sd = (ss / df as f64).sqrt();
    let t = mean / (sd / (n as f64).sqrt());
    let p = student_t_two_sided(t, df as f64);
    Ok(TTestResult {
        t,
        p,
        df,
        mean_diff: mean,
        significant: p < 0.05,
        degenerate: None,
    })
}

// ---------------------------------------------------------------------------
// Accuracy matrices and ranks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyUnit {
    Fraction,
    Percent,
}

/// Methods × trials (or datasets) table of accuracies.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyMatrix {
    pub methods: Vec<String>,
    pub trials: Vec<String>,
    /// `values[j][i]`: method `j` on trial `i`.
    pub values: Vec<Vec<f64>>,
    pub unit: AccuracyUnit,
    /// Methods removed because of missing cells.
    pub dropped: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "-" | "–" | "—" | "NA" | "na" | "NaN" | "nan")
}

impl AccuracyMatrix {
    pub fn new(methods: Vec<String>, trials: Vec<String>, values: Vec<Vec<f64>>, unit: AccuracyUnit) -> Result<Self> {
        let m = Self {
            methods,
            trials,
            values,
            unit,
            dropped: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.methods.len()
    }

    pub fn n(&self) -> usize {
        self.trials.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() < 2 {
            return Err(Error::param("methods", format!("need at least 2 methods, got {}", self.k())));
        }
        if self.n() < 1 {
            return Err(Error::param("trials", "need at least one trial column"));
        }
        if self.values.len() != self.k() || self.values.iter().any(|r| r.len() != self.n()) {
            return Err(Error::shape("accuracy_matrix", "values must be methods × trials"));
        }
        let hi = match self.unit {
            AccuracyUnit::Fraction => 1.0,
            AccuracyUnit::Percent => 100.0,
        };
        for (j, row) in self.values.iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=hi).contains(*v)) {
                return Err(Error::param(
                    "values",
                    format!("{} has accuracy {v} outside [0, {hi}]", self.methods[j]),
                ));
            }
        }
        Ok(())
    }

    /// Parses CSV text: header row of trial names (first cell ignored),
    /// then one row per method. Methods with missing cells (`-`, empty,
    /// `NA`) are dropped with a warning. Without an explicit unit, any
    /// value above 1 marks the table as percent.
    pub fn from_csv_str(text: &str, unit: Option<AccuracyUnit>, path: &Path) -> Result<Self> {
        let fmt = |line: Option<u64>, reason: String| Error::Format {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| fmt(e.position().map(|p| p.line()), e.to_string()))?
            .clone();
        let trials: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
        let (mut methods, mut values, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(|e| fmt(e.position().map(|p| p.line()), e.to_string()))?;
            let line = rec.position().map(|p| p.line());
            let name = rec.get(0).unwrap_or("").trim().to_string();
            if rec.len() != trials.len() + 1 {
                return Err(fmt(line, format!("row has {} cells, expected {}", rec.len(), trials.len() + 1)));
            }
            let mut row = Vec::with_capacity(trials.len());
            let mut missing = false;
            for cell in rec.iter().skip(1) {
                let cell = cell.trim();
                if is_missing(cell) {
                    missing = true;
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| fmt(line, format!("cell `{cell}` is not a number")))?;
                row.push(v);
            }
            if missing {
                log::warn!("dropping method `{name}`: missing cells");
                dropped.push(name);
            } else {
                methods.push(name);
                values.push(row);
            }
        }
        let unit = unit.unwrap_or_else(|| {
            if values.iter().flatten().any(|&v| v > 1.0) {
                AccuracyUnit::Percent
            } else {
                AccuracyUnit::Fraction
            }
        });
        let m = Self {
            methods,
            trials,
            values,
            unit,
            dropped,
        };
        m.validate().map_err(|e| fmt(None, e.to_string()))?;
        Ok(m)
    }

    pub fn load_csv(path: &Path, unit: Option<AccuracyUnit>) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?, unit, path)
    }

    pub fn row(&self, method: &str) -> Option<&[f64]> {
        self.methods
            .iter()
            .position(|m| m == method)
            .map(|j| self.values[j].as_slice())
    }
}

/// Per-trial ranks (1 = best) and their per-method averages.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankSummary {
    pub methods: Vec<String>,
    pub average: Vec<f64>,
    /// `per_trial[i][j]`: rank of method `j` on trial `i`.
    pub per_trial: Vec<Vec<f64>>,
}

impl RankSummary {
    pub fn k(&self) -> usize {
        self.methods.len()
    }

    pub fn n(&self) -> usize {
        self.per_trial.len()
    }

    /// Index of the method with the lowest average rank (first on ties).
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (j, &r) in self.average.iter().enumerate() {
            if r < self.average[best] {
                best = j;
            }
        }
        best
    }
}

/// Ranks `scores` so that the largest gets rank 1; equal scores share the
/// mean of the ranks they span.
pub fn mid_ranks_descending(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn average_ranks(m: &AccuracyMatrix) -> RankSummary {
    let (k, n) = (m.k(), m.n());
    let per_trial: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let col: Vec<f64> = (0..k).map(|j| m.values[j][i]).collect();
            mid_ranks_descending(&col)
        })
        .collect();
    let average = (0..k)
        .map(|j| per_trial.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    RankSummary {
        methods: m.methods.clone(),
        average,
        per_trial,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FriedmanResult {
    pub chi_sq: f64,
    pub df: usize,
    pub p_value: f64,
    /// `p < 0.05`.
    pub reject: bool,
}

/// `χ²_F = 12N/(K(K+1))·[Σ R_j² − K(K+1)²/4]` from average ranks, without
/// a tie correction; p from the chi-square tail with `K − 1` degrees of
/// freedom.
pub fn friedman_statistic(average_ranks: &[f64], n: usize) -> Result<FriedmanResult> {
    let k = average_ranks.len();
    if k < 2 {
        return Err(Error::param("k", format!("need at least 2 methods, got {k}")));
    }
    if n < 1 {
        return Err(Error::param("n", "need at least one trial"));
    }
    let (kf, nf) = (k as f64, n as f64);
    let sum_sq: f64 = average_ranks.iter().map(|r| r * r).sum();
    let chi_sq = 12.0 * nf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0).powi(2) / 4.0);
    let chi_sq = if chi_sq.abs() < 1e-12 { 0.0 } else { chi_sq };
    let p_value = chi_square_sf(chi_sq, (k - 1) as f64);
    Ok(FriedmanResult {
        chi_sq,
        df: k - 1,
        p_value,
        reject: p_value < 0.05,
    })
}

/// Two-tailed Nemenyi critical values `q_α` (Studentized range divided by
/// √2) for K = 2..20 at α = 0.05.
pub const NEMENYI_Q_05: [f64; 19] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, // K = 2..10
    3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544, // K = 11..20
];

/// As [`NEMENYI_Q_05`] at α = 0.10.
pub const NEMENYI_Q_10: [f64; 19] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, // K = 2..10
    2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230, 3.261, 3.291, 3.319, // K = 11..20
];

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &NEMENYI_Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &NEMENYI_Q_10
    } else {
        return Err(Error::param("alpha", format!("{alpha} not tabulated; use 0.05 or 0.10")));
    };
    if !(2..=20).contains(&k) {
        return Err(Error::param("k", format!("{k} methods outside the tabulated range 2..=20")));
    }
    Ok(table[k - 2])
}

/// `CD = q_α·sqrt(K(K+1)/(6N))`.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    let q = nemenyi_q(k, alpha)?;
    if n < 1 {
        return Err(Error::param("n", "need at least one trial"));
    }
    let (kf, nf) = (k as f64, n as f64);
    Ok(q * (kf * (kf + 1.0) / (6.0 * nf)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedMethod {
    pub method: String,
    pub average_rank: f64,
}

/// Ranks, Friedman test, critical difference and the maximal runs of
/// rank-sorted methods whose extreme ranks differ by less than the CD.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CdReport {
    pub alpha: f64,
    pub k: usize,
    pub n: usize,
    pub cd: f64,
    pub friedman: FriedmanResult,
    /// Sorted by average rank, best first.
    pub ranking: Vec<RankedMethod>,
    /// Inclusive index ranges into `ranking`.
    pub groups: Vec<(usize, usize)>,
    pub dropped: Vec<String>,
}

pub fn cd_report(m: &AccuracyMatrix, alpha: f64) -> Result<CdReport> {
    m.validate()?;
    let ranks = average_ranks(m);
    let friedman = friedman_statistic(&ranks.average, m.n())?;
    let cd = nemenyi_cd(m.k(), m.n(), alpha)?;
    let mut ranking: Vec<RankedMethod> = ranks
        .methods
        .iter()
        .zip(&ranks.average)
        .map(|(name, &r)| RankedMethod {
            method: name.clone(),
            average_rank: r,
        })
        .collect();
    ranking.sort_by(|a, b| a.average_rank.total_cmp(&b.average_rank));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for i in 0..ranking.len() {
        let mut j = i;
        while j + 1 < ranking.len() && ranking[j + 1].average_rank - ranking[i].average_rank < cd {
            j += 1;
        }
        if groups.last().map_or(true, |&(_, end)| j > end) {
            groups.push((i, j));
        }
    }
    Ok(CdReport {
        alpha,
        k: m.k(),
        n: m.n(),
        cd,
        friedman,
        ranking,
        groups,
        dropped: m.dropped.clone(),
    })
}

impl CdReport {
    /// One row per method, best first.
    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("position,method,average_rank\n");
        for (i, r) in self.ranking.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, csv_cell(&r.method), crate::data::format_f64(r.average_rank)));
        }
        out
    }

    pub fn groups_csv(&self) -> String {
        let mut out = String::from("group,first,last,methods\n");
        for (g, &(a, b)) in self.groups.iter().enumerate() {
            let names: Vec<&str> = self.ranking[a..=b].iter().map(|r| r.method.as_str()).collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                g + 1,
                csv_cell(&self.ranking[a].method),
                csv_cell(&self.ranking[b].method),
                csv_cell(&names.join("; "))
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("methods K = {}, trials N = {}\n", self.k, self.n));
        if !self.dropped.is_empty() {
            out.push_str(&format!("dropped (missing cells): {}\n", self.dropped.join(", ")));
        }
        out.push_str(&format!(
            "Friedman chi2_F = {:.6} (df {}), p = {:.3e}{}\n",
            self.friedman.chi_sq,
            self.friedman.df,
            self.friedman.p_value,
            if self.friedman.reject { ", reject at 0.05" } else { "" }
        ));
        out.push_str(&format!("Nemenyi CD (alpha {}) = {:.4}\n\n", self.alpha, self.cd));
        let width = self.ranking.iter().map(|r| r.method.len()).max().unwrap_or(0);
        for (i, r) in self.ranking.iter().enumerate() {
            out.push_str(&format!("{:>3}. {:<width$}  {:.4}\n", i + 1, r.method, r.average_rank));
        }
        out.push_str("\ngroups within one CD:\n");
        for &(a, b) in &self.groups {
            let names: Vec<&str> = self.ranking[a..=b].iter().map(|r| r.method.as_str()).collect();
            out.push_str(&format!("  [{}]\n", names.join(", ")));
        }
        out
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests;
