use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;

use scs_core::data::{self, provenance_json, provenance_path, stratified_holdout, to_csv_string, SyntheticSpec};
use scs_core::losses::GradCheckReport;
use scs_core::model::Checkpoint;
use scs_core::stats::{cd_report, paired_t_test, AccuracyMatrix, AccuracyUnit, TTestResult};
use scs_core::training::{
    holdout_score, random_search, run_experiment, train_two_stage, EpochRecord, ExperimentResult, SearchSpace,
    TrainConfig, TrialParams, TrialRecord,
};
use scs_core::verify;
use scs_core::{Dataset, LossKind, SeededRng};

use crate::args::{Cli, Command, GenerateArgs, GradcheckArgs, SearchArgs, StatsArgs, SweepArgs, TrainArgs, UnitArg};
use crate::manifest::{manifest_path, ManifestBuilder, TOOL_VERSION};
use crate::output::{write_atomic, write_json};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_VERIFICATION: u8 = 4;

/// A gradient check exceeded its tolerance.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

/// Divergence → 3, failed verification → 4, everything else (bad
/// config, malformed input, I/O) → 2.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(scs_core::Error::Divergence { .. }) = cause.downcast_ref::<scs_core::Error>() {
            return EXIT_DIVERGENCE;
        }
        if cause.downcast_ref::<VerificationFailed>().is_some() {
            return EXIT_VERIFICATION;
        }
    }
    EXIT_CONFIG
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::SweepBeta(a) => cmd_sweep_beta(&a),
        Command::Search(a) => cmd_search(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_json(&read_text(path)?).with_context(|| format!("invalid config {}", path.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    data::load_csv(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Stratified train/test split used by every training command.
pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(stratified_holdout(&ds.labels, fraction, SeededRng::derive_seed(seed, 400))?)
}

fn resolve_spec(arg: &str, seed: Option<u64>) -> Result<SyntheticSpec> {
    let path = Path::new(arg);
    let mut spec = if path.is_file() {
        let text = read_text(path)?;
        serde_json::from_str::<SyntheticSpec>(&text).with_context(|| format!("invalid spec {arg}"))?
    } else {
        SyntheticSpec::preset(arg, seed.unwrap_or(0))
            .with_context(|| format!("`{arg}` is neither a spec file nor a preset (easy, fine-grained)"))?
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("generate");
    if Path::new(&a.spec).is_file() {
        manifest = manifest.input(Path::new(&a.spec));
    }
    let spec = resolve_spec(&a.spec, a.seed)?;
    let ds = data::generate(&spec)?;
    write_atomic(&a.out, to_csv_string(&ds).as_bytes())?;
    let side = provenance_path(&a.out);
    if let Some(p) = provenance_json(&ds)? {
        write_atomic(&side, format!("{p}\n").as_bytes())?;
    }
    manifest
        .config(&spec)?
        .seed(spec.seed)
        .finish(&[a.out.clone(), side], &manifest_path(&a.out, false))?;
    println!("wrote {} rows × {} features to {}", ds.len(), ds.dim(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SplitSummary {
    pub rows: usize,
    pub features: usize,
    pub classes: usize,
    pub test_fraction: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Deterministic summary of a training run; no timestamps.
#[derive(Debug, Serialize)]
pub struct TrainResults<'a> {
    pub tool_version: &'static str,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub config: &'a TrainConfig,
    pub split: SplitSummary,
    pub test_accuracy: f64,
    pub final_epoch: Option<EpochRecord>,
    pub cross_validation: Option<ExperimentResult>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("train").input(&a.data.config).input(&a.data.data);
    let mut cfg = load_config(&a.data.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = load_data(&a.data.data)?;
    let (train_idx, test_idx) = holdout_split(&ds, a.data.test_fraction, cfg.seed)?;
    info!("training {} on {} rows, testing on {}", cfg.loss_kind.name(), train_idx.len(), test_idx.len());
    let run = train_two_stage(&cfg, &ds.subset(&train_idx), &ds.subset(&test_idx))
        .context("stage 1 diverged or stage 2 failed; try a lower stage1.lr")?;
    let cv = match a.folds {
        Some(k) => Some(run_experiment(&cfg, &ds, k)?),
        None => None,
    };

    let checkpoint = a.out.join("checkpoint.json");
    let trajectory = a.out.join("trajectory.csv");
    let results = a.out.join("results.json");
    let ckpt = Checkpoint::new(run.state.clone(), Some(run.classifier.clone()));
    write_atomic(&checkpoint, ckpt.to_json()?.as_bytes())?;
    write_atomic(&trajectory, run.trajectory.to_csv().as_bytes())?;
    write_json(
        &results,
        &TrainResults {
            tool_version: TOOL_VERSION,
            loss_kind: cfg.loss_kind,
            seed: cfg.seed,
            config: &cfg,
            split: SplitSummary {
                rows: ds.len(),
                features: ds.dim(),
                classes: ds.n_classes,
                test_fraction: a.data.test_fraction,
                train_rows: train_idx.len(),
                test_rows: test_idx.len(),
            },
            test_accuracy: run.accuracy,
            final_epoch: run.trajectory.last().copied(),
            cross_validation: cv.clone(),
        },
    )?;
    manifest
        .config(&cfg)?
        .seed(cfg.seed)
        .finish(&[checkpoint, trajectory, results], &manifest_path(&a.out, true))?;

    print!("{}: test accuracy {:.4}", cfg.loss_kind.name(), run.accuracy);
    if let Some(last) = run.trajectory.last() {
        print!(" (t = {:.4}, b = {:.4}, final loss {:.4})", last.t, last.b, last.loss);
    }
    println!();
    if let Some(cv) = cv {
        println!("{}-fold mean accuracy {:.4}", cv.fold_accuracies.len(), cv.mean_accuracy);
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_sweep_beta(a: &SweepArgs) -> Result<()> {
    if a.betas.len() < 2 {
        bail!("sweep needs at least two beta values, got {}", a.betas.len());
    }
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let manifest = ManifestBuilder::start("sweep-beta").input(&a.data.config).input(&a.data.data);
    let base = load_config(&a.data.config)?;
    if base.loss_kind == LossKind::Supcon {
        warn!("supcon has no style field; beta has no effect");
    }
    let ds = load_data(&a.data.data)?;
    let mut out = String::from("beta,mean_accuracy,std_accuracy,seeds,mean_style_dist\n");
    for &beta in &a.betas {
        let mut accs = Vec::with_capacity(a.seeds);
        let mut dists = Vec::with_capacity(a.seeds);
        for s in 0..a.seeds {
            let mut cfg = base.clone();
            cfg.hypers.beta = beta;
            cfg.seed = base.seed + s as u64;
            cfg.validate().with_context(|| format!("beta = {beta}"))?;
            let (train_idx, test_idx) = holdout_split(&ds, a.data.test_fraction, cfg.seed)?;
            let run = train_two_stage(&cfg, &ds.subset(&train_idx), &ds.subset(&test_idx))?;
            accs.push(run.accuracy);
            dists.push(run.trajectory.last().map_or(0.0, |r| r.style_dist));
        }
        let (mean, std) = mean_std(&accs);
        let (dist, _) = mean_std(&dists);
        println!("beta {beta:e}: accuracy {mean:.4} ± {std:.4}");
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            data::format_f64(beta),
            data::format_f64(mean),
            data::format_f64(std),
            a.seeds,
            data::format_f64(dist)
        ));
    }
    write_atomic(&a.out, out.as_bytes())?;
    manifest
        .config(&base)?
        .seed(base.seed)
        .finish(std::slice::from_ref(&a.out), &manifest_path(&a.out, false))?;
    Ok(())
}

/// Which rows the search could see, checked against the test split.
#[derive(Debug, Serialize)]
pub struct AccessAudit {
    pub test_rows: usize,
    pub rows_visible_to_search: usize,
    pub test_rows_visible_to_search: usize,
}

impl AccessAudit {
    pub fn new(search_rows: &[usize], test_rows: &[usize]) -> Self {
        let test: BTreeSet<usize> = test_rows.iter().copied().collect();
        let seen: BTreeSet<usize> = search_rows.iter().copied().collect();
        Self {
            test_rows: test.len(),
            rows_visible_to_search: seen.len(),
            test_rows_visible_to_search: seen.intersection(&test).count(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SearchReport {
    pub tool_version: &'static str,
    pub trials: usize,
    pub search_seed: u64,
    pub space: SearchSpace,
    pub best_index: usize,
    pub best: TrialParams,
    pub best_validation_accuracy: f64,
    /// Validation accuracy of the best trial recomputed from scratch.
    pub rerun_validation_accuracy: f64,
    pub reproduced: bool,
    pub best_config: TrainConfig,
    pub test_accuracy: f64,
    pub audit: AccessAudit,
    pub trial_log: Vec<TrialRecord>,
}

pub fn cmd_search(a: &SearchArgs) -> Result<()> {
    if a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let mut manifest = ManifestBuilder::start("search").input(&a.data.config).input(&a.data.data);
    let base = load_config(&a.data.config)?;
    let space = match &a.space {
        Some(p) => {
            manifest = manifest.input(p);
            serde_json::from_str::<SearchSpace>(&read_text(p)?).with_context(|| format!("invalid space {}", p.display()))?
        }
        None => SearchSpace::default(),
    };
    space.validate()?;
    let ds = load_data(&a.data.data)?;
    let (train_idx, test_idx) = holdout_split(&ds, a.data.test_fraction, base.seed)?;
    let audit = AccessAudit::new(&train_idx, &test_idx);
    if audit.test_rows_visible_to_search != 0 {
        bail!("search split overlaps the test split");
    }
    let search_data = ds.subset(&train_idx);
    let holdout_seed = SeededRng::derive_seed(base.seed, 500);
    let search_seed = a.search_seed.unwrap_or(base.seed);
    let result = random_search(&space, a.trials, search_seed, |p| {
        let score = holdout_score(&p.apply(&base), &search_data, holdout_seed)?;
        info!("t0 {:.4} b0 {:+.4} beta {:.2e}: validation {:.4}", p.t0, p.b0, p.beta, score);
        Ok(score)
    })?;
    let best_config = result.best.apply(&base);
    let rerun = holdout_score(&best_config, &search_data, holdout_seed)?;
    let reproduced = rerun.to_bits() == result.best_score.to_bits();
    if !reproduced {
        warn!("best trial did not reproduce: {} vs {}", result.best_score, rerun);
    }

    // The test split is read only here, after the search is over.
    let final_run = train_two_stage(&best_config, &search_data, &ds.subset(&test_idx))?;
    let report = SearchReport {
        tool_version: TOOL_VERSION,
        trials: a.trials,
        search_seed,
        space,
        best_index: result.best_index,
        best: result.best,
        best_validation_accuracy: result.best_score,
        rerun_validation_accuracy: rerun,
        reproduced,
        best_config: best_config.clone(),
        test_accuracy: final_run.accuracy,
        audit,
        trial_log: result.trials,
    };
    write_json(&a.out, &report)?;
    manifest
        .config(&base)?
        .seed(base.seed)
        .finish(std::slice::from_ref(&a.out), &manifest_path(&a.out, false))?;
    println!(
        "best of {} trials: t0 {:.4}, b0 {:+.4}, beta {:.2e}; validation {:.4}, test {:.4}",
        a.trials, report.best.t0, report.best.b0, report.best.beta, report.best_validation_accuracy, report.test_accuracy
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct PairedComparison {
    pub method: String,
    pub against: String,
    #[serde(flatten)]
    pub test: TTestResult,
}

fn ttests_csv(rows: &[PairedComparison]) -> String {
    let mut out = String::from("method,against,t,p,df,mean_diff,significant,degenerate\n");
    for r in rows {
        let degenerate = match r.test.degenerate {
            Some(d) => serde_json::to_value(d).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            csv_cell(&r.method),
            csv_cell(&r.against),
            data::format_f64(r.test.t),
            data::format_f64(r.test.p),
            r.test.df,
            data::format_f64(r.test.mean_diff),
            r.test.significant,
            degenerate
        ));
    }
    out
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn paired_comparisons(m: &AccuracyMatrix, proposed: Option<&str>) -> Result<Vec<PairedComparison>> {
    let anchor = match proposed {
        Some(name) => name.to_string(),
        None if m.k() == 2 => m.methods[0].clone(),
        None => return Ok(Vec::new()),
    };
    let Some(a) = m.row(&anchor) else {
        if m.dropped.iter().any(|d| d == &anchor) {
            bail!("method `{anchor}` was dropped because of missing cells");
        }
        bail!("method `{anchor}` not found; available: {}", m.methods.join(", "));
    };
    let mut rows = Vec::new();
    for (j, other) in m.methods.iter().enumerate() {
        if *other == anchor {
            continue;
        }
        rows.push(PairedComparison {
            method: anchor.clone(),
            against: other.clone(),
            test: paired_t_test(a, &m.values[j])?,
        });
    }
    Ok(rows)
}

pub fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("stats").input(&a.matrix);
    let unit = a.unit.map(|u| match u {
        UnitArg::Fraction => AccuracyUnit::Fraction,
        UnitArg::Percent => AccuracyUnit::Percent,
    });
    let m = AccuracyMatrix::load_csv(&a.matrix, unit)?;
    if m.k() < 2 {
        bail!("need at least two methods, got {}", m.k());
    }
    let report = cd_report(&m, a.alpha)?;
    let comparisons = paired_comparisons(&m, a.proposed.as_deref())?;

    let mut text = report.to_text();
    if !comparisons.is_empty() {
        text.push_str("\npaired t-tests (two-sided):\n");
        for c in &comparisons {
            text.push_str(&format!(
                "  {} vs {}: t = {:.4}, p = {:.4e}{}\n",
                c.method,
                c.against,
                c.test.t,
                c.test.p,
                if c.test.significant { " *" } else { "" }
            ));
        }
    }
    let paths: Vec<PathBuf> = ["ranks.csv", "groups.csv", "report.txt", "summary.json"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    write_atomic(&paths[0], report.ranks_csv().as_bytes())?;
    write_atomic(&paths[1], report.groups_csv().as_bytes())?;
    write_atomic(&paths[2], text.as_bytes())?;
    write_json(
        &paths[3],
        &serde_json::json!({
            "tool_version": TOOL_VERSION,
            "matrix": a.matrix,
            "report": report,
            "paired_t_tests": comparisons,
        }),
    )?;
    let mut outputs = paths;
    if !comparisons.is_empty() {
        let p = a.out.join("ttests.csv");
        write_atomic(&p, ttests_csv(&comparisons).as_bytes())?;
        outputs.push(p);
    }
    manifest
        .config(&serde_json::json!({ "alpha": a.alpha, "proposed": a.proposed, "unit": m.unit }))?
        .finish(&outputs, &manifest_path(&a.out, true))?;
    print!("{text}");
    Ok(())
}

fn merge(into: &mut GradCheckReport, r: &GradCheckReport) {
    into.z = into.z.max(r.z);
    into.t_log = into.t_log.max(r.t_log);
    into.b = into.b.max(r.b);
}

fn nan_as_inf(r: &mut GradCheckReport) {
    for v in [&mut r.z, &mut r.t_log, &mut r.b] {
        if v.is_nan() {
            *v = f64::INFINITY;
        }
    }
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let kinds: Vec<LossKind> = match a.loss {
        Some(k) => vec![k],
        None => LossKind::ALL.to_vec(),
    };
    let mut failures = Vec::new();
    for kind in kinds {
        let mut worst = GradCheckReport { z: 0.0, t_log: 0.0, b: 0.0 };
        let mut network = 0.0f64;
        for index in 0..a.trials {
            let case = verify::loss_case(kind, a.seed, index)?;
            let mut analytic = case.analytic()?;
            if a.corrupt_gradient {
                let g = analytic.grad_z.get(0, 0);
                analytic.grad_z.set(0, 0, g * 1.01 + 1e-3);
                analytic.grad_t_log = analytic.grad_t_log * 1.01 + 1e-3;
                analytic.grad_b = analytic.grad_b * 1.01 + 1e-3;
            }
            let mut r = case.check(&analytic, a.h)?;
            nan_as_inf(&mut r);
            merge(&mut worst, &r);
            if !a.no_stack {
                let mut s = verify::stack_check(kind, a.seed, index, a.h)?;
                nan_as_inf(&mut s);
                network = network.max(s.max());
            }
        }
        let pass = worst.passes(a.tol) && network <= a.tol;
        let stack = if a.no_stack {
            String::new()
        } else {
            format!("  network {network:.3e}")
        };
        println!(
            "{:<10}  z {:.3e}  t' {:.3e}  b {:.3e}{stack}  {}",
            kind.name(),
            worst.z,
            worst.t_log,
            worst.b,
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failures.push(kind.name());
        }
    }
    if !failures.is_empty() {
        return Err(VerificationFailed(format!(
            "max relative error above {:e} for {}",
            a.tol,
            failures.join(", ")
        ))
        .into());
    }
    Ok(())
}
