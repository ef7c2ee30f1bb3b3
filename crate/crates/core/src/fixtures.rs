//! Published accuracy tables shipped as CSV fixtures.

use std::path::Path;

use crate::error::Result;
use crate::stats::{AccuracyMatrix, AccuracyUnit};

/// Sixteen methods on six dataset/backbone pairs; SelfCon has missing cells.
pub const METHOD_COMPARISON_CSV: &str = include_str!("../fixtures/method_comparison.csv");

/// Five methods, five cross-validation folds.
pub const FIVE_FOLD_CSV: &str = include_str!("../fixtures/five_fold.csv");

pub const PROPOSED_METHOD: &str = "SCS-SupCon";

/// Baselines compared against the proposed method fold by fold.
pub const FIVE_FOLD_BASELINES: [&str; 4] = ["SupCon", "SelfCon", "CS-SupCon", "CS-SupCon w. ov."];

pub fn method_comparison() -> Result<AccuracyMatrix> {
    AccuracyMatrix::from_csv_str(
        METHOD_COMPARISON_CSV,
        Some(AccuracyUnit::Percent),
        Path::new("method_comparison.csv"),
    )
}

pub fn five_fold() -> Result<AccuracyMatrix> {
    AccuracyMatrix::from_csv_str(FIVE_FOLD_CSV, Some(AccuracyUnit::Percent), Path::new("five_fold.csv"))
}
