use super::*;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

fn matrix(rows: &[(&str, &[f64])]) -> AccuracyMatrix {
    AccuracyMatrix::new(
        rows.iter().map(|r| r.0.to_string()).collect(),
        (0..rows[0].1.len()).map(|i| format!("d{i}")).collect(),
        rows.iter().map(|r| r.1.to_vec()).collect(),
        AccuracyUnit::Percent,
    )
    .unwrap()
}

#[test]
fn top1_cases() {
    assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(top1_accuracy(&[1, 0, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.5);
    assert!(top1_accuracy(&[], &[]).is_err());
    assert!(top1_accuracy(&[1], &[1, 2]).is_err());
}

#[test]
fn incomplete_beta_matches_statrs() {
    for &df in &[1.0, 2.0, 4.0, 9.0, 30.0] {
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        for &t in &[0.0, 0.3, 1.0, 2.5, 6.0, 17.9, 30.8] {
            let ours = student_t_two_sided(t, df);
            let oracle = 2.0 * (1.0 - dist.cdf(t));
            let tol = 1e-8f64.max(1e-8 * oracle);
            assert!((ours - oracle).abs() <= tol, "df {df} t {t}: {ours} vs {oracle}");
        }
    }
}

#[test]
fn chi_square_tail_matches_statrs() {
    for &df in &[1.0, 3.0, 14.0, 30.0] {
        let dist = ChiSquared::new(df).unwrap();
        for &x in &[0.1, 1.0, 5.0, 14.0, 30.0, 61.0] {
            let ours = chi_square_sf(x, df);
            let oracle = 1.0 - dist.cdf(x);
            assert!((ours - oracle).abs() <= 1e-10, "df {df} x {x}: {ours} vs {oracle}");
        }
    }
    assert_eq!(chi_square_sf(0.0, 3.0), 1.0);
}

#[test]
fn identical_samples_are_flagged() {
    let r = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!((r.p, r.mean_diff), (1.0, 0.0));
    assert_eq!(r.degenerate, Some(Degeneracy::Identical));
    assert!(!r.significant);
}

#[test]
fn constant_shift_is_flagged() {
    let r = paired_t_test(&[2.0; 5], &[1.0; 5]).unwrap();
    assert_eq!(r.p, 0.0);
    assert_eq!(r.degenerate, Some(Degeneracy::ConstantShift));
    let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(r.degenerate, Some(Degeneracy::ConstantShift));
    assert_eq!(r.t, f64::NEG_INFINITY);
    assert!(paired_t_test(&[1.0], &[2.0]).is_err());
}

// Frozen from an independent t-distribution implementation.
const FIVE_FOLD_ORACLE: [(&str, f64, f64); 4] = [
    ("SupCon", 30.832207186641806, 6.59315422354738e-06),
    ("SelfCon", 11.40175425099122, 3.375319857817983e-4),
    ("CS-SupCon", 17.919573407620703, 5.700034351733494e-05),
    ("CS-SupCon w. ov.", 6.674238124719223, 0.002619332184707645),
];

#[test]
fn five_fold_fixture_p_values() {
    let m = crate::fixtures::five_fold().unwrap();
    let ours = m.row("SCS-SupCon").unwrap();
    for (name, t, p) in FIVE_FOLD_ORACLE {
        let r = paired_t_test(ours, m.row(name).unwrap()).unwrap();
        assert!((r.t - t).abs() < 1e-9 * t, "{name}: t {}", r.t);
        assert!((r.p - p).abs() < 1e-8f64.max(1e-8 * p), "{name}: p {}", r.p);
        assert!(r.significant && r.degenerate.is_none());
    }
}

#[test]
fn hand_ranks_and_ties() {
    let m = matrix(&[("A", &[90.0, 80.0]), ("B", &[70.0, 60.0])]);
    let r = average_ranks(&m);
    assert_eq!(r.average, vec![1.0, 2.0]);
    let m = matrix(&[("A", &[90.0, 80.0]), ("B", &[90.0, 60.0]), ("C", &[10.0, 70.0])]);
    let r = average_ranks(&m);
    assert_eq!(r.per_trial[0], vec![1.5, 1.5, 3.0]);
    assert_eq!(r.per_trial[1], vec![1.0, 3.0, 2.0]);
}

#[test]
fn friedman_hand_value() {
    let f = friedman_statistic(&[1.0, 2.0], 2).unwrap();
    assert!((f.chi_sq - 2.0).abs() < 1e-12);
    assert_eq!(f.df, 1);
    let tied = friedman_statistic(&[2.0, 2.0, 2.0], 7).unwrap();
    assert_eq!(tied.chi_sq, 0.0);
    assert_eq!(tied.p_value, 1.0);
    assert!(friedman_statistic(&[1.0], 3).is_err());
}

/// Independent re-derivation: rank by counting strictly better and equal
/// entries, then apply the statistic from per-method rank sums.
fn brute_force(m: &AccuracyMatrix) -> (Vec<f64>, f64) {
    let (k, n) = (m.k(), m.n());
    let mut sums = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            let v = m.values[j][i];
            let better = (0..k).filter(|&o| m.values[o][i] > v).count() as f64;
            let equal = (0..k).filter(|&o| m.values[o][i] == v).count() as f64;
            sums[j] += better + (equal + 1.0) / 2.0;
        }
    }
    let avg: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    let (kf, nf) = (k as f64, n as f64);
    let mut acc = 0.0;
    for r in &avg {
        acc += r * r;
    }
    let chi = 12.0 * nf / (kf * (kf + 1.0)) * acc - 3.0 * nf * (kf + 1.0);
    (avg, chi)
}

#[test]
fn method_comparison_fixture_against_brute_force() {
    let m = crate::fixtures::method_comparison().unwrap();
    assert_eq!(m.dropped, vec!["SelfCon".to_string()]);
    assert_eq!((m.k(), m.n()), (15, 6));
    let ranks = average_ranks(&m);
    let (avg, chi) = brute_force(&m);
    for (a, b) in ranks.average.iter().zip(&avg) {
        assert!((a - b).abs() < 1e-12);
    }
    let f = friedman_statistic(&ranks.average, m.n()).unwrap();
    assert!((f.chi_sq - chi).abs() < 1e-9);
    // Frozen from an independent implementation of the same uncorrected formula.
    assert!((f.chi_sq - 60.991666666666625).abs() < 1e-9);
    assert!(f.reject && f.p_value < 1e-6);
    assert_eq!(ranks.methods[ranks.best()], "SCS-SupCon");
    assert!((ranks.average[ranks.best()] - 13.0 / 12.0).abs() < 1e-12);
}

#[test]
fn nemenyi_values() {
    let cd = nemenyi_cd(15, 6, 0.05).unwrap();
    assert!((cd - 3.391 * (240.0f64 / 36.0).sqrt()).abs() < 1e-12);
    assert!((cd - 8.76).abs() < 0.01);
    let cd2 = nemenyi_cd(2, 8, 0.05).unwrap();
    assert!((cd2 - 0.6930).abs() < 5e-5);
    let a = nemenyi_cd(7, 3, 0.10).unwrap();
    let b = nemenyi_cd(7, 12, 0.10).unwrap();
    assert!((a / b - 2.0).abs() < 1e-12);
    assert!(nemenyi_cd(21, 6, 0.05).is_err());
    assert!(nemenyi_cd(1, 6, 0.05).is_err());
    assert!(nemenyi_cd(5, 6, 0.01).is_err());
}

#[test]
fn nemenyi_monotone_in_k_and_n() {
    for alpha in [0.05, 0.10] {
        for k in 2..20 {
            assert!(nemenyi_cd(k + 1, 5, alpha).unwrap() > nemenyi_cd(k, 5, alpha).unwrap());
        }
        for n in 1..30 {
            assert!(nemenyi_cd(6, n + 1, alpha).unwrap() < nemenyi_cd(6, n, alpha).unwrap());
        }
    }
}

#[test]
fn cd_groups() {
    // Ranks 1 and 2 with N = 1: CD(K=2) = 1.96·sqrt(1/3) ≈ 1.13 > 1.
    let close = matrix(&[("A", &[90.0]), ("B", &[80.0])]);
    assert_eq!(cd_report(&close, 0.05).unwrap().groups, vec![(0, 1)]);
    // N = 12 shrinks CD to ≈ 0.33 < 1.
    let far = matrix(&[("A", &[90.0; 12]), ("B", &[80.0; 12])]);
    let r = cd_report(&far, 0.05).unwrap();
    assert_eq!(r.groups, vec![(0, 0), (1, 1)]);
    assert!(r.to_text().contains("Nemenyi CD"));
}

#[test]
fn fixture_report_best_method() {
    let r = cd_report(&crate::fixtures::method_comparison().unwrap(), 0.05).unwrap();
    assert_eq!(r.ranking[0].method, "SCS-SupCon");
    assert!((r.cd - 8.7555).abs() < 1e-3);
    assert_eq!(r.ranks_csv().lines().count(), 16);
    assert!(r.groups.iter().all(|&(a, b)| a <= b));
}

#[test]
fn malformed_matrix_rejected() {
    let p = Path::new("m.csv");
    assert!(AccuracyMatrix::from_csv_str("m,a\nX,1\n", None, p).is_err());
    assert!(AccuracyMatrix::from_csv_str("m,a\nX,1\nY,zz\n", None, p).is_err());
    assert!(AccuracyMatrix::from_csv_str("m,a,b\nX,1,2\nY,3\n", None, p).is_err());
    let m = AccuracyMatrix::from_csv_str("m,a\nX,0.5\nY,0.25\n", None, p).unwrap();
    assert_eq!(m.unit, AccuracyUnit::Fraction);
    assert!(AccuracyMatrix::from_csv_str("m,a\nX,0.5\nY,2\n", Some(AccuracyUnit::Fraction), p).is_err());
}

proptest! {
    #[test]
    fn ranks_invariant_under_monotone_maps(vals in proptest::collection::vec(0.0f64..100.0, 12)) {
        let rows: Vec<Vec<f64>> = vals.chunks(3).map(<[f64]>::to_vec).collect();
        let names: Vec<String> = (0..4).map(|i| format!("m{i}")).collect();
        let trials: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let m = AccuracyMatrix::new(names.clone(), trials.clone(), rows.clone(), AccuracyUnit::Percent).unwrap();
        let mapped: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| (v / 100.0).powi(3)).collect()).collect();
        let m2 = AccuracyMatrix::new(names, trials, mapped, AccuracyUnit::Fraction).unwrap();
        prop_assert_eq!(average_ranks(&m).average, average_ranks(&m2).average);
    }

    #[test]
    fn friedman_invariant_under_method_order(vals in proptest::collection::vec(0.0f64..100.0, 15), shift in 1usize..5) {
        let rows: Vec<Vec<f64>> = vals.chunks(3).map(<[f64]>::to_vec).collect();
        let names: Vec<String> = (0..5).map(|i| format!("m{i}")).collect();
        let trials: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let m = AccuracyMatrix::new(names.clone(), trials.clone(), rows.clone(), AccuracyUnit::Percent).unwrap();
        let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
        let m2 = AccuracyMatrix::new(
            perm.iter().map(|&i| names[i].clone()).collect(),
            trials,
            perm.iter().map(|&i| rows[i].clone()).collect(),
            AccuracyUnit::Percent,
        ).unwrap();
        let a = friedman_statistic(&average_ranks(&m).average, 3).unwrap().chi_sq;
        let b = friedman_statistic(&average_ranks(&m2).average, 3).unwrap().chi_sq;
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn t_test_antisymmetric(a in proptest::collection::vec(0.0f64..1.0, 5), b in proptest::collection::vec(0.0f64..1.0, 5)) {
        let x = paired_t_test(&a, &b).unwrap();
        let y = paired_t_test(&b, &a).unwrap();
        prop_assert_eq!(x.p, y.p);
        prop_assert_eq!(x.t, -y.t);
    }
}
