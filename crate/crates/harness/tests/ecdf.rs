use kmevo_harness::config::Solver;
use kmevo_harness::ecdf::{compute_ecdf, default_targets, hitting_time};
use kmevo_harness::record::RunRecord;
use kmevo_harness::HarnessError;
use proptest::prelude::*;

fn rec(id: &str, budget: usize, convergence: Vec<(usize, f64)>) -> RunRecord {
    let final_best = convergence.last().map_or(f64::INFINITY, |c| c.1);
    RunRecord {
        run_id: id.into(),
        solver: Solver::Learned,
        function: String::new(),
        seed: 0,
        config: String::new(),
        params_hash: None,
        trajectory_csv: "trajectory.csv".into(),
        budget,
        evals: budget,
        f_opt: 1.0,
        final_best,
        final_error: final_best - 1.0,
        wall_time: 0.0,
        convergence,
    }
}

#[test]
fn targets_span_ten_orders() {
    let t = default_targets();
    assert_eq!(t.len(), 21);
    assert!((t[0] - 100.0).abs() < 1e-12);
    assert!((t[20] - 1e-8).abs() < 1e-20);
    assert!(t.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn all_solved_at_first_evaluation() {
    let recs = vec![rec("a", 50, vec![(1, 1.0)]), rec("b", 50, vec![(1, 0.5)])];
    let c = compute_ecdf(&recs, &default_targets()).unwrap();
    assert_eq!(c.at(0), 0.0);
    assert_eq!(c.at(1), 1.0);
    assert_eq!(c.at_fraction(1.0), 1.0);
}

#[test]
fn none_solved() {
    let recs = vec![rec("a", 50, vec![(1, 500.0), (40, 200.0)])];
    let c = compute_ecdf(&recs, &default_targets()).unwrap();
    assert!(c.evals.is_empty());
    assert_eq!(c.at(50), 0.0);
}

#[test]
fn two_record_fixture() {
    // errors relative to f_opt = 1: a reaches 0.5 at 3 and 0.05 at 7, b reaches 0.8 at 5
    let recs = vec![
        rec("a", 10, vec![(1, 9.0), (3, 1.5), (7, 1.05)]),
        rec("b", 10, vec![(2, 4.0), (5, 1.8)]),
    ];
    let c = compute_ecdf(&recs, &[1.0, 0.1]).unwrap();
    assert_eq!(c.evals, vec![3, 5, 7]);
    assert_eq!(c.values, vec![0.25, 0.5, 0.75]);
    assert_eq!(c.at(4), 0.25);
    assert_eq!(c.at(6), 0.5);
    assert_eq!(c.at(10), 0.75);
    assert_eq!(hitting_time(&recs[1], 0.1), None);
}

#[test]
fn ties_merge_into_one_step() {
    let recs = vec![rec("a", 10, vec![(4, 1.0)]), rec("b", 10, vec![(4, 1.0)])];
    let c = compute_ecdf(&recs, &[1.0]).unwrap();
    assert_eq!(c.evals, vec![4]);
    assert_eq!(c.values, vec![1.0]);
}

#[test]
fn contract_errors() {
    assert!(matches!(compute_ecdf(&[], &[1.0]), Err(HarnessError::Contract(_))));
    let one = vec![rec("a", 10, vec![])];
    assert!(matches!(compute_ecdf(&one, &[]), Err(HarnessError::Contract(_))));
    let mixed = vec![rec("a", 10, vec![]), rec("b", 20, vec![])];
    assert!(matches!(compute_ecdf(&mixed, &[1.0]), Err(HarnessError::Contract(_))));
}

fn convergence_strategy() -> impl Strategy<Value = Vec<(usize, f64)>> {
    prop::collection::vec((1usize..5, 0.0f64..1.0), 0..12).prop_map(|steps| {
        let (mut n, mut f) = (0, 1e3);
        steps
            .into_iter()
            .map(|(dn, shrink)| {
                n += dn;
                f = 1.0 + (f - 1.0) * shrink;
                (n, f)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn curve_is_monotone_and_bounded(convs in prop::collection::vec(convergence_strategy(), 1..6)) {
        let recs: Vec<RunRecord> = convs.into_iter().enumerate().map(|(i, c)| rec(&i.to_string(), 64, c)).collect();
        let c = compute_ecdf(&recs, &default_targets()).unwrap();
        prop_assert!(c.evals.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(c.values.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(c.values.iter().all(|v| *v > 0.0 && *v <= 1.0));
        let mut prev = 0.0;
        for n in 0..=64 {
            let v = c.at(n);
            prop_assert!(v >= prev);
            prev = v;
        }
    }
}
