use kmevo::solver::TrajectoryRow;
use kmevo_harness::config::{ExperimentConfig, Solver};
use kmevo_harness::record::{
    load_records, parse_trajectory_csv, read_record, read_trajectory, run_id, trajectory_csv, write_run, RunRecord,
    CONFIG_FILE, RECORD_FILE, TRAJECTORY_FILE,
};
use kmevo_harness::HarnessError;

fn row(step: usize) -> TrajectoryRow {
    TrajectoryRow {
        step,
        best_fit: 1.5 / (step + 1) as f64,
        mean_fit: 3.25,
        gate_mean: 0.125,
        lambda_ssm: 0.6,
        lambda_attn: 0.4,
        residual_norm: f64::NAN,
    }
}

fn record(seed: u64) -> RunRecord {
    let config = ExperimentConfig::default().to_text();
    let function = "family=Sphere dim=2 seed=7 f_opt=0.0 rotate=0 shift=4.0 lo=-5.0 hi=5.0 surrogate=0 fd=0".to_string();
    RunRecord {
        run_id: run_id(&config, Solver::RandomSearch, &function, seed, None),
        solver: Solver::RandomSearch,
        function,
        seed,
        config,
        params_hash: None,
        trajectory_csv: TRAJECTORY_FILE.into(),
        budget: 10,
        evals: 10,
        f_opt: 0.0,
        final_best: 0.25,
        final_error: 0.25,
        wall_time: 0.01,
        convergence: vec![(1, 4.0), (3, 1.0), (9, 0.25)],
    }
}

#[test]
fn csv_header_is_fixed() {
    let text = trajectory_csv(&[]);
    assert_eq!(text, "step,best_fit,mean_fit,gate_mean,lambda_ssm,lambda_attn,residual_norm\n");
}

#[test]
fn csv_round_trips_including_nan() {
    let rows: Vec<TrajectoryRow> = (0..4).map(row).collect();
    let text = trajectory_csv(&rows);
    assert_eq!(text.lines().count(), 5);
    let back = parse_trajectory_csv(&text, "t.csv").unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.best_fit, b.best_fit);
        assert_eq!(a.lambda_attn, b.lambda_attn);
        assert!(b.residual_norm.is_nan());
    }
}

#[test]
fn csv_errors_carry_line_numbers() {
    let bad_header = "step,best\n0,1\n";
    assert!(matches!(
        parse_trajectory_csv(bad_header, "a.csv"),
        Err(HarnessError::Csv { line: 1, .. })
    ));
    let mut text = trajectory_csv(&[row(0), row(1)]);
    text.push_str("2,1,2,3\n");
    assert!(matches!(
        parse_trajectory_csv(&text, "a.csv"),
        Err(HarnessError::Csv { line: 4, .. })
    ));
    let text = trajectory_csv(&[row(0)]).replace("3.25", "x");
    let err = parse_trajectory_csv(&text, "a.csv").unwrap_err();
    assert!(matches!(err, HarnessError::Csv { line: 2, .. }));
    assert!(err.to_string().contains("mean_fit"), "{err}");
}

#[test]
fn run_directory_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = record(3);
    let rows: Vec<TrajectoryRow> = (0..3).map(row).collect();
    let dir = write_run(tmp.path(), &rec, &rows).unwrap();
    assert_eq!(dir, tmp.path().join(&rec.run_id));
    for f in [CONFIG_FILE, TRAJECTORY_FILE, RECORD_FILE] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(dir.join(CONFIG_FILE)).unwrap(), rec.config);
    assert_eq!(read_record(&dir).unwrap(), rec);
    assert_eq!(read_trajectory(&dir).unwrap().len(), 3);
}

#[test]
fn load_records_sorts_by_id_and_skips_other_entries() {
    let tmp = tempfile::tempdir().unwrap();
    let recs: Vec<RunRecord> = (0..4).map(record).collect();
    for r in &recs {
        write_run(tmp.path(), r, &[]).unwrap();
    }
    std::fs::write(tmp.path().join("ecdf.json"), "{}").unwrap();
    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    let loaded = load_records(tmp.path()).unwrap();
    assert_eq!(loaded.len(), 4);
    assert!(loaded.windows(2).all(|w| w[0].run_id < w[1].run_id));
}

#[test]
fn run_id_is_stable_under_reserialization() {
    let rec = record(5);
    assert_eq!(rec.expected_id(), rec.run_id);
    assert_eq!(rec.run_id.len(), 16);
    let reparsed = ExperimentConfig::parse(&rec.config).unwrap().to_text();
    assert_eq!(reparsed, rec.config);
    let json = serde_json::to_string(&rec).unwrap();
    let back: RunRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back.expected_id(), rec.run_id);
}

#[test]
fn run_id_depends_on_every_part() {
    let base = run_id("c", Solver::De, "f", 1, None);
    assert_ne!(base, run_id("c2", Solver::De, "f", 1, None));
    assert_ne!(base, run_id("c", Solver::Pso, "f", 1, None));
    assert_ne!(base, run_id("c", Solver::De, "g", 1, None));
    assert_ne!(base, run_id("c", Solver::De, "f", 2, None));
    assert_ne!(base, run_id("c", Solver::De, "f", 1, Some("ab")));
}
