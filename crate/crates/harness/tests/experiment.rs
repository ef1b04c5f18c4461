use kmevo::benchmarks::Family;
use kmevo::meta::Sharing;
use kmevo_harness::config::{ExperimentConfig, Solver};
use kmevo_harness::experiment::{
    compare, mean_std, params_hash, reproduce, run_ablation, run_eval, run_job, sign_test, suite_jobs, EvalJob,
    FamilyErrors, Variant, VariantResult,
};
use kmevo_harness::HarnessError;

fn small(text: &str) -> ExperimentConfig {
    let base = [
        "train_families = sphere",
        "eval_families = sphere",
        "budget = 496",
        "iterations = 3",
        "tasks_per_batch = 2",
    ];
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = text.lines().map(key).collect();
    let mut lines: Vec<&str> = base.into_iter().filter(|l| !overridden.contains(&key(l))).collect();
    lines.extend(text.lines());
    ExperimentConfig::parse(&lines.join("\n")).unwrap()
}

fn same_outcome(a: &kmevo_harness::record::RunRecord, b: &kmevo_harness::record::RunRecord) {
    assert_eq!(a.run_id, b.run_id);
    assert_eq!(a.evals, b.evals);
    assert_eq!(a.final_best.to_bits(), b.final_best.to_bits());
    assert_eq!(format!("{:?}", a.convergence), format!("{:?}", b.convergence));
}

#[test]
fn one_seed_one_function_gives_one_record() {
    let cfg = small("seeds = 7\nsolvers = learned");
    let jobs = suite_jobs(&cfg);
    assert_eq!(jobs.len(), 1);
    let store = cfg.meta.init_params().unwrap();
    let runs = run_eval(&cfg, Some(&store), &jobs).unwrap();
    assert_eq!(runs.len(), 1);
    let r = &runs[0].record;
    // 16 initial evaluations, then pop 16 × 3 evaluations × 10 steps
    assert_eq!(r.evals, 496);
    assert_eq!(r.budget, 496);
    assert_eq!(r.seed, 7);
    assert_eq!(r.params_hash.as_deref(), Some(params_hash(&store).as_str()));
    assert_eq!(r.expected_id(), r.run_id);
    assert!(r.final_error >= 0.0);
}

#[test]
fn suite_nests_solver_family_seed() {
    let cfg = small("seeds = 0..3\neval_families = sphere,rastrigin\nsolvers = de,pso\nbudget = 1136");
    let jobs = suite_jobs(&cfg);
    assert_eq!(jobs.len(), 12);
    assert_eq!(jobs[0].solver, Solver::De);
    assert_eq!(jobs[3].spec.family, Family::Rastrigin);
    assert_eq!(jobs[6].solver, Solver::Pso);
    assert_eq!(jobs[11].seed, 2);
}

#[test]
fn baselines_spend_the_budget_exactly() {
    let cfg = small("seeds = 0,1\nsolvers = random-search,de,pso\nbudget = 777");
    let runs = run_eval(&cfg, None, &suite_jobs(&cfg)).unwrap();
    assert_eq!(runs.len(), 6);
    for r in &runs {
        assert_eq!(r.record.evals, 777, "{}", r.record.solver);
        assert!(r.record.params_hash.is_none());
    }
}

#[test]
fn learned_without_parameters_is_a_contract_error() {
    let cfg = small("seeds = 0\nsolvers = learned");
    let job = &suite_jobs(&cfg)[0];
    assert!(matches!(run_job(&cfg, None, job), Err(HarnessError::Contract(_))));
    assert!(matches!(run_eval(&cfg, None, &[]), Err(HarnessError::Contract(_))));
}

#[test]
fn reproduce_is_bit_exact() {
    let cfg = small("seeds = 4\nsolvers = learned,de");
    let store = cfg.meta.init_params().unwrap();
    for out in run_eval(&cfg, Some(&store), &suite_jobs(&cfg)).unwrap() {
        let again = reproduce(&out.record, Some(&store)).unwrap();
        same_outcome(&out.record, &again);
    }
}

#[test]
fn reproduce_rejects_other_parameters() {
    let cfg = small("seeds = 4\nsolvers = learned");
    let store = cfg.meta.init_params().unwrap();
    let rec = run_job(&cfg, Some(&store), &suite_jobs(&cfg)[0]).unwrap().record;
    let mut other_meta = cfg.meta.clone();
    other_meta.seed += 1;
    let other = other_meta.init_params().unwrap();
    assert!(matches!(reproduce(&rec, Some(&other)), Err(HarnessError::Contract(_))));
}

#[test]
fn unknown_job_function_fails_cleanly() {
    let cfg = small("seeds = 0\nsolvers = de");
    let mut job: EvalJob = suite_jobs(&cfg)[0].clone();
    job.spec.dim = 0;
    assert!(run_job(&cfg, None, &job).is_err());
}

#[test]
fn sign_test_values() {
    assert_eq!(sign_test(0, 0), 1.0);
    assert!((sign_test(10, 0) - 2.0 / 1024.0).abs() < 1e-15);
    assert!((sign_test(0, 10) - 2.0 / 1024.0).abs() < 1e-15);
    assert!((sign_test(8, 2) - 112.0 / 1024.0).abs() < 1e-12);
    assert_eq!(sign_test(5, 5), 1.0);
    // large n stays finite and symmetric
    let p = sign_test(600, 400);
    assert!(p > 0.0 && p < 1e-9);
    assert_eq!(p, sign_test(400, 600));
}

#[test]
fn mean_std_uses_sample_variance() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
}

#[test]
fn variants_parse_and_patch() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    let err = "no-attention".parse::<Variant>().unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("no-attention"));

    let base = ExperimentConfig::default().meta;
    assert_eq!(Variant::Full.apply(&base), base);
    assert_eq!(Variant::Shared.apply(&base).sharing, Sharing::Shared);
    let shared = Variant::Shared.apply(&base).init_params().unwrap().trainable_count();
    let unshared = Variant::Unshared.apply(&base).init_params().unwrap().trainable_count();
    assert_eq!(unshared, base.inner.k * shared);
}

fn result(variant: Variant, errors: &[&[f64]]) -> VariantResult {
    let families = errors
        .iter()
        .zip([Family::Sphere, Family::Ellipsoidal])
        .map(|(e, family)| {
            let (mean, std) = mean_std(e);
            FamilyErrors {
                family,
                errors: e.to_vec(),
                mean,
                std,
            }
        })
        .collect();
    VariantResult {
        variant,
        trainable_params: 0,
        final_meta_loss: 0.0,
        families,
        mean: 0.0,
        std: 0.0,
    }
}

#[test]
fn comparison_counts_pairs() {
    let full = result(Variant::Full, &[&[1.0, 2.0, 3.0], &[5.0, 5.0, 1.0]]);
    let other = result(Variant::NoMamba, &[&[2.0, 2.0, 4.0], &[4.0, 4.0, 4.0]]);
    let c = compare(&full, &other).unwrap();
    assert_eq!((c.wins, c.losses, c.ties), (3, 2, 1));
    assert_eq!(c.functions_full_not_worse, 2);
    assert_eq!(c.functions, 2);
    assert_eq!(c.p_value, sign_test(3, 2));

    let short = result(Variant::NoMamba, &[&[1.0, 2.0, 3.0]]);
    assert!(matches!(compare(&full, &short), Err(HarnessError::Contract(_))));
}

#[test]
fn ablation_has_paired_rows() {
    let cfg = small("seeds = 0..10\niterations = 2");
    let table = run_ablation(&cfg, &[Variant::NoProxyGrad]).unwrap();
    assert_eq!(table.results.len(), 2);
    assert_eq!(table.results[0].variant, Variant::Full);
    for r in &table.results {
        assert_eq!(r.families.len(), 1);
        assert_eq!(r.families[0].family, Family::Sphere);
        assert_eq!(r.families[0].errors.len(), 10);
    }
    let c = &table.comparisons[0];
    assert_eq!(c.variant, Variant::NoProxyGrad);
    assert_eq!(c.wins + c.losses + c.ties, 10);
    assert!(table.sharing.is_none());
    let text = table.render();
    assert!(text.contains("full vs no-proxygrad"), "{text}");
}

#[test]
fn sharing_comparison_when_both_run() {
    let cfg = small("seeds = 0,1\niterations = 1\nk = 3\nbudget = 160");
    let table = run_ablation(&cfg, &[Variant::Shared, Variant::Unshared]).unwrap();
    let s = table.sharing.as_ref().expect("sharing row");
    assert_eq!(s.variant, Variant::Shared);
    let params = |v: Variant| table.results.iter().find(|r| r.variant == v).unwrap().trainable_params;
    assert_eq!(params(Variant::Unshared), 3 * params(Variant::Shared));
    assert!(table.render().contains("unshared vs shared"));
}
