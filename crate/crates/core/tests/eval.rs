use std::sync::OnceLock;

use ctsel::data::{generate_dataset, Dataset, GenerationConfig, SplitSizes};
use ctsel::eval::*;
use ctsel::models::{Architecture, Flavor, TrainConfig};
use ctsel::selection::{ConstraintKind, SelectionConfig, SelectionResult};
use ctsel::sim::System;
use ctsel::uncertainty::{Method, UncertaintyConfig, UncertaintyEstimate};

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let cfg = GenerationConfig {
            system: System::Covid,
            sizes: SplitSizes {
                train: 48,
                val: 16,
                test: 6,
            },
            ..GenerationConfig::default()
        };
        generate_dataset(&cfg, 4).unwrap()
    })
}

fn plan(lambdas: Vec<f64>, replicates: usize) -> SweepPlan<'static> {
    let ds = dataset();
    SweepPlan {
        dataset: ds,
        arch: Architecture {
            hidden: 12,
            ..Architecture::new(Flavor::CrnLite, ds.grid())
        },
        training: TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
        uncertainty: UncertaintyConfig {
            passes: 4,
            ..UncertaintyConfig::default()
        },
        selection: SelectionConfig {
            steps: 8,
            ..SelectionConfig::default()
        },
        spec: SweepSpec {
            lambdas,
            replicates,
            ..SweepSpec::default()
        },
        seed: 2,
        workers: 2,
    }
}

fn fake_result(mu: Vec<f64>, a: Vec<f64>) -> SelectionResult {
    SelectionResult {
        raw_params: a.clone(),
        a_star: a,
        objective_trace: vec![0.0],
        best_step: 0,
        estimate: UncertaintyEstimate {
            var: vec![0.0; mu.len()],
            mu,
            n_passes: 2,
            method: Method::Ensemble,
        },
    }
}

const TAG: CellTag = CellTag {
    method: Method::Ensemble,
    constraint: ConstraintKind::Soft,
    lambda: 0.0,
    replicate: 0,
};

#[test]
fn factual_doses_reproduce_factual_outcomes() {
    let ds = dataset();
    let ctx = EvalContext::from_dataset(ds);
    for p in &ds.test {
        let a = p.horizon_treatments(ds.grid());
        assert_eq!(ctx.counterfactual(p, &a).unwrap(), p.horizon_outcomes(ds.grid()));
    }
}

#[test]
fn exact_and_offset_predictions() {
    let ds = dataset();
    let ctx = EvalContext::from_dataset(ds);
    let p = &ds.test[0];
    let a = vec![0.3; 10];
    let truth = ctx.counterfactual(p, &a).unwrap();
    let exact = evaluate_selection(&ctx, &fake_result(truth.clone(), a.clone()), p, 0, &truth, TAG).unwrap();
    assert_eq!((exact.rmse_selection, exact.rmse_target), (0.0, 0.0));
    let shifted: Vec<f64> = truth.iter().map(|y| y + 0.125).collect();
    let rec = evaluate_selection(&ctx, &fake_result(shifted, a), p, 0, &[0.0; 10], TAG).unwrap();
    assert!((rec.rmse_selection - 0.125).abs() < 1e-15);
    assert_eq!(rec.rmse_target, rmse(&truth, &[0.0; 10]));
}

#[test]
fn missing_hidden_state_is_an_error() {
    let ds = dataset();
    let ctx = EvalContext::from_dataset(ds);
    let mut p = ds.test[0].clone();
    p.state.truncate(5);
    assert!(ctx.counterfactual(&p, &[0.5; 10]).is_err());
}

#[test]
fn sweep_bookkeeping_and_isolation() {
    let before = dataset().clone();
    let plan = plan(vec![0.0, 4.0], 2);
    let mut flushed = Vec::new();
    let records = run_lambda_sweep(&plan, |m, r| plan.train_handle(m, r), |batch| {
        flushed.push(batch.len());
        Ok(())
    })
    .unwrap();
    assert_eq!(dataset(), &before);
    // one flush per λ cell, n_test records each
    assert_eq!(flushed, vec![6; 4]);
    for lambda in [0.0, 4.0] {
        assert_eq!(records.iter().filter(|r| r.lambda == lambda).count(), 6 * 2);
    }
    for r in &records {
        assert!(r.rmse_selection.is_finite() && r.rmse_selection > 0.0, "{r:?}");
        assert!(r.rmse_target.is_finite() && r.mean_variance >= 0.0);
    }

    // aggregation against a direct recomputation
    for row in summarize(&records) {
        let rep_means: Vec<f64> = (0..2)
            .map(|rep| {
                let v: Vec<f64> = records
                    .iter()
                    .filter(|r| r.lambda == row.lambda && r.replicate == rep)
                    .map(|r| r.rmse_selection)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        let mean = (rep_means[0] + rep_means[1]) / 2.0;
        let se = (rep_means[0] - rep_means[1]).abs() / 2.0;
        assert!((row.rmse_selection_mean - mean).abs() < 1e-12);
        assert!((row.rmse_selection_stderr - se).abs() < 1e-12);
    }

    // records survive a CSV round trip and rerunning is bitwise stable
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    write_records(&path, &records).unwrap();
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with(
        "dataset,method,constraint,lambda,replicate,patient,rmse_selection,rmse_target,mean_variance\n"
    ));
    assert_eq!(read_records(&path).unwrap(), records);
    let again = run_lambda_sweep(&plan, |m, r| plan.train_handle(m, r), |_| Ok(())).unwrap();
    let path2 = dir.path().join("again.csv");
    write_records(&path2, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

    // deferral: p = 100 compares identical sets; least-uncertain subsets nest
    let pts = deferral_curve(&records, &DEFAULT_PERCENTILES, 0).unwrap();
    assert_eq!(pts.len(), 4 * DEFAULT_PERCENTILES.len());
    for p in pts.iter().filter(|p| p.percentile == 100.0) {
        assert!((p.least_uncertain - p.random).abs() < 1e-12);
        assert_eq!(p.n, 6);
    }
}

#[test]
fn zero_only_sweep_is_plain_selection() {
    let plan = plan(vec![0.0], 1);
    let records = run_lambda_sweep(&plan, |m, r| plan.train_handle(m, r), |_| Ok(())).unwrap();
    let handle = plan.train_handle(Method::McDropout, 0).unwrap();
    let ctx = EvalContext::from_dataset(dataset());
    let cfg = SelectionConfig {
        lambda: 0.0,
        ..plan.selection.clone()
    };
    // the sweep's first patient agrees with a direct call using its seed
    let seed = selection_seed(plan.seed, 0, 0);
    let (_, direct) = select_and_evaluate(&ctx, &handle, &dataset().test[0], 0, &cfg, 0, seed).unwrap();
    assert_eq!(records[0], direct);
}

#[test]
fn mismatched_handle_is_rejected() {
    let plan = plan(vec![0.0], 1);
    let err = run_lambda_sweep(
        &plan,
        |_, r| plan.train_handle(Method::Ensemble, r),
        |_| Ok(()),
    );
    assert!(err.is_err());
}

#[test]
fn end_to_end_record_is_finite_and_positive() {
    let plan = plan(vec![1.0], 1);
    let handle = plan.train_handle(Method::McDropout, 0).unwrap();
    let ctx = EvalContext::from_dataset(dataset());
    let (res, rec) = select_and_evaluate(&ctx, &handle, &dataset().test[1], 1, &plan.selection, 0, 5).unwrap();
    assert_eq!(res.objective_trace.len(), 9);
    assert!(rec.rmse_selection > 0.0 && rec.rmse_selection.is_finite());
    assert!(rec.rmse_target > 0.0 && rec.mean_variance > 0.0);
    assert_eq!(rec.dataset, System::Covid);
}
