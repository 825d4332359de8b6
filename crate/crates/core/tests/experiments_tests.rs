//! Harness-level checks: the oracle consistency control, table shapes,
//! byte-determinism under a multi-threaded pool, and reduced-scale smoke
//! runs of the finite-sample machinery.

mod common;

use macml::experiments::{
    run_asymptotic_study, run_finite_sample_study, run_tolerance_sweep, write_table,
    AsymptoticConfig, FiniteSampleConfig, Scale, ToleranceSweepConfig,
};

#[test]
fn oracle_only_study_shows_no_bias() {
    let cfg = AsymptoticConfig {
        seed: 31,
        l_values: Some(vec![1.0]),
        k_sd_values: Some(vec![1.0, 2.0]),
        models_per_cell: Some(5),
        methods: Some(vec!["oracle".into()]),
        min_prob_thresholds: Some(vec![0.0]),
        ..Default::default()
    };
    let table = run_asymptotic_study(&cfg.resolve(Scale::Desk).unwrap()).unwrap();
    assert_eq!(table.n_failed, 0);
    for row in &table.rows {
        if row.metric.contains("param") {
            assert!(row.value < 1e-4, "{row:?}");
        }
    }
}

#[test]
fn single_replication_collapses_rmse_to_mae() {
    let cfg = AsymptoticConfig {
        seed: 32,
        l_values: Some(vec![2.0]),
        k_sd_values: Some(vec![2.0]),
        models_per_cell: Some(1),
        methods: Some(vec!["ME".into()]),
        min_prob_thresholds: Some(vec![0.0]),
        ..Default::default()
    };
    let table = run_asymptotic_study(&cfg.resolve(Scale::Desk).unwrap()).unwrap();
    let mae = table
        .rows
        .iter()
        .find(|r| r.metric == "max_param_mae")
        .unwrap()
        .value;
    let rmse = table
        .rows
        .iter()
        .find(|r| r.metric == "max_param_rmse")
        .unwrap()
        .value;
    assert!((mae - rmse).abs() < 1e-14, "B=1 must give RMSE = MAE");
    assert_eq!(
        table
            .rows
            .iter()
            .find(|r| r.metric == "max_param_mae")
            .unwrap()
            .count,
        1
    );
}

#[test]
fn table_shape_one_row_per_method_metric_slice() {
    let methods = ["SJ-A", "ME"];
    let thresholds = [0.0, 0.01];
    let cfg = AsymptoticConfig {
        seed: 33,
        l_values: Some(vec![1.0]),
        k_sd_values: Some(vec![2.0]),
        models_per_cell: Some(40),
        methods: Some(methods.iter().map(|s| s.to_string()).collect()),
        min_prob_thresholds: Some(thresholds.to_vec()),
        ..Default::default()
    };
    let table = run_asymptotic_study(&cfg.resolve(Scale::Desk).unwrap()).unwrap();
    for m in methods {
        for x in thresholds {
            for metric in ["max_param_mae", "max_param_rmse", "max_prob_mae", "max_prob_rmse"] {
                let slice = format!("eta=1|min_prob={x}");
                let hits = table
                    .rows
                    .iter()
                    .filter(|r| r.method == m && r.slice == slice && r.metric == metric)
                    .count();
                assert_eq!(hits, 1, "{m} {slice} {metric}");
            }
        }
    }
    // Threshold slices are nested, so counts are nonincreasing in x.
    let count_at = |x: f64| {
        table
            .rows
            .iter()
            .find(|r| r.metric == "n_models" && r.slice == format!("eta=1|min_prob={x}"))
            .unwrap()
            .count
    };
    assert!(count_at(0.0) >= count_at(0.01));
}

#[test]
fn study_csv_bytes_are_deterministic_under_threads() {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let run = || {
        let cfg = AsymptoticConfig {
            seed: 34,
            l_values: Some(vec![1.0]),
            k_sd_values: Some(vec![1.0, 3.0]),
            models_per_cell: Some(4),
            methods: Some(vec!["SJ-A".into(), "bME".into()]),
            ..Default::default()
        };
        pool.install(|| run_asymptotic_study(&cfg.resolve(Scale::Desk).unwrap()).unwrap())
    };
    let t1 = run();
    let t2 = run();
    let dir = std::env::temp_dir();
    let (p1, p2) = (dir.join("macml_det_1.csv"), dir.join("macml_det_2.csv"));
    write_table(&t1, &p1).unwrap();
    write_table(&t2, &p2).unwrap();
    let b1 = std::fs::read(&p1).unwrap();
    let b2 = std::fs::read(&p2).unwrap();
    assert_eq!(b1, b2);
    let _ = std::fs::remove_file(&p1);
    let _ = std::fs::remove_file(&p2);
}

#[test]
fn probability_errors_do_not_exceed_parameter_errors() {
    let cfg = AsymptoticConfig {
        seed: 35,
        l_values: Some(vec![1.0, 2.0]),
        k_sd_values: Some(vec![1.0]),
        models_per_cell: Some(15),
        min_prob_thresholds: Some(vec![0.0]),
        ..Default::default()
    };
    let table = run_asymptotic_study(&cfg.resolve(Scale::Desk).unwrap()).unwrap();
    for method in ["SJ-A", "SJ-1", "ME", "bME"] {
        let get = |metric: &str| {
            table
                .rows
                .iter()
                .find(|r| r.method == method && r.metric == metric)
                .unwrap()
                .value
        };
        assert!(
            get("max_prob_mae") <= get("max_param_mae") + 1e-12,
            "{method}"
        );
    }
}

#[test]
fn finite_sample_smoke_rows_are_populated() {
    let cfg = FiniteSampleConfig {
        seed: 36,
        n_obs: Some(300),
        n_datasets: Some(2),
        methods: Some(vec!["ME".into()]),
        grad_tol: Some(0.5e-3),
        ..Default::default()
    };
    let table = run_finite_sample_study(&cfg.resolve(Scale::Desk).unwrap()).unwrap();
    assert_eq!(table.n_failed, 0);
    // 20 parameters x 3 statistics + summaries + quotients + counters.
    let param_rows = table
        .rows
        .iter()
        .filter(|r| r.slice.starts_with("param="))
        .count();
    assert_eq!(param_rows, 60);
    assert!(table.rows.iter().any(|r| r.slice == "quotient=b2/b1"));
    assert!(table.rows.iter().any(|r| r.metric == "mean_mae"));
    assert_eq!(table.timing.len(), 1);
    let nonconv = table
        .rows
        .iter()
        .find(|r| r.metric == "n_nonconverged")
        .unwrap();
    assert_eq!(nonconv.value, 0.0, "fits did not converge");
}

#[test]
fn oracle_fits_recover_parameters_at_reduced_scale() {
    // Sampling-noise-only baseline: oracle fits on a small mixed model
    // (two alternatives keeps the reference evaluation closed-form fast).
    let cfg = FiniteSampleConfig {
        seed: 37,
        j: Some(3),
        mu: Some(vec![1.0, -0.8]),
        gamma: Some(vec![vec![1.0, -0.3], vec![-0.3, 1.0]]),
        n_obs: Some(400),
        n_datasets: Some(2),
        methods: Some(vec!["oracle".into()]),
        grad_tol: Some(0.5e-4),
        ..Default::default()
    };
    let table = run_finite_sample_study(&cfg.resolve(Scale::Desk).unwrap()).unwrap();
    assert_eq!(table.n_failed, 0);
    let mean_mae = table
        .rows
        .iter()
        .find(|r| r.method == "oracle" && r.metric == "mean_mae")
        .unwrap()
        .value;
    assert!(mean_mae < 0.25, "oracle mean MAE {mean_mae}");
}

#[test]
fn tolerance_sweep_reports_sad_against_previous_level() {
    let cfg = ToleranceSweepConfig {
        base: FiniteSampleConfig {
            seed: 38,
            j: Some(3),
            mu: Some(vec![0.8, -0.5]),
            gamma: Some(vec![vec![1.0, 0.2], vec![0.2, 1.0]]),
            n_obs: Some(300),
            n_datasets: Some(2),
            methods: Some(vec!["ME".into()]),
            ..Default::default()
        },
        grad_tols: Some(vec![0.5e-3, 0.5e-5]),
    };
    let table = run_tolerance_sweep(&cfg.resolve(Scale::Desk).unwrap()).unwrap();
    let sad_rows: Vec<_> = table
        .rows
        .iter()
        .filter(|r| r.metric == "sad_vs_previous_tol")
        .collect();
    assert_eq!(sad_rows.len(), 1);
    assert!(sad_rows[0].value.is_finite() && sad_rows[0].value >= 0.0);
    assert!(sad_rows[0].slice.contains("grad_tol=0.000005"));
    let mae_rows = table
        .rows
        .iter()
        .filter(|r| r.metric == "mean_mae")
        .count();
    assert_eq!(mae_rows, 2);
}
