use std::fs;
use std::path::Path;

use mtbkd::experiment::pipeline::{read_manifest, run_stage, simulate, train_teachers, student_spec, run_baseline};
use mtbkd::experiment::{emit_toy, run_algorithm1, run_toy, ExperimentConfig, Method, Scenario};
use mtbkd::nn::NetworkSpec;
use mtbkd::posterior::{kd_loss, multi_kd_loss, KdWeights};
use mtbkd::teachers::mean_ce;
use mtbkd::Error;
use tempfile::TempDir;

const SMALL: &str = r#"
[experiment]
scenario = "sim1"
seed = 7

[data]
n = 600
teacher_pool_n = 600

[teachers]
corpus_size = 150
epochs = 15

[student]
warm_start_epochs = 2

[sgld]
total_iters = 400
burn_in = 200
thinning = 10

[baseline]
epochs = 3
"#;

fn small(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const RESULT_FILES: [&str; 6] = [
    "metrics.csv",
    "coverage.csv",
    "uncertainty.csv",
    "plotdata/test_points.csv",
    "plotdata/teacher_weights.csv",
    "plotdata/coverage_curve.csv",
];

#[test]
fn full_run_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path());
    let out = run_algorithm1(&cfg, true).unwrap();
    for f in RESULT_FILES {
        assert!(tmp.path().join(f).is_file(), "missing {f}");
    }
    for m in &cfg.methods {
        assert!(tmp.path().join(format!("uncertainty_{m}.csv")).is_file());
    }

    let coverage = read(tmp.path(), "coverage.csv");
    assert_eq!(coverage.lines().next(), Some("method,level,coverage"));
    assert_eq!(coverage.lines().count() - 1, cfg.methods.len() * cfg.levels.len());

    let metrics = read(tmp.path(), "metrics.csv");
    assert_eq!(metrics.lines().next(), Some("method,domain,n,accuracy,mse"));
    // Overall plus three domains for every method and teacher.
    assert_eq!(metrics.lines().count() - 1, 4 * (cfg.methods.len() + 2));

    let unc = read(tmp.path(), "uncertainty.csv");
    let header: Vec<&str> = unc.lines().next().unwrap().split(',').collect();
    for col in [
        "index",
        "x_1",
        "x_2",
        "true_label",
        "predicted_class",
        "mean_deviance",
        "ci_upper_85",
        "ci_upper_90",
        "ci_upper_95",
        "covered_85",
        "covered_90",
        "covered_95",
    ] {
        assert!(header.contains(&col), "uncertainty.csv lacks {col}");
    }
    assert_eq!(unc.lines().count() - 1, out.data.splits.test.len());

    let manifest = read_manifest(tmp.path()).unwrap();
    for key in [
        "domain_partition",
        "split_ratios",
        "teacher_specialties",
        "teacher_corpus_size",
        "sgld_schedule",
        "burn_in",
        "thinning",
        "lambda",
        "multikd_weights",
        "mode_estimate",
    ] {
        assert!(manifest.open_defaults.contains_key(key), "manifest lacks {key}");
    }
    assert_eq!(manifest.lambda_used, Some(1.0));
    assert!(manifest.failed_stage.is_none());
    assert_eq!(manifest.teacher_corpora.len(), 2);
    assert!(manifest.divergence.values().all(Option::is_none));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    run_algorithm1(&small(a.path()), true).unwrap();
    run_algorithm1(&small(b.path()), true).unwrap();
    for f in RESULT_FILES {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
    let (mut ma, mut mb) = (read_manifest(a.path()).unwrap(), read_manifest(b.path()).unwrap());
    ma.timings.clear();
    mb.timings.clear();
    ma.config = None;
    mb.config = None;
    assert_eq!(serde_json::to_string(&ma).unwrap(), serde_json::to_string(&mb).unwrap());
}

#[test]
fn staged_run_matches_one_shot() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    run_algorithm1(&small(a.path()), true).unwrap();
    let cfg = small(b.path());
    for stage in ["simulate", "train-teachers", "distill", "evaluate"] {
        run_stage(&cfg, stage).unwrap();
    }
    for f in ["metrics.csv", "coverage.csv", "uncertainty.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
    let m = read_manifest(b.path()).unwrap();
    for s in ["simulate", "train_teachers", "distill"] {
        assert!(m.stages_completed.iter().any(|c| c == s), "{s} not recorded");
    }
}

#[test]
fn stage_without_inputs_names_the_stage() {
    let tmp = TempDir::new().unwrap();
    let err = run_stage(&small(tmp.path()), "distill").unwrap_err();
    assert!(matches!(err, Error::Stage { .. }), "{err}");
    assert!(err.to_string().contains("distill"));
    assert_eq!(read_manifest(tmp.path()).unwrap().failed_stage.as_deref(), Some("distill"));
}

#[test]
fn single_teacher_multikd_is_kd_and_zero_lambda_is_erm() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path());
    let data = simulate(&cfg).unwrap();
    let teachers = train_teachers(&cfg, &data).unwrap();
    let train = &data.splits.train;
    let spec: NetworkSpec = student_spec(&cfg, train).unwrap();
    let one = teachers.train_predictions.single(0).unwrap();
    let theta = mtbkd::experiment::pipeline::student_init(&cfg, &spec);
    for lambda in [0.0, 0.7, 2.0] {
        let kd = kd_loss(&spec, train, &one, &theta, lambda).unwrap();
        for w in [KdWeights::Global(vec![1.0]), KdWeights::PerSample] {
            assert_eq!(multi_kd_loss(&spec, train, &one, &theta, lambda, &w).unwrap(), kd);
        }
    }
    let erm = mean_ce(&spec, &theta, train).unwrap();
    assert!((kd_loss(&spec, train, &one, &theta, 0.0).unwrap() - erm).abs() < 1e-12);

    // With λ = 0 every baseline collapses to the same empirical-risk fit.
    let fits: Vec<_> = [Method::KdSingle(1), Method::KdSingle(2), Method::MultikdWeighted, Method::MultikdEqual]
        .into_iter()
        .map(|m| run_baseline(&cfg, m, &spec, train, &teachers, 0.0).unwrap())
        .collect();
    assert!(fits.windows(2).all(|w| w[0] == w[1]));
    assert!(mean_ce(&spec, &fits[0], train).unwrap() < erm);
}

#[test]
fn toy_run_emits_summary_and_histogram() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::defaults(Scenario::Toy1d);
    cfg.toy.total_iters = 60_000;
    cfg.toy.thinning = 10;
    let out = run_toy(&cfg).unwrap();
    emit_toy(&out, tmp.path()).unwrap();
    assert_eq!(out.chain.len(), 5_000);
    let summary = read(tmp.path(), "toy_summary.csv");
    assert!(summary.starts_with("quantity,estimate,analytic\nweight_1,"));
    let hist = read(tmp.path(), "plotdata/toy_histogram.csv");
    assert_eq!(hist.lines().count() - 1, cfg.toy.histogram_bins);
}
