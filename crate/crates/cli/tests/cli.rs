use std::fs;
use std::process::Command;

use tempfile::TempDir;

fn mtbkd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mtbkd")).args(args).output().unwrap()
}

#[test]
fn bad_config_exits_with_code_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[sgld]\nthinning = 0\n").unwrap();
    let out = mtbkd(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("thinning"));

    fs::write(&cfg, "[sgld]\nthining = 3\n").unwrap();
    let out = mtbkd(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_nonzero_with_stage_name() {
    let tmp = TempDir::new().unwrap();
    let out = mtbkd(&["uq", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("uq"));
}

#[test]
fn staged_commands_produce_results() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(
        &cfg,
        "[experiment]\nmethods = [\"mtbkd_weighted\", \"kd_single_1\"]\n\
         [data]\nn = 400\nteacher_pool_n = 400\n[teachers]\ncorpus_size = 100\nepochs = 5\n\
         [student]\nwarm_start_epochs = 1\n[sgld]\ntotal_iters = 200\nthinning = 5\n[baseline]\nepochs = 2\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--threads", "1"];
    for stage in ["simulate", "train-teachers", "distill", "uq"] {
        let mut args = vec![stage];
        args.extend(common);
        let out = mtbkd(&args);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let coverage = fs::read_to_string(out_dir.join("coverage.csv")).unwrap();
    assert_eq!(coverage.lines().count(), 1 + 2 * 3);
    assert!(out_dir.join("manifest.json").is_file());
    assert!(out_dir.join("chains/mtbkd_weighted.chain").is_file());
}

#[test]
fn demo_toy_reports_the_analytic_posterior() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("toy.toml");
    fs::write(&cfg, "[toy]\ntotal_iters = 50000\n").unwrap();
    let out = mtbkd(&["demo-toy", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("weight_1") && stdout.contains("analytic"));
    assert!(tmp.path().join("toy_summary.csv").is_file());
}
