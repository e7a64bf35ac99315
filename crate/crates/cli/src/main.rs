use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtbkd::experiment::pipeline::run_stage;
use mtbkd::experiment::{emit_toy, run_algorithm1, run_toy, ExperimentConfig, Scenario};
use mtbkd::Error;

/// Multi-teacher Bayesian knowledge distillation experiments.
#[derive(Parser)]
#[command(name = "mtbkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; scenario defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `experiment.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Scenario for runs without a config file.
    #[arg(long, global = true)]
    scenario: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split the datasets.
    Simulate(Common),
    /// Train the specialized teachers and score the training rows.
    TrainTeachers(Common),
    /// Fit every configured method (SGLD chains and KD baselines).
    Distill(Common),
    /// Uncertainty reports from saved fits.
    Uq(Common),
    /// Metrics, coverage and plot data from saved fits.
    Evaluate(Common),
    /// SGLD on the one-dimensional two-component toy posterior.
    DemoToy(Common),
    /// The full pipeline in one go.
    Run(Common),
    /// Validation-based choice of lambda over `prior.cv_grid`.
    CvLambda(Common),
}

fn load_config(c: &Common, fallback: Scenario) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&c.config, &c.scenario) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, Some(s)) => ExperimentConfig::defaults(s.parse()?),
        (None, None) => ExperimentConfig::defaults(fallback),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Error> {
    let (common, stage) = match &cli.command {
        Command::Simulate(c) => (c, "simulate"),
        Command::TrainTeachers(c) => (c, "train-teachers"),
        Command::Distill(c) => (c, "distill"),
        Command::Uq(c) => (c, "uq"),
        Command::Evaluate(c) => (c, "evaluate"),
        Command::DemoToy(c) => (c, "demo-toy"),
        Command::Run(c) => (c, "run"),
        Command::CvLambda(c) => (c, "cv-lambda"),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let fallback = if stage == "demo-toy" { Scenario::Toy1d } else { Scenario::Sim1 };
    let mut cfg = load_config(common, fallback)?;
    match stage {
        "demo-toy" => {
            let out = run_toy(&cfg)?;
            emit_toy(&out, &cfg.out_dir)?;
            println!(
                "toy: {} samples, weight_1 {:.4} (analytic {:.4}), mean {:.4} (analytic {:.4})",
                out.chain.len(),
                out.weight_estimate,
                out.problem.posterior.weights[0],
                out.mean_estimate,
                out.problem.posterior.mean()
            );
        }
        "run" if cfg.scenario == Scenario::Toy1d => {
            let out = run_toy(&cfg)?;
            emit_toy(&out, &cfg.out_dir)?;
        }
        "run" => {
            let out = run_algorithm1(&cfg, true)?;
            for r in &out.results {
                let mse = r.metrics.mse.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into());
                let cov: Vec<String> = r.metrics.coverage.iter().map(|(l, c)| format!("{l}:{c:.3}")).collect();
                println!("{:<18} acc {:.4}  mse {mse}  coverage {}", r.method, r.metrics.accuracy, cov.join(" "));
            }
            for (g, m) in out.teacher_metrics.iter().enumerate() {
                let doms: Vec<String> = m.domains.iter().map(|d| format!("b{}:{:.3}", d.domain, d.accuracy)).collect();
                println!("teacher_{:<10} acc {:.4}  {}", g + 1, m.accuracy, doms.join(" "));
            }
            println!("results written to {}", cfg.out_dir.display());
        }
        "cv-lambda" => {
            if cfg.prior.cv_grid.is_empty() {
                cfg.prior.cv_grid = vec![0.1, 0.5, 1.0, 2.0, 5.0];
            }
            run_stage(&cfg, "simulate")?;
            run_stage(&cfg, "train-teachers")?;
            let data = mtbkd::experiment::pipeline::DataStage::load(&layout(&cfg))?;
            let teachers = mtbkd::experiment::pipeline::TeacherStage::load(&cfg, &layout(&cfg))?;
            let spec = mtbkd::experiment::pipeline::student_spec(&cfg, &data.splits.train)?;
            let (best, table) = mtbkd::experiment::select_lambda(&cfg.prior.cv_grid, |l| {
                mtbkd::experiment::pipeline::lambda_score(&cfg, &spec, &data, &teachers, l)
            })?;
            let mut csv = String::from("lambda,val_accuracy\n");
            for (l, a) in &table {
                csv.push_str(&format!("{l},{a}\n"));
                println!("lambda {l:<6} validation accuracy {a:.4}");
            }
            let path = cfg.out_dir.join("cv_lambda.csv");
            std::fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
            println!("selected lambda {best}");
        }
        s => run_stage(&cfg, s)?,
    }
    Ok(())
}

fn layout(cfg: &ExperimentConfig) -> mtbkd::experiment::pipeline::Layout {
    mtbkd::experiment::pipeline::Layout::new(&cfg.out_dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
