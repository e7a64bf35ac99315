//! The end-to-end distillation pipeline and its baselines.
//!
//! Stages: data → teachers → teacher predictions and weights → per-method
//! student fits (SGLD chains or point estimates) → uncertainty and metrics.
//! All methods in one run share the same splits, teachers and predictions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Method, Scenario};
use crate::data::{
    gen_sim1, gen_sim2, gen_teacher_corpus, gen_toy_1d, split, CorpusMeta, LabeledDataset, Splits, ToyProblem,
};
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, ParamVector, Workspace};
use crate::posterior::{KdObjective, KdWeights, PosteriorProblem};
use crate::rng::{seeded, streams};
use crate::sgld::{sgld_run, Divergence, GradientTarget, PosteriorChain, SgldConfig, StepSchedule};
use crate::teachers::{predict_probs, train_teacher, TeacherModel, TeacherPredictionSet, WeightingMode};
use crate::uq::{coverage_rates, point_metrics, posterior_mode_index, uncertainty_report, MetricsTable, UncertaintyReport};

// --- manifest ------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<ExperimentConfig>,
    /// sha256 over the resolved config (without the output directory).
    pub content_hash: String,
    /// Choices the method leaves open, with the value used in this run.
    pub open_defaults: BTreeMap<String, serde_json::Value>,
    pub data_fingerprints: BTreeMap<String, String>,
    pub teacher_corpora: Vec<CorpusSummary>,
    pub lambda_used: Option<f64>,
    pub lambda_table: Vec<(f64, f64)>,
    /// `None` for methods that finished cleanly.
    pub divergence: BTreeMap<String, Option<Divergence>>,
    pub stages_completed: Vec<String>,
    pub failed_stage: Option<String>,
    /// Wall-clock seconds per stage. Not covered by determinism guarantees.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub teacher: usize,
    pub specialty_domain: u32,
    pub specialty_count: usize,
    pub size: usize,
    pub with_replacement: bool,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config: Some(cfg.clone()),
            content_hash: content_hash(cfg),
            open_defaults: open_defaults(cfg),
            ..Default::default()
        }
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(name));
        self.timings.insert(name.into(), t0.elapsed().as_secs_f64());
        match &out {
            Ok(_) => self.stages_completed.push(name.into()),
            Err(_) => self.failed_stage = Some(name.into()),
        }
        out
    }
}

pub fn content_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&c).expect("serializable"));
    format!("{:x}", h.finalize())
}

/// Every value the method leaves unspecified, keyed by a stable name.
pub fn open_defaults(cfg: &ExperimentConfig) -> BTreeMap<String, serde_json::Value> {
    use serde_json::json;
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: serde_json::Value| {
        m.insert(k.to_string(), v);
    };
    put("domain_partition", json!(cfg.data.partition));
    put("split_ratios", json!(cfg.data.split));
    put("teacher_pool_n", json!(cfg.data.teacher_pool_n));
    put("teacher_specialties", json!(cfg.teachers.specialties));
    put("specialty_fraction", json!(cfg.teachers.specialty_fraction));
    put("teacher_corpus_size", json!(cfg.teachers.corpus_size));
    put(
        "teacher_training",
        json!({
            "optimizer": "mini-batch gradient descent",
            "learning_rate": cfg.teachers.learning_rate,
            "epochs": cfg.teachers.epochs,
            "batch_size": cfg.teachers.batch_size,
            "dropout": "none",
        }),
    );
    put("network_convention", json!("biases on every layer, mean loss reduction"));
    put("student_init", json!({
        "weights": "glorot uniform, zero biases",
        "warm_start_epochs": cfg.student.warm_start_epochs,
        "warm_start_learning_rate": cfg.student.warm_start_learning_rate,
        "warm_start_batch_size": cfg.student.warm_start_batch_size,
    }));
    put("lambda", json!(cfg.prior.lambda));
    put("lambda_cv_grid", json!(cfg.prior.cv_grid));
    put("entropy_transform", json!(cfg.prior.entropy_transform));
    put("sgld_schedule", json!(cfg.sgld.schedule));
    put("sgld_total_iters", json!(cfg.sgld.total_iters));
    put("sgld_batch_size", json!(cfg.sgld.batch_size));
    put("burn_in", json!(cfg.sgld.burn_in));
    put("thinning", json!(cfg.sgld.thinning));
    put("param_clip", json!(cfg.sgld.param_clip));
    put("baseline_training", json!(cfg.baseline));
    put("multikd_weights", json!("per-sample"));
    put("mode_estimate", json!("chain sample with the highest full-data log posterior"));
    put("accuracy_predictor", json!("argmax of the chain-mean predicted probabilities"));
    put("coverage_form", json!("chain-averaged indicator mass at the true label"));
    put("credible_levels", json!(cfg.levels));
    m
}

// --- stage artifacts -----------------------------------------------------

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.bin"))
    }

    pub fn data_csv(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.csv"))
    }

    pub fn teacher(&self, g: usize) -> PathBuf {
        self.root.join("teachers").join(format!("teacher_{}.json", g + 1))
    }

    pub fn corpus_meta(&self, g: usize) -> PathBuf {
        self.root.join("teachers").join(format!("corpus_{}.json", g + 1))
    }

    pub fn teacher_predictions(&self) -> PathBuf {
        self.root.join("teachers").join("train_predictions.csv")
    }

    pub fn chain(&self, m: Method) -> PathBuf {
        self.root.join("chains").join(format!("{m}.chain"))
    }

    pub fn point_estimate(&self, m: Method) -> PathBuf {
        self.root.join("baselines").join(format!("{m}.json"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn ensure_dirs(&self) -> Result<()> {
        for d in ["data", "teachers", "chains", "baselines", "plotdata"] {
            let p = self.root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

// --- data ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DataStage {
    pub splits: Splits,
    /// Independent sample that teacher corpora are drawn from.
    pub teacher_pool: LabeledDataset,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<DataStage> {
    let (full, pool) = match cfg.scenario {
        Scenario::Sim1 => (
            gen_sim1(cfg.data.n, cfg.seed, cfg.data.partition)?,
            gen_sim1(cfg.data.teacher_pool_n, pool_seed(cfg.seed), cfg.data.partition)?,
        ),
        Scenario::Sim2 => (
            gen_sim2(cfg.data.n_per_class, cfg.seed)?,
            gen_sim2(cfg.data.teacher_pool_n.div_ceil(5), pool_seed(cfg.seed))?,
        ),
        Scenario::CustomFile => {
            let path = cfg.data.path.as_ref().expect("validated");
            let d = LabeledDataset::read_csv(path, cfg.data.n_classes)?;
            (d.clone(), d)
        }
        Scenario::Toy1d => return Err(Error::config("the toy scenario has no datasets")),
    };
    let splits = split(&full, cfg.data.split, cfg.seed)?;
    let teacher_pool = if cfg.scenario == Scenario::CustomFile {
        splits.train.clone()
    } else {
        pool
    };
    Ok(DataStage { splits, teacher_pool })
}

/// Pool seeds live on a different stream of the same seed family.
fn pool_seed(seed: u64) -> u64 {
    seed ^ (streams::TEACHER_POOL << 56)
}

impl DataStage {
    pub fn save(&self, layout: &Layout) -> Result<()> {
        for (name, d) in self.named() {
            d.write_binary(&layout.data(name))?;
            if name != "teacher_pool" {
                d.write_csv(&layout.data_csv(name))?;
            }
        }
        Ok(())
    }

    pub fn load(layout: &Layout) -> Result<Self> {
        let r = |n: &str| LabeledDataset::read_binary(&layout.data(n));
        Ok(Self {
            splits: Splits {
                train: r("train")?,
                val: r("val")?,
                test: r("test")?,
                indices: Default::default(),
            },
            teacher_pool: r("teacher_pool")?,
        })
    }

    fn named(&self) -> [(&'static str, &LabeledDataset); 4] {
        [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
            ("teacher_pool", &self.teacher_pool),
        ]
    }

    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        self.named().iter().map(|(n, d)| (n.to_string(), d.fingerprint())).collect()
    }
}

// --- teachers ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TeacherStage {
    pub models: Vec<TeacherModel>,
    pub corpora: Vec<CorpusMeta>,
    /// Teacher outputs on the student training rows, entropy-weighted.
    pub train_predictions: TeacherPredictionSet,
}

pub fn teacher_spec(cfg: &ExperimentConfig, data: &LabeledDataset) -> Result<NetworkSpec> {
    NetworkSpec::mlp(data.n_features(), &cfg.teachers.hidden, data.n_classes())
}

pub fn student_spec(cfg: &ExperimentConfig, data: &LabeledDataset) -> Result<NetworkSpec> {
    NetworkSpec::mlp(data.n_features(), &cfg.student.hidden, data.n_classes())
}

pub fn train_teachers(cfg: &ExperimentConfig, data: &DataStage) -> Result<TeacherStage> {
    let spec = teacher_spec(cfg, &data.teacher_pool)?;
    let fitted: Vec<(TeacherModel, CorpusMeta)> = cfg
        .teachers
        .specialties
        .par_iter()
        .enumerate()
        .map(|(g, &dom)| {
            let (corpus, meta) = gen_teacher_corpus(
                &data.teacher_pool,
                dom,
                cfg.teachers.specialty_fraction,
                cfg.teachers.corpus_size,
                cfg.seed.wrapping_add(g as u64),
            )?;
            let model = train_teacher(&spec, &corpus, cfg.trainer_hyper(g), Some(dom))?;
            Ok((model, meta))
        })
        .collect::<Result<_>>()?;
    let (models, corpora): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    let train_predictions = predictions_for(cfg, &models, &data.splits.train)?;
    Ok(TeacherStage {
        models,
        corpora,
        train_predictions,
    })
}

pub fn predictions_for(
    cfg: &ExperimentConfig,
    models: &[TeacherModel],
    data: &LabeledDataset,
) -> Result<TeacherPredictionSet> {
    let probs = models
        .iter()
        .map(|m| m.predict(data.features().view()))
        .collect::<Result<Vec<_>>>()?;
    TeacherPredictionSet::from_probs(probs, WeightingMode::Entropy, cfg.prior.entropy_transform)
}

impl TeacherStage {
    pub fn save(&self, layout: &Layout) -> Result<()> {
        for (g, (m, c)) in self.models.iter().zip(&self.corpora).enumerate() {
            m.write_json(&layout.teacher(g))?;
            write_json(c, &layout.corpus_meta(g))?;
        }
        self.train_predictions.write_csv(&layout.teacher_predictions())
    }

    pub fn load(cfg: &ExperimentConfig, layout: &Layout) -> Result<Self> {
        let g = cfg.teacher_count();
        let models = (0..g)
            .map(|t| TeacherModel::read_json(&layout.teacher(t)))
            .collect::<Result<Vec<_>>>()?;
        let corpora = (0..g)
            .map(|t| read_json(&layout.corpus_meta(t)))
            .collect::<Result<Vec<_>>>()?;
        let train_predictions = TeacherPredictionSet::read_csv(&layout.teacher_predictions(), WeightingMode::Entropy)?;
        Ok(Self {
            models,
            corpora,
            train_predictions,
        })
    }

    pub fn summaries(&self) -> Vec<CorpusSummary> {
        self.corpora
            .iter()
            .enumerate()
            .map(|(g, c)| CorpusSummary {
                teacher: g + 1,
                specialty_domain: c.specialty_domain,
                specialty_count: c.specialty_count,
                size: c.source_indices.len(),
                with_replacement: c.with_replacement,
            })
            .collect()
    }

    /// Same teacher probabilities with uniform weights.
    pub fn equal_predictions(&self) -> Result<TeacherPredictionSet> {
        TeacherPredictionSet::from_probs(
            self.train_predictions.all_probs().to_vec(),
            WeightingMode::Equal,
            Default::default(),
        )
    }
}

// --- student fits --------------------------------------------------------

/// Seeded initialization shared by every method of a run.
pub fn student_init(cfg: &ExperimentConfig, spec: &NetworkSpec) -> ParamVector {
    spec.init_params(&mut seeded(cfg.seed, streams::STUDENT_INIT))
}

/// Mini-batch ascent on `log π / n` from `init`; used to place SGLD near a mode.
pub fn warm_start<T: GradientTarget>(
    target: &T,
    init: &ParamVector,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    let n = target.n_data();
    let mut rng = seeded(seed, streams::STUDENT_INIT + 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut theta = init.as_slice().to_vec();
    let mut grad = vec![0.0; target.dim()];
    let mut scratch = target.scratch();
    let step = learning_rate / n as f64;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size.max(1)) {
            target
                .grad_log_density(&theta, batch, &mut scratch, &mut grad)
                .map_err(|_| Error::TrainingDiverged { epoch })?;
            theta.iter_mut().zip(&grad).for_each(|(t, g)| *t += step * g);
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    Ok(ParamVector::new(theta))
}

pub fn posterior_problem(
    spec: &NetworkSpec,
    train: &LabeledDataset,
    teachers: &TeacherPredictionSet,
    lambda: f64,
) -> Result<PosteriorProblem> {
    PosteriorProblem::new(spec.clone(), train.clone(), teachers.clone(), lambda)
}

/// Warm start followed by an SGLD chain on the MT-BKD posterior.
pub fn fit_mtbkd(
    cfg: &ExperimentConfig,
    problem: &PosteriorProblem,
    sgld: &SgldConfig,
) -> Result<PosteriorChain> {
    let init = student_init(cfg, problem.spec());
    let start = warm_start(
        problem,
        &init,
        cfg.student.warm_start_learning_rate,
        cfg.student.warm_start_epochs,
        cfg.student.warm_start_batch_size,
        cfg.seed,
    )?;
    sgld_run(problem, sgld, &start)
}

/// Point estimate minimizing the (multi-teacher) KD loss by mini-batch
/// gradient descent from the shared initialization.
pub fn run_baseline(
    cfg: &ExperimentConfig,
    method: Method,
    spec: &NetworkSpec,
    train: &LabeledDataset,
    teachers: &TeacherStage,
    lambda: f64,
) -> Result<ParamVector> {
    let set = match method {
        Method::KdSingle(g) => teachers.train_predictions.single(g - 1)?,
        Method::MultikdWeighted => teachers.train_predictions.clone(),
        Method::MultikdEqual => teachers.equal_predictions()?,
        m => return Err(Error::config(format!("{m} is not a KD baseline"))),
    };
    let weights = KdWeights::PerSample;
    let objective = KdObjective {
        spec,
        data: train,
        teachers: &set,
        lambda,
        weights: &weights,
    };
    let b = &cfg.baseline;
    if b.batch_size == 0 || !(b.learning_rate > 0.0) {
        return Err(Error::config("baseline batch size and learning rate must be positive"));
    }
    let mut theta = student_init(cfg, spec).into_inner();
    let mut rng = seeded(cfg.seed, streams::BASELINE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut ws = Workspace::new(spec);
    let mut grad = vec![0.0; spec.param_count()];
    for epoch in 0..b.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(b.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            spec.accumulate_grad(&theta, train.features().view(), batch, &objective, &mut ws, &mut grad)
                .map_err(|_| Error::TrainingDiverged { epoch })?;
            let step = b.learning_rate / batch.len() as f64;
            theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= step * g);
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    Ok(ParamVector::new(theta))
}

/// Picks the grid value with the highest score; ties go to the smaller λ.
pub fn select_lambda(grid: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut table = Vec::with_capacity(sorted.len());
    let mut best = (sorted[0], f64::NEG_INFINITY);
    for &l in &sorted {
        let s = score(l)?;
        table.push((l, s));
        if s > best.1 {
            best = (l, s);
        }
    }
    Ok((best.0, table))
}

/// Validation accuracy of a short MT-BKD run at `lambda`.
pub fn lambda_score(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    data: &DataStage,
    teachers: &TeacherStage,
    lambda: f64,
) -> Result<f64> {
    let problem = posterior_problem(spec, &data.splits.train, &teachers.train_predictions, lambda)?;
    let mut sgld = cfg.sgld.to_config(cfg.seed);
    sgld.total_iters = cfg.prior.cv_iters.max(2);
    sgld.burn_in = sgld.total_iters / 2;
    sgld.thinning = sgld.thinning.min(sgld.total_iters - sgld.burn_in);
    let chain = fit_mtbkd(cfg, &problem, &sgld)?.into_result()?;
    let val = &data.splits.val;
    let (_, mean) = uncertainty_report(&chain, spec, val.features().view(), val.labels(), &cfg.levels)?;
    Ok(point_metrics(mean.view(), mean.view(), val)?.accuracy)
}

// --- evaluation ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub chain: PosteriorChain,
    /// Index of the chain sample used as the posterior mode.
    pub mode_index: usize,
    pub report: UncertaintyReport,
    pub metrics: MetricsTable,
}

/// Uncertainty report and metrics of `chain` on `test`. `mode_index`
/// selects the sample whose predictions enter the MSE.
pub fn evaluate_chain(
    chain: &PosteriorChain,
    spec: &NetworkSpec,
    test: &LabeledDataset,
    levels: &[f64],
    mode_index: usize,
) -> Result<(UncertaintyReport, MetricsTable)> {
    let (report, mean) = uncertainty_report(chain, spec, test.features().view(), test.labels(), levels)?;
    let mode = chain
        .samples
        .get(mode_index)
        .ok_or_else(|| Error::contract("mode index outside the chain"))?;
    let mode_probs = predict_probs(spec, mode, test.features().view())?;
    let mut metrics = point_metrics(mean.view(), mode_probs.view(), test)?;
    metrics.coverage = coverage_rates(&report)?;
    Ok((report, metrics))
}

pub fn teacher_metrics(models: &[TeacherModel], test: &LabeledDataset) -> Result<Vec<MetricsTable>> {
    models
        .iter()
        .map(|m| {
            let p: Array2<f64> = m.predict(test.features().view())?;
            point_metrics(p.view(), p.view(), test)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub data: DataStage,
    pub teachers: TeacherStage,
    pub student_spec: NetworkSpec,
    pub results: Vec<MethodResult>,
    pub teacher_metrics: Vec<MetricsTable>,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn result(&self, m: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == m)
    }

    /// The first Bayesian method listed, else the first method.
    pub fn primary(&self) -> &MethodResult {
        self.results
            .iter()
            .find(|r| r.method.is_bayesian())
            .unwrap_or(&self.results[0])
    }
}

/// Fits one method. Bayesian methods return their chain; baselines return a
/// single-sample chain holding the point estimate.
pub fn fit_method(
    cfg: &ExperimentConfig,
    method: Method,
    spec: &NetworkSpec,
    data: &DataStage,
    teachers: &TeacherStage,
    lambda: f64,
) -> Result<(PosteriorChain, usize)> {
    let train = &data.splits.train;
    match method {
        Method::MtbkdWeighted | Method::MtbkdEqual => {
            let set = if method == Method::MtbkdWeighted {
                teachers.train_predictions.clone()
            } else {
                teachers.equal_predictions()?
            };
            let problem = posterior_problem(spec, train, &set, lambda)?;
            let chain = fit_mtbkd(cfg, &problem, &cfg.sgld.to_config(cfg.seed))?;
            if chain.is_empty() {
                return chain.into_result().map(|c| (c, 0));
            }
            let mode = posterior_mode_index(&problem, &chain)?;
            Ok((chain, mode))
        }
        _ => {
            let theta = run_baseline(cfg, method, spec, train, teachers, lambda)?;
            Ok((PosteriorChain::from_samples(vec![theta]), 0))
        }
    }
}

/// Second half of the pipeline: per-method fits and their evaluation.
pub fn distill_and_evaluate(
    cfg: &ExperimentConfig,
    data: &DataStage,
    teachers: &TeacherStage,
    manifest: &mut RunManifest,
    layout: Option<&Layout>,
) -> Result<(NetworkSpec, Vec<MethodResult>)> {
    let spec = student_spec(cfg, &data.splits.train)?;
    let lambda = manifest.stage("select_lambda", |m| {
        if cfg.prior.cv_grid.is_empty() {
            return Ok(cfg.prior.lambda);
        }
        let (l, table) = select_lambda(&cfg.prior.cv_grid, |l| lambda_score(cfg, &spec, data, teachers, l))?;
        m.lambda_table = table;
        Ok(l)
    })?;
    manifest.lambda_used = Some(lambda);

    let fits = manifest.stage("distill", |m| {
        let fits: Vec<(PosteriorChain, usize)> = cfg
            .methods
            .par_iter()
            .map(|&method| fit_method(cfg, method, &spec, data, teachers, lambda))
            .collect::<Result<_>>()?;
        for (method, (chain, _)) in cfg.methods.iter().zip(&fits) {
            m.divergence.insert(method.to_string(), chain.divergence.clone());
            if let Some(l) = layout {
                if method.is_bayesian() {
                    chain.write(&spec, &l.chain(*method))?;
                } else {
                    write_json(&chain.samples[0], &l.point_estimate(*method))?;
                }
            }
        }
        Ok(fits)
    })?;

    let results = manifest.stage("uq", |_| {
        let mut out = Vec::with_capacity(fits.len());
        for (&method, (chain, mode_index)) in cfg.methods.iter().zip(fits) {
            let chain = chain.into_result()?;
            let (report, metrics) = evaluate_chain(&chain, &spec, &data.splits.test, &cfg.levels, mode_index)?;
            out.push(MethodResult {
                method,
                chain,
                mode_index,
                report,
                metrics,
            });
        }
        Ok(out)
    })?;
    Ok((spec, results))
}

/// Data → teachers → weights and prior → SGLD → uncertainty and metrics.
/// With `persist`, every stage writes its artifacts under the output
/// directory, and a failed run still leaves the manifest so far.
pub fn run_algorithm1(cfg: &ExperimentConfig, persist: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    if persist {
        layout.ensure_dirs()?;
    }
    let lay = persist.then_some(&layout);
    let mut manifest = RunManifest::new(cfg);
    let result = run_inner(cfg, &mut manifest, lay);
    if persist {
        write_json(&manifest, &layout.manifest())?;
    }
    let (data, teachers, student_spec, results, teacher_metrics) = result?;
    let outcome = RunOutcome {
        data,
        teachers,
        student_spec,
        results,
        teacher_metrics,
        manifest,
    };
    if persist {
        super::emit::emit_results(&outcome, &layout.root)?;
    }
    Ok(outcome)
}

type Inner = (DataStage, TeacherStage, NetworkSpec, Vec<MethodResult>, Vec<MetricsTable>);

fn run_inner(cfg: &ExperimentConfig, manifest: &mut RunManifest, layout: Option<&Layout>) -> Result<Inner> {
    let data = manifest.stage("simulate", |m| {
        let d = simulate(cfg)?;
        m.data_fingerprints = d.fingerprints();
        if let Some(l) = layout {
            d.save(l)?;
        }
        Ok(d)
    })?;
    let teachers = manifest.stage("train_teachers", |m| {
        let t = train_teachers(cfg, &data)?;
        m.teacher_corpora = t.summaries();
        if let Some(l) = layout {
            t.save(l)?;
        }
        Ok(t)
    })?;
    let (spec, results) = distill_and_evaluate(cfg, &data, &teachers, manifest, layout)?;
    let tm = manifest.stage("evaluate", |_| teacher_metrics(&teachers.models, &data.splits.test))?;
    Ok((data, teachers, spec, results, tm))
}

/// Manifest of an earlier staged run in `cfg.out_dir`, or a fresh one.
pub fn load_or_new_manifest(cfg: &ExperimentConfig) -> RunManifest {
    match read_manifest(&cfg.out_dir) {
        Ok(m) if m.content_hash == content_hash(cfg) => m,
        _ => RunManifest::new(cfg),
    }
}

/// Runs one named stage against the artifacts of the previous stages and
/// persists its own. `uq` and `evaluate` both rebuild the full outcome from
/// saved chains and emit every result file.
pub fn run_stage(cfg: &ExperimentConfig, stage: &str) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    layout.ensure_dirs()?;
    let mut manifest = load_or_new_manifest(cfg);
    let result = stage_inner(cfg, stage, &layout, &mut manifest);
    if let Err(Error::Stage { stage, .. }) = &result {
        manifest.failed_stage.get_or_insert_with(|| stage.to_string());
    }
    write_json(&manifest, &layout.manifest())?;
    result
}

fn stage_inner(cfg: &ExperimentConfig, stage: &str, layout: &Layout, manifest: &mut RunManifest) -> Result<()> {
    match stage {
        "simulate" => manifest.stage("simulate", |m| {
            let d = simulate(cfg)?;
            m.data_fingerprints = d.fingerprints();
            d.save(layout)
        }),
        "train-teachers" => {
            let data = DataStage::load(layout).map_err(|e| e.in_stage("train_teachers"))?;
            manifest.stage("train_teachers", |m| {
                let t = train_teachers(cfg, &data)?;
                m.teacher_corpora = t.summaries();
                t.save(layout)
            })
        }
        "distill" => {
            let (data, teachers) = load_inputs(cfg, layout).map_err(|e| e.in_stage("distill"))?;
            let spec = student_spec(cfg, &data.splits.train)?;
            let lambda = manifest.stage("select_lambda", |m| {
                if cfg.prior.cv_grid.is_empty() {
                    return Ok(cfg.prior.lambda);
                }
                let (l, table) = select_lambda(&cfg.prior.cv_grid, |l| lambda_score(cfg, &spec, &data, &teachers, l))?;
                m.lambda_table = table;
                Ok(l)
            })?;
            manifest.lambda_used = Some(lambda);
            manifest.stage("distill", |m| {
                let fits: Vec<(PosteriorChain, usize)> = cfg
                    .methods
                    .par_iter()
                    .map(|&method| fit_method(cfg, method, &spec, &data, &teachers, lambda))
                    .collect::<Result<_>>()?;
                for (method, (chain, _)) in cfg.methods.iter().zip(&fits) {
                    m.divergence.insert(method.to_string(), chain.divergence.clone());
                    if method.is_bayesian() {
                        chain.write(&spec, &layout.chain(*method))?;
                    } else {
                        write_json(&chain.samples[0], &layout.point_estimate(*method))?;
                    }
                }
                Ok(())
            })
        }
        "uq" | "evaluate" => {
            let outcome = load_outcome(cfg, layout, manifest)?;
            *manifest = outcome.manifest.clone();
            super::emit::emit_results(&outcome, &layout.root)
        }
        other => Err(Error::config(format!("unknown stage `{other}`"))),
    }
}

fn load_inputs(cfg: &ExperimentConfig, layout: &Layout) -> Result<(DataStage, TeacherStage)> {
    Ok((DataStage::load(layout)?, TeacherStage::load(cfg, layout)?))
}

/// Rebuilds a run's outcome from saved data, teachers, chains and point
/// estimates.
pub fn load_outcome(cfg: &ExperimentConfig, layout: &Layout, manifest: &RunManifest) -> Result<RunOutcome> {
    let mut manifest = manifest.clone();
    let (data, teachers) = load_inputs(cfg, layout).map_err(|e| e.in_stage("uq"))?;
    let spec = student_spec(cfg, &data.splits.train)?;
    let lambda = manifest.lambda_used.unwrap_or(cfg.prior.lambda);
    let results = manifest.stage("uq", |_| {
        cfg.methods
            .iter()
            .map(|&method| {
                let (chain, mode_index) = if method.is_bayesian() {
                    let chain = PosteriorChain::read(&spec, &layout.chain(method))?.into_result()?;
                    let set = if method == Method::MtbkdWeighted {
                        teachers.train_predictions.clone()
                    } else {
                        teachers.equal_predictions()?
                    };
                    let problem = posterior_problem(&spec, &data.splits.train, &set, lambda)?;
                    let mode = posterior_mode_index(&problem, &chain)?;
                    (chain, mode)
                } else {
                    (PosteriorChain::from_samples(vec![read_point_estimate(layout, method)?]), 0)
                };
                let (report, metrics) = evaluate_chain(&chain, &spec, &data.splits.test, &cfg.levels, mode_index)?;
                Ok(MethodResult {
                    method,
                    chain,
                    mode_index,
                    report,
                    metrics,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let teacher_metrics = manifest.stage("evaluate", |_| teacher_metrics(&teachers.models, &data.splits.test))?;
    Ok(RunOutcome {
        data,
        teachers,
        student_spec: spec,
        results,
        teacher_metrics,
        manifest,
    })
}

pub fn write_manifest(manifest: &RunManifest, out_dir: &Path) -> Result<()> {
    write_json(manifest, &Layout::new(out_dir).manifest())
}

pub fn read_manifest(out_dir: &Path) -> Result<RunManifest> {
    read_json(&Layout::new(out_dir).manifest())
}

pub fn read_point_estimate(layout: &Layout, m: Method) -> Result<ParamVector> {
    read_json(&layout.point_estimate(m))
}

// --- toy -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub problem: ToyProblem,
    pub chain: PosteriorChain,
    /// Chain average of the first component's posterior responsibility.
    pub weight_estimate: f64,
    pub mean_estimate: f64,
    /// `(bin center, empirical density, analytic density)`.
    pub histogram: Vec<(f64, f64, f64)>,
    pub manifest: RunManifest,
}

pub fn run_toy(cfg: &ExperimentConfig) -> Result<ToyOutcome> {
    let mut manifest = RunManifest::new(cfg);
    let t = &cfg.toy;
    let problem = gen_toy_1d(t.prior_means, t.prior_var, t.obs, t.obs_var, t.n_obs)?;
    let sgld = SgldConfig {
        schedule: StepSchedule::Constant { tau: t.tau },
        total_iters: t.total_iters,
        batch_size: 1,
        burn_in: t.burn_in,
        thinning: t.thinning,
        seed: cfg.seed,
        param_clip: None,
    };
    let chain = manifest.stage("sgld", |_| sgld_run(&problem, &sgld, &ParamVector::new(vec![t.init]))?.into_result())?;
    manifest.divergence.insert("toy".into(), None);
    let xs: Vec<f64> = chain.samples.iter().map(|s| s[0]).collect();
    let r = xs.len() as f64;
    let weight_estimate = xs.iter().map(|&x| problem.posterior.responsibilities(x)[0]).sum::<f64>() / r;
    let mean_estimate = xs.iter().sum::<f64>() / r;
    let histogram = histogram(&xs, t.histogram_bins, |x| problem.posterior.pdf(x));
    Ok(ToyOutcome {
        problem,
        chain,
        weight_estimate,
        mean_estimate,
        histogram,
        manifest,
    })
}

/// Density-normalized histogram over the sample range.
pub fn histogram(xs: &[f64], bins: usize, analytic: impl Fn(f64) -> f64) -> Vec<(f64, f64, f64)> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = bins.max(1);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for &x in xs {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = xs.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            let center = lo + (b as f64 + 0.5) * width;
            (center, c as f64 / (n * width), analytic(center))
        })
        .collect()
}
