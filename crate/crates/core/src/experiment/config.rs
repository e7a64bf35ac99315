//! Declarative experiment configuration.
//!
//! Files are TOML with one table per stage. Every key is optional; missing
//! keys resolve to scenario defaults, and unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DomainPartition, SplitRatios};
use crate::error::{Error, Result};
use crate::sgld::{SgldConfig, StepSchedule};
use crate::teachers::{EntropyTransform, TrainHyper};
use crate::uq::DEFAULT_LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Sim1,
    Sim2,
    Toy1d,
    CustomFile,
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim1" => Ok(Scenario::Sim1),
            "sim2" => Ok(Scenario::Sim2),
            "toy1d" => Ok(Scenario::Toy1d),
            "custom-file" => Ok(Scenario::CustomFile),
            _ => Err(Error::config(format!("unknown scenario `{s}`"))),
        }
    }
}

/// One estimator to compare. `KdSingle` is 1-based in names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    MtbkdWeighted,
    MtbkdEqual,
    KdSingle(usize),
    MultikdWeighted,
    MultikdEqual,
}

impl Method {
    /// Posterior-sampling methods; the rest are point-estimate baselines.
    pub fn is_bayesian(&self) -> bool {
        matches!(self, Method::MtbkdWeighted | Method::MtbkdEqual)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::MtbkdWeighted => f.write_str("mtbkd_weighted"),
            Method::MtbkdEqual => f.write_str("mtbkd_equal"),
            Method::KdSingle(g) => write!(f, "kd_single_{g}"),
            Method::MultikdWeighted => f.write_str("multikd_weighted"),
            Method::MultikdEqual => f.write_str("multikd_equal"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    /// Accepts `kd_single_2` and `kd_single(2)`.
    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "mtbkd_weighted" => Method::MtbkdWeighted,
            "mtbkd_equal" => Method::MtbkdEqual,
            "multikd_weighted" => Method::MultikdWeighted,
            "multikd_equal" => Method::MultikdEqual,
            _ => {
                let g = s
                    .strip_prefix("kd_single_")
                    .or_else(|| s.strip_prefix("kd_single(").and_then(|r| r.strip_suffix(')')))
                    .and_then(|g| g.parse::<usize>().ok())
                    .filter(|g| *g >= 1)
                    .ok_or_else(|| Error::config(format!("unknown method `{s}`")))?;
                Method::KdSingle(g)
            }
        };
        Ok(m)
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// --- file schema ---------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    experiment: RawExperiment,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    teachers: RawTeachers,
    #[serde(default)]
    student: RawStudent,
    #[serde(default)]
    prior: RawPrior,
    #[serde(default)]
    sgld: RawSgld,
    #[serde(default)]
    baseline: RawBaseline,
    #[serde(default)]
    toy: RawToy,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    scenario: Option<String>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    methods: Option<Vec<String>>,
    levels: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    n: Option<usize>,
    n_per_class: Option<usize>,
    t1: Option<f64>,
    t2: Option<f64>,
    train: Option<f64>,
    val: Option<f64>,
    test: Option<f64>,
    teacher_pool_n: Option<usize>,
    path: Option<PathBuf>,
    n_classes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTeachers {
    hidden: Option<Vec<usize>>,
    specialties: Option<Vec<u32>>,
    specialty_fraction: Option<f64>,
    corpus_size: Option<usize>,
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudent {
    hidden: Option<Vec<usize>>,
    warm_start_epochs: Option<usize>,
    warm_start_learning_rate: Option<f64>,
    warm_start_batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    lambda: Option<f64>,
    cv_grid: Option<Vec<f64>>,
    cv_iters: Option<usize>,
    entropy_transform: Option<String>,
    inverse_eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSgld {
    schedule: Option<String>,
    tau: Option<f64>,
    a: Option<f64>,
    b: Option<f64>,
    gamma: Option<f64>,
    total_iters: Option<usize>,
    batch_size: Option<usize>,
    burn_in: Option<usize>,
    thinning: Option<usize>,
    param_clip: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBaseline {
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawToy {
    prior_means: Option<[f64; 2]>,
    prior_var: Option<f64>,
    obs: Option<f64>,
    obs_var: Option<f64>,
    n_obs: Option<usize>,
    tau: Option<f64>,
    total_iters: Option<usize>,
    burn_in: Option<usize>,
    thinning: Option<usize>,
    init: Option<f64>,
    histogram_bins: Option<usize>,
}

// --- resolved configuration ----------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Sim-1 sample size.
    pub n: usize,
    /// Sim-2 draws per mixture component.
    pub n_per_class: usize,
    pub partition: DomainPartition,
    pub split: SplitRatios,
    /// Size of the independent sample teacher corpora are drawn from.
    pub teacher_pool_n: usize,
    /// Dataset CSV for the custom-file scenario.
    pub path: Option<PathBuf>,
    pub n_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    /// Specialty domain tag of each teacher; its length is the teacher count.
    pub specialties: Vec<u32>,
    pub specialty_fraction: f64,
    pub corpus_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub hidden: Vec<usize>,
    /// Mini-batch ascent epochs on the log posterior before sampling.
    pub warm_start_epochs: usize,
    pub warm_start_learning_rate: f64,
    pub warm_start_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSettings {
    pub lambda: f64,
    /// Non-empty grids trigger validation-based selection of `lambda`.
    pub cv_grid: Vec<f64>,
    /// SGLD iterations per grid point during selection.
    pub cv_iters: usize,
    pub entropy_transform: EntropyTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgldSettings {
    pub schedule: StepSchedule,
    pub total_iters: usize,
    pub batch_size: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub param_clip: Option<f64>,
}

impl SgldSettings {
    pub fn to_config(&self, seed: u64) -> SgldConfig {
        SgldConfig {
            schedule: self.schedule,
            total_iters: self.total_iters,
            batch_size: self.batch_size,
            burn_in: self.burn_in,
            thinning: self.thinning,
            seed,
            param_clip: self.param_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub prior_means: [f64; 2],
    pub prior_var: f64,
    pub obs: f64,
    pub obs_var: f64,
    pub n_obs: usize,
    pub tau: f64,
    pub total_iters: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub init: f64,
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    pub levels: Vec<f64>,
    pub data: DataConfig,
    pub teachers: TeacherConfig,
    pub student: StudentConfig,
    pub prior: PriorSettings,
    pub sgld: SgldSettings,
    pub baseline: BaselineConfig,
    pub toy: ToyConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        resolve(raw)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Defaults for a scenario with nothing overridden.
    pub fn defaults(scenario: Scenario) -> Self {
        let raw = RawConfig {
            experiment: RawExperiment {
                scenario: Some(scenario_name(scenario).into()),
                ..Default::default()
            },
            ..Default::default()
        };
        resolve(raw).expect("defaults are valid")
    }

    pub fn teacher_count(&self) -> usize {
        self.teachers.specialties.len()
    }

    pub fn trainer_hyper(&self, teacher_index: usize) -> TrainHyper {
        TrainHyper {
            learning_rate: self.teachers.learning_rate,
            epochs: self.teachers.epochs,
            batch_size: self.teachers.batch_size,
            seed: self.seed.wrapping_add(teacher_index as u64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("at least one method is required"));
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::config(format!("levels must lie in (0, 1): {:?}", self.levels)));
        }
        let g = self.teacher_count();
        for m in &self.methods {
            if let Method::KdSingle(t) = m {
                if *t > g {
                    return Err(Error::config(format!("{m} refers to teacher {t}, only {g} defined")));
                }
            }
        }
        if self.scenario != Scenario::Toy1d && g == 0 {
            return Err(Error::config("at least one teacher is required"));
        }
        if !(self.teachers.specialty_fraction > 0.0 && self.teachers.specialty_fraction <= 1.0) {
            return Err(Error::config("specialty_fraction must lie in (0, 1]"));
        }
        if !(self.prior.lambda >= 0.0) || self.prior.cv_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::config("lambda values must be non-negative"));
        }
        self.data.partition.validate()?;
        self.sgld.to_config(self.seed).validate()?;
        if self.scenario == Scenario::CustomFile && self.data.path.is_none() {
            return Err(Error::config("custom-file scenario needs data.path"));
        }
        if self.toy.burn_in >= self.toy.total_iters || self.toy.thinning == 0 || !(self.toy.tau > 0.0) {
            return Err(Error::config("toy sampler settings are invalid"));
        }
        Ok(())
    }
}

fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::Sim1 => "sim1",
        Scenario::Sim2 => "sim2",
        Scenario::Toy1d => "toy1d",
        Scenario::CustomFile => "custom-file",
    }
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let scenario: Scenario = raw.experiment.scenario.as_deref().unwrap_or("sim1").parse()?;
    let sim2 = scenario == Scenario::Sim2;

    let default_specialties: Vec<u32> = if sim2 { vec![1, 3, 5] } else { vec![1, 3] };
    let specialties = raw.teachers.specialties.clone().unwrap_or(default_specialties);
    let methods = match raw.experiment.methods {
        Some(names) => names.iter().map(|s| s.parse()).collect::<Result<Vec<Method>>>()?,
        None => {
            let mut m = vec![Method::MtbkdWeighted, Method::MtbkdEqual];
            m.extend((1..=specialties.len()).map(Method::KdSingle));
            m.extend([Method::MultikdWeighted, Method::MultikdEqual]);
            m
        }
    };

    let d = raw.data;
    let SplitRatios {
        train: dtr,
        val: dva,
        test: dte,
    } = SplitRatios::default();
    let data = DataConfig {
        n: d.n.unwrap_or(20_000),
        n_per_class: d.n_per_class.unwrap_or(8_000),
        partition: if sim2 {
            DomainPartition::Sim2Component
        } else {
            let DomainPartition::Sim1Thresholds { t1, t2 } = DomainPartition::SIM1_DEFAULT else {
                unreachable!()
            };
            DomainPartition::Sim1Thresholds {
                t1: d.t1.unwrap_or(t1),
                t2: d.t2.unwrap_or(t2),
            }
        },
        split: SplitRatios {
            train: d.train.unwrap_or(dtr),
            val: d.val.unwrap_or(dva),
            test: d.test.unwrap_or(dte),
        },
        teacher_pool_n: d.teacher_pool_n.unwrap_or(20_000),
        path: d.path,
        n_classes: d.n_classes,
    };

    let t = raw.teachers;
    let teachers = TeacherConfig {
        hidden: t
            .hidden
            .unwrap_or_else(|| if sim2 { vec![7, 15, 12, 10, 7] } else { vec![7, 10, 12, 10, 5] }),
        specialties,
        specialty_fraction: t.specialty_fraction.unwrap_or(1.0),
        corpus_size: t.corpus_size.unwrap_or(1_000),
        learning_rate: t.learning_rate.unwrap_or(0.05),
        epochs: t.epochs.unwrap_or(200),
        batch_size: t.batch_size.unwrap_or(32),
    };

    let s = raw.student;
    let student = StudentConfig {
        hidden: s.hidden.unwrap_or_else(|| if sim2 { vec![10] } else { vec![5] }),
        warm_start_epochs: s.warm_start_epochs.unwrap_or(20),
        warm_start_learning_rate: s.warm_start_learning_rate.unwrap_or(0.05),
        warm_start_batch_size: s.warm_start_batch_size.unwrap_or(64),
    };

    let p = raw.prior;
    let entropy_transform = match p.entropy_transform.as_deref().unwrap_or("exp_neg") {
        "exp_neg" => EntropyTransform::ExpNeg,
        "inverse" => EntropyTransform::Inverse {
            eps: p.inverse_eps.unwrap_or(1e-3),
        },
        other => return Err(Error::config(format!("unknown entropy_transform `{other}`"))),
    };
    let prior = PriorSettings {
        lambda: p.lambda.unwrap_or(1.0),
        cv_grid: p.cv_grid.unwrap_or_default(),
        cv_iters: p.cv_iters.unwrap_or(4_000),
        entropy_transform,
    };

    let g = raw.sgld;
    let schedule = match g.schedule.as_deref().unwrap_or("polynomial") {
        "constant" => StepSchedule::Constant {
            tau: g.tau.unwrap_or(2e-5),
        },
        "polynomial" => StepSchedule::Polynomial {
            a: g.a.unwrap_or(5e-4),
            b: g.b.unwrap_or(100.0),
            gamma: g.gamma.unwrap_or(0.55),
        },
        other => return Err(Error::config(format!("unknown sgld schedule `{other}`"))),
    };
    let total_iters = g.total_iters.unwrap_or(20_000);
    let sgld = SgldSettings {
        schedule,
        total_iters,
        batch_size: g.batch_size.unwrap_or(64),
        burn_in: g.burn_in.unwrap_or(total_iters / 2),
        thinning: g.thinning.unwrap_or(10),
        param_clip: g.param_clip,
    };

    let b = raw.baseline;
    let baseline = BaselineConfig {
        learning_rate: b.learning_rate.unwrap_or(0.05),
        epochs: b.epochs.unwrap_or(30),
        batch_size: b.batch_size.unwrap_or(64),
    };

    let y = raw.toy;
    let toy_iters = y.total_iters.unwrap_or(2_010_000);
    let toy = ToyConfig {
        prior_means: y.prior_means.unwrap_or([2.0, 6.0]),
        prior_var: y.prior_var.unwrap_or(1.0),
        obs: y.obs.unwrap_or(3.5),
        obs_var: y.obs_var.unwrap_or(2.0),
        n_obs: y.n_obs.unwrap_or(1),
        tau: y.tau.unwrap_or(0.05),
        total_iters: toy_iters,
        burn_in: y.burn_in.unwrap_or(10_000),
        thinning: y.thinning.unwrap_or(20),
        init: y.init.unwrap_or(4.0),
        histogram_bins: y.histogram_bins.unwrap_or(80),
    };

    let out_dir = raw
        .experiment
        .out_dir
        .unwrap_or_else(|| PathBuf::from(format!("out/{}", scenario_name(scenario))));
    let cfg = ExperimentConfig {
        scenario,
        seed: raw.experiment.seed.unwrap_or(2024),
        out_dir,
        methods,
        levels: raw.experiment.levels.unwrap_or_else(|| DEFAULT_LEVELS.to_vec()),
        data,
        teachers,
        student,
        prior,
        sgld,
        baseline,
        toy,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::MtbkdWeighted,
            Method::MtbkdEqual,
            Method::KdSingle(2),
            Method::MultikdWeighted,
            Method::MultikdEqual,
        ] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("kd_single(1)".parse::<Method>().unwrap(), Method::KdSingle(1));
        assert!("kd_single_0".parse::<Method>().is_err());
        assert!("bnn".parse::<Method>().is_err());
    }

    #[test]
    fn empty_file_gives_sim1_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::defaults(Scenario::Sim1));
        assert_eq!(c.levels, vec![0.85, 0.90, 0.95]);
        assert_eq!(c.methods.len(), 6);
        assert_eq!(c.sgld.burn_in, c.sgld.total_iters / 2);
    }

    #[test]
    fn sim2_defaults_have_three_teachers() {
        let c = ExperimentConfig::defaults(Scenario::Sim2);
        assert_eq!(c.teacher_count(), 3);
        assert_eq!(c.data.partition, DomainPartition::Sim2Component);
        assert!(c.methods.contains(&Method::KdSingle(3)));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        for bad in [
            "[prior]\nlamda = 2.0",
            "[bogus]\nx = 1",
            "[experiment]\nmethods = []",
            "[experiment]\nmethods = [\"kd_single_3\"]",
            "[experiment]\nlevels = [0.9, 1.0]",
            "[data]\nt1 = 2.0\nt2 = 1.0",
            "[sgld]\ntotal_iters = 10\nburn_in = 10",
            "[experiment]\nscenario = \"sim3\"",
        ] {
            let e = ExperimentConfig::from_toml_str(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::from_toml_str(
            "[experiment]\nseed = 9\nmethods = [\"mtbkd_weighted\"]\n[prior]\nlambda = 2.5\n[sgld]\nschedule = \"constant\"\ntau = 1e-6\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.methods, vec![Method::MtbkdWeighted]);
        assert_eq!(c.prior.lambda, 2.5);
        assert_eq!(c.sgld.schedule, StepSchedule::Constant { tau: 1e-6 });
    }
}
