//! Labeled datasets and the synthetic generators used in the experiments.
//!
//! Class labels are stored as 0-based indices in memory and written 1-based
//! to files. Domain tags are 1-based everywhere.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array2, ArrayView1};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, SIMPLEX_TOL};
use crate::rng::{seeded, streams};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    true_probs: Option<Array2<f64>>,
    domain_tags: Option<Vec<u32>>,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        true_probs: Option<Array2<f64>>,
        domain_tags: Option<Vec<u32>>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::contract("label count differs from feature rows"));
        }
        if n_classes == 0 || labels.iter().any(|&y| y >= n_classes) {
            return Err(Error::contract("label outside 0..n_classes"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite feature value"));
        }
        if let Some(p) = &true_probs {
            if p.nrows() != n || p.ncols() != n_classes {
                return Err(Error::contract("true_probs shape mismatch"));
            }
            for row in p.rows() {
                let s: f64 = row.sum();
                if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&v| !(0.0..=1.0).contains(&v))
                {
                    return Err(Error::contract("true_probs row is not a probability vector"));
                }
            }
        }
        if let Some(t) = &domain_tags {
            if t.len() != n || t.contains(&0) {
                return Err(Error::contract("domain tags must be 1-based, one per row"));
            }
        }
        let features = features.as_standard_layout().into_owned();
        Ok(Self {
            features,
            labels,
            n_classes,
            true_probs,
            domain_tags,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features
            .row(i)
            .to_slice()
            .expect("features are stored in standard layout")
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.n_classes];
        y[self.labels[i]] = 1.0;
        y
    }

    pub fn true_probs(&self) -> Option<&Array2<f64>> {
        self.true_probs.as_ref()
    }

    pub fn true_prob_row(&self, i: usize) -> Option<ArrayView1<'_, f64>> {
        self.true_probs.as_ref().map(|p| p.row(i))
    }

    pub fn domain_tags(&self) -> Option<&[u32]> {
        self.domain_tags.as_deref()
    }

    /// Sorted distinct domain tags.
    pub fn domains(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.domain_tags.clone().unwrap_or_default();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// Rows `idx` in the given order (duplicates allowed).
    pub fn subset(&self, idx: &[usize]) -> Self {
        let m = self.n_features();
        let mut feats = Array2::zeros((idx.len(), m));
        for (r, &i) in idx.iter().enumerate() {
            feats.row_mut(r).assign(&self.features.row(i));
        }
        let true_probs = self.true_probs.as_ref().map(|p| {
            let mut out = Array2::zeros((idx.len(), self.n_classes));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&p.row(i));
            }
            out
        });
        Self {
            features: feats,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            true_probs,
            domain_tags: self
                .domain_tags
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }

    /// Bit-level fingerprint used in run manifests.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_binary_bytes());
        format!("{:x}", h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DomainPartition {
    /// Vertical bands on `x1`: `x1 < t1` is domain 1, `t1 <= x1 < t2` is 2, rest 3.
    Sim1Thresholds { t1: f64, t2: f64 },
    /// Domain equals the generating mixture component (1-based).
    Sim2Component,
}

impl DomainPartition {
    pub const SIM1_DEFAULT: DomainPartition = DomainPartition::Sim1Thresholds { t1: -0.85, t2: 1.4 };

    pub fn validate(&self) -> Result<()> {
        if let DomainPartition::Sim1Thresholds { t1, t2 } = *self {
            if !(t1 < t2) {
                return Err(Error::config(format!(
                    "domain thresholds must satisfy t1 < t2 (got {t1}, {t2})"
                )));
            }
        }
        Ok(())
    }

    pub fn sim1_tag(&self, x1: f64) -> u32 {
        match *self {
            DomainPartition::Sim1Thresholds { t1, t2 } => {
                if x1 < t1 {
                    1
                } else if x1 < t2 {
                    2
                } else {
                    3
                }
            }
            DomainPartition::Sim2Component => {
                panic!("component partition has no threshold rule")
            }
        }
    }
}

/// Log-odds of class 1 in the binary simulation.
pub fn sim1_eta(x1: f64, x2: f64) -> f64 {
    -0.5 + 0.1 * x1 + 0.8 * x1 * x1 - 0.8 * x2 * x2
}

/// `P(class 1 | x)` in the binary simulation.
pub fn sim1_prob(x1: f64, x2: f64) -> f64 {
    let eta = sim1_eta(x1, x2);
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Binary simulation: `x1 ~ U(-3, 3.5)`, `x2 ~ U(-3, 3)`, class 1 with
/// probability `logistic(eta(x))`. `true_probs` rows are `(p, 1 - p)`.
pub fn gen_sim1(n: usize, seed: u64, partition: DomainPartition) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::config("sample size must be positive"));
    }
    partition.validate()?;
    if matches!(partition, DomainPartition::Sim2Component) {
        return Err(Error::config("simulation 1 needs threshold domains"));
    }
    let mut rng = seeded(seed, streams::DATA);
    let u1 = Uniform::new(-3.0, 3.5).unwrap();
    let u2 = Uniform::new(-3.0, 3.0).unwrap();
    let mut features = Array2::zeros((n, 2));
    let mut probs = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let mut tags = Vec::with_capacity(n);
    for i in 0..n {
        let x1 = u1.sample(&mut rng);
        let x2 = u2.sample(&mut rng);
        let p = sim1_prob(x1, x2);
        features[[i, 0]] = x1;
        features[[i, 1]] = x2;
        probs[[i, 0]] = p;
        probs[[i, 1]] = 1.0 - p;
        labels.push(if rng.random::<f64>() < p { 0 } else { 1 });
        tags.push(partition.sim1_tag(x1));
    }
    LabeledDataset::new(features, labels, 2, Some(probs), Some(tags))
}

/// Component means of the multi-class simulation.
pub const SIM2_MEANS: [[f64; 5]; 5] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0, 3.0, 3.0, 3.0, 3.0],
    [0.0, 0.0, 1.0, 3.0, 2.0],
    [2.0, 0.0, 1.0, 2.0, 1.0],
    [2.0, 2.0, 1.0, 0.0, 1.0],
];

/// `Σ_ij = 0.5^|i-j|`.
pub fn sim2_covariance() -> DMatrix<f64> {
    DMatrix::from_fn(5, 5, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()))
}

/// Gaussian mixture with a shared covariance; class posteriors are the
/// normalized component densities.
#[derive(Debug, Clone)]
pub struct Sim2Model {
    means: Vec<DVector<f64>>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl Sim2Model {
    pub fn new() -> Result<Self> {
        let chol = Cholesky::new(sim2_covariance())
            .ok_or_else(|| Error::contract("covariance is not positive definite"))?;
        let means = SIM2_MEANS
            .iter()
            .map(|m| DVector::from_row_slice(m))
            .collect();
        Ok(Self { means, chol })
    }

    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Squared Mahalanobis distance from `x` to each component mean.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_row_slice(x);
        self.means
            .iter()
            .map(|m| {
                let d = &x - m;
                let z = self.chol.l().solve_lower_triangular(&d).expect("invertible factor");
                z.norm_squared()
            })
            .collect()
    }

    pub fn class_probs(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = self.mahalanobis_sq(x).iter().map(|d| -0.5 * d).collect();
        softmax_in_place(&mut z);
        z
    }

    fn sample<R: Rng + ?Sized>(&self, component: usize, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(5, |_, _| StandardNormal.sample(rng));
        let x = &self.means[component] + self.chol.l() * z;
        x.iter().copied().collect()
    }
}

/// Multi-class simulation: `n_per_class` draws from each of the five
/// Gaussians, labels drawn from the normalized densities.
pub fn gen_sim2(n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::config("sample size per class must be positive"));
    }
    let model = Sim2Model::new()?;
    let mut rng = seeded(seed, streams::DATA);
    let n = 5 * n_per_class;
    let mut features = Array2::zeros((n, 5));
    let mut probs = Array2::zeros((n, 5));
    let mut labels = Vec::with_capacity(n);
    let mut tags = Vec::with_capacity(n);
    for c in 0..5 {
        for r in 0..n_per_class {
            let i = c * n_per_class + r;
            let x = model.sample(c, &mut rng);
            let p = model.class_probs(&x);
            for k in 0..5 {
                features[[i, k]] = x[k];
                probs[[i, k]] = p[k];
            }
            labels.push(sample_categorical(&p, &mut rng));
            tags.push(c as u32 + 1);
        }
    }
    LabeledDataset::new(features, labels, 5, Some(probs), Some(tags))
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// Source row indices of each split.
    pub indices: [Vec<usize>; 3],
}

/// Shuffled disjoint train/validation/test partition.
pub fn split(dataset: &LabeledDataset, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    let SplitRatios { train, val, test } = ratios;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split ratios must be positive and sum to 1 (got {train}, {val}, {test})"
        )));
    }
    let n = dataset.len();
    let n_val = (n as f64 * val).round() as usize;
    let n_test = (n as f64 * test).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::config(format!(
            "split of {n} rows leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed, streams::SPLIT));
    let tr = idx[..n_train].to_vec();
    let va = idx[n_train..n_train + n_val].to_vec();
    let te = idx[n_train + n_val..].to_vec();
    Ok(Splits {
        train: dataset.subset(&tr),
        val: dataset.subset(&va),
        test: dataset.subset(&te),
        indices: [tr, va, te],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub specialty_domain: u32,
    pub specialty_fraction: f64,
    pub specialty_count: usize,
    /// Set when a quota exceeded the available rows and was filled with replacement.
    pub with_replacement: bool,
    pub source_indices: Vec<usize>,
}

/// Resample `size` rows: `round(fraction * size)` from the specialty domain,
/// the rest uniformly from all other domains.
pub fn gen_teacher_corpus(
    dataset: &LabeledDataset,
    specialty_domain: u32,
    specialty_fraction: f64,
    size: usize,
    seed: u64,
) -> Result<(LabeledDataset, CorpusMeta)> {
    let tags = dataset
        .domain_tags()
        .ok_or_else(|| Error::config("teacher corpus needs domain tags"))?;
    if !(specialty_fraction > 0.0 && specialty_fraction <= 1.0) {
        return Err(Error::config("specialty fraction must lie in (0, 1]"));
    }
    if size == 0 {
        return Err(Error::config("teacher corpus size must be positive"));
    }
    let (own, other): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| tags[i] == specialty_domain);
    if own.is_empty() {
        return Err(Error::config(format!(
            "domain {specialty_domain} has no rows"
        )));
    }
    let n_own = ((specialty_fraction * size as f64).round() as usize).min(size);
    let n_other = size - n_own;
    if n_other > 0 && other.is_empty() {
        return Err(Error::config("no rows outside the specialty domain"));
    }
    let mut rng = seeded(seed, streams::CORPUS + specialty_domain as u64);
    let mut with_replacement = false;
    let mut draw = |pool: &[usize], k: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        if k <= pool.len() {
            pool.choose_multiple(rng, k).copied().collect()
        } else {
            with_replacement = true;
            (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        }
    };
    let mut idx = draw(&own, n_own, &mut rng);
    idx.extend(draw(&other, n_other, &mut rng));
    idx.shuffle(&mut rng);
    let meta = CorpusMeta {
        specialty_domain,
        specialty_fraction,
        specialty_count: n_own,
        with_replacement,
        source_indices: idx.clone(),
    };
    Ok((dataset.subset(&idx), meta))
}

/// Two-component Gaussian prior mixture with a Gaussian likelihood on the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyProblem {
    pub prior_means: [f64; 2],
    pub prior_weights: [f64; 2],
    pub prior_var: f64,
    pub obs: f64,
    pub obs_var: f64,
    pub n_obs: usize,
    pub posterior: GaussianMixture1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture1d {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianMixture1d {
    pub fn pdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| w * normal_pdf(x, *m, *v))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    /// Component responsibilities at `x`.
    pub fn responsibilities(&self, x: f64) -> Vec<f64> {
        let mut a: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| w.ln() - 0.5 * (x - m).powi(2) / v - 0.5 * v.ln())
            .collect();
        softmax_in_place(&mut a);
        a
    }
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

pub fn gen_toy_1d(
    prior_means: [f64; 2],
    prior_var: f64,
    obs: f64,
    obs_var: f64,
    n_obs: usize,
) -> Result<ToyProblem> {
    if !(prior_var > 0.0 && obs_var > 0.0) || n_obs == 0 {
        return Err(Error::config("toy variances and n_obs must be positive"));
    }
    let n = n_obs as f64;
    let post_prec = 1.0 / prior_var + n / obs_var;
    let post_var = 1.0 / post_prec;
    let means = prior_means
        .iter()
        .map(|mu| (mu / prior_var + n * obs / obs_var) * post_var)
        .collect();
    // Marginal of the data mean under component c: N(obs; mu_c, prior_var + obs_var / n).
    let marg_var = prior_var + obs_var / n;
    let mut logw: Vec<f64> = prior_means
        .iter()
        .map(|mu| 0.5f64.ln() - (obs - mu).powi(2) / (2.0 * marg_var))
        .collect();
    softmax_in_place(&mut logw);
    Ok(ToyProblem {
        prior_means,
        prior_weights: [0.5, 0.5],
        prior_var,
        obs,
        obs_var,
        n_obs,
        posterior: GaussianMixture1d {
            weights: logw,
            means,
            variances: vec![post_var; 2],
        },
    })
}

impl ToyProblem {
    /// Observation variance 2: with 1 the second mode is a 0.4% bump on a
    /// shoulder, with 2 the density dips by about 30% between the peaks.
    pub fn default_problem() -> Self {
        gen_toy_1d([2.0, 6.0], 1.0, 3.5, 2.0, 1).expect("valid defaults")
    }

    /// Unnormalized log posterior at `theta`.
    pub fn log_density(&self, theta: f64) -> f64 {
        let prior: f64 = self
            .prior_means
            .iter()
            .zip(&self.prior_weights)
            .map(|(m, w)| w * normal_pdf(theta, *m, self.prior_var))
            .sum();
        prior.ln() - self.n_obs as f64 * (theta - self.obs).powi(2) / (2.0 * self.obs_var)
    }

    pub fn grad_log_density(&self, theta: f64) -> f64 {
        let mut a: Vec<f64> = self
            .prior_means
            .iter()
            .zip(&self.prior_weights)
            .map(|(m, w)| w.ln() - (theta - m).powi(2) / (2.0 * self.prior_var))
            .collect();
        softmax_in_place(&mut a);
        let prior_grad: f64 = a
            .iter()
            .zip(&self.prior_means)
            .map(|(r, m)| -r * (theta - m) / self.prior_var)
            .sum();
        prior_grad - self.n_obs as f64 * (theta - self.obs) / self.obs_var
    }
}

// --- serialization -------------------------------------------------------

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

const DATASET_MAGIC: &[u8; 8] = b"MTBKDDS1";

impl LabeledDataset {
    /// Columns `x_1..x_m, y, p_true_1..p_true_K, domain`; `y` is 1-based and
    /// `domain` is empty when tags are absent.
    pub fn to_csv_string(&self) -> String {
        let m = self.n_features();
        let k = self.n_classes;
        let mut out = String::new();
        let mut header: Vec<String> = (1..=m).map(|j| format!("x_{j}")).collect();
        header.push("y".into());
        if self.true_probs.is_some() {
            header.extend((1..=k).map(|j| format!("p_true_{j}")));
        }
        header.push("domain".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.len() {
            let mut cells: Vec<String> = self.features.row(i).iter().map(|&v| fmt_f64(v)).collect();
            cells.push((self.labels[i] + 1).to_string());
            if let Some(p) = &self.true_probs {
                cells.extend(p.row(i).iter().map(|&v| fmt_f64(v)));
            }
            cells.push(
                self.domain_tags
                    .as_ref()
                    .map(|t| t[i].to_string())
                    .unwrap_or_default(),
            );
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Reads the CSV layout written by [`Self::write_csv`]. Without `p_true`
    /// columns the class count is `n_classes` if given, else the largest label.
    pub fn read_csv(path: &Path, n_classes: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, n_classes).map_err(|reason| Error::format(path, reason))
    }

    fn parse_csv(text: &str, n_classes: Option<usize>) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or("empty file")?.split(',').collect();
        let m = header.iter().filter(|h| h.starts_with("x_")).count();
        let k_cols = header.iter().filter(|h| h.starts_with("p_true_")).count();
        if header.get(m) != Some(&"y") || header.last() != Some(&"domain") || m == 0 {
            return Err("unexpected header".into());
        }
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        let mut probs = Vec::new();
        let mut tags = Vec::new();
        let mut any_tag = false;
        for (ln, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(format!("row {} has {} cells", ln + 1, cells.len()));
            }
            for c in &cells[..m] {
                feats.push(c.parse::<f64>().map_err(|e| e.to_string())?);
            }
            let y: usize = cells[m].parse().map_err(|_| format!("bad label on row {}", ln + 1))?;
            if y == 0 {
                return Err("labels are 1-based".into());
            }
            labels.push(y - 1);
            for c in &cells[m + 1..m + 1 + k_cols] {
                probs.push(c.parse::<f64>().map_err(|e| e.to_string())?);
            }
            let d = cells[m + 1 + k_cols];
            if d.is_empty() {
                tags.push(0);
            } else {
                any_tag = true;
                tags.push(d.parse::<u32>().map_err(|e| e.to_string())?);
            }
        }
        let n = labels.len();
        let k = if k_cols > 0 {
            k_cols
        } else {
            n_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1))
        };
        let features = Array2::from_shape_vec((n, m), feats).map_err(|e| e.to_string())?;
        let true_probs = if k_cols > 0 {
            Some(Array2::from_shape_vec((n, k), probs).map_err(|e| e.to_string())?)
        } else {
            None
        };
        Self::new(features, labels, k, true_probs, any_tag.then_some(tags)).map_err(|e| e.to_string())
    }

    pub fn to_binary_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let m = self.n_features();
        let mut b = Vec::with_capacity(40 + n * (m + self.n_classes + 2) * 8);
        b.extend_from_slice(DATASET_MAGIC);
        for v in [n as u64, m as u64, self.n_classes as u64] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(self.true_probs.is_some() as u8);
        b.push(self.domain_tags.is_some() as u8);
        for v in self.features.iter() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            b.extend_from_slice(&(y as u32).to_le_bytes());
        }
        if let Some(p) = &self.true_probs {
            for v in p.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(t) = &self.domain_tags {
            for v in t {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_binary_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != DATASET_MAGIC {
            return Err("bad magic".into());
        }
        let n = r.u64()? as usize;
        let m = r.u64()? as usize;
        let k = r.u64()? as usize;
        let has_p = r.take(1)?[0] == 1;
        let has_t = r.take(1)?[0] == 1;
        let feats = (0..n * m).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let labels = (0..n)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let probs = if has_p {
            let v = (0..n * k).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            Some(Array2::from_shape_vec((n, k), v).map_err(|e| e.to_string())?)
        } else {
            None
        };
        let tags = if has_t {
            Some((0..n).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?)
        } else {
            None
        };
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        let features = Array2::from_shape_vec((n, m), feats).map_err(|e| e.to_string())?;
        Self::new(features, labels, k, probs, tags).map_err(|e| e.to_string())
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_binary_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_binary_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() < n {
            return Err("unexpected end of data".into());
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim1_formula_values() {
        assert!((sim1_eta(0.0, 0.0) + 0.5).abs() < 1e-15);
        assert!((sim1_prob(0.0, 0.0) - 0.377_540_668_798_145_4).abs() < 1e-12);
        assert!((sim1_eta(0.0, 3.0) + 7.7).abs() < 1e-12);
        let p = sim1_prob(0.0, 3.0);
        assert!((p - 1.0 / (1.0 + 7.7f64.exp())).abs() < 1e-18, "{p}");
        assert!((p - 4.5262e-4).abs() < 1e-8, "{p}");
    }

    #[test]
    fn sim1_is_reproducible_and_tagged() {
        let a = gen_sim1(500, 7, DomainPartition::SIM1_DEFAULT).unwrap();
        let b = gen_sim1(500, 7, DomainPartition::SIM1_DEFAULT).unwrap();
        assert_eq!(a.to_binary_bytes(), b.to_binary_bytes());
        let c = gen_sim1(500, 8, DomainPartition::SIM1_DEFAULT).unwrap();
        assert_ne!(a.features(), c.features());
        let tags = a.domain_tags().unwrap();
        for i in 0..a.len() {
            assert_eq!(tags[i], DomainPartition::SIM1_DEFAULT.sim1_tag(a.row(i)[0]));
            assert!((1..=3).contains(&tags[i]));
        }
    }

    #[test]
    fn partition_thresholds_must_be_ordered() {
        let bad = DomainPartition::Sim1Thresholds { t1: 1.0, t2: 1.0 };
        assert!(gen_sim1(10, 0, bad).is_err());
    }

    #[test]
    fn sim2_probs_normalized_and_mode_at_mean() {
        let model = Sim2Model::new().unwrap();
        let p = model.class_probs(&[0.0; 5]);
        assert_eq!(crate::nn::argmax(&p), 0);
        let d = gen_sim2(50, 3).unwrap();
        for row in d.true_probs().unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert_eq!(d.domains(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn sim2_covariance_factorizes() {
        let model = Sim2Model::new().unwrap();
        let l = model.cholesky_factor();
        let s = sim2_covariance();
        assert!((&l * l.transpose() - &s).abs().max() < 1e-12);
        assert_eq!(s, s.transpose());
        assert!(l.diagonal().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let d = gen_sim1(10, 1, DomainPartition::SIM1_DEFAULT).unwrap();
        let s = split(&d, SplitRatios::default(), 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let mut all: Vec<usize> = s.indices.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let again = split(&d, SplitRatios::default(), 4).unwrap();
        assert_eq!(s.indices, again.indices);
        assert_eq!(s.test, again.test);
    }

    #[test]
    fn split_rejects_empty_parts_and_bad_ratios() {
        let d = gen_sim1(2, 1, DomainPartition::SIM1_DEFAULT).unwrap();
        assert!(split(&d, SplitRatios::default(), 0).is_err());
        let d = gen_sim1(100, 1, DomainPartition::SIM1_DEFAULT).unwrap();
        let bad = SplitRatios {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(split(&d, bad, 0).is_err());
    }

    #[test]
    fn corpus_quota_is_exact() {
        let d = gen_sim1(3000, 2, DomainPartition::SIM1_DEFAULT).unwrap();
        let (c, meta) = gen_teacher_corpus(&d, 1, 0.8, 1000, 9).unwrap();
        let tags = c.domain_tags().unwrap();
        assert_eq!(tags.iter().filter(|&&t| t == 1).count(), 800);
        assert_eq!(meta.specialty_count, 800);
        assert!(!meta.with_replacement);
        for (r, &i) in meta.source_indices.iter().enumerate() {
            assert_eq!(c.row(r), d.row(i));
            assert_eq!(c.labels()[r], d.labels()[i]);
        }
        let (c, _) = gen_teacher_corpus(&d, 3, 1.0, 200, 9).unwrap();
        assert!(c.domain_tags().unwrap().iter().all(|&t| t == 3));
    }

    #[test]
    fn corpus_falls_back_to_replacement() {
        let d = gen_sim1(30, 2, DomainPartition::SIM1_DEFAULT).unwrap();
        let (c, meta) = gen_teacher_corpus(&d, 2, 0.9, 100, 1).unwrap();
        assert!(meta.with_replacement);
        assert_eq!(c.len(), 100);
    }

    #[test]
    fn toy_posterior_closed_form() {
        let t = gen_toy_1d([2.0, 6.0], 1.0, 3.5, 1.0, 1).unwrap();
        assert!((t.posterior.means[0] - 2.75).abs() < 1e-12);
        assert!((t.posterior.means[1] - 4.75).abs() < 1e-12);
        assert!((t.posterior.variances[0] - 0.5).abs() < 1e-12);
        let ratio = t.posterior.weights[0] / t.posterior.weights[1];
        assert!((ratio - 1f64.exp()).abs() < 1e-12);
        let mid = gen_toy_1d([2.0, 6.0], 1.0, 4.0, 1.0, 1).unwrap();
        assert!((mid.posterior.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn toy_gradient_matches_log_density() {
        let t = ToyProblem::default_problem();
        for &th in &[-1.0, 2.0, 3.3, 4.0, 7.5] {
            let h = 1e-5;
            let fd = (t.log_density(th + h) - t.log_density(th - h)) / (2.0 * h);
            assert!((fd - t.grad_log_density(th)).abs() < 1e-6);
        }
        // Unnormalized log posterior differs from the closed-form mixture by a constant.
        let c0 = t.log_density(1.0) - t.posterior.pdf(1.0).ln();
        for &th in &[2.5, 3.5, 5.0] {
            let c = t.log_density(th) - t.posterior.pdf(th).ln();
            assert!((c - c0).abs() < 1e-10);
        }
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let d = gen_sim2(4, 11).unwrap();
        let back = LabeledDataset::parse_csv(&d.to_csv_string(), None).unwrap();
        assert_eq!(back, d);
        let back = LabeledDataset::from_binary_bytes(&d.to_binary_bytes()).unwrap();
        assert_eq!(back, d);
    }
}
