//! Teacher-informed mixture prior and the resulting student posterior.
//!
//! For training row `i`, teacher `g` contributes a Dirichlet density
//! `Dir(1 + λ p_ig)` evaluated at the student output `q_i`. The prior mixes
//! these with per-sample weights `w_ig`, and the log posterior adds the
//! multinomial log-likelihood of the labels:
//!
//! ```text
//! log π(θ) = Σ_i log q_{i,y_i} + Σ_i log Σ_g w_ig f(q_i | p_ig, λ)
//! ```
//!
//! The classical KD objectives live here too, so that their equivalences with
//! the posterior can be checked against the same code paths.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{floored_ln, LogLinearLoss, NetworkSpec, OutputLoss, Workspace, PROB_FLOOR};
use crate::teachers::TeacherPredictionSet;

/// `log B(α) = Σ_k lnΓ(α_k) − lnΓ(Σ_k α_k)`.
pub fn log_multivariate_beta(alpha: &[f64]) -> f64 {
    let s: f64 = alpha.iter().sum();
    alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(s)
}

/// `log B(1_K + λ p)`.
pub fn log_beta_teacher(p: &[f64], lambda: f64) -> f64 {
    let alpha: Vec<f64> = p.iter().map(|&pk| 1.0 + lambda * pk).collect();
    log_multivariate_beta(&alpha)
}

/// Log density of `Dir(1_K + λ p)` at `q`, with `q` floored inside the log.
pub fn log_dirichlet_density(q: &[f64], p: &[f64], lambda: f64) -> f64 {
    -log_beta_teacher(p, lambda) + dirichlet_kernel(q, p, lambda)
}

/// `Σ_k λ p_k log q_k`; exactly 0 when `λ = 0`.
#[inline]
fn dirichlet_kernel(q: &[f64], p: &[f64], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda * q.iter().zip(p).map(|(&qk, &pk)| pk * floored_ln(qk)).sum::<f64>()
}

pub fn log_sum_exp(a: &[f64]) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log Σ_g w_g f(q | p_g, λ)` evaluated in log space.
pub fn log_mixture_prior_term(q: &[f64], teacher_rows: &[&[f64]], weights: &[f64], lambda: f64) -> f64 {
    let a: Vec<f64> = teacher_rows
        .iter()
        .zip(weights)
        .map(|(p, w)| w.ln() + log_dirichlet_density(q, p, lambda))
        .collect();
    log_sum_exp(&a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    lambda: f64,
    /// `log B(1_K + λ p_ig)`, shape `N × G`.
    log_beta: Array2<f64>,
}

impl PriorConfig {
    pub fn new(lambda: f64, teachers: &TeacherPredictionSet) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("lambda must be a finite value >= 0 (got {lambda})")));
        }
        let n = teachers.n_samples();
        let g = teachers.n_teachers();
        let mut log_beta = Array2::zeros((n, g));
        for t in 0..g {
            let p = teachers.probs(t);
            for i in 0..n {
                log_beta[[i, t]] = log_beta_teacher(p.row(i).as_slice().unwrap(), lambda);
            }
        }
        Ok(Self { lambda, log_beta })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn log_beta(&self) -> &Array2<f64> {
        &self.log_beta
    }
}

/// Everything the posterior of the student depends on.
#[derive(Debug, Clone)]
pub struct PosteriorProblem {
    spec: NetworkSpec,
    data: LabeledDataset,
    teachers: TeacherPredictionSet,
    prior: PriorConfig,
    /// `log w_ig - log B_ig`, the θ-free part of each mixture component.
    offsets: Array2<f64>,
    /// Teacher probabilities laid out `[i][g][k]` for the hot loop.
    packed: Vec<f64>,
}

impl PosteriorProblem {
    pub fn new(
        spec: NetworkSpec,
        data: LabeledDataset,
        teachers: TeacherPredictionSet,
        lambda: f64,
    ) -> Result<Self> {
        if data.len() != teachers.n_samples() {
            return Err(Error::contract(format!(
                "{} training rows but {} teacher prediction rows",
                data.len(),
                teachers.n_samples()
            )));
        }
        if data.is_empty() {
            return Err(Error::contract("posterior needs at least one training row"));
        }
        if data.n_classes() != spec.output_dim() || teachers.n_classes() != spec.output_dim() {
            return Err(Error::contract("class count differs between data, teachers and student"));
        }
        if data.n_features() != spec.input_dim() {
            return Err(Error::contract("feature width differs from the student input"));
        }
        let prior = PriorConfig::new(lambda, &teachers)?;
        let offsets = teachers.weights().mapv(f64::ln) - prior.log_beta();
        let (n, g, k) = (data.len(), teachers.n_teachers(), data.n_classes());
        let mut packed = Vec::with_capacity(n * g * k);
        for i in 0..n {
            for t in 0..g {
                packed.extend(teachers.probs(t).row(i).iter());
            }
        }
        Ok(Self {
            spec,
            data,
            teachers,
            prior,
            offsets,
            packed,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn data(&self) -> &LabeledDataset {
        &self.data
    }

    pub fn teachers(&self) -> &TeacherPredictionSet {
        &self.teachers
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    pub fn lambda(&self) -> f64 {
        self.prior.lambda
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    fn sample_terms(&self) -> SampleTerms<'_> {
        SampleTerms { problem: self }
    }

    /// Per-sample `(log-likelihood, log mixture prior)` at output `q`, and the
    /// component responsibilities written into `resp`.
    fn sample_log_terms(&self, i: usize, q: &[f64], resp: &mut [f64]) -> (f64, f64) {
        let g = self.teachers.n_teachers();
        let k = q.len();
        let lik = floored_ln(q[self.data.labels()[i]]);
        let p = &self.packed[i * g * k..(i + 1) * g * k];
        for t in 0..g {
            resp[t] = self.offsets[[i, t]] + dirichlet_kernel(q, &p[t * k..(t + 1) * k], self.prior.lambda);
        }
        let lse = log_sum_exp(&resp[..g]);
        for r in resp[..g].iter_mut() {
            *r = (*r - lse).exp();
        }
        (lik, lse)
    }

    /// Unnormalized log posterior over all training rows.
    pub fn log_posterior(&self, theta: &[f64]) -> Result<f64> {
        self.spec.check_params(theta)?;
        let mut ws = Workspace::new(&self.spec);
        let mut resp = vec![0.0; self.teachers.n_teachers()];
        let mut total = 0.0;
        for i in 0..self.n() {
            let q = ws.forward(&self.spec, theta, self.data.row(i))?;
            let (lik, prior) = self.sample_log_terms(i, q, &mut resp);
            let v = lik + prior;
            if !v.is_finite() {
                return Err(Error::NonFiniteSample {
                    what: "log posterior",
                    index: i,
                });
            }
            total += v;
        }
        Ok(total)
    }

    /// Mini-batch estimate `(N / m) Σ_{i ∈ batch} ∇ log π_i(θ)`. Both the
    /// likelihood and the data-indexed prior are rescaled.
    pub fn grad_log_posterior(&self, theta: &[f64], batch: &[usize]) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(&self.spec);
        let mut out = vec![0.0; self.spec.param_count()];
        self.grad_log_posterior_into(theta, batch, &mut ws, &mut out)?;
        Ok(out)
    }

    pub fn grad_log_posterior_into(
        &self,
        theta: &[f64],
        batch: &[usize],
        ws: &mut Workspace,
        out: &mut [f64],
    ) -> Result<()> {
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.n()) {
            return Err(Error::contract(format!("batch index {bad} out of range")));
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        self.spec
            .accumulate_grad(theta, self.data.features().view(), batch, &self.sample_terms(), ws, out)?;
        let scale = -(self.n() as f64) / batch.len() as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        if let Some(j) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample {
                what: "posterior gradient",
                index: j,
            });
        }
        Ok(())
    }

    /// Responsibilities `r_ig` of every teacher for row `i` under `theta`.
    pub fn responsibilities(&self, theta: &[f64], i: usize) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(&self.spec);
        let q = ws.forward(&self.spec, theta, self.data.row(i))?;
        let mut resp = vec![0.0; self.teachers.n_teachers()];
        self.sample_log_terms(i, q, &mut resp);
        Ok(resp)
    }
}

/// Negative per-sample log posterior as an output loss.
struct SampleTerms<'a> {
    problem: &'a PosteriorProblem,
}

impl OutputLoss for SampleTerms<'_> {
    fn value(&self, index: usize, q: &[f64]) -> f64 {
        let mut resp = vec![0.0; self.problem.teachers.n_teachers()];
        let (lik, prior) = self.problem.sample_log_terms(index, q, &mut resp);
        -(lik + prior)
    }

    fn grad_output(&self, index: usize, q: &[f64], grad: &mut [f64]) {
        let pb = self.problem;
        let g = pb.teachers.n_teachers();
        let k = q.len();
        // Up to 8 teachers without allocating.
        let mut stack = [0.0; 8];
        let mut heap;
        let resp: &mut [f64] = if g <= stack.len() {
            &mut stack[..g]
        } else {
            heap = vec![0.0; g];
            &mut heap
        };
        pb.sample_log_terms(index, q, resp);
        let label = pb.data.labels()[index];
        let lambda = pb.prior.lambda;
        let p = &pb.packed[index * g * k..(index + 1) * g * k];
        for c in 0..k {
            let mut coef = if c == label { 1.0 } else { 0.0 };
            if lambda != 0.0 {
                let mut s = 0.0;
                for t in 0..g {
                    s += resp[t] * p[t * k + c];
                }
                coef += lambda * s;
            }
            grad[c] = if q[c] > PROB_FLOOR { -coef / q[c] } else { 0.0 };
        }
    }
}

/// How teacher terms are combined in the multi-teacher KD objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdWeights {
    /// One weight per teacher (summing to 1), shared by all rows.
    Global(Vec<f64>),
    /// Per-row weights taken from the prediction set.
    PerSample,
}

/// `L(θ) + λ Σ_g w_g L̃_g(θ)`: mean CE to labels plus weighted mean CE to
/// teacher probabilities.
#[derive(Debug, Clone, Copy)]
pub struct KdObjective<'a> {
    pub spec: &'a NetworkSpec,
    pub data: &'a LabeledDataset,
    pub teachers: &'a TeacherPredictionSet,
    pub lambda: f64,
    pub weights: &'a KdWeights,
}

impl KdObjective<'_> {
    fn check(&self) -> Result<()> {
        if self.teachers.n_samples() != self.data.len() {
            return Err(Error::contract("teacher rows differ from data rows"));
        }
        if let KdWeights::Global(w) = self.weights {
            if w.len() != self.teachers.n_teachers() {
                return Err(Error::contract("one global weight per teacher is required"));
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::contract("global teacher weights must sum to 1"));
            }
        }
        Ok(())
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        self.check()?;
        self.spec.check_params(theta)?;
        let mut ws = Workspace::new(self.spec);
        let mut c = vec![0.0; self.spec.output_dim()];
        let mut total = 0.0;
        for i in 0..self.data.len() {
            let q = ws.forward(self.spec, theta, self.data.row(i))?;
            self.coefficients(i, q, &mut c);
            total -= c.iter().zip(q).map(|(c, &q)| c * floored_ln(q)).sum::<f64>();
        }
        Ok(total / self.data.len() as f64)
    }

    /// Mean gradient over `batch`.
    pub fn grad(&self, theta: &[f64], batch: &[usize]) -> Result<Vec<f64>> {
        self.check()?;
        let (_, g) = self
            .spec
            .grad_scalar_loss(theta, self.data.features().view(), batch, self)?;
        Ok(g.into_inner())
    }

    pub fn full_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.grad(theta, &all)
    }
}

impl LogLinearLoss for KdObjective<'_> {
    fn coefficients(&self, index: usize, _q: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|c| *c = 0.0);
        out[self.data.labels()[index]] = 1.0;
        for g in 0..self.teachers.n_teachers() {
            let w = match self.weights {
                KdWeights::Global(w) => w[g],
                KdWeights::PerSample => self.teachers.weights()[[index, g]],
            };
            let p = self.teachers.probs(g).row(index);
            for (o, pk) in out.iter_mut().zip(p) {
                *o += self.lambda * w * pk;
            }
        }
    }
}

/// Single-teacher KD loss `L + λ L̃` with teacher probabilities `p` (N × K).
pub fn kd_loss(
    spec: &NetworkSpec,
    data: &LabeledDataset,
    teacher: &TeacherPredictionSet,
    theta: &[f64],
    lambda: f64,
) -> Result<f64> {
    if teacher.n_teachers() != 1 {
        return Err(Error::contract("kd_loss needs exactly one teacher"));
    }
    KdObjective {
        spec,
        data,
        teachers: teacher,
        lambda,
        weights: &KdWeights::Global(vec![1.0]),
    }
    .value(theta)
}

pub fn multi_kd_loss(
    spec: &NetworkSpec,
    data: &LabeledDataset,
    teachers: &TeacherPredictionSet,
    theta: &[f64],
    lambda: f64,
    weights: &KdWeights,
) -> Result<f64> {
    KdObjective {
        spec,
        data,
        teachers,
        lambda,
        weights,
    }
    .value(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirichlet_examples() {
        assert!(log_dirichlet_density(&[0.3, 0.7], &[0.9, 0.1], 0.0).abs() < 1e-15);
        let v = log_dirichlet_density(&[0.5, 0.5], &[0.5, 0.5], 2.0);
        assert!((v - 1.5f64.ln()).abs() < 1e-12, "{v}");
        assert!((log_multivariate_beta(&[2.0, 2.0]) - (1.0f64 / 6.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn mixture_term_special_cases() {
        let q = [0.2, 0.3, 0.5];
        let p = [0.1, 0.6, 0.3];
        let single = log_mixture_prior_term(&q, &[&p], &[1.0], 1.5);
        assert!((single - log_dirichlet_density(&q, &p, 1.5)).abs() < 1e-14);
        let dup = log_mixture_prior_term(&q, &[&p, &p], &[0.3, 0.7], 1.5);
        assert!((dup - single).abs() < 1e-14);
        let partial = log_mixture_prior_term(&q, &[&p], &[0.4], 1.5);
        assert!((partial - (0.4f64.ln() + single)).abs() < 1e-14);
    }

    #[test]
    fn mixture_term_matches_naive_sum() {
        let q = [0.25, 0.6, 0.15];
        let p1 = [0.7, 0.2, 0.1];
        let p2 = [0.1, 0.85, 0.05];
        let w = [0.35, 0.65];
        let naive = (w[0] * log_dirichlet_density(&q, &p1, 3.0).exp()
            + w[1] * log_dirichlet_density(&q, &p2, 3.0).exp())
        .ln();
        let v = log_mixture_prior_term(&q, &[&p1, &p2], &w, 3.0);
        assert!((v - naive).abs() < 1e-10);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
    }

    #[test]
    fn negative_lambda_rejected() {
        let t = TeacherPredictionSet::from_probs(
            vec![ndarray::array![[0.5, 0.5]]],
            crate::teachers::WeightingMode::Equal,
            Default::default(),
        )
        .unwrap();
        assert!(PriorConfig::new(-1.0, &t).is_err());
    }
}
