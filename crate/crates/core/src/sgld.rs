//! Stochastic-gradient Langevin dynamics.
//!
//! Each step moves `θ ← θ + τ_j ĝ(θ) + sqrt(2 τ_j) ξ` where `ĝ` is the
//! mini-batch estimate of `∇ log π` and `ξ ~ N(0, I)`. There is no
//! Metropolis correction.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ByteReader, ToyProblem};
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, ParamVector, Workspace};
use crate::posterior::PosteriorProblem;
use crate::rng::{seeded, streams};

/// A log density whose gradient can be estimated from index batches.
pub trait GradientTarget {
    type Scratch;

    fn dim(&self) -> usize;

    /// Number of rows mini-batches are drawn from.
    fn n_data(&self) -> usize;

    fn scratch(&self) -> Self::Scratch;

    /// Writes an unbiased estimate of `∇ log π(θ)` computed from `batch`.
    fn grad_log_density(
        &self,
        theta: &[f64],
        batch: &[usize],
        scratch: &mut Self::Scratch,
        out: &mut [f64],
    ) -> Result<()>;
}

impl GradientTarget for PosteriorProblem {
    type Scratch = Workspace;

    fn dim(&self) -> usize {
        self.spec().param_count()
    }

    fn n_data(&self) -> usize {
        self.n()
    }

    fn scratch(&self) -> Workspace {
        Workspace::new(self.spec())
    }

    fn grad_log_density(
        &self,
        theta: &[f64],
        batch: &[usize],
        scratch: &mut Workspace,
        out: &mut [f64],
    ) -> Result<()> {
        self.grad_log_posterior_into(theta, batch, scratch, out)
    }
}

impl GradientTarget for ToyProblem {
    type Scratch = ();

    fn dim(&self) -> usize {
        1
    }

    fn n_data(&self) -> usize {
        1
    }

    fn scratch(&self) {}

    fn grad_log_density(&self, theta: &[f64], _: &[usize], _: &mut (), out: &mut [f64]) -> Result<()> {
        out[0] = self.grad_log_density(theta[0]);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { tau: f64 },
    /// `τ_j = a (b + j)^(-γ)` for step `j = 0, 1, ...`.
    Polynomial { a: f64, b: f64, gamma: f64 },
}

impl StepSchedule {
    pub fn step(&self, j: usize) -> f64 {
        match *self {
            StepSchedule::Constant { tau } => tau,
            StepSchedule::Polynomial { a, b, gamma } => a * (b + j as f64).powf(-gamma),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { tau } => tau > 0.0 && tau.is_finite(),
            StepSchedule::Polynomial { a, b, gamma } => {
                a > 0.0 && a.is_finite() && b > 0.0 && gamma >= 0.0 && gamma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("step sizes must be strictly positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    pub schedule: StepSchedule,
    pub total_iters: usize,
    pub batch_size: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    /// Project every coordinate into `[-c, c]` after each step.
    pub param_clip: Option<f64>,
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.burn_in >= self.total_iters {
            return Err(Error::config(format!(
                "burn-in ({}) must be smaller than the iteration count ({})",
                self.burn_in, self.total_iters
            )));
        }
        if self.thinning == 0 || self.batch_size == 0 {
            return Err(Error::config("thinning and batch size must be at least 1"));
        }
        if let Some(c) = self.param_clip {
            if !(c > 0.0) {
                return Err(Error::config("parameter clip bound must be positive"));
            }
        }
        Ok(())
    }

    /// Number of retained samples, `floor((total - burn_in) / thinning)`.
    pub fn retained(&self) -> usize {
        (self.total_iters - self.burn_in) / self.thinning
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub samples: Vec<ParamVector>,
    pub config: SgldConfig,
    pub iterations: usize,
    pub final_step_size: f64,
    pub divergence: Option<Divergence>,
}

impl PosteriorChain {
    /// A chain holding fixed samples, e.g. a point estimate (`r = 1`).
    pub fn from_samples(samples: Vec<ParamVector>) -> Self {
        let r = samples.len();
        Self {
            samples,
            config: SgldConfig {
                schedule: StepSchedule::Constant { tau: 1.0 },
                total_iters: r,
                batch_size: 1,
                burn_in: 0,
                thinning: 1,
                seed: 0,
                param_clip: None,
            },
            iterations: r,
            final_step_size: 0.0,
            divergence: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.divergence {
            Some(d) => Err(Error::SamplerDiverged {
                iteration: d.iteration,
            }),
            None => Ok(self),
        }
    }
}

/// Runs SGLD from `init`. Mini-batches are consecutive chunks of a
/// permutation that is reshuffled whenever it runs out.
///
/// A non-finite iterate stops the run; the samples kept so far are returned
/// with `divergence` set.
pub fn sgld_run<T: GradientTarget>(
    target: &T,
    config: &SgldConfig,
    init: &ParamVector,
) -> Result<PosteriorChain> {
    config.validate()?;
    let dim = target.dim();
    if init.len() != dim {
        return Err(Error::contract(format!(
            "initial point has length {}, target has dimension {dim}",
            init.len()
        )));
    }
    let n = target.n_data();
    if n == 0 {
        return Err(Error::contract("target has no rows to batch over"));
    }
    let m = config.batch_size.min(n);
    let mut rng = seeded(config.seed, streams::SGLD);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut theta = init.as_slice().to_vec();
    let mut grad = vec![0.0; dim];
    let mut scratch = target.scratch();
    let mut samples = Vec::with_capacity(config.retained());
    let mut divergence = None;
    let mut tau = config.schedule.step(0);
    let mut done = 0;

    for j in 0..config.total_iters {
        if cursor + m > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + m];
        cursor += m;

        tau = config.schedule.step(j);
        if let Err(e) = target.grad_log_density(&theta, batch, &mut scratch, &mut grad) {
            divergence = Some(Divergence {
                iteration: j + 1,
                reason: e.to_string(),
            });
            break;
        }
        let noise_scale = (2.0 * tau).sqrt();
        for (t, g) in theta.iter_mut().zip(&grad) {
            let xi: f64 = StandardNormal.sample(&mut rng);
            *t += tau * g + noise_scale * xi;
        }
        if let Some(c) = config.param_clip {
            theta.iter_mut().for_each(|t| *t = t.clamp(-c, c));
        }
        done = j + 1;
        if theta.iter().any(|t| !t.is_finite()) {
            divergence = Some(Divergence {
                iteration: j + 1,
                reason: "non-finite parameter".into(),
            });
            break;
        }
        if done > config.burn_in && (done - config.burn_in) % config.thinning == 0 {
            samples.push(ParamVector::new(theta.clone()));
        }
    }
    Ok(PosteriorChain {
        samples,
        config: *config,
        iterations: done,
        final_step_size: tau,
        divergence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub ess: Vec<f64>,
}

/// Per-coordinate mean, sample variance and effective sample size.
pub fn chain_summary(chain: &PosteriorChain) -> Result<ChainSummary> {
    let r = chain.len();
    if r < 2 {
        return Err(Error::contract("chain summary needs at least two samples"));
    }
    let dim = chain.samples[0].len();
    let mut mean = Vec::with_capacity(dim);
    let mut variance = Vec::with_capacity(dim);
    let mut ess = Vec::with_capacity(dim);
    let mut planner = FftPlanner::new();
    for d in 0..dim {
        let xs: Vec<f64> = chain.samples.iter().map(|s| s[d]).collect();
        let mu = xs.iter().sum::<f64>() / r as f64;
        let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (r - 1) as f64;
        mean.push(mu);
        variance.push(var);
        ess.push(effective_sample_size_with(&xs, &mut planner));
    }
    Ok(ChainSummary {
        mean,
        variance,
        ess,
    })
}

pub fn effective_sample_size(xs: &[f64]) -> f64 {
    effective_sample_size_with(xs, &mut FftPlanner::new())
}

/// Geyer's initial positive sequence estimator, capped at `r`.
fn effective_sample_size_with(xs: &[f64], planner: &mut FftPlanner<f64>) -> f64 {
    let r = xs.len();
    let rho = autocorrelation(xs, planner);
    if rho.is_empty() {
        return r as f64;
    }
    let mut sum_pairs = 0.0;
    let mut t = 0;
    while t + 1 < r {
        let pair = rho[t] + rho[t + 1];
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        t += 2;
    }
    let tau = (2.0 * sum_pairs - 1.0).max(1e-12);
    (r as f64 / tau).min(r as f64)
}

/// Normalized autocorrelation at every lag; empty for a constant series.
fn autocorrelation(xs: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let r = xs.len();
    let mu = xs.iter().sum::<f64>() / r as f64;
    let len = (2 * r).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = xs
        .iter()
        .map(|&x| Complex::new(x - mu, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    planner.plan_fft_forward(len).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let c0 = buf[0].re;
    if c0 <= 1e-300 * len as f64 {
        return Vec::new();
    }
    buf[..r].iter().map(|c| c.re / c0).collect()
}

// --- serialization -------------------------------------------------------

const CHAIN_MAGIC: &[u8; 8] = b"MTBKDCH1";

pub fn spec_hash(spec: &NetworkSpec) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("serializable"));
    h.finalize().into()
}

#[derive(Serialize, Deserialize)]
struct ChainHeader {
    config: SgldConfig,
    iterations: usize,
    final_step_size: f64,
    divergence: Option<Divergence>,
}

impl PosteriorChain {
    /// Header (magic, spec hash, JSON metadata, `r`, parameter count) followed
    /// by `r × p` little-endian `f64`s.
    pub fn to_bytes(&self, spec: &NetworkSpec) -> Vec<u8> {
        let p = spec.param_count();
        let header = serde_json::to_vec(&ChainHeader {
            config: self.config,
            iterations: self.iterations,
            final_step_size: self.final_step_size,
            divergence: self.divergence.clone(),
        })
        .expect("serializable");
        let mut b = Vec::with_capacity(64 + header.len() + self.len() * p * 8);
        b.extend_from_slice(CHAIN_MAGIC);
        b.extend_from_slice(&spec_hash(spec));
        b.extend_from_slice(&(header.len() as u64).to_le_bytes());
        b.extend_from_slice(&header);
        b.extend_from_slice(&(self.len() as u64).to_le_bytes());
        b.extend_from_slice(&(p as u64).to_le_bytes());
        for s in &self.samples {
            for v in s.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], spec: &NetworkSpec) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != CHAIN_MAGIC {
            return Err("bad magic".into());
        }
        if r.take(32)? != spec_hash(spec) {
            return Err("chain was written for a different network".into());
        }
        let hlen = r.u64()? as usize;
        let header: ChainHeader = serde_json::from_slice(r.take(hlen)?).map_err(|e| e.to_string())?;
        let count = r.u64()? as usize;
        let p = r.u64()? as usize;
        if p != spec.param_count() {
            return Err("parameter count mismatch".into());
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let v = (0..p).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            samples.push(ParamVector::new(v));
        }
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(Self {
            samples,
            config: header.config,
            iterations: header.iterations,
            final_step_size: header.final_step_size,
            divergence: header.divergence,
        })
    }

    pub fn write(&self, spec: &NetworkSpec, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes(spec)).map_err(|e| Error::io(path, e))
    }

    pub fn read(spec: &NetworkSpec, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, spec).map_err(|r| Error::format(path, r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) struct Flat {
        pub dim: usize,
    }

    impl GradientTarget for Flat {
        type Scratch = ();
        fn dim(&self) -> usize {
            self.dim
        }
        fn n_data(&self) -> usize {
            10
        }
        fn scratch(&self) {}
        fn grad_log_density(&self, _: &[f64], _: &[usize], _: &mut (), out: &mut [f64]) -> Result<()> {
            out.iter_mut().for_each(|v| *v = 0.0);
            Ok(())
        }
    }

    fn cfg(total: usize, burn: usize, thin: usize) -> SgldConfig {
        SgldConfig {
            schedule: StepSchedule::Constant { tau: 0.01 },
            total_iters: total,
            batch_size: 4,
            burn_in: burn,
            thinning: thin,
            seed: 3,
            param_clip: None,
        }
    }

    #[test]
    fn retained_count_arithmetic() {
        for (t, b, k) in [(100, 50, 10), (101, 50, 10), (7, 0, 3), (10, 9, 1), (1000, 1, 7)] {
            let c = cfg(t, b, k);
            let chain = sgld_run(&Flat { dim: 2 }, &c, &ParamVector::new(vec![0.0; 2])).unwrap();
            assert_eq!(chain.len(), (t - b) / k);
            assert_eq!(chain.len(), c.retained());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let init = ParamVector::new(vec![0.0]);
        assert!(sgld_run(&Flat { dim: 1 }, &cfg(10, 10, 1), &init).is_err());
        assert!(sgld_run(&Flat { dim: 1 }, &cfg(10, 0, 0), &init).is_err());
        let mut c = cfg(10, 0, 1);
        c.schedule = StepSchedule::Constant { tau: 0.0 };
        assert!(sgld_run(&Flat { dim: 1 }, &c, &init).is_err());
        assert!(sgld_run(&Flat { dim: 2 }, &cfg(10, 0, 1), &init).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let init = ParamVector::new(vec![0.5; 3]);
        let a = sgld_run(&Flat { dim: 3 }, &cfg(200, 10, 2), &init).unwrap();
        let b = sgld_run(&Flat { dim: 3 }, &cfg(200, 10, 2), &init).unwrap();
        assert_eq!(a, b);
        let mut c = cfg(200, 10, 2);
        c.seed = 4;
        assert_ne!(a, sgld_run(&Flat { dim: 3 }, &c, &init).unwrap());
    }

    #[test]
    fn clip_keeps_box() {
        let mut c = cfg(500, 0, 1);
        c.schedule = StepSchedule::Constant { tau: 1.0 };
        c.param_clip = Some(0.5);
        let chain = sgld_run(&Flat { dim: 2 }, &c, &ParamVector::new(vec![0.0; 2])).unwrap();
        assert!(chain.samples.iter().flat_map(|s| s.iter()).all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn polynomial_schedule_decays() {
        let s = StepSchedule::Polynomial {
            a: 1.0,
            b: 100.0,
            gamma: 0.55,
        };
        assert!((s.step(0) - 100f64.powf(-0.55)).abs() < 1e-15);
        assert!(s.step(10) < s.step(0));
    }

    struct Explodes;
    impl GradientTarget for Explodes {
        type Scratch = ();
        fn dim(&self) -> usize {
            1
        }
        fn n_data(&self) -> usize {
            1
        }
        fn scratch(&self) {}
        fn grad_log_density(&self, th: &[f64], _: &[usize], _: &mut (), out: &mut [f64]) -> Result<()> {
            out[0] = th[0] * 1e200;
            Ok(())
        }
    }

    #[test]
    fn divergence_keeps_partial_chain() {
        let mut c = cfg(100, 0, 1);
        c.schedule = StepSchedule::Constant { tau: 1.0 };
        let chain = sgld_run(&Explodes, &c, &ParamVector::new(vec![1.0])).unwrap();
        let d = chain.divergence.clone().unwrap();
        assert_eq!(chain.len(), d.iteration - 1);
        assert!(matches!(chain.into_result(), Err(Error::SamplerDiverged { .. })));
    }

    #[test]
    fn summary_of_constant_chain() {
        let chain = PosteriorChain::from_samples(vec![ParamVector::new(vec![1.5, -2.0]); 50]);
        let s = chain_summary(&chain).unwrap();
        assert_eq!(s.mean, vec![1.5, -2.0]);
        assert_eq!(s.variance, vec![0.0, 0.0]);
        assert_eq!(s.ess, vec![50.0, 50.0]);
        assert!(chain_summary(&PosteriorChain::from_samples(vec![ParamVector::new(vec![1.0])])).is_err());
    }

    #[test]
    fn ess_for_iid_and_ar1() {
        let mut rng = seeded(11, 0);
        let r = 10_000;
        let iid: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = effective_sample_size(&iid);
        assert!((e / r as f64 - 1.0).abs() < 0.2, "iid ess {e}");
        let rho = 0.5;
        let mut x = 0.0;
        let ar: Vec<f64> = (0..r)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = rho * x + (1.0f64 - rho * rho).sqrt() * z;
                x
            })
            .collect();
        let ratio = effective_sample_size(&ar) / r as f64;
        let expect = (1.0 - rho) / (1.0 + rho);
        assert!((ratio / expect - 1.0).abs() < 0.2, "ar1 ess ratio {ratio}");
        let _ = rng.random::<u8>();
    }

    #[test]
    fn chain_bytes_round_trip() {
        let spec = NetworkSpec::new(vec![2, 3, 2]).unwrap();
        let init = spec.init_params(&mut seeded(1, 1));
        let chain = sgld_run(&Flat { dim: spec.param_count() }, &cfg(60, 20, 4), &init).unwrap();
        let back = PosteriorChain::from_bytes(&chain.to_bytes(&spec), &spec).unwrap();
        assert_eq!(back, chain);
        let other = NetworkSpec::new(vec![2, 4, 2]).unwrap();
        assert!(PosteriorChain::from_bytes(&chain.to_bytes(&spec), &other).is_err());
    }
}
