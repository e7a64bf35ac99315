//! Dense feed-forward classifier with a soft-max head.
//!
//! Parameters live in one flat [`ParamVector`]. For every layer the weight
//! matrix comes first (row-major, shape `(out, in)`), followed by the bias
//! vector. Gradients are produced by hand-written back-propagation and
//! returned in the same layout.

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// `log(max(q, PROB_FLOOR))`.
#[inline]
pub fn floored_ln(q: f64) -> f64 {
    q.max(PROB_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
    hidden_activation: Activation,
}

impl NetworkSpec {
    /// `layer_sizes` is `[input, hidden.., classes]`.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::contract(
                "network needs at least an input and an output layer",
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::contract("layer sizes must be positive"));
        }
        Ok(Self {
            layer_sizes,
            hidden_activation: Activation::Relu,
        })
    }

    /// Convenience constructor from input width, hidden widths and classes.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self::new(sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offset of layer `l`'s weight block; its biases follow at `+ out * in`.
    fn layer_offset(&self, l: usize) -> usize {
        self.layer_sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
            values.extend((0..fan_in * fan_out).map(|_| dist.sample(rng)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector(values)
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector(vec![0.0; self.param_count()])
    }

    /// Checks that `theta` belongs to this architecture.
    pub fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, architecture {:?} needs {}",
                theta.len(),
                self.layer_sizes,
                self.param_count()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, theta: &ParamVector, x: &[f64]) -> Result<ProbVector> {
        self.check_params(theta.as_slice())?;
        if x.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "feature vector has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut ws = Workspace::new(self);
        let q = ws.forward(self, theta.as_slice(), x)?;
        Ok(ProbVector(q.to_vec()))
    }

    /// Mean loss over `batch` and its exact gradient with respect to `theta`.
    ///
    /// `batch` holds row indices into `features`; the same index is passed to
    /// the loss so it can look up labels or teacher outputs.
    pub fn grad_scalar_loss<L: OutputLoss + ?Sized>(
        &self,
        theta: &[f64],
        features: ArrayView2<'_, f64>,
        batch: &[usize],
        loss: &L,
    ) -> Result<(f64, ParamVector)> {
        let mut grad = vec![0.0; self.param_count()];
        let mut ws = Workspace::new(self);
        let total = self.accumulate_grad(theta, features, batch, loss, &mut ws, &mut grad)?;
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((total * scale, ParamVector(grad)))
    }

    /// Adds the summed per-sample gradient over `batch` into `grad` and returns
    /// the summed loss. No allocation beyond what `ws` already holds.
    pub fn accumulate_grad<L: OutputLoss + ?Sized>(
        &self,
        theta: &[f64],
        features: ArrayView2<'_, f64>,
        batch: &[usize],
        loss: &L,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_params(theta)?;
        if batch.is_empty() {
            return Err(Error::contract("gradient batch is empty"));
        }
        if features.ncols() != self.input_dim() {
            return Err(Error::contract(format!(
                "feature matrix has {} columns, network expects {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        let k = self.output_dim();
        let mut total = 0.0;
        for &i in batch {
            let row = features.row(i);
            let x = row
                .as_slice()
                .ok_or_else(|| Error::contract("feature rows must be contiguous"))?;
            ws.forward(self, theta, x)?;
            let q = &ws.acts[self.num_layers()];
            total += loss.value(i, q);
            let mut dq = std::mem::take(&mut ws.dq);
            dq.resize(k, 0.0);
            loss.grad_output(i, q, &mut dq);
            ws.backward(self, theta, &dq, grad);
            ws.dq = dq;
        }
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLayer {
                layer: self.num_layers() - 1,
            });
        }
        Ok(total)
    }
}

pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.param_count()
}

/// Flat parameter vector for a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn for_spec(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        spec.check_params(&values)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("parameter vector contains non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::contract("empty probability vector"));
        }
        if entries.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::contract("probability outside [0, 1]"));
        }
        let s: f64 = entries.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::contract(format!("probabilities sum to {s}")));
        }
        Ok(Self(entries))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `CE(y, q) = -log q_y` with the probability floor.
pub fn ce_loss(label: usize, q: &[f64]) -> f64 {
    -floored_ln(q[label])
}

/// Per-sample scalar loss of the network output `q`.
pub trait OutputLoss {
    fn value(&self, index: usize, q: &[f64]) -> f64;
    /// Writes `d value / d q` into `grad` (length K).
    fn grad_output(&self, index: usize, q: &[f64], grad: &mut [f64]);
}

/// Loss of the form `-Σ_k c_k log max(q_k, ε)` with sample-dependent
/// non-negative coefficients. Coordinates below the floor get zero gradient.
pub trait LogLinearLoss {
    fn coefficients(&self, index: usize, q: &[f64], out: &mut [f64]);
}

impl<T: LogLinearLoss> OutputLoss for T {
    fn value(&self, index: usize, q: &[f64]) -> f64 {
        let mut c = vec![0.0; q.len()];
        self.coefficients(index, q, &mut c);
        -c.iter().zip(q).map(|(c, &q)| c * floored_ln(q)).sum::<f64>()
    }

    fn grad_output(&self, index: usize, q: &[f64], grad: &mut [f64]) {
        self.coefficients(index, q, grad);
        for (g, &qk) in grad.iter_mut().zip(q) {
            *g = if qk > PROB_FLOOR { -*g / qk } else { 0.0 };
        }
    }
}

/// Plain cross-entropy against integer labels.
pub struct CrossEntropy<'a> {
    pub labels: &'a [usize],
}

impl LogLinearLoss for CrossEntropy<'_> {
    fn coefficients(&self, index: usize, _q: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|c| *c = 0.0);
        out[self.labels[index]] = 1.0;
    }
}

/// Scratch buffers for forward and backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    dq: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &NetworkSpec) -> Self {
        let acts = spec.layer_sizes.iter().map(|&n| vec![0.0; n]).collect();
        let delta = spec.layer_sizes.iter().map(|&n| vec![0.0; n]).collect();
        Self {
            acts,
            delta,
            dq: Vec::new(),
        }
    }

    /// Runs the network and returns the soft-max output held in the workspace.
    pub fn forward(&mut self, spec: &NetworkSpec, theta: &[f64], x: &[f64]) -> Result<&[f64]> {
        let sizes = &spec.layer_sizes;
        let last = spec.num_layers() - 1;
        self.acts[0].copy_from_slice(x);
        let mut off = 0;
        for l in 0..=last {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let (w, rest) = theta[off..].split_at(n_in * n_out);
            let b = &rest[..n_out];
            off += n_in * n_out + n_out;
            let (lo, hi) = self.acts.split_at_mut(l + 1);
            let input = &lo[l];
            let out = &mut hi[0];
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let mut z = b[j];
                for (wj, xj) in row.iter().zip(input) {
                    z += wj * xj;
                }
                out[j] = if l < last { z.max(0.0) } else { z };
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: l });
            }
        }
        softmax_in_place(&mut self.acts[last + 1]);
        Ok(&self.acts[last + 1])
    }

    /// Back-propagates `dq = dL/dq` through the last forward pass and adds
    /// the parameter gradient into `grad`.
    fn backward(&mut self, spec: &NetworkSpec, theta: &[f64], dq: &[f64], grad: &mut [f64]) {
        let sizes = &spec.layer_sizes;
        let nl = spec.num_layers();
        {
            let q = &self.acts[nl];
            let dot: f64 = q.iter().zip(dq).map(|(a, b)| a * b).sum();
            let dz = &mut self.delta[nl];
            for k in 0..q.len() {
                dz[k] = q[k] * (dq[k] - dot);
            }
        }
        for l in (0..nl).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let off = spec.layer_offset(l);
            let w = &theta[off..off + n_in * n_out];
            let (dlo, dhi) = self.delta.split_at_mut(l + 1);
            let dz = &dhi[0];
            let input = &self.acts[l];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for j in 0..n_out {
                let d = dz[j];
                if d == 0.0 {
                    continue;
                }
                gb[j] += d;
                let grow = &mut gw[j * n_in..(j + 1) * n_in];
                for (g, x) in grow.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if l > 0 {
                let dprev = &mut dlo[l];
                dprev.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..n_out {
                    let d = dz[j];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[j * n_in..(j + 1) * n_in];
                    for (dp, wj) in dprev.iter_mut().zip(row) {
                        *dp += d * wj;
                    }
                }
                // ReLU derivative, taken as 0 at the kink.
                for (dp, &a) in dprev.iter_mut().zip(&self.acts[l]) {
                    if a <= 0.0 {
                        *dp = 0.0;
                    }
                }
            }
        }
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_counts() {
        assert_eq!(NetworkSpec::new(vec![2, 5, 2]).unwrap().param_count(), 27);
        assert_eq!(NetworkSpec::new(vec![1, 1]).unwrap().param_count(), 2);
        assert_eq!(NetworkSpec::new(vec![5, 10, 5]).unwrap().param_count(), 115);
        assert_eq!(
            NetworkSpec::mlp(2, &[7, 10, 12, 10, 5], 2).unwrap().param_count(),
            430
        );
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(NetworkSpec::new(vec![3]).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 2]).is_err());
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let spec = NetworkSpec::new(vec![3, 4, 5]).unwrap();
        let q = spec.forward(&spec.zeros(), &[0.3, -1.0, 2.0]).unwrap();
        for &v in q.iter() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn saturating_softmax() {
        let spec = NetworkSpec::new(vec![1, 2]).unwrap();
        let theta = ParamVector::new(vec![50.0, -50.0, 0.0, 0.0]);
        let q = spec.forward(&theta, &[1.0]).unwrap();
        assert_eq!(q[0], 1.0);
        assert!(q[1] > 0.0 && q[1] < 1e-40);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let spec = NetworkSpec::new(vec![2, 2]).unwrap();
        assert!(matches!(
            spec.forward(&spec.zeros(), &[1.0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            spec.forward(&ParamVector::new(vec![0.0; 3]), &[1.0, 2.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_finite_reports_layer() {
        let spec = NetworkSpec::new(vec![1, 1, 2]).unwrap();
        let theta = ParamVector::new(vec![f64::INFINITY, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            spec.forward(&theta, &[1.0]),
            Err(Error::NonFiniteLayer { layer: 0 })
        ));
    }

    #[test]
    fn ce_values() {
        assert_eq!(ce_loss(0, &[1.0, 0.0]), 0.0);
        assert!((ce_loss(0, &[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce_loss(1, &[0.9, 0.1]) - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((ce_loss(1, &[1.0, 0.0]) - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    struct ConstantLoss;
    impl OutputLoss for ConstantLoss {
        fn value(&self, _: usize, _: &[f64]) -> f64 {
            3.0
        }
        fn grad_output(&self, _: usize, _: &[f64], g: &mut [f64]) {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let spec = NetworkSpec::new(vec![2, 3, 2]).unwrap();
        let theta = spec.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let x = Array2::from_shape_vec((2, 2), vec![0.1, 0.2, -1.0, 0.5]).unwrap();
        let (v, g) = spec
            .grad_scalar_loss(&theta, x.view(), &[0, 1], &ConstantLoss)
            .unwrap();
        assert_eq!(v, 3.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stationary_at_separable_optimum() {
        // One sample, logistic head: a large margin drives the CE gradient to ~0.
        let spec = NetworkSpec::new(vec![1, 2]).unwrap();
        let theta = ParamVector::new(vec![20.0, -20.0, 0.0, 0.0]);
        let x = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let labels = [0usize];
        let (_, g) = spec
            .grad_scalar_loss(&theta, x.view(), &[0], &CrossEntropy { labels: &labels })
            .unwrap();
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let spec = NetworkSpec::new(vec![1, 2]).unwrap();
        let x = Array2::<f64>::zeros((1, 1));
        let labels = [0usize];
        assert!(spec
            .grad_scalar_loss(&spec.zeros(), x.view(), &[], &CrossEntropy { labels: &labels })
            .is_err());
    }
}
