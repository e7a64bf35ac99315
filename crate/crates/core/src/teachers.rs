//! Teacher networks, their class-probability outputs and per-sample
//! entropy weights.
//!
//! Downstream code never touches teacher parameters; it consumes a
//! [`TeacherPredictionSet`], which can also be loaded from disk.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{CrossEntropy, NetworkSpec, ParamVector, Workspace, SIMPLEX_TOL};
use crate::rng::{seeded, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub specialty_domain: Option<u32>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherModel {
    pub spec: NetworkSpec,
    pub theta: ParamVector,
    pub meta: TrainingMeta,
}

/// Mean cross-entropy of `theta` on the whole dataset.
pub fn mean_ce(spec: &NetworkSpec, theta: &[f64], data: &LabeledDataset) -> Result<f64> {
    let mut ws = Workspace::new(spec);
    let mut total = 0.0;
    for i in 0..data.len() {
        let q = ws.forward(spec, theta, data.row(i))?;
        total += crate::nn::ce_loss(data.labels()[i], q);
    }
    Ok(total / data.len() as f64)
}

/// Mini-batch gradient descent with a fixed step on the mean cross-entropy.
pub fn train_teacher(
    spec: &NetworkSpec,
    corpus: &LabeledDataset,
    hyper: TrainHyper,
    specialty_domain: Option<u32>,
) -> Result<TeacherModel> {
    if corpus.is_empty() {
        return Err(Error::config("teacher corpus is empty"));
    }
    if corpus.n_classes() != spec.output_dim() || corpus.n_features() != spec.input_dim() {
        return Err(Error::contract(format!(
            "corpus shape ({} features, {} classes) does not fit network {:?}",
            corpus.n_features(),
            corpus.n_classes(),
            spec.layer_sizes()
        )));
    }
    if hyper.batch_size == 0 || !(hyper.learning_rate > 0.0) {
        return Err(Error::config("teacher batch size and learning rate must be positive"));
    }
    let mut rng = seeded(hyper.seed, streams::TEACHER_TRAIN);
    let mut theta = spec.init_params(&mut rng);
    let initial_loss = mean_ce(spec, &theta, corpus)?;
    let loss = CrossEntropy {
        labels: corpus.labels(),
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut ws = Workspace::new(spec);
    let mut grad = vec![0.0; spec.param_count()];
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            spec.accumulate_grad(&theta, corpus.features().view(), batch, &loss, &mut ws, &mut grad)
                .map_err(|_| Error::TrainingDiverged { epoch })?;
            let step = hyper.learning_rate / batch.len() as f64;
            for (t, g) in theta.as_mut_slice().iter_mut().zip(&grad) {
                *t -= step * g;
            }
        }
        if !theta.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    let final_loss = mean_ce(spec, &theta, corpus)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: hyper.epochs,
        });
    }
    Ok(TeacherModel {
        spec: spec.clone(),
        theta,
        meta: TrainingMeta {
            seed: hyper.seed,
            epochs: hyper.epochs,
            specialty_domain,
            initial_loss,
            final_loss,
        },
    })
}

/// Row `i` is the network output at feature row `i`.
pub fn predict_probs(
    spec: &NetworkSpec,
    theta: &[f64],
    features: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    spec.check_params(theta)?;
    if features.ncols() != spec.input_dim() {
        return Err(Error::contract(format!(
            "features have {} columns, network expects {}",
            features.ncols(),
            spec.input_dim()
        )));
    }
    let k = spec.output_dim();
    let mut out = Array2::zeros((features.nrows(), k));
    let mut ws = Workspace::new(spec);
    let mut x = vec![0.0; features.ncols()];
    for (i, row) in features.rows().into_iter().enumerate() {
        x.iter_mut().zip(row.iter()).for_each(|(d, s)| *d = *s);
        let q = ws.forward(spec, theta, &x)?;
        out.row_mut(i).iter_mut().zip(q).for_each(|(d, s)| *d = *s);
    }
    Ok(out)
}

impl TeacherModel {
    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        predict_probs(&self.spec, &self.theta, features)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: TeacherModel =
            serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))?;
        t.spec
            .check_params(&t.theta)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(t)
    }
}

/// Shannon entropy in nats, `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingMode {
    Equal,
    Entropy,
}

/// Monotonically decreasing map from entropy to an unnormalized weight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntropyTransform {
    /// `exp(-h)`
    #[default]
    ExpNeg,
    /// `1 / (h + eps)`
    Inverse { eps: f64 },
}

impl EntropyTransform {
    pub fn apply(&self, h: f64) -> f64 {
        match *self {
            EntropyTransform::ExpNeg => (-h).exp(),
            EntropyTransform::Inverse { eps } => 1.0 / (h + eps),
        }
    }
}

/// Teacher weights for one sample from its `G` teacher predictions.
pub fn compute_weights(
    rows: &[&[f64]],
    mode: WeightingMode,
    transform: EntropyTransform,
) -> Vec<f64> {
    let g = rows.len();
    match mode {
        WeightingMode::Equal => vec![1.0 / g as f64; g],
        WeightingMode::Entropy => {
            let raw: Vec<f64> = rows.iter().map(|p| transform.apply(entropy(p))).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        }
    }
}

/// Teacher outputs on the student's training rows plus frozen weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPredictionSet {
    probs: Vec<Array2<f64>>,
    weights: Array2<f64>,
    mode: WeightingMode,
}

impl TeacherPredictionSet {
    pub fn from_probs(
        probs: Vec<Array2<f64>>,
        mode: WeightingMode,
        transform: EntropyTransform,
    ) -> Result<Self> {
        let (n, k) = check_prob_matrices(&probs)?;
        let g = probs.len();
        let mut weights = Array2::zeros((n, g));
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0; k]; g];
        for i in 0..n {
            for (t, p) in probs.iter().enumerate() {
                rows[t].iter_mut().zip(p.row(i)).for_each(|(d, s)| *d = *s);
            }
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let w = compute_weights(&refs, mode, transform);
            weights.row_mut(i).iter_mut().zip(w).for_each(|(d, s)| *d = s);
        }
        Self::with_weights(probs, weights, mode)
    }

    pub fn with_weights(
        probs: Vec<Array2<f64>>,
        weights: Array2<f64>,
        mode: WeightingMode,
    ) -> Result<Self> {
        let (n, _) = check_prob_matrices(&probs)?;
        if weights.nrows() != n || weights.ncols() != probs.len() {
            return Err(Error::contract("weight matrix shape mismatch"));
        }
        for row in weights.rows() {
            if (row.sum() - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&w| !(w > 0.0 && w <= 1.0))
            {
                return Err(Error::contract("teacher weights must be in (0, 1] and sum to 1"));
            }
        }
        Ok(Self {
            probs,
            weights,
            mode,
        })
    }

    /// Keeps only teacher `g`; its weights become 1.
    pub fn single(&self, g: usize) -> Result<Self> {
        let p = self
            .probs
            .get(g)
            .ok_or_else(|| Error::config(format!("teacher index {g} out of range")))?
            .clone();
        let n = p.nrows();
        Self::with_weights(vec![p], Array2::ones((n, 1)), self.mode)
    }

    pub fn n_teachers(&self) -> usize {
        self.probs.len()
    }

    pub fn n_samples(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.probs[0].ncols()
    }

    pub fn mode(&self) -> WeightingMode {
        self.mode
    }

    pub fn probs(&self, g: usize) -> &Array2<f64> {
        &self.probs[g]
    }

    pub fn all_probs(&self) -> &[Array2<f64>] {
        &self.probs
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Weight averaged over samples, per teacher.
    pub fn global_weights(&self) -> Vec<f64> {
        let n = self.n_samples() as f64;
        self.weights.columns().into_iter().map(|c| c.sum() / n).collect()
    }

    /// Columns `sample_index, teacher_index, p_1..p_K, weight`, both indices 0-based.
    pub fn to_csv_string(&self) -> String {
        let k = self.n_classes();
        let mut out = String::from("sample_index,teacher_index");
        for j in 1..=k {
            out.push_str(&format!(",p_{j}"));
        }
        out.push_str(",weight\n");
        for i in 0..self.n_samples() {
            for g in 0..self.n_teachers() {
                out.push_str(&format!("{i},{g}"));
                for v in self.probs[g].row(i) {
                    out.push(',');
                    out.push_str(&fmt_f64(*v));
                }
                out.push(',');
                out.push_str(&fmt_f64(self.weights[[i, g]]));
                out.push('\n');
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, mode: WeightingMode) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, mode).map_err(|r| Error::format(path, r))
    }

    pub fn parse_csv(text: &str, mode: WeightingMode) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or("empty file")?.split(',').collect();
        if header.len() < 4 || header[0] != "sample_index" || header[1] != "teacher_index" {
            return Err("unexpected header".into());
        }
        let k = header.len() - 3;
        let mut recs: Vec<(usize, usize, Vec<f64>, f64)> = Vec::new();
        for line in lines {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != header.len() {
                return Err("ragged row".into());
            }
            let i = c[0].parse().map_err(|_| "bad sample index")?;
            let g = c[1].parse().map_err(|_| "bad teacher index")?;
            let p = c[2..2 + k]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| e.to_string()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let w = c[2 + k].parse::<f64>().map_err(|e| e.to_string())?;
            recs.push((i, g, p, w));
        }
        let n = recs.iter().map(|r| r.0 + 1).max().ok_or("no rows")?;
        let g = recs.iter().map(|r| r.1 + 1).max().unwrap();
        if recs.len() != n * g {
            return Err(format!("expected {} rows, found {}", n * g, recs.len()));
        }
        let mut probs = vec![Array2::zeros((n, k)); g];
        let mut weights = Array2::zeros((n, g));
        let mut seen = vec![false; n * g];
        for (i, t, p, w) in recs {
            if std::mem::replace(&mut seen[i * g + t], true) {
                return Err(format!("duplicate row for sample {i}, teacher {t}"));
            }
            probs[t].row_mut(i).iter_mut().zip(p).for_each(|(d, s)| *d = s);
            weights[[i, t]] = w;
        }
        Self::with_weights(probs, weights, mode).map_err(|e| e.to_string())
    }
}

fn check_prob_matrices(probs: &[Array2<f64>]) -> Result<(usize, usize)> {
    let first = probs
        .first()
        .ok_or_else(|| Error::contract("at least one teacher is required"))?;
    let (n, k) = first.dim();
    for p in probs {
        if p.dim() != (n, k) {
            return Err(Error::contract("teacher prediction matrices differ in shape"));
        }
        for row in p.rows() {
            if (row.sum() - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&v| !(0.0..=1.0).contains(&v))
            {
                return Err(Error::contract("teacher prediction row is not a probability vector"));
            }
        }
    }
    Ok((n, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((entropy(&[0.9, 0.1]) - 0.325_082_973_391_448_2).abs() < 1e-12);
    }

    #[test]
    fn weight_examples() {
        let t = EntropyTransform::ExpNeg;
        assert_eq!(compute_weights(&[&[0.3, 0.7]], WeightingMode::Entropy, t), vec![1.0]);
        let w = compute_weights(&[&[0.5, 0.5], &[0.9, 0.1]], WeightingMode::Entropy, t);
        assert!((w[0] - 0.4090).abs() < 5e-5 && (w[1] - 0.5910).abs() < 5e-5, "{w:?}");
        let p: &[f64] = &[0.2, 0.8];
        for mode in [WeightingMode::Equal, WeightingMode::Entropy] {
            assert_eq!(compute_weights(&[p, p, p], mode, t), vec![1.0 / 3.0; 3]);
        }
        let w = compute_weights(
            &[&[0.5, 0.5], &[0.9, 0.1]],
            WeightingMode::Entropy,
            EntropyTransform::Inverse { eps: 1e-3 },
        );
        assert!(w[1] > w[0]);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn weights_are_a_monotone_partition(rows in prop::collection::vec(simplex(3), 1..5)) {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let w = compute_weights(&refs, WeightingMode::Entropy, EntropyTransform::ExpNeg);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
            for a in 0..rows.len() {
                for b in 0..rows.len() {
                    if entropy(&rows[a]) < entropy(&rows[b]) - 1e-12 {
                        prop_assert!(w[a] > w[b]);
                    }
                }
                prop_assert!(entropy(&rows[a]) <= 3f64.ln() + 1e-12);
            }
            // permutation equivariance
            let mut rev = refs.clone();
            rev.reverse();
            let wr = compute_weights(&rev, WeightingMode::Entropy, EntropyTransform::ExpNeg);
            for (i, v) in wr.iter().enumerate() {
                prop_assert!((v - w[rows.len() - 1 - i]).abs() < 1e-15);
            }
            // duplicating every teacher halves each weight pattern-wise
            let dup: Vec<&[f64]> = refs.iter().chain(refs.iter()).copied().collect();
            let wd = compute_weights(&dup, WeightingMode::Entropy, EntropyTransform::ExpNeg);
            for i in 0..rows.len() {
                prop_assert!((wd[i] + wd[i + rows.len()] - w[i]).abs() < 1e-12);
            }
        }
    }

    fn separable_corpus() -> LabeledDataset {
        let mut rng = seeded(5, 0);
        let mut x = Array2::zeros((50, 2));
        let mut y = Vec::new();
        for i in 0..50 {
            let c = i % 2;
            let sign = if c == 0 { 1.0 } else { -1.0 };
            x[[i, 0]] = sign * (1.0 + rng.random::<f64>());
            x[[i, 1]] = rng.random::<f64>() * 2.0 - 1.0;
            y.push(c);
        }
        LabeledDataset::new(x, y, 2, None, None).unwrap()
    }

    #[test]
    fn separable_corpus_is_fit_exactly() {
        let corpus = separable_corpus();
        let spec = NetworkSpec::mlp(2, &[4], 2).unwrap();
        let hyper = TrainHyper {
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 10,
            seed: 1,
        };
        let t = train_teacher(&spec, &corpus, hyper, None).unwrap();
        assert!(t.meta.final_loss <= t.meta.initial_loss);
        let p = t.predict(corpus.features().view()).unwrap();
        let acc = (0..corpus.len())
            .filter(|&i| crate::nn::argmax(p.row(i).as_slice().unwrap()) == corpus.labels()[i])
            .count() as f64
            / corpus.len() as f64;
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let corpus = separable_corpus();
        let spec = NetworkSpec::mlp(2, &[3], 2).unwrap();
        let hyper = TrainHyper {
            learning_rate: 0.1,
            epochs: 0,
            batch_size: 10,
            seed: 42,
        };
        let t = train_teacher(&spec, &corpus, hyper, Some(1)).unwrap();
        let init = spec.init_params(&mut seeded(42, streams::TEACHER_TRAIN));
        assert_eq!(t.theta, init);
    }

    #[test]
    fn predictions_match_forward_and_permute() {
        let spec = NetworkSpec::mlp(2, &[3], 3).unwrap();
        let theta = spec.init_params(&mut seeded(3, 0));
        let x = array![[0.1, 0.2], [1.0, -1.0], [-0.3, 2.0]];
        let p = predict_probs(&spec, &theta, x.view()).unwrap();
        for i in 0..3 {
            let f = spec.forward(&theta, x.row(i).as_slice().unwrap()).unwrap();
            assert_eq!(p.row(i).as_slice().unwrap(), f.as_slice());
            assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
        }
        let xr = array![[-0.3, 2.0], [0.1, 0.2], [1.0, -1.0]];
        let pr = predict_probs(&spec, &theta, xr.view()).unwrap();
        assert_eq!(pr.row(0), p.row(2));
        assert_eq!(pr.row(1), p.row(0));
        assert!(predict_probs(&spec, &theta, array![[1.0]].view()).is_err());
    }

    #[test]
    fn prediction_set_csv_round_trip() {
        let p1 = array![[0.5, 0.5], [0.9, 0.1]];
        let p2 = array![[0.2, 0.8], [0.6, 0.4]];
        let set = TeacherPredictionSet::from_probs(
            vec![p1, p2],
            WeightingMode::Entropy,
            EntropyTransform::ExpNeg,
        )
        .unwrap();
        let back = TeacherPredictionSet::parse_csv(&set.to_csv_string(), WeightingMode::Entropy).unwrap();
        assert_eq!(back, set);
        assert!((set.weights()[[0, 0]] + set.weights()[[0, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(set.single(1).unwrap().n_teachers(), 1);
    }
}
