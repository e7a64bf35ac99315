//! Deviance-based uncertainty quantification and point metrics.
//!
//! For a test input the chain gives `r` predicted distributions `q^(j)`.
//! Outcomes `(j, k)` carry mass `q_k^(j) / r` and deviance `-2 log q_k^(j)`;
//! the posterior mean deviance, the credible upper bound and the coverage
//! mass are all functionals of this discrete law.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{argmax, floored_ln, NetworkSpec, Workspace};
use crate::posterior::PosteriorProblem;
use crate::sgld::PosteriorChain;

/// Tolerance on cumulative mass when comparing against `1 - α`.
const MASS_TOL: f64 = 1e-12;

pub const DEFAULT_LEVELS: [f64; 3] = [0.85, 0.90, 0.95];

pub fn deviance(label: usize, q: &[f64]) -> f64 {
    -2.0 * floored_ln(q[label])
}

/// Row `j` is the prediction of chain sample `j` at `x`.
pub fn chain_predictions(chain: &PosteriorChain, spec: &NetworkSpec, x: &[f64]) -> Result<Array2<f64>> {
    let mut ws = Workspace::new(spec);
    predictions_into(chain, spec, x, &mut ws)
}

fn predictions_into(
    chain: &PosteriorChain,
    spec: &NetworkSpec,
    x: &[f64],
    ws: &mut Workspace,
) -> Result<Array2<f64>> {
    if chain.is_empty() {
        return Err(Error::contract("chain is empty"));
    }
    let k = spec.output_dim();
    let mut out = Array2::zeros((chain.len(), k));
    for (j, s) in chain.samples.iter().enumerate() {
        let q = ws.forward(spec, s, x)?;
        out.row_mut(j).iter_mut().zip(q).for_each(|(d, v)| *d = *v);
    }
    Ok(out)
}

/// `Δ̃ = -(2/r) Σ_j Σ_k q_k^(j) log q_k^(j)`.
pub fn mean_deviance_of(preds: ArrayView2<'_, f64>) -> f64 {
    let r = preds.nrows() as f64;
    let total: f64 = preds
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * floored_ln(q))
        .sum();
    (-2.0 * total / r).max(0.0)
}

fn outcomes(preds: ArrayView2<'_, f64>) -> Vec<(f64, f64)> {
    let r = preds.nrows() as f64;
    preds.iter().map(|&q| (deviance_of(q), q / r)).collect()
}

/// Outcomes sorted by deviance, equal deviances merged, with the cumulative
/// mass at each knot.
fn knots(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    let mut cum = 0.0;
    for (d, m) in pts {
        cum += m;
        match out.last_mut() {
            Some(last) if last.0 == d => last.1 = cum,
            _ => out.push((d, cum)),
        }
    }
    out
}

/// Smallest outcome deviance whose cumulative mass reaches `1 - α`.
/// `outcomes` holds `(deviance, mass)` pairs with masses summing to 1.
pub fn credible_upper_from_outcomes(outcomes: &[(f64, f64)], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::contract(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if outcomes.is_empty() {
        return Err(Error::contract("no outcomes"));
    }
    let ks = knots(outcomes.to_vec());
    let target = 1.0 - alpha - MASS_TOL;
    Ok(ks
        .iter()
        .find(|(_, cum)| *cum >= target)
        .unwrap_or_else(|| ks.last().expect("non-empty"))
        .0)
}

pub fn credible_upper_of(preds: ArrayView2<'_, f64>, alpha: f64) -> Result<f64> {
    if preds.nrows() == 0 {
        return Err(Error::contract("chain is empty"));
    }
    credible_upper_from_outcomes(&outcomes(preds), alpha)
}

/// `L(τ) = |(1/r) Σ_j Σ_k q_k^(j) 1{-2 log q_k^(j) ≤ τ} - (1 - α)|`.
pub fn discrepancy(preds: ArrayView2<'_, f64>, tau: f64, alpha: f64) -> f64 {
    let r = preds.nrows() as f64;
    let mass: f64 = preds
        .iter()
        .filter(|&&q| -2.0 * floored_ln(q) <= tau)
        .sum::<f64>()
        / r;
    (mass - (1.0 - alpha)).abs()
}

/// `(1/r) Σ_j 1{-2 log q_label^(j) ≤ τ}`.
pub fn coverage_mass_of(preds: ArrayView2<'_, f64>, label: usize, tau: f64) -> f64 {
    let r = preds.nrows() as f64;
    preds.column(label).iter().filter(|&&q| deviance_of(q) <= tau).count() as f64 / r
}

fn deviance_of(q: f64) -> f64 {
    -2.0 * floored_ln(q)
}

pub fn mean_deviance(chain: &PosteriorChain, spec: &NetworkSpec, x: &[f64]) -> Result<f64> {
    Ok(mean_deviance_of(chain_predictions(chain, spec, x)?.view()))
}

pub fn credible_upper(chain: &PosteriorChain, spec: &NetworkSpec, x: &[f64], alpha: f64) -> Result<f64> {
    credible_upper_of(chain_predictions(chain, spec, x)?.view(), alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointUncertainty {
    pub index: usize,
    pub true_label: usize,
    pub predicted_class: usize,
    pub mean_deviance: f64,
    /// One per nominal level.
    pub ci_upper: Vec<f64>,
    /// Deviance of the true label under the chain-mean prediction.
    pub realized_deviance: f64,
    /// `realized_deviance <= ci_upper`, per level.
    pub covered: Vec<bool>,
    /// Chain-averaged indicator mass at the true label, per level.
    pub coverage_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub levels: Vec<f64>,
    pub points: Vec<PointUncertainty>,
}

/// Chain-mean prediction per test row (`S × K`), produced alongside a report.
pub type MeanPredictions = Array2<f64>;

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() || levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::config(format!("credible levels must lie in (0, 1): {levels:?}")));
    }
    Ok(())
}

/// Per-point report for `labels` at `features`, computed in parallel over rows.
pub fn uncertainty_report(
    chain: &PosteriorChain,
    spec: &NetworkSpec,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    levels: &[f64],
) -> Result<(UncertaintyReport, MeanPredictions)> {
    check_levels(levels)?;
    if features.nrows() != labels.len() {
        return Err(Error::contract("feature and label counts differ"));
    }
    if chain.is_empty() {
        return Err(Error::contract("chain is empty"));
    }
    let k = spec.output_dim();
    let rows: Vec<(PointUncertainty, Vec<f64>)> = (0..labels.len())
        .into_par_iter()
        .map_init(
            || (Workspace::new(spec), vec![0.0; features.ncols()]),
            |(ws, x), i| {
                x.iter_mut().zip(features.row(i)).for_each(|(d, s)| *d = *s);
                let preds = predictions_into(chain, spec, x, ws)?;
                let qbar: Vec<f64> = (0..k).map(|c| preds.column(c).mean().unwrap_or(0.0)).collect();
                let label = labels[i];
                let realized = deviance(label, &qbar);
                let mut ci = Vec::with_capacity(levels.len());
                let mut covered = Vec::with_capacity(levels.len());
                let mut mass = Vec::with_capacity(levels.len());
                for &lvl in levels {
                    let tau = credible_upper_of(preds.view(), 1.0 - lvl)?;
                    ci.push(tau);
                    covered.push(realized <= tau);
                    mass.push(coverage_mass_of(preds.view(), label, tau));
                }
                Ok((
                    PointUncertainty {
                        index: i,
                        true_label: label,
                        predicted_class: argmax(&qbar),
                        mean_deviance: mean_deviance_of(preds.view()),
                        ci_upper: ci,
                        realized_deviance: realized,
                        covered,
                        coverage_mass: mass,
                    },
                    qbar,
                ))
            },
        )
        .collect::<Result<_>>()?;
    let mut mean = Array2::zeros((rows.len(), k));
    let mut points = Vec::with_capacity(rows.len());
    for (i, (p, q)) in rows.into_iter().enumerate() {
        mean.row_mut(i).iter_mut().zip(&q).for_each(|(d, s)| *d = *s);
        points.push(p);
    }
    Ok((
        UncertaintyReport {
            levels: levels.to_vec(),
            points,
        },
        mean,
    ))
}

/// Mean over points of the chain-averaged coverage mass at `level_index`.
pub fn coverage_rate(report: &UncertaintyReport, level_index: usize) -> Result<f64> {
    if report.points.is_empty() {
        return Err(Error::contract("coverage of an empty report"));
    }
    let s: f64 = report.points.iter().map(|p| p.coverage_mass[level_index]).sum();
    Ok(s / report.points.len() as f64)
}

pub fn coverage_rates(report: &UncertaintyReport) -> Result<Vec<(f64, f64)>> {
    (0..report.levels.len())
        .map(|l| Ok((report.levels[l], coverage_rate(report, l)?)))
        .collect()
}

/// Column suffix for a nominal level, e.g. `0.9 → "90"`.
pub fn level_tag(level: f64) -> String {
    let pct = (level * 100.0 * 1e6).round() / 1e6;
    format!("{pct}").replace('.', "_")
}

impl UncertaintyReport {
    /// Columns `index, x_1..x_m, true_label, predicted_class, mean_deviance,
    /// ci_upper_*, covered_*, realized_deviance, coverage_mass_*`. Labels are
    /// 1-based.
    pub fn to_csv_string(&self, features: ArrayView2<'_, f64>) -> String {
        let tags: Vec<String> = self.levels.iter().map(|l| level_tag(*l)).collect();
        let mut s = String::from("index");
        for j in 1..=features.ncols() {
            write!(s, ",x_{j}").unwrap();
        }
        s.push_str(",true_label,predicted_class,mean_deviance");
        for prefix in ["ci_upper", "covered"] {
            for t in &tags {
                write!(s, ",{prefix}_{t}").unwrap();
            }
        }
        s.push_str(",realized_deviance");
        for t in &tags {
            write!(s, ",coverage_mass_{t}").unwrap();
        }
        s.push('\n');
        for p in &self.points {
            write!(s, "{}", p.index).unwrap();
            for v in features.row(p.index) {
                write!(s, ",{}", fmt_f64(*v)).unwrap();
            }
            write!(
                s,
                ",{},{},{}",
                p.true_label + 1,
                p.predicted_class + 1,
                fmt_f64(p.mean_deviance)
            )
            .unwrap();
            for v in &p.ci_upper {
                write!(s, ",{}", fmt_f64(*v)).unwrap();
            }
            for c in &p.covered {
                write!(s, ",{}", u8::from(*c)).unwrap();
            }
            write!(s, ",{}", fmt_f64(p.realized_deviance)).unwrap();
            for v in &p.coverage_mass {
                write!(s, ",{}", fmt_f64(*v)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, features: ArrayView2<'_, f64>, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string(features)).map_err(|e| Error::io(path, e))
    }
}

// --- point metrics -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: u32,
    pub n: usize,
    pub accuracy: f64,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub n: usize,
    pub accuracy: f64,
    /// `None` when the test set carries no true probabilities.
    pub mse: Option<f64>,
    pub domains: Vec<DomainMetrics>,
    /// `(level, rate)`; empty for point estimates.
    pub coverage: Vec<(f64, f64)>,
}

/// Accuracy of `argmax(class_probs)` and MSE of `mse_probs` against the
/// true probabilities, overall and per domain tag.
pub fn point_metrics(
    class_probs: ArrayView2<'_, f64>,
    mse_probs: ArrayView2<'_, f64>,
    test: &LabeledDataset,
) -> Result<MetricsTable> {
    let n = test.len();
    if n == 0 || class_probs.nrows() != n || mse_probs.nrows() != n {
        return Err(Error::contract("predictions must cover a non-empty test set"));
    }
    let correct: Vec<bool> = (0..n)
        .map(|i| argmax(class_probs.row(i).as_slice().expect("contiguous")) == test.labels()[i])
        .collect();
    let sq: Option<Vec<f64>> = test.true_probs().map(|p| {
        (0..n)
            .map(|i| {
                p.row(i)
                    .iter()
                    .zip(mse_probs.row(i))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    / p.ncols() as f64
            })
            .collect()
    });
    let summarize = |idx: &[usize]| -> (f64, Option<f64>) {
        let m = idx.len() as f64;
        let acc = idx.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let mse = sq.as_ref().map(|s| idx.iter().map(|&i| s[i]).sum::<f64>() / m);
        (acc, mse)
    };
    let all: Vec<usize> = (0..n).collect();
    let (accuracy, mse) = summarize(&all);
    let domains = match test.domain_tags() {
        Some(tags) => test
            .domains()
            .into_iter()
            .map(|d| {
                let idx: Vec<usize> = (0..n).filter(|&i| tags[i] == d).collect();
                let (accuracy, mse) = summarize(&idx);
                DomainMetrics {
                    domain: d,
                    n: idx.len(),
                    accuracy,
                    mse,
                }
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(MetricsTable {
        n,
        accuracy,
        mse,
        domains,
        coverage: Vec::new(),
    })
}

/// Index of the chain sample with the highest full-data log posterior.
pub fn posterior_mode_index(problem: &PosteriorProblem, chain: &PosteriorChain) -> Result<usize> {
    if chain.is_empty() {
        return Err(Error::contract("chain is empty"));
    }
    let lp: Vec<f64> = chain
        .samples
        .par_iter()
        .map(|s| problem.log_posterior(s))
        .collect::<Result<_>>()?;
    Ok(lp
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
        .0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    use crate::nn::ce_loss;

    #[test]
    fn deviance_examples() {
        assert_eq!(deviance(0, &[1.0, 0.0]), 0.0);
        assert!((deviance(1, &[0.5, 0.5]) - 4f64.ln()).abs() < 1e-15);
        assert!((deviance(1, &[0.5, 0.5]) - 1.3863).abs() < 1e-4);
        assert!(deviance(1, &[1.0, 0.0]).is_finite());
    }

    #[test]
    fn mean_deviance_examples() {
        assert_eq!(mean_deviance_of(array![[1.0, 0.0], [1.0, 0.0]].view()), 0.0);
        assert!((mean_deviance_of(array![[0.5, 0.5]].view()) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((mean_deviance_of(array![[0.5, 0.5], [1.0, 0.0]].view()) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn credible_upper_examples() {
        let t = credible_upper_of(array![[0.8, 0.2]].view(), 0.1).unwrap();
        assert!((t - (-2.0 * 0.2f64.ln())).abs() < 1e-12);
        assert!((t - 3.2189).abs() < 1e-4);
        assert!((discrepancy(array![[0.8, 0.2]].view(), t, 0.1) - 0.1).abs() < 1e-12);
        let t = credible_upper_of(array![[0.95, 0.05]].view(), 0.1).unwrap();
        assert!((t - 0.1026).abs() < 1e-4);
        let p = array![[0.3, 0.7], [0.6, 0.4]];
        let smallest = -2.0 * 0.7f64.ln();
        assert_eq!(credible_upper_of(p.view(), 1.0 - 1e-9).unwrap(), smallest);
        assert!(credible_upper_of(p.view(), 0.0).is_err());
        assert!(credible_upper_of(p.view(), 1.0).is_err());
    }

    #[test]
    fn coverage_trivial_bounds() {
        let p = array![[0.3, 0.7], [0.6, 0.4]];
        assert_eq!(coverage_mass_of(p.view(), 0, f64::INFINITY), 1.0);
        assert_eq!(coverage_mass_of(p.view(), 0, 0.0), 0.0);
    }

    #[test]
    fn level_tags() {
        assert_eq!(level_tag(0.85), "85");
        assert_eq!(level_tag(0.9), "90");
        assert_eq!(level_tag(0.975), "97_5");
    }

    fn preds_strategy() -> impl Strategy<Value = Array2<f64>> {
        (1usize..6, 2usize..5).prop_flat_map(|(r, k)| {
            proptest::collection::vec(proptest::collection::vec(0.001f64..1.0, k), r).prop_map(move |rows| {
                let mut a = Array2::zeros((r, k));
                for (j, row) in rows.iter().enumerate() {
                    let s: f64 = row.iter().sum();
                    for c in 0..k {
                        a[[j, c]] = row[c] / s;
                    }
                }
                a
            })
        })
    }

    proptest! {
        #[test]
        fn deviance_is_twice_ce(q in proptest::collection::vec(0.0f64..1.0, 2..6), l in 0usize..6) {
            let label = l % q.len();
            prop_assert_eq!(deviance(label, &q), 2.0 * ce_loss(label, &q));
        }

        #[test]
        fn mean_deviance_permutation_invariant(p in preds_strategy(), seed in 0u64..1000) {
            let base = mean_deviance_of(p.view());
            let mut rows: Vec<usize> = (0..p.nrows()).collect();
            let mut cols: Vec<usize> = (0..p.ncols()).collect();
            let mut rng = crate::rng::seeded(seed, 0);
            use rand::seq::SliceRandom;
            rows.shuffle(&mut rng);
            cols.shuffle(&mut rng);
            let q = Array2::from_shape_fn(p.dim(), |(j, c)| p[[rows[j], cols[c]]]);
            prop_assert!((mean_deviance_of(q.view()) - base).abs() < 1e-12);
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn credible_upper_monotone_in_alpha(p in preds_strategy(), a in 0.01f64..0.98, b in 0.01f64..0.98) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(credible_upper_of(p.view(), lo).unwrap() >= credible_upper_of(p.view(), hi).unwrap());
        }

        #[test]
        fn credible_upper_moves_up_with_mass_in_high_deviance(p in preds_strategy(), alpha in 0.02f64..0.5, frac in 0.0f64..1.0) {
            // Knot positions stay fixed; mass moves from the lowest to the highest deviance.
            let mut pts = outcomes(p.view());
            let before = credible_upper_from_outcomes(&pts, alpha).unwrap();
            let lo = (0..pts.len()).min_by(|&a, &b| pts[a].0.total_cmp(&pts[b].0)).unwrap();
            let hi = (0..pts.len()).max_by(|&a, &b| pts[a].0.total_cmp(&pts[b].0)).unwrap();
            let d = frac * pts[lo].1;
            pts[lo].1 -= d;
            pts[hi].1 += d;
            prop_assert!(credible_upper_from_outcomes(&pts, alpha).unwrap() >= before);
        }

        #[test]
        fn credible_upper_optimal_over_knots(p in preds_strategy(), alpha in 0.01f64..0.99) {
            prop_assume!(p.len() <= 200);
            let tau = credible_upper_of(p.view(), alpha).unwrap();
            let ks = knots(outcomes(p.view()));
            // Returned knot is a candidate and the smallest one meeting the target.
            let pos = ks.iter().position(|(d, _)| *d == tau).unwrap();
            prop_assert!(ks[pos].1 >= 1.0 - alpha - MASS_TOL || pos == ks.len() - 1);
            for (d, cum) in &ks[..pos] {
                prop_assert!(*cum < 1.0 - alpha - MASS_TOL, "knot {} already reaches target", d);
            }
            // Its discrepancy is bounded by the jump of the step function there.
            let jump = ks[pos].1 - if pos == 0 { 0.0 } else { ks[pos - 1].1 };
            prop_assert!(discrepancy(p.view(), tau, alpha) <= jump + 1e-12);
            // Among knots at or above the target it attains the minimal discrepancy.
            let best = ks.iter()
                .filter(|(_, c)| *c >= 1.0 - alpha - MASS_TOL)
                .map(|(d, _)| discrepancy(p.view(), *d, alpha))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(discrepancy(p.view(), tau, alpha) <= best + 1e-12);
        }
    }

    #[test]
    fn point_metrics_with_true_probs_is_zero_mse() {
        let d = crate::data::gen_sim1(400, 5, crate::data::DomainPartition::SIM1_DEFAULT).unwrap();
        let p = d.true_probs().unwrap().clone();
        let m = point_metrics(p.view(), p.view(), &d).unwrap();
        assert_eq!(m.mse, Some(0.0));
        let bayes = (0..d.len())
            .filter(|&i| argmax(p.row(i).as_slice().unwrap()) == d.labels()[i])
            .count() as f64
            / d.len() as f64;
        assert_eq!(m.accuracy, bayes);
        assert_eq!(m.domains.len(), 3);
        assert_eq!(m.domains.iter().map(|x| x.n).sum::<usize>(), 400);
    }
}
