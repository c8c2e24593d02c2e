//! Doubly-robust estimator of the restricted treatment effect
//! `E[Y^1 - Y^0 | V]` on the study population: cross-fit pseudo-outcomes
//! regressed on `V`, with sandwich standard errors for the second stage.
//! Used as the coverage-comparison baseline.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data_model::Dataset;
use crate::error::{Error, Result};
use crate::inference::Interval;
use crate::learners::{fit_linear, fit_logistic, LearnerSpec};
use crate::rng::seeded_rng;

const Z_975: f64 = 1.959963984540054;
const PROP_EPS: f64 = 0.01;

/// Second-stage fit of the restricted effect, linear in `V` plus intercept.
#[derive(Debug, Clone, Serialize)]
pub struct RestrictedCateFit {
    pub coef: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Mean pseudo-outcome: the implied average effect on the study group.
    pub mean_psi: f64,
    pub n_used: usize,
}

impl RestrictedCateFit {
    fn features(v: &[f64]) -> Vec<f64> {
        let mut x = v.to_vec();
        x.push(1.0);
        x
    }

    pub fn predict(&self, v: &[f64]) -> f64 {
        Self::features(v)
            .iter()
            .zip(self.coef.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Point estimate and pointwise 95% interval at `v`.
    pub fn predict_interval(&self, v: &[f64]) -> (f64, Interval) {
        let x = Self::features(v);
        let p = x.len();
        let mut quad = 0.0;
        for i in 0..p {
            for j in 0..p {
                quad += x[i] * self.covariance[i][j] * x[j];
            }
        }
        let se = quad.max(0.0).sqrt();
        let point = self.predict(v);
        (
            point,
            Interval {
                lower: point - Z_975 * se,
                upper: point + Z_975 * se,
            },
        )
    }
}

/// Nuisances for the pseudo-outcome, supplied directly (used by oracle and
/// robustness tests).
pub struct DrNuisances<'a> {
    pub mu0: &'a dyn Fn(&[f64]) -> f64,
    pub mu1: &'a dyn Fn(&[f64]) -> f64,
    /// P(A=1 | V, E=1).
    pub propensity: &'a dyn Fn(&[f64]) -> f64,
}

fn pseudo_outcome_dr(v: &[f64], a: bool, y: f64, nuis: &DrNuisances) -> f64 {
    let pi = (nuis.propensity)(v).clamp(PROP_EPS, 1.0 - PROP_EPS);
    let (m0, m1) = ((nuis.mu0)(v), (nuis.mu1)(v));
    let ma = if a { m1 } else { m0 };
    let av = a as u8 as f64;
    (av - pi) / (pi * (1.0 - pi)) * (y - ma) + m1 - m0
}

fn second_stage(rows: &[(Vec<f64>, f64)]) -> Result<RestrictedCateFit> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::invalid("no study units for the second stage"));
    }
    let feats: Vec<Vec<f64>> = rows
        .iter()
        .map(|(v, _)| RestrictedCateFit::features(v))
        .collect();
    let p = feats[0].len();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for (x, (_, psi)) in feats.iter().zip(rows.iter()) {
        for i in 0..p {
            rhs[i] += x[i] * psi;
            for j in 0..p {
                gram[(i, j)] += x[i] * x[j];
            }
        }
    }
    let (coef, _) = crate::learners::solve_spd(&gram, &rhs, 0.0);
    // HC0 sandwich for the second-stage regression.
    let gram_inv = gram
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::identity(p, p));
    let mut meat = DMatrix::zeros(p, p);
    for (x, (_, psi)) in feats.iter().zip(rows.iter()) {
        let fitted: f64 = x.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
        let r = psi - fitted;
        for i in 0..p {
            for j in 0..p {
                meat[(i, j)] += r * r * x[i] * x[j];
            }
        }
    }
    let cov = &gram_inv * meat * &gram_inv;
    let mean_psi = rows.iter().map(|(_, psi)| psi).sum::<f64>() / n as f64;
    Ok(RestrictedCateFit {
        coef: coef.as_slice().to_vec(),
        covariance: (0..p)
            .map(|i| (0..p).map(|j| cov[(i, j)]).collect())
            .collect(),
        mean_psi,
        n_used: n,
    })
}

/// Fit with supplied nuisances (no cross-fitting).
pub fn fit_dr_restricted_with(dataset: &Dataset, nuis: &DrNuisances) -> Result<RestrictedCateFit> {
    let rows: Vec<(Vec<f64>, f64)> = dataset
        .study_indices()
        .into_iter()
        .map(|i| {
            let s = &dataset.samples[i];
            let psi = pseudo_outcome_dr(&s.v, s.a_treat.unwrap(), s.y.unwrap(), nuis);
            (s.v.clone(), psi)
        })
        .collect();
    second_stage(&rows)
}

/// Cross-fit DR pseudo-outcomes on the study units and regress them on `V`.
pub fn fit_dr_restricted(
    dataset: &Dataset,
    learner: &LearnerSpec,
    seed: u64,
) -> Result<RestrictedCateFit> {
    learner.validate()?;
    let study = dataset.study_indices();
    if study.len() < 4 {
        return Err(Error::invalid("too few study units"));
    }
    // Two-fold split of the study units.
    let mut order = study.clone();
    use rand::seq::SliceRandom;
    order.shuffle(&mut seeded_rng(seed));
    let half = order.len() / 2;
    let folds = [&order[..half], &order[half..]];

    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(study.len());
    for k in 0..2 {
        let train = folds[1 - k];
        let eval = folds[k];
        // Outcome regressions per arm on the training fold.
        let mut arm_fit = Vec::with_capacity(2);
        for arm in [false, true] {
            let mut vs: Vec<&[f64]> = Vec::new();
            let mut ys: Vec<f64> = Vec::new();
            for &i in train {
                let s = &dataset.samples[i];
                if s.a_treat == Some(arm) {
                    vs.push(&s.v);
                    ys.push(s.y.unwrap());
                }
            }
            if vs.is_empty() {
                return Err(Error::Positivity(format!(
                    "training fold has no study samples with A={}",
                    arm as u8
                )));
            }
            arm_fit.push(fit_linear(&vs, &ys, learner)?);
        }
        let vs: Vec<&[f64]> = train.iter().map(|&i| dataset.samples[i].v.as_slice()).collect();
        let labels: Vec<bool> = train
            .iter()
            .map(|&i| dataset.samples[i].a_treat.unwrap())
            .collect();
        if labels.iter().all(|&a| a) || labels.iter().all(|&a| !a) {
            return Err(Error::Positivity("single-arm training fold".into()));
        }
        let prop = fit_logistic(&vs, &labels, learner)?;

        let mu0 = |v: &[f64]| dataset.bounds.clip_outcome(arm_fit[0].eval(v));
        let mu1 = |v: &[f64]| dataset.bounds.clip_outcome(arm_fit[1].eval(v));
        let propensity = |v: &[f64]| prop.prob(v);
        let nuis = DrNuisances {
            mu0: &mu0,
            mu1: &mu1,
            propensity: &propensity,
        };
        for &i in eval {
            let s = &dataset.samples[i];
            let psi = pseudo_outcome_dr(&s.v, s.a_treat.unwrap(), s.y.unwrap(), &nuis);
            rows.push((s.v.clone(), psi));
        }
    }
    second_stage(&rows)
}
