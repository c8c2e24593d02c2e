//! Nuisance functions: outcome regressions `mu_a`, propensities
//! `pi_a = P(A=a, E=1 | V)` and `rho_0 = P(E=0 | V)`, and the W-given-V model
//! `nu(v, w) = P(W=w | V=v, E=0)`.
//!
//! Probabilities are clipped into `[eps_p, 1 - eps_p]` and renormalized on a
//! simplex at evaluation time, so `pi_0 + pi_1 + rho_0 = 1` and
//! `sum_w nu(v, w) = 1` hold at every queried point. Outcome regressions are
//! clipped into the outcome range. A fitted [`NuisanceSet`] is immutable and
//! can be evaluated concurrently.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, OutcomeBounds};
use crate::error::{Error, Result};
use crate::learners::{fit_kernel, fit_linear, fit_logistic, fit_multinomial};
use crate::rng::stream_rng;

pub use crate::learners::{LearnerFamily, LearnerSpec};

/// Default probability clip; keeps every nuisance bounded away from 0 and 1.
pub const DEFAULT_EPS_P: f64 = 0.01;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type DistFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Clip a probability vector into `[eps, 1 - eps]` and renormalize to sum 1
/// while keeping every coordinate at least `eps` above the floor share.
pub fn simplex_project(probs: &[f64], eps: f64) -> Vec<f64> {
    let k = probs.len();
    if k == 0 {
        return Vec::new();
    }
    if k == 1 {
        return vec![1.0];
    }
    // A clip that is too aggressive for the simplex dimension is infeasible;
    // shrink it so k * eps <= 1/2.
    let eps = eps.min(0.5 / k as f64);
    let clipped: Vec<f64> = probs
        .iter()
        .map(|p| {
            let p = if p.is_finite() { *p } else { 0.0 };
            p.clamp(eps, 1.0 - eps)
        })
        .collect();
    let excess: f64 = clipped.iter().map(|p| p - eps).sum();
    if excess <= 0.0 {
        return vec![1.0 / k as f64; k];
    }
    let budget = 1.0 - k as f64 * eps;
    clipped
        .iter()
        .map(|p| eps + budget * (p - eps) / excess)
        .collect()
}

/// The fitted nuisance set `eta`.
///
/// Stores raw learners; clipping and simplex projection are applied at
/// evaluation. The treated/study propensities are factored as
/// `pi_a = (1 - rho_0) * P(A=a | V, E=1)` so the additivity identity holds by
/// construction.
#[derive(Clone)]
pub struct NuisanceSet {
    mu0: ScalarFn,
    mu1: ScalarFn,
    /// P(A=1 | V, E=1), before clipping.
    pa1: ScalarFn,
    /// P(E=0 | V), before clipping.
    rho0: ScalarFn,
    /// Per-level W probabilities, before projection.
    nu: DistFn,
    pub bounds: OutcomeBounds,
    pub eps_p: f64,
    pub num_levels: usize,
}

impl std::fmt::Debug for NuisanceSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NuisanceSet")
            .field("bounds", &self.bounds)
            .field("eps_p", &self.eps_p)
            .field("num_levels", &self.num_levels)
            .finish()
    }
}

impl NuisanceSet {
    pub fn new(
        mu0: ScalarFn,
        mu1: ScalarFn,
        pa1: ScalarFn,
        rho0: ScalarFn,
        nu: DistFn,
        bounds: OutcomeBounds,
        num_levels: usize,
    ) -> Self {
        NuisanceSet {
            mu0,
            mu1,
            pa1,
            rho0,
            nu,
            bounds,
            eps_p: DEFAULT_EPS_P,
            num_levels,
        }
    }

    pub fn with_eps(mut self, eps_p: f64) -> Self {
        self.eps_p = eps_p;
        self
    }

    pub fn mu0(&self, v: &[f64]) -> f64 {
        self.bounds.clip_outcome((self.mu0)(v))
    }

    pub fn mu1(&self, v: &[f64]) -> f64 {
        self.bounds.clip_outcome((self.mu1)(v))
    }

    pub fn mu(&self, arm: bool, v: &[f64]) -> f64 {
        if arm {
            self.mu1(v)
        } else {
            self.mu0(v)
        }
    }

    /// `mu_1(v) - mu_0(v)` after clipping.
    pub fn delta_mu(&self, v: &[f64]) -> f64 {
        self.mu1(v) - self.mu0(v)
    }

    /// `(pi_0, pi_1, rho_0)` projected onto the clipped simplex.
    pub fn prob_triple(&self, v: &[f64]) -> [f64; 3] {
        let rho = (self.rho0)(v).clamp(0.0, 1.0);
        let pa1 = (self.pa1)(v).clamp(0.0, 1.0);
        let raw = [(1.0 - rho) * (1.0 - pa1), (1.0 - rho) * pa1, rho];
        let proj = simplex_project(&raw, self.eps_p);
        [proj[0], proj[1], proj[2]]
    }

    pub fn pi0(&self, v: &[f64]) -> f64 {
        self.prob_triple(v)[0]
    }

    pub fn pi1(&self, v: &[f64]) -> f64 {
        self.prob_triple(v)[1]
    }

    pub fn rho0(&self, v: &[f64]) -> f64 {
        self.prob_triple(v)[2]
    }

    /// Projected W distribution at `v`, in support order.
    pub fn nu_dist(&self, v: &[f64]) -> Vec<f64> {
        simplex_project(&(self.nu)(v), self.eps_p)
    }

    pub fn nu(&self, v: &[f64], w_index: usize) -> f64 {
        self.nu_dist(v)[w_index]
    }
}

/// Fit the outcome regressions on the study population, one per arm.
/// Returned closures clip into the outcome range.
pub fn fit_outcome(d1: &Dataset, spec: &LearnerSpec) -> Result<(ScalarFn, ScalarFn)> {
    spec.validate()?;
    let bounds = d1.bounds;
    let mut fits = Vec::with_capacity(2);
    for arm in [false, true] {
        let mut vs: Vec<&[f64]> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in &d1.samples {
            if s.e && s.a_treat == Some(arm) {
                vs.push(&s.v);
                ys.push(s.y.expect("validated study sample"));
            }
        }
        if vs.is_empty() {
            return Err(Error::Positivity(format!(
                "no study samples with A={}",
                arm as u8
            )));
        }
        let f: ScalarFn = if spec.is_kernel() {
            let fit = fit_kernel(&vs, &ys, spec)?;
            Arc::new(move |v| bounds.clip_outcome(fit.eval(v)))
        } else {
            let fit = fit_linear(&vs, &ys, spec)?;
            Arc::new(move |v| bounds.clip_outcome(fit.eval(v)))
        };
        fits.push(f);
    }
    let mu1 = fits.pop().unwrap();
    let mu0 = fits.pop().unwrap();
    Ok((mu0, mu1))
}

/// Fit `rho_0 = P(E=0 | V)` on everyone and `P(A=1 | V, E=1)` on the study
/// population, returning `(pi_0, pi_1, rho_0)` with the additivity identity
/// holding by construction.
pub fn fit_propensities(
    d1: &Dataset,
    spec: &LearnerSpec,
) -> Result<(ScalarFn, ScalarFn, ScalarFn)> {
    let (pa1, rho0) = fit_propensity_parts(d1, spec)?;
    let pi1: ScalarFn = {
        let pa1 = pa1.clone();
        let rho0 = rho0.clone();
        Arc::new(move |v| (1.0 - rho0(v)) * pa1(v))
    };
    let pi0: ScalarFn = {
        let pa1 = pa1.clone();
        let rho0 = rho0.clone();
        Arc::new(move |v| (1.0 - rho0(v)) * (1.0 - pa1(v)))
    };
    Ok((pi0, pi1, rho0))
}

/// The factored pieces behind [`fit_propensities`]: `P(A=1 | V, E=1)` and
/// `P(E=0 | V)`.
pub fn fit_propensity_parts(d1: &Dataset, spec: &LearnerSpec) -> Result<(ScalarFn, ScalarFn)> {
    spec.validate()?;
    let n_study = d1.study_indices().len();
    let n_target = d1.target_indices().len();
    if n_study == 0 || n_target == 0 {
        return Err(Error::PopulationOverlap(format!(
            "{n_study} study and {n_target} target samples"
        )));
    }
    let mut arm_vs: Vec<&[f64]> = Vec::new();
    let mut arm_ys: Vec<bool> = Vec::new();
    for s in &d1.samples {
        if s.e {
            arm_vs.push(&s.v);
            arm_ys.push(s.a_treat.expect("validated study sample"));
        }
    }
    let n_treated = arm_ys.iter().filter(|&&a| a).count();
    if n_treated == 0 || n_treated == arm_ys.len() {
        return Err(Error::Positivity(format!(
            "{n_treated} of {} study samples treated",
            arm_ys.len()
        )));
    }
    let pop_vs: Vec<&[f64]> = d1.samples.iter().map(|s| s.v.as_slice()).collect();
    let pop_ys: Vec<bool> = d1.samples.iter().map(|s| !s.e).collect();

    let pa1: ScalarFn;
    let rho0: ScalarFn;
    if spec.is_kernel() {
        let arm_num: Vec<f64> = arm_ys.iter().map(|&b| b as u8 as f64).collect();
        let pop_num: Vec<f64> = pop_ys.iter().map(|&b| b as u8 as f64).collect();
        let fa = fit_kernel(&arm_vs, &arm_num, spec)?;
        let fr = fit_kernel(&pop_vs, &pop_num, spec)?;
        pa1 = Arc::new(move |v| fa.eval(v).clamp(0.0, 1.0));
        rho0 = Arc::new(move |v| fr.eval(v).clamp(0.0, 1.0));
    } else {
        let fa = fit_logistic(&arm_vs, &arm_ys, spec)?;
        let fr = fit_logistic(&pop_vs, &pop_ys, spec)?;
        pa1 = Arc::new(move |v| fa.prob(v));
        rho0 = Arc::new(move |v| fr.prob(v));
    }
    Ok((pa1, rho0))
}

/// Fit the W-given-V model on the target population. The returned closure
/// yields a projected distribution over the full support, so levels absent
/// from the training data receive the clipped minimum probability.
pub fn fit_w_model(d1: &Dataset, spec: &LearnerSpec) -> Result<DistFn> {
    spec.validate()?;
    let num_levels = d1.w_support.num_levels();
    let mut vs: Vec<&[f64]> = Vec::new();
    let mut cs: Vec<usize> = Vec::new();
    for s in &d1.samples {
        if !s.e {
            vs.push(&s.v);
            cs.push(s.w.expect("validated target sample"));
        }
    }
    if vs.is_empty() {
        return Err(Error::invalid("no target samples to fit the W model on"));
    }
    let eps = DEFAULT_EPS_P;
    if spec.is_kernel() {
        let mut fits = Vec::with_capacity(num_levels);
        for level in 0..num_levels {
            let ys: Vec<f64> = cs.iter().map(|&c| (c == level) as u8 as f64).collect();
            fits.push(fit_kernel(&vs, &ys, spec)?);
        }
        Ok(Arc::new(move |v| {
            let raw: Vec<f64> = fits.iter().map(|f| f.eval(v).max(0.0)).collect();
            simplex_project(&raw, eps)
        }))
    } else {
        let fit = fit_multinomial(&vs, &cs, num_levels, spec)?;
        Ok(Arc::new(move |v| simplex_project(&fit.probs(v), eps)))
    }
}

/// Fit every nuisance on one fold.
pub fn fit_all(d1: &Dataset, spec: &LearnerSpec) -> Result<NuisanceSet> {
    let (mu0, mu1) = fit_outcome(d1, spec)?;
    let (pa1, rho0) = fit_propensity_parts(d1, spec)?;
    let nu = fit_w_model(d1, spec)?;
    Ok(NuisanceSet::new(
        mu0,
        mu1,
        pa1,
        rho0,
        nu,
        d1.bounds,
        d1.w_support.num_levels(),
    ))
}

/// Which nuisance component a perturbation applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbTarget {
    Mu0,
    Mu1,
    /// P(A=1 | V, E=1); moves both pi_0 and pi_1.
    TreatmentPropensity,
    Rho0,
    Nu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseShape {
    ConstantShift,
    SmoothFunctionOfV,
}

/// Controlled error injection into a fitted [`NuisanceSet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub targets: Vec<PerturbTarget>,
    /// Nominal mean absolute deviation of each targeted component.
    pub magnitude: f64,
    pub shape: NoiseShape,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn constant(targets: Vec<PerturbTarget>, magnitude: f64) -> Self {
        PerturbationSpec {
            targets,
            magnitude,
            shape: NoiseShape::ConstantShift,
            seed: 0,
        }
    }

    pub fn smooth(targets: Vec<PerturbTarget>, magnitude: f64, seed: u64) -> Self {
        PerturbationSpec {
            targets,
            magnitude,
            shape: NoiseShape::SmoothFunctionOfV,
            seed,
        }
    }
}

/// Realized (post-clipping) deviations, measured on the reference sample.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbReport {
    pub realized: Vec<(PerturbTarget, f64)>,
}

fn smooth_shape(reference: &Dataset, seed: u64, stream: u64) -> ScalarFn {
    let mut rng = stream_rng(seed, stream);
    let dim = reference.v_dim();
    // Standardize against the reference so the shape has unit-scale argument.
    let n = reference.samples.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for s in &reference.samples {
        for j in 0..dim {
            mean[j] += s.v[j] / n;
        }
    }
    for s in &reference.samples {
        for j in 0..dim {
            sd[j] += (s.v[j] - mean[j]).powi(2) / n;
        }
    }
    for x in &mut sd {
        *x = x.sqrt().max(1e-9);
    }
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut dir {
        *x /= norm;
    }
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    Arc::new(move |v: &[f64]| {
        let z: f64 = v
            .iter()
            .zip(dir.iter())
            .zip(mean.iter().zip(sd.iter()))
            .map(|((x, d), (m, s))| d * (x - m) / s)
            .sum();
        (1.7 * z + phase).sin()
    })
}

fn shifted(base: &ScalarFn, shape: Option<ScalarFn>, amplitude: f64) -> ScalarFn {
    let base = base.clone();
    match shape {
        None => Arc::new(move |v| base(v) + amplitude),
        Some(s) => Arc::new(move |v| base(v) + amplitude * s(v)),
    }
}

/// Returns a new nuisance set whose targeted components differ from `eta` by
/// mean absolute deviation close to `spec.magnitude`, together with the
/// realized deviations measured on `reference` after clipping. The shape
/// amplitude is normalized on the reference sample, so clipping is the only
/// source of shrinkage.
pub fn perturb(
    eta: &NuisanceSet,
    spec: &PerturbationSpec,
    reference: &Dataset,
) -> Result<(NuisanceSet, PerturbReport)> {
    if spec.magnitude < 0.0 || !spec.magnitude.is_finite() {
        return Err(Error::invalid("perturbation magnitude must be >= 0"));
    }
    let mut out = eta.clone();
    if spec.magnitude == 0.0 || spec.targets.is_empty() {
        let realized = spec.targets.iter().map(|&t| (t, 0.0)).collect();
        return Ok((out, PerturbReport { realized }));
    }
    // Perturbed probabilities are re-clipped into the standard band; an
    // oracle set's looser clip would let inverse weights blow up once its
    // probabilities are pushed through zero.
    out.eps_p = out.eps_p.max(DEFAULT_EPS_P);
    let vs: Vec<&[f64]> = reference.samples.iter().map(|s| s.v.as_slice()).collect();
    if vs.is_empty() {
        return Err(Error::invalid("perturbation needs a nonempty reference sample"));
    }
    let n = vs.len() as f64;

    let mut realized = Vec::with_capacity(spec.targets.len());
    for (stream, &target) in spec.targets.iter().enumerate() {
        let shape: Option<ScalarFn> = match spec.shape {
            NoiseShape::ConstantShift => None,
            NoiseShape::SmoothFunctionOfV => {
                Some(smooth_shape(reference, spec.seed, stream as u64))
            }
        };
        // Normalize the amplitude so the pre-clip deviation is exactly the
        // nominal magnitude on the reference sample.
        let mean_abs_shape = match &shape {
            None => 1.0,
            Some(s) => (vs.iter().map(|v| s(v).abs()).sum::<f64>() / n).max(1e-9),
        };
        let amplitude = spec.magnitude / mean_abs_shape;
        match target {
            PerturbTarget::Mu0 => out.mu0 = shifted(&out.mu0, shape, amplitude),
            PerturbTarget::Mu1 => out.mu1 = shifted(&out.mu1, shape, amplitude),
            PerturbTarget::TreatmentPropensity => {
                out.pa1 = shifted(&out.pa1, shape, amplitude)
            }
            PerturbTarget::Rho0 => out.rho0 = shifted(&out.rho0, shape, amplitude),
            PerturbTarget::Nu => {
                let k = out.num_levels;
                let base = out.nu.clone();
                // Move mass toward level 0 and away from the rest, modulated
                // by the shape; total variation of the pre-clip shift equals
                // the amplitude.
                let shape = shape.clone();
                out.nu = Arc::new(move |v: &[f64]| {
                    let mut dist = base(v);
                    let s = shape.as_ref().map_or(1.0, |f| f(v));
                    let bump = amplitude * s;
                    if k > 1 {
                        dist[0] += bump;
                        for item in dist.iter_mut().take(k).skip(1) {
                            *item -= bump / (k as f64 - 1.0);
                        }
                    }
                    dist
                });
            }
        }
        let dev = match target {
            PerturbTarget::Mu0 => {
                vs.iter().map(|v| (out.mu0(v) - eta.mu0(v)).abs()).sum::<f64>() / n
            }
            PerturbTarget::Mu1 => {
                vs.iter().map(|v| (out.mu1(v) - eta.mu1(v)).abs()).sum::<f64>() / n
            }
            PerturbTarget::TreatmentPropensity => {
                vs.iter()
                    .map(|v| {
                        let new = out.prob_triple(v);
                        let old = eta.prob_triple(v);
                        ((new[1] - old[1]).abs() + (new[0] - old[0]).abs()) / 2.0
                    })
                    .sum::<f64>()
                    / n
            }
            PerturbTarget::Rho0 => {
                vs.iter()
                    .map(|v| (out.prob_triple(v)[2] - eta.prob_triple(v)[2]).abs())
                    .sum::<f64>()
                    / n
            }
            PerturbTarget::Nu => {
                vs.iter()
                    .map(|v| {
                        let new = out.nu_dist(v);
                        let old = eta.nu_dist(v);
                        0.5 * new
                            .iter()
                            .zip(old.iter())
                            .map(|(a, b)| (a - b).abs())
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / n
            }
        };
        realized.push((target, dev));
    }
    Ok((out, PerturbReport { realized }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{ColumnMeta, ObservedSample, WSupport};
    use approx::assert_abs_diff_eq;

    fn constant_eta(bounds: OutcomeBounds, num_levels: usize) -> NuisanceSet {
        let k = num_levels;
        NuisanceSet::new(
            Arc::new(|_| 0.2),
            Arc::new(|_| 0.6),
            Arc::new(|_| 0.8),
            Arc::new(|_| 0.5),
            Arc::new(move |_| vec![1.0 / k as f64; k]),
            bounds,
            num_levels,
        )
    }

    fn small_dataset(n: usize) -> Dataset {
        let support = WSupport::from_levels(vec![vec![0.0], vec![1.0]]).unwrap();
        let mut samples = Vec::new();
        for i in 0..n {
            let v = vec![(i as f64 / n as f64) * 2.0 - 1.0];
            if i % 2 == 0 {
                samples.push(ObservedSample::target(v, i % 2));
            } else {
                samples.push(ObservedSample::study(v, i % 4 == 1, 0.5));
            }
        }
        Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 1.0).unwrap(),
            support,
            ColumnMeta::unnamed(1, 1),
        )
    }

    #[test]
    fn simplex_projection_enforces_sum_and_clip() {
        let p = simplex_project(&[0.9, 0.2, -0.1], 0.01);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for x in &p {
            assert!(*x >= 0.01 - 1e-12 && *x <= 0.99 + 1e-12);
        }
        // Already-valid distributions are unchanged.
        let q = simplex_project(&[0.25, 0.25, 0.25, 0.25], 0.01);
        for x in &q {
            assert_abs_diff_eq!(*x, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn prob_triple_sums_to_one_with_clipping() {
        let eta = constant_eta(OutcomeBounds::new(0.0, 1.0).unwrap(), 2);
        let t = eta.prob_triple(&[0.0]);
        assert_abs_diff_eq!(t.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t[2], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(t[1], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(t[0], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn outcome_fit_requires_both_arms() {
        let support = WSupport::from_levels(vec![vec![0.0], vec![1.0]]).unwrap();
        let samples = vec![
            ObservedSample::study(vec![0.1], true, 0.5),
            ObservedSample::study(vec![0.2], true, 0.6),
            ObservedSample::target(vec![0.3], 0),
        ];
        let d = Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 1.0).unwrap(),
            support,
            ColumnMeta::unnamed(1, 1),
        );
        match fit_outcome(&d, &LearnerSpec::linear(1)) {
            Err(Error::Positivity(_)) => {}
            Err(other) => panic!("expected positivity violation, got {other}"),
            Ok(_) => panic!("expected positivity violation, got a fit"),
        }
        match fit_propensities(&d, &LearnerSpec::linear(1)) {
            Err(Error::Positivity(_)) => {}
            Err(other) => panic!("expected positivity violation, got {other}"),
            Ok(_) => panic!("expected positivity violation, got a fit"),
        }
    }

    #[test]
    fn propensity_fit_requires_both_populations() {
        let support = WSupport::from_levels(vec![vec![0.0]]).unwrap();
        let samples = vec![
            ObservedSample::study(vec![0.1], true, 0.5),
            ObservedSample::study(vec![0.2], false, 0.6),
        ];
        let d = Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 1.0).unwrap(),
            support,
            ColumnMeta::unnamed(1, 1),
        );
        match fit_propensities(&d, &LearnerSpec::linear(1)) {
            Err(Error::PopulationOverlap(_)) => {}
            Err(other) => panic!("expected population overlap violation, got {other}"),
            Ok(_) => panic!("expected population overlap violation, got a fit"),
        }
    }

    #[test]
    fn outcome_fit_recovers_linear_signal_and_constant() {
        let support = WSupport::from_levels(vec![vec![0.0], vec![1.0]]).unwrap();
        let mut samples = Vec::new();
        for i in 0..60 {
            let x = i as f64 / 60.0;
            samples.push(ObservedSample::study(vec![x], true, 2.0 * x));
            samples.push(ObservedSample::study(vec![x], false, 0.4));
            samples.push(ObservedSample::target(vec![x], i % 2));
        }
        let d = Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 2.0).unwrap(),
            support,
            ColumnMeta::unnamed(1, 1),
        );
        let (mu0, mu1) = fit_outcome(&d, &LearnerSpec::linear(1)).unwrap();
        for i in 0..60 {
            let x = i as f64 / 60.0;
            assert_abs_diff_eq!(mu1(&[x]), 2.0 * x, epsilon = 1e-6);
            assert_abs_diff_eq!(mu0(&[x]), 0.4, epsilon = 1e-6);
        }
    }

    #[test]
    fn fair_coin_population_gives_half_rho() {
        let support = WSupport::from_levels(vec![vec![0.0], vec![1.0]]).unwrap();
        let mut samples = Vec::new();
        let mut rng = crate::rng::seeded_rng(5);
        for _ in 0..2000 {
            let v = vec![rng.gen_range(-1.0..1.0)];
            if rng.gen_bool(0.5) {
                samples.push(ObservedSample::study(v, rng.gen_bool(0.5), 0.5));
            } else {
                samples.push(ObservedSample::target(v, rng.gen_range(0..2)));
            }
        }
        let d = Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 1.0).unwrap(),
            support,
            ColumnMeta::unnamed(1, 1),
        );
        let (_, _, rho0) = fit_propensities(&d, &LearnerSpec::linear(1)).unwrap();
        for v in [-0.8, 0.0, 0.8] {
            assert_abs_diff_eq!(rho0(&[v]), 0.5, epsilon = 0.05);
        }
    }

    #[test]
    fn w_model_uniform_and_deterministic_cases() {
        let support = WSupport::from_levels(vec![vec![0.0], vec![1.0]]).unwrap();
        // Uniform case: W independent of V.
        let mut samples = Vec::new();
        for i in 0..400 {
            samples.push(ObservedSample::target(vec![i as f64 / 400.0], i % 2));
        }
        samples.push(ObservedSample::study(vec![0.5], true, 0.5));
        samples.push(ObservedSample::study(vec![0.5], false, 0.5));
        let d = Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 1.0).unwrap(),
            support.clone(),
            ColumnMeta::unnamed(1, 1),
        );
        let nu = fit_w_model(&d, &LearnerSpec::linear(1)).unwrap();
        let dist = nu(&[0.3]);
        assert_abs_diff_eq!(dist[0], 0.5, epsilon = 0.05);

        // Deterministic case: W = 1(v > 0.5); the fitted conditional must
        // concentrate at least 1 - eps_p on the realized level.
        let mut samples = Vec::new();
        for i in 0..400 {
            let x = i as f64 / 400.0;
            samples.push(ObservedSample::target(vec![x], (x > 0.5) as usize));
        }
        samples.push(ObservedSample::study(vec![0.5], true, 0.5));
        samples.push(ObservedSample::study(vec![0.5], false, 0.5));
        let d = Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 1.0).unwrap(),
            support,
            ColumnMeta::unnamed(1, 1),
        );
        let nu = fit_w_model(&d, &LearnerSpec::linear(1)).unwrap();
        assert!(nu(&[0.9])[1] >= 1.0 - DEFAULT_EPS_P - 1e-9);
        assert!(nu(&[0.1])[0] >= 1.0 - DEFAULT_EPS_P - 1e-9);
    }

    #[test]
    fn perturb_zero_magnitude_is_identity() {
        let eta = constant_eta(OutcomeBounds::new(0.0, 1.0).unwrap(), 2);
        let d = small_dataset(40);
        let spec = PerturbationSpec::constant(vec![PerturbTarget::Mu1], 0.0);
        let (out, report) = perturb(&eta, &spec, &d).unwrap();
        assert_eq!(report.realized[0].1, 0.0);
        for s in &d.samples {
            assert_eq!(out.mu1(&s.v), eta.mu1(&s.v));
        }
    }

    #[test]
    fn perturb_constant_shift_hits_exact_magnitude_without_clipping() {
        // mu1 = 0.6 with bounds [0, 1]: a +0.1 shift stays interior.
        let eta = constant_eta(OutcomeBounds::new(0.0, 1.0).unwrap(), 2);
        let d = small_dataset(40);
        let spec = PerturbationSpec::constant(vec![PerturbTarget::Mu1], 0.1);
        let (out, report) = perturb(&eta, &spec, &d).unwrap();
        assert_abs_diff_eq!(report.realized[0].1, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(out.mu1(&[0.0]), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn perturb_smooth_rho_reports_realized_near_nominal() {
        let eta = constant_eta(OutcomeBounds::new(0.0, 1.0).unwrap(), 2);
        let d = small_dataset(200);
        let spec = PerturbationSpec::smooth(vec![PerturbTarget::Rho0], 0.2, 9);
        let (_, report) = perturb(&eta, &spec, &d).unwrap();
        let realized = report.realized[0].1;
        assert!(
            (realized - 0.2).abs() <= 0.2 * 0.2,
            "realized {realized} too far from nominal 0.2"
        );
    }

    #[test]
    fn perturb_rejects_negative_magnitude() {
        let eta = constant_eta(OutcomeBounds::new(0.0, 1.0).unwrap(), 2);
        let d = small_dataset(10);
        let spec = PerturbationSpec::constant(vec![PerturbTarget::Mu0], -0.1);
        assert!(perturb(&eta, &spec, &d).is_err());
    }

    #[test]
    fn nu_rows_sum_to_one_after_perturbation() {
        let eta = constant_eta(OutcomeBounds::new(0.0, 1.0).unwrap(), 4);
        let d = small_dataset(60);
        let spec = PerturbationSpec::smooth(vec![PerturbTarget::Nu], 0.15, 3);
        let (out, _) = perturb(&eta, &spec, &d).unwrap();
        for s in &d.samples {
            let dist = out.nu_dist(&s.v);
            assert_abs_diff_eq!(dist.iter().sum::<f64>(), 1.0, epsilon = 1e-8);
            for p in dist {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }
}
