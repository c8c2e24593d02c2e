//! Synthetic data generating process with full ground truth.
//!
//! Six common covariates (three continuous, three binary), three binary new
//! covariates whose conditional law is logistic in `V`, logistic population
//! and treatment assignment, a treatment effect linear in `(V, W)`, and a
//! Gaussian-noise outcome. Outcome bounds are the empirical range of the
//! simulated potential outcomes extended by one percent per side, since the
//! worst-case bounds need a finite range.
//!
//! Coefficient vectors are drawn once per configuration seed; replication
//! seeds vary only the sampled units, so every oracle quantity is fixed
//! across replications of one configuration.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{ColumnMeta, Dataset, ObservedSample, OutcomeBounds, WSupport};
use crate::error::{Error, Result};
use crate::estimator::{pseudo_outcome, ModelSpec};
use crate::learners::sigmoid;
use crate::nuisance::NuisanceSet;
use crate::rng::{derive_seed, stream_rng};

const N_CONTINUOUS: usize = 3;
const N_DISCRETE: usize = 3;
const N_V: usize = N_CONTINUOUS + N_DISCRETE;
const N_W: usize = 3;

/// Oracle nuisances are clipped far less aggressively than fitted ones so
/// the identities they satisfy are not distorted at the tails.
const ORACLE_EPS: f64 = 1e-6;

// Stream ids for the independent RNG lanes of one configuration.
const STREAM_COEF: u64 = 0;
const STREAM_SAMPLE: u64 = 1;
const STREAM_ORACLE: u64 = 2;

/// Configuration of the synthetic process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Multiplier on the W-model coefficients; scales how predictable W is
    /// from V (0 = independent fair coins).
    #[serde(default = "default_scale")]
    pub w_dependence_scale: f64,
    #[serde(default = "default_cont_mean")]
    pub continuous_mean: f64,
    #[serde(default = "default_cont_sd")]
    pub continuous_sd: f64,
    #[serde(default = "default_half")]
    pub discrete_p: f64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    /// Coefficient ranges.
    #[serde(default = "default_sym_unit")]
    pub w_coef_range: (f64, f64),
    #[serde(default = "default_sym_unit")]
    pub e_coef_range: (f64, f64),
    #[serde(default = "default_sym_unit")]
    pub a_coef_range: (f64, f64),
    #[serde(default = "default_effect_range")]
    pub effect_coef_range: (f64, f64),
    #[serde(default = "default_outcome_range")]
    pub outcome_coef_range: (f64, f64),
    /// Per-side extension of the empirical potential-outcome range.
    #[serde(default = "default_bounds_slack")]
    pub bounds_slack: f64,
    /// Treat the outcome bounds as known constants instead of deriving them
    /// from each draw's empirical range. Replication studies set this from a
    /// reference draw so every replication shares one estimand; potential
    /// outcomes are clipped into the fixed range.
    #[serde(default)]
    pub fixed_bounds: Option<(f64, f64)>,
}

fn default_n() -> usize {
    10_000
}
fn default_scale() -> f64 {
    1.0
}
fn default_cont_mean() -> f64 {
    1.0
}
fn default_cont_sd() -> f64 {
    0.5
}
fn default_half() -> f64 {
    0.5
}
fn default_noise_sd() -> f64 {
    1.0
}
fn default_sym_unit() -> (f64, f64) {
    (-1.0, 1.0)
}
fn default_effect_range() -> (f64, f64) {
    (0.0, 1.5)
}
fn default_outcome_range() -> (f64, f64) {
    (1.0, 3.0)
}
fn default_bounds_slack() -> f64 {
    0.01
}

impl Default for DgpConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl DgpConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.w_dependence_scale = scale;
        self
    }

    pub fn with_fixed_bounds(mut self, a: f64, b: f64) -> Self {
        self.fixed_bounds = Some((a, b));
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n must be >= 1"));
        }
        if !(self.continuous_sd > 0.0 && self.noise_sd >= 0.0) {
            return Err(Error::invalid("scales must be positive"));
        }
        Ok(())
    }
}

/// Coefficient vectors drawn once per configuration seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpCoefficients {
    /// W-model logistic coefficients, one row per W coordinate, already
    /// multiplied by the dependence scale.
    pub w_coefs: Vec<Vec<f64>>,
    pub e_coefs: Vec<f64>,
    pub a_coefs: Vec<f64>,
    pub alpha_v: Vec<f64>,
    pub alpha_w: Vec<f64>,
    pub beta_v: Vec<f64>,
    pub beta_w: Vec<f64>,
}

impl DgpCoefficients {
    /// Deterministic draw from the configuration seed.
    pub fn draw(config: &DgpConfig) -> Self {
        let mut rng = stream_rng(config.seed, STREAM_COEF);
        let mut uni = |range: (f64, f64), k: usize| -> Vec<f64> {
            (0..k).map(|_| rng.gen_range(range.0..range.1)).collect()
        };
        let w_coefs: Vec<Vec<f64>> = (0..N_W)
            .map(|_| uni(config.w_coef_range, N_V))
            .collect();
        let e_coefs = uni(config.e_coef_range, N_V);
        let a_coefs = uni(config.a_coef_range, N_V);
        let alpha_v = uni(config.effect_coef_range, N_V);
        let alpha_w = uni(config.effect_coef_range, N_W);
        let beta_v = uni(config.outcome_coef_range, N_V);
        let beta_w = uni(config.outcome_coef_range, N_W);
        let w_coefs = w_coefs
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|c| c * config.w_dependence_scale)
                    .collect()
            })
            .collect();
        DgpCoefficients {
            w_coefs,
            e_coefs,
            a_coefs,
            alpha_v,
            alpha_w,
            beta_v,
            beta_w,
        }
    }

    fn w_probs(&self, v: &[f64]) -> [f64; N_W] {
        let mut out = [0.0; N_W];
        for (j, coefs) in self.w_coefs.iter().enumerate() {
            out[j] = sigmoid(dot(v, coefs));
        }
        out
    }

    /// Restricted effect `E[cate | V=v]`.
    fn restricted_cate(&self, v: &[f64]) -> f64 {
        let probs = self.w_probs(v);
        dot(v, &self.alpha_v)
            + probs
                .iter()
                .zip(self.alpha_w.iter())
                .map(|(p, a)| p * a)
                .sum::<f64>()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Everything the simulation knows that an analyst would not.
#[derive(Clone)]
pub struct GroundTruth {
    pub coefficients: DgpCoefficients,
    /// Per-unit fully conditional effect, aligned with the dataset samples.
    pub cate: Vec<f64>,
    /// Per-unit restricted effect `E[cate | V]`.
    pub restricted_cate: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    /// True nuisance functions, evaluable anywhere.
    pub oracle: NuisanceSet,
    /// Max gap between fully conditional and restricted effects over target
    /// units.
    pub true_delta_max: f64,
    /// Mean-gap variant, emitted alongside the max for comparison.
    pub true_delta_mean: f64,
}

/// Build the oracle nuisance set from the coefficients and bounds.
pub fn oracle_nuisances(
    coefs: &DgpCoefficients,
    bounds: OutcomeBounds,
    support: &WSupport,
) -> NuisanceSet {
    let c = Arc::new(coefs.clone());
    let mu0 = {
        let c = c.clone();
        Arc::new(move |v: &[f64]| {
            let probs = c.w_probs(v);
            dot(v, &c.beta_v)
                + probs
                    .iter()
                    .zip(c.beta_w.iter())
                    .map(|(p, b)| p * b)
                    .sum::<f64>()
        })
    };
    let mu1 = {
        let c = c.clone();
        let mu0 = mu0.clone();
        Arc::new(move |v: &[f64]| mu0(v) + c.restricted_cate(v))
    };
    let pa1 = {
        let c = c.clone();
        Arc::new(move |v: &[f64]| sigmoid(dot(v, &c.a_coefs)))
    };
    let rho0 = {
        let c = c.clone();
        Arc::new(move |v: &[f64]| 1.0 - sigmoid(dot(v, &c.e_coefs)))
    };
    let levels: Vec<Vec<f64>> = support.levels().to_vec();
    let nu = {
        let c = c.clone();
        Arc::new(move |v: &[f64]| {
            let probs = c.w_probs(v);
            levels
                .iter()
                .map(|level| {
                    level
                        .iter()
                        .zip(probs.iter())
                        .map(|(&w, &p)| if w > 0.5 { p } else { 1.0 - p })
                        .product()
                })
                .collect::<Vec<f64>>()
        })
    };
    NuisanceSet::new(mu0, mu1, pa1, rho0, nu, bounds, support.num_levels())
        .with_eps(ORACLE_EPS)
}

/// Full binary cube as the W support, in lexicographic order.
pub fn full_w_support() -> WSupport {
    let mut levels = Vec::with_capacity(1 << N_W);
    for mask in 0..(1usize << N_W) {
        // Lexicographic order over the raw vectors themselves.
        let level: Vec<f64> = (0..N_W)
            .map(|j| ((mask >> (N_W - 1 - j)) & 1) as f64)
            .collect();
        levels.push(level);
    }
    WSupport::from_levels(levels).expect("static support")
}

/// Draw one dataset from the configuration, with the coefficients fixed by
/// the configuration seed and the units by `sample_seed`.
pub fn generate_with(
    config: &DgpConfig,
    coefs: &DgpCoefficients,
    sample_seed: u64,
) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let mut rng = stream_rng(derive_seed(config.seed, STREAM_SAMPLE), sample_seed);
    let normal = Normal::new(config.continuous_mean, config.continuous_sd)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let noise = Normal::new(0.0, config.noise_sd.max(1e-300))
        .map_err(|e| Error::invalid(e.to_string()))?;

    let n = config.n;
    let mut vs = Vec::with_capacity(n);
    let mut ws = Vec::with_capacity(n);
    let mut es = Vec::with_capacity(n);
    let mut as_ = Vec::with_capacity(n);
    let mut cate = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = Vec::with_capacity(N_V);
        for _ in 0..N_CONTINUOUS {
            v.push(normal.sample(&mut rng));
        }
        for _ in 0..N_DISCRETE {
            v.push(rng.gen_bool(config.discrete_p) as u8 as f64);
        }
        let probs = coefs.w_probs(&v);
        let w: Vec<f64> = probs
            .iter()
            .map(|&p| rng.gen_bool(p.clamp(1e-12, 1.0 - 1e-12)) as u8 as f64)
            .collect();
        let e = rng.gen_bool(sigmoid(dot(&v, &coefs.e_coefs)).clamp(1e-12, 1.0 - 1e-12));
        let a = rng.gen_bool(sigmoid(dot(&v, &coefs.a_coefs)).clamp(1e-12, 1.0 - 1e-12));
        let effect = dot(&v, &coefs.alpha_v) + dot(&w, &coefs.alpha_w);
        let base = dot(&v, &coefs.beta_v) + dot(&w, &coefs.beta_w) + noise.sample(&mut rng);
        vs.push(v);
        ws.push(w);
        es.push(e);
        as_.push(a);
        cate.push(effect);
        y0.push(base);
        y1.push(base + effect);
    }

    let bounds = match config.fixed_bounds {
        Some((a, b)) => {
            let bounds = OutcomeBounds::new(a, b)?;
            for i in 0..n {
                y0[i] = bounds.clip_outcome(y0[i]);
                y1[i] = bounds.clip_outcome(y1[i]);
                cate[i] = y1[i] - y0[i];
            }
            bounds
        }
        None => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..n {
                lo = lo.min(y0[i]).min(y1[i]);
                hi = hi.max(y0[i]).max(y1[i]);
            }
            let slack = config.bounds_slack * (hi - lo);
            OutcomeBounds::new(lo - slack, hi + slack)?
        }
    };

    let support = full_w_support();
    let mut samples = Vec::with_capacity(n);
    let mut restricted = Vec::with_capacity(n);
    for i in 0..n {
        restricted.push(coefs.restricted_cate(&vs[i]));
        if es[i] {
            let y = if as_[i] { y1[i] } else { y0[i] };
            samples.push(ObservedSample::study(vs[i].clone(), as_[i], y));
        } else {
            let idx = support
                .index_of(&ws[i])
                .expect("binary W lies in the full cube");
            samples.push(ObservedSample::target(vs[i].clone(), idx));
        }
    }
    let columns = ColumnMeta {
        v_names: (0..N_CONTINUOUS)
            .map(|i| format!("vc{i}"))
            .chain((0..N_DISCRETE).map(|i| format!("vd{i}")))
            .collect(),
        v_discrete: (0..N_V).map(|i| i >= N_CONTINUOUS).collect(),
        w_names: (0..N_W).map(|i| format!("w{i}")).collect(),
    };
    let dataset = Dataset::new(samples, bounds, support.clone(), columns);

    let mut gap_max: f64 = 0.0;
    let mut gap_sum = 0.0;
    let mut n_target = 0usize;
    for i in 0..n {
        if !es[i] {
            let gap = (cate[i] - restricted[i]).abs();
            gap_max = gap_max.max(gap);
            gap_sum += gap;
            n_target += 1;
        }
    }
    let truth = GroundTruth {
        coefficients: coefs.clone(),
        cate,
        restricted_cate: restricted,
        y1,
        y0,
        oracle: oracle_nuisances(coefs, bounds, &support),
        true_delta_max: gap_max,
        true_delta_mean: if n_target > 0 {
            gap_sum / n_target as f64
        } else {
            0.0
        },
    };
    Ok((dataset, truth))
}

/// Draw the configuration's dataset: coefficients and units both fixed by
/// the configuration seed.
pub fn generate(config: &DgpConfig) -> Result<(Dataset, GroundTruth)> {
    let coefs = DgpCoefficients::draw(config);
    generate_with(config, &coefs, config.seed)
}

/// Brute-force projection oracle: the weighted least-squares projection of
/// the true bound function onto the model class over fresh target-population
/// covariate draws. This is the reference value every estimator comparison
/// uses.
pub fn oracle_beta(config: &DgpConfig, spec: &ModelSpec, n_oracle: usize) -> Result<Vec<f64>> {
    if n_oracle < 100_000 {
        return Err(Error::invalid("oracle projection needs n_oracle >= 1e5"));
    }
    let coefs = DgpCoefficients::draw(config);
    // The bounds convention is the one the generated dataset records.
    let (dataset, truth) = generate(config)?;
    let delta = match spec.delta {
        None => None,
        Some(d) => Some(crate::bounds::SensitivityLevel::new(d)?),
    };

    let mut rng = stream_rng(config.seed, STREAM_ORACLE);
    let normal = Normal::new(config.continuous_mean, config.continuous_sd)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let p = spec.beta_dim(&dataset);
    let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut rhs = nalgebra::DVector::<f64>::zeros(p);
    let mut kept = 0usize;
    while kept < n_oracle {
        let mut v = Vec::with_capacity(N_V);
        for _ in 0..N_CONTINUOUS {
            v.push(normal.sample(&mut rng));
        }
        for _ in 0..N_DISCRETE {
            v.push(rng.gen_bool(config.discrete_p) as u8 as f64);
        }
        // Keep only target-population draws.
        if rng.gen_bool(sigmoid(dot(&v, &coefs.e_coefs)).clamp(1e-12, 1.0 - 1e-12)) {
            continue;
        }
        let probs = coefs.w_probs(&v);
        let w: Vec<f64> = probs
            .iter()
            .map(|&p| rng.gen_bool(p.clamp(1e-12, 1.0 - 1e-12)) as u8 as f64)
            .collect();
        let w_idx = dataset
            .w_support
            .index_of(&w)
            .expect("binary W lies in the full cube");
        let dmu = truth.oracle.delta_mu(&v);
        let nu = truth.oracle.nu(&v, w_idx);
        let gamma = pseudo_outcome(dmu, nu, spec.side, delta, &dataset.bounds);
        let x = dataset.profile(&v, w_idx).x;
        let basis = nalgebra::DVector::from_vec(spec.basis(&x, dataset.intercept));
        let h = spec.weight.eval(&x);
        gram.syger(h, &basis, &basis, 1.0);
        rhs.axpy(h * gamma, &basis, 1.0);
        kept += 1;
    }
    for i in 0..p {
        for j in 0..i {
            let val = gram[(i, j)];
            gram[(j, i)] = val;
        }
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("oracle projection design is singular"))?;
    Ok(chol.solve(&rhs).as_slice().to_vec())
}
