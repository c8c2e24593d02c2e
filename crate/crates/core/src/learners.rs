//! Nuisance learners: penalized least squares, binary and multinomial
//! logistic regression fit by damped Newton, and a Gaussian kernel smoother.
//!
//! Everything here is deterministic: no stochastic optimizers, fixed
//! iteration caps, and data-independent tie-breaking. The logistic solvers
//! use a ridge of at least 1e-6 and stop when the gradient max-norm falls
//! below 1e-8 or after 100 iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_GRAD_TOL: f64 = 1e-8;
const BASE_RIDGE: f64 = 1e-6;

/// Learner family used for a nuisance fit. The family selects between the
/// parametric solver appropriate for the nuisance (least squares for outcome
/// regressions, logistic/multinomial for probabilities) and the
/// nonparametric kernel smoother.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerFamily {
    LinearLeastSquares,
    Logistic,
    MultinomialLogistic,
    KernelSmoother,
}

/// Configuration of a nuisance learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub family: LearnerFamily,
    /// Polynomial degree of the per-coordinate feature expansion.
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Ridge strength added to the fit.
    #[serde(default)]
    pub regularization: f64,
    /// Bandwidth multiplier for the kernel family. The per-coordinate
    /// bandwidth is `bandwidth * sd_j * n^(-1/5)`; `None` uses 1.06.
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

fn default_degree() -> usize {
    1
}

impl LearnerSpec {
    pub fn linear(degree: usize) -> Self {
        LearnerSpec {
            family: LearnerFamily::LinearLeastSquares,
            degree,
            regularization: 0.0,
            bandwidth: None,
        }
    }

    pub fn kernel(bandwidth: Option<f64>) -> Self {
        LearnerSpec {
            family: LearnerFamily::KernelSmoother,
            degree: 1,
            regularization: 0.0,
            bandwidth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::invalid("learner degree must be >= 1"));
        }
        if self.regularization < 0.0 || !self.regularization.is_finite() {
            return Err(Error::invalid("learner regularization must be >= 0"));
        }
        if let Some(bw) = self.bandwidth {
            if !(bw > 0.0) {
                return Err(Error::invalid("kernel bandwidth must be > 0"));
            }
        }
        Ok(())
    }

    pub fn is_kernel(&self) -> bool {
        self.family == LearnerFamily::KernelSmoother
    }
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::linear(1)
    }
}

/// Per-coordinate polynomial features with a leading intercept:
/// `[1, v_1, v_1^2, ..., v_k^degree]`.
pub fn poly_features(v: &[f64], degree: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(1 + v.len() * degree);
    out.push(1.0);
    for &x in v {
        let mut p = 1.0;
        for _ in 0..degree {
            p *= x;
            out.push(p);
        }
    }
    out
}

/// Solve `(G + ridge I) beta = rhs` by Cholesky, escalating the ridge by
/// factors of ten (from 1e-12) if the factorization fails.
pub(crate) fn solve_spd(gram: &DMatrix<f64>, rhs: &DVector<f64>, ridge: f64) -> (DVector<f64>, bool) {
    let p = gram.nrows();
    let mut lambda = ridge;
    let mut escalated = false;
    loop {
        let mut g = gram.clone();
        for i in 0..p {
            g[(i, i)] += lambda;
        }
        if let Some(chol) = g.cholesky() {
            return (chol.solve(rhs), escalated);
        }
        escalated = true;
        lambda = if lambda <= 0.0 { 1e-12 } else { lambda * 10.0 };
        if lambda > 1e6 {
            // Pathological input; return the heavily ridged solution anyway.
            let mut g = gram.clone();
            for i in 0..p {
                g[(i, i)] += lambda;
            }
            let sol = g
                .lu()
                .solve(rhs)
                .unwrap_or_else(|| DVector::zeros(p));
            return (sol, true);
        }
    }
}

/// Fitted penalized least-squares regression on polynomial features.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coef: DVector<f64>,
    pub degree: usize,
}

impl LinearFit {
    pub fn eval(&self, v: &[f64]) -> f64 {
        let feats = poly_features(v, self.degree);
        feats
            .iter()
            .zip(self.coef.iter())
            .map(|(f, c)| f * c)
            .sum()
    }
}

/// Least squares of `y` on polynomial features of `v`.
pub fn fit_linear(vs: &[&[f64]], ys: &[f64], spec: &LearnerSpec) -> Result<LinearFit> {
    if vs.is_empty() || vs.len() != ys.len() {
        return Err(Error::invalid("least squares needs matching nonempty inputs"));
    }
    let feats: Vec<Vec<f64>> = vs.iter().map(|v| poly_features(v, spec.degree)).collect();
    let p = feats[0].len();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for (f, &y) in feats.iter().zip(ys.iter()) {
        for i in 0..p {
            rhs[i] += f[i] * y;
            for j in 0..p {
                gram[(i, j)] += f[i] * f[j];
            }
        }
    }
    let (coef, _) = solve_spd(&gram, &rhs, spec.regularization);
    Ok(LinearFit {
        coef,
        degree: spec.degree,
    })
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Unpenalized Bernoulli log-likelihood and its gradient at `coef`.
/// Exposed for the finite-difference gradient check.
pub fn logistic_loglik_grad(
    feats: &[Vec<f64>],
    ys: &[bool],
    coef: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let p = coef.len();
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    for (f, &y) in feats.iter().zip(ys.iter()) {
        let z: f64 = f.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
        let mu = sigmoid(z);
        ll += if y { log_sigmoid(z) } else { log_sigmoid(-z) };
        let r = (y as u8 as f64) - mu;
        for i in 0..p {
            grad[i] += r * f[i];
        }
    }
    (ll, grad)
}

/// Fitted binary logistic regression.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: DVector<f64>,
    pub degree: usize,
    pub converged: bool,
}

impl LogisticFit {
    pub fn prob(&self, v: &[f64]) -> f64 {
        let feats = poly_features(v, self.degree);
        let z: f64 = feats
            .iter()
            .zip(self.coef.iter())
            .map(|(a, b)| a * b)
            .sum();
        sigmoid(z)
    }
}

/// Binary logistic regression by damped Newton with ridge.
pub fn fit_logistic(vs: &[&[f64]], ys: &[bool], spec: &LearnerSpec) -> Result<LogisticFit> {
    if vs.is_empty() || vs.len() != ys.len() {
        return Err(Error::invalid("logistic fit needs matching nonempty inputs"));
    }
    let feats: Vec<Vec<f64>> = vs.iter().map(|v| poly_features(v, spec.degree)).collect();
    let n = feats.len() as f64;
    let p = feats[0].len();
    // Per-observation objective; the ridge applies on the same scale.
    let ridge = spec.regularization + BASE_RIDGE;
    let mut coef = DVector::zeros(p);
    let penalized = |c: &DVector<f64>| {
        let (ll, _) = logistic_loglik_grad(&feats, ys, c);
        -ll / n + 0.5 * ridge * c.norm_squared()
    };
    let grad_at = |c: &DVector<f64>| {
        let (_, grad_ll) = logistic_loglik_grad(&feats, ys, c);
        ridge * c - grad_ll / n
    };
    let mut obj = penalized(&coef);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let grad = grad_at(&coef);
        if grad.amax() < NEWTON_GRAD_TOL {
            converged = true;
            break;
        }
        let mut hess = DMatrix::zeros(p, p);
        for f in &feats {
            let z: f64 = f.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
            let mu = sigmoid(z);
            let wgt = (mu * (1.0 - mu)).max(1e-12) / n;
            for i in 0..p {
                for j in 0..p {
                    hess[(i, j)] += wgt * f[i] * f[j];
                }
            }
        }
        let (step, _) = solve_spd(&hess, &grad, ridge);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &coef - scale * &step;
            let cand_obj = penalized(&cand);
            if cand_obj <= obj {
                coef = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        converged = grad_at(&coef).amax() < NEWTON_GRAD_TOL;
    }
    Ok(LogisticFit {
        coef,
        degree: spec.degree,
        converged,
    })
}

/// Fitted multinomial logistic regression over `K` classes (class 0 is the
/// reference).
#[derive(Debug, Clone)]
pub struct MultinomialFit {
    /// `(K-1) x p`; row k holds the coefficients of class k+1.
    pub coef: DMatrix<f64>,
    pub degree: usize,
    pub num_classes: usize,
    pub converged: bool,
}

impl MultinomialFit {
    pub fn probs(&self, v: &[f64]) -> Vec<f64> {
        let feats = poly_features(v, self.degree);
        let mut logits = Vec::with_capacity(self.num_classes);
        logits.push(0.0);
        for k in 0..self.num_classes - 1 {
            let z: f64 = feats
                .iter()
                .enumerate()
                .map(|(j, f)| f * self.coef[(k, j)])
                .sum();
            logits.push(z);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / denom).collect()
    }
}

/// Multinomial logistic regression by damped Newton with ridge.
pub fn fit_multinomial(
    vs: &[&[f64]],
    classes: &[usize],
    num_classes: usize,
    spec: &LearnerSpec,
) -> Result<MultinomialFit> {
    if vs.is_empty() || vs.len() != classes.len() {
        return Err(Error::invalid("multinomial fit needs matching nonempty inputs"));
    }
    if num_classes < 2 {
        // Single class: the fitted distribution is the point mass.
        return Ok(MultinomialFit {
            coef: DMatrix::zeros(0, 1),
            degree: spec.degree,
            num_classes: 1,
            converged: true,
        });
    }
    if classes.iter().any(|&c| c >= num_classes) {
        return Err(Error::invalid("class label outside range"));
    }
    let feats: Vec<Vec<f64>> = vs.iter().map(|v| poly_features(v, spec.degree)).collect();
    let n = feats.len() as f64;
    let p = feats[0].len();
    let km1 = num_classes - 1;
    let dim = km1 * p;
    let ridge = spec.regularization + BASE_RIDGE;

    let class_probs = |theta: &DVector<f64>, f: &[f64]| -> Vec<f64> {
        let mut logits = Vec::with_capacity(num_classes);
        logits.push(0.0);
        for k in 0..km1 {
            let z: f64 = f
                .iter()
                .enumerate()
                .map(|(j, x)| x * theta[k * p + j])
                .sum();
            logits.push(z);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / denom).collect()
    };
    let penalized = |theta: &DVector<f64>| -> f64 {
        let mut ll = 0.0;
        for (f, &c) in feats.iter().zip(classes.iter()) {
            let probs = class_probs(theta, f);
            ll += probs[c].max(1e-300).ln();
        }
        -ll / n + 0.5 * ridge * theta.norm_squared()
    };

    let mut theta = DVector::zeros(dim);
    let mut obj = penalized(&theta);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for (f, &c) in feats.iter().zip(classes.iter()) {
            let probs = class_probs(&theta, f);
            for k in 0..km1 {
                let rk = (if c == k + 1 { 1.0 } else { 0.0 }) - probs[k + 1];
                for j in 0..p {
                    grad[k * p + j] -= rk * f[j] / n;
                }
                for l in 0..km1 {
                    let wkl = probs[k + 1] * ((if k == l { 1.0 } else { 0.0 }) - probs[l + 1]) / n;
                    if wkl == 0.0 {
                        continue;
                    }
                    for j in 0..p {
                        for j2 in 0..p {
                            hess[(k * p + j, l * p + j2)] += wkl * f[j] * f[j2];
                        }
                    }
                }
            }
        }
        grad += ridge * &theta;
        if grad.amax() < NEWTON_GRAD_TOL {
            converged = true;
            break;
        }
        let (step, _) = solve_spd(&hess, &grad, ridge);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta - scale * &step;
            let cand_obj = penalized(&cand);
            if cand_obj <= obj {
                theta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        // Line searches can stall at the optimum; re-check the gradient.
        let mut grad = DVector::zeros(dim);
        for (f, &c) in feats.iter().zip(classes.iter()) {
            let probs = class_probs(&theta, f);
            for k in 0..km1 {
                let rk = (if c == k + 1 { 1.0 } else { 0.0 }) - probs[k + 1];
                for j in 0..p {
                    grad[k * p + j] -= rk * f[j] / n;
                }
            }
        }
        grad += ridge * &theta;
        converged = grad.amax() < NEWTON_GRAD_TOL;
    }
    let mut coef = DMatrix::zeros(km1, p);
    for k in 0..km1 {
        for j in 0..p {
            coef[(k, j)] = theta[k * p + j];
        }
    }
    Ok(MultinomialFit {
        coef,
        degree: spec.degree,
        num_classes,
        converged,
    })
}

/// Nadaraya-Watson regression with a Gaussian product kernel.
#[derive(Debug, Clone)]
pub struct KernelFit {
    train_v: Vec<Vec<f64>>,
    train_y: Vec<f64>,
    inv_bw: Vec<f64>,
    fallback: f64,
}

impl KernelFit {
    pub fn eval(&self, v: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (tv, &ty) in self.train_v.iter().zip(self.train_y.iter()) {
            let mut q = 0.0;
            for ((a, b), ib) in tv.iter().zip(v.iter()).zip(self.inv_bw.iter()) {
                let z = (a - b) * ib;
                q += z * z;
            }
            let w = (-0.5 * q).exp();
            num += w * ty;
            den += w;
        }
        if den > 1e-300 {
            num / den
        } else {
            self.fallback
        }
    }
}

/// Fit a kernel smoother of `y` on `v`. Bandwidths scale each coordinate's
/// standard deviation by `n^(-1/5)` times the spec multiplier.
pub fn fit_kernel(vs: &[&[f64]], ys: &[f64], spec: &LearnerSpec) -> Result<KernelFit> {
    if vs.is_empty() || vs.len() != ys.len() {
        return Err(Error::invalid("kernel fit needs matching nonempty inputs"));
    }
    let n = vs.len() as f64;
    let d = vs[0].len();
    let mult = spec.bandwidth.unwrap_or(1.06);
    let mut inv_bw = Vec::with_capacity(d);
    for j in 0..d {
        let mean = vs.iter().map(|v| v[j]).sum::<f64>() / n;
        let var = vs.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-9);
        let bw = (mult * sd * n.powf(-0.2)).max(1e-9);
        inv_bw.push(1.0 / bw);
    }
    let fallback = ys.iter().sum::<f64>() / n;
    Ok(KernelFit {
        train_v: vs.iter().map(|v| v.to_vec()).collect(),
        train_y: ys.to_vec(),
        inv_bw,
        fallback,
    })
}
