//! Monte Carlo experiment drivers: the error-injection grid, the
//! entropy/width sweep, and the sensitivity-parameter sweep. Each driver
//! emits a tidy table of `(experiment, seed, cell, estimator, metric,
//! value)` rows plus a metadata document holding the configuration and the
//! drawn coefficients.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::baseline_dr::fit_dr_restricted;
use crate::bounds::{sensitivity_bounds, theorem1_bounds, SensitivityLevel};
use crate::data_model::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{plugin_beta, solve_bias_corrected, ModelSpec};
use crate::learners::LearnerSpec;
use crate::nuisance::{
    fit_all, perturb, NoiseShape, NuisanceSet, PerturbTarget, PerturbationSpec,
};
use crate::rng::{derive_seed, stream_rng};
use crate::simulation::{generate_with, DgpCoefficients, DgpConfig};

/// One tidy result row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub cell: String,
    pub estimator: String,
    pub metric: String,
    pub value: f64,
}

/// Tidy rows plus a metadata sidecar document.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub metadata: serde_json::Value,
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn mad(beta: &[f64], oracle: &[f64]) -> f64 {
    beta.iter()
        .zip(oracle.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / beta.len() as f64
}

fn metadata_for(config: &DgpConfig, coefs: &DgpCoefficients, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "config": config,
        "coefficients": coefs,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "extra": extra,
    })
}

/// Error-injection grid behind the plug-in / bias-corrected comparison: for
/// every `(eps_outcome, eps_propensity)` cell and seed, perturb the oracle
/// nuisances, run both estimators on the same draw, and record each one's
/// mean absolute deviation from the oracle projection.
pub fn run_error_grid(
    config: &DgpConfig,
    grid: &[(f64, f64)],
    seeds: &[u64],
    spec: &ModelSpec,
    oracle_beta: &[f64],
) -> Result<ExperimentResult> {
    let coefs = DgpCoefficients::draw(config);
    let cells: Vec<(usize, &(f64, f64))> = grid.iter().enumerate().collect();
    let per_seed: Vec<Result<Vec<ResultRow>>> = seeds
        .par_iter()
        .map(|&seed| {
            let (dataset, truth) = generate_with(config, &coefs, seed)?;
            let mut rows = Vec::with_capacity(cells.len() * 2);
            for &(cell_idx, &(eps_mu, eps_pi)) in &cells {
                let mut eta = truth.oracle.clone();
                let pseed = derive_seed(seed, cell_idx as u64);
                if eps_mu > 0.0 {
                    let spec_mu = PerturbationSpec {
                        targets: vec![PerturbTarget::Mu0, PerturbTarget::Mu1],
                        magnitude: eps_mu,
                        shape: NoiseShape::SmoothFunctionOfV,
                        seed: pseed,
                    };
                    eta = perturb(&eta, &spec_mu, &dataset)?.0;
                }
                if eps_pi > 0.0 {
                    let spec_pi = PerturbationSpec {
                        targets: vec![PerturbTarget::TreatmentPropensity, PerturbTarget::Rho0],
                        magnitude: eps_pi,
                        shape: NoiseShape::SmoothFunctionOfV,
                        seed: derive_seed(pseed, 1),
                    };
                    eta = perturb(&eta, &spec_pi, &dataset)?.0;
                }
                let cell = format!("eps_mu={eps_mu},eps_pi={eps_pi}");
                let plugin = plugin_beta(&dataset, &eta, spec)?;
                let bc = solve_bias_corrected(&dataset, &eta, spec)?;
                rows.push(ResultRow {
                    experiment: "error_grid".into(),
                    seed,
                    cell: cell.clone(),
                    estimator: "plugin".into(),
                    metric: "beta_mad".into(),
                    value: mad(&plugin.beta, oracle_beta),
                });
                rows.push(ResultRow {
                    experiment: "error_grid".into(),
                    seed,
                    cell,
                    estimator: "bias-corrected".into(),
                    metric: "beta_mad".into(),
                    value: mad(&bc.beta, oracle_beta),
                });
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    Ok(ExperimentResult {
        metadata: metadata_for(config, &coefs, json!({"oracle_beta": oracle_beta, "grid": grid})),
        rows,
    })
}

/// Entropy sweep: vary how predictable W is from V and record the mean
/// entropy of the conditional W distribution against the mean worst-case
/// bound width, both under oracle nuisances.
pub fn run_entropy_sweep(
    config: &DgpConfig,
    scales: &[f64],
    seeds: &[u64],
) -> Result<ExperimentResult> {
    let jobs: Vec<(f64, u64)> = scales
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let rows: Vec<Result<Vec<ResultRow>>> = jobs
        .par_iter()
        .map(|&(scale, seed)| {
            let scaled = config.clone().with_scale(scale);
            let coefs = DgpCoefficients::draw(&scaled);
            let (dataset, truth) = generate_with(&scaled, &coefs, seed)?;
            let mut entropy_sum = 0.0;
            let mut width_sum = 0.0;
            let mut n = 0.0;
            for idx in dataset.target_indices() {
                let s = &dataset.samples[idx];
                let dist = truth.oracle.nu_dist(&s.v);
                entropy_sum += -dist
                    .iter()
                    .filter(|p| **p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>();
                let w = s.w.expect("target sample has W");
                let pair = theorem1_bounds(
                    truth.oracle.delta_mu(&s.v),
                    truth.oracle.nu(&s.v, w),
                    &dataset.bounds,
                )?;
                width_sum += pair.width();
                n += 1.0;
            }
            let cell = format!("scale={scale}");
            Ok(vec![
                ResultRow {
                    experiment: "entropy_sweep".into(),
                    seed,
                    cell: cell.clone(),
                    estimator: "oracle".into(),
                    metric: "mean_entropy".into(),
                    value: entropy_sum / n,
                },
                ResultRow {
                    experiment: "entropy_sweep".into(),
                    seed,
                    cell,
                    estimator: "oracle".into(),
                    metric: "mean_width".into(),
                    value: width_sum / n,
                },
            ])
        })
        .collect();
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    let coefs = DgpCoefficients::draw(config);
    Ok(ExperimentResult {
        metadata: metadata_for(config, &coefs, json!({"scales": scales})),
        rows: out,
    })
}

/// Per-unit cross-fitted nuisance views of one draw: each unit is evaluated
/// under the nuisances fit on the complementary fold.
struct CrossfittedView {
    fold_of: Vec<u8>,
    etas: [NuisanceSet; 2],
}

fn crossfit_nuisances(dataset: &Dataset, learner: &LearnerSpec, seed: u64) -> Result<CrossfittedView> {
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut stream_rng(seed, 0xF01d));
    let half = n / 2;
    let mut fold_of = vec![0u8; n];
    for &i in &order[half..] {
        fold_of[i] = 1;
    }
    let subset = |fold: u8| -> Dataset {
        Dataset {
            samples: (0..n)
                .filter(|&i| fold_of[i] == fold)
                .map(|i| dataset.samples[i].clone())
                .collect(),
            bounds: dataset.bounds,
            w_support: dataset.w_support.clone(),
            columns: dataset.columns.clone(),
            intercept: dataset.intercept,
        }
    };
    let d0 = subset(0);
    let d1 = subset(1);
    for (name, d) in [("fold 0", &d0), ("fold 1", &d1)] {
        if d.target_indices().is_empty() || d.study_indices().is_empty() {
            return Err(Error::DegenerateSplit(format!("{name} lost a population")));
        }
    }
    Ok(CrossfittedView {
        fold_of,
        etas: [fit_all(&d0, learner)?, fit_all(&d1, learner)?],
    })
}

/// Light percentile CI of a mean via unit resampling.
fn mean_ci(values: &[f64], seed: u64) -> (f64, f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = stream_rng(seed, 0xB007);
    let b = 200;
    let mut means: Vec<f64> = (0..b)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                s += values[rng.gen_range(0..n)];
            }
            s / n as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = means[((b as f64 - 1.0) * 0.025).round() as usize];
    let hi = means[((b as f64 - 1.0) * 0.975).round() as usize];
    (mean, lo, hi)
}

/// Sensitivity sweep behind the coverage comparison: per `delta`, the mean
/// estimated bounds with resampling CIs, the fraction of target units whose
/// true effect falls inside the bounds, the naive bounds that use only the
/// sensitivity assumption (width `2 delta`), and the restricted-effect DR
/// baseline's CI coverage of the true fully conditional effect.
pub fn run_delta_sweep(
    config: &DgpConfig,
    deltas: &[f64],
    seeds: &[u64],
    learner: &LearnerSpec,
    include_true_delta: bool,
) -> Result<ExperimentResult> {
    let coefs = DgpCoefficients::draw(config);
    let per_seed: Vec<Result<Vec<ResultRow>>> = seeds
        .par_iter()
        .map(|&seed| {
            let (dataset, truth) = generate_with(config, &coefs, seed)?;
            let view = crossfit_nuisances(&dataset, learner, seed)?;
            let target = dataset.target_indices();

            let mut rows = Vec::new();
            rows.push(ResultRow {
                experiment: "delta_sweep".into(),
                seed,
                cell: "truth".into(),
                estimator: "oracle".into(),
                metric: "true_delta_max".into(),
                value: truth.true_delta_max,
            });
            rows.push(ResultRow {
                experiment: "delta_sweep".into(),
                seed,
                cell: "truth".into(),
                estimator: "oracle".into(),
                metric: "true_delta_mean".into(),
                value: truth.true_delta_mean,
            });

            // Restricted-effect baseline, independent of delta.
            let baseline = fit_dr_restricted(&dataset, learner, derive_seed(seed, 0xD4))?;
            let mut covered = 0usize;
            for &i in &target {
                let (_, iv) = baseline.predict_interval(&dataset.samples[i].v);
                if truth.cate[i] >= iv.lower && truth.cate[i] <= iv.upper {
                    covered += 1;
                }
            }
            rows.push(ResultRow {
                experiment: "delta_sweep".into(),
                seed,
                cell: "baseline".into(),
                estimator: "dr-restricted".into(),
                metric: "ci_coverage".into(),
                value: covered as f64 / target.len() as f64,
            });

            let mut cells: Vec<(String, f64)> = deltas
                .iter()
                .map(|&d| (format!("delta={d}"), d))
                .collect();
            if include_true_delta {
                cells.push(("delta=true".into(), truth.true_delta_max));
            }
            for (cell, delta) in cells {
                let level = SensitivityLevel::new(delta)?;
                let mut lows = Vec::with_capacity(target.len());
                let mut ups = Vec::with_capacity(target.len());
                let mut cover = 0usize;
                let mut naive_cover = 0usize;
                let mut naive_lows = Vec::with_capacity(target.len());
                let mut naive_ups = Vec::with_capacity(target.len());
                for &i in &target {
                    let s = &dataset.samples[i];
                    let eta = &view.etas[1 - view.fold_of[i] as usize];
                    let w = s.w.expect("target sample has W");
                    let dmu = eta.delta_mu(&s.v);
                    let nu = eta.nu(&s.v, w);
                    let pair = sensitivity_bounds(dmu, nu, &dataset.bounds, level)?;
                    lows.push(pair.gamma_lower);
                    ups.push(pair.gamma_upper);
                    if pair.contains(truth.cate[i]) {
                        cover += 1;
                    }
                    naive_lows.push(dmu - delta);
                    naive_ups.push(dmu + delta);
                    if (truth.cate[i] - dmu).abs() <= delta {
                        naive_cover += 1;
                    }
                }
                let nt = target.len() as f64;
                let (mean_low, low_lo, low_hi) = mean_ci(&lows, derive_seed(seed, 0xA0));
                let (mean_up, up_lo, up_hi) = mean_ci(&ups, derive_seed(seed, 0xA1));
                let width =
                    lows.iter().zip(ups.iter()).map(|(l, u)| u - l).sum::<f64>() / nt;
                let push = |rows: &mut Vec<ResultRow>, estimator: &str, metric: &str, value: f64| {
                    rows.push(ResultRow {
                        experiment: "delta_sweep".into(),
                        seed,
                        cell: cell.clone(),
                        estimator: estimator.into(),
                        metric: metric.into(),
                        value,
                    });
                };
                push(&mut rows, "ecological", "mean_gamma_lower", mean_low);
                push(&mut rows, "ecological", "mean_gamma_upper", mean_up);
                push(&mut rows, "ecological", "mean_lower_ci_lower", low_lo);
                push(&mut rows, "ecological", "mean_lower_ci_upper", low_hi);
                push(&mut rows, "ecological", "mean_upper_ci_lower", up_lo);
                push(&mut rows, "ecological", "mean_upper_ci_upper", up_hi);
                push(&mut rows, "ecological", "mean_width", width);
                push(&mut rows, "ecological", "coverage", cover as f64 / nt);
                push(
                    &mut rows,
                    "sensitivity-only",
                    "mean_gamma_lower",
                    naive_lows.iter().sum::<f64>() / nt,
                );
                push(
                    &mut rows,
                    "sensitivity-only",
                    "mean_gamma_upper",
                    naive_ups.iter().sum::<f64>() / nt,
                );
                push(&mut rows, "sensitivity-only", "mean_width", 2.0 * delta);
                push(
                    &mut rows,
                    "sensitivity-only",
                    "coverage",
                    naive_cover as f64 / nt,
                );
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    Ok(ExperimentResult {
        metadata: metadata_for(config, &coefs, json!({"deltas": deltas})),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn spearman_handles_monotone_and_ties() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 20.0, 30.0, 40.0];
        assert_abs_diff_eq!(spearman(&xs, &ys), 1.0, epsilon = 1e-12);
        let ys_rev = [4.0, 3.0, 2.0, 1.0];
        assert_abs_diff_eq!(spearman(&xs, &ys_rev), -1.0, epsilon = 1e-12);
        let with_ties = [1.0, 1.0, 2.0, 2.0];
        let corr = spearman(&xs, &with_ties);
        assert!(corr > 0.8);
    }

    #[test]
    fn error_grid_row_cardinality() {
        let config = DgpConfig::default().with_seed(21).with_n(600);
        let spec = ModelSpec::lower();
        let oracle = vec![0.0; 10];
        let grid = [(0.0, 0.0), (0.2, 0.0)];
        let result = run_error_grid(&config, &grid, &[1, 2, 3], &spec, &oracle).unwrap();
        assert_eq!(result.rows.len(), 2 * 3 * 2);
    }

    #[test]
    fn entropy_sweep_reports_known_limits() {
        let config = DgpConfig::default().with_seed(22).with_n(800);
        let result = run_entropy_sweep(&config, &[0.0], &[5]).unwrap();
        let entropy = result
            .rows
            .iter()
            .find(|r| r.metric == "mean_entropy")
            .unwrap()
            .value;
        // Three independent fair coins: entropy = 3 ln 2 per unit.
        assert_abs_diff_eq!(entropy, 3.0 * std::f64::consts::LN_2, epsilon = 1e-9);
    }

    #[test]
    fn delta_sweep_zero_delta_has_zero_width() {
        let config = DgpConfig::default().with_seed(23).with_n(1200);
        let result = run_delta_sweep(
            &config,
            &[0.0],
            &[4],
            &LearnerSpec::linear(1),
            false,
        )
        .unwrap();
        let width = result
            .rows
            .iter()
            .find(|r| r.estimator == "ecological" && r.metric == "mean_width")
            .unwrap()
            .value;
        assert_abs_diff_eq!(width, 0.0, epsilon = 1e-10);
        let lo = result
            .rows
            .iter()
            .find(|r| r.estimator == "ecological" && r.metric == "mean_gamma_lower")
            .unwrap()
            .value;
        let hi = result
            .rows
            .iter()
            .find(|r| r.estimator == "ecological" && r.metric == "mean_gamma_upper")
            .unwrap()
            .value;
        assert_abs_diff_eq!(lo, hi, epsilon = 1e-10);
    }
}
