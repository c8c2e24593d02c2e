//! Data-driven calibration of the sensitivity parameter: hold out discrete
//! V columns as pseudo-W, compare the effect conditional on the reduced and
//! full covariate sets, and aggregate the per-unit gaps over all subsets of
//! the chosen size.

use serde::{Deserialize, Serialize};

use crate::data_model::Dataset;
use crate::error::{Error, Result};
use crate::learners::{fit_kernel, fit_linear, LearnerSpec};

/// Reduction from per-unit absolute gaps to one number per subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetStatistic {
    MeanAbs,
    Quantile(f64),
}

impl SubsetStatistic {
    fn reduce(&self, gaps: &mut [f64]) -> f64 {
        match self {
            SubsetStatistic::MeanAbs => gaps.iter().sum::<f64>() / gaps.len().max(1) as f64,
            SubsetStatistic::Quantile(q) => {
                gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if gaps.is_empty() {
                    return 0.0;
                }
                let pos = q.clamp(0.0, 1.0) * (gaps.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                if lo == hi {
                    gaps[lo]
                } else {
                    let w = pos - lo as f64;
                    gaps[lo] * (1.0 - w) + gaps[hi] * w
                }
            }
        }
    }
}

/// One held-out subset and its statistic value.
#[derive(Debug, Clone, Serialize)]
pub struct SubsetRow {
    pub subset_id: usize,
    pub heldout: Vec<String>,
    pub value: f64,
}

/// The benchmarking distribution and its mean.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaBenchmark {
    pub rows: Vec<SubsetRow>,
    pub delta_hat: f64,
    pub statistic: SubsetStatistic,
    pub holdout_size: usize,
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

/// Fit per-arm outcome regressions on the study units using the selected V
/// columns and return the implied effect function.
fn cate_on_columns(
    dataset: &Dataset,
    columns: &[usize],
    learner: &LearnerSpec,
) -> Result<impl Fn(&[f64]) -> f64> {
    let mut fits = Vec::with_capacity(2);
    for arm in [false, true] {
        let mut vs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in &dataset.samples {
            if s.e && s.a_treat == Some(arm) {
                vs.push(columns.iter().map(|&j| s.v[j]).collect());
                ys.push(s.y.unwrap());
            }
        }
        if vs.is_empty() {
            return Err(Error::Positivity(format!(
                "no study samples with A={}",
                arm as u8
            )));
        }
        let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        if learner.is_kernel() {
            fits.push(KernelOrLinear::Kernel(fit_kernel(&refs, &ys, learner)?));
        } else {
            fits.push(KernelOrLinear::Linear(fit_linear(&refs, &ys, learner)?));
        }
    }
    let cols: Vec<usize> = columns.to_vec();
    let mu1 = fits.pop().unwrap();
    let mu0 = fits.pop().unwrap();
    Ok(move |v: &[f64]| {
        let sub: Vec<f64> = cols.iter().map(|&j| v[j]).collect();
        mu1.eval(&sub) - mu0.eval(&sub)
    })
}

enum KernelOrLinear {
    Linear(crate::learners::LinearFit),
    Kernel(crate::learners::KernelFit),
}

impl KernelOrLinear {
    fn eval(&self, v: &[f64]) -> f64 {
        match self {
            KernelOrLinear::Linear(f) => f.eval(v),
            KernelOrLinear::Kernel(f) => f.eval(v),
        }
    }
}

/// Benchmark the sensitivity parameter by holding out each size-`holdout_size`
/// subset of the discrete V columns as pseudo-W. For each subset, the effect
/// conditional on all of V and the effect conditional on the reduced set are
/// both fit on study data via outcome regressions, their absolute gap is
/// evaluated on target units, and the configured statistic reduces the gaps
/// to one number; `delta_hat` is the mean over subsets.
pub fn benchmark_delta(
    dataset: &Dataset,
    holdout_size: usize,
    learner: &LearnerSpec,
    statistic: SubsetStatistic,
    _seed: u64,
) -> Result<DeltaBenchmark> {
    dataset.ensure_estimable()?;
    if holdout_size == 0 {
        return Err(Error::invalid("holdout size must be >= 1"));
    }
    let eligible: Vec<usize> = (0..dataset.v_dim())
        .filter(|&j| dataset.columns.v_discrete.get(j).copied().unwrap_or(false))
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid(
            "no discrete V columns are eligible as pseudo-W",
        ));
    }
    if holdout_size > eligible.len() {
        return Err(Error::invalid(format!(
            "holdout size {holdout_size} exceeds the {} eligible discrete columns",
            eligible.len()
        )));
    }
    let all_columns: Vec<usize> = (0..dataset.v_dim()).collect();
    let full_cate = cate_on_columns(dataset, &all_columns, learner)?;
    let target = dataset.target_indices();

    let mut rows = Vec::new();
    for (subset_id, subset) in combinations(eligible.len(), holdout_size).iter().enumerate() {
        let heldout_idx: Vec<usize> = subset.iter().map(|&i| eligible[i]).collect();
        let kept: Vec<usize> = all_columns
            .iter()
            .copied()
            .filter(|j| !heldout_idx.contains(j))
            .collect();
        if kept.is_empty() {
            return Err(Error::invalid("holdout would remove every V column"));
        }
        let restricted_cate = cate_on_columns(dataset, &kept, learner)?;
        let mut gaps: Vec<f64> = target
            .iter()
            .map(|&i| {
                let v = &dataset.samples[i].v;
                (full_cate(v) - restricted_cate(v)).abs()
            })
            .collect();
        let value = statistic.reduce(&mut gaps);
        rows.push(SubsetRow {
            subset_id,
            heldout: heldout_idx
                .iter()
                .map(|&j| dataset.columns.v_names[j].clone())
                .collect(),
            value,
        });
    }
    let delta_hat = rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
    Ok(DeltaBenchmark {
        rows,
        delta_hat,
        statistic,
        holdout_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{ColumnMeta, ObservedSample, OutcomeBounds, WSupport};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    /// Two continuous + two discrete V columns; treatment effect carries an
    /// optional discrete-column term.
    fn benchmark_dataset(discrete_effect: f64) -> Dataset {
        let support = WSupport::from_levels(vec![vec![0.0], vec![1.0]]).unwrap();
        let mut samples = Vec::new();
        let mut rng = crate::rng::seeded_rng(10);
        for i in 0..4000 {
            let v = vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_bool(0.5) as u8 as f64,
                rng.gen_bool(0.5) as u8 as f64,
            ];
            if i % 4 == 0 {
                samples.push(ObservedSample::target(v, rng.gen_range(0..2)));
            } else {
                let a = rng.gen_bool(0.5);
                let cate = 0.5 * v[0] + discrete_effect * (v[2] - 0.5);
                let y = 0.2 * v[1] + if a { cate } else { 0.0 };
                samples.push(ObservedSample::study(v, a, y));
            }
        }
        let mut columns = ColumnMeta::unnamed(4, 1);
        columns.v_discrete = vec![false, false, true, true];
        Dataset::new(
            samples,
            OutcomeBounds::new(-4.0, 4.0).unwrap(),
            support,
            columns,
        )
    }

    #[test]
    fn zero_heterogeneity_in_heldout_columns_gives_near_zero_delta() {
        let d = benchmark_dataset(0.0);
        let b = benchmark_delta(&d, 1, &LearnerSpec::linear(1), SubsetStatistic::MeanAbs, 0)
            .unwrap();
        assert_eq!(b.rows.len(), 2);
        assert!(b.delta_hat < 0.02, "delta_hat = {}", b.delta_hat);
    }

    #[test]
    fn heldout_effect_is_detected() {
        let d = benchmark_dataset(0.8);
        let b = benchmark_delta(&d, 1, &LearnerSpec::linear(1), SubsetStatistic::MeanAbs, 0)
            .unwrap();
        // Holding out the effect-carrying column yields a large gap; the
        // inert column a small one. The mean sits in between.
        let values: Vec<f64> = b.rows.iter().map(|r| r.value).collect();
        assert!(values.iter().cloned().fold(f64::MIN, f64::max) > 0.15);
        assert!(b.delta_hat > 0.05);
    }

    #[test]
    fn full_holdout_is_a_single_subset() {
        let d = benchmark_dataset(0.3);
        let b = benchmark_delta(&d, 2, &LearnerSpec::linear(1), SubsetStatistic::MeanAbs, 0)
            .unwrap();
        assert_eq!(b.rows.len(), 1);
        assert_abs_diff_eq!(b.delta_hat, b.rows[0].value, epsilon = 1e-15);
    }

    #[test]
    fn subset_count_is_binomial() {
        let d = benchmark_dataset(0.3);
        let b = benchmark_delta(&d, 1, &LearnerSpec::linear(1), SubsetStatistic::MeanAbs, 0)
            .unwrap();
        assert_eq!(b.rows.len(), 2); // C(2,1)
    }

    #[test]
    fn max_quantile_dominates_mean_abs() {
        let d = benchmark_dataset(0.6);
        let mean = benchmark_delta(&d, 1, &LearnerSpec::linear(1), SubsetStatistic::MeanAbs, 0)
            .unwrap();
        let maxi = benchmark_delta(
            &d,
            1,
            &LearnerSpec::linear(1),
            SubsetStatistic::Quantile(1.0),
            0,
        )
        .unwrap();
        assert!(maxi.delta_hat >= mean.delta_hat);
    }

    #[test]
    fn errors_on_bad_holdout_configuration() {
        let d = benchmark_dataset(0.3);
        assert!(benchmark_delta(&d, 0, &LearnerSpec::linear(1), SubsetStatistic::MeanAbs, 0).is_err());
        assert!(benchmark_delta(&d, 3, &LearnerSpec::linear(1), SubsetStatistic::MeanAbs, 0).is_err());
        let mut no_discrete = d.clone();
        no_discrete.columns.v_discrete = vec![false; 4];
        assert!(benchmark_delta(
            &no_discrete,
            1,
            &LearnerSpec::linear(1),
            SubsetStatistic::MeanAbs,
            0
        )
        .is_err());
    }
}
