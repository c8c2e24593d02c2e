//! Pointwise partial-identification bounds on the fully conditional
//! treatment effect.
//!
//! The worst-case bounds at a profile `(v, w)` are
//!
//! ```text
//! tau_l = (dmu - (b-a)(1-nu)) / nu        gamma_l = max(tau_l, a-b)
//! tau_u = (dmu - (a-b)(1-nu)) / nu        gamma_u = min(tau_u, b-a)
//! ```
//!
//! with `dmu = mu_1(v) - mu_0(v)` and `nu = P(W=w | V=v, E=0)`. The
//! sensitivity model asserts the fully conditional effect differs from the
//! restricted effect by at most `delta`; its bounds replace the worst-case
//! constants by `dmu ± delta` and are intersected with the worst-case bounds
//! so that both assumptions stay in force.

use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, OutcomeBounds};
use crate::error::{Error, Result};
use crate::nuisance::{NuisanceSet, DEFAULT_EPS_P};

/// Lower/upper bound pair at one covariate profile, with the unclipped
/// ratio-form values and flags telling whether the outer max/min was active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPair {
    pub gamma_lower: f64,
    pub gamma_upper: f64,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub clipped_lower: bool,
    pub clipped_upper: bool,
    /// Set when the conditioning cell probability fell below the default
    /// probability clip; the row is still usable, the caller decides.
    pub thin_cell: bool,
}

impl BoundPair {
    pub fn width(&self) -> f64 {
        self.gamma_upper - self.gamma_lower
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.gamma_lower && value <= self.gamma_upper
    }
}

/// Sensitivity parameter `delta >= 0` bounding how far the fully conditional
/// effect may drift from the restricted effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityLevel {
    pub delta: f64,
}

impl SensitivityLevel {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::invalid(format!(
                "sensitivity delta must be finite and >= 0, got {delta}"
            )));
        }
        Ok(SensitivityLevel { delta })
    }
}

fn check_nu(nu_vw: f64) -> Result<()> {
    if !(nu_vw > 0.0) {
        return Err(Error::EmptyCell(nu_vw));
    }
    if nu_vw > 1.0 {
        return Err(Error::invalid(format!("nu must lie in (0,1], got {nu_vw}")));
    }
    Ok(())
}

/// Worst-case bounds using only the boundedness of the outcome.
pub fn theorem1_bounds(delta_mu: f64, nu_vw: f64, bounds: &OutcomeBounds) -> Result<BoundPair> {
    check_nu(nu_vw)?;
    let range = bounds.range();
    let slack = 1.0 - nu_vw;
    let tau_lower = (delta_mu - range * slack) / nu_vw;
    let tau_upper = (delta_mu + range * slack) / nu_vw;
    let floor = -range;
    let ceiling = range;
    let clipped_lower = tau_lower < floor;
    let clipped_upper = tau_upper > ceiling;
    Ok(BoundPair {
        gamma_lower: tau_lower.max(floor),
        gamma_upper: tau_upper.min(ceiling),
        tau_lower,
        tau_upper,
        clipped_lower,
        clipped_upper,
        thin_cell: nu_vw < DEFAULT_EPS_P,
    })
}

/// Bounds under the sensitivity model at level `delta`, intersected with the
/// worst-case bounds (componentwise max of lowers, min of uppers).
pub fn sensitivity_bounds(
    delta_mu: f64,
    nu_vw: f64,
    bounds: &OutcomeBounds,
    level: SensitivityLevel,
) -> Result<BoundPair> {
    check_nu(nu_vw)?;
    let range = bounds.range();
    if level.delta > range {
        return Err(Error::invalid(format!(
            "delta {} exceeds the outcome range {}",
            level.delta, range
        )));
    }
    let slack = 1.0 - nu_vw;
    // Complement effects live in [dmu - delta, dmu + delta] under the model.
    let tau_lower = (delta_mu - (delta_mu + level.delta) * slack) / nu_vw;
    let tau_upper = (delta_mu - (delta_mu - level.delta) * slack) / nu_vw;
    let floor = delta_mu - level.delta;
    let ceiling = delta_mu + level.delta;
    let worst = theorem1_bounds(delta_mu, nu_vw, bounds)?;
    let gamma_lower = tau_lower.max(floor).max(worst.gamma_lower);
    let gamma_upper = tau_upper.min(ceiling).min(worst.gamma_upper);
    Ok(BoundPair {
        gamma_lower,
        gamma_upper,
        tau_lower,
        tau_upper,
        clipped_lower: gamma_lower > tau_lower,
        clipped_upper: gamma_upper < tau_upper,
        thin_cell: nu_vw < DEFAULT_EPS_P,
    })
}

/// Bounds at a profile, dispatching on whether a sensitivity level is set.
pub fn bounds_at(
    delta_mu: f64,
    nu_vw: f64,
    bounds: &OutcomeBounds,
    level: Option<SensitivityLevel>,
) -> Result<BoundPair> {
    match level {
        None => theorem1_bounds(delta_mu, nu_vw, bounds),
        Some(l) => sensitivity_bounds(delta_mu, nu_vw, bounds, l),
    }
}

/// One row of the pointwise sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    /// Index of the sample in the dataset.
    pub unit_id: usize,
    pub w_level: usize,
    pub nu: f64,
    pub pair: BoundPair,
}

/// Result of [`pointwise_bounds`]; per-row failures are collected rather than
/// aborting the sweep.
#[derive(Debug, Clone, Default)]
pub struct PointwiseBounds {
    pub rows: Vec<BoundRow>,
    pub failures: Vec<(usize, usize, String)>,
}

/// Evaluate the bounds for every target unit and every W level in support.
pub fn pointwise_bounds(
    dataset: &Dataset,
    eta: &NuisanceSet,
    level: Option<SensitivityLevel>,
) -> PointwiseBounds {
    let mut out = PointwiseBounds::default();
    for idx in dataset.target_indices() {
        let v = &dataset.samples[idx].v;
        let dmu = eta.delta_mu(v);
        let nu_dist = eta.nu_dist(v);
        for (w_level, &nu) in nu_dist.iter().enumerate() {
            match bounds_at(dmu, nu, &dataset.bounds, level) {
                Ok(pair) => out.rows.push(BoundRow {
                    unit_id: idx,
                    w_level,
                    nu,
                    pair,
                }),
                Err(e) => out.failures.push((idx, w_level, e.to_string())),
            }
        }
    }
    out
}

/// Bounds for each target unit at its observed W level only. This is the
/// per-unit series the experiment drivers average: sampling weights the
/// levels by their realized frequency.
pub fn bounds_at_observed(
    dataset: &Dataset,
    eta: &NuisanceSet,
    level: Option<SensitivityLevel>,
) -> Result<Vec<(usize, BoundPair)>> {
    let mut out = Vec::new();
    for idx in dataset.target_indices() {
        let s = &dataset.samples[idx];
        let w = s
            .w
            .ok_or_else(|| Error::invalid("target sample without W level"))?;
        let dmu = eta.delta_mu(&s.v);
        let nu = eta.nu(&s.v, w);
        out.push((idx, bounds_at(dmu, nu, &dataset.bounds, level)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_bounds() -> OutcomeBounds {
        OutcomeBounds::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn worst_case_hand_values() {
        let p = theorem1_bounds(0.3, 0.5, &unit_bounds()).unwrap();
        assert_abs_diff_eq!(p.tau_lower, -0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(p.gamma_lower, -0.4, epsilon = 1e-12);
        assert!(!p.clipped_lower);
        assert_abs_diff_eq!(p.tau_upper, 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(p.gamma_upper, 1.0, epsilon = 1e-12);
        assert!(p.clipped_upper);
    }

    #[test]
    fn full_cell_point_identifies() {
        for dmu in [-0.7, 0.0, 0.4] {
            let p = theorem1_bounds(dmu, 1.0, &unit_bounds()).unwrap();
            assert_abs_diff_eq!(p.gamma_lower, dmu, epsilon = 1e-12);
            assert_abs_diff_eq!(p.gamma_upper, dmu, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_range_hand_values() {
        let b = OutcomeBounds::new(-1.0, 1.0).unwrap();
        let p = theorem1_bounds(0.0, 0.25, &b).unwrap();
        assert_abs_diff_eq!(p.tau_lower, -6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.gamma_lower, -2.0, epsilon = 1e-12);
        assert!(p.clipped_lower);
        assert_abs_diff_eq!(p.gamma_upper, 2.0, epsilon = 1e-12);
        assert!(p.clipped_upper);
    }

    #[test]
    fn zero_cell_is_an_error_and_thin_cell_is_flagged() {
        assert!(matches!(
            theorem1_bounds(0.3, 0.0, &unit_bounds()),
            Err(Error::EmptyCell(_))
        ));
        assert!(matches!(
            theorem1_bounds(0.3, -0.2, &unit_bounds()),
            Err(Error::EmptyCell(_))
        ));
        let p = theorem1_bounds(0.3, 0.005, &unit_bounds()).unwrap();
        assert!(p.thin_cell);
    }

    #[test]
    fn sensitivity_at_zero_recovers_restricted_effect() {
        for dmu in [-0.9, -0.1, 0.0, 0.3, 0.99] {
            for nu in [0.05, 0.4, 1.0] {
                let p = sensitivity_bounds(dmu, nu, &unit_bounds(), SensitivityLevel::new(0.0).unwrap())
                    .unwrap();
                assert_abs_diff_eq!(p.gamma_lower, dmu, epsilon = 1e-10);
                assert_abs_diff_eq!(p.gamma_upper, dmu, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn sensitivity_hand_values() {
        let p = sensitivity_bounds(
            0.3,
            0.5,
            &unit_bounds(),
            SensitivityLevel::new(0.2).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(p.tau_lower, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(p.gamma_lower, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(p.tau_upper, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.gamma_upper, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sensitivity_at_full_range_recovers_worst_case_when_unconstrained() {
        // At delta = b - a with dmu = 0 the substitution reproduces the
        // worst-case formulas exactly.
        let level = SensitivityLevel::new(1.0).unwrap();
        for nu in [0.1, 0.5, 0.9] {
            let s = sensitivity_bounds(0.0, nu, &unit_bounds(), level).unwrap();
            let t = theorem1_bounds(0.0, nu, &unit_bounds()).unwrap();
            assert_abs_diff_eq!(s.gamma_lower, t.gamma_lower, epsilon = 1e-12);
            assert_abs_diff_eq!(s.gamma_upper, t.gamma_upper, epsilon = 1e-12);
        }
        // For dmu != 0 the sensitivity model still binds slightly; the
        // intersection keeps the result inside the worst-case interval.
        for dmu in [-0.5, 0.3] {
            for nu in [0.1, 0.5, 0.9] {
                let s = sensitivity_bounds(dmu, nu, &unit_bounds(), level).unwrap();
                let t = theorem1_bounds(dmu, nu, &unit_bounds()).unwrap();
                assert!(s.gamma_lower >= t.gamma_lower - 1e-12);
                assert!(s.gamma_upper <= t.gamma_upper + 1e-12);
            }
        }
    }

    #[test]
    fn width_is_monotone_in_nu() {
        let dmu = 0.2;
        let mut prev = f64::INFINITY;
        for i in 1..=40 {
            let nu = i as f64 / 40.0;
            let p = theorem1_bounds(dmu, nu, &unit_bounds()).unwrap();
            assert!(p.width() <= prev + 1e-12);
            prev = p.width();
        }
    }

    proptest! {
        #[test]
        fn sensitivity_intervals_nest(
            dmu in -0.99f64..0.99,
            nu in 0.02f64..1.0,
            d1 in 0.0f64..1.0,
            d2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let b = unit_bounds();
            let inner = sensitivity_bounds(dmu, nu, &b, SensitivityLevel::new(lo).unwrap()).unwrap();
            let outer = sensitivity_bounds(dmu, nu, &b, SensitivityLevel::new(hi).unwrap()).unwrap();
            prop_assert!(outer.gamma_lower <= inner.gamma_lower + 1e-10);
            prop_assert!(outer.gamma_upper >= inner.gamma_upper - 1e-10);
        }

        #[test]
        fn gamma_stays_in_effect_range(
            dmu in -0.99f64..0.99,
            nu in 0.01f64..1.0,
        ) {
            let p = theorem1_bounds(dmu, nu, &unit_bounds()).unwrap();
            prop_assert!(p.gamma_lower >= -1.0 - 1e-12);
            prop_assert!(p.gamma_upper <= 1.0 + 1e-12);
            prop_assert!(p.gamma_lower <= p.gamma_upper + 1e-12);
        }
    }

    #[test]
    fn pointwise_rows_are_symmetric_under_uniform_nu() {
        use crate::data_model::{ColumnMeta, Dataset, ObservedSample, WSupport};
        use std::sync::Arc;
        let support = WSupport::from_levels(vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]])
            .unwrap();
        let samples = vec![
            ObservedSample::target(vec![0.1], 0),
            ObservedSample::target(vec![0.7], 2),
            ObservedSample::study(vec![0.5], true, 0.6),
            ObservedSample::study(vec![0.5], false, 0.2),
        ];
        let d = Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 1.0).unwrap(),
            support,
            ColumnMeta::unnamed(1, 1),
        );
        let eta = NuisanceSet::new(
            Arc::new(|_| 0.2),
            Arc::new(|_| 0.5),
            Arc::new(|_| 0.5),
            Arc::new(|_| 0.5),
            Arc::new(|_| vec![0.25; 4]),
            d.bounds,
            4,
        );
        let sweep = pointwise_bounds(&d, &eta, None);
        assert!(sweep.failures.is_empty());
        assert_eq!(sweep.rows.len(), 8);
        let first = sweep.rows[0].pair;
        for row in &sweep.rows {
            assert_abs_diff_eq!(row.nu, 0.25, epsilon = 1e-12);
            assert_abs_diff_eq!(row.pair.gamma_lower, first.gamma_lower, epsilon = 1e-12);
            assert_abs_diff_eq!(row.pair.gamma_upper, first.gamma_upper, epsilon = 1e-12);
        }
    }
}
