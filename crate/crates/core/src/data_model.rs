//! Observed-data structure, outcome bounds, W-support enumeration and
//! covariate encoding.
//!
//! A sample from the study population (`e = 1`) carries common covariates
//! `v`, a binary treatment and a bounded outcome; a sample from the target
//! population (`e = 0`) carries `v` plus the index of its discrete `W` level.
//! No sample ever carries both, which is the coarsening pattern enforced by
//! [`Dataset::validate`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use rand::seq::SliceRandom;

/// Known outcome range `[a, b]`; every observed outcome must fall inside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBounds {
    pub a: f64,
    pub b: f64,
}

impl OutcomeBounds {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::invalid(format!(
                "outcome bounds require finite a < b, got [{a}, {b}]"
            )));
        }
        Ok(OutcomeBounds { a, b })
    }

    /// Width of the outcome range, `b - a`.
    pub fn range(&self) -> f64 {
        self.b - self.a
    }

    /// The implied effect range `[a - b, b - a]`.
    pub fn effect_range(&self) -> (f64, f64) {
        (self.a - self.b, self.b - self.a)
    }

    pub fn clip_outcome(&self, y: f64) -> f64 {
        y.clamp(self.a, self.b)
    }

    pub fn clip_effect(&self, t: f64) -> f64 {
        t.clamp(self.a - self.b, self.b - self.a)
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.a && y <= self.b
    }
}

/// Enumerated support of the discrete covariates `W`.
///
/// Levels are stored in lexicographic order of their raw value vectors so
/// that sums over `w` are reproducible across runs. `encode` maps a level to
/// the numeric block that enters the joint covariate vector: binary
/// coordinates become a single {0,1} column, multi-level coordinates a full
/// one-hot block, constant coordinates are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WSupport {
    levels: Vec<Vec<f64>>,
    /// Sorted distinct raw values per W coordinate.
    coordinate_values: Vec<Vec<f64>>,
    encoded_dim: usize,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y).expect("non-finite W value") {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

impl WSupport {
    /// Build the support from raw W value vectors (one per target sample).
    /// Duplicates collapse; levels come out in lexicographic order.
    pub fn from_observations(raw: &[Vec<f64>]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("cannot build W support from no observations"));
        }
        let width = raw[0].len();
        if width == 0 {
            return Err(Error::invalid("W must have at least one coordinate"));
        }
        for r in raw {
            if r.len() != width {
                return Err(Error::invalid("ragged W observations"));
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("non-finite W value"));
            }
        }
        let mut levels: Vec<Vec<f64>> = raw.to_vec();
        levels.sort_by(|a, b| lex_cmp(a, b));
        levels.dedup();
        Self::from_levels(levels)
    }

    /// Build from an explicit level list (sorted and deduplicated here).
    pub fn from_levels(mut levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("W support needs at least one level"));
        }
        levels.sort_by(|a, b| lex_cmp(a, b));
        levels.dedup();
        let width = levels[0].len();
        let mut coordinate_values = Vec::with_capacity(width);
        for j in 0..width {
            let mut vals: Vec<f64> = levels.iter().map(|l| l[j]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            coordinate_values.push(vals);
        }
        let encoded_dim = coordinate_values
            .iter()
            .map(|vals| match vals.len() {
                1 => 0,
                2 => 1,
                k => k,
            })
            .sum();
        Ok(WSupport {
            levels,
            coordinate_values,
            encoded_dim,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn level(&self, idx: usize) -> &[f64] {
        &self.levels[idx]
    }

    /// Index of a raw value vector in the support, if present.
    pub fn index_of(&self, raw: &[f64]) -> Option<usize> {
        self.levels
            .binary_search_by(|l| lex_cmp(l, raw))
            .ok()
    }

    /// Dimension of the encoded block appended to `v`.
    pub fn encoded_dim(&self) -> usize {
        self.encoded_dim
    }

    /// Numeric encoding of one level: {0,1} for binary coordinates, one-hot
    /// for multi-level coordinates.
    pub fn encode(&self, idx: usize) -> Vec<f64> {
        let level = &self.levels[idx];
        let mut out = Vec::with_capacity(self.encoded_dim);
        for (j, vals) in self.coordinate_values.iter().enumerate() {
            match vals.len() {
                1 => {}
                2 => {
                    let pos = vals
                        .iter()
                        .position(|v| *v == level[j])
                        .expect("level value outside coordinate support");
                    out.push(pos as f64);
                }
                _ => {
                    for v in vals {
                        out.push(if *v == level[j] { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        out
    }
}

/// One coarsened observation `Z = {V, E, W(1-E), E(A, Y)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSample {
    /// Common covariates.
    pub v: Vec<f64>,
    /// Population indicator: `true` for the study population.
    pub e: bool,
    /// Index into the W support; present iff `e == false`.
    pub w: Option<usize>,
    /// Treatment; present iff `e == true`.
    pub a_treat: Option<bool>,
    /// Outcome; present iff `e == true`.
    pub y: Option<f64>,
}

impl ObservedSample {
    /// Target-population sample: covariates plus an observed W level.
    pub fn target(v: Vec<f64>, w_index: usize) -> Self {
        ObservedSample {
            v,
            e: false,
            w: Some(w_index),
            a_treat: None,
            y: None,
        }
    }

    /// Study-population sample: covariates, treatment and outcome.
    pub fn study(v: Vec<f64>, a_treat: bool, y: f64) -> Self {
        ObservedSample {
            v,
            e: true,
            w: None,
            a_treat: Some(a_treat),
            y: Some(y),
        }
    }
}

/// A fully specified covariate profile `x = [v; encode(w); 1?]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateProfile {
    pub v: Vec<f64>,
    pub w_index: usize,
    pub x: Vec<f64>,
}

/// Column metadata carried through ingestion and used by benchmarking to
/// decide which V columns are eligible pseudo-W.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub v_names: Vec<String>,
    /// `true` for V columns that are discrete.
    pub v_discrete: Vec<bool>,
    pub w_names: Vec<String>,
}

impl ColumnMeta {
    pub fn unnamed(v_dim: usize, w_dim: usize) -> Self {
        ColumnMeta {
            v_names: (0..v_dim).map(|i| format!("v{i}")).collect(),
            v_discrete: vec![false; v_dim],
            w_names: (0..w_dim).map(|i| format!("w{i}")).collect(),
        }
    }
}

/// A single invariant violation found by [`Dataset::validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Index of the offending sample, if the rule is per-sample.
    pub sample: Option<usize>,
    pub rule: String,
}

impl Violation {
    fn per_sample(idx: usize, rule: impl Into<String>) -> Self {
        Violation {
            sample: Some(idx),
            rule: rule.into(),
        }
    }

    fn global(rule: impl Into<String>) -> Self {
        Violation {
            sample: None,
            rule: rule.into(),
        }
    }
}

/// Immutable dataset: samples, outcome bounds, W support and column metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<ObservedSample>,
    pub bounds: OutcomeBounds,
    pub w_support: WSupport,
    pub columns: ColumnMeta,
    /// Append a constant-1 coordinate to every covariate profile.
    pub intercept: bool,
}

impl Dataset {
    pub fn new(
        samples: Vec<ObservedSample>,
        bounds: OutcomeBounds,
        w_support: WSupport,
        columns: ColumnMeta,
    ) -> Self {
        Dataset {
            samples,
            bounds,
            w_support,
            columns,
            intercept: true,
        }
    }

    pub fn without_intercept(mut self) -> Self {
        self.intercept = false;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn v_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.v.len())
    }

    /// Dimension of the joint covariate profile `x`.
    pub fn x_dim(&self) -> usize {
        self.v_dim() + self.w_support.encoded_dim() + usize::from(self.intercept)
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| !self.samples[i].e).collect()
    }

    pub fn study_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].e).collect()
    }

    /// Joint covariate profile for arbitrary `(v, w_index)`.
    pub fn profile(&self, v: &[f64], w_index: usize) -> CovariateProfile {
        let mut x = Vec::with_capacity(self.x_dim());
        x.extend_from_slice(v);
        x.extend(self.w_support.encode(w_index));
        if self.intercept {
            x.push(1.0);
        }
        CovariateProfile {
            v: v.to_vec(),
            w_index,
            x,
        }
    }

    /// Checks every type invariant; returns an empty list iff the dataset is
    /// well formed. Diagnostic only, never fails.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(self.bounds.a < self.bounds.b) {
            out.push(Violation::global("outcome bounds require a < b"));
        }
        let v_dim = self.v_dim();
        for (i, s) in self.samples.iter().enumerate() {
            if s.v.len() != v_dim {
                out.push(Violation::per_sample(i, "inconsistent V dimension"));
            }
            if s.v.iter().any(|x| !x.is_finite()) {
                out.push(Violation::per_sample(i, "non-finite V value"));
            }
            if s.e {
                if s.w.is_some() {
                    out.push(Violation::per_sample(i, "W present under E=1"));
                }
                match s.a_treat {
                    None => out.push(Violation::per_sample(i, "A missing under E=1")),
                    Some(_) => {}
                }
                match s.y {
                    None => out.push(Violation::per_sample(i, "Y missing under E=1")),
                    Some(y) if !y.is_finite() => {
                        out.push(Violation::per_sample(i, "non-finite Y"))
                    }
                    Some(y) if !self.bounds.contains(y) => {
                        out.push(Violation::per_sample(i, "Y outside [a,b]"))
                    }
                    Some(_) => {}
                }
            } else {
                if s.a_treat.is_some() {
                    out.push(Violation::per_sample(i, "A present under E=0"));
                }
                if s.y.is_some() {
                    out.push(Violation::per_sample(i, "Y present under E=0"));
                }
                match s.w {
                    None => out.push(Violation::per_sample(i, "W missing under E=0")),
                    Some(w) if w >= self.w_support.num_levels() => {
                        out.push(Violation::per_sample(i, "W index outside support"))
                    }
                    Some(_) => {}
                }
            }
        }
        let mut seen = self.w_support.levels().to_vec();
        seen.dedup();
        if seen.len() != self.w_support.num_levels() {
            out.push(Violation::global("duplicate W levels in support"));
        }
        out
    }

    /// Errors unless the dataset validates cleanly and contains both
    /// populations.
    pub fn ensure_estimable(&self) -> Result<()> {
        let violations = self.validate();
        if let Some(v) = violations.first() {
            return Err(Error::invalid(format!(
                "dataset failed validation ({} violations; first: {:?} {})",
                violations.len(),
                v.sample,
                v.rule
            )));
        }
        let n_target = self.target_indices().len();
        let n_study = self.study_indices().len();
        if n_target == 0 || n_study == 0 {
            return Err(Error::PopulationOverlap(format!(
                "need both populations, got {n_study} study and {n_target} target samples"
            )));
        }
        Ok(())
    }

    /// Disjoint uniform-at-random partition; both halves inherit bounds,
    /// support and metadata. Deterministic given `seed`.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!(
                "split fraction must lie in (0,1), got {fraction}"
            )));
        }
        let n = self.samples.len();
        if n < 2 {
            return Err(Error::invalid("cannot split fewer than two samples"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = seeded_rng(seed);
        idx.shuffle(&mut rng);
        let n1 = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        let (first, second) = idx.split_at(n1);
        let make = |ids: &[usize]| {
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            Dataset {
                samples: ids.iter().map(|&i| self.samples[i].clone()).collect(),
                bounds: self.bounds,
                w_support: self.w_support.clone(),
                columns: self.columns.clone(),
                intercept: self.intercept,
            }
        };
        let d1 = make(first);
        let d2 = make(second);
        for (name, d) in [("D1", &d1), ("D2", &d2)] {
            let nt = d.target_indices().len();
            let ns = d.study_indices().len();
            if nt == 0 || ns == 0 {
                return Err(Error::DegenerateSplit(format!(
                    "{name} has {ns} study and {nt} target samples"
                )));
            }
        }
        Ok((d1, d2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> Dataset {
        let support = WSupport::from_levels(vec![vec![0.0], vec![1.0]]).unwrap();
        let samples = vec![
            ObservedSample::target(vec![0.5], 0),
            ObservedSample::target(vec![-0.5], 1),
            ObservedSample::study(vec![0.1], true, 0.7),
            ObservedSample::study(vec![0.2], false, 0.3),
        ];
        Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 1.0).unwrap(),
            support,
            ColumnMeta::unnamed(1, 1),
        )
    }

    #[test]
    fn validate_flags_w_under_study_population() {
        let mut d = toy_dataset();
        d.samples[2].w = Some(0);
        let v = d.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "W present under E=1");
        assert_eq!(v[0].sample, Some(2));
    }

    #[test]
    fn validate_accepts_outcome_on_closed_boundary() {
        let mut d = toy_dataset();
        d.samples[2].y = Some(1.0);
        assert!(d.validate().is_empty());
    }

    #[test]
    fn validate_flags_outcome_outside_bounds() {
        let mut d = toy_dataset();
        d.samples[2].y = Some(1.1);
        let v = d.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "Y outside [a,b]");
    }

    #[test]
    fn split_is_a_seed_deterministic_partition() {
        let support = WSupport::from_levels(vec![vec![0.0], vec![1.0]]).unwrap();
        let mut samples = Vec::new();
        for i in 0..100 {
            if i % 2 == 0 {
                samples.push(ObservedSample::target(vec![i as f64], i % 2));
            } else {
                samples.push(ObservedSample::study(vec![i as f64], i % 3 == 0, 0.5));
            }
        }
        let d = Dataset::new(
            samples,
            OutcomeBounds::new(0.0, 1.0).unwrap(),
            support,
            ColumnMeta::unnamed(1, 1),
        );
        let (d1, d2) = d.split(0.5, 7).unwrap();
        assert_eq!(d1.len(), 50);
        assert_eq!(d2.len(), 50);
        let (e1, e2) = d.split(0.5, 7).unwrap();
        assert_eq!(d1, e1);
        assert_eq!(d2, e2);
        // Union equals input as a multiset of samples.
        let mut merged: Vec<String> = d1
            .samples
            .iter()
            .chain(d2.samples.iter())
            .map(|s| format!("{s:?}"))
            .collect();
        merged.sort();
        let mut orig: Vec<String> = d.samples.iter().map(|s| format!("{s:?}")).collect();
        orig.sort();
        assert_eq!(merged, orig);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let d = toy_dataset();
        assert!(d.split(0.0, 1).is_err());
        assert!(d.split(1.0, 1).is_err());
    }

    #[test]
    fn encode_is_binary_and_one_hot() {
        let support = WSupport::from_levels(vec![
            vec![0.0, 1.0],
            vec![0.0, 2.0],
            vec![1.0, 3.0],
        ])
        .unwrap();
        // First coordinate has two values {0,1} -> single column; second has
        // three values {1,2,3} -> one-hot of width 3.
        assert_eq!(support.encoded_dim(), 4);
        assert_eq!(support.encode(0), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(support.encode(1), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(support.encode(2), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn profile_appends_intercept_by_default() {
        let d = toy_dataset();
        let p = d.profile(&[0.5], 1);
        assert_eq!(p.x, vec![0.5, 1.0, 1.0]);
        let d = d.without_intercept();
        assert_eq!(d.profile(&[0.5], 1).x, vec![0.5, 1.0]);
    }

    #[test]
    fn support_enumeration_is_lexicographic_and_stable() {
        let raw = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 0.0],
        ];
        let s = WSupport::from_observations(&raw).unwrap();
        assert_eq!(
            s.levels(),
            &[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]
        );
        assert_eq!(s.index_of(&[1.0, 0.0]), Some(2));
        assert_eq!(s.index_of(&[1.0, 1.0]), None);
    }
}
