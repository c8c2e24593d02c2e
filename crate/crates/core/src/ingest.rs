//! CSV ingestion against a column-role map.
//!
//! The CSV must carry a header row. Roles name the common covariates `v`,
//! the new covariates `w`, the treatment `a`, the outcome `y`, and either a
//! population-indicator column `e` or a synthetic split rule. With a
//! synthetic split, rows are assigned to the target population at random
//! and then coarsened: target rows drop `(a, y)`, study rows drop `w`. That
//! mirrors holding covariates out of an existing complete table.
//!
//! Rows with a missing required cell are dropped and counted; non-numeric
//! cells in mapped columns are an error.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{ColumnMeta, Dataset, ObservedSample, OutcomeBounds, WSupport};
use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Random assignment of rows to the target population, for complete tables
/// without a population column.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticSplit {
    pub target_fraction: f64,
    pub seed: u64,
}

/// Column-role map and outcome bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSpec {
    pub v: Vec<String>,
    pub w: Vec<String>,
    #[serde(default)]
    pub e: Option<String>,
    pub a: String,
    pub y: String,
    pub bounds_a: f64,
    pub bounds_b: f64,
    #[serde(default)]
    pub synthetic_split: Option<SyntheticSplit>,
    /// Override for which V columns count as discrete; when absent, columns
    /// whose values are all integers with at most twelve distinct levels are
    /// flagged discrete.
    #[serde(default)]
    pub discrete_v: Option<Vec<String>>,
    /// Append a constant-1 coordinate to covariate profiles (default true).
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

/// Ingestion outcome: the validated dataset plus row accounting.
#[derive(Debug)]
pub struct IngestReport {
    pub dataset: Dataset,
    pub rows_read: usize,
    pub rows_dropped: usize,
}

impl IngestSpec {
    fn validate(&self) -> Result<()> {
        if self.v.is_empty() {
            return Err(Error::invalid("role map needs at least one v column"));
        }
        if self.w.is_empty() {
            return Err(Error::invalid("role map needs at least one w column"));
        }
        let mut seen = HashSet::new();
        for name in self
            .v
            .iter()
            .chain(self.w.iter())
            .chain(self.e.iter())
            .chain([&self.a, &self.y])
        {
            if !seen.insert(name.clone()) {
                return Err(Error::invalid(format!("column {name} mapped to two roles")));
            }
        }
        if !(self.bounds_a < self.bounds_b) {
            return Err(Error::invalid("bounds require a < b"));
        }
        if self.e.is_none() && self.synthetic_split.is_none() {
            return Err(Error::invalid(
                "role map needs either an e column or a synthetic split",
            ));
        }
        if let Some(s) = &self.synthetic_split {
            if !(s.target_fraction > 0.0 && s.target_fraction < 1.0) {
                return Err(Error::invalid("target fraction must lie in (0,1)"));
            }
        }
        Ok(())
    }
}

fn parse_cell(raw: &str, column: &str, row: usize) -> Result<Option<f64>> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|_| {
        Error::data(format!(
            "non-numeric cell '{t}' in column {column} (data row {row})"
        ))
    })
}

fn parse_binary(value: f64, column: &str, row: usize) -> Result<bool> {
    if value == 0.0 {
        Ok(false)
    } else if value == 1.0 {
        Ok(true)
    } else {
        Err(Error::data(format!(
            "column {column} must be 0/1, found {value} (data row {row})"
        )))
    }
}

/// Read a CSV into a [`Dataset`] according to the role map.
pub fn ingest_csv(path: impl AsRef<Path>, spec: &IngestSpec) -> Result<IngestReport> {
    spec.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("column {name} not found in CSV header")))
    };
    let v_idx: Vec<usize> = spec.v.iter().map(|n| col_index(n)).collect::<Result<_>>()?;
    let w_idx: Vec<usize> = spec.w.iter().map(|n| col_index(n)).collect::<Result<_>>()?;
    let e_idx = spec.e.as_ref().map(|n| col_index(n)).transpose()?;
    let a_idx = col_index(&spec.a)?;
    let y_idx = col_index(&spec.y)?;

    let bounds = OutcomeBounds::new(spec.bounds_a, spec.bounds_b)?;

    struct RawRow {
        v: Vec<f64>,
        w: Option<Vec<f64>>,
        e: Option<bool>,
        a: Option<bool>,
        y: Option<f64>,
    }

    let mut rows_read = 0usize;
    let mut rows_dropped = 0usize;
    let mut raw_rows: Vec<RawRow> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        rows_read += 1;
        let cell = |idx: usize, name: &str| -> Result<Option<f64>> {
            parse_cell(record.get(idx).unwrap_or(""), name, row_no)
        };
        let mut v = Vec::with_capacity(v_idx.len());
        let mut missing = false;
        for (i, &idx) in v_idx.iter().enumerate() {
            match cell(idx, &spec.v[i])? {
                Some(x) => v.push(x),
                None => {
                    missing = true;
                    break;
                }
            }
        }
        let e = match e_idx {
            None => None,
            Some(idx) => match cell(idx, spec.e.as_deref().unwrap_or("e"))? {
                Some(x) => Some(parse_binary(x, spec.e.as_deref().unwrap_or("e"), row_no)?),
                None => {
                    missing = true;
                    None
                }
            },
        };
        // Which fields are required depends on the (known or future)
        // population: with an explicit e column only the matching fields
        // must be present; with a synthetic split the full row is needed.
        let need_w = e.map_or(true, |e| !e);
        let need_ay = e.map_or(true, |e| e);
        let mut w = None;
        if need_w && !missing {
            let mut vals = Vec::with_capacity(w_idx.len());
            for (i, &idx) in w_idx.iter().enumerate() {
                match cell(idx, &spec.w[i])? {
                    Some(x) => vals.push(x),
                    None => {
                        missing = true;
                        break;
                    }
                }
            }
            if !missing {
                w = Some(vals);
            }
        }
        let mut a = None;
        let mut y = None;
        if need_ay && !missing {
            match cell(a_idx, &spec.a)? {
                Some(x) => a = Some(parse_binary(x, &spec.a, row_no)?),
                None => missing = true,
            }
            if !missing {
                match cell(y_idx, &spec.y)? {
                    Some(x) => {
                        if !bounds.contains(x) {
                            return Err(Error::data(format!(
                                "outcome {x} outside [{}, {}] (data row {row_no})",
                                bounds.a, bounds.b
                            )));
                        }
                        y = Some(x);
                    }
                    None => missing = true,
                }
            }
        }
        if missing {
            rows_dropped += 1;
            continue;
        }
        raw_rows.push(RawRow { v, w, e, a, y });
    }
    if rows_read == 0 {
        return Err(Error::data("no data rows"));
    }
    if raw_rows.is_empty() {
        return Err(Error::data("every data row was dropped"));
    }

    // Assign populations for the synthetic split.
    if let Some(split) = &spec.synthetic_split {
        let mut rng = seeded_rng(split.seed);
        for row in &mut raw_rows {
            row.e = Some(!rng.gen_bool(split.target_fraction));
        }
    }

    // W support from every row that carries W values.
    let observed_w: Vec<Vec<f64>> = raw_rows.iter().filter_map(|r| r.w.clone()).collect();
    if observed_w.is_empty() {
        return Err(Error::data("no rows carry W values"));
    }
    let support = WSupport::from_observations(&observed_w)?;

    let mut samples = Vec::with_capacity(raw_rows.len());
    for (row_no, row) in raw_rows.iter().enumerate() {
        let e = row.e.expect("population assigned");
        if e {
            let a = row.a.ok_or_else(|| {
                Error::data(format!("study row {row_no} lost its treatment value"))
            })?;
            let y = row
                .y
                .ok_or_else(|| Error::data(format!("study row {row_no} lost its outcome")))?;
            samples.push(ObservedSample::study(row.v.clone(), a, y));
        } else {
            let w = row
                .w
                .as_ref()
                .ok_or_else(|| Error::data(format!("target row {row_no} lost its W values")))?;
            let idx = support.index_of(w).ok_or_else(|| {
                Error::data(format!("W value {w:?} missing from support (row {row_no})"))
            })?;
            samples.push(ObservedSample::target(row.v.clone(), idx));
        }
    }

    // Discrete flags: explicit override, or integer-valued with few levels.
    let v_discrete: Vec<bool> = match &spec.discrete_v {
        Some(names) => spec.v.iter().map(|n| names.contains(n)).collect(),
        None => (0..spec.v.len())
            .map(|j| {
                let mut distinct: Vec<f64> = Vec::new();
                for r in &raw_rows {
                    let x = r.v[j];
                    if x.fract() != 0.0 {
                        return false;
                    }
                    if !distinct.contains(&x) {
                        distinct.push(x);
                        if distinct.len() > 12 {
                            return false;
                        }
                    }
                }
                true
            })
            .collect(),
    };
    let columns = ColumnMeta {
        v_names: spec.v.clone(),
        v_discrete,
        w_names: spec.w.clone(),
    };
    let mut dataset = Dataset::new(samples, bounds, support, columns);
    dataset.intercept = spec.intercept;
    let violations = dataset.validate();
    if let Some(v) = violations.first() {
        return Err(Error::data(format!(
            "ingested dataset failed validation: {:?} {}",
            v.sample, v.rule
        )));
    }
    Ok(IngestReport {
        dataset,
        rows_read,
        rows_dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec_with_split() -> IngestSpec {
        IngestSpec {
            v: vec!["age".into(), "bmi".into()],
            w: vec!["cough".into()],
            e: None,
            a: "treat".into(),
            y: "pain".into(),
            bounds_a: 0.0,
            bounds_b: 10.0,
            synthetic_split: Some(SyntheticSplit {
                target_fraction: 0.5,
                seed: 3,
            }),
            discrete_v: None,
            intercept: true,
        }
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn ingests_and_coarsens_a_complete_table() {
        let mut body = String::from("age,bmi,cough,treat,pain\n");
        for i in 0..40 {
            body.push_str(&format!(
                "{},{},{},{},{}\n",
                30 + i % 20,
                22.5 + (i % 7) as f64 * 0.5,
                i % 2,
                (i / 2) % 2,
                (i % 11)
            ));
        }
        let f = write_csv(&body);
        let report = ingest_csv(f.path(), &spec_with_split()).unwrap();
        assert_eq!(report.rows_read, 40);
        assert_eq!(report.rows_dropped, 0);
        assert_eq!(report.dataset.len(), 40);
        assert!(report.dataset.validate().is_empty());
        assert!(!report.dataset.target_indices().is_empty());
        assert!(!report.dataset.study_indices().is_empty());
        // age is integer-valued with many levels -> not discrete with > 12
        // distinct values; cough support is {0,1}.
        assert_eq!(report.dataset.w_support.num_levels(), 2);
    }

    #[test]
    fn drops_and_counts_incomplete_rows() {
        let body = "age,bmi,cough,treat,pain\n\
                    30,22.0,0,1,5\n\
                    31,,1,0,4\n\
                    32,23.5,1,1,\n\
                    33,24.0,0,0,2\n\
                    34,25.0,1,1,3\n\
                    35,26.0,0,0,6\n";
        let f = write_csv(body);
        let report = ingest_csv(f.path(), &spec_with_split()).unwrap();
        assert_eq!(report.rows_read, 6);
        assert_eq!(report.rows_dropped, 2);
        assert_eq!(report.dataset.len(), 4);
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_csv("age,bmi,cough,treat,pain\n");
        match ingest_csv(f.path(), &spec_with_split()) {
            Err(Error::Data(msg)) => assert!(msg.contains("no data rows")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn missing_mapped_column_is_reported_by_name() {
        let f = write_csv("age,bmi,treat,pain\n30,22.0,1,5\n");
        match ingest_csv(f.path(), &spec_with_split()) {
            Err(Error::Data(msg)) => assert!(msg.contains("cough"), "message: {msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_an_error() {
        let f = write_csv("age,bmi,cough,treat,pain\n30,abc,1,1,5\n31,22.0,0,0,4\n");
        match ingest_csv(f.path(), &spec_with_split()) {
            Err(Error::Data(msg)) => assert!(msg.contains("abc")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn explicit_population_column_keeps_partial_rows() {
        let mut spec = spec_with_split();
        spec.e = Some("pop".into());
        spec.synthetic_split = None;
        // Target rows may omit treat/pain; study rows may omit cough.
        let body = "age,bmi,cough,treat,pain,pop\n\
                    30,22.0,1,,,0\n\
                    31,23.0,0,,,0\n\
                    32,24.0,,1,5,1\n\
                    33,25.0,,0,4,1\n";
        let f = write_csv(body);
        let report = ingest_csv(f.path(), &spec).unwrap();
        assert_eq!(report.dataset.len(), 4);
        assert_eq!(report.rows_dropped, 0);
        assert_eq!(report.dataset.target_indices().len(), 2);
    }

    #[test]
    fn synthetic_split_is_seed_deterministic() {
        let mut body = String::from("age,bmi,cough,treat,pain\n");
        for i in 0..30 {
            body.push_str(&format!("{},{},{},{},{}\n", 30 + i, 22.0, i % 2, i % 2, i % 10));
        }
        let f = write_csv(&body);
        let a = ingest_csv(f.path(), &spec_with_split()).unwrap();
        let b = ingest_csv(f.path(), &spec_with_split()).unwrap();
        assert_eq!(a.dataset, b.dataset);
    }
}
