//! Subcommand implementations. Every command writes machine-readable tables
//! (CSV plus a JSON metadata sidecar) into the output directory.

use anyhow::{anyhow, bail, Result};
use serde_json::json;

use ecobounds_core::benchmarking::benchmark_delta;
use ecobounds_core::bounds::{pointwise_bounds, SensitivityLevel};
use ecobounds_core::data_model::Dataset;
use ecobounds_core::estimator::{crossfit, CrossfitOptions, EstimatorKind, Side};
use ecobounds_core::experiments::{
    run_delta_sweep, run_entropy_sweep, run_error_grid, ExperimentResult,
};
use ecobounds_core::inference::{bootstrap_run, sandwich_crossfit};
use ecobounds_core::ingest::ingest_csv;
use ecobounds_core::nuisance::fit_all;
use ecobounds_core::simulation::{generate, oracle_beta, GroundTruth};

use crate::config::{EstimatorChoice, InferenceMethod, RunConfig};
use crate::output::{fmt_f64, fingerprint, OutputDir};

/// Resolve the dataset: CSV ingestion when an input is configured, the
/// synthetic process otherwise.
pub fn load_dataset(config: &RunConfig) -> Result<(Dataset, Option<GroundTruth>)> {
    match (&config.input, &config.roles, &config.dgp) {
        (Some(path), Some(roles), _) => {
            let report = ingest_csv(path, roles)?;
            Ok((report.dataset, None))
        }
        (Some(_), None, _) => bail!("config has an input path but no column-role map"),
        (None, _, Some(dgp)) => {
            let (d, t) = generate(dgp)?;
            Ok((d, Some(t)))
        }
        (None, _, None) => bail!("config needs either input+roles or a dgp block"),
    }
}

pub fn cmd_ingest(config: &RunConfig, out: &OutputDir) -> Result<()> {
    let path = config
        .input
        .as_ref()
        .ok_or_else(|| anyhow!("ingest needs an input path"))?;
    let roles = config
        .roles
        .as_ref()
        .ok_or_else(|| anyhow!("ingest needs a column-role map"))?;
    let report = ingest_csv(path, roles)?;
    let violations = report.dataset.validate();
    out.write_json("dataset.json", &report.dataset)?;
    out.write_json(
        "ingest_report.json",
        &json!({
            "rows_read": report.rows_read,
            "rows_dropped": report.rows_dropped,
            "n_samples": report.dataset.len(),
            "n_study": report.dataset.study_indices().len(),
            "n_target": report.dataset.target_indices().len(),
            "w_levels": report.dataset.w_support.num_levels(),
            "violations": violations.len(),
        }),
    )?;
    println!(
        "ingested {} rows ({} dropped) -> {} samples",
        report.rows_read,
        report.rows_dropped,
        report.dataset.len()
    );
    Ok(())
}

fn bounds_csv(out: &OutputDir, name: &str, dataset: &Dataset, rows: &ecobounds_core::bounds::PointwiseBounds) -> Result<()> {
    out.write_csv(
        name,
        &[
            "unit_id",
            "w_level",
            "gamma_lower",
            "gamma_upper",
            "tau_lower",
            "tau_upper",
            "clipped_lower",
            "clipped_upper",
            "nu",
        ],
        rows.rows.iter().map(|r| {
            vec![
                r.unit_id.to_string(),
                r.w_level.to_string(),
                fmt_f64(r.pair.gamma_lower),
                fmt_f64(r.pair.gamma_upper),
                fmt_f64(r.pair.tau_lower),
                fmt_f64(r.pair.tau_upper),
                r.pair.clipped_lower.to_string(),
                r.pair.clipped_upper.to_string(),
                fmt_f64(r.nu),
            ]
        }),
    )?;
    let _ = dataset;
    Ok(())
}

pub fn cmd_estimate(config: &RunConfig, out: &OutputDir) -> Result<()> {
    let (dataset, _) = load_dataset(config)?;
    dataset.ensure_estimable()?;
    let learner = config.learner_spec();
    let learner_fp = fingerprint(&learner)?;

    // Pointwise bounds under nuisances fit on the full dataset.
    let eta = fit_all(&dataset, &learner)?;
    let level = config
        .model
        .delta
        .map(SensitivityLevel::new)
        .transpose()?;
    let sweep = pointwise_bounds(&dataset, &eta, level);
    bounds_csv(out, "bounds.csv", &dataset, &sweep)?;

    let kinds: Vec<EstimatorKind> = match config.estimator {
        EstimatorChoice::Plugin => vec![EstimatorKind::Plugin],
        EstimatorChoice::BiasCorrected => vec![EstimatorKind::BiasCorrected],
        EstimatorChoice::Both => vec![EstimatorKind::Plugin, EstimatorKind::BiasCorrected],
    };
    let mut beta_entries = Vec::new();
    let mut interval_entries = Vec::new();
    for &side in &config.model.sides {
        let spec = config.model.spec(side);
        for &kind in &kinds {
            let options = CrossfitOptions {
                kind,
                ..Default::default()
            };
            let result = crossfit(&dataset, &spec, &learner, config.seed, &options)?;
            let kind_name = match kind {
                EstimatorKind::Plugin => "plugin",
                EstimatorKind::BiasCorrected => "bias-corrected",
            };
            beta_entries.push(json!({
                "side": side,
                "delta": config.model.delta,
                "estimator": kind_name,
                "beta": result.estimate.beta,
                "moment_residual": result.estimate.moment_residual,
                "n_used": result.estimate.n_used,
                "seed": config.seed,
                "learner_fingerprint": learner_fp,
                "ridged": result.estimate.ridged,
                "warnings": result.estimate.warnings,
            }));
            // Inference only for the bias-corrected estimator; the plug-in
            // comparison reports coefficients alone.
            if kind == EstimatorKind::BiasCorrected {
                match config.inference.method {
                    InferenceMethod::Sandwich => {
                        let cov = sandwich_crossfit(&result, &spec)?;
                        interval_entries.push(json!({
                            "side": side,
                            "delta": config.model.delta,
                            "method": "sandwich",
                            "covariance": cov.covariance,
                            "intervals": cov.intervals,
                            "warnings": cov.warnings,
                        }));
                    }
                    InferenceMethod::Bootstrap => {
                        let run = bootstrap_run(
                            &dataset,
                            &spec,
                            &learner,
                            config.inference.b,
                            config.seed,
                        )?;
                        interval_entries.push(json!({
                            "side": side,
                            "delta": config.model.delta,
                            "method": "bootstrap",
                            "covariance": run.beta_cov.covariance,
                            "intervals": run.beta_cov.intervals,
                            "b_replicates": run.beta_cov.b_replicates,
                            "retries": run.beta_cov.retries,
                            "mean_bounds": run.mean_bounds,
                            "warnings": run.beta_cov.warnings,
                        }));
                    }
                }
            }
        }
    }
    out.write_json("beta.json", &json!({ "estimates": beta_entries }))?;
    out.write_json("intervals.json", &json!({ "intervals": interval_entries }))?;
    println!(
        "estimated {} side/estimator combinations over {} samples",
        beta_entries.len(),
        dataset.len()
    );
    Ok(())
}

pub fn cmd_simulate(config: &RunConfig, out: &OutputDir) -> Result<()> {
    let dgp = config
        .dgp
        .as_ref()
        .ok_or_else(|| anyhow!("simulate needs a dgp block"))?;
    let (dataset, truth) = generate(dgp)?;
    out.write_json("dataset.json", &dataset)?;
    out.write_csv(
        "ground_truth.csv",
        &["unit_id", "cate", "restricted_cate", "y1", "y0"],
        (0..dataset.len()).map(|i| {
            vec![
                i.to_string(),
                fmt_f64(truth.cate[i]),
                fmt_f64(truth.restricted_cate[i]),
                fmt_f64(truth.y1[i]),
                fmt_f64(truth.y0[i]),
            ]
        }),
    )?;
    out.write_json(
        "truth_summary.json",
        &json!({
            "true_delta_max": truth.true_delta_max,
            "true_delta_mean": truth.true_delta_mean,
            "bounds": dataset.bounds,
            "n_study": dataset.study_indices().len(),
            "n_target": dataset.target_indices().len(),
            "coefficients": truth.coefficients,
        }),
    )?;
    println!(
        "simulated {} units (true delta max {:.4})",
        dataset.len(),
        truth.true_delta_max
    );
    Ok(())
}

fn write_experiment(out: &OutputDir, name: &str, result: &ExperimentResult) -> Result<()> {
    out.write_csv(
        format!("{name}.csv").as_str(),
        &["experiment", "seed", "cell", "estimator", "metric", "value"],
        result.rows.iter().map(|r| {
            vec![
                r.experiment.clone(),
                r.seed.to_string(),
                r.cell.clone(),
                r.estimator.clone(),
                r.metric.clone(),
                fmt_f64(r.value),
            ]
        }),
    )?;
    out.write_json(format!("{name}_metadata.json").as_str(), &result.metadata)?;
    Ok(())
}

fn experiment_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

pub fn cmd_error_grid(config: &RunConfig, out: &OutputDir) -> Result<()> {
    let dgp = config
        .dgp
        .as_ref()
        .ok_or_else(|| anyhow!("error-grid needs a dgp block"))?;
    let grid_cfg = config
        .experiment
        .error_grid
        .as_ref()
        .ok_or_else(|| anyhow!("config lacks an experiment.error_grid block"))?;
    let side = *config.model.sides.first().unwrap_or(&Side::Lower);
    let spec = config.model.spec(side);
    let oracle = oracle_beta(dgp, &spec, grid_cfg.n_oracle)?;
    let grid: Vec<(f64, f64)> = grid_cfg
        .eps_outcome
        .iter()
        .flat_map(|&a| grid_cfg.eps_propensity.iter().map(move |&b| (a, b)))
        .collect();
    let seeds = experiment_seeds(config.seed, grid_cfg.seeds);
    let result = run_error_grid(dgp, &grid, &seeds, &spec, &oracle)?;
    write_experiment(out, "error_grid", &result)?;
    println!("error grid: {} rows", result.rows.len());
    Ok(())
}

pub fn cmd_entropy(config: &RunConfig, out: &OutputDir) -> Result<()> {
    let dgp = config
        .dgp
        .as_ref()
        .ok_or_else(|| anyhow!("entropy needs a dgp block"))?;
    let cfg = config
        .experiment
        .entropy
        .as_ref()
        .ok_or_else(|| anyhow!("config lacks an experiment.entropy block"))?;
    let seeds = experiment_seeds(config.seed, cfg.seeds);
    let result = run_entropy_sweep(dgp, &cfg.scales, &seeds)?;
    write_experiment(out, "entropy", &result)?;
    println!("entropy sweep: {} rows", result.rows.len());
    Ok(())
}

pub fn cmd_delta_sweep(config: &RunConfig, out: &OutputDir) -> Result<()> {
    let dgp = config
        .dgp
        .as_ref()
        .ok_or_else(|| anyhow!("delta-sweep needs a dgp block"))?;
    let cfg = config
        .experiment
        .delta_sweep
        .as_ref()
        .ok_or_else(|| anyhow!("config lacks an experiment.delta_sweep block"))?;
    let seeds = experiment_seeds(config.seed, cfg.seeds);
    let result = run_delta_sweep(
        dgp,
        &cfg.deltas,
        &seeds,
        &config.learner_spec(),
        cfg.include_true,
    )?;
    write_experiment(out, "delta_sweep", &result)?;
    println!("delta sweep: {} rows", result.rows.len());
    Ok(())
}

pub fn cmd_benchmark(config: &RunConfig, out: &OutputDir) -> Result<()> {
    let cfg = config
        .experiment
        .benchmark
        .as_ref()
        .ok_or_else(|| anyhow!("config lacks an experiment.benchmark block"))?;
    let (dataset, truth) = load_dataset(config)?;
    let bench = benchmark_delta(
        &dataset,
        cfg.holdout_size,
        &config.learner_spec(),
        cfg.statistic,
        config.seed,
    )?;
    out.write_csv(
        "benchmark.csv",
        &["subset_id", "heldout", "value"],
        bench.rows.iter().map(|r| {
            vec![
                r.subset_id.to_string(),
                r.heldout.join("|"),
                fmt_f64(r.value),
            ]
        }),
    )?;
    let mut summary = json!({
        "delta_hat": bench.delta_hat,
        "statistic": bench.statistic,
        "holdout_size": bench.holdout_size,
        "n_subsets": bench.rows.len(),
    });
    if let Some(t) = truth {
        summary["true_delta_max"] = json!(t.true_delta_max);
        summary["true_delta_mean"] = json!(t.true_delta_mean);
    }
    out.write_json("benchmark_summary.json", &summary)?;
    println!("benchmark: delta_hat = {:.4}", bench.delta_hat);
    Ok(())
}
