use std::path::Path;

use friendbounds::data::{load_edges, load_individuals, write_edges, write_individuals, EdgeList, ObservationTable};
use friendbounds::diagnostics::{
    barrett_donald_test, cdf_difference_curve, placebo_battery, residual_barrett_donald_test,
    residual_cdf_difference_curve, residual_variation, write_cdf_grid, CdfPoint, DominanceReport, PlaceboReport, ResidualSd,
};
use friendbounds::instruments::{build_dyads, predicted_indegree, probit_fit, ProbitFit};
use friendbounds::montecarlo::run_mc;
use friendbounds::pipeline::{estimate, prepare, EstimationConfig, EstimationReport};
use friendbounds::regress::RegressionSpec;
use friendbounds::sim::{simulate, simulate_linear_dgp, Truth};
use friendbounds::ColumnSource;
use serde::{Deserialize, Serialize};

use crate::config::{self, DataConfig, DiagnoseConfig, EstimateConfig, MonteCarloConfig, SimulateConfig};
use crate::{Cli, CliError, Command};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        // a second initialisation (only possible in tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match cli.command {
        Command::Simulate => cmd_simulate(cli),
        Command::Estimate => cmd_estimate(cli),
        Command::Diagnose => cmd_diagnose(cli),
        Command::Mc => cmd_mc(cli),
    }
}

fn require_config(cli: &Cli) -> Result<&Path, CliError> {
    cli.config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))
}

fn out_dir(cli: &Cli) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Output(format!("{}: {e}", cli.out.display())))?;
    Ok(&cli.out)
}

fn output_error(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Output(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(output_error(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(output_error(path))
}

fn library_output(e: friendbounds::Error) -> CliError {
    CliError::Output(e.to_string())
}

fn seed(cli: &Cli, from_config: Option<u64>) -> Result<u64, CliError> {
    cli.seed
        .or(from_config)
        .ok_or_else(|| CliError::Config("a seed is required (config `seed` or --seed)".into()))
}

fn cmd_simulate(cli: &Cli) -> Result<(), CliError> {
    let cfg: SimulateConfig = match &cli.config {
        Some(p) => config::load(p)?,
        None => SimulateConfig::default(),
    };
    let seed = seed(cli, cfg.seed)?;
    if cfg.structural.is_some() && cfg.linear.is_some() {
        return Err(CliError::Config("set only one of `structural` and `linear`".into()));
    }
    let (table, edges, truth) = match &cfg.linear {
        Some(l) => {
            let table = simulate_linear_dgp(l, seed).map_err(config_or_compute)?;
            let truth = Truth {
                return_education: l.return_education,
                return_friends: l.return_friends,
                seed: Some(seed),
                config: serde_json::to_value(l).ok(),
            };
            (table, EdgeList::empty(), truth)
        }
        None => {
            let sc = cfg.structural.clone().unwrap_or_default();
            sc.validate().map_err(CliError::input)?;
            let out = simulate(&sc, seed)?;
            (out.table, out.edges, out.truth)
        }
    };
    let dir = out_dir(cli)?;
    write_individuals(&dir.join("individuals.csv"), &table).map_err(library_output)?;
    write_edges(&dir.join("edges.csv"), &edges).map_err(library_output)?;
    write_json(&dir.join("truth.json"), &truth)?;
    log::info!("wrote {} individuals and {} edges to {}", table.len(), edges.len(), dir.display());
    Ok(())
}

fn config_or_compute(e: friendbounds::Error) -> CliError {
    match e {
        friendbounds::Error::InvalidConfig(_) => CliError::input(e),
        other => CliError::Compute(other),
    }
}

struct Loaded {
    table: ObservationTable,
    edges: Option<EdgeList>,
    truth: Option<Truth>,
}

fn load_data(config_path: &Path, d: &DataConfig) -> Result<Loaded, CliError> {
    let path = config::resolve(config_path, &d.individuals);
    let table = load_individuals(&path, &d.schema).map_err(CliError::input)?;
    if !table.rejected_rows().is_empty() {
        log::warn!("{} rows rejected from {}", table.rejected_rows().len(), path.display());
    }
    let edges = d
        .edges
        .as_ref()
        .map(|p| load_edges(&config::resolve(config_path, p), &d.edge_schema, &table))
        .transpose()
        .map_err(CliError::input)?;
    let truth = d
        .truth
        .as_ref()
        .map(|p| config::load::<Truth>(&config::resolve(config_path, p)))
        .transpose()?;
    Ok(Loaded { table, edges, truth })
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateOutput {
    probit: Option<ProbitFit>,
    dyads: Option<usize>,
    report: EstimationReport,
}

fn cmd_estimate(cli: &Cli) -> Result<(), CliError> {
    let path = require_config(cli)?;
    let cfg: EstimateConfig = config::load(path)?;
    let Loaded { mut table, edges, truth } = load_data(path, &cfg.data)?;
    let est = &cfg.estimation;
    est.base_spec().validate().map_err(CliError::input)?;
    est.bound_spec().validate().map_err(CliError::input)?;

    let mut probit = None;
    let mut n_dyads = None;
    if let Some(p) = &cfg.probit {
        let edges = edges
            .as_ref()
            .ok_or_else(|| CliError::Config("the probit block needs `data.edges`".into()))?;
        let recv: Vec<&str> = p.receiver_columns.iter().map(String::as_str).collect();
        let dyads = build_dyads(&table, edges, &recv).map_err(CliError::input)?;
        let fit = probit_fit(&dyads, &p.spec)?;
        table = predicted_indegree(&fit, &dyads, &table)?;
        n_dyads = Some(dyads.len());
        probit = Some(fit);
    }
    // every column is checked here, before any estimation
    let prepared = prepare(&table, edges.as_ref(), est).map_err(CliError::input)?;
    let report = estimate(&prepared, est, truth.as_ref())?;

    let dir = out_dir(cli)?;
    let mut text = String::new();
    if let Some(fit) = &probit {
        text.push_str("== Dyadic probit ==\n");
        for ((name, b), se) in fit.coefficients.iter().zip(&fit.standard_errors) {
            text.push_str(&format!("{name:<32} {b:>12.5} {se:>10.5}\n"));
        }
        if let (Some(lr), Some(p)) = (fit.lr_stat_instruments, fit.lr_p_value) {
            text.push_str(&format!("LR test of homophily block: {lr:.3} (p = {p:.4})\n"));
        }
        text.push('\n');
    }
    text.push_str(&report.to_string());
    write_json(
        &dir.join("estimate.json"),
        &EstimateOutput {
            probit,
            dyads: n_dyads,
            report,
        },
    )?;
    write_text(&dir.join("estimate.txt"), &text)
}

#[derive(Debug, Serialize, Deserialize)]
struct DominanceEntries {
    raw: DominanceReport,
    residual: DominanceReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct DiagnoseOutput {
    placebo: PlaceboReport,
    residual_variation: Vec<ResidualSd>,
    cdf_raw: Vec<CdfPoint>,
    cdf_residual: Vec<CdfPoint>,
    dominance: DominanceEntries,
}

/// Controls of the bound regression, without outcome or instruments.
fn control_spec(est: &EstimationConfig) -> RegressionSpec {
    RegressionSpec {
        endogenous: Vec::new(),
        excluded_instruments: Vec::new(),
        ..est.base_spec()
    }
}

fn cmd_diagnose(cli: &Cli) -> Result<(), CliError> {
    let path = require_config(cli)?;
    let cfg: DiagnoseConfig = config::load(path)?;
    let Loaded { table, edges, .. } = load_data(path, &cfg.data)?;
    let est = &cfg.estimation;
    let table = prepare(&table, edges.as_ref(), est).map_err(CliError::input)?;
    for c in cfg.predetermined.iter().chain(cfg.earnings.iter()) {
        if !table.has_column(c) {
            return Err(CliError::Config(format!("unknown column `{c}`")));
        }
    }
    if cfg.predetermined.is_empty() {
        return Err(CliError::Config("`predetermined` must list at least one column".into()));
    }
    let controls = control_spec(est);
    let predetermined: Vec<&str> = cfg.predetermined.iter().map(String::as_str).collect();
    let placebo = placebo_battery(&table, &est.instrument, &predetermined, &controls, cfg.earnings.as_deref())?;

    let sets: Vec<(String, RegressionSpec)> = cfg
        .residual_sets
        .iter()
        .map(|s| {
            let cols: Vec<&str> = s.controls.iter().map(String::as_str).collect();
            let mut spec = RegressionSpec::ols("", &cols, &est.cluster);
            spec.absorb_fe = s.absorb.clone();
            spec.dummy_fe = s.dummies.clone();
            (s.label.clone(), spec)
        })
        .collect();
    let residual = if sets.is_empty() {
        Vec::new()
    } else {
        residual_variation(&table, &est.instrument, &sets)?
    };

    let cdf_raw = cdf_difference_curve(&table, &est.friends, &est.instrument, &controls, &cfg.grid)?;
    let cdf_residual = residual_cdf_difference_curve(&table, &est.friends, &est.instrument, &controls, &cfg.grid)?;
    let raw = barrett_donald_test(&table, &est.friends, &est.instrument)?;
    let resid = residual_barrett_donald_test(&table, &est.friends, &est.instrument, &controls)?;

    let dir = out_dir(cli)?;
    write_cdf_grid(&dir.join("cdf_raw.csv"), &cdf_raw).map_err(library_output)?;
    write_cdf_grid(&dir.join("cdf_residual.csv"), &cdf_residual).map_err(library_output)?;
    let mut text = placebo.to_string();
    if !residual.is_empty() {
        text.push_str("\nResidual standard deviation of the instrument\n");
        for r in &residual {
            text.push_str(&format!("{:<32} {:>10.4} {:>7}\n", r.label, r.sd, r.n_obs));
        }
    }
    text.push_str(&format!("\nDominance (raw):      {raw}\nDominance (residual): {resid}\n"));
    write_text(&dir.join("diagnose.txt"), &text)?;
    write_json(
        &dir.join("diagnose.json"),
        &DiagnoseOutput {
            placebo,
            residual_variation: residual,
            cdf_raw,
            cdf_residual,
            dominance: DominanceEntries { raw, residual: resid },
        },
    )
}

fn cmd_mc(cli: &Cli) -> Result<(), CliError> {
    let cfg: MonteCarloConfig = match &cli.config {
        Some(p) => config::load(p)?,
        None => MonteCarloConfig::default(),
    };
    let seed = seed(cli, cfg.seed)?;
    let mc = cfg.to_mc();
    mc.validate().map_err(CliError::input)?;
    let report = run_mc(&mc, seed, cli.jobs)?;
    let dir = out_dir(cli)?;
    report.write_reps_csv(&dir.join("mc_reps.csv")).map_err(library_output)?;
    write_text(&dir.join("mc.txt"), &report.to_string())?;
    write_json(&dir.join("mc.json"), &report)
}
