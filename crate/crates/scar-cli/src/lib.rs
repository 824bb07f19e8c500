//! Experiment harness: sweep objectives x horizons x seeds over a scenario,
//! aggregate uptime metrics, and emit machine-readable results.
//!
//! Seeds are paired across objective kinds: run `r` of every kind uses seed
//! `base_seed + r` and therefore starts from identical initial levels, so
//! per-seed comparisons between kinds share their initial conditions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use scar_core::{compute_metrics, load_config, run_simulation, ObjectiveKind, ScenarioConfig};

/// What to run: the full cross product of objectives, horizons and seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub scenario_path: PathBuf,
    pub objectives: Vec<ObjectiveKind>,
    pub horizons: Vec<usize>,
    pub repeats: usize,
    pub base_seed: u64,
    /// Overrides the scenario file's simulation duration when set.
    pub sim_duration_s: Option<f64>,
    pub workers: usize,
}

impl ExperimentPlan {
    pub fn new(scenario_path: impl Into<PathBuf>) -> Self {
        Self {
            scenario_path: scenario_path.into(),
            objectives: ObjectiveKind::ALL.to_vec(),
            horizons: Vec::new(),
            repeats: 40,
            base_seed: 42,
            sim_duration_s: None,
            workers: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.repeats < 1 {
            bail!("repeats must be at least 1");
        }
        if self.objectives.is_empty() {
            bail!("at least one objective is required");
        }
        if self.horizons.iter().any(|&h| h < 1) {
            bail!("horizons must be at least 1");
        }
        Ok(())
    }
}

/// Default horizon sets per fleet size, following the study layout.
pub fn default_horizons(n_users: usize) -> Vec<usize> {
    match n_users {
        4 => vec![5, 7, 12],
        5 | 6 => vec![7, 8, 9],
        _ => vec![7],
    }
}

/// One simulation run's result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scenario: String,
    pub objective: ObjectiveKind,
    pub horizon: usize,
    pub seed: u64,
    pub percent_uptime: f64,
    pub full_uptime: bool,
    pub per_agent_uptime: Vec<f64>,
    pub nodes_expanded: u64,
    pub initial_levels: Vec<f64>,
    pub initial_replenisher_level: f64,
}

/// Summary statistics for one (objective, horizon) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub objective: ObjectiveKind,
    pub horizon: usize,
    pub runs: usize,
    pub median_percent_uptime: f64,
    pub q1_percent_uptime: f64,
    pub q3_percent_uptime: f64,
    pub min_percent_uptime: f64,
    pub max_percent_uptime: f64,
    pub full_uptime_percent: f64,
    pub mean_nodes_expanded: f64,
    /// Wall-clock seconds spent on the cell; excluded from determinism
    /// comparisons since timing is not reproducible.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub scenario: String,
    pub base_seed: u64,
    pub sim_duration_s: f64,
    /// How seeds map to runs, recorded so the pairing is explicit in the
    /// output.
    pub seed_pairing: String,
    pub aggregates: Vec<AggregateResult>,
    #[serde(skip)]
    pub rows: Vec<RunRow>,
}

/// Serialisable mirror of the aggregate output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateFile {
    pub scenario: String,
    pub base_seed: u64,
    pub sim_duration_s: f64,
    pub seed_pairing: String,
    pub aggregates: Vec<AggregateResult>,
}

/// Linear-interpolation quantile of pre-sorted data (the convention used by
/// most statistics packages).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn scenario_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into())
}

/// Run one (objective, horizon) cell: `repeats` seeded simulations.
pub fn run_cell(
    config: &ScenarioConfig,
    scenario: &str,
    objective: ObjectiveKind,
    horizon: usize,
    repeats: usize,
    base_seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(Vec<RunRow>, AggregateResult)> {
    let started = Instant::now();
    let run_one = |r: usize| -> Result<RunRow> {
        let seed = base_seed + r as u64;
        let record = run_simulation(config, objective, horizon, seed)
            .with_context(|| format!("{objective} h={horizon} seed={seed}"))?;
        let metrics = compute_metrics(&record, config.n_users(), config.sim_duration);
        Ok(RunRow {
            scenario: scenario.to_string(),
            objective,
            horizon,
            seed,
            percent_uptime: metrics.percent_uptime,
            full_uptime: metrics.full_uptime,
            per_agent_uptime: metrics.per_agent_uptime,
            nodes_expanded: record.nodes_expanded,
            initial_levels: record.initial_state.user_levels.clone(),
            initial_replenisher_level: record.initial_state.replenisher_level,
        })
    };

    let rows: Vec<RunRow> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            (0..repeats)
                .into_par_iter()
                .map(run_one)
                .collect::<Result<Vec<_>>>()
        })?,
        None => (0..repeats).map(run_one).collect::<Result<Vec<_>>>()?,
    };

    let mut uptimes: Vec<f64> = rows.iter().map(|r| r.percent_uptime).collect();
    uptimes.sort_by(f64::total_cmp);
    let full = rows.iter().filter(|r| r.full_uptime).count();
    let aggregate = AggregateResult {
        objective,
        horizon,
        runs: repeats,
        median_percent_uptime: quantile(&uptimes, 0.5),
        q1_percent_uptime: quantile(&uptimes, 0.25),
        q3_percent_uptime: quantile(&uptimes, 0.75),
        min_percent_uptime: uptimes[0],
        max_percent_uptime: uptimes[uptimes.len() - 1],
        full_uptime_percent: 100.0 * full as f64 / repeats as f64,
        mean_nodes_expanded: rows.iter().map(|r| r.nodes_expanded as f64).sum::<f64>()
            / repeats as f64,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((rows, aggregate))
}

/// Load the plan's scenario, applying the duration override.
pub fn load_plan_config(plan: &ExperimentPlan) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(&plan.scenario_path)
        .with_context(|| format!("reading {}", plan.scenario_path.display()))?;
    let mut config = load_config(&text)?;
    if let Some(duration) = plan.sim_duration_s {
        if !duration.is_finite() || duration <= 0.0 {
            bail!("duration must be positive (got {duration})");
        }
        config.sim_duration = duration;
    }
    Ok(config)
}

/// Run the whole plan and aggregate every cell.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentResults> {
    plan.validate()?;
    let config = load_plan_config(plan)?;
    let horizons = if plan.horizons.is_empty() {
        default_horizons(config.n_users())
    } else {
        plan.horizons.clone()
    };
    let scenario = scenario_name(&plan.scenario_path);
    let pool = build_pool(plan.workers)?;

    let mut rows = Vec::with_capacity(plan.objectives.len() * horizons.len() * plan.repeats);
    let mut aggregates = Vec::new();
    for &objective in &plan.objectives {
        for &horizon in &horizons {
            let (cell_rows, aggregate) = run_cell(
                &config,
                &scenario,
                objective,
                horizon,
                plan.repeats,
                plan.base_seed,
                pool.as_ref(),
            )?;
            rows.extend(cell_rows);
            aggregates.push(aggregate);
        }
    }

    Ok(ExperimentResults {
        scenario,
        base_seed: plan.base_seed,
        sim_duration_s: config.sim_duration,
        seed_pairing: "seed = base_seed + run_index; identical seed sets across objectives"
            .to_string(),
        aggregates,
        rows,
    })
}

pub fn build_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    Ok(Some(
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()?,
    ))
}

/// CSV header for a fleet of `n` users.
pub fn csv_header(n: usize) -> Vec<String> {
    let mut cols = vec![
        "scenario".to_string(),
        "objective".to_string(),
        "horizon".to_string(),
        "seed".to_string(),
        "percent_uptime".to_string(),
        "full_uptime".to_string(),
    ];
    cols.extend((0..n).map(|i| format!("uptime_agent_{i}")));
    cols.push("nodes_expanded".to_string());
    cols.extend((0..n).map(|i| format!("initial_level_{i}")));
    cols.push("initial_replenisher_level".to_string());
    cols
}

pub fn csv_row(row: &RunRow) -> Vec<String> {
    let mut cols = vec![
        row.scenario.clone(),
        row.objective.to_string(),
        row.horizon.to_string(),
        row.seed.to_string(),
        format!("{}", row.percent_uptime),
        row.full_uptime.to_string(),
    ];
    cols.extend(row.per_agent_uptime.iter().map(|u| format!("{u}")));
    cols.push(row.nodes_expanded.to_string());
    cols.extend(row.initial_levels.iter().map(|l| format!("{l}")));
    cols.push(format!("{}", row.initial_replenisher_level));
    cols
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

/// Write the results under `dir` in the chosen format: per-run rows for
/// [`OutputFormat::Csv`], the aggregate set for [`OutputFormat::Json`].
pub fn emit_results(
    results: &ExperimentResults,
    n_users: usize,
    format: OutputFormat,
    dir: &Path,
) -> Result<PathBuf> {
    match format {
        OutputFormat::Csv => emit_csv(results, n_users, dir),
        OutputFormat::Json => emit_json(results, dir),
    }
}

/// Write per-run rows as `runs.csv` under `dir`.
pub fn emit_csv(results: &ExperimentResults, n_users: usize, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("runs.csv");
    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(csv_header(n_users))?;
    for row in &results.rows {
        writer.write_record(csv_row(row))?;
        writer.flush()?;
    }
    Ok(path)
}

/// Write the aggregate set as `aggregates.json` under `dir`.
pub fn emit_json(results: &ExperimentResults, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("aggregates.json");
    let file = AggregateFile {
        scenario: results.scenario.clone(),
        base_seed: results.base_seed,
        sim_duration_s: results.sim_duration_s,
        seed_pairing: results.seed_pairing.clone(),
        aggregates: results.aggregates.clone(),
    };
    let mut out = fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut out, &file)?;
    out.write_all(b"\n")?;
    Ok(path)
}

/// Human summary table of the aggregates.
pub fn summary_table(results: &ExperimentResults) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7} {:>12}\n",
        "objective", "horizon", "median%", "q1%", "q3%", "min%", "max%", "full%", "nodes/run"
    ));
    for a in &results.aggregates {
        out.push_str(&format!(
            "{:<10} {:>7} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>7.1} {:>12.0}\n",
            a.objective.to_string(),
            a.horizon,
            a.median_percent_uptime,
            a.q1_percent_uptime,
            a.q3_percent_uptime,
            a.min_percent_uptime,
            a.max_percent_uptime,
            a.full_uptime_percent,
            a.mean_nodes_expanded,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_linear_interpolation() {
        let data = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&data, 0.0), 1.0);
        assert_eq!(quantile(&data, 1.0), 4.0);
        assert_eq!(quantile(&data, 0.5), 2.5);
        assert_eq!(quantile(&data, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.5), 7.0);
    }

    #[test]
    fn horizon_defaults_follow_fleet_size() {
        assert_eq!(default_horizons(4), vec![5, 7, 12]);
        assert_eq!(default_horizons(5), vec![7, 8, 9]);
        assert_eq!(default_horizons(6), vec![7, 8, 9]);
        assert_eq!(default_horizons(3), vec![7]);
    }
}
