use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scar_cli::{
    build_pool, default_horizons, emit_json, load_plan_config, run_cell, summary_table,
    ExperimentPlan, ExperimentResults, OutputFormat,
};
use scar_core::{
    astar_schedule, evaluate, load_config, FleetState, ObjectiveKind, ScenarioConfig, ScenarioError,
};

#[derive(Parser)]
#[command(
    name = "scar",
    version,
    about = "Optimal replenishment scheduling and closed-loop simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep objectives x horizons x seeds and emit per-run or aggregate results
    Run(RunArgs),
    /// Compute one optimal schedule for a fleet state and print it
    PlanOnce(PlanOnceArgs),
    /// Schema-check a scenario file
    Validate {
        /// Scenario file to check
        scenario: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file
    #[arg(long)]
    scenario: PathBuf,
    /// Objectives to test (dt, st, dr, sr); defaults to all four
    #[arg(long = "objective", value_delimiter = ',', value_parser = parse_objective)]
    objectives: Vec<ObjectiveKind>,
    /// Schedule horizons; defaults depend on the fleet size
    #[arg(long = "horizon")]
    horizons: Vec<usize>,
    /// Simulation runs per (objective, horizon) cell
    #[arg(long, default_value_t = 40)]
    repeats: usize,
    /// Base seed; run r uses base + r for every objective
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Override the scenario's simulation duration, seconds
    #[arg(long = "duration-s")]
    duration_s: Option<f64>,
    /// Output directory
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// csv writes per-run rows (runs.csv); json writes aggregates.json
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
    /// Worker threads for runs within a cell
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct PlanOnceArgs {
    /// Scenario file
    #[arg(long)]
    scenario: PathBuf,
    /// Fleet state file (TOML); defaults to a full fleet at the depot
    #[arg(long)]
    state: Option<PathBuf>,
    /// Objective kind (dt, st, dr, sr)
    #[arg(long, value_parser = parse_objective)]
    objective: ObjectiveKind,
    /// Number of tasks in the schedule
    #[arg(long)]
    horizon: usize,
}

fn parse_objective(s: &str) -> Result<ObjectiveKind, String> {
    s.parse()
}

enum CliError {
    /// Bad input: malformed scenario/state files or invalid plan parameters.
    Validation(String),
    /// Everything else.
    Runtime(String),
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::PlanOnce(args) => plan_once(args),
        Command::Validate { scenario } => validate(scenario),
    }
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let mut plan = ExperimentPlan::new(args.scenario);
    if !args.objectives.is_empty() {
        plan.objectives = args.objectives;
    }
    plan.horizons = args.horizons;
    plan.repeats = args.repeats;
    plan.base_seed = args.seed;
    plan.sim_duration_s = args.duration_s;
    plan.workers = args.workers;

    // Validate the scenario (and plan shape) before burning compute.
    let config = load_plan_config(&plan).map_err(|e| CliError::Validation(e.to_string()))?;
    if plan.repeats < 1 {
        return Err(CliError::Validation("repeats must be at least 1".into()));
    }
    if plan.horizons.iter().any(|&h| h < 1) {
        return Err(CliError::Validation("horizons must be at least 1".into()));
    }
    let horizons = if plan.horizons.is_empty() {
        default_horizons(config.n_users())
    } else {
        plan.horizons.clone()
    };
    eprintln!(
        "running {} objective(s) x {:?} horizons x {} repeats on {} ({} users, {} s)",
        plan.objectives.len(),
        horizons,
        plan.repeats,
        plan.scenario_path.display(),
        config.n_users(),
        config.sim_duration,
    );

    let format: OutputFormat = args
        .format
        .parse()
        .map_err(|e: String| CliError::Validation(e))?;
    let runtime = |e: anyhow::Error| CliError::Runtime(format!("{e:#}"));
    let io_err = |e: std::io::Error| CliError::Runtime(e.to_string());
    std::fs::create_dir_all(&args.out).map_err(io_err)?;

    // Run cell by cell, flushing after each so an interrupted sweep still
    // leaves complete partial results behind.
    let pool = build_pool(plan.workers).map_err(runtime)?;
    let scenario_label = plan
        .scenario_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    let mut results = ExperimentResults {
        scenario: scenario_label.clone(),
        base_seed: plan.base_seed,
        sim_duration_s: config.sim_duration,
        seed_pairing: "seed = base_seed + run_index; identical seed sets across objectives"
            .to_string(),
        aggregates: Vec::new(),
        rows: Vec::new(),
    };
    let mut csv_writer = match format {
        OutputFormat::Csv => {
            let mut writer =
                csv::Writer::from_path(args.out.join("runs.csv")).map_err(|e| runtime(e.into()))?;
            writer
                .write_record(scar_cli::csv_header(config.n_users()))
                .map_err(|e| runtime(e.into()))?;
            Some(writer)
        }
        OutputFormat::Json => None,
    };

    for &objective in &plan.objectives {
        for &horizon in &horizons {
            let (rows, aggregate) = run_cell(
                &config,
                &scenario_label,
                objective,
                horizon,
                plan.repeats,
                plan.base_seed,
                pool.as_ref(),
            )
            .map_err(runtime)?;
            if let Some(writer) = &mut csv_writer {
                for row in &rows {
                    writer
                        .write_record(scar_cli::csv_row(row))
                        .map_err(|e| runtime(e.into()))?;
                }
                writer.flush().map_err(io_err)?;
            }
            results.rows.extend(rows);
            results.aggregates.push(aggregate);
            if format == OutputFormat::Json {
                emit_json(&results, &args.out).map_err(runtime)?;
            }
        }
    }

    let written = match format {
        OutputFormat::Csv => args.out.join("runs.csv"),
        OutputFormat::Json => args.out.join("aggregates.json"),
    };
    print!("{}", summary_table(&results));
    eprintln!("wrote {}", written.display());
    Ok(())
}

fn plan_once(args: PlanOnceArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.scenario)
        .map_err(|e| CliError::Validation(format!("reading {}: {e}", args.scenario.display())))?;
    let config = load_config(&text)?;
    if args.horizon < 1 {
        return Err(CliError::Validation("horizon must be at least 1".into()));
    }
    let state = match &args.state {
        Some(path) => load_state_file(path, &config)?,
        None => FleetState::full_at_depot(&config),
    };

    let outcome = astar_schedule(&config, &state, args.horizon, args.objective)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let cost = evaluate(args.objective, &config, &state, &outcome.schedule)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    println!("objective: {}   horizon: {}", args.objective, args.horizon);
    println!("schedule: {}", outcome.schedule);
    println!("cost: {:.6}", cost.value);
    println!("nodes expanded: {}", outcome.stats.nodes_expanded);

    let prediction = if args.objective.is_stochastic() {
        scar_core::rollout_stochastic(&config, &state, &outcome.schedule)
    } else {
        scar_core::rollout_deterministic(&config, &state, &outcome.schedule)
    }
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("expected total time: {:.1} s", prediction.total_time.mean);
    for (i, e) in prediction.empty_time.iter().enumerate() {
        println!("expected empty time agent {i}: {:.1} s", e.mean);
    }
    Ok(())
}

/// Fleet state document: `clock`, `user_levels`, `replenisher_level`,
/// `replenisher_location` (a node id).
#[derive(serde::Deserialize)]
struct StateDoc {
    #[serde(default)]
    clock: f64,
    user_levels: Vec<f64>,
    replenisher_level: f64,
    replenisher_location: String,
}

fn load_state_file(path: &PathBuf, config: &ScenarioConfig) -> Result<FleetState, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("reading {}: {e}", path.display())))?;
    let doc: StateDoc = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let location = config
        .network
        .node(&doc.replenisher_location)
        .ok_or_else(|| {
            CliError::Validation(format!("unknown node id `{}`", doc.replenisher_location))
        })?;
    let state = FleetState {
        clock: doc.clock,
        user_levels: doc.user_levels,
        replenisher_level: doc.replenisher_level,
        replenisher_location: location,
    };
    state
        .validate(config)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(state)
}

fn validate(scenario: PathBuf) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&scenario)
        .map_err(|e| CliError::Validation(format!("reading {}: {e}", scenario.display())))?;
    let config = load_config(&text)?;
    println!(
        "ok: {} users, {} nodes, {} edges, sim duration {} s, depot threshold {} L, default horizons {:?}",
        config.n_users(),
        config.network.node_count(),
        config.network.edge_count(),
        config.sim_duration,
        config.depot_threshold(),
        default_horizons(config.n_users()),
    );
    Ok(())
}
