//! Command-line front end. [`run`] parses arguments, dispatches and returns
//! the process exit code: 0 on success, 1 on numerical failure or a failed
//! check, 2 on configuration or usage errors.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::cascade::{objective, water_balance_residual, Cascade, ControlTrajectory, Trajectory};
use crate::config::{parse_config, parse_config_str, Format, RunConfig, TWO_PLANT_JSON};
use crate::error::{ConfigIssue, Error, Result};
use crate::example::{self, TwoPlantExample};
use crate::nco::{self, NcoReport};
use crate::ocp::{self, Problem, StageRecord, SwitchTime};
use crate::output::{emit_results, report_json};
use crate::spillway::{gamma_sweep, simulate_exact, simulate_penalty, PenaltyConfig, SweepReport};

#[derive(Debug, Parser)]
#[command(name = "hydrocascade", version, about = "Hydro cascades with uncontrolled spillways")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides output.directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Penalty strength; a comma-separated list for sweep-gamma.
    #[arg(long, global = true, value_delimiter = ',')]
    pub gamma: Vec<f64>,
    /// Number of grid cells (overrides grid.N).
    #[arg(long = "grid-n", global = true)]
    pub grid_n: Option<usize>,
    /// Base seed for multistart draws (overrides solver.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write only this kind of output.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Initial downstream volume for check-nco.
    #[arg(long, global = true, default_value_t = 7.2)]
    pub v0: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate the configuration.
    Validate,
    /// Simulate the configured control with exact spillway complementarity.
    SimulateExact,
    /// Simulate the configured control with the exponential penalty spill.
    SimulatePenalty,
    /// Compare penalty trajectories for several gammas with the exact one.
    SweepGamma,
    /// Solve the periodic profit problem by penalty continuation.
    Optimize,
    /// Check the closed-form two-plant multipliers against the optimality conditions.
    CheckNco,
    /// Run the two-plant benchmark end to end and print a pass/fail summary.
    Example,
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn usage(path: &str, message: &str) -> Error {
    Error::Config(vec![ConfigIssue {
        path: path.into(),
        message: message.into(),
    }])
}

fn load(cli: &Cli, required: bool) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, required) {
        (Some(p), _) => parse_config(p)?,
        (None, true) => return Err(usage("--config", "a configuration file is required")),
        (None, false) => parse_config_str(TWO_PLANT_JSON)?,
    };
    if let Some(n) = cli.grid_n {
        cfg.grid.cells = n;
    }
    if let Some(s) = cli.seed {
        cfg.solver.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn formats(cli: &Cli, cfg: &RunConfig) -> Vec<Format> {
    match cli.format {
        Some(f) => vec![f],
        None => cfg.output.formats.clone(),
    }
}

/// Writes into the output directory when one is set, otherwise prints the
/// report to stdout.
fn finish(
    cli: &Cli,
    cfg: &RunConfig,
    report: &impl Serialize,
    trajectory: Option<(&Trajectory, &ControlTrajectory)>,
) -> Result<()> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.directory.as_ref().map(PathBuf::from));
    match dir {
        Some(d) => {
            for p in emit_results(&d, report, trajectory, &formats(cli, cfg))? {
                println!("wrote {}", p.display());
            }
        }
        None => print!("{}", report_json(report)?),
    }
    Ok(())
}

fn required_control(cfg: &RunConfig) -> Result<(Vec<f64>, ControlTrajectory)> {
    cfg.fixed_control()?
        .ok_or_else(|| usage("control", "this command needs a control section"))
}

#[derive(Debug, Serialize)]
struct SimulationReport {
    command: &'static str,
    gamma: Option<f64>,
    objective: f64,
    water_balance_residual: f64,
    complementarity_residual: f64,
    max_upper_violation: f64,
    periodicity_gap: f64,
}

fn simulation_report(
    command: &'static str,
    gamma: Option<f64>,
    traj: &Trajectory,
    u: &ControlTrajectory,
    cfg: &RunConfig,
    cascade: &Cascade,
) -> Result<SimulationReport> {
    let n = cascade.n_plants();
    let upper = traj
        .volumes
        .iter()
        .enumerate()
        .map(|(idx, v)| v - cascade.plants[idx % n].v_max)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SimulationReport {
        command,
        gamma,
        objective: objective(u, traj, &cfg.price_signal()?, cascade)?,
        water_balance_residual: water_balance_residual(traj, u, cascade)?,
        complementarity_residual: traj.spill_slack.iter().fold(0.0, |m, x| m.max(x.abs())),
        max_upper_violation: upper,
        periodicity_gap: traj.periodicity_gap(),
    })
}

#[derive(Debug, Serialize)]
struct PlantSwitches {
    plant: usize,
    switches: Vec<SwitchTime>,
}

#[derive(Debug, Serialize)]
struct OptimizeReport {
    command: &'static str,
    exact_profit: f64,
    initial_volumes: Vec<f64>,
    exact_periodicity_gap: f64,
    water_balance_residual: f64,
    complementarity_residual: f64,
    seed: Option<u64>,
    switching_times: Vec<PlantSwitches>,
    stages: Vec<StageRecord>,
}

fn optimize(cfg: &RunConfig) -> Result<(OptimizeReport, ocp::SolveReport)> {
    let cascade = cfg.cascade()?;
    let problem = Problem::new(cascade.clone(), cfg.price_signal()?, cfg.time_grid()?)?;
    let r = ocp::multistart(&problem, &cfg.solver)?;
    let report = OptimizeReport {
        command: "optimize",
        exact_profit: r.exact_profit,
        initial_volumes: r.decision.v0.clone(),
        exact_periodicity_gap: r.exact_periodicity_gap,
        water_balance_residual: water_balance_residual(&r.trajectory, &r.decision.u, &cascade)?,
        complementarity_residual: r
            .trajectory
            .spill_slack
            .iter()
            .fold(0.0, |m, x| m.max(x.abs())),
        seed: r.seed,
        switching_times: (0..cascade.n_plants())
            .map(|i| PlantSwitches {
                plant: i + 1,
                switches: ocp::switching_times(&r.decision.u, i, &cascade),
            })
            .collect(),
        stages: r.stages.clone(),
    };
    Ok((report, r))
}

#[derive(Debug, Serialize)]
struct NcoOutput {
    command: &'static str,
    v0: f64,
    passed: bool,
    report: NcoReport,
}

fn check_nco(cfg: &RunConfig, v0: f64) -> Result<(NcoOutput, example::AnalyticSolution)> {
    let cascade = cfg.cascade()?;
    let price = cfg.price_signal()?;
    if !TwoPlantExample::matches(&cascade, &price) {
        return Err(usage(
            "plants",
            "check-nco needs the two-plant benchmark data (closed-form multipliers)",
        ));
    }
    let grid = cfg.time_grid()?;
    let sol = example::analytic_solution(v0, &grid)?;
    let bundle = nco::synthesize_example_multipliers(v0, &grid)?;
    let report = nco::check_nco(&bundle, &sol.trajectory, &sol.control, &price, &cascade)?;
    Ok((
        NcoOutput {
            command: "check-nco",
            v0,
            passed: report.passes(1e-6),
            report,
        },
        sol,
    ))
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

#[derive(Debug, Serialize)]
struct ExampleReport {
    command: &'static str,
    checks: Vec<Check>,
}

fn example_pipeline(cfg: &RunConfig) -> Result<ExampleReport> {
    let mut checks = Vec::new();
    let f = example::objective_closed_form(7.2)?;
    let v = example::optimal_v0();
    checks.push(Check {
        name: "oracle",
        passed: (v - 7.2).abs() < 1e-9 && (f - 4070.4).abs() < 1e-6,
        detail: format!("argmax {v:.12}, profit {f:.6}"),
    });

    let cascade = TwoPlantExample::cascade();
    let grid = cfg.time_grid()?;
    let sol = example::analytic_solution(7.2, &grid)?;
    let sim = simulate_exact(&cascade, &sol.control, &[5.0, 7.2])?;
    let dev = sim
        .volumes
        .iter()
        .zip(&sol.trajectory.volumes)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let s1 = sim.spill_series(0).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    checks.push(Check {
        name: "exact simulation",
        passed: dev < 1e-9 && s1 < 1e-9,
        detail: format!("max volume deviation {dev:.3e}, max |s1 - 1| {s1:.3e}"),
    });

    let (nco_out, _) = check_nco(cfg, 7.2)?;
    checks.push(Check {
        name: "optimality conditions",
        passed: nco_out.passed,
        detail: format!(
            "adjoint {:.3e}, periodicity {:.3e}, violations {}",
            nco_out.report.adjoint_residual,
            nco_out.report.periodicity_gap,
            nco_out.report.violating_cells.len()
        ),
    });

    let (rep, _) = optimize(cfg)?;
    let v2 = rep.initial_volumes[1];
    let sw: Vec<f64> = rep.switching_times[1].switches.iter().map(|s| s.time).collect();
    let tol = 2.0 * grid.dt() + 1e-9;
    let switches_ok =
        sw.len() == 2 && (sw[0] - 1.6).abs() <= tol && (sw[1] - 11.2).abs() <= tol;
    checks.push(Check {
        name: "optimizer",
        passed: (v2 - 7.2).abs() <= 0.05
            && switches_ok
            && (rep.exact_profit - f).abs() <= 0.005 * f,
        detail: format!("V2(0) {v2:.6}, switches {sw:?}, profit {:.6}", rep.exact_profit),
    });
    Ok(ExampleReport {
        command: "example",
        checks,
    })
}

fn gammas(cli: &Cli, default: &[f64]) -> Result<Vec<f64>> {
    let g = if cli.gamma.is_empty() {
        default.to_vec()
    } else {
        cli.gamma.clone()
    };
    if g.iter().any(|x| !(*x > 1.0 && x.is_finite())) {
        return Err(usage("--gamma", "values must be finite and exceed 1"));
    }
    if g.windows(2).any(|w| w[1] <= w[0]) {
        return Err(usage("--gamma", "values must be strictly increasing"));
    }
    Ok(g)
}

/// Executes the parsed command; `Ok(false)` means a check failed.
pub fn dispatch(cli: &Cli) -> Result<bool> {
    match cli.command {
        Command::Validate => {
            let cfg = load(cli, true)?;
            println!(
                "valid: {} plants, {} cells, horizon {}",
                cfg.plants.len(),
                cfg.grid.cells,
                cfg.horizon
            );
            Ok(true)
        }
        Command::SimulateExact => {
            let cfg = load(cli, true)?;
            let cascade = cfg.cascade()?;
            let (v0, u) = required_control(&cfg)?;
            let traj = simulate_exact(&cascade, &u, &v0)?;
            let rep = simulation_report("simulate-exact", None, &traj, &u, &cfg, &cascade)?;
            finish(cli, &cfg, &rep, Some((&traj, &u)))?;
            Ok(true)
        }
        Command::SimulatePenalty => {
            let cfg = load(cli, true)?;
            let cascade = cfg.cascade()?;
            let (v0, u) = required_control(&cfg)?;
            let g = gammas(cli, &[100.0])?;
            if g.len() != 1 {
                return Err(usage("--gamma", "simulate-penalty takes a single value"));
            }
            let mut pc = PenaltyConfig::new(g[0]);
            pc.per_plant_exponent = cfg.solver.per_plant_exponent;
            let traj = simulate_penalty(&cascade, &u, &v0, &pc)?;
            let rep =
                simulation_report("simulate-penalty", Some(g[0]), &traj, &u, &cfg, &cascade)?;
            finish(cli, &cfg, &rep, Some((&traj, &u)))?;
            Ok(true)
        }
        Command::SweepGamma => {
            let cfg = load(cli, true)?;
            let cascade = cfg.cascade()?;
            let (v0, u) = required_control(&cfg)?;
            let g = gammas(cli, &[25.0, 50.0, 100.0, 200.0])?;
            let mut pc = PenaltyConfig::new(g[0]);
            pc.per_plant_exponent = cfg.solver.per_plant_exponent;
            let sweep: SweepReport = gamma_sweep(&cascade, &u, &v0, &g, &pc)?;
            let exact = simulate_exact(&cascade, &u, &v0)?;
            finish(cli, &cfg, &sweep, Some((&exact, &u)))?;
            Ok(true)
        }
        Command::Optimize => {
            let cfg = load(cli, true)?;
            let (rep, r) = optimize(&cfg)?;
            finish(cli, &cfg, &rep, Some((&r.trajectory, &r.decision.u)))?;
            Ok(true)
        }
        Command::CheckNco => {
            let cfg = load(cli, false)?;
            let (out, sol) = check_nco(&cfg, cli.v0)?;
            let passed = out.passed;
            finish(cli, &cfg, &out, Some((&sol.trajectory, &sol.control)))?;
            Ok(passed)
        }
        Command::Example => {
            let cfg = load(cli, false)?;
            let rep = example_pipeline(&cfg)?;
            for c in &rep.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            let passed = rep.checks.iter().all(|c| c.passed);
            if cli.out.is_some() {
                finish(cli, &cfg, &rep, None)?;
            }
            Ok(passed)
        }
    }
}
