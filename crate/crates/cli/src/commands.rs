use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use conlq::config::{parse_config, ConfigError, Parsed, Problem};
use conlq::finite_horizon::{export_gain_schedule, solve_riccati_pair, RiccatiOptions, RiccatiSolution};
use conlq::infinite_horizon::{
    log_grid, solve_stationary, stationary_value, StationaryOptions, StationaryOutcome, StationaryProblem,
    StationarySolution,
};
use conlq::meanvar::{
    benchmark_csv, buy_and_hold, default_frontier_sim, efficient_frontier, embed, frontier_csv, solve_mv,
    verify_terminal_mean, wealth_paths_csv, MvProblem, MvSolution,
};
use conlq::qp::{check_feasibility, QpOptions};
use conlq::simulate::{estimate_value, simulate_paths, Estimate, PathEnsemble, SimConfig};
use conlq::{Branch, ProblemData};
use serde::Serialize;
use serde_json::json;

use crate::report::{write_atomic, write_json, Line};
use crate::{Cli, Command, Common};

pub enum Outcome {
    Done,
    NoSolution,
}

pub enum Failure {
    Config { path: PathBuf, error: ConfigError },
    WrongKind { path: PathBuf, expected: &'static str, found: &'static str },
    Solver { event: &'static str, message: String },
    Io { path: PathBuf, error: std::io::Error },
    Usage(String),
}

impl Failure {
    fn solver(event: &'static str, e: impl Display) -> Self {
        Failure::Solver {
            event,
            message: e.to_string(),
        }
    }

    pub fn emit(&self) {
        match self {
            Failure::Config { path, error } => {
                let line = Line::new("error", "config").field("file", path.display());
                match error {
                    ConfigError::Io { source, .. } => line.field("kind", "io").field("message", source),
                    ConfigError::Parse { line: l, column, message } => line
                        .field("kind", "parse")
                        .field("line", l)
                        .field("column", column)
                        .field("message", message),
                    ConfigError::Validation(v) => {
                        let line = line.field("kind", "validation").field("assumption", v.assumption.label());
                        let line = match v.grid_index {
                            Some(i) => line.field("grid_index", i),
                            None => line,
                        };
                        line.field("message", &v.message)
                    }
                }
                .emit()
            }
            Failure::WrongKind { path, expected, found } => Line::new("error", "config")
                .field("file", path.display())
                .field("kind", "wrong-kind")
                .field("expected", expected)
                .field("found", found)
                .emit(),
            Failure::Solver { event, message } => Line::new("error", event).field("message", message).emit(),
            Failure::Io { path, error } => Line::new("error", "io")
                .field("path", path.display())
                .field("message", error)
                .emit(),
            Failure::Usage(message) => Line::new("error", "usage").field("message", message).emit(),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn kind_name(p: &Problem) -> &'static str {
    match p {
        Problem::Finite(_) => "finite",
        Problem::Stationary(_) => "stationary",
        Problem::MeanVariance(_) => "mean_variance",
    }
}

fn load(path: &Path, steps: Option<usize>) -> Result<Problem> {
    let Parsed { problem, warnings } = parse_config(path, steps).map_err(|error| Failure::Config {
        path: path.to_path_buf(),
        error,
    })?;
    for w in warnings {
        Line::new("warn", "assumption").field("file", path.display()).field("message", w).emit();
    }
    Ok(problem)
}

fn wrong_kind(path: &Path, expected: &'static str, found: &Problem) -> Failure {
    Failure::WrongKind {
        path: path.to_path_buf(),
        expected,
        found: kind_name(found),
    }
}

fn load_finite(path: &Path, c: &Common) -> Result<ProblemData> {
    match load(path, c.grid)? {
        Problem::Finite(d) => Ok(d),
        other => Err(wrong_kind(path, "finite", &other)),
    }
}

fn load_stationary(path: &Path) -> Result<StationaryProblem> {
    match load(path, None)? {
        Problem::Stationary(p) => Ok(p),
        other => Err(wrong_kind(path, "stationary", &other)),
    }
}

fn load_mv(path: &Path, c: &Common) -> Result<MvProblem> {
    match load(path, c.grid)? {
        Problem::MeanVariance(p) => Ok(p),
        other => Err(wrong_kind(path, "mean_variance", &other)),
    }
}

struct Output<'a> {
    dir: &'a Path,
}

impl Output<'_> {
    fn io(&self, name: &str, error: std::io::Error) -> Failure {
        Failure::Io {
            path: self.dir.join(name),
            error,
        }
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = write_json(self.dir, name, value).map_err(|e| self.io(name, e))?;
        Line::new("info", "wrote").field("path", path.display()).emit();
        Ok(())
    }

    fn text(&self, name: &str, contents: &str) -> Result<()> {
        let path = write_atomic(self.dir, name, contents).map_err(|e| self.io(name, e))?;
        Line::new("info", "wrote").field("path", path.display()).emit();
        Ok(())
    }
}

fn qp_options(c: &Common) -> QpOptions {
    QpOptions {
        ridge: c.ridge,
        ..QpOptions::default()
    }
}

fn riccati_options(c: &Common) -> RiccatiOptions {
    let mut o = RiccatiOptions {
        qp: qp_options(c),
        ..RiccatiOptions::default()
    };
    if let Some(tol) = c.tol {
        o.switch_tolerance = tol;
    }
    o
}

fn stationary_options(c: &Common) -> StationaryOptions {
    let mut o = StationaryOptions {
        qp: qp_options(c),
        ..StationaryOptions::default()
    };
    if let Some(tol) = c.tol {
        o.root_tolerance = tol;
    }
    if let Some(points) = c.grid {
        o.scan_points = points;
    }
    o
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let c = &cli.common;
    if let Some(tol) = c.tol {
        if !(tol > 0.0) {
            return Err(Failure::Usage(format!("--tol must be positive, got {tol}")));
        }
    }
    fs::create_dir_all(&c.out).map_err(|error| Failure::Io {
        path: c.out.clone(),
        error,
    })?;
    let out = Output { dir: &c.out };
    match &cli.command {
        Command::SolveFinite { config } => solve_finite(config, c, &out),
        Command::SolveStationary { config } => solve_stationary_cmd(config, c, &out),
        Command::ScanF { config, g_min, g_max } => scan_f(config, c, &out, *g_min, *g_max),
        Command::Simulate {
            config,
            x0,
            horizon,
            dt,
            antithetic,
            traces,
        } => simulate(config, c, &out, *x0, *horizon, *dt, *antithetic, *traces),
        Command::MvSolve { config, verify } => mv_solve(config, c, &out, *verify),
        Command::MvFrontier { config, targets } => mv_frontier(config, c, &out, targets),
        Command::MvBenchmark {
            config,
            targets,
            wealth_paths,
        } => mv_benchmark(config, c, &out, targets, *wealth_paths),
        Command::CheckFeasibility { config } => feasibility(config, &out),
    }
}

#[derive(Serialize)]
struct FiniteReport<'a> {
    horizon: f64,
    steps: usize,
    g_hat_0: f64,
    g_bar_0: f64,
    subdivided_steps: usize,
    solution: &'a RiccatiSolution,
}

fn solve_finite(path: &Path, c: &Common, out: &Output) -> Result<Outcome> {
    let data = load_finite(path, c)?;
    let sol = solve_riccati_pair(&data, &riccati_options(c)).map_err(|e| Failure::solver("riccati", e))?;
    Line::new("info", "solved")
        .field("g_hat_0", sol.g_hat[0])
        .field("g_bar_0", sol.g_bar[0])
        .emit();
    out.json(
        "finite_solution.json",
        &FiniteReport {
            horizon: data.horizon(),
            steps: data.steps(),
            g_hat_0: sol.g_hat[0],
            g_bar_0: sol.g_bar[0],
            subdivided_steps: sol.subdivided_steps,
            solution: &sol,
        },
    )?;
    out.text("gains.csv", &export_gain_schedule(&sol))?;
    Ok(Outcome::Done)
}

fn solve_stationary_cmd(path: &Path, c: &Common, out: &Output) -> Result<Outcome> {
    let problem = load_stationary(path)?;
    match solve_stationary(&problem, &stationary_options(c)).map_err(|e| Failure::solver("stationary", e))? {
        StationaryOutcome::Solved(sol) => {
            Line::new("info", "solved")
                .field("g_hat_star", sol.g_hat_star)
                .field("g_bar_star", sol.g_bar_star)
                .field("n_hat", sol.n_hat)
                .field("n_bar", sol.n_bar)
                .emit();
            out.json("stationary_solution.json", &sol)?;
            Ok(Outcome::Done)
        }
        StationaryOutcome::NoSolution(report) => {
            for failure in [&report.hat, &report.bar] {
                Line::new("error", "no-solution")
                    .field("branch", failure.branch.name())
                    .field("message", &failure.message)
                    .emit();
            }
            out.json("no_solution.json", &report)?;
            out.text("scan.csv", &report.scan.to_csv())?;
            Ok(Outcome::NoSolution)
        }
    }
}

fn scan_f(path: &Path, c: &Common, out: &Output, g_min: f64, g_max: f64) -> Result<Outcome> {
    if !(g_min > 0.0 && g_max > g_min) {
        return Err(Failure::Usage(format!("need 0 < g-min < g-max, got {g_min} and {g_max}")));
    }
    let problem = load_stationary(path)?;
    let points = c.grid.unwrap_or(StationaryOptions::default().scan_points);
    let scan = problem
        .scan(&log_grid(g_min, g_max, points), &qp_options(c))
        .map_err(|e| Failure::solver("qp", e))?;
    out.text("scan.csv", &scan.to_csv())?;
    let hat = scan.first_sign_change(Branch::Hat);
    let bar = scan.first_sign_change(Branch::Bar);
    out.json("scan.json", &json!({ "sign_change_hat": hat, "sign_change_bar": bar, "points": points }))?;
    let mut missing = false;
    for (branch, change) in [(Branch::Hat, hat), (Branch::Bar, bar)] {
        if change.is_none() {
            missing = true;
            Line::new("error", "no-solution")
                .field("branch", branch.name())
                .field("message", format!("F has no sign change on [{g_min:e}, {g_max:e}]"))
                .emit();
        }
    }
    Ok(if missing { Outcome::NoSolution } else { Outcome::Done })
}

#[derive(Serialize)]
struct SimulationReport {
    config: SimConfig,
    value: Estimate,
    /// `x0² G(0)` of the branch selected by the sign of `x0`.
    analytic_value: f64,
    terminal_mean: Estimate,
    kept_paths: usize,
    overflowed: usize,
    constraint_violations: usize,
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    path: &Path,
    c: &Common,
    out: &Output,
    x0: f64,
    horizon: Option<f64>,
    dt: Option<f64>,
    antithetic: bool,
    traces: usize,
) -> Result<Outcome> {
    let problem = load(path, c.grid)?;
    let make_config = |default_horizon: f64| -> Result<SimConfig> {
        let horizon = horizon.unwrap_or(default_horizon);
        let mut cfg = SimConfig::new(
            c.paths.unwrap_or(10_000),
            dt.unwrap_or(horizon / 1000.0),
            horizon,
            c.seed,
            x0,
        );
        cfg.antithetic = antithetic;
        cfg.trace_paths = traces.min(100);
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(cfg)
    };
    let branch = if x0 >= 0.0 { Branch::Hat } else { Branch::Bar };
    let (ens, analytic) = match &problem {
        Problem::Finite(data) => {
            if horizon.is_some_and(|h| (h - data.horizon()).abs() > 1e-12) {
                return Err(Failure::Usage("--horizon must equal the config horizon for finite problems".into()));
            }
            let cfg = make_config(data.horizon())?;
            let sol = solve_riccati_pair(data, &riccati_options(c)).map_err(|e| Failure::solver("riccati", e))?;
            let g0 = match branch {
                Branch::Hat => sol.g_hat[0],
                Branch::Bar => sol.g_bar[0],
            };
            let ens = simulate_paths(data, &sol, &cfg).map_err(|e| Failure::solver("simulate", e))?;
            (ens, x0 * x0 * g0)
        }
        Problem::Stationary(p) => {
            let cfg = make_config(2.0)?;
            let sol: StationarySolution = match solve_stationary(p, &stationary_options(c))
                .map_err(|e| Failure::solver("stationary", e))?
            {
                StationaryOutcome::Solved(s) => s,
                StationaryOutcome::NoSolution(_) => {
                    Line::new("error", "no-solution")
                        .field("message", "the stationary problem has no solution; nothing to simulate")
                        .emit();
                    return Ok(Outcome::NoSolution);
                }
            };
            let ens = simulate_paths(p, &sol, &cfg).map_err(|e| Failure::solver("simulate", e))?;
            (ens, stationary_value(&sol, x0))
        }
        Problem::MeanVariance(_) => return Err(wrong_kind(path, "finite or stationary", &problem)),
    };
    write_simulation(out, &ens, analytic)?;
    Ok(Outcome::Done)
}

fn write_simulation(out: &Output, ens: &PathEnsemble, analytic_value: f64) -> Result<()> {
    let value = estimate_value(ens);
    Line::new("info", "simulated")
        .field("value", value.mean)
        .field("std_error", value.std_error)
        .field("analytic_value", analytic_value)
        .emit();
    out.json(
        "simulation.json",
        &SimulationReport {
            config: ens.config,
            value,
            analytic_value,
            terminal_mean: ens.terminal_mean(),
            kept_paths: ens.kept_paths(),
            overflowed: ens.overflowed,
            constraint_violations: ens.constraint_violations,
        },
    )?;
    out.text("moments.csv", &ens.moments_csv())?;
    if !ens.traces.is_empty() {
        out.text("traces.csv", &ens.traces_csv())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MvReport<'a> {
    lambda_star: f64,
    rho_0: f64,
    g_hat_0: f64,
    g_bar_0: f64,
    bar_discount_product: f64,
    riskless_target: f64,
    /// Variance before the penalty term, with vertex `x0/ρ(0)`.
    first_term: f64,
    /// The same expression with `x0 ρ(0)`.
    first_term_alt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    terminal_mean: Option<Estimate>,
    solution: &'a MvSolution,
}

fn mv_solve(path: &Path, c: &Common, out: &Output, verify: bool) -> Result<Outcome> {
    let problem = load_mv(path, c)?;
    let sol = solve_mv(&problem, &riccati_options(c)).map_err(|e| Failure::solver("mean-variance", e))?;
    Line::new("info", "solved")
        .field("lambda_star", sol.lambda_star)
        .field("g_bar_0", sol.riccati.g_bar[0])
        .field("rho_0", sol.rho[0])
        .emit();
    let terminal_mean = if verify {
        let mut sim = default_frontier_sim(&problem);
        sim.seed = c.seed;
        if let Some(p) = c.paths {
            sim.num_paths = p;
        }
        let est = verify_terminal_mean(&problem, &sol, &sim).map_err(|e| Failure::solver("simulate", e))?;
        Line::new("info", "terminal-mean")
            .field("mean", est.mean)
            .field("std_error", est.std_error)
            .field("target", problem.target)
            .emit();
        Some(est)
    } else {
        None
    };
    out.json(
        "mv_solution.json",
        &MvReport {
            lambda_star: sol.lambda_star,
            rho_0: sol.rho[0],
            g_hat_0: sol.riccati.g_hat[0],
            g_bar_0: sol.riccati.g_bar[0],
            bar_discount_product: sol.bar_discount_product(),
            riskless_target: problem.riskless_target(),
            first_term: sol.frontier_first_term(problem.target),
            first_term_alt: sol.frontier_first_term_alt(problem.target),
            terminal_mean,
            solution: &sol,
        },
    )?;
    out.text("mv_gains.csv", &export_gain_schedule(&sol.riccati))?;
    Ok(Outcome::Done)
}

fn default_targets(targets: &[f64]) -> Vec<f64> {
    if targets.is_empty() {
        (0..=8).map(|i| 110.0 + 5.0 * i as f64).collect()
    } else {
        targets.to_vec()
    }
}

fn check_targets(problem: &MvProblem, targets: &[f64]) -> Result<()> {
    let floor = problem.riskless_target();
    match targets.iter().find(|&&d| !(d >= floor)) {
        Some(d) => Err(Failure::Usage(format!("target {d} is below the risk-free roll-up {floor}"))),
        None => Ok(()),
    }
}

fn mv_frontier(path: &Path, c: &Common, out: &Output, targets: &[f64]) -> Result<Outcome> {
    let problem = load_mv(path, c)?;
    let targets = default_targets(targets);
    check_targets(&problem, &targets)?;
    let sol = solve_mv(&problem, &riccati_options(c)).map_err(|e| Failure::solver("mean-variance", e))?;
    let mut sim = default_frontier_sim(&problem);
    sim.seed = c.seed;
    if let Some(p) = c.paths {
        sim.num_paths = p;
    }
    let points = efficient_frontier(&problem, &sol, &targets, &sim).map_err(|e| Failure::solver("frontier", e))?;
    for p in points.iter().filter(|p| p.negative_variance) {
        Line::new("warn", "negative-variance")
            .field("target", p.target)
            .field("first_term", p.first_term)
            .field("penalty", p.penalty.mean)
            .emit();
    }
    out.json("frontier.json", &points)?;
    out.text("frontier.csv", &frontier_csv(&points))?;
    Ok(Outcome::Done)
}

fn mv_benchmark(path: &Path, c: &Common, out: &Output, targets: &[f64], wealth_paths: usize) -> Result<Outcome> {
    let problem = load_mv(path, c)?;
    let targets = default_targets(targets);
    check_targets(&problem, &targets)?;
    let points = targets
        .iter()
        .map(|&d| buy_and_hold(&problem, d))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Failure::solver("benchmark", e))?;
    out.json("benchmark.json", &points)?;
    out.text("benchmark.csv", &benchmark_csv(&points))?;
    if wealth_paths > 0 {
        let sol = solve_mv(&problem, &riccati_options(c)).map_err(|e| Failure::solver("mean-variance", e))?;
        let bench = buy_and_hold(&problem, problem.target).map_err(|e| Failure::solver("benchmark", e))?;
        let steps = problem.grid.len() - 1;
        let csv = wealth_paths_csv(&problem, &sol, &bench, wealth_paths.min(100), steps, c.seed);
        out.text("wealth_paths.csv", &csv)?;
    }
    Ok(Outcome::Done)
}

fn feasibility(path: &Path, out: &Output) -> Result<Outcome> {
    let problem = load(path, None)?;
    let slices: Vec<conlq::Coefficients> = match &problem {
        Problem::Finite(d) => d.slices.clone(),
        Problem::Stationary(p) => vec![p.coefficients.clone()],
        Problem::MeanVariance(p) => embed(p).map_err(|e| Failure::solver("embed", e))?.slices,
    };
    let reports: Vec<_> = slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = check_feasibility(&s.region);
            json!({
                "slice": i,
                "feasible": r.feasible,
                "max_violation": r.max_violation,
                "witness": r.witness.as_slice(),
                "cone_feasible": r.cone_feasible,
                "cone_witness": r.cone_witness.as_slice(),
            })
        })
        .collect();
    Line::new("info", "feasible").field("slices", reports.len()).emit();
    out.json("feasibility.json", &reports)?;
    Ok(Outcome::Done)
}
