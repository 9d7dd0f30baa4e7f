//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines come out in order.
//! The process fails if any criterion fails, except those listed in
//! `KNOWN_GAPS`, which are still computed and reported.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{enumerate_qp, grid_min, random_box, random_coefficients, random_qp, rel_diff, rk4_backward, rng};
use conlq::config::{parse_config, Problem};
use conlq::finite_horizon::{solve_riccati_pair, RiccatiOptions};
use conlq::infinite_horizon::{solve_stationary, StationaryOptions, StationaryOutcome};
use conlq::meanvar::solve_mv;
use conlq::problem::{Coefficients, ProblemData};
use conlq::qp::{kkt_residuals, scale_solution, scale_value, solve_qp, Polyhedron, QpOptions, QpProblem};
use conlq::simulate::{moment_ode, simulate_paths, SimConfig};
use conlq::Branch;
use rand::Rng;
use serde_json::Value;

/// Criteria that do not reproduce; see the README.
const KNOWN_GAPS: &[u32] = &[3];

type Criterion = (u32, &'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config_path(name: &str) -> PathBuf {
    repo().join("configs").join(name)
}

fn load(name: &str) -> Problem {
    parse_config(&config_path(name), None).expect("shipped config parses").problem
}

/// Runs the CLI in a fresh output directory; returns the exit code, the
/// directory and the wall time.
fn cli(args: &[&str]) -> (i32, tempfile::TempDir, Duration) {
    let out = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_conlq"))
        .args(args)
        .arg("--out")
        .arg(out.path())
        .output()
        .expect("conlq runs");
    let code = status.status.code().unwrap_or(-1);
    (code, out, start.elapsed())
}

fn read_json(dir: &Path, name: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    serde_json::from_str(&text).unwrap()
}

fn num(v: &Value, path: &[&str]) -> f64 {
    path.iter().fold(v, |v, k| &v[*k]).as_f64().unwrap_or(f64::NAN)
}

fn vec_of(v: &Value) -> Vec<f64> {
    v.as_array().map(|a| a.iter().filter_map(Value::as_f64).collect()).unwrap_or_default()
}

fn close_all(got: &[f64], want: &[f64], tol: f64) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(g, w)| (g - w).abs() <= tol)
}

fn stationary_reproduction() -> Verdict {
    let config = config_path("example1_stationary.json");
    let (code, out, elapsed) = cli(&["solve-stationary", config.to_str().unwrap()]);
    if code != 0 {
        return Verdict::new(false, format!("exit code {code}"));
    }
    let sol = &read_json(out.path(), "stationary_solution.json");
    let (g_hat, g_bar) = (num(sol, &["g_hat_star"]), num(sol, &["g_bar_star"]));
    let (k_hat, k_bar) = (vec_of(&sol["k_hat_star"]), vec_of(&sol["k_bar_star"]));
    let pass = (g_hat - 0.7191).abs() <= 5e-4
        && (g_bar - 1.2032).abs() <= 5e-4
        && close_all(&k_hat, &[0.3815, 0.2032, -0.2], 5e-4)
        && close_all(&k_bar, &[-0.2, -0.2, 0.1689], 5e-4)
        && elapsed < Duration::from_secs(5);
    Verdict::new(
        pass,
        format!("G^={g_hat:.5} G-={g_bar:.5} K^={k_hat:.4?} K-={k_bar:.4?} time={:.2}s", elapsed.as_secs_f64()),
    )
}

fn stationary_non_existence() -> Verdict {
    let config = config_path("example1_nosolution.json");
    let (code, out, elapsed) = cli(&["solve-stationary", config.to_str().unwrap()]);
    let report = if code == 2 { read_json(out.path(), "no_solution.json") } else { Value::Null };
    let failed = |b: &str| report[b].is_object() && report[b]["root"].is_null();
    let pass = code == 2 && failed("hat") && failed("bar") && elapsed < Duration::from_secs(5);
    Verdict::new(
        pass,
        format!(
            "exit={code} hat_failed={} bar_failed={} time={:.2}s",
            failed("hat"),
            failed("bar"),
            elapsed.as_secs_f64()
        ),
    )
}

fn mean_variance_multiplier() -> Verdict {
    let config = config_path("example2_mv.json");
    let (code, out, elapsed) = cli(&["mv-solve", config.to_str().unwrap()]);
    if code != 0 {
        return Verdict::new(false, format!("exit code {code}"));
    }
    let lambda = num(&read_json(out.path(), "mv_solution.json"), &["lambda_star"]);
    let rel = (lambda - 189.78).abs() / 189.78;
    Verdict::new(
        rel <= 0.01 && elapsed < Duration::from_secs(30),
        format!("lambda*={lambda:.4} expected=189.78 rel_err={rel:.4} time={:.2}s", elapsed.as_secs_f64()),
    )
}

/// Independent integration of the classical scalar Riccati equation.
fn classical_riccati(data: &ProblemData) -> Vec<f64> {
    let c = data.slice(0);
    let dc = &c.d * &c.c;
    let drift = 2.0 * c.a + c.c.dot(&c.c);
    rk4_backward(&data.grid, data.q_terminal, |_, g| {
        let omega = &c.d * c.d.transpose() * g + &c.r;
        let w = (&dc + &c.b) * g + &c.s;
        let reduction = w.dot(&omega.cholesky().expect("Ω positive definite").solve(&w));
        -drift * g - c.q + reduction
    })
}

fn unconstrained_equivalence() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut r = rng(1000 + seed);
        let (n, m) = (r.random_range(1..=3), r.random_range(1..=3));
        let coefficients = random_coefficients(&mut r, n, m, Polyhedron::unconstrained(n));
        let data = ProblemData::constant(coefficients, 1.0, 400, r.random_range(0.0..2.0));
        let sol = solve_riccati_pair(&data, &RiccatiOptions::default()).unwrap();
        let oracle = classical_riccati(&data);
        for (g, o) in sol.g_hat.iter().zip(&oracle) {
            worst = worst.max(rel_diff(*g, *o));
        }
    }
    Verdict::new(worst <= 1e-8, format!("20 instances, max relative gap {worst:.2e}"))
}

fn qp_oracle() -> Verdict {
    let (mut value_gap, mut kkt_worst, mut grid_beats): (f64, f64, usize) = (0.0, 0.0, 0);
    for seed in 0..200 {
        let p = random_qp(&mut rng(2000 + seed));
        let sol = solve_qp(&p, &QpOptions::default(), None).unwrap();
        let (_, reference) = enumerate_qp(&p);
        value_gap = value_gap.max((sol.value - reference).abs());
        kkt_worst = kkt_worst.max(kkt_residuals(&p, &sol.k_star, &sol.multipliers).max());
        let sampled = [(1.0, 0.05), (0.01, 1e-3)]
            .iter()
            .filter_map(|&(w, s)| grid_min(&p, &sol.k_star, w, s))
            .fold(f64::INFINITY, f64::min);
        if sampled < sol.value - 1e-9 {
            grid_beats += 1;
        }
    }
    Verdict::new(
        value_gap <= 1e-5 && kkt_worst <= 1e-9 && grid_beats == 0,
        format!("200 instances, max value gap {value_gap:.2e}, max KKT {kkt_worst:.2e}, grid points below optimum {grid_beats}"),
    )
}

fn scaling_property() -> Verdict {
    let (mut k_gap, mut v_gap): (f64, f64) = (0.0, 0.0);
    let solve = |p: &QpProblem| solve_qp(p, &QpOptions::default(), None).unwrap();
    for seed in 0..100 {
        let mut r = rng(3000 + seed);
        let p = random_qp(&mut r);
        let alpha: f64 = r.random_range(-10.0..10.0);
        let hat = solve(&p);
        let bar = solve(&QpProblem::new(p.omega.clone(), -&p.w, p.region.clone()).unwrap());
        let direct = solve(&QpProblem::new(p.omega.clone(), &p.w * alpha, p.region.scaled(alpha.abs())).unwrap());
        k_gap = k_gap.max((&direct.k_star - scale_solution(&hat.k_star, &bar.k_star, alpha)).amax());
        v_gap = v_gap.max(rel_diff(direct.value, scale_value(hat.value, bar.value, alpha)));
    }
    Verdict::new(
        k_gap <= 1e-8 && v_gap <= 1e-8,
        format!("100 instances, max gain gap {k_gap:.2e}, max relative value gap {v_gap:.2e}"),
    )
}

fn value_monte_carlo() -> Verdict {
    let config = config_path("example1_finite.json");
    let mut lines = Vec::new();
    let mut pass = true;
    let mut total = Duration::ZERO;
    for x0 in ["1", "-1"] {
        let (code, out, elapsed) = cli(&["simulate", config.to_str().unwrap(), "--x0", x0, "--paths", "100000"]);
        total += elapsed;
        if code != 0 {
            return Verdict::new(false, format!("x0={x0}: exit code {code}"));
        }
        let report = read_json(out.path(), "simulation.json");
        let (mean, se) = (num(&report, &["value", "mean"]), num(&report, &["value", "std_error"]));
        let analytic = num(&report, &["analytic_value"]);
        let z = (mean - analytic) / se;
        pass &= z.abs() <= 3.0;
        lines.push(format!("x0={x0}: {mean:.5}±{se:.5} vs {analytic:.5} (z={z:+.2})"));
    }
    pass &= total < Duration::from_secs(60);
    Verdict::new(pass, format!("{} time={:.1}s", lines.join(", "), total.as_secs_f64()))
}

fn l2_stability() -> Verdict {
    let Problem::Stationary(p) = load("example1_stationary.json") else { unreachable!() };
    let StationaryOutcome::Solved(sol) = solve_stationary(&p, &StationaryOptions::default()).unwrap() else {
        return Verdict::new(false, "no stationary solution");
    };
    let (n_hat, n_bar) = (p.n_value(&sol.k_hat_star, Branch::Hat), p.n_value(&sol.k_bar_star, Branch::Bar));
    let ens = simulate_paths(&p, &sol, &SimConfig::new(20_000, 1e-3, 2.0, 42, 1.0)).unwrap();
    let last = ens.times.len() - 1;
    let terminal = ens.second_moment(last).mean;
    let mut worst_z: f64 = 0.0;
    for (i, &t) in ens.times.iter().enumerate().filter(|(_, &t)| t > 0.0 && t <= 0.05 + 1e-12) {
        let est = ens.second_moment(i);
        let exact = moment_ode(&p, &sol.k_hat_star, Branch::Hat, t, 1.0);
        worst_z = worst_z.max((est.mean - exact).abs() / est.std_error);
    }
    Verdict::new(
        terminal < 1e-2 && worst_z <= 3.0 && n_hat < 0.0 && n_bar < 0.0,
        format!("E[x(2)^2]={terminal:.3e} N^={n_hat:.3} N-={n_bar:.3} max |z| on [0,0.05]={worst_z:.2}"),
    )
}

fn discounted_bounds() -> Verdict {
    let Problem::MeanVariance(p) = load("example2_mv.json") else { unreachable!() };
    let sol = solve_mv(&p, &RiccatiOptions::default()).unwrap();
    let last = sol.rho.len() - 1;
    let scaled = |g: &[f64]| -> Vec<f64> { g.iter().zip(&sol.rho).map(|(g, r)| g * r * r).collect() };
    let (hat, bar) = (scaled(&sol.riccati.g_hat), scaled(&sol.riccati.g_bar));
    let hat_max = hat.iter().copied().fold(f64::MIN, f64::max);
    // Both products equal 1 exactly at t = T, so the strict bound applies before it.
    let bar_max = bar[..last].iter().copied().fold(f64::MIN, f64::max);
    Verdict::new(
        hat_max <= 1.0 + 1e-9 && bar_max <= 1.0 - 1e-12,
        format!("max G^rho^2={hat_max:.12} max G-rho^2 (t<T)={bar_max:.12} G-(T)rho(T)^2={}", bar[last]),
    )
}

fn time_homogeneity() -> Verdict {
    let Problem::Stationary(example) = load("example1_stationary.json") else { unreachable!() };
    let mut instances: Vec<Coefficients> = vec![example.coefficients];
    for seed in 0..4 {
        let mut r = rng(4000 + seed);
        let (n, m) = (r.random_range(1..=3), r.random_range(1..=3));
        let region = random_box(&mut r, n);
        instances.push(random_coefficients(&mut r, n, m, region));
    }
    let h: f64 = 1e-3;
    let offset = (0.5 / h).round() as usize;
    let mut worst: f64 = 0.0;
    for c in &instances {
        let short = solve_riccati_pair(&ProblemData::constant(c.clone(), 1.0, 1000, 0.0), &RiccatiOptions::default()).unwrap();
        let long = solve_riccati_pair(&ProblemData::constant(c.clone(), 1.5, 1500, 0.0), &RiccatiOptions::default()).unwrap();
        for probe in 0..10 {
            let i = probe * 100 + 50;
            worst = worst.max((short.g_hat[i] - long.g_hat[i + offset]).abs());
            worst = worst.max((short.g_bar[i] - long.g_bar[i + offset]).abs());
        }
    }
    Verdict::new(worst <= 1e-7, format!("{} instances x 10 probes, max gap {worst:.2e}", instances.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "example-1 stationary reproduction", stationary_reproduction),
        (2, "example-1 non-existence", stationary_non_existence),
        (3, "example-2 multiplier", mean_variance_multiplier),
        (4, "unconstrained oracle equivalence", unconstrained_equivalence),
        (5, "QP oracle", qp_oracle),
        (6, "scaling property", scaling_property),
        (7, "value-function Monte Carlo", value_monte_carlo),
        (8, "L2 stability", l2_stability),
        (9, "discounted value bounds", discounted_bounds),
        (10, "time homogeneity", time_homogeneity),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        let verdict = run();
        let tag = if verdict.pass { "PASS" } else { "FAIL" };
        let note = if !verdict.pass && KNOWN_GAPS.contains(&id) { " [known gap]" } else { "" };
        println!("{tag} criterion {id:>2} {name}: {}{note}", verdict.detail);
        if !verdict.pass && !KNOWN_GAPS.contains(&id) {
            unexpected.push(id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
