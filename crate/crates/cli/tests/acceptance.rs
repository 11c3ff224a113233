//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! `cargo test --test acceptance -- 3 7` runs a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use backward_mfg::bsde::{solve_affine_bsde, solve_lsmc_bsde, LsmcBasis};
use backward_mfg::fit::observed_order;
use backward_mfg::flows::solve_mean_flows;
use backward_mfg::paths::generate_paths;
use backward_mfg::population::{
    convergence_metrics, limit_phi_spec, metric_agents, simulate_centralized, simulate_decentralized, CentralizedPlan,
    DecentralizedPlan, Record, SimulationOptions, ZetaDiffusion,
};
use backward_mfg::riccati::{riccati_convergence_report, solve_finite_riccatis, solve_limit_riccatis, RiccatiSet};
use backward_mfg::verifier::{deviation_probe, epsilon_gap, epsilon_gap_ladder, DEFAULT_PROBE_SCALES};
use backward_mfg::{Model, Validated};

type Check = fn() -> (bool, String);

const LADDER: [usize; 6] = [8, 16, 32, 64, 128, 256];
const SEED: u64 = 42;
const SAMPLED: usize = 8;

fn model(agents: usize, steps: usize) -> Validated {
    Model::reference_scalar().with_agents(agents).with_steps(steps).validate().expect("benchmark model is valid")
}

fn scalar(path: &backward_mfg::Path, node: usize) -> f64 {
    path.at(node)[(0, 0)]
}

fn boundary_exactness() -> (bool, String) {
    let m = model(300, 200);
    let grid = m.grid();
    let limits = solve_limit_riccatis(&m, grid).unwrap();
    let flows = solve_mean_flows(&m, &limits, grid).unwrap();
    let last = grid.steps();
    let checks = [
        ("Sigma_bar(T)", scalar(&limits.sigma, last), 0.0),
        ("K_bar(T)", scalar(&limits.k, last), 0.0),
        ("Pi_bar(0)", scalar(&limits.pi, 0), -2.0),
        ("M_bar(0)", scalar(&limits.m, 0), 2.0),
        ("zeta_bar(0)", scalar(&flows.zeta_bar, 0), 2.0),
        ("phi_bar(T)", scalar(&flows.phi_bar, last), 0.0),
        ("x0(T)", scalar(&flows.x0, last), 0.0),
    ];
    let worst = checks.iter().map(|(_, v, e)| (v - e).abs()).fold(0.0, f64::max);
    let pass = worst <= 4.0 * f64::EPSILON;
    let detail = checks.iter().map(|(n, v, _)| format!("{n}={v}")).collect::<Vec<_>>().join(" ");
    (pass, format!("{detail}; max error {worst:e}"))
}

fn rk4_order() -> (bool, String) {
    let sets = |steps: usize| -> (RiccatiSet<f64>, RiccatiSet<f64>) {
        let m = model(300, steps);
        (solve_finite_riccatis(&m, m.grid()).unwrap().set, solve_limit_riccatis(&m, m.grid()).unwrap())
    };
    let runs = [sets(100), sets(200), sets(400)];
    let mut orders = Vec::new();
    for (label, pick) in [("N", 0usize), ("bar", 1)] {
        let named: Vec<[(&str, &backward_mfg::Path); 4]> =
            runs.iter().map(|r| if pick == 0 { r.0.named() } else { r.1.named() }).collect();
        for idx in 0..4 {
            let name = named[0][idx].0;
            // Backward paths are compared at t = 0, forward ones at t = T.
            let value = |k: usize| {
                let p = named[k][idx].1;
                if name == "Sigma" || name == "K" {
                    scalar(p, 0)
                } else {
                    scalar(p, p.len() - 1)
                }
            };
            orders.push((format!("{name}_{label}"), observed_order(value(0), value(1), value(2))));
        }
    }
    let pass = orders.iter().all(|(_, p)| (3.7..=4.3).contains(p));
    (pass, orders.iter().map(|(n, p)| format!("{n}={p:.3}")).collect::<Vec<_>>().join(" "))
}

fn finite_n_rate() -> (bool, String) {
    let m = model(300, 200);
    let report = riccati_convergence_report(&m, m.grid(), &[25, 50, 100, 200, 400]).unwrap();
    let slopes: Vec<(&str, Option<f64>)> = report.fits.iter().map(|(n, f)| (*n, f.as_ref().map(|f| f.slope))).collect();
    let fitted: Vec<f64> = slopes.iter().filter_map(|(_, s)| *s).collect();
    let pass = !fitted.is_empty() && fitted.iter().all(|s| (-1.2..=-0.8).contains(s));
    let detail = slopes
        .iter()
        .map(|(n, s)| match s {
            Some(s) => format!("{n}={s:.3}"),
            None => format!("{n}=coincident"),
        })
        .collect::<Vec<_>>()
        .join(" ");
    (pass, detail)
}

fn bsde_agreement() -> (bool, String) {
    // The limit equation for one agent involves only that agent's driver.
    let m = model(1, 200);
    let grid = m.grid();
    let limits = solve_limit_riccatis(&m, grid).unwrap();
    let flows = solve_mean_flows(&m, &limits, grid).unwrap();
    let spec = limit_phi_spec(&m, &limits, &flows, 0);
    let exact = solve_affine_bsde(&spec, grid).unwrap();
    let reps = 10_000;
    let bundle = generate_paths(grid, 1, reps, SEED).unwrap();
    let sol = solve_lsmc_bsde(&spec, &bundle, LsmcBasis::default()).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..reps {
        let w = bundle.driver_path(r, 0);
        for k in 0..=grid.steps() {
            let e = exact.evaluate(k, &[&w[k..k + 1]])[0];
            num += (sol.value(r, k)[0] - e).powi(2);
            den += e * e;
        }
    }
    let rel = (num / den).sqrt();
    let pass = rel < 0.02 && sol.terminal_residual == 0.0;
    (pass, format!("relative L2 error {rel:.4e}, terminal residual {:e}", sol.terminal_residual))
}

fn centralized_residuals() -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for agents in [8, 32] {
        let m = model(agents, 200);
        let plan = CentralizedPlan::new(&m, ZetaDiffusion::Corrected).unwrap();
        let bundle = generate_paths(m.grid(), agents, 8, SEED).unwrap();
        let run = simulate_centralized(&m, &plan, &bundle, &SimulationOptions::default()).unwrap();
        let d = run.diagnostics;
        let stat = d.stationarity.unwrap();
        pass &= stat < 1e-6 && d.terminal_residual < 1e-8;
        parts.push(format!("N={agents}: stationarity {stat:.2e}, terminal {:.2e}", d.terminal_residual));
    }
    (pass, parts.join("; "))
}

fn mean_field_convergence() -> (bool, String) {
    let table = convergence_metrics(&model(8, 200), &LADDER, 64, SEED, SAMPLED).unwrap();
    let slope = |name: &str| table.slope(name).unwrap_or(f64::NAN);
    let (xn, xi) = (slope("x_N-x0"), slope("x_i-x_bar_i"));
    let pass = (-1.3..=-0.7).contains(&xn) && (-1.3..=-0.7).contains(&xi);
    let values = |name: &str| {
        let i = backward_mfg::population::METRICS.iter().position(|m| *m == name).unwrap();
        table.values[i].iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(",")
    };
    (
        pass,
        format!(
            "slope x_N-x0 {xn:.3} [{}]; slope x_i-x_bar_i {xi:.3} [{}]; also phi {:.3}, zeta {:.3}",
            values("x_N-x0"),
            values("x_i-x_bar_i"),
            slope("phi_N-phi_bar"),
            slope("zeta_i-zeta_bar_i")
        ),
    )
}

fn epsilon_decay() -> (bool, String) {
    let report = epsilon_gap_ladder(&model(8, 200), &LADDER, 256, &[SEED], SAMPLED).unwrap();
    let slope = report.slope().unwrap_or(f64::NAN);
    let pass = report.nonnegative() && report.monotone() && (-0.75..=-0.25).contains(&slope);
    let eps = report.records.iter().map(|r| format!("{:.2e}±{:.1e}", r.epsilon, r.stderr)).collect::<Vec<_>>().join(",");
    (pass, format!("eps [{eps}]; nonnegative {}, monotone {}, slope {slope:.3}", report.nonnegative(), report.monotone()))
}

fn deviation_probes() -> (bool, String) {
    let m = model(300, 200);
    let reps = 256;
    let eps = epsilon_gap(&m, reps, &[SEED], SAMPLED).unwrap();
    let sample = metric_agents(300, SAMPLED);
    let bundle = generate_paths(m.grid(), 300, reps, SEED).unwrap();
    let plan = DecentralizedPlan::new(&m).unwrap();
    let options = SimulationOptions { record: Record::Agents(sample.clone()), ..Default::default() };
    let frozen = simulate_decentralized(&m, &plan, &bundle, &options).unwrap();
    let mut violations = 0;
    let mut worst = (f64::NEG_INFINITY, 0.0);
    let mut count = 0;
    for &agent in &sample {
        let probe = deviation_probe(&m, &frozen, &bundle, agent, 64, &DEFAULT_PROBE_SCALES, SEED).unwrap();
        for &(_, _, gain, se) in &probe.probes {
            count += 1;
            if gain > eps.epsilon + 3.0 * se {
                violations += 1;
            }
            if gain > worst.0 {
                worst = (gain, se);
            }
        }
    }
    (
        violations == 0,
        format!(
            "{count} probes, eps(300) {:.2e}±{:.1e}, largest improvement {:.2e}±{:.1e}, violations {violations}",
            eps.epsilon, eps.stderr, worst.0, worst.1
        ),
    )
}

fn reproduce(dir: &Path) -> Duration {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_bmfg"))
        .args(["reproduce-paper", "--out", dir.to_str().unwrap()])
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    start.elapsed()
}

fn figure_reproduction() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let elapsed = reproduce(dir.path());
    let expected = [("figure1_riccati_limits", 4), ("figure2_zeta_bar", 31), ("figure3_x_bar", 31), ("figure4_u_bar", 31)];
    let mut pass = elapsed < Duration::from_secs(120);
    let mut parts = Vec::new();
    for (stem, curves) in expected {
        let svg = fs::read_to_string(dir.path().join(format!("{stem}.svg"))).unwrap_or_default();
        let csv = fs::read_to_string(dir.path().join(format!("{stem}.csv"))).unwrap_or_default();
        let drawn = svg.matches("<polyline").count();
        let columns = csv.lines().next().map(|h| h.split(',').count() - 1).unwrap_or(0);
        let finite = !csv.contains("NaN") && !csv.contains("inf");
        pass &= drawn == curves && columns == curves && finite;
        parts.push(format!("{stem}:{drawn}"));
    }
    let mut reader = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let mut boundary = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        if ["Pi_bar(0)", "M_bar(0)", "Sigma_bar(T)", "K_bar(T)", "zeta_bar(0)", "phi_bar(T)", "x0(T)"].contains(&&rec[0]) {
            boundary += 1;
            pass &= rec[3].parse::<f64>().map(|e| e <= 4.0 * f64::EPSILON).unwrap_or(false);
        }
    }
    pass &= boundary == 7;
    (pass, format!("curves {}; {boundary} boundary rows exact; {:.2}s", parts.join(" "), elapsed.as_secs_f64()))
}

fn determinism() -> (bool, String) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    reproduce(a.path());
    reproduce(b.path());
    let sums = |d: &Path| -> Vec<(String, String)> {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
        m["artifacts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| (x["file"].as_str().unwrap().into(), x["sha256"].as_str().unwrap().into()))
            .collect()
    };
    let (sa, sb) = (sums(a.path()), sums(b.path()));
    (sa == sb && !sa.is_empty(), format!("{} artifacts, checksums identical: {}", sa.len(), sa == sb))
}

fn main() {
    let criteria: [(usize, &str, Check, u64); 10] = [
        (1, "boundary exactness", boundary_exactness, 1),
        (2, "RK4 order", rk4_order, 5),
        (3, "finite-N to limit rate", finite_n_rate, 10),
        (4, "BSDE backend agreement", bsde_agreement, 60),
        (5, "centralized optimality residuals", centralized_residuals, 30),
        (6, "mean-field convergence", mean_field_convergence, 600),
        (7, "epsilon-Nash decay", epsilon_decay, 1200),
        (8, "deviation probes", deviation_probes, 600),
        (9, "figure reproduction", figure_reproduction, 120),
        (10, "determinism", determinism, 240),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, check, budget) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = check();
        let secs = start.elapsed().as_secs_f64();
        let ok = ok && secs <= budget as f64;
        println!("criterion {id:>2} {} {name}: {detail} ({secs:.1}s of {budget}s)", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
