use std::path::PathBuf;

use anyhow::{bail, Result};
use backward_mfg::flows::solve_mean_flows;
use backward_mfg::ode::MatrixPath;
use backward_mfg::paths::generate_paths;
use backward_mfg::population::{
    metric_agents, simulate_centralized, simulate_decentralized, CentralizedPlan, DecentralizedPlan, Mode, Record,
    SimulationOptions, ZetaDiffusion,
};
use backward_mfg::riccati::{RiccatiBundle, RiccatiSet};
use backward_mfg::verifier::{deviation_probe, epsilon_gap_ladder, DEFAULT_PROBE_SCALES};
use backward_mfg::{Error, Model, Run, Validated};

use crate::report::{num, Artifacts, Chart, Overrides};

pub const BUNDLED_MODEL: &str = include_str!("../models/reference.json");
pub const DEFAULT_LADDER: [usize; 6] = [8, 16, 32, 64, 128, 256];
const VERIFY_REPLICATIONS: usize = 64;

#[derive(Clone, Debug, Default)]
pub struct Settings {
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub overrides: Overrides,
    pub fan: usize,
    pub sampled_agents: usize,
    pub probes: usize,
    pub zeta_diffusion: ZetaDiffusion,
}

impl Settings {
    fn model_label(&self) -> String {
        match &self.model {
            Some(p) => p.display().to_string(),
            None => "bundled:reference.json".into(),
        }
    }

    /// Reads the model file (or the bundled one) and applies the overrides.
    pub fn load(&self) -> Result<Validated> {
        let text = match &self.model {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("cannot read model file {}: {e}", path.display())))?,
            None => BUNDLED_MODEL.to_string(),
        };
        let mut spec = Model::from_json_str(&text)?;
        let o = &self.overrides;
        if let Some(steps) = o.steps {
            spec = spec.with_steps(steps);
        }
        if let Some(agents) = o.agents {
            spec = spec.with_agents(agents);
        }
        if let Some(seed) = o.seed {
            spec.seed = seed;
        }
        if let Some(reps) = o.replications {
            spec.replications = reps;
        }
        Ok(spec.validate()?)
    }

    fn finish(&self, artifacts: Artifacts, command: &str) -> Result<()> {
        let count = artifacts.files().len();
        let dir = artifacts.dir().display().to_string();
        artifacts.finish(command, &self.model_label(), self.overrides.clone())?;
        println!("wrote {count} artifacts and manifest.json to {dir}");
        Ok(())
    }
}

fn component(v: &[f64], n: usize, c: usize) -> Vec<f64> {
    v.iter().skip(c).step_by(n).copied().collect()
}

fn entry_columns(name: &str, path: &MatrixPath<f64>) -> Vec<(String, Vec<f64>)> {
    let (rows, cols) = path.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((format!("{name}_{}{}", r + 1, c + 1), path.entry_series(r, c)));
        }
    }
    out
}

fn write_path(artifacts: &mut Artifacts, name: &str, times: &[f64], path: &MatrixPath<f64>) -> Result<()> {
    let columns = entry_columns(name, path);
    let mut header = vec!["t".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    let rows: Vec<Vec<String>> = times
        .iter()
        .enumerate()
        .map(|(m, &t)| {
            let mut row = vec![num(t)];
            row.extend(columns.iter().map(|(_, v)| num(v[m])));
            row
        })
        .collect();
    artifacts.csv(&format!("{name}.csv"), &header, &rows)
}

fn limit_chart(times: &[f64], limits: &RiccatiSet<f64>) -> Chart {
    let mut chart = Chart::new("Limit Riccati solutions Σ̄, K̄, Π̄, M̄", "t", "value", times.to_vec());
    for (name, path) in limits.named() {
        for (col, ys) in entry_columns(&format!("{name}_bar"), path) {
            chart = chart.line(&col, ys);
        }
    }
    chart
}

#[derive(Clone, Copy)]
enum Field {
    Zeta,
    State,
    Control,
}

/// Fan of the recorded agents on replication 0 plus the population mean.
fn fan_chart(run: &Run, agents: &[usize], field: Field, c: usize, title: &str) -> Chart {
    let n = run.n;
    let agg = &run.aggregates[0];
    let (mean, label) = match field {
        Field::Zeta => (&agg.mean_zeta, "zeta"),
        Field::State => (&agg.mean_x, "x"),
        Field::Control => (&agg.mean_u, "u"),
    };
    let title = if n > 1 { format!("{title}, component {}", c + 1) } else { title.to_string() };
    let mut chart = Chart::new(&title, "t", label, run.grid.times());
    for &i in agents {
        let traj = run.trajectory(i, 0).expect("fan agents are recorded");
        let v = match field {
            Field::Zeta => &traj.zeta,
            Field::State => &traj.x,
            Field::Control => &traj.u,
        };
        chart = chart.fan(&format!("agent_{i}"), component(v, n, c));
    }
    chart.line("mean", component(mean, n, c)).fan_label(&format!("{} of {} agents", agents.len(), run.agents))
}

fn fan_titles(mode: Mode) -> [(Field, &'static str, &'static str); 3] {
    match mode {
        Mode::Decentralized => [
            (Field::Zeta, "zeta_bar", "Decentralized ζ̄ᵢ"),
            (Field::State, "x_bar", "Decentralized state x̄ᵢ"),
            (Field::Control, "u_bar", "Decentralized control ūᵢ"),
        ],
        Mode::Centralized => [
            (Field::Zeta, "zeta", "Centralized ζᵢ"),
            (Field::State, "x_star", "Centralized state x*ᵢ"),
            (Field::Control, "u_star", "Centralized control u*ᵢ"),
        ],
    }
}

fn run_summary(run: &Run) -> Vec<Vec<String>> {
    let cost = run.mean_cost();
    let d = run.diagnostics;
    let mut rows = vec![
        vec!["mode".into(), run.mode.name().into()],
        vec!["agents".into(), run.agents.to_string()],
        vec!["replications".into(), run.replications.to_string()],
        vec!["mean_cost".into(), num(cost.mean)],
        vec!["mean_cost_stderr".into(), num(cost.stderr)],
        vec!["terminal_residual".into(), num(d.terminal_residual)],
    ];
    for (name, v) in [("stationarity", d.stationarity), ("adjoint_boundary", d.adjoint_boundary), ("mean_identity", d.mean_identity)] {
        if let Some(v) = v {
            rows.push(vec![name.into(), num(v)]);
        }
    }
    rows
}

fn simulate_mode(model: &Validated, mode: Mode, settings: &Settings, fan: &[usize]) -> Result<Run> {
    let spec = model.spec();
    let bundle = generate_paths(model.grid(), model.agents(), spec.replications.max(1), spec.seed)?;
    let options = SimulationOptions { record: Record::Agents(fan.to_vec()), zeta_diffusion: settings.zeta_diffusion };
    Ok(match mode {
        Mode::Decentralized => simulate_decentralized(model, &DecentralizedPlan::new(model)?, &bundle, &options)?,
        Mode::Centralized => simulate_centralized(model, &CentralizedPlan::new(model, settings.zeta_diffusion)?, &bundle, &options)?,
    })
}

fn emit_run(artifacts: &mut Artifacts, run: &Run, fan: &[usize], prefix: &str) -> Result<()> {
    for (field, stem, title) in fan_titles(run.mode) {
        for c in 0..run.n {
            let suffix = if run.n > 1 { format!("_c{}", c + 1) } else { String::new() };
            artifacts.chart(&format!("{prefix}{stem}{suffix}"), &fan_chart(run, fan, field, c, title))?;
        }
    }
    let mode = run.mode.name();
    let rows: Vec<Vec<String>> =
        run.costs.iter().enumerate().map(|(i, c)| vec![i.to_string(), num(c.mean), num(c.stderr)]).collect();
    artifacts.csv(&format!("{mode}_costs.csv"), &["agent", "cost", "stderr"], &rows)?;
    artifacts.csv(&format!("{mode}_summary.csv"), &["quantity", "value"], &run_summary(run))
}

pub fn validate(settings: &Settings) -> Result<()> {
    let model = settings.load()?;
    let spec = model.spec();
    println!("model {}", settings.model_label());
    println!("  state dimension n = {}, control dimension k = {}", spec.n, spec.k);
    println!("  agents N = {}, horizon T = {}, steps = {}", spec.agents, spec.horizon, spec.steps);
    println!("  terminal class {}", spec.terminal.class_name());
    println!("  drivers share S: {}", spec.s.is_shared());
    println!("A1: R > 0, Q ≥ 0, S ≥ 0, G ≥ 0 at every node: ok");
    println!("A2: terminals identically distributed with finite second moment: ok");
    Ok(())
}

pub fn riccati(settings: &Settings) -> Result<()> {
    let model = settings.load()?;
    let bundle = RiccatiBundle::solve(&model)?;
    let times = bundle.grid.times();
    let mut artifacts = Artifacts::create(&settings.out)?;
    for (name, path) in bundle.finite.set.named() {
        write_path(&mut artifacts, name, &times, path)?;
    }
    for (name, path) in bundle.limit.named() {
        write_path(&mut artifacts, &format!("{name}_bar"), &times, path)?;
    }
    artifacts.chart("riccati_limits", &limit_chart(&times, &bundle.limit))?;
    let rows: Vec<Vec<String>> = bundle
        .finite
        .set
        .named()
        .iter()
        .zip(bundle.limit.named().iter())
        .map(|((name, fin), (_, lim))| vec![name.to_string(), num(fin.sup_distance(lim))])
        .collect();
    artifacts.csv("riccati_gaps.csv", &["matrix", "sup_gap_to_limit"], &rows)?;
    for row in &rows {
        println!("sup |{0} - {0}_bar| = {1} at N = {2}", row[0], row[1], bundle.agents);
    }
    settings.finish(artifacts, "riccati")
}

pub fn simulate(settings: &Settings, modes: &[Mode]) -> Result<()> {
    let model = settings.load()?;
    let fan = metric_agents(model.agents(), settings.fan);
    let mut artifacts = Artifacts::create(&settings.out)?;
    for &mode in modes {
        let run = simulate_mode(&model, mode, settings, &fan)?;
        let cost = run.mean_cost();
        println!(
            "{}: mean cost {:.6} ± {:.6}, terminal residual {:.3e}",
            mode.name(),
            cost.mean,
            cost.stderr,
            run.diagnostics.terminal_residual
        );
        emit_run(&mut artifacts, &run, &fan, &format!("{}_", mode.name()))?;
    }
    settings.finish(artifacts, "simulate")
}

pub fn verify(settings: &Settings) -> Result<()> {
    let model = settings.load()?;
    let ladder = settings.overrides.ladder.clone().unwrap_or_else(|| DEFAULT_LADDER.to_vec());
    let first = model.spec().seed;
    let seeds: Vec<u64> = (0..settings.overrides.seeds.unwrap_or(1) as u64).map(|s| first + s).collect();
    let reps = settings.overrides.replications.unwrap_or(VERIFY_REPLICATIONS);
    let report = epsilon_gap_ladder(&model, &ladder, reps, &seeds, settings.sampled_agents)?;
    let mut artifacts = Artifacts::create(&settings.out)?;

    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            let worst = r.agent_gaps.iter().find(|g| g.gap == r.epsilon).map(|g| g.agent).unwrap_or(0);
            vec![r.agents.to_string(), num(r.epsilon), num(r.stderr), worst.to_string(), num(r.stationarity)]
        })
        .collect();
    artifacts.csv("epsilon.csv", &["N", "epsilon", "stderr", "worst_agent", "stationarity"], &rows)?;
    let gap_rows: Vec<Vec<String>> = report
        .records
        .iter()
        .flat_map(|r| r.agent_gaps.iter().map(move |g| vec![r.agents.to_string(), g.agent.to_string(), num(g.gap), num(g.stderr)]))
        .collect();
    artifacts.csv("epsilon_agents.csv", &["N", "agent", "gap", "stderr"], &gap_rows)?;

    let fit_row = match &report.fit {
        Some(f) => vec![num(f.slope), num(f.intercept), num(f.r_squared), f.used.len().to_string()],
        None => vec!["".into(), "".into(), "".into(), "0".into()],
    };
    let mut fit_row = fit_row;
    fit_row.push(report.nonnegative().to_string());
    fit_row.push(report.monotone().to_string());
    artifacts.csv("epsilon_fit.csv", &["slope", "intercept", "r_squared", "points", "nonnegative", "monotone"], &[fit_row])?;

    for r in &report.records {
        println!("N = {:>5}  epsilon = {:+.4e} ± {:.2e}", r.agents, r.epsilon, r.stderr);
    }
    match report.slope() {
        Some(s) => println!("fitted slope {s:.3} (nonnegative: {}, monotone: {})", report.nonnegative(), report.monotone()),
        None => println!("fitted slope unavailable: fewer than 3 positive epsilon values"),
    }

    if settings.probes > 0 {
        let last = report.records.last().expect("ladder is nonempty");
        let big = model.with_agents(last.agents)?;
        let sample = metric_agents(big.agents(), settings.sampled_agents);
        let bundle = generate_paths(big.grid(), big.agents(), reps, first)?;
        let options = SimulationOptions { record: Record::Agents(sample.clone()), ..Default::default() };
        let frozen = simulate_decentralized(&big, &DecentralizedPlan::new(&big)?, &bundle, &options)?;
        let mut rows = Vec::new();
        let mut worst = f64::NEG_INFINITY;
        for &agent in &sample {
            let probe = deviation_probe(&big, &frozen, &bundle, agent, settings.probes, &DEFAULT_PROBE_SCALES, first)?;
            worst = worst.max(probe.max_improvement);
            rows.extend(
                probe.probes.iter().map(|&(d, s, m, se)| vec![agent.to_string(), d.to_string(), num(s), num(m), num(se)]),
            );
        }
        artifacts.csv("probes.csv", &["agent", "direction", "scale", "improvement", "stderr"], &rows)?;
        println!(
            "largest probe improvement {worst:.3e} at N = {} (epsilon + 3 stderr = {:.3e})",
            last.agents,
            last.epsilon + 3.0 * last.stderr
        );
    }
    settings.finish(artifacts, "verify")
}

fn boundary_rows(name: &str, value: &[f64], expected: &[f64]) -> Vec<Vec<String>> {
    let single = value.len() == 1;
    value
        .iter()
        .zip(expected)
        .enumerate()
        .map(|(i, (v, e))| {
            let label = if single { name.to_string() } else { format!("{name}[{}]", i + 1) };
            vec![label, num(*v), num(*e), num((v - e).abs())]
        })
        .collect()
}

fn all_finite(chart: &Chart) -> bool {
    chart.series.iter().all(|s| s.ys.iter().all(|v| v.is_finite()))
}

pub fn reproduce_paper(settings: &Settings) -> Result<()> {
    let model = settings.load()?;
    let spec = model.spec();
    let bundle = RiccatiBundle::solve(&model)?;
    let grid = bundle.grid;
    let times = grid.times();
    let flows = solve_mean_flows(&model, &bundle.limit, grid)?;
    let exi = flows.terminal_mean.mean.clone();
    let plan = DecentralizedPlan::from_parts(&model, bundle.limit.clone(), flows)?;
    let fan = metric_agents(model.agents(), settings.fan);
    let paths = generate_paths(grid, model.agents(), spec.replications.max(1), spec.seed)?;
    let options = SimulationOptions { record: Record::Agents(fan.clone()), zeta_diffusion: settings.zeta_diffusion };
    let dec = simulate_decentralized(&model, &plan, &paths, &options)?;
    let cen = simulate_centralized(&model, &CentralizedPlan::from_riccati(&model, bundle.finite.clone(), settings.zeta_diffusion)?, &paths, &options)?;

    let mut artifacts = Artifacts::create(&settings.out)?;
    let mut charts = vec![("figure1_riccati_limits".to_string(), limit_chart(&times, &bundle.limit))];
    for (i, (field, _, title)) in fan_titles(Mode::Decentralized).into_iter().enumerate() {
        let stem = ["figure2_zeta_bar", "figure3_x_bar", "figure4_u_bar"][i];
        for c in 0..dec.n {
            let suffix = if dec.n > 1 { format!("_c{}", c + 1) } else { String::new() };
            charts.push((format!("{stem}{suffix}"), fan_chart(&dec, &fan, field, c, title)));
        }
    }
    for (stem, chart) in &charts {
        artifacts.chart(stem, chart)?;
    }

    let n = spec.n;
    let flat = |m: &backward_mfg::Matrix| m.as_slice().to_vec();
    let g = flat(&spec.g);
    let g_gamma0 = flat(&(&spec.g * &spec.gamma0));
    let g_eta0: Vec<f64> = (0..n).map(|r| (0..n).map(|c| spec.g[(r, c)] * spec.eta0[c]).sum()).collect();
    let zeros = vec![0.0; n * n];
    let limit = &bundle.limit;
    let mut rows = Vec::new();
    rows.extend(boundary_rows("Pi_bar(0)", limit.pi.first().as_slice(), &g.iter().map(|v| -v).collect::<Vec<_>>()));
    rows.extend(boundary_rows("M_bar(0)", limit.m.first().as_slice(), &g_gamma0));
    rows.extend(boundary_rows("Sigma_bar(T)", limit.sigma.last().as_slice(), &zeros));
    rows.extend(boundary_rows("K_bar(T)", limit.k.last().as_slice(), &zeros));
    rows.extend(boundary_rows("zeta_bar(0)", plan.flows.zeta_bar.first().as_slice(), &g_eta0));
    rows.extend(boundary_rows("phi_bar(T)", plan.flows.phi_bar.last().as_slice(), &exi));
    rows.extend(boundary_rows("x0(T)", plan.flows.x0.last().as_slice(), &exi));
    for ((name, fin), (_, lim)) in bundle.finite.set.named().iter().zip(limit.named().iter()) {
        rows.push(vec![format!("sup|{name}_N-{name}_bar|"), num(fin.sup_distance(lim)), "".into(), "".into()]);
    }
    let (dc, cc) = (dec.mean_cost(), cen.mean_cost());
    rows.push(vec!["decentralized_mean_cost".into(), num(dc.mean), "".into(), "".into()]);
    rows.push(vec!["centralized_mean_cost".into(), num(cc.mean), "".into(), "".into()]);
    rows.push(vec!["decentralized_terminal_residual".into(), num(dec.diagnostics.terminal_residual), "0".into(), num(dec.diagnostics.terminal_residual)]);
    rows.push(vec!["centralized_terminal_residual".into(), num(cen.diagnostics.terminal_residual), "0".into(), num(cen.diagnostics.terminal_residual)]);
    let finite = charts.iter().all(|(_, c)| all_finite(c));
    let curves: Vec<String> = charts.iter().map(|(s, c)| format!("{s}:{}", c.curves())).collect();
    rows.push(vec!["all_chart_values_finite".into(), finite.to_string(), "true".into(), "".into()]);
    artifacts.csv("summary.csv", &["quantity", "computed", "expected", "abs_error"], &rows)?;

    let mut text = String::new();
    text.push_str(&format!(
        "Benchmark run: N = {}, T = {}, {} steps, seed {}, {} replication(s)\n\n",
        spec.agents,
        spec.horizon,
        spec.steps,
        spec.seed,
        spec.replications.max(1)
    ));
    for row in &rows {
        if row[2].is_empty() {
            text.push_str(&format!("{:<34} {}\n", row[0], row[1]));
        } else {
            text.push_str(&format!("{:<34} {:<24} expected {:<8} error {}\n", row[0], row[1], row[2], row[3]));
        }
    }
    text.push_str(&format!("\ncurves per chart: {}\n", curves.join(", ")));
    text.push_str(&format!("fan charts show {} of {} agents plus the population mean.\n", fan.len(), spec.agents));
    text.push_str(
        "\nReproduction is qualitative. The published figures carry no numeric data, so the charts \
         match their shapes and boundary values only, not exact curves.\n",
    );
    artifacts.text("summary.txt", &text)?;
    print!("{text}");

    if !finite {
        bail!(Error::NonfiniteBlowup { module: "population", equation: "figure data".into(), node: 0 });
    }
    settings.finish(artifacts, "reproduce-paper")
}
