//! N-agent simulation under the decentralized and centralized strategies.
//!
//! Both modes are driven by the same [`PathBundle`], so runs on one bundle
//! use common random numbers. Deterministic coefficients are solved once per
//! run; per agent and path only affine evaluations and Euler-Maruyama steps
//! remain, which keeps a replication `O(N · steps)`.
//!
//! Centralized states are not integrated. At every node the decoupling
//! relations `x = Σp + Kp⁽ᴺ⁾ + φ` and `p = Πx + Mx⁽ᴺ⁾ + ζ` are solved as a
//! linear system, first for the population mean and then per agent.

use rayon::prelude::*;

use crate::bsde::{solve_affine_bsde, DriverSet, LinearBsdeSpec, Observable};
use crate::bsde::{AffineRepresentation, Diffusion};
use crate::error::{Error, Result};
use crate::fit::{loglog_fit, LogLogFit};
use crate::flows::{solve_mean_flows, MeanFlow};
use crate::linalg::Mat;
use crate::model::{DriverWeights, TimeGrid, ValidatedModel};
use crate::ode::{split_step, Coef, MatrixPath, Stage, StagePath, SPLIT_STAGES};
use crate::paths::{generate_paths, PathBundle, ReplicationPaths};
use crate::riccati::{guarded_inverse, solve_finite_riccatis, solve_limit_riccatis, FiniteRiccati, RiccatiSet};
use crate::riccati::CONDITION_LIMIT;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Decentralized,
    Centralized,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Decentralized => "decentralized",
            Mode::Centralized => "centralized",
        }
    }
}

/// Diffusion of the centralized adjoint offsets `ζᵢ`.
///
/// `Corrected` uses `γᵢⱼ = −(Sⱼ+Π) z*ᵢⱼ − M z̄ⱼ` with `z̄ⱼ = (1/N) Σᵢ z*ᵢⱼ`,
/// which is what matching the `dWⱼ` terms of `p = Πx + Mx⁽ᴺ⁾ + ζ` gives and
/// averages to the `ζ⁽ᴺ⁾` equation. `AsPrinted` replaces the correction term by
/// `(Sⱼ + Σ − M) K₁ⱼ β̄ⱼ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ZetaDiffusion {
    #[default]
    Corrected,
    AsPrinted,
}

/// Which agents keep full trajectories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Record {
    All,
    Agents(Vec<usize>),
}

impl Record {
    fn contains(&self, agent: usize) -> bool {
        match self {
            Record::All => true,
            Record::Agents(v) => v.contains(&agent),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimulationOptions {
    pub record: Record,
    pub zeta_diffusion: ZetaDiffusion,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions { record: Record::All, zeta_diffusion: ZetaDiffusion::Corrected }
    }
}

/// One agent on one replication. Vector paths are node-major:
/// `x[m * n + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrajectory<T> {
    pub agent: usize,
    pub replication: usize,
    pub xi: Vec<T>,
    pub x: Vec<T>,
    pub u: Vec<T>,
    pub zeta: Vec<T>,
    pub phi: Vec<T>,
    /// Adjoint, centralized runs only.
    pub p: Option<Vec<T>>,
    /// `z` on the agent's own driver.
    pub z_own: Vec<T>,
    /// `Σⱼ ‖zᵢⱼ‖²_{Sⱼ}` per node.
    pub z_energy: Vec<T>,
    pub cost: T,
}

/// Population aggregates of one replication (node-major `n`-vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationAggregates<T> {
    /// `x⁽ᴺ⁾`, the agent average of the simulated states.
    pub mean_x: Vec<T>,
    pub mean_u: Vec<T>,
    /// Agent average of `ζᵢ` (or `ζ̄ᵢ`).
    pub mean_zeta: Vec<T>,
    /// Componentwise agent averages of `x²` and `u²`.
    pub second_x: Vec<T>,
    pub second_u: Vec<T>,
    /// Centralized: `φ⁽ᴺ⁾`, `ζ⁽ᴺ⁾` and the mean-block `(x⁽ᴺ⁾, p⁽ᴺ⁾)`.
    pub phi_n: Option<Vec<T>>,
    pub zeta_n: Option<Vec<T>>,
    pub block_x: Option<Vec<T>>,
    pub block_p: Option<Vec<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate<T> {
    pub mean: T,
    pub stderr: T,
}

/// Largest identity violations seen during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// `max |xᵢ(T) − ξᵢ|`.
    pub terminal_residual: f64,
    /// `max ‖R uᵢ + Bᵀ pᵢ‖` (centralized).
    pub stationarity: Option<f64>,
    /// `max ‖pᵢ(0) + (I−Γ₀/N)ᵀG(xᵢ(0) − Γ₀x⁽ᴺ⁾(0) − η₀)‖` (centralized).
    pub adjoint_boundary: Option<f64>,
    /// `max ‖(1/N)Σᵢ pᵢ − p⁽ᴺ⁾‖` against the mean block (centralized).
    pub mean_identity: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PopulationRun<T> {
    pub mode: Mode,
    pub agents: usize,
    pub replications: usize,
    pub grid: TimeGrid<T>,
    pub n: usize,
    pub k: usize,
    pub trajectories: Vec<AgentTrajectory<T>>,
    pub aggregates: Vec<ReplicationAggregates<T>>,
    /// Realized cost of every agent, `agent_costs[r * N + i]`.
    pub agent_costs: Vec<T>,
    pub costs: Vec<CostEstimate<T>>,
    pub diagnostics: Diagnostics,
}

impl<T: Scalar> PopulationRun<T> {
    pub fn trajectory(&self, agent: usize, replication: usize) -> Option<&AgentTrajectory<T>> {
        self.trajectories.iter().find(|t| t.agent == agent && t.replication == replication)
    }

    /// Cost averaged over agents and replications.
    pub fn mean_cost(&self) -> CostEstimate<T> {
        let per_rep: Vec<T> = (0..self.replications)
            .map(|r| {
                let s = &self.agent_costs[r * self.agents..(r + 1) * self.agents];
                s.iter().copied().sum::<T>() / T::of_usize(self.agents)
            })
            .collect();
        let all = estimate(&self.agent_costs);
        if self.replications > 1 {
            estimate(&per_rep)
        } else {
            // One replication: agents are i.i.d., use their spread.
            all
        }
    }
}

/// Sample mean with its standard error.
pub fn estimate<T: Scalar>(samples: &[T]) -> CostEstimate<T> {
    let count = T::of_usize(samples.len());
    let mean = samples.iter().copied().sum::<T>() / count;
    let stderr = if samples.len() > 1 {
        let var = samples.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of_usize(samples.len() - 1);
        (var / count).sqrt()
    } else {
        T::zero()
    };
    CostEstimate { mean, stderr }
}

/// Interval averages of node values, the midpoint loading of a noise kick.
fn step_average<T: Scalar>(nodes: &[Mat<T>]) -> Vec<Mat<T>> {
    nodes.windows(2).map(|w| (&w[0] + &w[1]).scale(T::of(0.5))).collect()
}

fn node_values<T: Scalar>(grid: TimeGrid<T>, f: impl Fn(usize) -> Mat<T>) -> Vec<Mat<T>> {
    (0..grid.nodes()).map(f).collect()
}

/// Per-driver index into weight-dependent tables (one slot when `S` is shared).
fn weight_slot<T: Scalar>(model: &ValidatedModel<T>, driver: usize) -> usize {
    match &model.spec().s {
        DriverWeights::Shared(_) => 0,
        DriverWeights::PerDriver(_) => driver,
    }
}

fn weight_slots<T: Scalar>(model: &ValidatedModel<T>) -> usize {
    match &model.spec().s {
        DriverWeights::Shared(_) => 1,
        DriverWeights::PerDriver(v) => v.len(),
    }
}

/// Running and initial cost of one trajectory:
/// `½ [∫ (‖x − Γ₁x⁽ᴺ⁾ − η₁‖²_Q + ‖u‖²_R + Σⱼ‖zⱼ‖²_{Sⱼ}) dt + ‖x(0) − Γ₀x⁽ᴺ⁾(0) − η₀‖²_G]`
/// with the trapezoid rule in time.
pub fn trajectory_cost<T: Scalar>(
    model: &ValidatedModel<T>,
    grid: TimeGrid<T>,
    x: &[T],
    u: &[T],
    mean_x: &[T],
    z_energy: &[T],
) -> T {
    let spec = model.spec();
    let (n, k) = (spec.n, spec.k);
    let mut dev = vec![T::zero(); n];
    let running = (0..grid.nodes()).map(|m| {
        let xm = &x[m * n..(m + 1) * n];
        let bar = &mean_x[m * n..(m + 1) * n];
        dev.copy_from_slice(xm);
        let g1 = spec.gamma1.at(m);
        let eta1 = spec.eta1.at(m);
        for r in 0..n {
            let mut s = T::zero();
            for c in 0..n {
                s += g1[(r, c)] * bar[c];
            }
            dev[r] -= s + eta1[(r, 0)];
        }
        spec.q.at(m).quad_form(&dev) + spec.r.at(m).quad_form(&u[m * k..(m + 1) * k]) + z_energy[m]
    });
    let integral = grid.trapezoid(running.collect::<Vec<_>>());
    let mut d0 = x[..n].to_vec();
    for r in 0..n {
        let mut s = T::zero();
        for c in 0..n {
            s += spec.gamma0[(r, c)] * mean_x[c];
        }
        d0[r] -= s + spec.eta0[r];
    }
    T::of(0.5) * (integral + spec.g.quad_form(&d0))
}

/// Recomputes the cost of every recorded trajectory from its stored paths.
pub fn evaluate_cost<T: Scalar>(run: &PopulationRun<T>, model: &ValidatedModel<T>) -> Vec<(usize, usize, T)> {
    run.trajectories
        .iter()
        .map(|t| {
            let agg = &run.aggregates[t.replication];
            (t.agent, t.replication, trajectory_cost(model, run.grid, &t.x, &t.u, &agg.mean_x, &t.z_energy))
        })
        .collect()
}

fn per_agent_estimates<T: Scalar>(agent_costs: &[T], agents: usize, reps: usize) -> Vec<CostEstimate<T>> {
    (0..agents)
        .map(|i| estimate(&(0..reps).map(|r| agent_costs[r * agents + i]).collect::<Vec<_>>()))
        .collect()
}

/// `y += M v`.
#[inline]
fn gemv<T: Scalar>(m: &Mat<T>, v: &[T], y: &mut [T]) {
    m.mul_vec_acc(v, y);
}

// ---------------------------------------------------------------------------
// Decentralized
// ---------------------------------------------------------------------------

/// `dφ̄ᵢ = [(A + Σ̄Q)φ̄ᵢ − ((Σ̄+K̄)QΓ₁ − K̄Q)φ̄ − (Σ̄+K̄)Qη₁] dt + β̄ᵢᵢ dWᵢ`, `φ̄ᵢ(T) = ξᵢ`.
pub fn limit_phi_spec<T: Scalar>(
    model: &ValidatedModel<T>,
    limits: &RiccatiSet<T>,
    flows: &MeanFlow<T>,
    agent: usize,
) -> LinearBsdeSpec<T> {
    let spec = model.spec();
    let steps = model.grid().steps();
    let generator = Coef::from_fn(steps, |m, st| spec.a.at(m) + &(&limits.sigma.stage(m, st) * spec.q.at(m)));
    let forcing = Coef::from_fn(steps, |m, st| {
        let sk = &limits.sigma.stage(m, st) + &limits.k.stage(m, st);
        let kq = &limits.k.stage(m, st) * spec.q.at(m);
        let skq = &sk * spec.q.at(m);
        let coupling = &(&skq * spec.gamma1.at(m)) - &kq;
        -&(&(&coupling * &flows.phi_bar.stage(m, st)) + &(&skq * spec.eta1.at(m)))
    });
    let w = Observable::brownian(steps, agent);
    LinearBsdeSpec {
        drivers: spec.agents,
        generator,
        forcing,
        terminal_observable: w.name.clone(),
        observables: vec![w],
        loadings: Vec::new(),
        terminal: spec.terminal.clone(),
    }
}

/// `ζ̄ᵢ` as an affine observable:
/// `dζ̄ᵢ = [(Π̄𝔅 − Aᵀ)ζ̄ᵢ + M̄𝔅ζ̄ + Qη₁] dt − (Sᵢ+Π̄)(I+Σ̄Sᵢ)⁻¹β̄ᵢᵢ dWᵢ`, `ζ̄ᵢ(0) = Gη₀`.
pub fn limit_zeta_observable<T: Scalar>(
    model: &ValidatedModel<T>,
    limits: &RiccatiSet<T>,
    flows: &MeanFlow<T>,
    beta: &MatrixPath<T>,
    agent: usize,
) -> Result<Observable<T>> {
    let spec = model.spec();
    let n = spec.n;
    let steps = model.grid().steps();
    let eye = Mat::<T>::identity(n);
    let s = spec.s.get(agent);
    let drift = Coef::from_fn(steps, |m, st| {
        &(&limits.pi.stage(m, st) * model.control_gain(m)) - &spec.a.at(m).transpose()
    });
    let forcing = Coef::from_fn(steps, |m, st| {
        &(&(&limits.m.stage(m, st) * model.control_gain(m)) * &flows.zeta_bar.stage(m, st)) + &(spec.q.at(m) * spec.eta1.at(m))
    });
    let mut failure = None;
    let loading = Coef::from_fn(steps, |m, st| {
        let sm = s.at(m);
        let l = &eye + &(&limits.sigma.stage(m, st) * sm);
        match guarded_inverse(&l, "I+SigmaBar*S", m) {
            Ok(inv) => -&(&(&(sm + &limits.pi.stage(m, st)) * &inv) * &beta.stage(m, st)),
            Err(e) => {
                failure.get_or_insert(e);
                Mat::zeros(n, 1)
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Observable {
        name: "zeta_bar_i".into(),
        initial: (&spec.g * &Mat::col(&spec.eta0)).as_slice().to_vec(),
        drift,
        forcing,
        diffusion: vec![Diffusion { drivers: DriverSet::One(agent), loading }],
    })
}

/// `dx̄ᵢ = [(A − 𝔅Π̄)x̄ᵢ − 𝔅M̄x₀ − 𝔅ζ̄ᵢ] dt + z̄ᵢᵢ dWᵢ`, `x̄ᵢ(T) = ξᵢ`.
pub fn limit_state_spec<T: Scalar>(
    model: &ValidatedModel<T>,
    limits: &RiccatiSet<T>,
    flows: &MeanFlow<T>,
    zeta: Observable<T>,
    agent: usize,
) -> LinearBsdeSpec<T> {
    let spec = model.spec();
    let steps = model.grid().steps();
    let generator = Coef::from_fn(steps, |m, st| spec.a.at(m) - &(model.control_gain(m) * &limits.pi.stage(m, st)));
    let forcing = Coef::from_fn(steps, |m, st| {
        -&(&(model.control_gain(m) * &limits.m.stage(m, st)) * &flows.x0.stage(m, st))
    });
    let loading = Coef::from_fn(steps, |m, _| -model.control_gain(m));
    let w = Observable::brownian(steps, agent);
    LinearBsdeSpec {
        drivers: spec.agents,
        generator,
        forcing,
        terminal_observable: w.name.clone(),
        loadings: vec![(zeta.name.clone(), loading)],
        observables: vec![w, zeta],
        terminal: spec.terminal.clone(),
    }
}

/// Deterministic ingredients of the decentralized strategy for agents whose
/// running weight is `S_template`.
#[derive(Clone, Debug)]
pub struct DecentralizedSlot<T> {
    pub template: usize,
    pub zeta: Observable<T>,
    pub state: AffineRepresentation<T>,
}

/// Everything the decentralized strategy needs that is not path dependent.
#[derive(Clone, Debug)]
pub struct DecentralizedPlan<T> {
    pub grid: TimeGrid<T>,
    pub limits: RiccatiSet<T>,
    pub flows: MeanFlow<T>,
    pub phi: AffineRepresentation<T>,
    pub slots: Vec<DecentralizedSlot<T>>,
    feedback: Vec<Mat<T>>,
}

impl<T: Scalar> DecentralizedPlan<T> {
    pub fn new(model: &ValidatedModel<T>) -> Result<Self> {
        let grid = model.grid();
        let limits = solve_limit_riccatis(model, grid)?;
        let flows = solve_mean_flows(model, &limits, grid)?;
        Self::from_parts(model, limits, flows)
    }

    pub fn from_parts(model: &ValidatedModel<T>, limits: RiccatiSet<T>, flows: MeanFlow<T>) -> Result<Self> {
        let grid = model.grid();
        let phi = solve_affine_bsde(&limit_phi_spec(model, &limits, &flows, 0), grid)?;
        let beta = phi.coefficients[0].clone();
        let slots = (0..weight_slots(model))
            .map(|template| {
                let zeta = limit_zeta_observable(model, &limits, &flows, &beta, template)?;
                let state = solve_affine_bsde(&limit_state_spec(model, &limits, &flows, zeta.clone(), template), grid)?;
                Ok(DecentralizedSlot { template, zeta, state })
            })
            .collect::<Result<Vec<_>>>()?;
        let feedback = node_values(grid, |m| model.feedback(m));
        Ok(DecentralizedPlan { grid, limits, flows, phi, slots, feedback })
    }

    /// Agent `i`'s decentralized trajectory on one replication. Reads only
    /// `Wᵢ`.
    pub fn agent(&self, model: &ValidatedModel<T>, paths: &ReplicationPaths<T>, agent: usize, replication: usize) -> AgentTrajectory<T> {
        let spec = model.spec();
        let (n, k) = (spec.n, spec.k);
        let grid = self.grid;
        let steps = grid.steps();
        let h = grid.h();
        let slot = &self.slots[weight_slot(model, agent)];
        let w = paths.path(agent);
        let s = spec.s.get(agent);

        let mut zeta = Vec::with_capacity(n * (steps + 1));
        let mut cur = slot.zeta.initial.clone();
        zeta.extend_from_slice(&cur);
        let o = &slot.zeta;
        for m in 0..steps {
            let [start, _, end] = o.diffusion[0].loading.stages(m);
            let kick = (start + end).scale(T::of(0.5) * paths.dw(agent, m));
            split_step(
                &mut cur,
                h,
                o.drift.stages(m),
                |j| o.forcing.get(m, SPLIT_STAGES[j]).as_slice().to_vec(),
                kick.as_slice(),
            );
            zeta.extend_from_slice(&cur);
        }

        let mut x = Vec::with_capacity(n * (steps + 1));
        let mut u = Vec::with_capacity(k * (steps + 1));
        let mut phi = Vec::with_capacity(n * (steps + 1));
        let mut z_own = Vec::with_capacity(n * (steps + 1));
        let mut z_energy = Vec::with_capacity(steps + 1);
        let mut p = vec![T::zero(); n];
        for m in 0..=steps {
            let zm = &zeta[m * n..(m + 1) * n];
            let xm = slot.state.evaluate(m, &[&w[m..m + 1], zm]);
            p.copy_from_slice(zm);
            gemv(self.limits.pi.at(m), &xm, &mut p);
            gemv(self.limits.m.at(m), self.flows.x0.at(m).as_slice(), &mut p);
            let um: Vec<T> = self.feedback[m].mul_vec(&p).into_iter().map(|v| -v).collect();
            let zo = slot.state.integrand(slot.template, m).expect("own driver integrand");
            z_energy.push(s.at(m).quad_form(zo.as_slice()));
            z_own.extend_from_slice(zo.as_slice());
            phi.extend(self.phi.evaluate(m, &[&w[m..m + 1]]));
            x.extend(xm);
            u.extend(um);
        }
        AgentTrajectory {
            agent,
            replication,
            xi: spec.terminal.evaluate(w),
            x,
            u,
            zeta,
            phi,
            p: None,
            z_own,
            z_energy,
            cost: T::zero(),
        }
    }
}

struct Accumulator<T> {
    n: usize,
    k: usize,
    mean_x: Vec<T>,
    mean_u: Vec<T>,
    mean_zeta: Vec<T>,
    second_x: Vec<T>,
    second_u: Vec<T>,
}

impl<T: Scalar> Accumulator<T> {
    fn new(nodes: usize, n: usize, k: usize) -> Self {
        Accumulator {
            n,
            k,
            mean_x: vec![T::zero(); nodes * n],
            mean_u: vec![T::zero(); nodes * k],
            mean_zeta: vec![T::zero(); nodes * n],
            second_x: vec![T::zero(); nodes * n],
            second_u: vec![T::zero(); nodes * k],
        }
    }

    fn add(&mut self, t: &AgentTrajectory<T>) {
        for (i, &v) in t.x.iter().enumerate() {
            self.mean_x[i] += v;
            self.second_x[i] += v * v;
        }
        for (i, &v) in t.u.iter().enumerate() {
            self.mean_u[i] += v;
            self.second_u[i] += v * v;
        }
        for (a, &v) in self.mean_zeta.iter_mut().zip(&t.zeta) {
            *a += v;
        }
    }

    fn finish(mut self, agents: usize) -> ReplicationAggregates<T> {
        let inv = T::one() / T::of_usize(agents);
        for v in self
            .mean_x
            .iter_mut()
            .chain(self.mean_u.iter_mut())
            .chain(self.mean_zeta.iter_mut())
            .chain(self.second_x.iter_mut())
            .chain(self.second_u.iter_mut())
        {
            *v *= inv;
        }
        let _ = (self.n, self.k);
        ReplicationAggregates {
            mean_x: self.mean_x,
            mean_u: self.mean_u,
            mean_zeta: self.mean_zeta,
            second_x: self.second_x,
            second_u: self.second_u,
            phi_n: None,
            zeta_n: None,
            block_x: None,
            block_p: None,
        }
    }
}

fn check_bundle<T: Scalar>(model: &ValidatedModel<T>, bundle: &PathBundle<T>) -> Result<()> {
    if bundle.agents != model.agents() {
        return Err(Error::InvalidConfig(format!("bundle has {} drivers for N = {}", bundle.agents, model.agents())));
    }
    if bundle.grid != model.grid() {
        return Err(Error::InvalidConfig("bundle grid differs from the model grid".into()));
    }
    Ok(())
}

struct RepOutput<T> {
    recorded: Vec<AgentTrajectory<T>>,
    aggregates: ReplicationAggregates<T>,
    costs: Vec<T>,
    diagnostics: Diagnostics,
}

fn merge_diagnostics(a: Diagnostics, b: Diagnostics) -> Diagnostics {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    };
    Diagnostics {
        terminal_residual: a.terminal_residual.max(b.terminal_residual),
        stationarity: opt(a.stationarity, b.stationarity),
        adjoint_boundary: opt(a.adjoint_boundary, b.adjoint_boundary),
        mean_identity: opt(a.mean_identity, b.mean_identity),
    }
}

fn assemble<T: Scalar>(
    mode: Mode,
    model: &ValidatedModel<T>,
    bundle: &PathBundle<T>,
    outputs: Vec<RepOutput<T>>,
) -> PopulationRun<T> {
    let agents = model.agents();
    let reps = bundle.replications;
    let mut trajectories = Vec::new();
    let mut aggregates = Vec::with_capacity(reps);
    let mut agent_costs = Vec::with_capacity(reps * agents);
    let mut diagnostics = Diagnostics::default();
    for o in outputs {
        trajectories.extend(o.recorded);
        aggregates.push(o.aggregates);
        agent_costs.extend(o.costs);
        diagnostics = merge_diagnostics(diagnostics, o.diagnostics);
    }
    let costs = per_agent_estimates(&agent_costs, agents, reps);
    PopulationRun {
        mode,
        agents,
        replications: reps,
        grid: bundle.grid,
        n: model.n(),
        k: model.spec().k,
        trajectories,
        aggregates,
        agent_costs,
        costs,
        diagnostics,
    }
}

fn terminal_gap<T: Scalar>(t: &AgentTrajectory<T>, n: usize, steps: usize) -> f64 {
    t.x[steps * n..]
        .iter()
        .zip(&t.xi)
        .map(|(a, b)| (*a - *b).abs().as_f64())
        .fold(0.0, f64::max)
}

/// Simulates all agents under `ūᵢ = −R⁻¹Bᵀ(Π̄x̄ᵢ + M̄x₀ + ζ̄ᵢ)`.
pub fn simulate_decentralized<T: Scalar>(
    model: &ValidatedModel<T>,
    plan: &DecentralizedPlan<T>,
    bundle: &PathBundle<T>,
    options: &SimulationOptions,
) -> Result<PopulationRun<T>> {
    check_bundle(model, bundle)?;
    let agents = model.agents();
    let (n, k) = (model.n(), model.spec().k);
    let grid = model.grid();
    let steps = grid.steps();
    let outputs: Vec<RepOutput<T>> = (0..bundle.replications)
        .into_par_iter()
        .map(|r| {
            let paths = bundle.replication(r);
            let mut all: Vec<AgentTrajectory<T>> = (0..agents).map(|i| plan.agent(model, &paths, i, r)).collect();
            let mut acc = Accumulator::new(grid.nodes(), n, k);
            let mut diagnostics = Diagnostics::default();
            for t in &all {
                acc.add(t);
                diagnostics.terminal_residual = diagnostics.terminal_residual.max(terminal_gap(t, n, steps));
            }
            let aggregates = acc.finish(agents);
            let costs: Vec<T> = all
                .iter_mut()
                .map(|t| {
                    t.cost = trajectory_cost(model, grid, &t.x, &t.u, &aggregates.mean_x, &t.z_energy);
                    t.cost
                })
                .collect();
            let recorded = all.into_iter().filter(|t| options.record.contains(t.agent)).collect();
            RepOutput { recorded, aggregates, costs, diagnostics }
        })
        .collect();
    Ok(assemble(Mode::Decentralized, model, bundle, outputs))
}

// ---------------------------------------------------------------------------
// Centralized
// ---------------------------------------------------------------------------

/// Deterministic ingredients of the centralized Nash strategy.
#[derive(Clone, Debug)]
pub struct CentralizedPlan<T> {
    pub grid: TimeGrid<T>,
    pub riccati: FiniteRiccati<T>,
    /// `φ⁽ᴺ⁾ = a₀ + g_N W̄`, `W̄ = (1/N) Σⱼ Wⱼ`.
    pub mean_phi: AffineRepresentation<T>,
    /// `φᵢ = m₀ + M_W Wᵢ + M_φ φ⁽ᴺ⁾`.
    pub phi: AffineRepresentation<T>,
    pub zeta_diffusion: ZetaDiffusion,
    beta_own: Vec<Mat<T>>,
    beta_other: Vec<Mat<T>>,
    beta_mean: Vec<Mat<T>>,
    /// Per weight slot: `z*` on the own driver and on any other driver.
    z_own: Vec<Vec<Mat<T>>>,
    z_other: Vec<Vec<Mat<T>>>,
    /// `ζ` loadings per weight slot, averaged over each step.
    gamma_own: Vec<Vec<Mat<T>>>,
    gamma_other: Vec<Vec<Mat<T>>>,
    gamma_mean: Vec<Vec<Mat<T>>>,
    zeta_drift: Coef<T>,
    zeta_coupling: Coef<T>,
    zeta_mean_drift: Coef<T>,
    zeta_forcing: Coef<T>,
    zeta_start: Vec<T>,
    block_inv: Vec<Mat<T>>,
    agent_inv: Vec<Mat<T>>,
    feedback: Vec<Mat<T>>,
}

fn reconstruction_inverse<T: Scalar>(m: &Mat<T>, factor: &str, node: usize) -> Result<Mat<T>> {
    match m.inverse_with_cond() {
        Some(inv) if inv.cond.as_f64() <= CONDITION_LIMIT => Ok(inv.inv),
        Some(inv) => Err(Error::SingularReconstruction { factor: factor.into(), node, cond: inv.cond.as_f64() }),
        None => Err(Error::SingularReconstruction { factor: factor.into(), node, cond: f64::INFINITY }),
    }
}

impl<T: Scalar> CentralizedPlan<T> {
    pub fn new(model: &ValidatedModel<T>, zeta_diffusion: ZetaDiffusion) -> Result<Self> {
        let grid = model.grid();
        let riccati = solve_finite_riccatis(model, grid)?;
        Self::from_riccati(model, riccati, zeta_diffusion)
    }

    pub fn from_riccati(model: &ValidatedModel<T>, riccati: FiniteRiccati<T>, zeta_diffusion: ZetaDiffusion) -> Result<Self> {
        let spec = model.spec();
        let n = spec.n;
        let agents = model.agents();
        let grid = model.grid();
        let steps = grid.steps();
        let eye = Mat::<T>::identity(n);
        let inv_n = T::one() / T::of_usize(agents);
        let set = &riccati.set;
        let qt = |m: usize| -> Mat<T> { &(&eye - &spec.gamma1.at(m).scale(inv_n)).transpose() * spec.q.at(m) };
        let sk = |m: usize, st: Stage| &set.sigma.stage(m, st) + &set.k.stage(m, st);

        // Mean BSDE over W̄.
        let mean_drift = Coef::from_fn(steps, |m, st| {
            spec.a.at(m) + &(&(&sk(m, st) * &qt(m)) * &(&eye - spec.gamma1.at(m)))
        });
        let mean_forcing = Coef::from_fn(steps, |m, st| -&(&(&sk(m, st) * &qt(m)) * spec.eta1.at(m)));
        let wbar = Observable::brownian_sum(steps, DriverSet::All, inv_n, "mean W".into());
        let mean_spec = LinearBsdeSpec {
            drivers: agents,
            generator: mean_drift.clone(),
            forcing: mean_forcing.clone(),
            terminal_observable: wbar.name.clone(),
            observables: vec![wbar],
            loadings: Vec::new(),
            terminal: spec.terminal.clone(),
        };
        let mean_phi = solve_affine_bsde(&mean_spec, grid)?;

        // Per-agent BSDE with φ⁽ᴺ⁾ as an auxiliary observable.
        let g_n = mean_phi.coefficients[0].clone();
        let phi_n = Observable {
            name: "phi_N".into(),
            initial: mean_phi.constant.first().as_slice().to_vec(),
            drift: mean_drift,
            forcing: mean_forcing.clone(),
            diffusion: vec![Diffusion {
                drivers: DriverSet::All,
                loading: Coef::from_fn(steps, |m, st| g_n.stage(m, st).scale(inv_n)),
            }],
        };
        let w0 = Observable::brownian(steps, 0);
        let agent_spec = LinearBsdeSpec {
            drivers: agents,
            generator: Coef::from_fn(steps, |m, st| spec.a.at(m) + &(&set.sigma.stage(m, st) * &qt(m))),
            forcing: mean_forcing,
            terminal_observable: w0.name.clone(),
            loadings: vec![(
                "phi_N".into(),
                Coef::from_fn(steps, |m, st| {
                    &(&set.k.stage(m, st) * &qt(m)) - &(&(&sk(m, st) * &qt(m)) * spec.gamma1.at(m))
                }),
            )],
            observables: vec![w0, phi_n],
            terminal: spec.terminal.clone(),
        };
        let phi = solve_affine_bsde(&agent_spec, grid)?;

        let zero = Mat::zeros(n, 1);
        let beta_own: Vec<Mat<T>> = (0..=steps).map(|m| phi.integrand(0, m).cloned().unwrap_or_else(|| zero.clone())).collect();
        let beta_other: Vec<Mat<T>> = (0..=steps)
            .map(|m| if agents > 1 { phi.integrand(1, m).cloned().unwrap_or_else(|| zero.clone()) } else { zero.clone() })
            .collect();
        let beta_mean: Vec<Mat<T>> = (0..=steps).map(|m| g_n.at(m).scale(inv_n)).collect();

        let slots = weight_slots(model);
        let mut z_own = Vec::with_capacity(slots);
        let mut z_other = Vec::with_capacity(slots);
        let mut gamma_own = Vec::with_capacity(slots);
        let mut gamma_other = Vec::with_capacity(slots);
        let mut gamma_mean = Vec::with_capacity(slots);
        for w in 0..slots {
            let s_tab = spec.s.get(w);
            let (mut zo, mut zx, mut go, mut gx, mut gm) = (vec![], vec![], vec![], vec![], vec![]);
            for m in 0..=steps {
                let s = s_tab.at(m);
                let sigma = set.sigma.at(m);
                let (pi, mm) = (set.pi.at(m), set.m.at(m));
                let k1 = riccati.k1.get(w, m);
                let l_inv = guarded_inverse(&(&eye + &(sigma * s)), "I+Sigma*S", m)?;
                let sks = &eye + &(&(sigma + set.k.at(m)) * s);
                let mean_inv = guarded_inverse(&sks, "I+(Sigma+K)*S", m)?;
                let corr = k1 * &beta_mean[m];
                let z_o = &(&l_inv * &beta_own[m]) - &corr;
                let z_x = &(&l_inv * &beta_other[m]) - &corr;
                let z_bar = &mean_inv * &beta_mean[m];
                let s_pi = s + pi;
                let (g_o, g_x) = match zeta_diffusion {
                    ZetaDiffusion::Corrected => {
                        let mz = mm * &z_bar;
                        (-&(&(&s_pi * &z_o) + &mz), -&(&(&s_pi * &z_x) + &mz))
                    }
                    ZetaDiffusion::AsPrinted => {
                        let common = &(&(&(s + sigma) - mm) * &corr) - &(&(mm * &l_inv) * &beta_mean[m]);
                        (
                            &common - &(&(&s_pi * &l_inv) * &beta_own[m]),
                            &common - &(&(&s_pi * &l_inv) * &beta_other[m]),
                        )
                    }
                };
                // Mean equation diffusion: −(Sⱼ + Π + M)(I + (Σ+K)Sⱼ)⁻¹ β̄ⱼ.
                let g_m = -&(&(&s_pi + mm) * &z_bar);
                zo.push(z_o);
                zx.push(z_x);
                go.push(g_o);
                gx.push(g_x);
                gm.push(g_m);
            }
            z_own.push(zo);
            z_other.push(zx);
            gamma_own.push(step_average(&go));
            gamma_other.push(step_average(&gx));
            gamma_mean.push(step_average(&gm));
        }

        let c0 = &eye - &spec.gamma0.scale(inv_n);
        let zeta_start = (&(&c0.transpose() * &spec.g) * &Mat::col(&spec.eta0)).as_slice().to_vec();
        let zeta_drift = Coef::from_fn(steps, |m, st| {
            &(&set.pi.stage(m, st) * model.control_gain(m)) - &spec.a.stage(m, st).transpose()
        });
        let zeta_coupling = Coef::from_fn(steps, |m, st| &set.m.stage(m, st) * model.control_gain(m));
        let zeta_mean_drift = Coef::from_fn(steps, |m, st| {
            &(&(&set.pi.stage(m, st) + &set.m.stage(m, st)) * model.control_gain(m)) - &spec.a.stage(m, st).transpose()
        });
        let zeta_forcing = Coef::from_fn(steps, |m, _| &qt(m) * spec.eta1.at(m));
        let mut block_inv = Vec::with_capacity(steps + 1);
        let mut agent_inv = Vec::with_capacity(steps + 1);
        for m in 0..=steps {
            let skm = set.sigma.at(m) + set.k.at(m);
            let pm = set.pi.at(m) + set.m.at(m);
            block_inv.push(reconstruction_inverse(&(&eye - &(&skm * &pm)), "I-(Sigma+K)(Pi+M)", m)?);
            agent_inv.push(reconstruction_inverse(&(&eye - &(set.sigma.at(m) * set.pi.at(m))), "I-Sigma*Pi", m)?);
        }
        let feedback = node_values(grid, |m| model.feedback(m));
        Ok(CentralizedPlan {
            grid,
            riccati,
            mean_phi,
            phi,
            zeta_diffusion,
            beta_own,
            beta_other,
            beta_mean,
            z_own,
            z_other,
            gamma_own,
            gamma_other,
            gamma_mean,
            zeta_drift,
            zeta_coupling,
            zeta_mean_drift,
            zeta_forcing,
            zeta_start,
            block_inv,
            agent_inv,
            feedback,
        })
    }

    /// `βᵢᵢ`, `βᵢⱼ (j ≠ i)` and `β̄ⱼ` at a node.
    pub fn beta(&self, node: usize) -> (&Mat<T>, &Mat<T>, &Mat<T>) {
        (&self.beta_own[node], &self.beta_other[node], &self.beta_mean[node])
    }

    /// `z*ᵢᵢ` and `z*ᵢⱼ (j ≠ i)` for the weight of `driver`.
    pub fn z(&self, model: &ValidatedModel<T>, driver: usize, node: usize) -> (&Mat<T>, &Mat<T>) {
        let w = weight_slot(model, driver);
        (&self.z_own[w][node], &self.z_other[w][node])
    }

    fn replication(
        &self,
        model: &ValidatedModel<T>,
        paths: &ReplicationPaths<T>,
        r: usize,
        record: &Record,
    ) -> RepOutput<T> {
        let spec = model.spec();
        let (n, k) = (spec.n, spec.k);
        let agents = model.agents();
        let grid = self.grid;
        let steps = grid.steps();
        let nodes = steps + 1;
        let h = grid.h();
        let inv_n = T::one() / T::of_usize(agents);
        let set = &self.riccati.set;
        let shared = weight_slots(model) == 1;

        // Σⱼ cⱼ ΔWⱼ for driver-dependent columns cⱼ (only needed per driver
        // when the weights differ).
        let weighted = |tables: &Vec<Vec<Mat<T>>>, m: usize| -> Vec<T> {
            if shared {
                tables[0][m].scale(paths.dw_total(m)).as_slice().to_vec()
            } else {
                let mut acc = vec![T::zero(); n];
                for j in 0..agents {
                    let dw = paths.dw(j, m);
                    for (a, v) in acc.iter_mut().zip(tables[j][m].as_slice()) {
                        *a += *v * dw;
                    }
                }
                acc
            }
        };

        // W̄, φ⁽ᴺ⁾ and ζ⁽ᴺ⁾.
        let mut wbar = vec![T::zero(); nodes];
        for m in 0..steps {
            wbar[m + 1] = wbar[m] + paths.dw_total(m) * inv_n;
        }
        let mut phi_n = Vec::with_capacity(nodes * n);
        for m in 0..nodes {
            phi_n.extend(self.mean_phi.evaluate(m, &[&wbar[m..m + 1]]));
        }
        let mut zeta_n = Vec::with_capacity(nodes * n);
        let mut traces = Vec::with_capacity(steps);
        let mut cur = self.zeta_start.clone();
        zeta_n.extend_from_slice(&cur);
        for m in 0..steps {
            let noise = weighted(&self.gamma_mean, m);
            traces.push(split_step(
                &mut cur,
                h,
                self.zeta_mean_drift.stages(m),
                |j| self.zeta_forcing.get(m, SPLIT_STAGES[j]).as_slice().to_vec(),
                &noise,
            ));
            zeta_n.extend_from_slice(&cur);
        }

        // Mean block and the agent-independent part of the reconstruction.
        let mut block_x = Vec::with_capacity(nodes * n);
        let mut block_p = Vec::with_capacity(nodes * n);
        let mut shift = Vec::with_capacity(nodes * n);
        for m in 0..nodes {
            let zn = &zeta_n[m * n..(m + 1) * n];
            let mut rhs = phi_n[m * n..(m + 1) * n].to_vec();
            gemv(&(set.sigma.at(m) + set.k.at(m)), zn, &mut rhs);
            let xn = self.block_inv[m].mul_vec(&rhs);
            let mut pn = zn.to_vec();
            gemv(&(set.pi.at(m) + set.m.at(m)), &xn, &mut pn);
            let mut s = vec![T::zero(); n];
            gemv(&(set.sigma.at(m) * set.m.at(m)), &xn, &mut s);
            gemv(set.k.at(m), &pn, &mut s);
            shift.extend(s);
            block_x.extend(xn);
            block_p.extend(pn);
        }

        // Σ_{j} cⱼ ΔWⱼ for the "other driver" ζ loading, per step.
        let other_noise: Vec<Vec<T>> = (0..steps).map(|m| weighted(&self.gamma_other, m)).collect();
        // Σ_{j} ‖z*ᵢⱼ‖²_{Sⱼ} over all j with the "other driver" integrand.
        let other_energy: Vec<T> = (0..nodes)
            .map(|m| {
                if shared {
                    spec.s.get(0).at(m).quad_form(self.z_other[0][m].as_slice()) * T::of_usize(agents)
                } else {
                    (0..agents).map(|j| spec.s.get(j).at(m).quad_form(self.z_other[j][m].as_slice())).sum()
                }
            })
            .collect();

        let mut all: Vec<AgentTrajectory<T>> = Vec::with_capacity(agents);
        let mut diagnostics = Diagnostics { stationarity: Some(0.0), adjoint_boundary: Some(0.0), mean_identity: Some(0.0), ..Default::default() };
        let mut mean_p = vec![T::zero(); nodes * n];
        for i in 0..agents {
            let w = weight_slot(model, i);
            let wi = paths.path(i);
            let s_i = spec.s.get(i);
            let mut zeta = Vec::with_capacity(nodes * n);
            let mut cur = self.zeta_start.clone();
            zeta.extend_from_slice(&cur);
            for m in 0..steps {
                let dw = paths.dw(i, m);
                let (go, gx) = (&self.gamma_own[w][m], &self.gamma_other[w][m]);
                let kick: Vec<T> = (0..n).map(|c| (go[(c, 0)] - gx[(c, 0)]) * dw + other_noise[m][c]).collect();
                split_step(
                    &mut cur,
                    h,
                    self.zeta_drift.stages(m),
                    |j| {
                        let mut g = self.zeta_forcing.get(m, SPLIT_STAGES[j]).as_slice().to_vec();
                        gemv(self.zeta_coupling.get(m, SPLIT_STAGES[j]), &traces[m].points[j], &mut g);
                        g
                    },
                    &kick,
                );
                zeta.extend_from_slice(&cur);
            }
            let mut x = Vec::with_capacity(nodes * n);
            let mut u = Vec::with_capacity(nodes * k);
            let mut p = Vec::with_capacity(nodes * n);
            let mut phi = Vec::with_capacity(nodes * n);
            let mut z_own = Vec::with_capacity(nodes * n);
            let mut z_energy = Vec::with_capacity(nodes);
            for m in 0..nodes {
                let zm = &zeta[m * n..(m + 1) * n];
                let phim = self.phi.evaluate(m, &[&wi[m..m + 1], &phi_n[m * n..(m + 1) * n]]);
                let mut rhs = phim.clone();
                for (a, b) in rhs.iter_mut().zip(&shift[m * n..(m + 1) * n]) {
                    *a += *b;
                }
                gemv(set.sigma.at(m), zm, &mut rhs);
                let xm = self.agent_inv[m].mul_vec(&rhs);
                let mut pm = zm.to_vec();
                gemv(set.pi.at(m), &xm, &mut pm);
                gemv(set.m.at(m), &block_x[m * n..(m + 1) * n], &mut pm);
                let um: Vec<T> = self.feedback[m].mul_vec(&pm).into_iter().map(|v| -v).collect();
                // R u + Bᵀ p
                let mut station = spec.b.at(m).transpose().mul_vec(&pm);
                gemv(spec.r.at(m), &um, &mut station);
                let sres = station.iter().map(|v| v.abs().as_f64()).fold(0.0, f64::max);
                diagnostics.stationarity = diagnostics.stationarity.map(|s| s.max(sres));
                let zo = &self.z_own[w][m];
                let own_energy = s_i.at(m).quad_form(zo.as_slice());
                let own_as_other = s_i.at(m).quad_form(self.z_other[w][m].as_slice());
                z_energy.push(other_energy[m] - own_as_other + own_energy);
                z_own.extend_from_slice(zo.as_slice());
                for (a, v) in mean_p[m * n..(m + 1) * n].iter_mut().zip(&pm) {
                    *a += *v;
                }
                x.extend(xm);
                u.extend(um);
                p.extend(pm);
                phi.extend(phim);
            }
            all.push(AgentTrajectory {
                agent: i,
                replication: r,
                xi: spec.terminal.evaluate(wi),
                x,
                u,
                zeta,
                phi,
                p: Some(p),
                z_own,
                z_energy,
                cost: T::zero(),
            });
        }

        let mut acc = Accumulator::new(nodes, n, k);
        for t in &all {
            acc.add(t);
            diagnostics.terminal_residual = diagnostics.terminal_residual.max(terminal_gap(t, n, steps));
        }
        let mut aggregates = acc.finish(agents);

        // Identities that tie agents to the mean block.
        let mi = mean_p
            .iter()
            .zip(&block_p)
            .map(|(a, b)| (*a * inv_n - *b).abs().as_f64())
            .fold(0.0, f64::max);
        diagnostics.mean_identity = Some(mi);
        let c0 = &Mat::identity(n) - &spec.gamma0.scale(inv_n);
        let c0tg = &c0.transpose() * &spec.g;
        let xbar0 = &aggregates.mean_x[..n];
        for t in &all {
            let mut d = t.x[..n].to_vec();
            let g0x = spec.gamma0.mul_vec(xbar0);
            for c in 0..n {
                d[c] -= g0x[c] + spec.eta0[c];
            }
            let mut res = t.p.as_ref().unwrap()[..n].to_vec();
            gemv(&c0tg, &d, &mut res);
            let v = res.iter().map(|v| v.abs().as_f64()).fold(0.0, f64::max);
            diagnostics.adjoint_boundary = diagnostics.adjoint_boundary.map(|a| a.max(v));
        }

        let costs: Vec<T> = all
            .iter_mut()
            .map(|t| {
                t.cost = trajectory_cost(model, grid, &t.x, &t.u, &aggregates.mean_x, &t.z_energy);
                t.cost
            })
            .collect();
        aggregates.phi_n = Some(phi_n);
        aggregates.zeta_n = Some(zeta_n);
        aggregates.block_x = Some(block_x);
        aggregates.block_p = Some(block_p);
        let recorded = all.into_iter().filter(|t| record.contains(t.agent)).collect();
        RepOutput { recorded, aggregates, costs, diagnostics }
    }
}

/// Simulates all agents under the finite-N centralized Nash strategy
/// `u*ᵢ = −R⁻¹Bᵀ(Πx*ᵢ + Mx*⁽ᴺ⁾ + ζᵢ)`.
pub fn simulate_centralized<T: Scalar>(
    model: &ValidatedModel<T>,
    plan: &CentralizedPlan<T>,
    bundle: &PathBundle<T>,
    options: &SimulationOptions,
) -> Result<PopulationRun<T>> {
    check_bundle(model, bundle)?;
    if plan.riccati.agents != model.agents() {
        return Err(Error::InvalidConfig(format!(
            "plan solved for N = {}, model has N = {}",
            plan.riccati.agents,
            model.agents()
        )));
    }
    let outputs: Vec<RepOutput<T>> = (0..bundle.replications)
        .into_par_iter()
        .map(|r| plan.replication(model, &bundle.replication(r), r, &options.record))
        .collect();
    Ok(assemble(Mode::Centralized, model, bundle, outputs))
}

// ---------------------------------------------------------------------------
// Convergence metrics
// ---------------------------------------------------------------------------

/// Metric names in table order.
pub const METRICS: [&str; 4] = ["x_N-x0", "phi_N-phi_bar", "zeta_i-zeta_bar_i", "x_i-x_bar_i"];

#[derive(Clone, Debug)]
pub struct ConvergenceTable {
    pub ladder: Vec<usize>,
    pub replications: usize,
    /// `values[metric][ladder index]`.
    pub values: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub fits: Vec<Option<LogLogFit>>,
}

impl ConvergenceTable {
    pub fn slope(&self, metric: &str) -> Option<f64> {
        METRICS.iter().position(|m| *m == metric).and_then(|i| self.fits[i].as_ref().map(|f| f.slope))
    }
}

fn integral_sq_diff<T: Scalar>(grid: TimeGrid<T>, a: &[T], b: &[T], n: usize) -> f64 {
    let vals: Vec<f64> = (0..grid.nodes())
        .map(|m| (0..n).map(|c| (a[m * n + c] - b[m * n + c]).as_f64().powi(2)).sum())
        .collect();
    let last = vals.len() - 1;
    let inner: f64 = vals.iter().sum::<f64>() - 0.5 * (vals[0] + vals[last]);
    inner * grid.h().as_f64()
}

/// Agents whose trajectories enter the per-agent metrics.
pub fn metric_agents(agents: usize, count: usize) -> Vec<usize> {
    let count = count.min(agents).max(1);
    (0..count).map(|i| i * agents / count).collect()
}

/// `E∫|x⁽ᴺ⁾−x₀|²`, `E∫|φ⁽ᴺ⁾−φ̄|²`, `E∫|ζᵢ−ζ̄ᵢ|²`, `E∫|x*ᵢ−x̄ᵢ|²` along a
/// population ladder, both modes on shared paths per `N`.
pub fn convergence_metrics<T: Scalar>(
    model: &ValidatedModel<T>,
    ladder: &[usize],
    replications: usize,
    seed: u64,
    sampled_agents: usize,
) -> Result<ConvergenceTable> {
    if ladder.len() < 3 {
        return Err(Error::InvalidConfig("convergence ladder needs at least 3 entries".into()));
    }
    if ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("convergence ladder must be strictly increasing".into()));
    }
    let mut values = vec![Vec::new(); METRICS.len()];
    let mut stderr = vec![Vec::new(); METRICS.len()];
    for &agents in ladder {
        let model_n = model.with_agents(agents)?;
        let grid = model_n.grid();
        let n = model_n.n();
        let bundle = generate_paths(grid, agents, replications, seed)?;
        let sample = metric_agents(agents, sampled_agents);
        let options = SimulationOptions { record: Record::Agents(sample.clone()), ..Default::default() };
        let dplan = DecentralizedPlan::new(&model_n)?;
        let cplan = CentralizedPlan::new(&model_n, ZetaDiffusion::Corrected)?;
        let dec = simulate_decentralized(&model_n, &dplan, &bundle, &options)?;
        let cen = simulate_centralized(&model_n, &cplan, &bundle, &options)?;
        let x0: Vec<T> = dplan.flows.x0.values().iter().flat_map(|v| v.as_slice().to_vec()).collect();
        let phibar: Vec<T> = dplan.flows.phi_bar.values().iter().flat_map(|v| v.as_slice().to_vec()).collect();
        let mut per_rep = vec![Vec::with_capacity(replications); METRICS.len()];
        for r in 0..replications {
            let agg = &cen.aggregates[r];
            per_rep[0].push(integral_sq_diff(grid, &agg.mean_x, &x0, n));
            per_rep[1].push(integral_sq_diff(grid, agg.phi_n.as_ref().unwrap(), &phibar, n));
            let (mut zeta_gap, mut x_gap) = (0.0, 0.0);
            for &i in &sample {
                let c = cen.trajectory(i, r).unwrap();
                let d = dec.trajectory(i, r).unwrap();
                zeta_gap += integral_sq_diff(grid, &c.zeta, &d.zeta, n);
                x_gap += integral_sq_diff(grid, &c.x, &d.x, n);
            }
            per_rep[2].push(zeta_gap / sample.len() as f64);
            per_rep[3].push(x_gap / sample.len() as f64);
        }
        for (q, samples) in per_rep.iter().enumerate() {
            let e = estimate(samples);
            values[q].push(e.mean);
            stderr[q].push(e.stderr);
        }
    }
    if values.iter().all(|v| v.iter().all(|&x| x < crate::riccati::COINCIDENCE_FLOOR)) {
        return Err(Error::DegenerateFit("exact coincidence: centralized and decentralized runs agree".into()));
    }
    let fits = values
        .iter()
        .map(|v| {
            let pairs: Vec<(f64, f64)> = ladder.iter().map(|&n| n as f64).zip(v.iter().copied()).collect();
            loglog_fit(&pairs).ok()
        })
        .collect();
    Ok(ConvergenceTable { ladder: ladder.to_vec(), replications, values, stderr, fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn reference(agents: usize, steps: usize) -> ValidatedModel<f64> {
        ModelSpec::reference_scalar().with_agents(agents).with_steps(steps).validate().unwrap()
    }

    fn runs(agents: usize, reps: usize, diffusion: ZetaDiffusion) -> (PopulationRun<f64>, PopulationRun<f64>) {
        let model = reference(agents, 50);
        let bundle = generate_paths(model.grid(), agents, reps, 7).unwrap();
        let options = SimulationOptions { zeta_diffusion: diffusion, ..Default::default() };
        let dec = simulate_decentralized(&model, &DecentralizedPlan::new(&model).unwrap(), &bundle, &options).unwrap();
        let cen = simulate_centralized(&model, &CentralizedPlan::new(&model, diffusion).unwrap(), &bundle, &options).unwrap();
        (dec, cen)
    }

    #[test]
    fn zero_trajectories_cost_one_and_a_half() {
        let model = reference(10, 40);
        let nodes = model.grid().nodes();
        let zeros = vec![0.0; nodes];
        let cost = trajectory_cost(&model, model.grid(), &zeros, &zeros, &zeros, &zeros);
        assert!((cost - 1.5).abs() < 1e-12, "{cost}");
    }

    #[test]
    fn decentralized_paths_hit_terminal_and_read_own_driver_only() {
        let small = reference(5, 40);
        let large = reference(12, 40);
        let opts = SimulationOptions { record: Record::Agents(vec![0, 3]), ..Default::default() };
        let run = |model: &ValidatedModel<f64>| {
            let bundle = generate_paths(model.grid(), model.agents(), 3, 11).unwrap();
            simulate_decentralized(model, &DecentralizedPlan::new(model).unwrap(), &bundle, &opts).unwrap()
        };
        let (a, b) = (run(&small), run(&large));
        assert!(a.diagnostics.terminal_residual < 1e-8);
        assert!(b.diagnostics.terminal_residual < 1e-8);
        assert_eq!(a.trajectories.len(), 6);
        for r in 0..3 {
            for i in [0, 3] {
                let (ta, tb) = (a.trajectory(i, r).unwrap(), b.trajectory(i, r).unwrap());
                assert_eq!(ta.x, tb.x);
                assert_eq!(ta.u, tb.u);
                assert_eq!(ta.zeta, tb.zeta);
            }
        }
    }

    #[test]
    fn centralized_optimality_residuals_vanish() {
        let (_, cen) = runs(16, 3, ZetaDiffusion::Corrected);
        let d = cen.diagnostics;
        assert!(d.terminal_residual < 1e-8, "{d:?}");
        assert!(d.stationarity.unwrap() < 1e-10, "{d:?}");
        assert!(d.adjoint_boundary.unwrap() < 1e-8, "{d:?}");
        assert!(d.mean_identity.unwrap() < 1e-8, "{d:?}");
    }

    #[test]
    fn printed_zeta_diffusion_breaks_the_mean_identity() {
        let (_, cen) = runs(16, 3, ZetaDiffusion::AsPrinted);
        assert!(cen.diagnostics.mean_identity.unwrap() > 1e-5, "{:?}", cen.diagnostics);
        assert!(cen.diagnostics.stationarity.unwrap() < 1e-10);
    }

    #[test]
    fn stored_costs_match_recomputation() {
        let (dec, cen) = runs(6, 2, ZetaDiffusion::Corrected);
        let model = reference(6, 50);
        for run in [&dec, &cen] {
            for (agent, rep, cost) in evaluate_cost(run, &model) {
                assert_eq!(cost, run.agent_costs[rep * run.agents + agent]);
                assert!(cost > 0.0);
            }
            assert_eq!(run.costs.len(), 6);
        }
    }

    // Accumulated forward-dynamics residual of dx = (Ax + Bu)dt + Σⱼ zⱼ dWⱼ.
    fn dynamics_residual(steps: usize) -> f64 {
        let model = reference(10, steps);
        let bundle = generate_paths(model.grid(), 10, 4, 3).unwrap();
        let plan = CentralizedPlan::new(&model, ZetaDiffusion::Corrected).unwrap();
        let run = simulate_centralized(&model, &plan, &bundle, &SimulationOptions::default()).unwrap();
        let h = model.grid().h();
        let mut worst = 0.0f64;
        for t in &run.trajectories {
            let paths = bundle.replication(t.replication);
            let mut acc = 0.0;
            for m in 0..steps {
                let (zo, zx) = plan.z(&model, t.agent, m);
                let dwi = paths.dw(t.agent, m);
                let drift = 0.1 * t.x[m] + 2.0 * t.u[m];
                acc += t.x[m + 1] - t.x[m] - h * drift - zo[(0, 0)] * dwi - zx[(0, 0)] * (paths.dw_total(m) - dwi);
                worst = worst.max(acc.abs());
            }
        }
        worst
    }

    #[test]
    fn centralized_states_follow_their_dynamics() {
        let (coarse, fine) = (dynamics_residual(50), dynamics_residual(100));
        assert!(fine < 0.05, "{fine}");
        let ratio = coarse / fine;
        assert!((1.6..2.5).contains(&ratio), "{coarse} {fine}");
    }

    #[test]
    fn uncoupled_population_needs_no_coordination() {
        let model = ModelSpec::<f64>::reference_scalar().with_agents(6).with_steps(50).uncoupled().validate().unwrap();
        let bundle = generate_paths(model.grid(), 6, 2, 5).unwrap();
        let opts = SimulationOptions::default();
        let dec = simulate_decentralized(&model, &DecentralizedPlan::new(&model).unwrap(), &bundle, &opts).unwrap();
        let cen = simulate_centralized(&model, &CentralizedPlan::new(&model, ZetaDiffusion::Corrected).unwrap(), &bundle, &opts)
            .unwrap();
        for (c, d) in cen.trajectories.iter().zip(&dec.trajectories) {
            for (a, b) in c.x.iter().zip(&d.x) {
                assert!((a - b).abs() < 1e-6, "{a} {b}");
            }
            assert!((c.cost - d.cost).abs() < 1e-6);
        }
    }

    #[test]
    fn driver_specific_weights_keep_the_identities() {
        use crate::model::{DriverWeights, Table};
        let mut spec = ModelSpec::<f64>::reference_scalar().with_agents(5).with_steps(40);
        spec.s = DriverWeights::PerDriver((0..5).map(|j| Table::constant(Mat::scalar(0.5 + j as f64))).collect());
        let model = spec.validate().unwrap();
        let bundle = generate_paths(model.grid(), 5, 2, 13).unwrap();
        let cen = simulate_centralized(&model, &CentralizedPlan::new(&model, ZetaDiffusion::Corrected).unwrap(), &bundle, &Default::default())
            .unwrap();
        let d = cen.diagnostics;
        assert!(d.mean_identity.unwrap() < 1e-8 && d.adjoint_boundary.unwrap() < 1e-8, "{d:?}");
        let dec = simulate_decentralized(&model, &DecentralizedPlan::new(&model).unwrap(), &bundle, &Default::default()).unwrap();
        assert!(dec.diagnostics.terminal_residual < 1e-8);
        assert_ne!(dec.trajectory(0, 0).unwrap().z_own, dec.trajectory(4, 0).unwrap().z_own);
    }

    #[test]
    fn mismatched_bundle_is_rejected() {
        let model = reference(4, 50);
        let bundle = generate_paths(model.grid(), 5, 1, 1).unwrap();
        let err = simulate_decentralized(&model, &DecentralizedPlan::new(&model).unwrap(), &bundle, &Default::default());
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn metric_agents_spread_over_population() {
        assert_eq!(metric_agents(300, 4), vec![0, 75, 150, 225]);
        assert_eq!(metric_agents(3, 8), vec![0, 1, 2]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn agent_average_tracks_mean_block(agents in 2usize..12, seed in 0u64..1_000) {
            let model = reference(agents, 20);
            let bundle = generate_paths(model.grid(), agents, 1, seed).unwrap();
            let plan = CentralizedPlan::new(&model, ZetaDiffusion::Corrected).unwrap();
            let run = simulate_centralized(&model, &plan, &bundle, &SimulationOptions::default()).unwrap();
            proptest::prop_assert!(run.diagnostics.mean_identity.unwrap() < 1e-8);
            let agg = &run.aggregates[0];
            for (a, b) in agg.mean_x.iter().zip(agg.block_x.as_ref().unwrap()) {
                proptest::prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
