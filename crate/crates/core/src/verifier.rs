//! Empirical ε-Nash verification.
//!
//! Peers are frozen at the decentralized strategy. Agent `i` then faces a
//! one-controller LQ problem in which the peer average `y = (1/N)Σ_{j≠i} x̄ⱼ`
//! is an exogenous Itô process. With `Q_e = Q̃(I − Γ₁/N)` the best response is
//!
//! ```text
//! Σ_b' = AΣ_b + Σ_bAᵀ + Σ_bQ_eΣ_b − 𝔅,          Σ_b(T) = 0
//! Π_b' = −Π_bA − AᵀΠ_b + Π_b𝔅Π_b − Q_e,          Π_b(0) = −c₀ᵀGc₀
//! x = Σ_b p + φ_b,   p = Π_b x + ζ_b,   u = −R⁻¹Bᵀp
//! ```
//!
//! where `φ_b` is an affine BSDE over `(Wᵢ, y, Z₋)` and `ζ_b` a forward SDE
//! driven by `y`. `Z₋` is the peer average of `ζ̄ⱼ`, which `y` needs to close.

use rayon::prelude::*;

use crate::bsde::{solve_affine_bsde, AffineRepresentation, Diffusion, DriverSet, LinearBsdeSpec, Observable};
use crate::error::{Error, Result};
use crate::fit::{loglog_fit, LogLogFit};
use crate::linalg::Mat;
use crate::model::{TerminalSpec, TimeGrid, ValidatedModel};
use crate::ode::{rk4, split_step, Coef, Direction, MatrixPath, Stage, StagePath};
use crate::paths::{generate_paths, keyed_normal, PathBundle};
use crate::population::{
    estimate, metric_agents, simulate_decentralized, trajectory_cost, AgentTrajectory, DecentralizedPlan, Mode,
    PopulationRun, Record, SimulationOptions,
};
use crate::riccati::guarded_inverse;
use crate::scalar::Scalar;

/// Log-log least squares of `value` against `N`.
pub fn decay_fit(pairs: &[(f64, f64)]) -> Result<LogLogFit> {
    loglog_fit(pairs)
}

/// Deterministic part of agent `i`'s best response at population size `N`.
#[derive(Clone, Debug)]
pub struct BestResponsePlan<T> {
    pub agents: usize,
    pub grid: TimeGrid<T>,
    pub sigma: MatrixPath<T>,
    pub pi: MatrixPath<T>,
    pub phi: AffineRepresentation<T>,
    z_own: Vec<Mat<T>>,
    z_other: Vec<Mat<T>>,
    /// `ζ_b` loadings averaged over each step.
    gamma_own: Vec<Mat<T>>,
    gamma_other: Vec<Mat<T>>,
    zeta_drift: Coef<T>,
    target_gain: Vec<Mat<T>>,
    target_shift: Vec<Mat<T>>,
    zeta_gain0: Mat<T>,
    inv: Vec<Mat<T>>,
    feedback: Vec<Mat<T>>,
}

/// One replication of a best response.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponsePath<T> {
    pub replication: usize,
    pub x: Vec<T>,
    pub u: Vec<T>,
    pub p: Vec<T>,
    pub z_own: Vec<T>,
    pub cost: T,
}

#[derive(Clone, Debug)]
pub struct BestResponse<T> {
    pub agent: usize,
    pub paths: Vec<ResponsePath<T>>,
    /// `sup ‖R u + Bᵀ p‖`.
    pub stationarity: f64,
    /// `sup |x(T) − ξᵢ|`.
    pub terminal_residual: f64,
}

impl<T: Scalar> BestResponse<T> {
    pub fn costs(&self) -> Vec<T> {
        self.paths.iter().map(|p| p.cost).collect()
    }
}

impl<T: Scalar> BestResponsePlan<T> {
    /// Needs one running weight `S` shared by all drivers: the peer average
    /// then moves every other driver with the same loading.
    pub fn new(model: &ValidatedModel<T>, peers: &DecentralizedPlan<T>) -> Result<Self> {
        let spec = model.spec();
        if !spec.s.is_shared() {
            return Err(Error::InvalidConfig("best response needs a running weight S shared by all drivers".into()));
        }
        let n = spec.n;
        let agents = model.agents();
        let grid = model.grid();
        let steps = grid.steps();
        let eye = Mat::<T>::identity(n);
        let inv_n = T::one() / T::of_usize(agents);
        let peer_share = T::of_usize(agents - 1) * inv_n;
        let qt = |m: usize| -> Mat<T> { &(&eye - &spec.gamma1.at(m).scale(inv_n)).transpose() * spec.q.at(m) };
        let qe = |m: usize| -> Mat<T> { &qt(m) * &(&eye - &spec.gamma1.at(m).scale(inv_n)) };

        let sigma = rk4(grid, Direction::Backward, vec![Mat::zeros(n, n)], "verifier", "Sigma_b", |m, st, y| {
            let a = spec.a.stage(m, st);
            let s = &y[0];
            let mut d = &(&a * s) + &(s * &a.transpose());
            d += &(&(s * &qe(m)) * s);
            d -= model.control_gain(m);
            vec![d]
        })?
        .take()
        .remove(0);
        let c0 = &eye - &spec.gamma0.scale(inv_n);
        let zeta_gain0 = &c0.transpose() * &spec.g;
        let pi0 = -&(&zeta_gain0 * &c0);
        let mut pi = rk4(grid, Direction::Forward, vec![pi0.clone()], "verifier", "Pi_b", |m, st, y| {
            let a = spec.a.stage(m, st);
            let p = &y[0];
            let mut d = -&(&(p * &a) + &(&a.transpose() * p));
            d += &(&(p * model.control_gain(m)) * p);
            d -= &qe(m);
            vec![d]
        })?
        .take()
        .remove(0);
        pi.pin(0, pi0);

        // φ_b over Wᵢ and the peer block O = [y; Z₋].
        let w = Observable::brownian(steps, 0);
        let mut observables = vec![w.clone()];
        let mut loadings = Vec::new();
        if agents > 1 {
            let slot = &peers.slots[0];
            let limits = &peers.limits;
            let flows = &peers.flows;
            let gain = |m: usize| model.control_gain(m);
            let drift = Coef::from_fn(steps, |m, st| {
                let mut f = Mat::zeros(2 * n, 2 * n);
                let top = spec.a.at(m) - &(gain(m) * &limits.pi.stage(m, st));
                let bottom = &(&limits.pi.stage(m, st) * gain(m)) - &spec.a.at(m).transpose();
                for r in 0..n {
                    for c in 0..n {
                        f[(r, c)] = top[(r, c)];
                        f[(r, n + c)] = -gain(m)[(r, c)];
                        f[(n + r, n + c)] = bottom[(r, c)];
                    }
                }
                f
            });
            let forcing = Coef::from_fn(steps, |m, st| {
                let top = (&(gain(m) * &limits.m.stage(m, st)) * &flows.x0.stage(m, st)).scale(-peer_share);
                let bottom = (&(&(&limits.m.stage(m, st) * gain(m)) * &flows.zeta_bar.stage(m, st))
                    + &(spec.q.at(m) * spec.eta1.at(m)))
                    .scale(peer_share);
                Mat::col(&[top.as_slice(), bottom.as_slice()].concat())
            });
            let z_bar: Vec<Mat<T>> = (0..=steps).map(|m| slot.state.integrand(slot.template, m).unwrap().clone()).collect();
            let h_zeta = &slot.zeta.diffusion[0].loading;
            let loading = Coef::from_fn(steps, |m, st| {
                // The peer integrand is only known at nodes; hold it over the step.
                let node = if st == Stage::End { m + 1 } else { m };
                let top = z_bar[node.min(steps)].scale(inv_n);
                let bottom = h_zeta.get(m, st).scale(inv_n);
                Mat::col(&[top.as_slice(), bottom.as_slice()].concat())
            });
            let x_bar0 = slot.state.evaluate(0, &[&[T::zero()], &slot.zeta.initial]);
            let initial: Vec<T> = x_bar0
                .iter()
                .chain(&slot.zeta.initial)
                .map(|&v| v * peer_share)
                .collect();
            observables.push(Observable {
                name: "peers".into(),
                initial,
                drift,
                forcing,
                diffusion: vec![Diffusion { drivers: DriverSet::AllBut(0), loading }],
            });
            loadings.push((
                "peers".into(),
                Coef::from_fn(steps, |m, st| {
                    let l = -&(&(&sigma.stage(m, st) * &qt(m)) * spec.gamma1.at(m));
                    let mut out = Mat::zeros(n, 2 * n);
                    for r in 0..n {
                        for c in 0..n {
                            out[(r, c)] = l[(r, c)];
                        }
                    }
                    out
                }),
            ));
        }
        let phi_spec = LinearBsdeSpec {
            drivers: agents,
            generator: Coef::from_fn(steps, |m, st| spec.a.at(m) + &(&sigma.stage(m, st) * &qe(m))),
            forcing: Coef::from_fn(steps, |m, st| -&(&(&sigma.stage(m, st) * &qt(m)) * spec.eta1.at(m))),
            terminal_observable: w.name.clone(),
            observables,
            loadings,
            terminal: spec.terminal.clone(),
        };
        let phi = solve_affine_bsde(&phi_spec, grid)?;

        let s = spec.s.get(0);
        let zero = Mat::zeros(n, 1);
        let (mut z_own, mut z_other, mut gamma_own, mut gamma_other) = (vec![], vec![], vec![], vec![]);
        for m in 0..=steps {
            let l_inv = guarded_inverse(&(&eye + &(sigma.at(m) * s.at(m))), "I+Sigma_b*S", m)?;
            let own = &l_inv * phi.integrand(0, m).unwrap_or(&zero);
            let other = if agents > 1 { &l_inv * phi.integrand(1, m).unwrap_or(&zero) } else { zero.clone() };
            let sp = s.at(m) + pi.at(m);
            gamma_own.push(-&(&sp * &own));
            gamma_other.push(-&(&sp * &other));
            z_own.push(own);
            z_other.push(other);
        }
        let mut inv = Vec::with_capacity(steps + 1);
        for m in 0..=steps {
            inv.push(guarded_inverse(&(&eye - &(sigma.at(m) * pi.at(m))), "I-Sigma_b*Pi_b", m)?);
        }
        Ok(BestResponsePlan {
            agents,
            grid,
            zeta_drift: Coef::from_fn(steps, |m, st| {
                &(&pi.stage(m, st) * model.control_gain(m)) - &spec.a.stage(m, st).transpose()
            }),
            target_gain: (0..=steps).map(|m| &qt(m) * spec.gamma1.at(m)).collect(),
            target_shift: (0..=steps).map(|m| &qt(m) * spec.eta1.at(m)).collect(),
            feedback: (0..=steps).map(|m| model.feedback(m)).collect(),
            sigma,
            pi,
            phi,
            z_own,
            z_other,
            gamma_own: average_steps(&gamma_own),
            gamma_other: average_steps(&gamma_other),
            zeta_gain0,
            inv,
        })
    }

    /// Best response of `agent` on every replication of `bundle`, with the
    /// remaining agents frozen as recorded in `frozen`.
    pub fn respond(
        &self,
        model: &ValidatedModel<T>,
        frozen: &PopulationRun<T>,
        agent: usize,
        bundle: &PathBundle<T>,
    ) -> Result<BestResponse<T>> {
        if frozen.mode != Mode::Decentralized {
            return Err(Error::InvalidConfig("frozen peers must come from a decentralized run".into()));
        }
        if frozen.agents != self.agents || bundle.agents != self.agents || frozen.replications != bundle.replications {
            return Err(Error::InvalidConfig("frozen run, bundle and plan disagree on N or replications".into()));
        }
        let own: Vec<&AgentTrajectory<T>> = (0..bundle.replications)
            .map(|r| {
                frozen
                    .trajectory(agent, r)
                    .ok_or_else(|| Error::InvalidConfig(format!("agent {agent} was not recorded in the frozen run")))
            })
            .collect::<Result<_>>()?;
        let paths: Vec<(ResponsePath<T>, f64, f64)> = (0..bundle.replications)
            .into_par_iter()
            .map(|r| self.replication(model, frozen, own[r], agent, bundle, r))
            .collect();
        let stationarity = paths.iter().map(|p| p.1).fold(0.0, f64::max);
        let terminal_residual = paths.iter().map(|p| p.2).fold(0.0, f64::max);
        Ok(BestResponse { agent, paths: paths.into_iter().map(|p| p.0).collect(), stationarity, terminal_residual })
    }

    fn replication(
        &self,
        model: &ValidatedModel<T>,
        frozen: &PopulationRun<T>,
        own: &AgentTrajectory<T>,
        agent: usize,
        bundle: &PathBundle<T>,
        r: usize,
    ) -> (ResponsePath<T>, f64, f64) {
        let spec = model.spec();
        let (n, k) = (spec.n, spec.k);
        let grid = self.grid;
        let steps = grid.steps();
        let h = grid.h();
        let inv_n = T::one() / T::of_usize(self.agents);
        let paths = bundle.replication(r);
        let w = paths.path(agent);
        let agg = &frozen.aggregates[r];
        // Peer block O = [y; Z₋] at each node.
        let peers: Vec<T> = (0..=steps)
            .flat_map(|m| {
                let y = (0..n).map(move |c| agg.mean_x[m * n + c] - own.x[m * n + c] * inv_n);
                let z = (0..n).map(move |c| agg.mean_zeta[m * n + c] - own.zeta[m * n + c] * inv_n);
                y.chain(z).collect::<Vec<_>>()
            })
            .collect();
        let y = |m: usize| &peers[m * 2 * n..m * 2 * n + n];

        let mut zeta = Vec::with_capacity((steps + 1) * n);
        let mut start = spec.eta0.clone();
        spec.gamma0.mul_vec_acc(y(0), &mut start);
        let mut cur = self.zeta_gain0.mul_vec(&start);
        zeta.extend_from_slice(&cur);
        let half = T::of(0.5);
        for m in 0..steps {
            let dwi = paths.dw(agent, m);
            let rest = paths.dw_total(m) - dwi;
            let kick: Vec<T> =
                (0..n).map(|c| self.gamma_own[m][(c, 0)] * dwi + self.gamma_other[m][(c, 0)] * rest).collect();
            // The peer average is known at nodes only; its midpoint is the
            // node average.
            let mid: Vec<T> = y(m).iter().zip(y(m + 1)).map(|(a, b)| (*a + *b) * half).collect();
            split_step(
                &mut cur,
                h,
                self.zeta_drift.stages(m),
                |j| {
                    let target = match j {
                        0 => y(m),
                        3 => y(m + 1),
                        _ => &mid,
                    };
                    let mut g = self.target_shift[m].as_slice().to_vec();
                    self.target_gain[m].mul_vec_acc(target, &mut g);
                    g
                },
                &kick,
            );
            zeta.extend_from_slice(&cur);
        }

        let s = spec.s.get(agent);
        let others = T::of_usize(self.agents - 1);
        let (mut x, mut u, mut p, mut z_own) = (vec![], vec![], vec![], vec![]);
        let mut mean_x = Vec::with_capacity((steps + 1) * n);
        let mut z_energy = Vec::with_capacity(steps + 1);
        let mut stationarity = 0.0f64;
        for m in 0..=steps {
            let zm = &zeta[m * n..(m + 1) * n];
            let obs: Vec<&[T]> = if self.agents > 1 {
                vec![&w[m..m + 1], &peers[m * 2 * n..(m + 1) * 2 * n]]
            } else {
                vec![&w[m..m + 1]]
            };
            let mut rhs = self.phi.evaluate(m, &obs);
            self.sigma.at(m).mul_vec_acc(zm, &mut rhs);
            let xm = self.inv[m].mul_vec(&rhs);
            let mut pm = zm.to_vec();
            self.pi.at(m).mul_vec_acc(&xm, &mut pm);
            let um: Vec<T> = self.feedback[m].mul_vec(&pm).into_iter().map(|v| -v).collect();
            let mut res = spec.b.at(m).transpose().mul_vec(&pm);
            spec.r.at(m).mul_vec_acc(&um, &mut res);
            stationarity = res.iter().fold(stationarity, |a, v| a.max(v.abs().as_f64()));
            mean_x.extend((0..n).map(|c| xm[c] * inv_n + y(m)[c]));
            z_energy.push(
                s.at(m).quad_form(self.z_own[m].as_slice()) + others * s.at(m).quad_form(self.z_other[m].as_slice()),
            );
            z_own.extend_from_slice(self.z_own[m].as_slice());
            x.extend(xm);
            u.extend(um);
            p.extend(pm);
        }
        debug_assert_eq!(u.len(), (steps + 1) * k);
        let xi = spec.terminal.evaluate(w);
        let terminal = x[steps * n..].iter().zip(&xi).map(|(a, b)| (*a - *b).abs().as_f64()).fold(0.0, f64::max);
        let cost = trajectory_cost(model, grid, &x, &u, &mean_x, &z_energy);
        (ResponsePath { replication: r, x, u, p, z_own, cost }, stationarity, terminal)
    }
}

fn average_steps<T: Scalar>(nodes: &[Mat<T>]) -> Vec<Mat<T>> {
    nodes.windows(2).map(|w| (&w[0] + &w[1]).scale(T::of(0.5))).collect()
}

/// Convenience wrapper building the plan for one agent.
pub fn best_response<T: Scalar>(
    model: &ValidatedModel<T>,
    peers: &DecentralizedPlan<T>,
    frozen: &PopulationRun<T>,
    agent: usize,
    bundle: &PathBundle<T>,
) -> Result<BestResponse<T>> {
    BestResponsePlan::new(model, peers)?.respond(model, frozen, agent, bundle)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentGap {
    pub agent: usize,
    pub gap: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonRecord {
    pub agents: usize,
    /// Largest mean gap over the sampled agents.
    pub epsilon: f64,
    /// Standard error of that agent's gap.
    pub stderr: f64,
    pub agent_gaps: Vec<AgentGap>,
    pub stationarity: f64,
}

/// Randomized deviation search for one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub agent: usize,
    pub family: String,
    /// `(direction, scale, mean improvement, stderr)` per probe.
    pub probes: Vec<(usize, f64, f64, f64)>,
    pub max_improvement: f64,
    pub max_stderr: f64,
}

#[derive(Clone, Debug)]
pub struct EpsilonReport {
    pub records: Vec<EpsilonRecord>,
    pub fit: Option<LogLogFit>,
    pub probes: Vec<ProbeResult>,
}

impl EpsilonReport {
    /// `ε̂ ≥ −3·stderr` at every population size.
    pub fn nonnegative(&self) -> bool {
        self.records.iter().all(|r| r.epsilon >= -3.0 * r.stderr)
    }

    /// `ε̂(N₂) ≤ ε̂(N₁) + 3·stderr` along the ladder, with the two errors
    /// combined.
    pub fn monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[1].epsilon <= w[0].epsilon + 3.0 * w[0].stderr.hypot(w[1].stderr))
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.slope)
    }
}

/// Gap `Jᵢ(ū) − Jᵢ(best response)` for every sampled agent, pooled over
/// `replications` paths from each seed.
pub fn epsilon_gap<T: Scalar>(
    model: &ValidatedModel<T>,
    replications: usize,
    seeds: &[u64],
    sampled_agents: usize,
) -> Result<EpsilonRecord> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is needed".into()));
    }
    let agents = model.agents();
    let plan = DecentralizedPlan::new(model)?;
    let br = BestResponsePlan::new(model, &plan)?;
    let sample = metric_agents(agents, sampled_agents);
    let options = SimulationOptions { record: Record::Agents(sample.clone()), ..Default::default() };
    let mut samples = vec![Vec::new(); sample.len()];
    let mut stationarity = 0.0f64;
    for &seed in seeds {
        let bundle = generate_paths(model.grid(), agents, replications, seed)?;
        let frozen = simulate_decentralized(model, &plan, &bundle, &options)?;
        let responses: Vec<BestResponse<T>> =
            sample.par_iter().map(|&i| br.respond(model, &frozen, i, &bundle)).collect::<Result<_>>()?;
        for (slot, resp) in samples.iter_mut().zip(&responses) {
            stationarity = stationarity.max(resp.stationarity);
            slot.extend(
                resp.paths
                    .iter()
                    .map(|p| (frozen.agent_costs[p.replication * agents + resp.agent] - p.cost).as_f64()),
            );
        }
    }
    let agent_gaps: Vec<AgentGap> = sample
        .iter()
        .zip(&samples)
        .map(|(&agent, gaps)| {
            let e = estimate(gaps);
            AgentGap { agent, gap: e.mean, stderr: e.stderr }
        })
        .collect();
    let worst = agent_gaps.iter().max_by(|a, b| a.gap.total_cmp(&b.gap)).expect("at least one sampled agent").clone();
    Ok(EpsilonRecord { agents, epsilon: worst.gap, stderr: worst.stderr, stationarity, agent_gaps })
}

/// `ε̂(N)` along a population ladder (at least four sizes) and its log-log
/// slope.
pub fn epsilon_gap_ladder<T: Scalar>(
    model: &ValidatedModel<T>,
    ladder: &[usize],
    replications: usize,
    seeds: &[u64],
    sampled_agents: usize,
) -> Result<EpsilonReport> {
    if ladder.len() < 4 {
        return Err(Error::InvalidConfig("epsilon ladder needs at least 4 population sizes".into()));
    }
    if ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("epsilon ladder must be strictly increasing".into()));
    }
    let records: Vec<EpsilonRecord> = ladder
        .par_iter()
        .map(|&n| epsilon_gap(&model.with_agents(n)?, replications, seeds, sampled_agents))
        .collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.agents as f64, r.epsilon)).collect();
    Ok(EpsilonReport { fit: decay_fit(&pairs).ok(), records, probes: Vec::new() })
}

pub const PROBE_PIECES: usize = 4;
pub const DEFAULT_PROBE_SCALES: [f64; 5] = [0.01, 0.03, 0.1, 0.3, 1.0];

/// Deviation direction `δ(t) = a_k + b_k Wᵢ(t)` on the `k`-th of
/// [`PROBE_PIECES`] equal time pieces, with standard normal `a_k, b_k ∈ ℝᵏ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deviation<T> {
    pub level: Vec<Mat<T>>,
    pub slope: Vec<Mat<T>>,
}

impl<T: Scalar> Deviation<T> {
    pub fn random(k: usize, seed: u64, agent: usize, direction: usize) -> Self {
        let draw = |piece: usize, which: usize| {
            Mat::from_fn(k, 1, |c, _| {
                T::of(keyed_normal(seed, agent as u64, direction as u64, ((piece * 2 + which) * k + c) as u64))
            })
        };
        Deviation {
            level: (0..PROBE_PIECES).map(|p| draw(p, 0)).collect(),
            slope: (0..PROBE_PIECES).map(|p| draw(p, 1)).collect(),
        }
    }

    pub fn zero(k: usize) -> Self {
        Deviation { level: vec![Mat::zeros(k, 1); PROBE_PIECES], slope: vec![Mat::zeros(k, 1); PROBE_PIECES] }
    }

    fn piece(steps: usize, interval: usize) -> usize {
        (interval.min(steps - 1) * PROBE_PIECES / steps).min(PROBE_PIECES - 1)
    }
}

/// State and `Wᵢ`-integrand response to a deviation: the affine BSDE
/// `dx̃ = (Ax̃ + Bδ) dt + z̃ dWᵢ`, `x̃(T) = 0`.
fn deviation_response<T: Scalar>(model: &ValidatedModel<T>, dev: &Deviation<T>) -> Result<AffineRepresentation<T>> {
    let spec = model.spec();
    let steps = model.grid().steps();
    let w = Observable::brownian(steps, 0);
    let bsde = LinearBsdeSpec {
        drivers: model.agents(),
        generator: Coef::from_fn(steps, |m, st| spec.a.stage(m, st)),
        forcing: Coef::from_fn(steps, |m, _| spec.b.at(m) * &dev.level[Deviation::<T>::piece(steps, m)]),
        terminal_observable: w.name.clone(),
        loadings: vec![(
            w.name.clone(),
            Coef::from_fn(steps, |m, _| spec.b.at(m) * &dev.slope[Deviation::<T>::piece(steps, m)]),
        )],
        observables: vec![w],
        terminal: TerminalSpec::Deterministic { c: vec![T::zero(); spec.n] },
    };
    solve_affine_bsde(&bsde, model.grid())
}

/// Cost of agent `i` under `uᵢ = ūᵢ + scale·δ` with the peers frozen, one
/// value per replication.
pub fn deviated_costs<T: Scalar>(
    model: &ValidatedModel<T>,
    frozen: &PopulationRun<T>,
    bundle: &PathBundle<T>,
    agent: usize,
    dev: &Deviation<T>,
    scale: T,
) -> Result<Vec<T>> {
    let response = deviation_response(model, dev)?;
    Ok(apply_deviation(model, frozen, bundle, agent, dev, &response, &[scale]).remove(0))
}

/// Costs under every scale, indexed `[scale][replication]`. The response is
/// linear in the scale, so each replication is walked once.
fn apply_deviation<T: Scalar>(
    model: &ValidatedModel<T>,
    frozen: &PopulationRun<T>,
    bundle: &PathBundle<T>,
    agent: usize,
    dev: &Deviation<T>,
    response: &AffineRepresentation<T>,
    scales: &[T],
) -> Vec<Vec<T>> {
    let spec = model.spec();
    let (n, k) = (spec.n, spec.k);
    let grid = model.grid();
    let steps = grid.steps();
    let inv_n = T::one() / T::of_usize(model.agents());
    let s = spec.s.get(agent);
    let mut out = vec![Vec::with_capacity(bundle.replications); scales.len()];
    for r in 0..bundle.replications {
        let t = frozen.trajectory(agent, r).expect("agent recorded");
        let agg = &frozen.aggregates[r];
        let w = bundle.driver_path(r, agent);
        let mut dx = Vec::with_capacity((steps + 1) * n);
        let mut du = Vec::with_capacity((steps + 1) * k);
        let mut dz = Vec::with_capacity((steps + 1) * n);
        for m in 0..=steps {
            dx.extend(response.evaluate(m, &[&w[m..m + 1]]));
            let piece = Deviation::<T>::piece(steps, m);
            du.extend((0..k).map(|c| dev.level[piece][(c, 0)] + dev.slope[piece][(c, 0)] * w[m]));
            let z = response.integrand(0, m).expect("own integrand");
            dz.extend((0..n).map(|c| z[(c, 0)]));
        }
        for (slot, &scale) in out.iter_mut().zip(scales) {
            let x: Vec<T> = t.x.iter().zip(&dx).map(|(a, b)| *a + scale * *b).collect();
            let u: Vec<T> = t.u.iter().zip(&du).map(|(a, b)| *a + scale * *b).collect();
            let mean_x: Vec<T> = agg.mean_x.iter().zip(&dx).map(|(a, b)| *a + scale * *b * inv_n).collect();
            let z_energy: Vec<T> = (0..=steps)
                .map(|m| {
                    let z: Vec<T> = (0..n).map(|c| t.z_own[m * n + c] + scale * dz[m * n + c]).collect();
                    s.at(m).quad_form(&z)
                })
                .collect();
            slot.push(trajectory_cost(model, grid, &x, &u, &mean_x, &z_energy));
        }
    }
    out
}

/// Largest cost improvement `Jᵢ(ū) − Jᵢ(ū + sδ)` over random directions and
/// the given scales, peers frozen at `frozen`.
pub fn deviation_probe<T: Scalar>(
    model: &ValidatedModel<T>,
    frozen: &PopulationRun<T>,
    bundle: &PathBundle<T>,
    agent: usize,
    directions: usize,
    scales: &[f64],
    seed: u64,
) -> Result<ProbeResult> {
    if frozen.mode != Mode::Decentralized {
        return Err(Error::InvalidConfig("deviation probes need a decentralized run".into()));
    }
    if frozen.trajectory(agent, 0).is_none() {
        return Err(Error::InvalidConfig(format!("agent {agent} was not recorded in the run")));
    }
    let k = model.spec().k;
    let base: Vec<f64> = (0..bundle.replications).map(|r| frozen.agent_costs[r * frozen.agents + agent].as_f64()).collect();
    let per_direction: Vec<Vec<(usize, f64, f64, f64)>> = (0..directions)
        .into_par_iter()
        .map(|d| {
            let dev = Deviation::random(k, seed, agent, d);
            let response = deviation_response(model, &dev)?;
            let typed: Vec<T> = scales.iter().map(|&s| T::of(s)).collect();
            let costs = apply_deviation(model, frozen, bundle, agent, &dev, &response, &typed);
            Ok(scales
                .iter()
                .zip(&costs)
                .map(|(&s, costs)| {
                    let gains: Vec<f64> = base.iter().zip(costs).map(|(b, c)| b - c.as_f64()).collect();
                    let e = estimate(&gains);
                    (d, s, e.mean, e.stderr)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let probes: Vec<(usize, f64, f64, f64)> = per_direction.into_iter().flatten().collect();
    let best = probes.iter().max_by(|a, b| a.2.total_cmp(&b.2)).copied().unwrap_or((0, 0.0, f64::NEG_INFINITY, 0.0));
    Ok(ProbeResult {
        agent,
        family: format!("u + s*(a_k + b_k*W_i), {PROBE_PIECES} equal time pieces, a_k, b_k ~ N(0, I)"),
        probes,
        max_improvement: best.2,
        max_stderr: best.3,
    })
}
