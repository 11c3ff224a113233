//! Linear BSDEs with deterministic coefficients.
//!
//! ```text
//! dY = (a Y + f + Σ_q L_q O_q) dt + Σⱼ Zⱼ dWⱼ,      Y(T) = ξ
//! ```
//!
//! where every observable `O_q` is an affine Itô process
//! `dO = (F O + g) dt + Σⱼ Hⱼ dWⱼ` with deterministic coefficients (a
//! Brownian motion is the special case `F = 0, g = 0, H = eⱼ`). For terminal
//! data affine in one observable the solution is `Y = m₀ + Σ_q M_q O_q` with
//!
//! ```text
//! M_q' = a M_q − M_q F_q + L_q,    M_q(T) = D·[q is terminal]
//! m₀'  = a m₀ + f − Σ_q M_q g_q,   m₀(T) = c
//! Zⱼ   = Σ_q M_q H_{q,j}
//! ```
//!
//! [`solve_affine_bsde`] integrates these backward by RK4. [`solve_lsmc_bsde`]
//! handles arbitrary terminal functionals by regression Monte Carlo.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{PathEvaluator, TerminalSpec, TimeGrid};
use crate::ode::{rk4, Coef, Direction, MatrixPath, Stage};
use crate::paths::{PathBundle, ReplicationPaths};
use crate::riccati::CONDITION_LIMIT;
use crate::scalar::Scalar;

/// Brownian drivers sharing one diffusion loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriverSet {
    One(usize),
    All,
    AllBut(usize),
}

impl DriverSet {
    pub fn contains(&self, j: usize) -> bool {
        match *self {
            DriverSet::One(i) => i == j,
            DriverSet::All => true,
            DriverSet::AllBut(i) => i != j,
        }
    }

    /// `Σ_{j ∈ set} ΔWⱼ(t_m)`.
    #[inline]
    pub fn increment<T: Scalar>(&self, paths: &ReplicationPaths<T>, m: usize) -> T {
        match *self {
            DriverSet::One(i) => paths.dw(i, m),
            DriverSet::All => paths.dw_total(m),
            DriverSet::AllBut(i) => paths.dw_total(m) - paths.dw(i, m),
        }
    }
}

/// `H` on every driver of a set: a `dim×1` column per node.
#[derive(Clone, Debug)]
pub struct Diffusion<T> {
    pub drivers: DriverSet,
    pub loading: Coef<T>,
}

/// An affine Itô process `dO = (F O + g) dt + Σ Hⱼ dWⱼ`, `O(0) = initial`.
#[derive(Clone, Debug)]
pub struct Observable<T> {
    pub name: String,
    pub initial: Vec<T>,
    pub drift: Coef<T>,
    pub forcing: Coef<T>,
    pub diffusion: Vec<Diffusion<T>>,
}

impl<T: Scalar> Observable<T> {
    /// The scalar Brownian motion `Wⱼ`.
    pub fn brownian(steps: usize, driver: usize) -> Self {
        Self::brownian_sum(steps, DriverSet::One(driver), T::one(), format!("W{driver}"))
    }

    /// `scale · Σ_{j ∈ set} Wⱼ`.
    pub fn brownian_sum(steps: usize, drivers: DriverSet, scale: T, name: String) -> Self {
        Observable {
            name,
            initial: vec![T::zero()],
            drift: Coef::zeros(steps, 1, 1),
            forcing: Coef::zeros(steps, 1, 1),
            diffusion: vec![Diffusion { drivers, loading: Coef::constant(steps, Mat::scalar(scale)) }],
        }
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    fn is_brownian(&self) -> Option<usize> {
        match self.diffusion.as_slice() {
            [Diffusion { drivers: DriverSet::One(j), loading }]
                if self.drift.get(0, Stage::Start).max_abs() == T::zero()
                    && (0..self.drift.steps()).all(|m| {
                        self.drift.get(m, Stage::Start).max_abs() == T::zero()
                            && self.forcing.get(m, Stage::Start).max_abs() == T::zero()
                            && loading.get(m, Stage::Start)[(0, 0)] == T::one()
                    }) =>
            {
                Some(*j)
            }
            _ => None,
        }
    }
}

/// A linear BSDE over declared observables.
#[derive(Clone, Debug)]
pub struct LinearBsdeSpec<T> {
    /// Number of Brownian drivers `N`.
    pub drivers: usize,
    pub generator: Coef<T>,
    pub forcing: Coef<T>,
    pub observables: Vec<Observable<T>>,
    /// `(observable name, L_q)` with `L_q` of shape `n × dim(q)`.
    pub loadings: Vec<(String, Coef<T>)>,
    pub terminal: TerminalSpec<T>,
    /// Name of the scalar observable the terminal datum reads.
    pub terminal_observable: String,
}

impl<T: Scalar> LinearBsdeSpec<T> {
    pub fn n(&self) -> usize {
        self.generator.shape().0
    }

    pub fn steps(&self) -> usize {
        self.generator.steps()
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.observables
            .iter()
            .position(|o| o.name == name)
            .ok_or_else(|| Error::UndeclaredObservable(name.to_string()))
    }

    fn check(&self) -> Result<(usize, Vec<Option<Coef<T>>>)> {
        let n = self.n();
        let terminal = self.index_of(&self.terminal_observable)?;
        if self.observables[terminal].dim() != 1 {
            return Err(Error::DimensionMismatch {
                field: "terminal_observable".into(),
                detail: format!("`{}` must be scalar", self.terminal_observable),
            });
        }
        let mut loads: Vec<Option<Coef<T>>> = vec![None; self.observables.len()];
        for (name, l) in &self.loadings {
            let q = self.index_of(name)?;
            let dim = self.observables[q].dim();
            if l.shape() != (n, dim) {
                return Err(Error::DimensionMismatch {
                    field: format!("loading on `{name}`"),
                    detail: format!("expected {n}x{dim}, found {:?}", l.shape()),
                });
            }
            loads[q] = Some(l.clone());
        }
        for o in &self.observables {
            for d in &o.diffusion {
                let j = match d.drivers {
                    DriverSet::One(j) | DriverSet::AllBut(j) => j,
                    DriverSet::All => 0,
                };
                if j >= self.drivers {
                    return Err(Error::UndeclaredObservable(format!("driver W{j} of `{}`", o.name)));
                }
            }
        }
        Ok((terminal, loads))
    }

    /// Driver classes on which integrands can differ: every singled-out
    /// driver, then (if any set spans more) the remaining drivers.
    pub fn driver_classes(&self) -> Vec<DriverClass> {
        let mut singles: Vec<usize> = Vec::new();
        let mut spans = false;
        for d in self.observables.iter().flat_map(|o| &o.diffusion) {
            match d.drivers {
                DriverSet::One(j) | DriverSet::AllBut(j) => {
                    if !singles.contains(&j) {
                        singles.push(j);
                    }
                    spans |= matches!(d.drivers, DriverSet::AllBut(_));
                }
                DriverSet::All => spans = true,
            }
        }
        singles.sort_unstable();
        let rest = self.drivers - singles.len();
        let mut classes: Vec<DriverClass> = singles.iter().map(|&j| DriverClass::Single(j)).collect();
        if spans && rest > 0 {
            classes.push(DriverClass::Rest { excluded: singles, count: rest });
        }
        classes
    }
}

/// Drivers sharing one integrand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DriverClass {
    Single(usize),
    Rest { excluded: Vec<usize>, count: usize },
}

impl DriverClass {
    pub fn contains(&self, j: usize) -> bool {
        match self {
            DriverClass::Single(i) => *i == j,
            DriverClass::Rest { excluded, .. } => !excluded.contains(&j),
        }
    }

    pub fn count(&self) -> usize {
        match self {
            DriverClass::Single(_) => 1,
            DriverClass::Rest { count, .. } => *count,
        }
    }

    fn representative(&self) -> usize {
        match self {
            DriverClass::Single(j) => *j,
            DriverClass::Rest { excluded, .. } => (0..).find(|j| !excluded.contains(j)).unwrap(),
        }
    }
}

/// Integrand shared by a driver class, `n×1` per node. Drivers outside every
/// class carry a zero integrand.
#[derive(Clone, Debug)]
pub struct Integrand<T> {
    pub class: DriverClass,
    pub values: Vec<Mat<T>>,
}

/// `Y(t) = m₀(t) + Σ_q M_q(t) O_q(t)` plus the integrands.
#[derive(Clone, Debug)]
pub struct AffineRepresentation<T> {
    pub names: Vec<String>,
    pub constant: MatrixPath<T>,
    pub coefficients: Vec<MatrixPath<T>>,
    pub integrands: Vec<Integrand<T>>,
}

impl<T: Scalar> AffineRepresentation<T> {
    pub fn coefficient(&self, name: &str) -> Option<&MatrixPath<T>> {
        self.names.iter().position(|n| n == name).map(|q| &self.coefficients[q])
    }

    /// Integrand on driver `j` at a node.
    pub fn integrand(&self, driver: usize, node: usize) -> Option<&Mat<T>> {
        self.integrands.iter().find(|i| i.class.contains(driver)).map(|i| &i.values[node])
    }

    /// `Y(t_m)` from observable values at that node.
    pub fn evaluate(&self, node: usize, observables: &[&[T]]) -> Vec<T> {
        let mut y = self.constant.at(node).as_slice().to_vec();
        for (coef, o) in self.coefficients.iter().zip(observables) {
            coef.at(node).mul_vec_acc(o, &mut y);
        }
        y
    }
}

fn diffusion_on<T: Scalar>(o: &Observable<T>, driver: usize, node: usize, steps: usize) -> Mat<T> {
    let mut h = Mat::zeros(o.dim(), 1);
    for d in o.diffusion.iter().filter(|d| d.drivers.contains(driver)) {
        h += d.loading.node(node.min(steps));
    }
    h
}

pub fn solve_affine_bsde<T: Scalar>(spec: &LinearBsdeSpec<T>, grid: TimeGrid<T>) -> Result<AffineRepresentation<T>> {
    let (terminal, loads) = spec.check()?;
    let (c, d) = spec
        .terminal
        .affine_parts(spec.n())
        .ok_or_else(|| Error::UnsupportedTerminal(spec.terminal.class_name().into()))?;
    let n = spec.n();
    let nq = spec.observables.len();
    let mut boundary: Vec<Mat<T>> = spec
        .observables
        .iter()
        .enumerate()
        .map(|(q, o)| if q == terminal { Mat::col(&d) } else { Mat::zeros(n, o.dim()) })
        .collect();
    boundary.push(Mat::col(&c));
    let terminal_values = boundary.clone();

    let mut paths = rk4(grid, Direction::Backward, boundary, "bsde", "affine coefficients", |m, st, y| {
        let a = spec.generator.get(m, st);
        let mut out = Vec::with_capacity(nq + 1);
        let mut d0 = &(a * &y[nq]) + spec.forcing.get(m, st);
        for (q, o) in spec.observables.iter().enumerate() {
            let mq = &y[q];
            let mut dq = &(a * mq) - &(mq * o.drift.get(m, st));
            if let Some(l) = &loads[q] {
                dq += l.get(m, st);
            }
            d0 -= &(mq * o.forcing.get(m, st));
            out.push(dq);
        }
        out.push(d0);
        out
    })?
    .take();
    let last = grid.steps();
    for (p, v) in paths.iter_mut().zip(terminal_values) {
        p.pin(last, v);
    }
    let constant = paths.pop().unwrap();
    let coefficients = paths;

    let integrands = spec
        .driver_classes()
        .into_iter()
        .map(|class| {
            let j = class.representative();
            let values = (0..grid.nodes())
                .map(|node| {
                    let mut z = Mat::zeros(n, 1);
                    for (q, o) in spec.observables.iter().enumerate() {
                        z += &(coefficients[q].at(node) * &diffusion_on(o, j, node, spec.steps()));
                    }
                    z
                })
                .collect();
            Integrand { class, values }
        })
        .collect();

    Ok(AffineRepresentation {
        names: spec.observables.iter().map(|o| o.name.clone()).collect(),
        constant,
        coefficients,
        integrands,
    })
}

/// Euler-Maruyama paths of every observable on one replication:
/// `out[q][m * dim + k]`. Brownian observables are copied exactly.
pub fn simulate_observables<T: Scalar>(spec: &LinearBsdeSpec<T>, paths: &ReplicationPaths<T>, h: T) -> Vec<Vec<T>> {
    spec.observables.iter().map(|o| simulate_observable(o, paths, h)).collect()
}

pub fn simulate_observable<T: Scalar>(o: &Observable<T>, paths: &ReplicationPaths<T>, h: T) -> Vec<T> {
    let steps = paths.steps;
    if let Some(j) = o.is_brownian() {
        return paths.path(j).to_vec();
    }
    let dim = o.dim();
    let mut out = Vec::with_capacity(dim * (steps + 1));
    out.extend_from_slice(&o.initial);
    let mut x = o.initial.clone();
    let mut drift = vec![T::zero(); dim];
    for m in 0..steps {
        drift.copy_from_slice(o.forcing.get(m, Stage::Start).as_slice());
        o.drift.get(m, Stage::Start).mul_vec_acc(&x, &mut drift);
        for (xi, dr) in x.iter_mut().zip(&drift) {
            *xi += *dr * h;
        }
        for d in &o.diffusion {
            let dw = d.drivers.increment(paths, m);
            for (xi, hv) in x.iter_mut().zip(d.loading.get(m, Stage::Start).as_slice()) {
                *xi += *hv * dw;
            }
        }
        out.extend_from_slice(&x);
    }
    out
}

/// Regression features for [`solve_lsmc_bsde`]: always the constant and every
/// observable component, plus powers `2..=degree` of the terminal observable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LsmcBasis {
    pub degree: usize,
}

impl Default for LsmcBasis {
    fn default() -> Self {
        LsmcBasis { degree: 1 }
    }
}

/// Minimum replications accepted by [`solve_lsmc_bsde`].
pub const LSMC_MIN_REPLICATIONS: usize = 1000;

/// Sampled solution `Y[r][m]`, `Z[class][r][m]` with nodewise cross-sectional
/// means and standard errors.
#[derive(Clone, Debug)]
pub struct LsmcSolution<T> {
    pub n: usize,
    pub replications: usize,
    pub nodes: usize,
    /// `y[(r * nodes + m) * n + k]`.
    pub y: Vec<T>,
    /// Integrands on single drivers, same layout as `y`; entries at the
    /// final node are zero.
    pub z: Vec<(usize, Vec<T>)>,
    pub mean: Vec<Vec<T>>,
    pub stderr: Vec<Vec<T>>,
    /// Largest `|Y(T) − ξ|` over paths.
    pub terminal_residual: T,
}

impl<T: Scalar> LsmcSolution<T> {
    pub fn value(&self, r: usize, m: usize) -> &[T] {
        let at = (r * self.nodes + m) * self.n;
        &self.y[at..at + self.n]
    }
}

/// Centered and scaled design matrix for one node, with dropped columns
/// removed. Returns `(columns, rows × cols row-major data)`.
fn design<T: Scalar>(raw: &[Vec<T>], reps: usize) -> (usize, Vec<T>) {
    let count = T::of_usize(reps);
    let mut keep: Vec<(usize, T, T)> = Vec::new();
    for (c, col) in raw.iter().enumerate() {
        let mean = col.iter().copied().sum::<T>() / count;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let sd = var.sqrt();
        // Degenerate features (e.g. every Brownian value at t = 0) carry no
        // information beyond the constant column.
        if sd > T::of(1e-12) * (T::one() + mean.abs()) {
            keep.push((c, mean, sd));
        }
    }
    let cols = keep.len() + 1;
    let mut x = Vec::with_capacity(reps * cols);
    for r in 0..reps {
        x.push(T::one());
        for &(c, mean, sd) in &keep {
            x.push((raw[c][r] - mean) / sd);
        }
    }
    (cols, x)
}

/// Least-squares fit of the columns of `targets` (reps × k) on `x`.
fn project<T: Scalar>(x: &[T], cols: usize, targets: &[T], k: usize, node: usize) -> Result<Vec<T>> {
    let reps = x.len() / cols;
    let mut gram = Mat::<T>::zeros(cols, cols);
    let mut rhs = Mat::<T>::zeros(cols, k);
    for r in 0..reps {
        let row = &x[r * cols..(r + 1) * cols];
        let tr = &targets[r * k..(r + 1) * k];
        for a in 0..cols {
            for b in 0..cols {
                gram.as_mut_slice()[a * cols + b] += row[a] * row[b];
            }
            for c in 0..k {
                rhs.as_mut_slice()[a * k + c] += row[a] * tr[c];
            }
        }
    }
    let inv = gram.inverse_with_cond().ok_or(Error::RankDeficientRegression { node, cond: f64::INFINITY })?;
    if inv.cond.as_f64() > CONDITION_LIMIT {
        return Err(Error::RankDeficientRegression { node, cond: inv.cond.as_f64() });
    }
    let coef = &inv.inv * &rhs;
    let mut fitted = vec![T::zero(); reps * k];
    for r in 0..reps {
        let row = &x[r * cols..(r + 1) * cols];
        for c in 0..k {
            fitted[r * k + c] = (0..cols).map(|a| row[a] * coef[(a, c)]).sum();
        }
    }
    Ok(fitted)
}

/// Regression Monte Carlo with explicit backward Euler steps:
/// `Y_m = Ê_m[Y_{m+1}] − h (a Ê_m[Y_{m+1}] + f + Σ L_q O_q)` and
/// `Z_m = Ê_m[Y_{m+1} ΔW] / h`.
pub fn solve_lsmc_bsde<T: Scalar>(
    spec: &LinearBsdeSpec<T>,
    bundle: &PathBundle<T>,
    basis: LsmcBasis,
) -> Result<LsmcSolution<T>> {
    let (terminal, loads) = spec.check()?;
    if bundle.replications < LSMC_MIN_REPLICATIONS {
        return Err(Error::InvalidConfig(format!(
            "regression Monte Carlo needs at least {LSMC_MIN_REPLICATIONS} replications, got {}",
            bundle.replications
        )));
    }
    if bundle.agents != spec.drivers {
        return Err(Error::InvalidConfig(format!("bundle has {} drivers, spec {}", bundle.agents, spec.drivers)));
    }
    let n = spec.n();
    let grid = bundle.grid;
    let steps = grid.steps();
    let nodes = steps + 1;
    let h = grid.h();
    let reps = bundle.replications;
    let z_drivers: Vec<usize> = spec
        .driver_classes()
        .into_iter()
        .filter_map(|c| match c {
            DriverClass::Single(j) => Some(j),
            DriverClass::Rest { .. } => None,
        })
        .collect();

    // Observable paths and increments of the single drivers per replication.
    let sims: Vec<(Vec<Vec<T>>, Vec<Vec<T>>)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let p = bundle.replication(r);
            let obs = simulate_observables(spec, &p, h);
            let inc = z_drivers.iter().map(|&j| (0..steps).map(|m| p.dw(j, m)).collect()).collect();
            (obs, inc)
        })
        .collect();

    let mut y = vec![T::zero(); reps * nodes * n];
    let mut z: Vec<(usize, Vec<T>)> = z_drivers.iter().map(|&j| (j, vec![T::zero(); reps * nodes * n])).collect();
    let mut terminal_residual = T::zero();
    for (r, (obs, _)) in sims.iter().enumerate() {
        let xi = spec.terminal.evaluate(&obs[terminal]);
        if xi.len() != n {
            return Err(Error::DimensionMismatch {
                field: "terminal".into(),
                detail: format!("functional returned {} components, expected {n}", xi.len()),
            });
        }
        let at = (r * nodes + steps) * n;
        y[at..at + n].copy_from_slice(&xi);
        for (a, b) in y[at..at + n].iter().zip(&xi) {
            terminal_residual = terminal_residual.max((*a - *b).abs());
        }
    }

    let dims: Vec<usize> = spec.observables.iter().map(Observable::dim).collect();
    for m in (0..steps).rev() {
        let mut raw: Vec<Vec<T>> = Vec::new();
        for (q, &dim) in dims.iter().enumerate() {
            for k in 0..dim {
                raw.push(sims.iter().map(|(obs, _)| obs[q][m * dim + k]).collect());
            }
        }
        for p in 2..=basis.degree {
            raw.push(sims.iter().map(|(obs, _)| obs[terminal][m].powi(p as i32)).collect());
        }
        let (cols, x) = design(&raw, reps);

        let next: Vec<T> = (0..reps).flat_map(|r| y[(r * nodes + m + 1) * n..(r * nodes + m + 2) * n].to_vec()).collect();
        let cond = project(&x, cols, &next, n, m)?;
        for (zi, (_, zv)) in z.iter_mut().enumerate() {
            // Centering on the fitted conditional mean leaves the estimator
            // unbiased and removes the noise of the constant part.
            let prod: Vec<T> = (0..reps)
                .flat_map(|r| {
                    let dw = sims[r].1[zi][m];
                    let base = &cond[r * n..(r + 1) * n];
                    next[r * n..(r + 1) * n].iter().zip(base).map(move |(&v, &e)| (v - e) * dw / h).collect::<Vec<_>>()
                })
                .collect();
            let fitted = project(&x, cols, &prod, n, m)?;
            for r in 0..reps {
                zv[(r * nodes + m) * n..(r * nodes + m + 1) * n].copy_from_slice(&fitted[r * n..(r + 1) * n]);
            }
        }

        let a = spec.generator.get(m, Stage::Start);
        let f = spec.forcing.get(m, Stage::Start);
        for r in 0..reps {
            let e = &cond[r * n..(r + 1) * n];
            let mut drift = f.as_slice().to_vec();
            a.mul_vec_acc(e, &mut drift);
            for (q, l) in loads.iter().enumerate() {
                if let Some(l) = l {
                    let dim = dims[q];
                    l.get(m, Stage::Start).mul_vec_acc(&sims[r].0[q][m * dim..(m + 1) * dim], &mut drift);
                }
            }
            let at = (r * nodes + m) * n;
            for k in 0..n {
                y[at + k] = e[k] - h * drift[k];
            }
        }
    }

    let count = T::of_usize(reps);
    let mut mean = Vec::with_capacity(nodes);
    let mut stderr = Vec::with_capacity(nodes);
    for m in 0..nodes {
        let mu: Vec<T> = (0..n).map(|k| (0..reps).map(|r| y[(r * nodes + m) * n + k]).sum::<T>() / count).collect();
        let se: Vec<T> = (0..n)
            .map(|k| {
                let var = (0..reps).map(|r| (y[(r * nodes + m) * n + k] - mu[k]).powi(2)).sum::<T>()
                    / T::of_usize(reps - 1);
                (var / count).sqrt()
            })
            .collect();
        mean.push(mu);
        stderr.push(se);
    }
    Ok(LsmcSolution { n, replications: reps, nodes, y, z, mean, stderr, terminal_residual })
}

/// Convenience: a spec for `Y` driven by one agent's Brownian motion only,
/// `dY = (aY + f + L Wᵢ) dt + Zᵢ dWᵢ`, `Y(T) = ξ(Wᵢ)`.
pub fn own_driver_spec<T: Scalar>(
    drivers: usize,
    agent: usize,
    generator: Coef<T>,
    forcing: Coef<T>,
    terminal: TerminalSpec<T>,
) -> LinearBsdeSpec<T> {
    let steps = generator.steps();
    let w = Observable::brownian(steps, agent);
    let name = w.name.clone();
    LinearBsdeSpec {
        drivers,
        generator,
        forcing,
        observables: vec![w],
        loadings: Vec::new(),
        terminal,
        terminal_observable: name,
    }
}

/// Wraps a closure as a path-functional terminal.
pub fn path_functional<T: Scalar>(name: &str, eval: PathEvaluator<T>) -> TerminalSpec<T> {
    TerminalSpec::PathFunctional { name: name.into(), eval }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::paths::generate_paths;
    use crate::riccati::solve_limit_riccatis;
    use std::sync::Arc;

    fn grid(steps: usize) -> TimeGrid<f64> {
        TimeGrid::new(1.0, steps).unwrap()
    }

    fn zero(steps: usize) -> Coef<f64> {
        Coef::zeros(steps, 1, 1)
    }

    fn brownian_terminal() -> TerminalSpec<f64> {
        TerminalSpec::GaussianAffine { c: vec![0.0], d: vec![1.0] }
    }

    #[test]
    fn martingale_representation_of_brownian_motion() {
        let spec = own_driver_spec(4, 2, zero(50), zero(50), brownian_terminal());
        let rep = solve_affine_bsde(&spec, grid(50)).unwrap();
        let b = generate_paths(grid(50), 4, 1, 3).unwrap().replication(0);
        let w = b.path(2);
        for m in [0, 17, 50] {
            assert_eq!(rep.evaluate(m, &[&w[m..m + 1]]), vec![w[m]]);
            assert_eq!(rep.integrand(2, m).unwrap()[(0, 0)], 1.0);
            for j in [0, 1, 3] {
                assert!(rep.integrand(j, m).is_none());
            }
        }
    }

    #[test]
    fn deterministic_terminal_is_a_backward_ode() {
        // Y' = 0.3 Y + 1, Y(1) = 2  ⇒  Y(t) = (2 + 1/0.3) e^{0.3(t−1)} − 1/0.3
        let g = grid(100);
        let spec = own_driver_spec(
            1,
            0,
            Coef::constant(100, Mat::scalar(0.3)),
            Coef::constant(100, Mat::scalar(1.0)),
            TerminalSpec::Deterministic { c: vec![2.0] },
        );
        let rep = solve_affine_bsde(&spec, g).unwrap();
        let exact = (2.0 + 1.0 / 0.3) * (-0.3f64).exp() - 1.0 / 0.3;
        assert!((rep.constant.first()[(0, 0)] - exact).abs() < 1e-12);
        assert!(rep.integrands[0].values.iter().all(|z| z[(0, 0)] == 0.0));
        assert!(rep.coefficients[0].values().iter().all(|c| c[(0, 0)] == 0.0));
    }

    #[test]
    fn brownian_loading_matches_quadrature() {
        let model = ModelSpec::<f64>::reference_scalar().validate().unwrap();
        let g = model.grid();
        let lim = solve_limit_riccatis(&model, g).unwrap();
        let gen = Coef::from_fn(g.steps(), |m, st| {
            &Mat::scalar(0.1) + &crate::ode::StagePath::stage(&lim.sigma, m, st)
        });
        let spec = own_driver_spec(300, 0, gen, zero(g.steps()), brownian_terminal());
        let rep = solve_affine_bsde(&spec, g).unwrap();
        // exp(−∫₀¹ (A + Σ̄(s)Q) ds) from an independent adaptive solve and quadrature.
        let g1_0 = 6.463523302599600e-01;
        assert!((rep.coefficients[0].first()[(0, 0)] - g1_0).abs() < 1e-10);
        assert_eq!(rep.coefficients[0].last()[(0, 0)], 1.0);
    }

    #[test]
    fn errors_name_the_problem() {
        let eval: PathEvaluator<f64> = Arc::new(|p: &[f64]| vec![p[p.len() - 1].powi(3)]);
        let spec = own_driver_spec(1, 0, zero(10), zero(10), path_functional("cube", eval));
        assert!(matches!(solve_affine_bsde(&spec, grid(10)), Err(Error::UnsupportedTerminal(ref c)) if c == "path_functional"));
        let mut spec = own_driver_spec(1, 0, zero(10), zero(10), brownian_terminal());
        spec.loadings.push(("zeta".into(), zero(10)));
        assert!(matches!(solve_affine_bsde(&spec, grid(10)), Err(Error::UndeclaredObservable(ref c)) if c == "zeta"));
    }

    #[test]
    fn aggregate_observables_give_per_class_integrands() {
        // Y = (1/N) Σⱼ Wⱼ as terminal: integrand 1/N on every driver.
        let steps = 20;
        let spec = LinearBsdeSpec {
            drivers: 5,
            generator: zero(steps),
            forcing: zero(steps),
            observables: vec![Observable::brownian_sum(steps, DriverSet::All, 0.2, "mean W".into())],
            loadings: vec![],
            terminal: brownian_terminal(),
            terminal_observable: "mean W".into(),
        };
        let rep = solve_affine_bsde(&spec, grid(steps)).unwrap();
        for j in 0..5 {
            assert!((rep.integrand(j, 3).unwrap()[(0, 0)] - 0.2).abs() < 1e-15);
        }
        let b = generate_paths(grid(steps), 5, 1, 1).unwrap().replication(0);
        let o = simulate_observables(&spec, &b, 0.05);
        let direct: f64 = (0..5).map(|j| b.w(j, steps)).sum::<f64>() * 0.2;
        assert!((o[0][steps] - direct).abs() < 1e-14);
    }

    #[test]
    fn lsmc_deterministic_terminal_is_exact() {
        let g = grid(20);
        let bundle = generate_paths(g, 1, 1000, 7).unwrap();
        let spec = own_driver_spec(1, 0, zero(20), zero(20), TerminalSpec::Deterministic { c: vec![1.5] });
        let sol = solve_lsmc_bsde(&spec, &bundle, LsmcBasis::default()).unwrap();
        assert_eq!(sol.terminal_residual, 0.0);
        assert!(sol.y.iter().all(|v| (v - 1.5).abs() < 1e-10));
        assert!(sol.z[0].1.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn lsmc_needs_enough_replications() {
        let g = grid(10);
        let bundle = generate_paths(g, 1, 999, 7).unwrap();
        let spec = own_driver_spec(1, 0, zero(10), zero(10), brownian_terminal());
        assert!(matches!(solve_lsmc_bsde(&spec, &bundle, LsmcBasis::default()), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn lsmc_cubic_terminal_is_centered() {
        // Y(t) = W(t)³ + 3(T − t)W(t), so Y(0) = 0.
        let g = grid(50);
        let bundle = generate_paths(g, 1, 4000, 11).unwrap();
        let eval: PathEvaluator<f64> = Arc::new(|p: &[f64]| vec![p[p.len() - 1].powi(3)]);
        let spec = own_driver_spec(1, 0, zero(50), zero(50), path_functional("cube", eval));
        let sol = solve_lsmc_bsde(&spec, &bundle, LsmcBasis { degree: 3 }).unwrap();
        assert!(sol.mean[0][0].abs() < 3.0 * sol.stderr[25][0].max(1e-3), "Y(0) = {}", sol.mean[0][0]);
        // Interior values track the closed form; regression noise random-walks
        // backward, so compare in relative RMS.
        let m = 25;
        let t = g.t(m);
        let (mut num, mut den) = (0.0, 0.0);
        for r in 0..4000 {
            let w = bundle.driver_path(r, 0)[m];
            let exact = w.powi(3) + 3.0 * (1.0 - t) * w;
            num += (sol.value(r, m)[0] - exact).powi(2);
            den += exact * exact;
        }
        assert!((num / den).sqrt() < 0.15, "relative rms {}", (num / den).sqrt());
    }

    #[test]
    fn lsmc_agrees_with_affine_backend() {
        let g = grid(50);
        let gen = Coef::constant(50, Mat::scalar(0.4));
        let forcing = Coef::constant(50, Mat::scalar(-0.5));
        let spec = own_driver_spec(1, 0, gen, forcing, TerminalSpec::GaussianAffine { c: vec![1.0], d: vec![2.0] });
        let rep = solve_affine_bsde(&spec, g).unwrap();
        let bundle = generate_paths(g, 1, 2000, 5).unwrap();
        let sol = solve_lsmc_bsde(&spec, &bundle, LsmcBasis::default()).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for r in 0..2000 {
            let w = bundle.driver_path(r, 0);
            for m in 0..=50 {
                let exact = rep.evaluate(m, &[&w[m..m + 1]])[0];
                num += (sol.value(r, m)[0] - exact).powi(2);
                den += exact * exact;
            }
        }
        assert!((num / den).sqrt() < 0.02, "relative L2 {}", (num / den).sqrt());
        // Nodewise means against the deterministic mean ODE Ẏ = 0.4 Y − 0.5.
        for m in [0, 10, 25, 40] {
            let e = rep.constant.at(m)[(0, 0)];
            let se = sol.stderr[m][0];
            assert!((sol.mean[m][0] - e).abs() <= 3.0 * se + 2e-2, "node {m}");
        }
    }
}
