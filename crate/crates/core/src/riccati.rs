//! Matrix Riccati equations of the decoupled Hamiltonian system.
//!
//! With `Q̃ = (I − Γ₁/N)ᵀQ` and `𝔅 = BR⁻¹Bᵀ` the finite-N system is
//!
//! ```text
//! Σ' = AΣ + ΣAᵀ + ΣQ̃Σ − 𝔅,                               Σ(T) = 0
//! K' = AK + KAᵀ + ΣQ̃K + KQ̃(Σ+K) − (Σ+K)Q̃Γ₁(Σ+K),          K(T) = 0
//! Π' = −ΠA − AᵀΠ + Π𝔅Π − Q̃,                               Π(0) = −(I − Γ₀/N)ᵀG
//! M' = −MA − AᵀM + Π𝔅M + M𝔅(Π+M) + Q̃Γ₁,                   M(0) = (I − Γ₀/N)ᵀGΓ₀
//! ```
//!
//! and the mean-field limits drop the `1/N` factors. The pairs `(Σ, K)` and
//! `(Π, M)` are integrated jointly so `K` and `M` see their drivers at every
//! RK4 stage.

use crate::error::{Error, Result};
use crate::fit::{loglog_fit, LogLogFit};
use crate::linalg::Mat;
use crate::model::{TimeGrid, ValidatedModel};
use crate::ode::{rk4, Direction, MatrixPath, StagePath};
use crate::scalar::Scalar;

/// Condition-number ceiling for every inverted factor.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Guarded inverse; reports the factor and node on failure.
pub(crate) fn guarded_inverse<T: Scalar>(m: &Mat<T>, factor: &str, node: usize) -> Result<Mat<T>> {
    match m.inverse_with_cond() {
        Some(inv) if inv.cond.as_f64() <= CONDITION_LIMIT => Ok(inv.inv),
        Some(inv) => Err(Error::SingularFactor { factor: factor.into(), node, cond: inv.cond.as_f64() }),
        None => Err(Error::SingularFactor { factor: factor.into(), node, cond: f64::INFINITY }),
    }
}

/// The four Riccati paths of one population size (or of the limit).
#[derive(Clone, Debug)]
pub struct RiccatiSet<T> {
    pub sigma: MatrixPath<T>,
    pub k: MatrixPath<T>,
    pub pi: MatrixPath<T>,
    pub m: MatrixPath<T>,
}

impl<T: Scalar> RiccatiSet<T> {
    pub fn named(&self) -> [(&'static str, &MatrixPath<T>); 4] {
        [("Sigma", &self.sigma), ("K", &self.k), ("Pi", &self.pi), ("M", &self.m)]
    }
}

/// Node-wise per-driver matrices, collapsed to one series when all drivers
/// share the same weight.
#[derive(Clone, Debug)]
pub enum DriverSeries<T> {
    Shared(Vec<Mat<T>>),
    PerDriver(Vec<Vec<Mat<T>>>),
}

impl<T: Scalar> DriverSeries<T> {
    pub fn get(&self, driver: usize, node: usize) -> &Mat<T> {
        match self {
            DriverSeries::Shared(v) => &v[node],
            DriverSeries::PerDriver(v) => &v[driver][node],
        }
    }
}

/// Finite-N Riccati paths together with the `K₁ⱼ` correction factors
/// `(I + ΣSⱼ)⁻¹ K Sⱼ (I + ΣSⱼ + KSⱼ)⁻¹`.
#[derive(Clone, Debug)]
pub struct FiniteRiccati<T> {
    pub agents: usize,
    pub set: RiccatiSet<T>,
    pub k1: DriverSeries<T>,
}

#[derive(Clone, Debug)]
pub struct RiccatiBundle<T> {
    pub grid: TimeGrid<T>,
    pub agents: usize,
    pub finite: FiniteRiccati<T>,
    pub limit: RiccatiSet<T>,
}

impl<T: Scalar> RiccatiBundle<T> {
    pub fn solve(model: &ValidatedModel<T>) -> Result<Self> {
        let grid = model.grid();
        Ok(Self {
            grid,
            agents: model.agents(),
            finite: solve_finite_riccatis(model, grid)?,
            limit: solve_limit_riccatis(model, grid)?,
        })
    }
}

/// `Some(N)` selects the finite-N factors, `None` the limit.
fn solve_set<T: Scalar>(model: &ValidatedModel<T>, grid: TimeGrid<T>, agents: Option<usize>) -> Result<RiccatiSet<T>> {
    let spec = model.spec();
    let n = spec.n;
    let eye = Mat::<T>::identity(n);
    let inv_n = agents.map(|a| T::one() / T::of_usize(a)).unwrap_or_else(T::zero);
    let label = if agents.is_some() { "" } else { "bar" };

    let qt = |m: usize| -> Mat<T> {
        let c1 = &eye - &spec.gamma1.at(m).scale(inv_n);
        &c1.transpose() * spec.q.at(m)
    };

    let backward = rk4(
        grid,
        Direction::Backward,
        vec![Mat::zeros(n, n), Mat::zeros(n, n)],
        "riccati",
        &format!("Sigma{label}/K{label}"),
        |m, st, y| {
            let a = spec.a.stage(m, st);
            let q = qt(m);
            let g1 = spec.gamma1.stage(m, st);
            let gain = model.control_gain(m);
            let (sigma, k) = (&y[0], &y[1]);
            let mut ds = &(&a * sigma) + &(sigma * &a.transpose());
            ds += &(&(sigma * &q) * sigma);
            ds -= gain;
            let sk = sigma + k;
            let mut dk = &(&a * k) + &(k * &a.transpose());
            dk += &(&(sigma * &q) * k);
            dk += &(&(k * &q) * &sk);
            dk -= &(&(&(&sk * &q) * &g1) * &sk);
            vec![ds, dk]
        },
    )?
    .take();

    let c0 = &eye - &spec.gamma0.scale(inv_n);
    let c0tg = &c0.transpose() * &spec.g;
    let pi0 = -&c0tg;
    let m0 = &c0tg * &spec.gamma0;
    let forward = rk4(
        grid,
        Direction::Forward,
        vec![pi0.clone(), m0.clone()],
        "riccati",
        &format!("Pi{label}/M{label}"),
        |m, st, y| {
            let a = spec.a.stage(m, st);
            let at = a.transpose();
            let q = qt(m);
            let g1 = spec.gamma1.stage(m, st);
            let gain = model.control_gain(m);
            let (pi, mm) = (&y[0], &y[1]);
            let mut dp = -&(&(pi * &a) + &(&at * pi));
            dp += &(&(pi * gain) * pi);
            dp -= &q;
            let mut dm = -&(&(mm * &a) + &(&at * mm));
            dm += &(&(pi * gain) * mm);
            dm += &(&(mm * gain) * &(pi + mm));
            dm += &(&q * &g1);
            vec![dp, dm]
        },
    )?
    .take();

    let mut it = backward.into_iter();
    let (sigma, k) = (it.next().unwrap(), it.next().unwrap());
    let mut it = forward.into_iter();
    let (mut pi, mut mm) = (it.next().unwrap(), it.next().unwrap());
    // Boundary values are assigned by the integrator; pin again so they are
    // bit-identical to the closed forms.
    pi.pin(0, pi0);
    mm.pin(0, m0);
    Ok(RiccatiSet { sigma, k, pi, m: mm })
}

/// Solves `Σ, K` backward and `Π, M` forward for the model's `N`, and forms
/// `K₁ⱼ` at every node.
pub fn solve_finite_riccatis<T: Scalar>(model: &ValidatedModel<T>, grid: TimeGrid<T>) -> Result<FiniteRiccati<T>> {
    let agents = model.agents();
    let set = solve_set(model, grid, Some(agents))?;
    let spec = model.spec();
    let k1_for = |s_table: &crate::model::Table<T>| -> Result<Vec<Mat<T>>> {
        let eye = Mat::identity(spec.n);
        (0..grid.nodes())
            .map(|node| {
                let s = s_table.at(node);
                let sigma = set.sigma.at(node);
                let k = set.k.at(node);
                let left = &eye + &(sigma * s);
                let right = &left + &(k * s);
                let left_inv = guarded_inverse(&left, "I+Sigma*S", node)?;
                let right_inv = guarded_inverse(&right, "I+Sigma*S+K*S", node)?;
                Ok(&(&(&left_inv * k) * s) * &right_inv)
            })
            .collect()
    };
    let k1 = match &spec.s {
        crate::model::DriverWeights::Shared(t) => DriverSeries::Shared(k1_for(t)?),
        crate::model::DriverWeights::PerDriver(v) => {
            DriverSeries::PerDriver(v.iter().map(k1_for).collect::<Result<_>>()?)
        }
    };
    Ok(FiniteRiccati { agents, set, k1 })
}

/// Mean-field limits `Σ̄, K̄, Π̄, M̄`.
pub fn solve_limit_riccatis<T: Scalar>(model: &ValidatedModel<T>, grid: TimeGrid<T>) -> Result<RiccatiSet<T>> {
    solve_set(model, grid, None)
}

/// Sup-norm gaps `sup_t |X_N − X̄|` along a population ladder.
#[derive(Clone, Debug)]
pub struct RiccatiConvergence {
    pub ladder: Vec<usize>,
    /// `(name, gap per ladder entry)` for Σ, K, Π, M.
    pub errors: Vec<(&'static str, Vec<f64>)>,
    /// Fit per matrix; `None` when that matrix coincides with its limit.
    pub fits: Vec<(&'static str, Option<LogLogFit>)>,
}

impl RiccatiConvergence {
    pub fn slope(&self, name: &str) -> Option<f64> {
        self.fits.iter().find(|(n, _)| *n == name).and_then(|(_, f)| f.as_ref().map(|f| f.slope))
    }
}

/// Floor below which a gap counts as exact coincidence.
pub const COINCIDENCE_FLOOR: f64 = 1e-14;

pub fn riccati_convergence_report<T: Scalar>(
    model: &ValidatedModel<T>,
    grid: TimeGrid<T>,
    ladder: &[usize],
) -> Result<RiccatiConvergence> {
    if ladder.len() < 3 {
        return Err(Error::InvalidConfig("convergence ladder needs at least 3 entries".into()));
    }
    if ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("convergence ladder must be strictly increasing".into()));
    }
    let limit = solve_limit_riccatis(model, grid)?;
    let mut errors: Vec<(&'static str, Vec<f64>)> =
        limit.named().iter().map(|(name, _)| (*name, Vec::with_capacity(ladder.len()))).collect();
    for &n in ladder {
        let finite = solve_set(&model.with_agents(n)?, grid, Some(n))?;
        for (slot, ((_, fin), (_, lim))) in errors.iter_mut().zip(finite.named().iter().zip(limit.named().iter())) {
            slot.1.push(fin.sup_distance(lim).as_f64());
        }
    }
    if errors.iter().all(|(_, e)| e.iter().all(|&v| v < COINCIDENCE_FLOOR)) {
        return Err(Error::DegenerateFit("exact coincidence: every finite-N path equals its limit".into()));
    }
    let fits = errors
        .iter()
        .map(|(name, e)| {
            let fit = if e.iter().all(|&v| v < COINCIDENCE_FLOOR) {
                None
            } else {
                let pairs: Vec<(f64, f64)> = ladder.iter().map(|&n| n as f64).zip(e.iter().copied()).collect();
                loglog_fit(&pairs).ok()
            };
            (*name, fit)
        })
        .collect();
    Ok(RiccatiConvergence { ladder: ladder.to_vec(), errors, fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::observed_order;
    use crate::model::{DriverWeights, ModelSpec, Table};

    type Spec = ModelSpec<f64>;

    fn reference() -> ValidatedModel<f64> {
        Spec::reference_scalar().validate().unwrap()
    }

    fn entry(p: &MatrixPath<f64>, node: usize) -> f64 {
        p.at(node)[(0, 0)]
    }

    // Independent high-accuracy solution of the scalar system (adaptive
    // 8th-order Dormand-Prince, rtol 1e-13).
    const SIGMA0: f64 = 5.899448147944375e-01;
    const K0: f64 = 5.895261994828317e-02;
    const PI1: f64 = -1.119299007286681e+00;
    const M1: f64 = 7.144140454003377e-01;
    const SIGMA_BAR0: f64 = 5.897702024109325e-01;
    const K_BAR0: f64 = 5.901632230710687e-02;
    const PI_BAR1: f64 = -1.120570027701697e+00;
    const M_BAR1: f64 = 7.150784497529225e-01;

    #[test]
    fn golden_values() {
        let model = reference();
        let b = RiccatiBundle::solve(&model).unwrap();
        let last = model.grid().steps();
        let f = &b.finite.set;
        for (got, want) in [
            (entry(&f.sigma, 0), SIGMA0),
            (entry(&f.k, 0), K0),
            (entry(&f.pi, last), PI1),
            (entry(&f.m, last), M1),
            (entry(&b.limit.sigma, 0), SIGMA_BAR0),
            (entry(&b.limit.k, 0), K_BAR0),
            (entry(&b.limit.pi, last), PI_BAR1),
            (entry(&b.limit.m, last), M_BAR1),
        ] {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn boundary_values_are_exact() {
        let model = reference();
        let b = RiccatiBundle::solve(&model).unwrap();
        let last = model.grid().steps();
        assert_eq!(entry(&b.limit.pi, 0), -2.0);
        assert_eq!(entry(&b.limit.m, 0), 2.0);
        assert_eq!(entry(&b.limit.sigma, last), 0.0);
        assert_eq!(entry(&b.limit.k, last), 0.0);
        let c0 = 1.0 - 1.0 / 300.0;
        assert_eq!(entry(&b.finite.set.pi, 0), -(c0 * 2.0));
        assert_eq!(entry(&b.finite.set.m, 0), c0 * 2.0);
        assert_eq!(entry(&b.finite.set.sigma, last), 0.0);
        assert_eq!(entry(&b.finite.set.k, last), 0.0);
        assert!(b.finite.set.named().iter().all(|(_, p)| p.is_finite()));
    }

    #[test]
    fn uncoupled_finite_equals_limit() {
        let model = Spec::reference_scalar().uncoupled().validate().unwrap();
        let b = RiccatiBundle::solve(&model).unwrap();
        assert_eq!(b.finite.set.sigma.values(), b.limit.sigma.values());
        assert!(b.finite.set.k.values().iter().all(|k| k[(0, 0)] == 0.0));
        let err = riccati_convergence_report(&model, model.grid(), &[25, 50, 100]).unwrap_err();
        assert!(matches!(err, Error::DegenerateFit(ref s) if s.contains("exact coincidence")));
    }

    #[test]
    fn pure_control_cost_is_linear() {
        let mut spec = Spec::reference_scalar();
        spec.a = Table::Constant(Mat::scalar(0.0));
        spec.q = Table::Constant(Mat::scalar(0.0));
        for n in [1, 7, 300] {
            let model = spec.clone().with_agents(n).validate().unwrap();
            let f = solve_finite_riccatis(&model, model.grid()).unwrap();
            assert!((entry(&f.set.sigma, 0) - 0.8).abs() < 1e-13);
            assert!((entry(&f.set.sigma, 100) - 0.4).abs() < 1e-13);
        }
    }

    #[test]
    fn rk4_observed_order() {
        let model = reference();
        let solve = |steps| {
            let g = model.grid().with_steps(steps).unwrap();
            solve_finite_riccatis(&model, g).unwrap().set
        };
        let (a, b, c) = (solve(10), solve(20), solve(40));
        let p_sigma = observed_order(entry(&a.sigma, 0), entry(&b.sigma, 0), entry(&c.sigma, 0));
        let p_k = observed_order(entry(&a.k, 0), entry(&b.k, 0), entry(&c.k, 0));
        let p_pi = observed_order(entry(&a.pi, 10), entry(&b.pi, 20), entry(&c.pi, 40));
        let p_m = observed_order(entry(&a.m, 10), entry(&b.m, 20), entry(&c.m, 40));
        for (name, p) in [("Sigma", p_sigma), ("K", p_k), ("Pi", p_pi), ("M", p_m)] {
            assert!((3.7..=4.3).contains(&p), "{name} order {p}");
        }
    }

    fn sigma_residual(steps: usize) -> f64 {
        let model = reference();
        let g = model.grid().with_steps(steps).unwrap();
        let f = solve_finite_riccatis(&model, g).unwrap().set;
        let (a, q, gain) = (0.1, 1.0 - 0.5 / 300.0, 0.8);
        let h = g.h();
        (1..steps)
            .map(|m| {
                let s = entry(&f.sigma, m);
                let fd = (entry(&f.sigma, m + 1) - entry(&f.sigma, m - 1)) / (2.0 * h);
                (fd - (2.0 * a * s + q * s * s - gain)).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn central_difference_residual_is_second_order() {
        let (r1, r2) = (sigma_residual(100), sigma_residual(200));
        let h = 1.0 / 200.0;
        assert!(r2 <= 0.5 * h * h, "residual {r2}");
        assert!((3.5..=4.5).contains(&(r1 / r2)), "ratio {}", r1 / r2);
    }

    #[test]
    fn matrix_paths_stay_symmetric() {
        let mut spec = Spec::reference_scalar();
        spec.n = 2;
        spec.k = 2;
        spec.agents = 50;
        spec.a = Table::Constant(Mat::from_row_major(2, 2, vec![0.1, 0.3, -0.2, 0.05]));
        spec.b = Table::Constant(Mat::from_row_major(2, 2, vec![1.0, 0.5, 0.0, 2.0]));
        spec.q = Table::Constant(Mat::from_row_major(2, 2, vec![1.0, 0.2, 0.2, 0.5]));
        spec.r = Table::Constant(Mat::from_row_major(2, 2, vec![5.0, 1.0, 1.0, 3.0]));
        spec.s = DriverWeights::Shared(Table::Constant(Mat::from_row_major(2, 2, vec![1.0, 0.1, 0.1, 0.8])));
        spec.g = Mat::from_row_major(2, 2, vec![2.0, 0.3, 0.3, 1.0]);
        spec.gamma0 = Mat::identity(2);
        spec.gamma1 = Table::Constant(Mat::identity(2).scale(0.5));
        spec.eta0 = vec![1.0, 0.0];
        spec.eta1 = Table::Constant(Mat::col(&[1.0, -1.0]));
        spec.terminal = crate::model::TerminalSpec::GaussianAffine { c: vec![0.0, 0.0], d: vec![1.0, 0.5] };
        let model = spec.validate().unwrap();
        let b = RiccatiBundle::solve(&model).unwrap();
        for p in [&b.finite.set.sigma, &b.finite.set.pi, &b.limit.sigma, &b.limit.pi] {
            assert!(p.values().iter().all(|m| m.asymmetry() < 1e-10));
        }
    }

    #[test]
    fn convergence_slopes_are_first_order() {
        let model = reference();
        let r = riccati_convergence_report(&model, model.grid(), &[25, 50, 100, 200, 400]).unwrap();
        for name in ["Sigma", "K", "Pi", "M"] {
            let s = r.slope(name).unwrap();
            assert!((-1.2..=-0.8).contains(&s), "{name} slope {s}");
        }
    }

    #[test]
    fn short_or_unsorted_ladders_are_rejected() {
        let model = reference();
        assert!(riccati_convergence_report(&model, model.grid(), &[10, 20]).is_err());
        assert!(riccati_convergence_report(&model, model.grid(), &[10, 30, 20]).is_err());
    }
}
