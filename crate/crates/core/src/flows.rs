//! Deterministic mean-field flows and fundamental solutions of linear ODEs.
//!
//! ```text
//! ζ̄' = [(Π̄+M̄)𝔅 − Aᵀ] ζ̄ + Qη₁,                  ζ̄(0) = Gη₀
//! φ̄' = [A + (Σ̄+K̄)Q(I−Γ₁)] φ̄ − (Σ̄+K̄)Qη₁,         φ̄(T) = Eξ
//! x₀' = [A − 𝔅(Π̄+M̄)] x₀ − 𝔅ζ̄,                    x₀(T) = Eξ
//! ```

use crate::error::Result;
use crate::linalg::Mat;
use crate::model::{TimeGrid, ValidatedModel};
use crate::ode::{rk4, Direction, MatrixPath, Stage, StagePath};
use crate::paths::estimate_terminal_mean;
use crate::riccati::{guarded_inverse, RiccatiSet};
use crate::scalar::Scalar;

/// Monte Carlo draws used for `Eξ` when the terminal is a path functional.
pub const TERMINAL_MEAN_DRAWS: usize = 100_000;

/// `Eξ`, with a standard error when it had to be estimated.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalMean<T> {
    pub mean: Vec<T>,
    pub stderr: Option<Vec<T>>,
}

pub fn terminal_mean<T: Scalar>(model: &ValidatedModel<T>) -> TerminalMean<T> {
    let spec = model.spec();
    match spec.terminal.affine_parts(spec.n) {
        // E Wᵢ(T) = 0
        Some((c, _)) => TerminalMean { mean: c, stderr: None },
        None => {
            let (mean, se) = estimate_terminal_mean(&spec.terminal, model.grid(), TERMINAL_MEAN_DRAWS, spec.seed);
            TerminalMean { mean, stderr: Some(se) }
        }
    }
}

/// The limiting flows `φ̄, ζ̄, x₀` as `n×1` paths.
#[derive(Clone, Debug)]
pub struct MeanFlow<T> {
    pub phi_bar: MatrixPath<T>,
    pub zeta_bar: MatrixPath<T>,
    pub x0: MatrixPath<T>,
    pub terminal_mean: TerminalMean<T>,
}

fn sum_stage<T: Scalar>(a: &MatrixPath<T>, b: &MatrixPath<T>, m: usize, st: Stage) -> Mat<T> {
    &a.stage(m, st) + &b.stage(m, st)
}

/// `ζ̄` forward from `Gη₀`.
pub fn solve_zeta_bar<T: Scalar>(model: &ValidatedModel<T>, limits: &RiccatiSet<T>, grid: TimeGrid<T>) -> Result<MatrixPath<T>> {
    let spec = model.spec();
    let start = &spec.g * &Mat::col(&spec.eta0);
    let mut path = rk4(grid, Direction::Forward, vec![start.clone()], "flows", "zeta_bar", |m, st, y| {
        let pm = sum_stage(&limits.pi, &limits.m, m, st);
        let drift = &(&pm * model.control_gain(m)) - &spec.a.at(m).transpose();
        vec![&(&drift * &y[0]) + &(spec.q.at(m) * spec.eta1.at(m))]
    })?
    .take()
    .remove(0);
    path.pin(0, start);
    Ok(path)
}

pub fn solve_mean_flows<T: Scalar>(
    model: &ValidatedModel<T>,
    limits: &RiccatiSet<T>,
    grid: TimeGrid<T>,
) -> Result<MeanFlow<T>> {
    let spec = model.spec();
    let n = spec.n;
    let eye = Mat::<T>::identity(n);
    let terminal_mean = terminal_mean(model);
    let exi = Mat::col(&terminal_mean.mean);
    let last = grid.steps();

    let zeta_bar = solve_zeta_bar(model, limits, grid)?;

    let mut phi_bar = rk4(grid, Direction::Backward, vec![exi.clone()], "flows", "phi_bar", |m, st, y| {
        let sk = sum_stage(&limits.sigma, &limits.k, m, st);
        let skq = &sk * spec.q.at(m);
        let drift = spec.a.at(m) + &(&skq * &(&eye - spec.gamma1.at(m)));
        vec![&(&drift * &y[0]) - &(&skq * spec.eta1.at(m))]
    })?
    .take()
    .remove(0);
    phi_bar.pin(last, exi.clone());

    let mut x0 = rk4(grid, Direction::Backward, vec![exi.clone()], "flows", "x0", |m, st, y| {
        let gain = model.control_gain(m);
        let pm = sum_stage(&limits.pi, &limits.m, m, st);
        let drift = spec.a.at(m) - &(gain * &pm);
        vec![&(&drift * &y[0]) - &(gain * &zeta_bar.stage(m, st))]
    })?
    .take()
    .remove(0);
    x0.pin(last, exi);

    Ok(MeanFlow { phi_bar, zeta_bar, x0, terminal_mean })
}

/// Fundamental solution of `y' = a(t) y`.
///
/// Stores `Ψ(t_m) = Φ(t_m, 0)` and its inverse; `Φ(t, s) = Ψ(t)Ψ(s)⁻¹`.
#[derive(Clone, Debug)]
pub struct TransitionTable<T> {
    grid: TimeGrid<T>,
    psi: Vec<Mat<T>>,
    psi_inv: Vec<Mat<T>>,
}

impl<T: Scalar> TransitionTable<T> {
    /// `Φ(t_to, t_from)`.
    pub fn between(&self, to: usize, from: usize) -> Mat<T> {
        &self.psi[to] * &self.psi_inv[from]
    }

    /// `Φ(t_to, t_from) v`.
    pub fn apply(&self, to: usize, from: usize, v: &Mat<T>) -> Mat<T> {
        &self.psi[to] * &(&self.psi_inv[from] * v)
    }

    /// Trapezoid approximation of `∫_{t_from}^{t_to} Φ(t_to, s) b(s) ds`
    /// from node values of `b`.
    pub fn integral(&self, to: usize, from: usize, b: &[Mat<T>]) -> Mat<T> {
        let (lo, hi) = if from <= to { (from, to) } else { (to, from) };
        let rows = self.psi[0].rows();
        let cols = b[lo].cols();
        let mut acc = Mat::zeros(rows, cols);
        if lo == hi {
            return acc;
        }
        let half = T::of(0.5);
        for l in lo..=hi {
            let w = if l == lo || l == hi { half } else { T::one() };
            acc += &(&self.psi_inv[l] * &b[l]).scale(w);
        }
        let signed = if from <= to { self.grid.h() } else { -self.grid.h() };
        (&self.psi[to] * &acc).scale(signed)
    }

    pub fn grid(&self) -> TimeGrid<T> {
        self.grid
    }
}

pub fn transition<T: Scalar>(generator: &impl StagePath<T>, grid: TimeGrid<T>) -> Result<TransitionTable<T>> {
    let first = generator.stage(0, Stage::Start);
    let n = first.rows();
    let eye = Mat::identity(n);
    let psi = rk4(grid, Direction::Forward, vec![eye], "flows", "transition", |m, st, y| {
        vec![&generator.stage(m, st) * &y[0]]
    })?
    .take()
    .remove(0);
    let psi = psi.values().to_vec();
    let psi_inv = psi
        .iter()
        .enumerate()
        .map(|(node, p)| guarded_inverse(p, "Phi(t,0)", node))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionTable { grid, psi, psi_inv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Table, TerminalSpec};
    use crate::ode::Coef;
    use crate::riccati::solve_limit_riccatis;

    type Spec = ModelSpec<f64>;

    fn v(p: &MatrixPath<f64>, node: usize) -> f64 {
        p.at(node)[(0, 0)]
    }

    // Independent adaptive solution (rtol 1e-13) of the coupled scalar system.
    const ZETA_BAR1: f64 = 2.366414993696186e+00;
    const PHI_BAR0: f64 = 3.137461455798376e-01;
    const X00: f64 = 1.611319195015917e+00;

    fn reference_flows(steps: usize) -> MeanFlow<f64> {
        let model = Spec::reference_scalar().with_steps(steps).validate().unwrap();
        let lim = solve_limit_riccatis(&model, model.grid()).unwrap();
        solve_mean_flows(&model, &lim, model.grid()).unwrap()
    }

    #[test]
    fn boundaries_and_golden_values() {
        let f = reference_flows(200);
        assert_eq!(v(&f.zeta_bar, 0), 2.0);
        assert_eq!(v(&f.phi_bar, 200), 0.0);
        assert_eq!(v(&f.x0, 200), 0.0);
        assert!(f.terminal_mean.stderr.is_none());
        assert!((v(&f.zeta_bar, 200) - ZETA_BAR1).abs() < 1e-10, "{}", v(&f.zeta_bar, 200));
        assert!((v(&f.phi_bar, 0) - PHI_BAR0).abs() < 1e-10, "{}", v(&f.phi_bar, 0));
        assert!((v(&f.x0, 0) - X00).abs() < 1e-10, "{}", v(&f.x0, 0));
    }

    #[test]
    fn zeta_bar_is_independent_of_solve_order() {
        let model = Spec::reference_scalar().validate().unwrap();
        let lim = solve_limit_riccatis(&model, model.grid()).unwrap();
        let alone = solve_zeta_bar(&model, &lim, model.grid()).unwrap();
        let f = solve_mean_flows(&model, &lim, model.grid()).unwrap();
        assert_eq!(alone.values(), f.zeta_bar.values());
    }

    #[test]
    fn uncontrolled_x0_is_exponential() {
        let mut spec = Spec::reference_scalar();
        spec.b = Table::Constant(Mat::scalar(0.0));
        spec.terminal = TerminalSpec::Deterministic { c: vec![3.0] };
        let model = spec.validate().unwrap();
        let lim = solve_limit_riccatis(&model, model.grid()).unwrap();
        let f = solve_mean_flows(&model, &lim, model.grid()).unwrap();
        for node in [0, 50, 137] {
            let t = model.grid().t(node);
            let exact = (0.1 * (t - 1.0)).exp() * 3.0;
            assert!((v(&f.x0, node) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_residuals_are_second_order() {
        let resid = |steps: usize| {
            let model = Spec::reference_scalar().with_steps(steps).validate().unwrap();
            let lim = solve_limit_riccatis(&model, model.grid()).unwrap();
            let f = solve_mean_flows(&model, &lim, model.grid()).unwrap();
            let h = model.grid().h();
            (1..steps)
                .map(|m| {
                    let z = v(&f.zeta_bar, m);
                    let fd = (v(&f.zeta_bar, m + 1) - v(&f.zeta_bar, m - 1)) / (2.0 * h);
                    let pm = v(&lim.pi, m) + v(&lim.m, m);
                    (fd - ((pm * 0.8 - 0.1) * z + 1.0)).abs()
                })
                .fold(0.0, f64::max)
        };
        let (r1, r2) = (resid(100), resid(200));
        assert!((3.5..=4.5).contains(&(r1 / r2)), "ratio {}", r1 / r2);
    }

    #[test]
    fn zero_generator_is_identity() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let t = transition(&Coef::constant(20, Mat::zeros(2, 2)), g).unwrap();
        for (a, b) in [(0, 0), (20, 0), (13, 7)] {
            assert_eq!(t.between(a, b), Mat::identity(2));
        }
    }

    #[test]
    fn scalar_exponential() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let t = transition(&Coef::constant(200, Mat::scalar(0.1)), g).unwrap();
        assert!((t.between(200, 0)[(0, 0)] - 0.1f64.exp()).abs() < 1e-10);
        let ones = vec![Mat::scalar(1.0); 201];
        // ∫₀¹ e^{0.1(1−s)} ds = 10(e^{0.1} − 1)
        let exact = 10.0 * (0.1f64.exp() - 1.0);
        assert!((t.integral(200, 0, &ones)[(0, 0)] - exact).abs() < 1e-5);
    }

    #[test]
    fn cocycle_on_closed_loop_generator() {
        let model = Spec::reference_scalar().validate().unwrap();
        let g = model.grid();
        let lim = solve_limit_riccatis(&model, g).unwrap();
        let gen = Coef::from_fn(g.steps(), |m, st| &Mat::scalar(0.1) - &(model.control_gain(m) * &lim.pi.stage(m, st)));
        let t = transition(&gen, g).unwrap();
        let lhs = &t.between(200, 100) * &t.between(100, 0);
        assert!((&lhs - &t.between(200, 0)).max_abs() < 1e-10);
    }
}
