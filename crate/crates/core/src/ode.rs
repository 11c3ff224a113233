//! Fixed-step classical RK4 on lists of matrices.
//!
//! A step over grid interval `m` evaluates coefficients at the interval
//! start, midpoint and end ([`Stage`]). Model tables are constant on the
//! interval; solved paths supply midpoint values by cubic Hermite
//! interpolation from the node values and the endpoint slopes recorded by the
//! integrator, which keeps dependent equations fourth-order accurate.
//!
//! Backward equations are integrated in reversed time `s = T − t` with the
//! same stepping code.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{Table, TimeGrid};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Start,
    Mid,
    End,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Initial value at `t = 0`.
    Forward,
    /// Terminal value at `t = T`.
    Backward,
}

/// Anything that can be evaluated at the RK4 stages of a grid interval.
pub trait StagePath<T: Scalar> {
    fn stage(&self, interval: usize, stage: Stage) -> Mat<T>;
}

impl<T: Scalar> StagePath<T> for Table<T> {
    fn stage(&self, interval: usize, _stage: Stage) -> Mat<T> {
        self.at(interval).clone()
    }
}

/// A solved matrix path: node values plus the `d/dt` slopes at both ends of
/// every interval.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixPath<T> {
    h: T,
    values: Vec<Mat<T>>,
    slopes: Vec<(Mat<T>, Mat<T>)>,
}

impl<T: Scalar> MatrixPath<T> {
    /// A path that is identically `value` on the grid.
    pub fn constant(grid: TimeGrid<T>, value: Mat<T>) -> Self {
        let zero = Mat::zeros(value.rows(), value.cols());
        Self {
            h: grid.h(),
            values: vec![value; grid.nodes()],
            slopes: vec![(zero.clone(), zero); grid.steps()],
        }
    }

    pub fn values(&self) -> &[Mat<T>] {
        &self.values
    }

    pub fn at(&self, node: usize) -> &Mat<T> {
        &self.values[node]
    }

    pub fn first(&self) -> &Mat<T> {
        &self.values[0]
    }

    pub fn last(&self) -> &Mat<T> {
        self.values.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    /// `max_m ‖self(t_m) − other(t_m)‖_max`.
    pub fn sup_distance(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).max_abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    /// Overwrites one node value (used to pin boundary conditions exactly).
    pub(crate) fn pin(&mut self, node: usize, value: Mat<T>) {
        self.values[node] = value;
    }

    /// Entry `(r, c)` along the grid.
    pub fn entry_series(&self, r: usize, c: usize) -> Vec<T> {
        self.values.iter().map(|m| m[(r, c)]).collect()
    }
}

impl<T: Scalar> StagePath<T> for MatrixPath<T> {
    fn stage(&self, interval: usize, stage: Stage) -> Mat<T> {
        match stage {
            Stage::Start => self.values[interval].clone(),
            Stage::End => self.values[interval + 1].clone(),
            Stage::Mid => {
                let (d0, d1) = &self.slopes[interval];
                let half = T::of(0.5);
                let eighth_h = self.h * T::of(0.125);
                let mut mid = (&self.values[interval] + &self.values[interval + 1]).scale(half);
                mid += &(d0 - d1).scale(eighth_h);
                mid
            }
        }
    }
}

/// Coefficient tabulated at the three RK4 stages of every interval.
#[derive(Clone, Debug)]
pub struct Coef<T> {
    stages: Vec<[Mat<T>; 3]>,
}

impl<T: Scalar> Coef<T> {
    pub fn from_fn(steps: usize, mut f: impl FnMut(usize, Stage) -> Mat<T>) -> Self {
        Self {
            stages: (0..steps).map(|m| [f(m, Stage::Start), f(m, Stage::Mid), f(m, Stage::End)]).collect(),
        }
    }

    pub fn constant(steps: usize, value: Mat<T>) -> Self {
        Self { stages: vec![[value.clone(), value.clone(), value]; steps] }
    }

    pub fn zeros(steps: usize, rows: usize, cols: usize) -> Self {
        Self::constant(steps, Mat::zeros(rows, cols))
    }

    /// Samples any stage path (model table, solved path, ...).
    pub fn sample(steps: usize, path: &impl StagePath<T>) -> Self {
        Self::from_fn(steps, |m, st| path.stage(m, st))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.stages[0][0].shape()
    }

    pub fn get(&self, interval: usize, stage: Stage) -> &Mat<T> {
        let i = match stage {
            Stage::Start => 0,
            Stage::Mid => 1,
            Stage::End => 2,
        };
        &self.stages[interval][i]
    }

    /// Start, midpoint and end values on one interval.
    pub fn stages(&self, interval: usize) -> [&Mat<T>; 3] {
        let [a, b, c] = &self.stages[interval];
        [a, b, c]
    }

    /// Value at a grid node (interval start; the final node uses the end of
    /// the last interval).
    pub fn node(&self, node: usize) -> &Mat<T> {
        if node < self.stages.len() {
            &self.stages[node][0]
        } else {
            &self.stages[self.stages.len() - 1][2]
        }
    }

    pub fn steps(&self) -> usize {
        self.stages.len()
    }
}

impl<T: Scalar> StagePath<T> for Coef<T> {
    fn stage(&self, interval: usize, stage: Stage) -> Mat<T> {
        self.get(interval, stage).clone()
    }
}

/// Output of [`rk4`]: one [`MatrixPath`] per state component.
#[derive(Clone, Debug)]
pub struct Solution<T> {
    pub components: Vec<MatrixPath<T>>,
}

impl<T: Scalar> Solution<T> {
    pub fn take(self) -> Vec<MatrixPath<T>> {
        self.components
    }
}

fn axpy_state<T: Scalar>(y: &[Mat<T>], a: T, k: &[Mat<T>]) -> Vec<Mat<T>> {
    y.iter().zip(k).map(|(yi, ki)| yi + &ki.scale(a)).collect()
}

fn check_finite<T: Scalar>(state: &[Mat<T>], module: &'static str, what: &str, node: usize) -> Result<()> {
    if state.iter().all(Mat::is_finite) {
        Ok(())
    } else {
        Err(Error::NonfiniteBlowup { module, equation: what.to_string(), node })
    }
}

/// Integrates `dY/dt = rhs(interval, stage, Y)` over the grid.
///
/// `boundary` is the value at `t = 0` (forward) or `t = T` (backward) and is
/// stored exactly. `rhs` always returns the derivative with respect to `t`.
pub fn rk4<T, F>(
    grid: TimeGrid<T>,
    direction: Direction,
    boundary: Vec<Mat<T>>,
    module: &'static str,
    what: &str,
    rhs: F,
) -> Result<Solution<T>>
where
    T: Scalar,
    F: Fn(usize, Stage, &[Mat<T>]) -> Vec<Mat<T>>,
{
    let steps = grid.steps();
    let h = grid.h();
    let half_h = h * T::of(0.5);
    let sixth_h = h / T::of(6.0);
    let two = T::of(2.0);
    let ncomp = boundary.len();
    let mut values: Vec<Option<Vec<Mat<T>>>> = vec![None; steps + 1];
    let mut slopes: Vec<Option<(Vec<Mat<T>>, Vec<Mat<T>>)>> = vec![None; steps];

    // Reversed time for backward problems: dY/ds = −rhs(T − s).
    let sign = match direction {
        Direction::Forward => T::one(),
        Direction::Backward => -T::one(),
    };
    let (from_stage, to_stage) = match direction {
        Direction::Forward => (Stage::Start, Stage::End),
        Direction::Backward => (Stage::End, Stage::Start),
    };
    let f = |m: usize, st: Stage, y: &[Mat<T>]| -> Vec<Mat<T>> {
        rhs(m, st, y).into_iter().map(|d| d.scale(sign)).collect()
    };

    let mut y = boundary;
    check_finite(&y, module, what, if direction == Direction::Forward { 0 } else { steps })?;
    for k in 0..steps {
        let (m, from_node, to_node) = match direction {
            Direction::Forward => (k, k, k + 1),
            Direction::Backward => (steps - 1 - k, steps - k, steps - 1 - k),
        };
        let k1 = f(m, from_stage, &y);
        check_finite(&k1, module, what, from_node)?;
        let y2 = axpy_state(&y, half_h, &k1);
        let k2 = f(m, Stage::Mid, &y2);
        check_finite(&k2, module, what, from_node)?;
        let y3 = axpy_state(&y, half_h, &k2);
        let k3 = f(m, Stage::Mid, &y3);
        check_finite(&k3, module, what, from_node)?;
        let y4 = axpy_state(&y, h, &k3);
        let k4 = f(m, to_stage, &y4);
        check_finite(&k4, module, what, to_node)?;
        let next: Vec<Mat<T>> = (0..ncomp)
            .map(|i| {
                let mut incr = &k1[i] + &k4[i];
                incr += &(&k2[i] + &k3[i]).scale(two);
                &y[i] + &incr.scale(sixth_h)
            })
            .collect();
        check_finite(&next, module, what, to_node)?;
        // Slopes in t-time at both interval ends, evaluated with this
        // interval's coefficients.
        let d_from: Vec<Mat<T>> = k1.into_iter().map(|d| d.scale(sign)).collect();
        let d_to = rhs(m, to_stage, &next);
        let pair = match direction {
            Direction::Forward => (d_from, d_to),
            Direction::Backward => (d_to, d_from),
        };
        slopes[m] = Some(pair);
        values[from_node] = Some(std::mem::replace(&mut y, next));
        if k == steps - 1 {
            values[to_node] = Some(y.clone());
        }
    }

    let values: Vec<Vec<Mat<T>>> = values.into_iter().map(|v| v.expect("every node visited")).collect();
    let slopes: Vec<(Vec<Mat<T>>, Vec<Mat<T>>)> = slopes.into_iter().map(|s| s.expect("every interval visited")).collect();
    let components = (0..ncomp)
        .map(|i| MatrixPath {
            h,
            values: values.iter().map(|v| v[i].clone()).collect(),
            slopes: slopes.iter().map(|(a, b)| (a[i].clone(), b[i].clone())).collect(),
        })
        .collect();
    Ok(Solution { components })
}

/// The four points of a [`split_step`] at which the forcing is evaluated:
/// start, first predictor (midpoint time), kicked midpoint state, second
/// predictor (end time).
#[derive(Clone, Debug, Default)]
pub struct SplitTrace<T> {
    pub points: [Vec<T>; 4],
}

/// Time stage of each split-step point.
pub const SPLIT_STAGES: [Stage; 4] = [Stage::Start, Stage::Mid, Stage::Mid, Stage::End];

/// One step of the additive-noise linear SDE `dy = (F y + g) dt + H dW`:
/// a Heun half step, the noise `kick ≈ ∫H dW` at the midpoint, and a second
/// Heun half step. Unlike Euler-Maruyama this is weak order two, so second
/// moments (and hence quadratic costs) carry no `O(h)` bias.
///
/// `forcing(j)` gives `g` at point `j` of [`SplitTrace`]; it may read another
/// process stepped the same way, which then gets exactly its own scheme.
pub fn split_step<T: Scalar>(
    y: &mut [T],
    h: T,
    drift: [&Mat<T>; 3],
    forcing: impl Fn(usize) -> Vec<T>,
    kick: &[T],
) -> SplitTrace<T> {
    let half = h * T::of(0.5);
    let quarter = half * T::of(0.5);
    let f = |j: usize| match SPLIT_STAGES[j] {
        Stage::Start => drift[0],
        Stage::Mid => drift[1],
        Stage::End => drift[2],
    };
    let mut trace = SplitTrace::default();
    for part in 0..2 {
        let (j0, j1) = (2 * part, 2 * part + 1);
        trace.points[j0] = y.to_vec();
        let mut k1 = forcing(j0);
        f(j0).mul_vec_acc(y, &mut k1);
        trace.points[j1] = y.iter().zip(&k1).map(|(a, k)| *a + half * *k).collect();
        let mut k2 = forcing(j1);
        f(j1).mul_vec_acc(&trace.points[j1], &mut k2);
        for ((a, p), q) in y.iter_mut().zip(&k1).zip(&k2) {
            *a += quarter * (*p + *q);
        }
        if part == 0 {
            for (a, w) in y.iter_mut().zip(kick) {
                *a += *w;
            }
        }
    }
    trace
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(steps: usize) -> TimeGrid<f64> {
        TimeGrid::new(1.0, steps).unwrap()
    }

    #[test]
    fn forward_exponential() {
        let sol = rk4(grid(50), Direction::Forward, vec![Mat::scalar(1.0)], "test", "exp", |_, _, y| {
            vec![y[0].scale(0.7)]
        })
        .unwrap();
        let p = &sol.components[0];
        assert!((p.last()[(0, 0)] - 0.7f64.exp()).abs() < 1e-9);
        assert_eq!(p.first()[(0, 0)], 1.0);
    }

    #[test]
    fn backward_keeps_terminal_exact() {
        // y' = −y, y(1) = 2 ⇒ y(0) = 2e.
        let sol = rk4(grid(40), Direction::Backward, vec![Mat::scalar(2.0)], "test", "exp", |_, _, y| {
            vec![y[0].scale(-1.0)]
        })
        .unwrap();
        let p = &sol.components[0];
        assert_eq!(p.last()[(0, 0)], 2.0);
        assert!((p.first()[(0, 0)] - 2.0 * 1f64.exp()).abs() < 5e-8);
    }

    #[test]
    fn hermite_midpoint_is_fourth_order() {
        // y = sin t has y(mid) from the Hermite formula accurate to O(h⁴).
        let g = grid(20);
        let sol = rk4(g, Direction::Forward, vec![Mat::scalar(0.0), Mat::scalar(1.0)], "test", "osc", |_, _, y| {
            vec![y[1].clone(), y[0].scale(-1.0)]
        })
        .unwrap();
        let p = &sol.components[0];
        let mid = p.stage(7, Stage::Mid)[(0, 0)];
        let t = g.t(7) + 0.5 * g.h();
        assert!((mid - t.sin()).abs() < 1e-7);
    }

    #[test]
    fn blowup_is_reported() {
        // y' = y², y(0) = 1 blows up at t = 1.
        let err = rk4(grid(4), Direction::Forward, vec![Mat::scalar(1e200)], "test", "sq", |_, _, y| {
            vec![&y[0] * &y[0]]
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonfiniteBlowup { .. }));
    }

    // Moments of the split scheme on dy = −y dt + dW, y(0) = 1, via its
    // one-step coefficients y' = αy + c·ΔW.
    fn ou_moment_errors(steps: usize) -> (f64, f64) {
        let h = 1.0 / steps as f64;
        let f = Mat::scalar(-1.0);
        let step = |y0: f64, kick: f64| {
            let mut y = vec![y0];
            split_step(&mut y, h, [&f, &f, &f], |_| vec![0.0], &[kick]);
            y[0]
        };
        let (alpha, c) = (step(1.0, 0.0), step(0.0, 1.0));
        let (mut mean, mut var) = (1.0, 0.0);
        for _ in 0..steps {
            mean *= alpha;
            var = alpha * alpha * var + c * c * h;
        }
        ((mean - (-1.0f64).exp()).abs(), (var - (1.0 - (-2.0f64).exp()) / 2.0).abs())
    }

    #[test]
    fn split_step_moments_are_second_order() {
        let (m1, v1) = ou_moment_errors(20);
        let (m2, v2) = ou_moment_errors(40);
        assert!((3.5..4.5).contains(&(m1 / m2)), "{m1} {m2}");
        assert!((3.5..4.5).contains(&(v1 / v2)), "{v1} {v2}");
    }

    #[test]
    fn split_step_reports_its_stage_points() {
        let f = Mat::scalar(0.0);
        let mut y = vec![1.0];
        let trace = split_step(&mut y, 0.5, [&f, &f, &f], |j| vec![j as f64], &[2.0]);
        assert_eq!(trace.points[0], vec![1.0]);
        // Half step 0.25 with slopes 0 and 1, then the kick.
        assert_eq!(trace.points[2], vec![1.0 + 0.125 * 1.0 + 2.0]);
        assert_eq!(y, vec![3.125 + 0.125 * 5.0]);
    }
}
