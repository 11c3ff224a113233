//! Reproducible Brownian increments.
//!
//! Every increment `ΔWⱼ(t_m)` of replication `r` is a pure function of the
//! key `(seed, j, r, m)`: the key is hashed with a SplitMix64 chain into two
//! uniforms and mapped to a standard normal by Box-Muller. Any subset of the
//! increments can therefore be produced independently, in any order and on
//! any thread, with bit-identical results.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{TerminalSpec, TimeGrid};
use crate::scalar::Scalar;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn unit_open(bits: u64) -> f64 {
    // (0, 1]
    ((bits >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw keyed by `(seed, driver, replication, step)`.
#[inline]
pub fn keyed_normal(seed: u64, driver: u64, replication: u64, step: u64) -> f64 {
    let mut x = splitmix64(seed);
    x = splitmix64(x ^ driver);
    x = splitmix64(x ^ replication.rotate_left(32));
    x = splitmix64(x ^ step);
    let u1 = unit_open(x);
    let u2 = unit_open(splitmix64(x ^ 0xD1B5_4A32_D192_ED03));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Seeded Brownian drivers `W₁..W_N` on a grid, for a number of independent
/// Monte Carlo replications. Increments are generated on demand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathBundle<T> {
    pub seed: u64,
    pub agents: usize,
    pub replications: usize,
    pub grid: TimeGrid<T>,
}

/// All drivers of one replication, materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationPaths<T> {
    pub agents: usize,
    pub steps: usize,
    /// `increments[j * steps + m] = ΔWⱼ(t_m)`.
    pub increments: Vec<T>,
    /// `brownian[j * (steps + 1) + m] = Wⱼ(t_m)`.
    pub brownian: Vec<T>,
    /// `totals[m] = Σⱼ ΔWⱼ(t_m)`, summed in driver order.
    pub totals: Vec<T>,
}

impl<T: Scalar> ReplicationPaths<T> {
    #[inline]
    pub fn dw(&self, driver: usize, m: usize) -> T {
        self.increments[driver * self.steps + m]
    }

    #[inline]
    pub fn w(&self, driver: usize, m: usize) -> T {
        self.brownian[driver * (self.steps + 1) + m]
    }

    /// `Σⱼ ΔWⱼ(t_m)`.
    #[inline]
    pub fn dw_total(&self, m: usize) -> T {
        self.totals[m]
    }

    pub fn path(&self, driver: usize) -> &[T] {
        &self.brownian[driver * (self.steps + 1)..(driver + 1) * (self.steps + 1)]
    }
}

/// Builds the bundle descriptor.
pub fn generate_paths<T: Scalar>(grid: TimeGrid<T>, agents: usize, replications: usize, seed: u64) -> Result<PathBundle<T>> {
    if agents == 0 {
        return Err(Error::InvalidConfig("path bundle needs at least one driver".into()));
    }
    if replications == 0 {
        return Err(Error::InvalidConfig("path bundle needs at least one replication".into()));
    }
    Ok(PathBundle { seed, agents, replications, grid })
}

impl<T: Scalar> PathBundle<T> {
    #[inline]
    pub fn increment(&self, replication: usize, driver: usize, step: usize) -> T {
        let sd = self.grid.h().as_f64().sqrt();
        T::of(sd * keyed_normal(self.seed, driver as u64, replication as u64, step as u64))
    }

    /// Discrete Brownian path `Wⱼ(t₀..t_steps)` of one driver.
    pub fn driver_path(&self, replication: usize, driver: usize) -> Vec<T> {
        let steps = self.grid.steps();
        let mut w = Vec::with_capacity(steps + 1);
        let mut acc = T::zero();
        w.push(acc);
        for m in 0..steps {
            acc += self.increment(replication, driver, m);
            w.push(acc);
        }
        w
    }

    pub fn replication(&self, replication: usize) -> ReplicationPaths<T> {
        let steps = self.grid.steps();
        let mut increments = Vec::with_capacity(self.agents * steps);
        let mut brownian = Vec::with_capacity(self.agents * (steps + 1));
        for j in 0..self.agents {
            let mut acc = T::zero();
            brownian.push(acc);
            for m in 0..steps {
                let dw = self.increment(replication, j, m);
                increments.push(dw);
                acc += dw;
                brownian.push(acc);
            }
        }
        let mut totals = vec![T::zero(); steps];
        for j in 0..self.agents {
            for (t, dw) in totals.iter_mut().zip(&increments[j * steps..(j + 1) * steps]) {
                *t += *dw;
            }
        }
        ReplicationPaths { agents: self.agents, steps, increments, brownian, totals }
    }

    /// Full increment array indexed `[(r · N + j) · steps + m]`.
    pub fn increments(&self) -> Vec<T> {
        let steps = self.grid.steps();
        (0..self.replications * self.agents * steps)
            .into_par_iter()
            .map(|idx| {
                let m = idx % steps;
                let j = (idx / steps) % self.agents;
                let r = idx / (steps * self.agents);
                self.increment(r, j, m)
            })
            .collect()
    }
}

/// Samples `ξᵢ` on every replication of the bundle.
pub fn sample_terminal<T: Scalar>(terminal: &TerminalSpec<T>, bundle: &PathBundle<T>, agent: usize) -> Result<Vec<Vec<T>>> {
    if agent >= bundle.agents {
        return Err(Error::InvalidConfig(format!("agent {agent} out of range for N = {}", bundle.agents)));
    }
    Ok((0..bundle.replications).map(|r| terminal.evaluate(&bundle.driver_path(r, agent))).collect())
}

/// Monte Carlo estimate of `Eξ` with its componentwise standard error.
pub fn estimate_terminal_mean<T: Scalar>(
    terminal: &TerminalSpec<T>,
    grid: TimeGrid<T>,
    draws: usize,
    seed: u64,
) -> (Vec<T>, Vec<T>) {
    let bundle = PathBundle { seed: splitmix64(seed ^ 0x7E57_0000), agents: 1, replications: draws, grid };
    let samples: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|r| terminal.evaluate(&bundle.driver_path(r, 0)).into_iter().map(Scalar::as_f64).collect())
        .collect();
    let dim = samples.first().map(Vec::len).unwrap_or(0);
    let count = draws as f64;
    let mut mean = vec![0.0; dim];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; dim];
    for s in &samples {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v - m) * (v - m) / (count - 1.0).max(1.0);
        }
    }
    (mean.into_iter().map(T::of).collect(), var.into_iter().map(|v| T::of((v / count).sqrt())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(steps: usize) -> TimeGrid<f64> {
        TimeGrid::new(1.0, steps).unwrap()
    }

    #[test]
    fn bundle_is_deterministic() {
        let a = generate_paths(grid(100), 300, 1, 42).unwrap();
        let b = generate_paths(grid(100), 300, 1, 42).unwrap();
        assert_eq!(a.increments(), b.increments());
        let c = generate_paths(grid(100), 300, 1, 43).unwrap();
        assert_ne!(a.increments(), c.increments());
    }

    #[test]
    fn replication_matches_elementwise_access() {
        let b = generate_paths(grid(10), 4, 3, 9).unwrap();
        let rep = b.replication(2);
        for j in 0..4 {
            for m in 0..10 {
                assert_eq!(rep.dw(j, m), b.increment(2, j, m));
            }
            assert_eq!(rep.path(j), b.driver_path(2, j).as_slice());
        }
    }

    #[test]
    fn terminal_mean_over_agents_is_small() {
        // |mean of Wᵢ(1)| ≤ 3/√N for N = 300 (three-sigma CLT bound).
        let b = generate_paths(grid(100), 300, 1, 42).unwrap();
        let t = TerminalSpec::GaussianAffine { c: vec![0.0], d: vec![1.0] };
        let mean: f64 = (0..300).map(|i| sample_terminal(&t, &b, i).unwrap()[0][0]).sum::<f64>() / 300.0;
        assert!(mean.abs() <= 3.0 / 300f64.sqrt(), "mean {mean}");
    }

    #[test]
    fn per_step_variance_within_five_percent() {
        let g = grid(100);
        let b = generate_paths(g, 1000, 1, 5).unwrap();
        let inc = b.increments();
        assert_eq!(inc.len(), 100_000);
        let mean = inc.iter().sum::<f64>() / inc.len() as f64;
        let var = inc.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (inc.len() - 1) as f64;
        assert!((var / g.h() - 1.0).abs() < 0.05, "var/h = {}", var / g.h());
    }

    #[test]
    fn sampling_commutes_with_replication_slicing() {
        let b = generate_paths(grid(20), 3, 5, 11).unwrap();
        let t = TerminalSpec::GaussianAffine { c: vec![1.0, 0.0], d: vec![2.0, -1.0] };
        let all = sample_terminal(&t, &b, 1).unwrap();
        for r in 0..5 {
            let sliced = t.evaluate(b.replication(r).path(1));
            assert_eq!(all[r], sliced);
        }
    }

    #[test]
    fn out_of_range_agent() {
        let b = generate_paths(grid(4), 2, 1, 0).unwrap();
        assert!(sample_terminal(&TerminalSpec::Deterministic { c: vec![5.0] }, &b, 2).is_err());
    }

    #[test]
    fn deterministic_terminal_mean_has_zero_error() {
        let (m, se) = estimate_terminal_mean(&TerminalSpec::Deterministic { c: vec![5.0] }, grid(4), 100, 1);
        assert_eq!(m, vec![5.0]);
        assert_eq!(se, vec![0.0]);
    }
}
