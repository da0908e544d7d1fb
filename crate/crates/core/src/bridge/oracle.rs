//! Soft-constraint Riccati solution of the pinned control problem.
//!
//! The value function `V = ½ (m + r)ᵀ P⁻¹ (m + r)` obeys, between pins,
//!
//! ```text
//! dP/dt = A P + P Aᵀ - g gᵀ,      r_t = Φ(t, s) r_s,   Φ(t, s) = [[1, t - s], [0, 1]]
//! ```
//!
//! solved backward from `P_N = R⁻¹`, `r_N = -m̄_N`, with the jumps
//!
//! ```text
//! P_n = (P_{n+}⁻¹ + R)⁻¹,     r_n = P_n (P_{n+}⁻¹ r_{n+} - R m̄_n)
//! ```
//!
//! at each earlier pin and `R = diag(1/c, c)`, `m̄_n = [x̄_n, 0]`. The control
//! is `u = -g gᵀ P⁻¹ (m + r)`; only its velocity row is returned. Any spacing
//! of the pinned times is allowed.

use serde::{Deserialize, Serialize};

use super::{SegmentCoefficients, SoftConstraintConfig};
use crate::error::{Error, Result};

type Mat2 = [[f64; 2]; 2];

const CONDITION_GUARD: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OracleIntegrator {
    /// Closed-form propagation of the (cubic-polynomial) Lyapunov solution.
    Exact,
    /// Classical fixed-step RK4 with the given number of steps per unit time.
    Rk4 { steps_per_unit: usize },
}

#[derive(Debug, Clone)]
pub struct FiniteCOracle {
    times: Vec<f64>,
    sigma: f64,
    integrator: OracleIntegrator,
    /// `P` right after the jump at each pin (index n holds `P_n`).
    knot_p: Vec<Mat2>,
    /// Per-pin, per-dimension `r_n`.
    knot_r: Vec<Vec<[f64; 2]>>,
    /// RK4 mode: backward grids of `P` per segment, starting at the segment's right end.
    grids: Vec<Vec<Mat2>>,
    grid_h: Vec<f64>,
}

impl FiniteCOracle {
    pub fn new(
        times: &[f64],
        pins: &[Vec<f64>],
        config: &SoftConstraintConfig,
        integrator: OracleIntegrator,
    ) -> Result<Self> {
        crate::schedule::normalize_schedule(times)?;
        if pins.len() != times.len() {
            return Err(Error::Domain(format!(
                "{} pins for {} times",
                pins.len(),
                times.len()
            )));
        }
        if !(config.c > 0.0) || !(config.sigma > 0.0) {
            return Err(Error::Domain("oracle needs c > 0 and sigma > 0".into()));
        }
        if let OracleIntegrator::Rk4 { steps_per_unit } = integrator {
            if steps_per_unit == 0 {
                return Err(Error::Domain("RK4 needs at least one step per unit".into()));
            }
        }
        let d = pins[0].len();
        let last = times.len() - 1;
        let c = config.c;
        let soft = [[1.0 / c, 0.0], [0.0, c]];

        let mut knot_p = vec![[[0.0; 2]; 2]; times.len()];
        let mut knot_r = vec![vec![[0.0; 2]; d]; times.len()];
        let mut grids = vec![Vec::new(); last];
        let mut grid_h = vec![0.0; last];

        knot_p[last] = [[c, 0.0], [0.0, 1.0 / c]];
        knot_r[last] = pins[last].iter().map(|&xb| [-xb, 0.0]).collect();

        let mut oracle = FiniteCOracle {
            times: times.to_vec(),
            sigma: config.sigma,
            integrator,
            knot_p: Vec::new(),
            knot_r: Vec::new(),
            grids: Vec::new(),
            grid_h: Vec::new(),
        };

        for n in (0..last).rev() {
            let tau = times[n + 1] - times[n];
            let right = knot_p[n + 1];
            let left = match integrator {
                OracleIntegrator::Exact => oracle.propagate_exact(&right, tau),
                OracleIntegrator::Rk4 { steps_per_unit } => {
                    let steps = ((steps_per_unit as f64) * tau).ceil().max(1.0) as usize;
                    let h = tau / steps as f64;
                    let mut grid = Vec::with_capacity(steps + 1);
                    let mut p = right;
                    grid.push(p);
                    for _ in 0..steps {
                        p = oracle.rk4_step(&p, h);
                        grid.push(p);
                    }
                    grids[n] = grid;
                    grid_h[n] = h;
                    p
                }
            };
            let r_left: Vec<[f64; 2]> = knot_r[n + 1].iter().map(|r| transition(r, tau)).collect();
            if n == 0 {
                knot_p[0] = left;
                knot_r[0] = r_left;
                continue;
            }
            let left_inv = invert(&left, times[n])?;
            let p_n = invert(&add(&left_inv, &soft), times[n])?;
            knot_r[n] = r_left
                .iter()
                .zip(&pins[n])
                .map(|(r, &xb)| {
                    let pulled = mat_vec(&left_inv, r);
                    let target = mat_vec(&soft, &[xb, 0.0]);
                    mat_vec(&p_n, &[pulled[0] - target[0], pulled[1] - target[1]])
                })
                .collect();
            knot_p[n] = p_n;
        }
        oracle.knot_p = knot_p;
        oracle.knot_r = knot_r;
        oracle.grids = grids;
        oracle.grid_h = grid_h;
        Ok(oracle)
    }

    fn drift(&self, p: &Mat2) -> Mat2 {
        // A P + P Aᵀ - g gᵀ with A = [[0, 1], [0, 0]].
        [
            [2.0 * p[0][1], p[1][1]],
            [p[1][1], -self.sigma * self.sigma],
        ]
    }

    /// One RK4 step of size `h` backward in time.
    fn rk4_step(&self, p: &Mat2, h: f64) -> Mat2 {
        let dt = -h;
        let k1 = self.drift(p);
        let k2 = self.drift(&axpy(p, &k1, dt / 2.0));
        let k3 = self.drift(&axpy(p, &k2, dt / 2.0));
        let k4 = self.drift(&axpy(p, &k3, dt));
        let mut out = *p;
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] += dt / 6.0 * (k1[i][j] + 2.0 * k2[i][j] + 2.0 * k3[i][j] + k4[i][j]);
            }
        }
        out
    }

    /// `P(t - tau)` from `P(t)`.
    fn propagate_exact(&self, p: &Mat2, tau: f64) -> Mat2 {
        let s2 = self.sigma * self.sigma;
        // Φ P Φᵀ with Φ = [[1, -tau], [0, 1]].
        let a = p[0][0] - 2.0 * tau * p[0][1] + tau * tau * p[1][1];
        let b = p[0][1] - tau * p[1][1];
        let d = p[1][1];
        [
            [a + s2 * tau.powi(3) / 3.0, b - s2 * tau * tau / 2.0],
            [b - s2 * tau * tau / 2.0, d + s2 * tau],
        ]
    }

    fn p_at(&self, n: usize, t: f64) -> Mat2 {
        let tau = self.times[n + 1] - t;
        match self.integrator {
            OracleIntegrator::Exact => self.propagate_exact(&self.knot_p[n + 1], tau),
            OracleIntegrator::Rk4 { .. } => {
                let h = self.grid_h[n];
                let grid = &self.grids[n];
                let j = ((tau / h).floor() as usize).min(grid.len() - 1);
                let rest = tau - j as f64 * h;
                if rest <= 0.0 {
                    grid[j]
                } else {
                    self.rk4_step(&grid[j], rest)
                }
            }
        }
    }

    /// Velocity row of the optimal control at `(t, x, v)`.
    pub fn acceleration(&self, t: f64, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let last = self.times.len() - 1;
        if !(t >= self.times[0] && t < self.times[last]) {
            return Err(Error::Domain(format!(
                "t = {t} outside [{}, {})",
                self.times[0], self.times[last]
            )));
        }
        if x.len() != self.knot_r[0].len() || v.len() != x.len() {
            return Err(Error::Dimension {
                expected: self.knot_r[0].len(),
                found: x.len(),
            });
        }
        let n = self.times.windows(2).position(|w| t < w[1]).unwrap_or(last - 1);
        let p = self.p_at(n, t);
        let q = invert(&p, t)?;
        let tau = self.times[n + 1] - t;
        let s2 = self.sigma * self.sigma;
        Ok(self.knot_r[n + 1]
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let r_t = transition(r, tau);
                let e = [x[k] + r_t[0], v[k] + r_t[1]];
                -s2 * (q[1][0] * e[0] + q[1][1] * e[1])
            })
            .collect())
    }

    /// Probes `λ` for a segment with `num_future` pins ahead by setting one
    /// pin to 1 at a time on a unit-spaced schedule and dividing the resulting
    /// acceleration by the closed-form `C3` (adding back `C1` for the next pin).
    pub fn probe_lambda(num_future: usize, config: &SoftConstraintConfig, probe_t: f64) -> Result<Vec<f64>> {
        if num_future == 1 {
            return Ok(vec![0.0]);
        }
        let times: Vec<f64> = (0..=num_future).map(|n| n as f64).collect();
        let seg = SegmentCoefficients::new(0, num_future)?;
        let cf = super::c_functions(&seg, probe_t)?;
        (1..=num_future)
            .map(|j| {
                let mut pins = vec![vec![0.0]; num_future + 1];
                pins[j][0] = 1.0;
                let oracle = FiniteCOracle::new(&times, &pins, config, OracleIntegrator::Exact)?;
                let a = oracle.acceleration(probe_t, &[0.0], &[0.0])?[0];
                let shift = if j == 1 { cf.c1 } else { 0.0 };
                let value = (a + shift) / cf.c3;
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("lambda probe {j} is not finite")));
                }
                Ok(value)
            })
            .collect()
    }
}

fn transition(r: &[f64; 2], tau: f64) -> [f64; 2] {
    [r[0] - tau * r[1], r[1]]
}

fn add(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] + b[0][0], a[0][1] + b[0][1]],
        [a[1][0] + b[1][0], a[1][1] + b[1][1]],
    ]
}

fn axpy(a: &Mat2, b: &Mat2, k: f64) -> Mat2 {
    [
        [a[0][0] + k * b[0][0], a[0][1] + k * b[0][1]],
        [a[1][0] + k * b[1][0], a[1][1] + k * b[1][1]],
    ]
}

fn mat_vec(a: &Mat2, v: &[f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn invert(p: &Mat2, t: f64) -> Result<Mat2> {
    let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    let scale = (p[0][0] * p[1][1]).abs().max(p[0][1] * p[1][0]).max(f64::MIN_POSITIVE);
    if !(p[0][0] > 0.0 && p[1][1] > 0.0 && det > 0.0) {
        return Err(Error::Numerical(format!(
            "P lost positive definiteness at t = {t}: {p:?}"
        )));
    }
    if det / scale < CONDITION_GUARD {
        return Err(Error::Numerical(format!(
            "P is ill-conditioned at t = {t} (relative determinant {:.3e})",
            det / scale
        )));
    }
    Ok([
        [p[1][1] / det, -p[0][1] / det],
        [-p[1][0] / det, p[0][0] / det],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(c: f64) -> SoftConstraintConfig {
        SoftConstraintConfig {
            c,
            sigma: 1.0,
            ode_steps: 10_000,
        }
    }

    #[test]
    fn two_marginal_matches_closed_form() {
        let oracle = FiniteCOracle::new(&[0.0, 1.0], &[vec![0.0], vec![1.3]], &config(1e-6), OracleIntegrator::Exact).unwrap();
        let (x, v, t) = (0.2, -0.4, 0.5);
        let a = oracle.acceleration(t, &[x], &[v]).unwrap()[0];
        let closed = 3.0 / 0.25 * (1.3 - x) - 3.0 / 0.5 * v;
        assert!((a - closed).abs() <= 1e-3 * closed.abs());
    }

    #[test]
    fn rk4_agrees_with_exact_propagation() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let pins = vec![vec![0.0], vec![0.5], vec![-1.0], vec![2.0]];
        let exact = FiniteCOracle::new(&times, &pins, &config(1e-5), OracleIntegrator::Exact).unwrap();
        let rk4 = FiniteCOracle::new(&times, &pins, &config(1e-5), OracleIntegrator::Rk4 { steps_per_unit: 10_000 }).unwrap();
        for t in [0.1, 0.65, 1.3, 2.5] {
            let a = exact.acceleration(t, &[0.3], &[0.1]).unwrap()[0];
            let b = rk4.acceleration(t, &[0.3], &[0.1]).unwrap()[0];
            assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "t = {t}: {a} vs {b}");
        }
    }

    #[test]
    fn homogeneous_case_is_linear_in_state() {
        let times = [0.0, 1.0, 2.0];
        let pins = vec![vec![0.0]; 3];
        let oracle = FiniteCOracle::new(&times, &pins, &config(1e-6), OracleIntegrator::Exact).unwrap();
        let a1 = oracle.acceleration(0.4, &[1.0], &[0.0]).unwrap()[0];
        let a2 = oracle.acceleration(0.4, &[0.0], &[1.0]).unwrap()[0];
        let a3 = oracle.acceleration(0.4, &[2.0], &[-3.0]).unwrap()[0];
        assert!((a3 - (2.0 * a1 - 3.0 * a2)).abs() < 1e-9 * (1.0 + a3.abs()));
        assert_eq!(oracle.acceleration(0.4, &[0.0], &[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn probed_lambda_for_five_marginals() {
        let lam = FiniteCOracle::probe_lambda(4, &config(1e-8), 0.3).unwrap();
        for (a, b) in lam.iter().zip([-1.267, 1.6, -0.4, 0.067]) {
            assert!((a - b).abs() < 1e-3, "{lam:?}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(FiniteCOracle::new(&[0.0, 1.0], &[vec![0.0]], &config(1e-6), OracleIntegrator::Exact).is_err());
        assert!(FiniteCOracle::new(&[0.0, 1.0], &[vec![0.0], vec![1.0]], &config(0.0), OracleIntegrator::Exact).is_err());
        let o = FiniteCOracle::new(&[0.0, 1.0], &[vec![0.0], vec![1.0]], &config(1e-6), OracleIntegrator::Exact).unwrap();
        assert!(o.acceleration(1.0, &[0.0], &[0.0]).is_err());
    }
}
