//! The `c → 0` bridge solved directly.
//!
//! With positions pinned exactly and velocities free, the minimum-energy
//! trajectory from `(x, v)` through the future pins is a cubic spline that is
//! clamped at the start (position and velocity given), C² at every pin, and
//! natural (`a = 0`) at the final pin. By certainty equivalence the optimal
//! feedback acceleration of the stochastic problem equals the initial second
//! derivative of that spline, so this is an exact reference for any schedule.

use crate::error::{Error, Result};

/// Initial acceleration of the minimum-energy path from `(x, v)` through
/// `knots = [(time_ahead, position), ...]` (strictly increasing times ahead).
pub fn min_energy_acceleration(x: f64, v: f64, knots: &[(f64, f64)]) -> Result<f64> {
    let m = knots.len();
    if m == 0 {
        return Err(Error::Domain("need at least one pin ahead".into()));
    }
    let mut gaps = Vec::with_capacity(m);
    let mut prev = 0.0;
    for &(tau, _) in knots {
        let h = tau - prev;
        if !(h > 0.0) {
            return Err(Error::Domain(format!(
                "pin times ahead must be strictly increasing and positive, got gap {h}"
            )));
        }
        gaps.push(h);
        prev = tau;
    }
    let vals: Vec<f64> = std::iter::once(x).chain(knots.iter().map(|k| k.1)).collect();

    // Unknown second derivatives M_0 .. M_{m-1}; M_m = 0 (natural end).
    let mut sub = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut sup = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    diag[0] = 2.0 * gaps[0];
    if m > 1 {
        sup[0] = gaps[0];
    }
    rhs[0] = 6.0 * ((vals[1] - vals[0]) / gaps[0] - v);
    for i in 1..m {
        sub[i] = gaps[i - 1];
        diag[i] = 2.0 * (gaps[i - 1] + gaps[i]);
        if i + 1 < m {
            sup[i] = gaps[i];
        }
        rhs[i] = 6.0 * ((vals[i + 1] - vals[i]) / gaps[i] - (vals[i] - vals[i - 1]) / gaps[i - 1]);
    }
    let sol = solve_tridiagonal(&sub, &diag, &sup, &rhs);
    Ok(sol[0])
}

fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let w = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / w;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / w;
    }
    let mut out = vec![0.0; n];
    out[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        out[i] = d[i] - c[i] * out[i + 1];
    }
    out
}

/// Exact `c = 0` bridge on an arbitrary (possibly non-uniform) time axis.
#[derive(Debug, Clone)]
pub struct LimitBridge {
    times: Vec<f64>,
    truncation: Option<usize>,
}

impl LimitBridge {
    pub fn new(times: &[f64], truncation: Option<usize>) -> Result<Self> {
        crate::schedule::normalize_schedule(times)?;
        if truncation == Some(0) {
            return Err(Error::Domain("truncation_k must be at least 1".into()));
        }
        Ok(LimitBridge {
            times: times.to_vec(),
            truncation,
        })
    }

    /// Acceleration of coordinate-wise scalar bridges; `pins` holds one point per time.
    pub fn accelerate(&self, t: f64, x: &[f64], v: &[f64], pins: &[Vec<f64>]) -> Result<Vec<f64>> {
        let first_ahead = self
            .times
            .iter()
            .position(|&tn| tn > t)
            .ok_or_else(|| Error::Domain(format!("t = {t} at or beyond the final pin")))?;
        let mut last = self.times.len();
        if let Some(k) = self.truncation {
            last = last.min(first_ahead + k);
        }
        (0..x.len())
            .map(|k| {
                let knots: Vec<(f64, f64)> = (first_ahead..last)
                    .map(|j| (self.times[j] - t, pins[j][k]))
                    .collect();
                min_energy_acceleration(x[k], v[k], &knots)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pin_is_the_cubic_bridge() {
        let a = min_energy_acceleration(0.2, -0.5, &[(0.5, 1.0)]).unwrap();
        let expected = 3.0 / 0.25 * (1.0 - 0.2) - 3.0 / 0.5 * -0.5;
        assert!((a - expected).abs() < 1e-12);
    }

    #[test]
    fn two_pins_from_rest() {
        // From rest at 0 through 0 at t = 1 and 1 at t = 2: a(0) = -6/7.
        let a = min_energy_acceleration(0.0, 0.0, &[(1.0, 0.0), (2.0, 1.0)]).unwrap();
        assert!((a + 6.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn straight_line_needs_no_acceleration() {
        let knots: Vec<(f64, f64)> = (1..6).map(|i| (i as f64 * 0.7, 2.0 + 0.7 * i as f64)).collect();
        let a = min_energy_acceleration(2.0, 1.0, &knots).unwrap();
        assert!(a.abs() < 1e-12);
    }

    #[test]
    fn rejects_unordered_knots() {
        assert!(min_energy_acceleration(0.0, 0.0, &[(1.0, 0.0), (1.0, 1.0)]).is_err());
        assert!(min_energy_acceleration(0.0, 0.0, &[]).is_err());
    }
}
