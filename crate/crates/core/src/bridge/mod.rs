//! Closed-form multi-marginal momentum bridges.
//!
//! The state is a phase-space pair `m = [x, v]` driven by
//!
//! ```text
//! dx = v dt,    dv = a dt + σ dW
//! ```
//!
//! Conditioned on pinned positions `x̄_{n+1}, ..., x̄_N` at unit-spaced times,
//! the optimal acceleration inside segment `n` (`t ∈ [n, n+1)`) is
//!
//! ```text
//! a*(t, x, v) = C1(t) (x - x̄_{n+1}) + C2(t) v + C3(t) Σ_j λ_j x̄_j
//! ```
//!
//! with `C1..C3` rational in `s = t - t_{n+1}` and parameterized by a pair
//! `(α, β)`, and static weights `λ` that depend only on how many pins lie
//! ahead of the segment. Both are memoized per horizon depth.
//!
//! The [`oracle`] module solves the soft-constraint Riccati problem at finite
//! `c` and the [`limit`] module solves the `c = 0` minimum-energy problem
//! directly; both are independent of the closed forms here.

pub mod limit;
pub mod oracle;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::SnapshotSchedule;

pub use limit::{min_energy_acceleration, LimitBridge};
pub use oracle::{FiniteCOracle, OracleIntegrator};

/// Distance kept from the next pinned time when evaluating C-functions, per unit segment.
pub const EPS_PIN: f64 = 1e-3;

const DENOMINATOR_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhaseState {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if x.len() != v.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                found: v.len(),
            });
        }
        if x.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(Error::Domain("phase state has non-finite entries".into()));
        }
        Ok(PhaseState { x, v })
    }

    pub fn at_rest(x: Vec<f64>) -> Self {
        let v = vec![0.0; x.len()];
        PhaseState { x, v }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// One pinned position per marginal, `x̄_0 .. x̄_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedSet {
    points: Vec<Vec<f64>>,
}

impl PinnedSet {
    pub fn new(schedule: &SnapshotSchedule, points: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() != schedule.num_marginals() {
            return Err(Error::Domain(format!(
                "pinned set has {} points but the schedule has {} marginals",
                points.len(),
                schedule.num_marginals()
            )));
        }
        Self::from_points(points)
    }

    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Domain("a pinned set needs at least two points".into()));
        }
        let d = points[0].len();
        if d == 0 {
            return Err(Error::Domain("pinned points must have dimension >= 1".into()));
        }
        for p in &points {
            if p.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: p.len(),
                });
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::Domain("pinned point has non-finite entries".into()));
            }
        }
        Ok(PinnedSet { points })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, n: usize) -> &[f64] {
        &self.points[n]
    }

    pub fn num_segments(&self) -> usize {
        self.points.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Pins in reverse order, for the time-reversed problem.
    pub fn reversed(&self) -> Self {
        PinnedSet {
            points: self.points.iter().rev().cloned().collect(),
        }
    }

    /// Scalar pinned values of one coordinate.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.points.iter().map(|p| p[k]).collect()
    }
}

/// `(α, β)` and `λ` for a segment with `num_future` pins ahead of it.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonCoefficients {
    pub num_future: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCoefficients {
    pub segment: usize,
    pub horizon: Arc<HorizonCoefficients>,
}

impl SegmentCoefficients {
    pub fn new(segment: usize, num_future: usize) -> Result<Self> {
        Ok(SegmentCoefficients {
            segment,
            horizon: horizon_coefficients(num_future)?,
        })
    }

    pub fn num_future(&self) -> usize {
        self.horizon.num_future
    }

    pub fn alpha(&self) -> f64 {
        self.horizon.alpha
    }

    pub fn beta(&self) -> f64 {
        self.horizon.beta
    }

    pub fn lambda(&self) -> &[f64] {
        &self.horizon.lambda
    }

    /// Weight of the next pin, `κ = λ_{n+1}`.
    pub fn kappa(&self) -> f64 {
        self.horizon.lambda[0]
    }

    /// Normalized time of the next pin.
    pub fn next_pin(&self) -> f64 {
        (self.segment + 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CFunctions {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftConstraintConfig {
    /// Soft-constraint scale; the pinned cost is `R = diag(1/c, c)`.
    pub c: f64,
    pub sigma: f64,
    pub ode_steps: usize,
}

impl Default for SoftConstraintConfig {
    fn default() -> Self {
        SoftConstraintConfig {
            c: 1e-6,
            sigma: 1.0,
            ode_steps: 10_000,
        }
    }
}

/// `z_1 .. z_8` of segment `segment` at normalized time `t` (index 0 holds `z_1`).
pub fn z_functions(segment: usize, t: f64) -> [f64; 8] {
    z_of_offset(t - (segment + 1) as f64)
}

fn z_of_offset(s: f64) -> [f64; 8] {
    [
        3.0 * s - 3.0,
        3.0 * s - 4.0,
        6.0 * s - 3.0,
        6.0 * s - 4.0,
        4.0 * s - 3.0,
        4.0 * s - 4.0,
        6.0 * s + 3.0,
        6.0 * s + 4.0,
    ]
}

/// Shape coefficients of a segment with `num_future` pins ahead.
///
/// The last segment is `(-1, 1)`, for which the generic C-functions collapse
/// to the two-point bridge; earlier segments follow
/// `α ← 4(α + β)`, `β ← 3α + 4β`.
pub fn segment_alpha_beta(num_future: usize) -> Result<(f64, f64)> {
    if num_future < 1 {
        return Err(Error::Domain("num_future must be at least 1".into()));
    }
    let (mut alpha, mut beta) = (-1.0_f64, 1.0_f64);
    for _ in 1..num_future {
        let next = (4.0 * (alpha + beta), 3.0 * alpha + 4.0 * beta);
        alpha = next.0;
        beta = next.1;
    }
    Ok((alpha, beta))
}

fn c_functions_at_offset(alpha: f64, beta: f64, s: f64) -> Result<CFunctions> {
    let z = z_of_offset(s);
    let denom = alpha * z[0] + beta * z[1];
    if denom.abs() < DENOMINATOR_GUARD || s.abs() < DENOMINATOR_GUARD {
        return Err(Error::Numerical(format!(
            "C-function denominator vanished at offset s = {s} (alpha = {alpha}, beta = {beta})"
        )));
    }
    Ok(CFunctions {
        c1: -3.0 * (alpha * z[2] + beta * z[3]) / (s * s * denom),
        c2: 3.0 * (alpha * z[4] + beta * z[5]) / (s * denom),
        c3: 6.0 * (alpha + beta) / denom,
    })
}

/// Time-varying bridge coefficients of `coeffs.segment` at normalized time `t`.
pub fn c_functions(coeffs: &SegmentCoefficients, t: f64) -> Result<CFunctions> {
    let start = coeffs.segment as f64;
    let next = coeffs.next_pin();
    if !(start..next).contains(&t) {
        return Err(Error::Domain(format!(
            "t = {t} outside segment [{start}, {next})"
        )));
    }
    if coeffs.num_future() == 1 {
        let remaining = next - t;
        if remaining < DENOMINATOR_GUARD {
            return Err(Error::Numerical(format!("last segment singular at t = {t}")));
        }
        return Ok(CFunctions {
            c1: -3.0 / (remaining * remaining),
            c2: -3.0 / remaining,
            c3: 0.0,
        });
    }
    c_functions_at_offset(coeffs.alpha(), coeffs.beta(), t - next)
}

/// Static weights `λ_{n+1} .. λ_N` of a segment with `num_future` pins ahead.
pub fn lambda_vector(num_future: usize) -> Result<Vec<f64>> {
    Ok(horizon_coefficients(num_future)?.lambda.clone())
}

fn memo() -> &'static Mutex<HashMap<usize, Arc<HorizonCoefficients>>> {
    static MEMO: OnceLock<Mutex<HashMap<usize, Arc<HorizonCoefficients>>>> = OnceLock::new();
    MEMO.get_or_init(|| Mutex::new(HashMap::new()))
}

pub fn horizon_coefficients(num_future: usize) -> Result<Arc<HorizonCoefficients>> {
    if num_future < 1 {
        return Err(Error::Domain("num_future must be at least 1".into()));
    }
    if let Some(h) = memo().lock().expect("coefficient memo poisoned").get(&num_future) {
        return Ok(h.clone());
    }
    let (alpha, beta) = segment_alpha_beta(num_future)?;
    let lambda = probe_lambda(num_future, alpha, beta)?;
    let h = Arc::new(HorizonCoefficients {
        num_future,
        alpha,
        beta,
        lambda,
    });
    memo()
        .lock()
        .expect("coefficient memo poisoned")
        .insert(num_future, h.clone());
    Ok(h)
}

/// Reads `λ` off the `c = 0` bridge: the acceleration is linear in the pins, so
/// with `x = v = 0` and a single unit pin `j`, it equals `C3 λ_j` (minus `C1`
/// for the next pin). Probed at two offsets to confirm the weights are static.
fn probe_lambda(num_future: usize, alpha: f64, beta: f64) -> Result<Vec<f64>> {
    if num_future == 1 {
        return Ok(vec![0.0]);
    }
    let read = |s: f64| -> Result<Vec<f64>> {
        let cf = c_functions_at_offset(alpha, beta, s)?;
        let ahead = -s;
        (0..num_future)
            .map(|j| {
                let knots: Vec<(f64, f64)> = (0..num_future)
                    .map(|i| (ahead + i as f64, if i == j { 1.0 } else { 0.0 }))
                    .collect();
                let a = min_energy_acceleration(0.0, 0.0, &knots)?;
                let shift = if j == 0 { cf.c1 } else { 0.0 };
                Ok((a + shift) / cf.c3)
            })
            .collect()
    };
    let at_start = read(-1.0)?;
    let at_mid = read(-0.5)?;
    for (j, (a, b)) in at_start.iter().zip(&at_mid).enumerate() {
        if (a - b).abs() > 1e-9 * (1.0 + a.abs()) || !a.is_finite() {
            return Err(Error::Numerical(format!(
                "lambda probe for num_future = {num_future} is not static at entry {j}: {a} vs {b}"
            )));
        }
    }
    Ok(at_start)
}

/// Conditional bridge drift for a schedule of `N` unit segments, optionally
/// truncated to the next `k` pins.
#[derive(Debug, Clone)]
pub struct ConditionalBridge {
    segments: Vec<SegmentCoefficients>,
    truncation: Option<usize>,
    eps_pin: f64,
}

impl ConditionalBridge {
    pub fn new(num_segments: usize, truncation: Option<usize>) -> Result<Self> {
        Self::with_eps(num_segments, truncation, EPS_PIN)
    }

    pub fn with_eps(num_segments: usize, truncation: Option<usize>, eps_pin: f64) -> Result<Self> {
        if num_segments < 1 {
            return Err(Error::Domain("a bridge needs at least one segment".into()));
        }
        if truncation == Some(0) {
            return Err(Error::Domain("truncation_k must be at least 1".into()));
        }
        if !(eps_pin > 0.0 && eps_pin < 0.5) {
            return Err(Error::Domain(format!("eps_pin = {eps_pin} out of (0, 0.5)")));
        }
        let segments = (0..num_segments)
            .map(|n| {
                let ahead = num_segments - n;
                let nf = truncation.map_or(ahead, |k| k.min(ahead));
                SegmentCoefficients::new(n, nf)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConditionalBridge {
            segments,
            truncation,
            eps_pin,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn truncation(&self) -> Option<usize> {
        self.truncation
    }

    pub fn eps_pin(&self) -> f64 {
        self.eps_pin
    }

    pub fn segment(&self, n: usize) -> &SegmentCoefficients {
        &self.segments[n]
    }

    pub fn segment_of(&self, t: f64) -> usize {
        if t <= 0.0 {
            0
        } else {
            (t.floor() as usize).min(self.segments.len() - 1)
        }
    }

    /// C-functions at `t` with `t` clamped to `t_{n+1} - eps_pin`.
    pub fn coefficients_at(&self, t: f64) -> (usize, CFunctions) {
        self.coefficients_clamped(t, self.eps_pin)
    }

    /// C-functions with `t` clamped to `t_{n+1} - eps`.
    pub fn coefficients_clamped(&self, t: f64, eps: f64) -> (usize, CFunctions) {
        let n = self.segment_of(t);
        let seg = &self.segments[n];
        let t = t.max(n as f64).min(seg.next_pin() - eps);
        let cf = c_functions(seg, t).expect("clamped time is inside the segment");
        (n, cf)
    }

    /// Unclamped C-functions; fails at the pinned times themselves.
    pub fn coefficients_exact(&self, t: f64) -> Result<(usize, CFunctions)> {
        let n = self.segment_of(t);
        Ok((n, c_functions(&self.segments[n], t)?))
    }

    /// Writes `a*(t, x, v)` into `out`. `pins` must hold `N + 1` points of the state dimension.
    pub fn accelerate(&self, t: f64, x: &[f64], v: &[f64], pins: &[Vec<f64>], out: &mut [f64]) {
        let (n, cf) = self.coefficients_at(t);
        self.apply(n, cf, x, v, pins, out);
    }

    pub(crate) fn apply(
        &self,
        n: usize,
        cf: CFunctions,
        x: &[f64],
        v: &[f64],
        pins: &[Vec<f64>],
        out: &mut [f64],
    ) {
        let lambda = self.segments[n].lambda();
        let next = &pins[n + 1];
        for k in 0..x.len() {
            let mut pull = 0.0;
            for (j, l) in lambda.iter().enumerate() {
                pull += l * pins[n + 1 + j][k];
            }
            out[k] = cf.c1 * (x[k] - next[k]) + cf.c2 * v[k] + cf.c3 * pull;
        }
    }

    /// Scalar forcing of the velocity equation, `-C1 x̄_{n+1} + C3 Σ λ_j x̄_j`.
    pub(crate) fn forcing(&self, n: usize, cf: CFunctions, pins: &[f64]) -> f64 {
        let lambda = self.segments[n].lambda();
        let pull: f64 = lambda
            .iter()
            .enumerate()
            .map(|(j, l)| l * pins[n + 1 + j])
            .sum();
        -cf.c1 * pins[n + 1] + cf.c3 * pull
    }
}

/// Optimal conditional acceleration at `(t, m)` given the pins ahead of `t`.
pub fn conditional_acceleration(
    t: f64,
    m: &PhaseState,
    pinned: &PinnedSet,
    truncation: Option<usize>,
) -> Result<Vec<f64>> {
    let horizon = pinned.num_segments() as f64;
    if !(0.0..horizon).contains(&t) {
        return Err(Error::Domain(format!(
            "t = {t} outside [0, {horizon}); the bridge ends at the final pin"
        )));
    }
    if m.dim() != pinned.dim() {
        return Err(Error::Dimension {
            expected: pinned.dim(),
            found: m.dim(),
        });
    }
    let bridge = ConditionalBridge::new(pinned.num_segments(), truncation)?;
    let mut out = vec![0.0; m.dim()];
    bridge.accelerate(t, &m.x, &m.v, pinned.points(), &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn z_functions_at_pin() {
        let z = z_functions(0, 1.0);
        assert_eq!((z[0], z[1], z[6], z[7]), (-3.0, -4.0, 3.0, 4.0));
        assert_eq!(z_functions(1, 1.0)[2], -9.0);
        assert_eq!(z_functions(0, 0.0)[3], -10.0);
    }

    #[test]
    fn alpha_beta_recursion() {
        assert_eq!(segment_alpha_beta(1).unwrap(), (-1.0, 1.0));
        assert_eq!(segment_alpha_beta(2).unwrap(), (0.0, 1.0));
        assert_eq!(segment_alpha_beta(3).unwrap(), (4.0, 4.0));
        // Oracle-consistent ordering; the 5-marginal pair is printed swapped as (28, 32).
        assert_eq!(segment_alpha_beta(4).unwrap(), (32.0, 28.0));
        assert_eq!(segment_alpha_beta(5).unwrap(), (240.0, 208.0));
        assert!(segment_alpha_beta(0).is_err());
    }

    #[test]
    fn published_lambdas() {
        assert_eq!(lambda_vector(1).unwrap(), vec![0.0]);
        let l2 = lambda_vector(2).unwrap();
        assert!(close(l2[0], -1.0, 1e-12) && close(l2[1], 1.0, 1e-12));
        let l3 = lambda_vector(3).unwrap();
        for (a, b) in l3.iter().zip([-1.25, 1.5, -0.25]) {
            assert!(close(*a, b, 1e-12), "{l3:?}");
        }
        let l4 = lambda_vector(4).unwrap();
        for (a, b) in l4.iter().zip([-1.267, 1.6, -0.4, 0.067]) {
            assert!(close(*a, b, 1e-3), "{l4:?}");
        }
        for (a, b) in l4.iter().zip([-19.0 / 15.0, 1.6, -0.4, 1.0 / 15.0]) {
            assert!(close(*a, b, 1e-12), "{l4:?}");
        }
    }

    #[test]
    fn lambdas_sum_to_zero_beyond_last_segment() {
        // A constant shift of every pin must not change the relative pull.
        for nf in 2..12 {
            let s: f64 = lambda_vector(nf).unwrap().iter().sum();
            assert!(s.abs() < 1e-10, "nf = {nf}: {s}");
        }
    }

    #[test]
    fn lambda_decay_for_long_horizon() {
        let l = lambda_vector(10).unwrap();
        for j in 1..l.len() - 1 {
            assert!(l[j].abs() > l[j + 1].abs(), "{l:?}");
        }
    }

    #[test]
    fn main_text_three_marginal_first_segment() {
        let seg = SegmentCoefficients::new(0, 2).unwrap();
        let cf = c_functions(&seg, 0.0).unwrap();
        assert!(close(cf.c1, -30.0 / 7.0, 1e-14));
        assert!(close(cf.c2, -24.0 / 7.0, 1e-14));
        assert!(close(cf.c3, -6.0 / 7.0, 1e-14));
    }

    #[test]
    fn last_segment_closed_form() {
        let seg = SegmentCoefficients::new(3, 1).unwrap();
        let cf = c_functions(&seg, 3.0).unwrap();
        assert_eq!((cf.c1, cf.c2, cf.c3), (-3.0, -3.0, 0.0));
        // The generic z-function forms with (alpha, beta) = (-1, 1) agree.
        let generic = c_functions_at_offset(-1.0, 1.0, -0.3).unwrap();
        let dedicated = c_functions(&seg, 3.7).unwrap();
        assert!(close(generic.c1, dedicated.c1, 1e-12));
        assert!(close(generic.c2, dedicated.c2, 1e-12));
        assert!(close(generic.c3, 0.0, 1e-12));
    }

    #[test]
    fn two_marginal_acceleration() {
        let pins = PinnedSet::from_points(vec![vec![0.0], vec![1.0]]).unwrap();
        let a = conditional_acceleration(0.0, &PhaseState::at_rest(vec![0.0]), &pins, None).unwrap();
        assert!(close(a[0], 3.0, 1e-14));
    }

    #[test]
    fn at_rest_on_target_has_zero_acceleration() {
        let pins = PinnedSet::from_points(vec![vec![0.7, -0.2]; 4]).unwrap();
        for t in [0.1, 1.5, 2.2, 2.9] {
            let a = conditional_acceleration(t, &PhaseState::at_rest(vec![0.7, -0.2]), &pins, None).unwrap();
            assert!(a.iter().all(|c| c.abs() < 1e-9), "t = {t}: {a:?}");
        }
    }

    #[test]
    fn three_marginal_mid_segment_value() {
        let pins = PinnedSet::from_points(vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let a = conditional_acceleration(0.5, &PhaseState::at_rest(vec![0.0]), &pins, None).unwrap();
        let expected = (30.0 - 9.0) / (0.25 * -5.5) * (0.0 - 1.0) + 6.0 / -5.5 * (-1.0 + 2.0);
        assert!(close(a[0], expected, 1e-12));
        let knots = [(0.5, 1.0), (1.5, 2.0)];
        assert!(close(a[0], min_energy_acceleration(0.0, 0.0, &knots).unwrap(), 1e-12));
    }

    #[test]
    fn rejects_time_at_final_pin() {
        let pins = PinnedSet::from_points(vec![vec![0.0], vec![1.0]]).unwrap();
        assert!(conditional_acceleration(1.0, &PhaseState::at_rest(vec![0.0]), &pins, None).is_err());
        assert!(ConditionalBridge::new(2, Some(0)).is_err());
    }

    #[test]
    fn five_marginal_tail_matches_four_marginal() {
        let five = ConditionalBridge::new(4, None).unwrap();
        let four = ConditionalBridge::new(3, None).unwrap();
        for frac in [0.0, 0.3, 0.77] {
            for k in 0..3 {
                let (_, a) = five.coefficients_exact(1.0 + k as f64 + frac).unwrap();
                let (_, b) = four.coefficients_exact(k as f64 + frac).unwrap();
                assert!(close(a.c1, b.c1, 1e-12) && close(a.c2, b.c2, 1e-12) && close(a.c3, b.c3, 1e-12));
            }
        }
    }

    #[test]
    fn truncation_uses_shorter_horizon() {
        let full = ConditionalBridge::new(5, None).unwrap();
        let trunc = ConditionalBridge::new(5, Some(2)).unwrap();
        assert_eq!(full.segment(0).num_future(), 5);
        assert_eq!(trunc.segment(0).num_future(), 2);
        assert_eq!(trunc.segment(4).num_future(), 1);
    }

    proptest! {
        #[test]
        fn c_functions_are_scale_invariant(k in prop_oneof![-50.0..-0.1f64, 0.1..50.0f64], nf in 2usize..7, s in -1.0..-0.01f64) {
            let (a, b) = segment_alpha_beta(nf).unwrap();
            let base = c_functions_at_offset(a, b, s).unwrap();
            let scaled = c_functions_at_offset(k * a, k * b, s).unwrap();
            prop_assert!((base.c1 - scaled.c1).abs() <= 1e-9 * (1.0 + base.c1.abs()));
            prop_assert!((base.c2 - scaled.c2).abs() <= 1e-9 * (1.0 + base.c2.abs()));
            prop_assert!((base.c3 - scaled.c3).abs() <= 1e-9 * (1.0 + base.c3.abs()));
        }

        #[test]
        fn dimensions_decouple(
            t in 0.0..2.99f64,
            pts in proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, 3), 4),
            x in proptest::collection::vec(-2.0..2.0f64, 3),
            v in proptest::collection::vec(-2.0..2.0f64, 3),
        ) {
            let pins = PinnedSet::from_points(pts.clone()).unwrap();
            let full = conditional_acceleration(t, &PhaseState::new(x.clone(), v.clone()).unwrap(), &pins, None).unwrap();
            for k in 0..3 {
                let scalar_pins = PinnedSet::from_points(pts.iter().map(|p| vec![p[k]]).collect()).unwrap();
                let m = PhaseState::new(vec![x[k]], vec![v[k]]).unwrap();
                let a = conditional_acceleration(t, &m, &scalar_pins, None).unwrap();
                prop_assert_eq!(a[0], full[k]);
            }
        }
    }
}
