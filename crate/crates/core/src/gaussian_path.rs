//! Gaussian conditional paths of the pinned bridge.
//!
//! Under the bridge drift the phase state stays Gaussian. Per coordinate,
//!
//! ```text
//! dμx/dt = μv
//! dμv/dt = C1 μx + C2 μv - C1 x̄_{n+1} + C3 Σ_j λ_j x̄_j
//!
//! dΣxx/dt = 2 Σxv
//! dΣxv/dt = C1 Σxx + C2 Σxv + Σvv
//! dΣvv/dt = 2 C1 Σxv + 2 C2 Σvv + σ²
//! ```
//!
//! starting from the deterministic state `(x̄_0, v_0)`. The covariance never
//! looks at the pinned values, so it is integrated once per schedule (explicit
//! Euler) and shared; the mean is linear in `(x̄_0, .., x̄_N, v_0)`, so one RK4
//! solve per unit input gives a basis that serves every pinned set.
//!
//! The coefficients blow up like `1/(t - t_{n+1})²` at each pin, so steps are
//! graded geometrically towards the pin and each segment stops `PIN_GAP`
//! short of it; the stored value at a pinned grid time is the value reached
//! there.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::bridge::{ConditionalBridge, PhaseState, PinnedSet};
use crate::error::{Error, Result};

/// Default grid resolution per unit segment.
pub const DEFAULT_STEPS_PER_UNIT: usize = 1000;

const PIN_GAP: f64 = 1e-7;
const COV_GRADING: f64 = 2e-4;
const COV_START_GRADING: f64 = 1e-3;
const COV_START_STEP: f64 = 1e-12;
const MEAN_GRADING: f64 = 1e-2;
const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub num_segments: usize,
    pub steps_per_unit: usize,
}

impl TimeGrid {
    pub fn new(num_segments: usize, steps_per_unit: usize) -> Result<Self> {
        if num_segments == 0 || steps_per_unit == 0 {
            return Err(Error::Domain("time grid needs segments and steps".into()));
        }
        Ok(TimeGrid {
            num_segments,
            steps_per_unit,
        })
    }

    pub fn step(&self) -> f64 {
        1.0 / self.steps_per_unit as f64
    }

    pub fn len(&self) -> usize {
        self.num_segments * self.steps_per_unit + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps_per_unit as f64
    }

    pub fn horizon(&self) -> f64 {
        self.num_segments as f64
    }

    /// Lower grid index and interpolation weight for time `t`.
    fn locate(&self, t: f64) -> (usize, f64) {
        let pos = (t * self.steps_per_unit as f64).clamp(0.0, (self.len() - 1) as f64);
        let i = (pos.floor() as usize).min(self.len() - 2);
        (i, pos - i as f64)
    }
}

/// Advances a linear system from grid time `i` to `i + 1`, grading steps towards the next pin
/// and, when `start_grading` is set, away from the previous one.
fn graded_interval(
    grid: &TimeGrid,
    i: usize,
    grading: f64,
    start_grading: Option<f64>,
    mut step: impl FnMut(f64, f64),
) {
    let k = grid.steps_per_unit;
    let n = i / k;
    let pin = (n + 1) as f64;
    let start = grid.time(i);
    let end = if (i + 1) % k == 0 {
        pin - PIN_GAP
    } else {
        grid.time(i + 1)
    };
    let mut t = start;
    while t < end {
        let room = end - t;
        let mut dt = room.min(grading * (pin - t));
        if let Some(g) = start_grading {
            dt = dt.min(g * (t - n as f64) + COV_START_STEP);
        }
        let dt = if room - dt < 1e-15 { room } else { dt };
        step(t, dt);
        t += dt;
    }
}

/// Covariance `(Σxx, Σxv, Σvv)` and its Cholesky factor on a grid; shared by every coordinate.
#[derive(Debug, Clone)]
pub struct CovariancePath {
    grid: TimeGrid,
    sigma: f64,
    cov: Vec<[f64; 3]>,
    chol: Vec<[f64; 3]>,
}

impl CovariancePath {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self, i: usize) -> [f64; 3] {
        self.cov[i]
    }

    pub fn cholesky(&self, i: usize) -> [f64; 3] {
        self.chol[i]
    }

    /// Linearly interpolated Cholesky factor `(L_xx, L_xv, L_vv)` at `t`.
    pub fn cholesky_at(&self, t: f64) -> [f64; 3] {
        let (i, w) = self.grid.locate(t);
        let (a, b) = (self.chol[i], self.chol[i + 1]);
        [
            a[0] + w * (b[0] - a[0]),
            a[1] + w * (b[1] - a[1]),
            a[2] + w * (b[2] - a[2]),
        ]
    }

    pub fn covariance_at(&self, t: f64) -> [f64; 3] {
        let (i, w) = self.grid.locate(t);
        let (a, b) = (self.cov[i], self.cov[i + 1]);
        [
            a[0] + w * (b[0] - a[0]),
            a[1] + w * (b[1] - a[1]),
            a[2] + w * (b[2] - a[2]),
        ]
    }
}

/// Integrates the covariance ODEs with explicit Euler from `Σ(0) = 0`.
pub fn covariance_path(bridge: &ConditionalBridge, grid: TimeGrid, sigma: f64) -> Result<CovariancePath> {
    if grid.num_segments != bridge.num_segments() {
        return Err(Error::Domain("grid and bridge disagree on segment count".into()));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma = {sigma} must be finite and >= 0")));
    }
    let s2 = sigma * sigma;
    let mut cov = Vec::with_capacity(grid.len());
    let mut state = [0.0f64; 3];
    cov.push(state);
    let mut failure = None;
    for i in 0..grid.len() - 1 {
        graded_interval(&grid, i, COV_GRADING, Some(COV_START_GRADING), |t, dt| {
            let cf = match bridge.coefficients_exact(t) {
                Ok((_, cf)) => cf,
                Err(e) => {
                    failure.get_or_insert(e);
                    return;
                }
            };
            let [xx, xv, vv] = state;
            state = [
                xx + dt * 2.0 * xv,
                xv + dt * (cf.c1 * xx + cf.c2 * xv + vv),
                vv + dt * (2.0 * cf.c1 * xv + 2.0 * cf.c2 * vv + s2),
            ];
        });
        if let Some(e) = failure.take() {
            return Err(e);
        }
        cov.push(state);
    }
    let chol = cov
        .iter()
        .enumerate()
        .map(|(i, c)| cholesky2(c, grid.time(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CovariancePath {
        grid,
        sigma,
        cov,
        chol,
    })
}

fn cholesky2(c: &[f64; 3], t: f64) -> Result<[f64; 3]> {
    let [xx, xv, vv] = *c;
    let half_trace = 0.5 * (xx + vv);
    let min_eig = half_trace - (0.25 * (xx - vv) * (xx - vv) + xv * xv).sqrt();
    if min_eig < -PSD_TOLERANCE || !min_eig.is_finite() {
        return Err(Error::Numerical(format!(
            "covariance not positive semi-definite at t = {t}: min eigenvalue {min_eig:.3e}"
        )));
    }
    let lxx = xx.max(0.0).sqrt();
    let lxv = if lxx > 1e-150 { xv / lxx } else { 0.0 };
    let lvv = (vv - lxv * lxv).max(0.0).sqrt();
    Ok([lxx, lxv, lvv])
}

/// Mean of one scalar coordinate on the grid, from pins `pins[0..=N]` and initial velocity `v0`.
fn integrate_mean_scalar(bridge: &ConditionalBridge, grid: TimeGrid, pins: &[f64], v0: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mx = Vec::with_capacity(grid.len());
    let mut mv = Vec::with_capacity(grid.len());
    let (mut x, mut v) = (pins[0], v0);
    mx.push(x);
    mv.push(v);
    let rhs = |t: f64, x: f64, v: f64| -> (f64, f64) {
        let (n, cf) = bridge
            .coefficients_exact(t)
            .expect("graded steps stay strictly inside a segment");
        (v, cf.c1 * x + cf.c2 * v + bridge.forcing(n, cf, pins))
    };
    for i in 0..grid.len() - 1 {
        graded_interval(&grid, i, MEAN_GRADING, None, |t, dt| {
            let k1 = rhs(t, x, v);
            let k2 = rhs(t + dt / 2.0, x + dt / 2.0 * k1.0, v + dt / 2.0 * k1.1);
            let k3 = rhs(t + dt / 2.0, x + dt / 2.0 * k2.0, v + dt / 2.0 * k2.1);
            let k4 = rhs(t + dt, x + dt * k3.0, v + dt * k3.1);
            x += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            v += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        });
        mx.push(x);
        mv.push(v);
    }
    (mx, mv)
}

/// Mean trajectory of one pinned set, indexed `[grid][coordinate]`.
#[derive(Debug, Clone)]
pub struct MeanPath {
    pub grid: TimeGrid,
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl MeanPath {
    pub fn at(&self, t: f64) -> PhaseState {
        let (i, w) = self.grid.locate(t);
        let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(p, q)| p + w * (q - p)).collect()
        };
        PhaseState {
            x: lerp(&self.x[i], &self.x[i + 1]),
            v: lerp(&self.v[i], &self.v[i + 1]),
        }
    }
}

pub fn mean_path(bridge: &ConditionalBridge, pinned: &PinnedSet, v0: &[f64], grid: TimeGrid) -> Result<MeanPath> {
    check_inputs(bridge, pinned, v0, grid)?;
    let d = pinned.dim();
    let mut x = vec![vec![0.0; d]; grid.len()];
    let mut v = vec![vec![0.0; d]; grid.len()];
    for k in 0..d {
        let (mx, mv) = integrate_mean_scalar(bridge, grid, &pinned.coordinate(k), v0[k]);
        for i in 0..grid.len() {
            x[i][k] = mx[i];
            v[i][k] = mv[i];
        }
    }
    Ok(MeanPath { grid, x, v })
}

fn check_inputs(bridge: &ConditionalBridge, pinned: &PinnedSet, v0: &[f64], grid: TimeGrid) -> Result<()> {
    if pinned.num_segments() != bridge.num_segments() || grid.num_segments != bridge.num_segments() {
        return Err(Error::Domain("pinned set, grid and bridge disagree on segment count".into()));
    }
    if v0.len() != pinned.dim() {
        return Err(Error::Dimension {
            expected: pinned.dim(),
            found: v0.len(),
        });
    }
    if v0.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("initial velocity is not finite".into()));
    }
    Ok(())
}

/// Conditional Gaussian path of one pinned set: its mean plus the shared covariance.
#[derive(Debug, Clone)]
pub struct GaussianPath {
    pub mean: MeanPath,
    pub covariance: Arc<CovariancePath>,
}

impl GaussianPath {
    pub fn new(
        bridge: &ConditionalBridge,
        covariance: Arc<CovariancePath>,
        pinned: &PinnedSet,
        v0: &[f64],
    ) -> Result<Self> {
        let mean = mean_path(bridge, pinned, v0, covariance.grid())?;
        Ok(GaussianPath { mean, covariance })
    }
}

/// Draws `(x_t, v_t)`; `x = μx + L_xx ε0`, `v = μv + L_xv ε0 + L_vv ε1`.
pub fn sample_state<R: Rng + ?Sized>(t: f64, path: &GaussianPath, rng: &mut R) -> PhaseState {
    let mut m = path.mean.at(t);
    let l = path.covariance.cholesky_at(t);
    perturb(&mut m.x, &mut m.v, l, rng);
    m
}

fn perturb<R: Rng + ?Sized>(x: &mut [f64], v: &mut [f64], l: [f64; 3], rng: &mut R) {
    for k in 0..x.len() {
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        x[k] += l[0] * e0;
        v[k] += l[1] * e0 + l[2] * e1;
    }
}

/// Mean path basis for all pinned sets on one schedule: `μ(t) = W(t) [x̄_0 .. x̄_N, v_0]`.
#[derive(Debug, Clone)]
pub struct PathSampler {
    covariance: Arc<CovariancePath>,
    basis_x: Vec<Vec<f64>>,
    basis_v: Vec<Vec<f64>>,
    inputs: usize,
}

impl PathSampler {
    pub fn new(bridge: &ConditionalBridge, grid: TimeGrid, sigma: f64) -> Result<Self> {
        let covariance = Arc::new(covariance_path(bridge, grid, sigma)?);
        Self::with_covariance(bridge, covariance)
    }

    pub fn with_covariance(bridge: &ConditionalBridge, covariance: Arc<CovariancePath>) -> Result<Self> {
        let grid = covariance.grid();
        if grid.num_segments != bridge.num_segments() {
            return Err(Error::Domain("covariance grid and bridge disagree".into()));
        }
        let inputs = bridge.num_segments() + 2;
        let mut basis_x = vec![vec![0.0; inputs]; grid.len()];
        let mut basis_v = vec![vec![0.0; inputs]; grid.len()];
        for j in 0..inputs {
            let mut pins = vec![0.0; inputs - 1];
            let mut v0 = 0.0;
            if j + 1 < inputs {
                pins[j] = 1.0;
            } else {
                v0 = 1.0;
            }
            let (mx, mv) = integrate_mean_scalar(bridge, grid, &pins, v0);
            for i in 0..grid.len() {
                basis_x[i][j] = mx[i];
                basis_v[i][j] = mv[i];
            }
        }
        Ok(PathSampler {
            covariance,
            basis_x,
            basis_v,
            inputs,
        })
    }

    pub fn covariance(&self) -> &Arc<CovariancePath> {
        &self.covariance
    }

    pub fn grid(&self) -> TimeGrid {
        self.covariance.grid()
    }

    /// Mean state at `t` for the given pins and initial velocity.
    pub fn mean_at(&self, t: f64, pins: &[Vec<f64>], v0: &[f64]) -> PhaseState {
        let (i, w) = self.grid().locate(t);
        let d = v0.len();
        let mut x = vec![0.0; d];
        let mut v = vec![0.0; d];
        let weights = |b: &Vec<Vec<f64>>, j: usize| b[i][j] + w * (b[i + 1][j] - b[i][j]);
        for j in 0..self.inputs {
            let (wx, wv) = (weights(&self.basis_x, j), weights(&self.basis_v, j));
            let input: &[f64] = if j + 1 < self.inputs { &pins[j] } else { v0 };
            for k in 0..d {
                x[k] += wx * input[k];
                v[k] += wv * input[k];
            }
        }
        PhaseState { x, v }
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: f64, pins: &[Vec<f64>], v0: &[f64], rng: &mut R) -> PhaseState {
        let mut m = self.mean_at(t, pins, v0);
        let l = self.covariance.cholesky_at(t);
        perturb(&mut m.x, &mut m.v, l, rng);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, sigma: f64) -> (ConditionalBridge, TimeGrid, Arc<CovariancePath>) {
        let bridge = ConditionalBridge::new(n, None).unwrap();
        let grid = TimeGrid::new(n, 1000).unwrap();
        let cov = Arc::new(covariance_path(&bridge, grid, sigma).unwrap());
        (bridge, grid, cov)
    }

    #[test]
    fn equal_pins_at_rest_stay_put() {
        let (bridge, grid, _) = setup(3, 1.0);
        let pins = PinnedSet::from_points(vec![vec![0.4, -1.0]; 4]).unwrap();
        let m = mean_path(&bridge, &pins, &[0.0, 0.0], grid).unwrap();
        for i in (0..grid.len()).step_by(97) {
            assert!((m.x[i][0] - 0.4).abs() < 1e-12 && (m.x[i][1] + 1.0).abs() < 1e-12);
            assert!(m.v[i][0].abs() < 1e-12);
        }
    }

    #[test]
    fn mean_hits_pins() {
        let (bridge, grid, _) = setup(1, 1.0);
        let pins = PinnedSet::from_points(vec![vec![0.0], vec![1.0]]).unwrap();
        let m = mean_path(&bridge, &pins, &[1.5], grid).unwrap();
        assert!((m.x[grid.len() - 1][0] - 1.0).abs() < 5e-3);

        let (bridge, grid, _) = setup(2, 1.0);
        let pins = PinnedSet::from_points(vec![vec![0.0], vec![1.0], vec![-0.5]]).unwrap();
        let m = mean_path(&bridge, &pins, &[0.3], grid).unwrap();
        assert!((m.x[1000][0] - 1.0).abs() < 5e-3);
        assert!((m.x[2000][0] + 0.5).abs() < 5e-3);
    }

    #[test]
    fn zero_sigma_has_zero_covariance() {
        let (_, grid, cov) = setup(2, 0.0);
        for i in 0..grid.len() {
            assert_eq!(cov.covariance(i), [0.0; 3]);
        }
    }

    #[test]
    fn covariance_pinches_at_pins() {
        let (_, grid, cov) = setup(2, 1.0);
        for pin in [1000usize, 2000] {
            assert!(cov.covariance(pin)[0] <= 10.0 * crate::bridge::EPS_PIN);
            assert!(cov.covariance(pin - 1)[0] <= 10.0 * crate::bridge::EPS_PIN);
        }
        assert_eq!(cov.covariance(0), [0.0; 3]);
        assert!(cov.covariance(500)[0] > 1e-3, "{:?}", cov.covariance(500));
        let _ = grid;
    }

    #[test]
    fn cholesky_reproduces_covariance() {
        let (_, grid, cov) = setup(3, 0.7);
        for i in 0..grid.len() {
            let [xx, xv, vv] = cov.covariance(i);
            let [a, b, c] = cov.cholesky(i);
            if xx > 1e-12 {
                assert!((a * a - xx).abs() < 1e-10);
                assert!((a * b - xv).abs() < 1e-10);
                assert!((b * b + c * c - vv).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sampler_basis_matches_direct_mean() {
        let (bridge, grid, cov) = setup(3, 0.5);
        let sampler = PathSampler::with_covariance(&bridge, cov).unwrap();
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.5], vec![-0.3, 0.2], vec![0.8, -1.0]];
        let pins = PinnedSet::from_points(pts.clone()).unwrap();
        let m = mean_path(&bridge, &pins, &[0.2, -0.7], grid).unwrap();
        for t in [0.0, 0.37, 1.0, 1.5, 2.999, 3.0] {
            let a = sampler.mean_at(t, &pts, &[0.2, -0.7]);
            let b = m.at(t);
            for k in 0..2 {
                assert!((a.x[k] - b.x[k]).abs() < 1e-9 && (a.v[k] - b.v[k]).abs() < 1e-7, "{t} {a:?} {b:?}");
            }
        }
    }

    #[test]
    fn deterministic_start_and_noiseless_samples() {
        let (bridge, _, cov) = setup(2, 1.0);
        let pins = PinnedSet::from_points(vec![vec![0.5], vec![1.0], vec![0.0]]).unwrap();
        let path = GaussianPath::new(&bridge, cov, &pins, &[0.25]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_state(0.0, &path, &mut rng);
        assert_eq!((s.x[0], s.v[0]), (0.5, 0.25));

        let (bridge, _, cov0) = setup(2, 0.0);
        let path = GaussianPath::new(&bridge, cov0, &pins, &[0.25]).unwrap();
        let s = sample_state(0.7, &path, &mut rng);
        let m = path.mean.at(0.7);
        assert_eq!(s, m);
    }

    #[test]
    fn sample_mean_converges() {
        let (bridge, _, cov) = setup(2, 1.0);
        let pins = PinnedSet::from_points(vec![vec![0.0], vec![1.0], vec![0.0]]).unwrap();
        let path = GaussianPath::new(&bridge, cov.clone(), &pins, &[0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_state(0.5, &path, &mut rng).x[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - path.mean.at(0.5).x[0]).abs() < 3.0 * se);
    }

    #[test]
    fn covariance_ignores_pins() {
        let (bridge, grid, _) = setup(2, 0.8);
        let a = covariance_path(&bridge, grid, 0.8).unwrap();
        let b = covariance_path(&bridge, grid, 0.8).unwrap();
        for i in 0..grid.len() {
            assert_eq!(a.covariance(i), b.covariance(i));
        }
    }
}
