//! Euler-Maruyama simulation of the phase-space SDE and the velocity
//! refinement / coupling refresh sweeps of the training loop.
//!
//! Every path owns a ChaCha stream seeded up front, so results do not depend
//! on how paths are chunked across worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bridge::{ConditionalBridge, PhaseState, PinnedSet};
use crate::error::{Error, Result};
use crate::gaussian_path::TimeGrid;

const CHUNK: usize = 32;

/// Acceleration field evaluated on a block of paths.
///
/// `x`, `v` and `out` are row-major `rows × dim`; `offset` is the batch index
/// of the first row, for drifts that carry per-path data.
pub trait Drift: Sync {
    fn dim(&self) -> usize;
    fn accelerate(&self, t: f64, offset: usize, x: &[f64], v: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroDrift(pub usize);

impl Drift for ZeroDrift {
    fn dim(&self) -> usize {
        self.0
    }

    fn accelerate(&self, _: f64, _: usize, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Wraps a per-state closure `f(t, x, v, out)`.
pub struct FnDrift<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> Drift for FnDrift<F>
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn accelerate(&self, t: f64, _: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for ((xr, vr), o) in x.chunks(d).zip(v.chunks(d)).zip(out.chunks_mut(d)) {
            (self.f)(t, xr, vr, o);
        }
    }
}

/// Conditional bridge drift with one pinned set per path.
///
/// Explicit steps only ever evaluate the drift at grid times, at least one
/// step `h` before a pin, so the clamp is `min(eps_pin, h)`: a clamp wider
/// than a step freezes the stiff coefficients over several steps and kicks
/// the velocity at every pin.
pub struct BridgeDrift<'a> {
    bridge: &'a ConditionalBridge,
    pins: &'a [PinnedSet],
    clamp: f64,
}

impl<'a> BridgeDrift<'a> {
    pub fn new(bridge: &'a ConditionalBridge, pins: &'a [PinnedSet], grid: TimeGrid) -> Self {
        BridgeDrift {
            bridge,
            pins,
            clamp: bridge.eps_pin().min(grid.step()),
        }
    }
}

impl Drift for BridgeDrift<'_> {
    fn dim(&self) -> usize {
        self.pins.first().map_or(0, |p| p.dim())
    }

    fn accelerate(&self, t: f64, offset: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let (n, cf) = self.bridge.coefficients_clamped(t, self.clamp);
        for (r, ((xr, vr), o)) in x.chunks(d).zip(v.chunks(d)).zip(out.chunks_mut(d)).enumerate() {
            self.bridge.apply(n, cf, xr, vr, self.pins[offset + r].points(), o);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
    /// Position in `times`/`states` of each pinned time `n`.
    pub snapshot_indices: Vec<usize>,
}

impl Trajectory {
    pub fn snapshot(&self, n: usize) -> &PhaseState {
        &self.states[self.snapshot_indices[n]]
    }

    pub fn last(&self) -> &PhaseState {
        self.states.last().expect("trajectories are never empty")
    }
}

/// Which grid states a batch simulation keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Full,
    Snapshots,
    Final,
    /// Sorted grid indices.
    Indices(Vec<usize>),
}

/// Single-path Euler-Maruyama: `x += v h`, `v += a h + σ √h ξ`.
pub fn euler_maruyama<R: Rng + ?Sized>(
    drift: &dyn Drift,
    m0: &PhaseState,
    grid: TimeGrid,
    sigma: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let seed = rng.random::<u64>();
    let mut out = simulate_batch(drift, std::slice::from_ref(m0), grid, sigma, &[seed], Record::Full)?;
    Ok(out.pop().expect("one path in, one path out"))
}

/// One stream seed per path, drawn in order from `rng`.
pub fn path_seeds<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}

/// Simulates every start state on `grid`, keeping the states selected by `record`.
pub fn simulate_batch(
    drift: &dyn Drift,
    starts: &[PhaseState],
    grid: TimeGrid,
    sigma: f64,
    seeds: &[u64],
    record: Record,
) -> Result<Vec<Trajectory>> {
    if seeds.len() != starts.len() {
        return Err(Error::Domain("one seed per path is required".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma = {sigma} must be finite and >= 0")));
    }
    let d = drift.dim();
    if let Some(bad) = starts.iter().find(|m| m.dim() != d) {
        return Err(Error::Dimension {
            expected: d,
            found: bad.dim(),
        });
    }
    let chunks: Vec<Result<Vec<Trajectory>>> = starts
        .par_chunks(CHUNK)
        .zip(seeds.par_chunks(CHUNK))
        .enumerate()
        .map(|(c, (block, seeds))| simulate_block(drift, c * CHUNK, block, seeds, grid, sigma, record.clone()))
        .collect();
    let mut out = Vec::with_capacity(starts.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn simulate_block(
    drift: &dyn Drift,
    offset: usize,
    starts: &[PhaseState],
    seeds: &[u64],
    grid: TimeGrid,
    sigma: f64,
    record: Record,
) -> Result<Vec<Trajectory>> {
    let d = drift.dim();
    let rows = starts.len();
    let h = grid.step();
    let noise = sigma * h.sqrt();
    let k = grid.steps_per_unit;
    let steps = grid.len() - 1;

    let mut x: Vec<f64> = starts.iter().flat_map(|m| m.x.iter().copied()).collect();
    let mut v: Vec<f64> = starts.iter().flat_map(|m| m.v.iter().copied()).collect();
    let mut a = vec![0.0; rows * d];
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();

    let keep = |i: usize| match &record {
        Record::Full => true,
        Record::Snapshots => i % k == 0,
        Record::Final => i == steps,
        Record::Indices(idx) => idx.binary_search(&i).is_ok(),
    };
    let is_final = record == Record::Final;
    let mut times = Vec::new();
    let mut snapshot_indices = Vec::new();
    let mut states: Vec<Vec<PhaseState>> = vec![Vec::new(); rows];
    let mut push = |i: usize, x: &[f64], v: &[f64], times: &mut Vec<f64>, states: &mut Vec<Vec<PhaseState>>| {
        if i % k == 0 && !is_final {
            snapshot_indices.push(times.len());
        }
        times.push(grid.time(i));
        for r in 0..rows {
            states[r].push(PhaseState {
                x: x[r * d..(r + 1) * d].to_vec(),
                v: v[r * d..(r + 1) * d].to_vec(),
            });
        }
    };
    if keep(0) {
        push(0, &x, &v, &mut times, &mut states);
    }
    for i in 0..steps {
        let t = grid.time(i);
        drift.accelerate(t, offset, &x, &v, &mut a);
        for r in 0..rows {
            let rng = &mut rngs[r];
            for j in r * d..(r + 1) * d {
                x[j] += v[j] * h;
                let xi: f64 = if noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                v[j] += a[j] * h + noise * xi;
            }
        }
        if let Some(j) = x.iter().chain(&v).position(|c| !c.is_finite()) {
            return Err(Error::Simulation {
                t: grid.time(i + 1),
                reason: format!("non-finite state in path {}", offset + (j % (rows * d)) / d),
            });
        }
        if keep(i + 1) {
            push(i + 1, &x, &v, &mut times, &mut states);
        }
    }
    Ok(states
        .into_iter()
        .map(|states| Trajectory {
            times: times.clone(),
            states,
            snapshot_indices: snapshot_indices.clone(),
        })
        .collect())
}

/// Alternating forward/backward bridge sweeps that estimate snapshot velocities.
///
/// The backward pass runs the forward bridge on the reversed problem: pins in
/// reverse order, starting from `(x̄_N, -v_N)`, and negates the velocity it ends with.
/// Returns `(v_0, v_N)` per pinned set after the last round.
pub fn refine_velocities<R: Rng + ?Sized>(
    bridge: &ConditionalBridge,
    pinned: &[PinnedSet],
    v0_init: &[Vec<f64>],
    rounds: usize,
    sigma: f64,
    steps_per_unit: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if rounds == 0 {
        return Err(Error::Domain("refinement needs at least one round".into()));
    }
    if pinned.len() != v0_init.len() {
        return Err(Error::Domain("one initial velocity per pinned set".into()));
    }
    let n = bridge.num_segments();
    let grid = TimeGrid::new(n, steps_per_unit)?;
    let reversed: Vec<PinnedSet> = pinned.iter().map(PinnedSet::reversed).collect();
    let forward = BridgeDrift::new(bridge, pinned, grid);
    let backward = BridgeDrift::new(bridge, &reversed, grid);

    let mut v0: Vec<Vec<f64>> = v0_init.to_vec();
    let mut vn: Vec<Vec<f64>> = Vec::new();
    for _ in 0..rounds {
        let starts: Vec<PhaseState> = pinned
            .iter()
            .zip(&v0)
            .map(|(p, v)| PhaseState { x: p.point(0).to_vec(), v: v.clone() })
            .collect();
        let seeds = path_seeds(rng, starts.len());
        let fwd = simulate_batch(&forward, &starts, grid, sigma, &seeds, Record::Final)?;
        vn = fwd.iter().map(|tr| tr.last().v.clone()).collect();

        let starts: Vec<PhaseState> = pinned
            .iter()
            .zip(&vn)
            .map(|(p, v)| PhaseState {
                x: p.point(n).to_vec(),
                v: v.iter().map(|c| -c).collect(),
            })
            .collect();
        let seeds = path_seeds(rng, starts.len());
        let bwd = simulate_batch(&backward, &starts, grid, sigma, &seeds, Record::Final)?;
        v0 = bwd.iter().map(|tr| tr.last().v.iter().map(|c| -c).collect()).collect();
    }
    Ok((v0, vn))
}

/// Simulates `drift` from each `(x_0, v_0)` and records positions at the pinned times.
pub fn refresh_coupling(
    drift: &dyn Drift,
    x0: &[Vec<f64>],
    v0: &[Vec<f64>],
    grid: TimeGrid,
    sigma: f64,
    seeds: &[u64],
) -> Result<Vec<PinnedSet>> {
    if x0.len() != v0.len() {
        return Err(Error::Domain("x0 and v0 ensembles differ in size".into()));
    }
    let starts: Vec<PhaseState> = x0
        .iter()
        .zip(v0)
        .map(|(x, v)| PhaseState::new(x.clone(), v.clone()))
        .collect::<Result<_>>()?;
    let trajs = simulate_batch(drift, &starts, grid, sigma, seeds, Record::Snapshots)?;
    trajs
        .into_iter()
        .map(|tr| PinnedSet::from_points(tr.states.into_iter().map(|m| m.x).collect()))
        .collect()
}

/// Replaces every refreshed position after the first by its nearest data sample at that time.
pub fn anchor_to_data(coupling: &mut [PinnedSet], marginals: &[Vec<Vec<f64>>]) -> Result<()> {
    for set in coupling.iter_mut() {
        if set.points().len() != marginals.len() {
            return Err(Error::Domain("coupling and marginals disagree on snapshot count".into()));
        }
        let mut pts = set.points().to_vec();
        for (n, p) in pts.iter_mut().enumerate().skip(1) {
            let nearest = marginals[n]
                .iter()
                .min_by(|a, b| sq_dist(a, p).total_cmp(&sq_dist(b, p)))
                .ok_or_else(|| Error::Domain(format!("marginal {n} is empty")))?;
            *p = nearest.clone();
        }
        *set = PinnedSet::from_points(pts)?;
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_path::mean_path;

    fn pins(v: &[f64]) -> PinnedSet {
        PinnedSet::from_points(v.iter().map(|&c| vec![c]).collect()).unwrap()
    }

    #[test]
    fn free_flight_is_exact() {
        let grid = TimeGrid::new(2, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m0 = PhaseState::new(vec![0.0], vec![1.0]).unwrap();
        let tr = euler_maruyama(&ZeroDrift(1), &m0, grid, 0.0, &mut rng).unwrap();
        assert_eq!(tr.states.len(), tr.times.len());
        for (t, m) in tr.times.iter().zip(&tr.states) {
            assert!((m.x[0] - t).abs() < 1e-12);
        }
        assert_eq!(tr.snapshot_indices, vec![0, 100, 200]);
    }

    #[test]
    fn brownian_velocity_variance() {
        let grid = TimeGrid::new(1, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let starts = vec![PhaseState::at_rest(vec![0.0]); n];
        let seeds = path_seeds(&mut rng, n);
        let tr = simulate_batch(&ZeroDrift(1), &starts, grid, 1.0, &seeds, Record::Final).unwrap();
        let vs: Vec<f64> = tr.iter().map(|t| t.last().v[0]).collect();
        let mean = vs.iter().sum::<f64>() / n as f64;
        let var = vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // sd of a sample variance of normals is sqrt(2/(n-1))
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn bridge_paths_hit_pin() {
        let bridge = ConditionalBridge::new(1, None).unwrap();
        let grid = TimeGrid::new(1, 2000).unwrap();
        let p = vec![pins(&[0.0, 1.0]); 1000];
        let drift = BridgeDrift::new(&bridge, &p, grid);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let starts = vec![PhaseState::at_rest(vec![0.0]); 1000];
        let seeds = path_seeds(&mut rng, 1000);
        let tr = simulate_batch(&drift, &starts, grid, 0.3, &seeds, Record::Final).unwrap();
        let err = tr.iter().map(|t| (t.last().x[0] - 1.0).abs()).sum::<f64>() / 1000.0;
        assert!(err <= 0.05, "{err}");
    }

    #[test]
    fn chunking_does_not_change_paths() {
        let grid = TimeGrid::new(1, 50).unwrap();
        let starts: Vec<_> = (0..70).map(|i| PhaseState::at_rest(vec![i as f64 * 0.1])).collect();
        let seeds: Vec<u64> = (0..70).collect();
        let all = simulate_batch(&ZeroDrift(1), &starts, grid, 1.0, &seeds, Record::Final).unwrap();
        let one = simulate_batch(&ZeroDrift(1), &starts[65..66], grid, 1.0, &seeds[65..66], Record::Final).unwrap();
        assert_eq!(all[65], one[0]);
    }

    #[test]
    fn blow_up_reports_time() {
        let grid = TimeGrid::new(1, 10).unwrap();
        let drift = FnDrift {
            dim: 1,
            f: |t: f64, _: &[f64], _: &[f64], o: &mut [f64]| o[0] = if t > 0.45 { f64::INFINITY } else { 0.0 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match euler_maruyama(&drift, &PhaseState::at_rest(vec![0.0]), grid, 0.0, &mut rng) {
            Err(Error::Simulation { t, .. }) => assert!((t - 0.6).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noiseless_refinement_matches_mean_terminal_velocity() {
        let bridge = ConditionalBridge::new(2, None).unwrap();
        let p = vec![pins(&[0.0, 1.0, 0.5])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, vn) = refine_velocities(&bridge, &p, &[vec![0.7]], 1, 0.0, 2000, &mut rng).unwrap();
        let grid = TimeGrid::new(2, 2000).unwrap();
        let m = mean_path(&bridge, &p[0], &[0.7], grid).unwrap();
        let expected = m.v[grid.len() - 1][0];
        assert!((vn[0][0] - expected).abs() < 2e-2, "{} vs {expected}", vn[0][0]);
    }

    #[test]
    fn equilibrium_stays_at_rest() {
        let bridge = ConditionalBridge::new(3, None).unwrap();
        let p = vec![pins(&[0.3, 0.3, 0.3, 0.3])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (v0, vn) = refine_velocities(&bridge, &p, &[vec![0.0]], 4, 0.0, 100, &mut rng).unwrap();
        assert!(v0[0][0].abs() < 1e-12 && vn[0][0].abs() < 1e-12);
    }

    #[test]
    fn zero_drift_refresh_is_ballistic() {
        let grid = TimeGrid::new(3, 100).unwrap();
        let x0 = vec![vec![0.5, -1.0], vec![0.0, 0.0]];
        let v0 = vec![vec![1.0, 2.0], vec![-0.5, 0.0]];
        let c = refresh_coupling(&ZeroDrift(2), &x0, &v0, grid, 0.0, &[1, 2]).unwrap();
        for (set, (x, v)) in c.iter().zip(x0.iter().zip(&v0)) {
            for n in 0..=3 {
                for k in 0..2 {
                    assert!((set.point(n)[k] - (x[k] + v[k] * n as f64)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn anchoring_snaps_to_data() {
        let mut c = vec![pins(&[0.0, 0.9, 2.2])];
        let data = vec![vec![vec![0.0]], vec![vec![1.0], vec![5.0]], vec![vec![2.0], vec![-3.0]]];
        anchor_to_data(&mut c, &data).unwrap();
        assert_eq!(c[0].coordinate(0), vec![0.0, 1.0, 2.0]);
    }
}
