//! Alternating bridge-matching training loop.
//!
//! Each outer iteration draws pinned sets from the current coupling, refines
//! their snapshot velocities with bridge sweeps, regresses the network onto
//! conditional-bridge accelerations along the Gaussian paths, and finally
//! simulates the network from `(x_0, v_0)` pairs to refresh the coupling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{ConditionalBridge, PinnedSet, EPS_PIN};
use crate::error::{Error, Result};
use crate::gaussian_path::{PathSampler, TimeGrid, DEFAULT_STEPS_PER_UNIT};
use crate::metrics::{wasserstein_trimmed, EmpiricalMeasure};
use crate::nn::{ema_update, matching_loss_and_grad, AdamW, AdamWConfig, Batch, DriftNet, NetConfig, Normalization};
use crate::sde::{anchor_to_data, path_seeds, refine_velocities, refresh_coupling, Drift};

/// Loss above which training is considered divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sigma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub outer_iterations: usize,
    pub inner_steps: usize,
    pub refinement_rounds: usize,
    /// Pins the bridge looks ahead; `None` means all remaining pins.
    pub truncation_k: Option<usize>,
    pub seed: u64,
    /// Pinned sets kept in the coupling.
    pub coupling_size: usize,
    /// Euler-Maruyama steps per unit segment for refinement and refresh.
    pub steps_per_unit: usize,
    /// Gaussian-path grid resolution per unit segment.
    pub path_steps_per_unit: usize,
    pub ema_decay: f64,
    pub optimizer: AdamWConfig,
    pub net: NetConfig,
    /// Snap refreshed positions to their nearest data sample.
    pub anchored: bool,
    pub stop_on_plateau: bool,
    pub plateau_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 0.3,
            batch_size: 64,
            learning_rate: 2e-4,
            outer_iterations: 10,
            inner_steps: 500,
            refinement_rounds: 5,
            truncation_k: None,
            seed: 0,
            coupling_size: 256,
            steps_per_unit: 100,
            path_steps_per_unit: DEFAULT_STEPS_PER_UNIT,
            ema_decay: 0.999,
            optimizer: AdamWConfig::default(),
            net: NetConfig::default(),
            anchored: false,
            stop_on_plateau: false,
            plateau_tolerance: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("train.{field}"), msg));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("outer_iterations", self.outer_iterations),
            ("inner_steps", self.inner_steps),
            ("refinement_rounds", self.refinement_rounds),
            ("coupling_size", self.coupling_size),
            ("steps_per_unit", self.steps_per_unit),
            ("path_steps_per_unit", self.path_steps_per_unit),
        ] {
            if v == 0 {
                return bad(name, "must be positive");
            }
        }
        if self.truncation_k == Some(0) {
            return bad("truncation_k", "must be at least 1 (or null for all pins)");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay", "must lie in [0, 1)");
        }
        if self.net.width == 0 || self.net.frequencies == 0 {
            return bad("net", "width and frequencies must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub outer: usize,
    /// Mean batch loss over the inner steps.
    pub loss: f64,
    /// Standard error of `loss`, treating batch losses as independent.
    pub loss_se: f64,
    /// W2 between the refreshed coupling and each training marginal.
    pub w2: Vec<f64>,
    pub plateau: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DriftNet,
    pub log: Vec<LogRow>,
    /// Refreshed coupling after the last outer iteration.
    pub coupling: Vec<PinnedSet>,
    /// Initial velocity each refreshed pinned set was simulated from.
    pub coupling_v0: Vec<Vec<f64>>,
    pub outer_completed: usize,
    /// First outer iteration at which the plateau rule held.
    pub plateau_at: Option<usize>,
}

fn coordinate_stats(points: impl Iterator<Item = Vec<f64>>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let pts: Vec<Vec<f64>> = points.collect();
    let n = pts.len().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|k| {
            let var = pts.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / n;
            if var > 1e-12 { var.sqrt() } else { 1.0 }
        })
        .collect();
    (mean, sd)
}

/// `1.4826 · median |target|` per coordinate, or 1 when degenerate.
fn robust_scale(batch: &Batch, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let mut a: Vec<f64> = batch.target.iter().skip(k).step_by(d).map(|c| c.abs()).collect();
            a.sort_by(f64::total_cmp);
            let med = a[a.len() / 2] * 1.4826;
            if med > 1e-8 { med } else { 1.0 }
        })
        .collect()
}

/// `len` indices into `0..n`: concatenated random permutations, so every sample appears
/// `len / n` or `len / n + 1` times.
pub fn tiled_permutation<R: Rng + ?Sized>(n: usize, len: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(len + n);
    while out.len() < len {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        out.extend(p);
    }
    out.truncate(len);
    out
}

/// Uniform over the union of `[n, n + 1 - eps_pin)`: the clamped window before
/// a pin pairs frozen coefficients with a state that keeps pinching, which
/// turns the cancelling `C1 (x - x̄) + C2 v` into an O(1 / eps_pin) error.
pub fn sample_time<R: Rng + ?Sized>(num_segments: usize, rng: &mut R) -> f64 {
    let n = rng.random_range(0..num_segments);
    n as f64 + rng.random::<f64>() * (1.0 - EPS_PIN)
}

struct Context {
    bridge: ConditionalBridge,
    sampler: PathSampler,
    horizon: f64,
    dim: usize,
}

impl Context {
    fn draw_batch<R: Rng + ?Sized>(&self, coupling: &[PinnedSet], v0: &[Vec<f64>], size: usize, rng: &mut R) -> Batch {
        let d = self.dim;
        let mut b = Batch {
            t: Vec::with_capacity(size),
            x: Vec::with_capacity(size * d),
            v: Vec::with_capacity(size * d),
            target: vec![0.0; size * d],
        };
        for r in 0..size {
            let j = rng.random_range(0..coupling.len());
            let t = sample_time(self.horizon as usize, rng);
            let pins = coupling[j].points();
            let m = self.sampler.sample(t, pins, &v0[j], rng);
            self.bridge.accelerate(t, &m.x, &m.v, pins, &mut b.target[r * d..(r + 1) * d]);
            b.t.push(t);
            b.x.extend_from_slice(&m.x);
            b.v.extend_from_slice(&m.v);
        }
        b
    }
}

/// Current (non-averaged) weights as a drift, used for coupling refresh.
struct LiveDrift<'a>(&'a DriftNet);

impl Drift for LiveDrift<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn accelerate(&self, t: f64, _: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        let ts = vec![t; x.len() / self.0.dim()];
        out.copy_from_slice(&self.0.forward(&ts, x, v));
    }
}

/// Runs the alternating loop on unit-spaced training marginals `marginals[0..=N]`.
///
/// `on_log` sees every row as soon as its outer iteration finishes.
pub fn train(
    marginals: &[EmpiricalMeasure],
    config: &TrainConfig,
    on_log: &mut dyn FnMut(&LogRow) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if marginals.len() < 2 {
        return Err(Error::config("data", "training needs at least two train marginals"));
    }
    let dim = marginals[0].dim();
    if let Some(m) = marginals.iter().find(|m| m.dim() != dim) {
        return Err(Error::Dimension { expected: dim, found: m.dim() });
    }
    if let Some((n, m)) = marginals.iter().enumerate().find(|(_, m)| m.len() < config.batch_size) {
        return Err(Error::config(
            "train.batch_size",
            format!("marginal {n} has {} samples, fewer than batch_size = {}", m.len(), config.batch_size),
        ));
    }
    let num_segments = marginals.len() - 1;
    let bridge = ConditionalBridge::new(num_segments, config.truncation_k)?;
    let sampler = PathSampler::new(&bridge, TimeGrid::new(num_segments, config.path_steps_per_unit)?, config.sigma)?;
    let ctx = Context {
        bridge,
        sampler,
        horizon: num_segments as f64,
        dim,
    };
    let sim_grid = TimeGrid::new(num_segments, config.steps_per_unit)?;
    let data: Vec<Vec<Vec<f64>>> = marginals.iter().map(|m| m.points().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let draws: Vec<Vec<usize>> = data.iter().map(|m| tiled_permutation(m.len(), config.coupling_size, &mut rng)).collect();
    let mut coupling: Vec<PinnedSet> = (0..config.coupling_size)
        .map(|i| PinnedSet::from_points(data.iter().zip(&draws).map(|(m, d)| m[d[i]].clone()).collect()))
        .collect::<Result<_>>()?;
    let mut v0_init: Vec<Vec<f64>> = (0..config.coupling_size)
        .map(|_| (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
        .collect();

    let (x_shift, x_scale) = coordinate_stats(data.iter().flatten().cloned(), dim);
    let mut net: Option<DriftNet> = None;
    let mut opt: Option<AdamW> = None;
    let mut log: Vec<LogRow> = Vec::new();
    let mut coupling_v0 = v0_init.clone();
    let mut plateau_at = None;

    for outer in 0..config.outer_iterations {
        let (v0, _) = refine_velocities(
            &ctx.bridge,
            &coupling,
            &v0_init,
            config.refinement_rounds,
            config.sigma,
            config.steps_per_unit,
            &mut rng,
        )?;

        if net.is_none() {
            let probe = ctx.draw_batch(&coupling, &v0, 1024, &mut rng);
            let (v_shift, v_scale) = coordinate_stats(v0.iter().cloned(), dim);
            let norm = Normalization {
                horizon: ctx.horizon,
                x_shift: x_shift.clone(),
                x_scale: x_scale.clone(),
                v_shift,
                v_scale,
                out_scale: robust_scale(&probe, dim),
            };
            let n = DriftNet::new(config.net, dim, norm, &mut rng)?;
            opt = Some(AdamW::new(config.optimizer, n.num_params()));
            net = Some(n);
        }
        let net_ref = net.as_mut().expect("initialized above");
        let opt_ref = opt.as_mut().expect("initialized above");

        let (mut total, mut total_sq) = (0.0, 0.0);
        for step in 0..config.inner_steps {
            let batch = ctx.draw_batch(&coupling, &v0, config.batch_size, &mut rng);
            let (loss, grad) = matching_loss_and_grad(net_ref, &batch);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                let worst = batch.target.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                return Err(Error::Training(format!(
                    "loss {loss:.3e} at outer {outer}, step {step} (largest |target| in batch {worst:.3e})"
                )));
            }
            total += loss;
            total_sq += loss * loss;
            opt_ref.step(&mut net_ref.params, &grad, config.learning_rate);
            ema_update(&mut net_ref.shadow, &net_ref.params, config.ema_decay);
        }
        let steps = config.inner_steps as f64;
        let loss = total / steps;
        let loss_se = if config.inner_steps > 1 {
            ((total_sq - steps * loss * loss).max(0.0) / (steps - 1.0) / steps).sqrt()
        } else {
            0.0
        };

        // Every slot is re-simulated once from its own (x̄_0, v_0), so the x_0 ensemble stays the q_0 draw.
        let x0: Vec<Vec<f64>> = coupling.iter().map(|p| p.point(0).to_vec()).collect();
        let starts_v0 = v0;
        let seeds = path_seeds(&mut rng, x0.len());
        let mut refreshed = refresh_coupling(&LiveDrift(net_ref), &x0, &starts_v0, sim_grid, config.sigma, &seeds)?;
        if config.anchored {
            anchor_to_data(&mut refreshed, &data)?;
        }
        let w2 = (0..marginals.len())
            .map(|n| {
                let pts: Vec<Vec<f64>> = refreshed.iter().map(|p| p.point(n).to_vec()).collect();
                wasserstein_trimmed(&EmpiricalMeasure::new(pts)?, &marginals[n], 2)
            })
            .collect::<Result<Vec<_>>>()?;

        let plateau = outer >= 2 && {
            let prev = log[outer - 2].loss;
            (loss - prev).abs() < config.plateau_tolerance * prev.abs()
        };
        if plateau && plateau_at.is_none() {
            plateau_at = Some(outer);
        }
        let row = LogRow { outer, loss, loss_se, w2, plateau };
        on_log(&row)?;
        log.push(row);

        coupling = refreshed;
        coupling_v0 = starts_v0.clone();
        v0_init = starts_v0;
        if plateau && config.stop_on_plateau {
            break;
        }
    }
    let outer_completed = log.len();
    Ok(TrainOutcome {
        net: net.expect("at least one outer iteration ran"),
        log,
        coupling,
        coupling_v0,
        outer_completed,
        plateau_at,
    })
}
