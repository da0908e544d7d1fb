//! Imputation metrics of simulated ensembles against every snapshot marginal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bridge::{ConditionalBridge, PhaseState, PinnedSet};
use crate::data::{Role, SnapshotDataset};
use crate::error::{Error, Result};
use crate::gaussian_path::TimeGrid;
use crate::metrics::{
    mmd_rbf, sliced_wasserstein, wasserstein, wasserstein_trimmed, Bandwidth, EmpiricalMeasure,
};
use crate::schedule::SnapshotSchedule;
use crate::sde::{path_seeds, simulate_batch, BridgeDrift, Drift, Record};

pub const METRICS: [&str; 4] = ["w1", "w2", "swd", "mmd"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSettings {
    pub swd_projections: usize,
    pub mmd_bandwidth: Bandwidth,
    /// Use the trimmed W2 when true.
    pub trimmed: bool,
}

/// One metric at one marginal; `time_index` is `None` for aggregate rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub time_index: Option<usize>,
    pub raw_time: Option<f64>,
    /// `train`, `heldout`, `rest` (mean over training marginals after the
    /// first) or `heldout_mean`.
    pub role: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Simulated positions at every dataset time.
    pub predicted: Vec<EmpiricalMeasure>,
    pub rows: Vec<MetricRow>,
}

impl Evaluation {
    pub fn value(&self, metric: &str, role: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.role == role && r.time_index.is_none()).map(|r| r.value)
    }

    pub fn per_time(&self, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .filter_map(|r| r.time_index.map(|i| (i, r.value)))
            .collect()
    }
}

/// Normalized time of every dataset marginal on the training schedule, and
/// the grid index nearest to it.
pub fn evaluation_indices(dataset: &SnapshotDataset, train: &SnapshotSchedule, grid: TimeGrid) -> Result<Vec<usize>> {
    dataset
        .schedule
        .raw_times()
        .iter()
        .map(|&raw| {
            let tau = train.normalize_time(raw)?;
            if !(0.0..=train.horizon() + 1e-9).contains(&tau) {
                return Err(Error::Domain(format!(
                    "time {raw} lies outside the training window [{}, {}]",
                    train.raw_times()[0],
                    train.raw_times()[train.num_marginals() - 1]
                )));
            }
            Ok(((tau * grid.steps_per_unit as f64).round() as usize).min(grid.len() - 1))
        })
        .collect()
}

/// Simulates `drift` from `starts` and collects positions at every dataset time.
pub fn simulate_at_dataset_times(
    drift: &dyn Drift,
    starts: &[PhaseState],
    dataset: &SnapshotDataset,
    steps_per_unit: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<EmpiricalMeasure>> {
    let train = dataset.train_schedule()?;
    let grid = TimeGrid::new(train.num_segments(), steps_per_unit)?;
    let idx = evaluation_indices(dataset, &train, grid)?;
    let mut sorted = idx.clone();
    sorted.sort_unstable();
    sorted.dedup();
    let seeds = path_seeds(&mut ChaCha8Rng::seed_from_u64(seed), starts.len());
    let trajs = simulate_batch(drift, starts, grid, sigma, &seeds, Record::Indices(sorted.clone()))?;
    idx.iter()
        .map(|i| {
            let slot = sorted.binary_search(i).expect("index recorded");
            EmpiricalMeasure::new(trajs.iter().map(|tr| tr.states[slot].x.clone()).collect())
        })
        .collect()
}

/// Conditional-bridge materializations through `coupling` from `v0`, at every dataset time.
pub fn bridge_at_dataset_times(
    coupling: &[PinnedSet],
    v0: &[Vec<f64>],
    truncation: Option<usize>,
    dataset: &SnapshotDataset,
    steps_per_unit: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<EmpiricalMeasure>> {
    if coupling.len() != v0.len() || coupling.is_empty() {
        return Err(Error::Domain("coupling and start velocities must be non-empty and equal in size".into()));
    }
    let train = dataset.train_schedule()?;
    let grid = TimeGrid::new(train.num_segments(), steps_per_unit)?;
    let bridge = ConditionalBridge::new(train.num_segments(), truncation)?;
    let drift = BridgeDrift::new(&bridge, coupling, grid);
    let starts: Vec<PhaseState> = coupling
        .iter()
        .zip(v0)
        .map(|(p, v)| PhaseState::new(p.point(0).to_vec(), v.clone()))
        .collect::<Result<_>>()?;
    simulate_at_dataset_times(&drift, &starts, dataset, steps_per_unit, sigma, seed)
}

/// W1, W2, SWD and MMD (in `METRICS` order) of `predicted` against `target`.
pub fn marginal_metrics(
    predicted: &EmpiricalMeasure,
    target: &EmpiricalMeasure,
    settings: &MetricSettings,
    seed: u64,
) -> Result<[f64; 4]> {
    let w2 = if settings.trimmed {
        wasserstein_trimmed(predicted, target, 2)?
    } else {
        wasserstein(predicted, target, 2)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok([
        wasserstein(predicted, target, 1)?,
        w2,
        sliced_wasserstein(predicted, target, settings.swd_projections, &mut rng)?,
        mmd_rbf(predicted, target, settings.mmd_bandwidth)?,
    ])
}

/// Per-marginal rows for each metric, then `rest` and `heldout_mean` aggregates.
///
/// `rest` is the unweighted mean over training marginals excluding the first,
/// where simulations start from data.
pub fn score(dataset: &SnapshotDataset, predicted: Vec<EmpiricalMeasure>, settings: &MetricSettings, seed: u64) -> Result<Evaluation> {
    if predicted.len() != dataset.marginals.len() {
        return Err(Error::Domain(format!(
            "{} predicted ensembles for {} marginals",
            predicted.len(),
            dataset.marginals.len()
        )));
    }
    if let Some(p) = predicted.first() {
        if p.dim() != dataset.dim() {
            return Err(Error::Dimension { expected: dataset.dim(), found: p.dim() });
        }
    }
    let values: Vec<[f64; 4]> = predicted
        .iter()
        .zip(&dataset.marginals)
        .enumerate()
        .map(|(n, (p, q))| marginal_metrics(p, q, settings, seed.wrapping_add(n as u64)))
        .collect::<Result<_>>()?;
    let first_train = dataset.indices(Role::Train).first().copied();
    let mut rows = Vec::new();
    for (m, name) in METRICS.iter().enumerate() {
        let mut rest = Vec::new();
        let mut held = Vec::new();
        for (n, v) in values.iter().enumerate() {
            let role = dataset.roles[n];
            rows.push(MetricRow {
                metric: name.to_string(),
                time_index: Some(n),
                raw_time: Some(dataset.schedule.raw_times()[n]),
                role: role_name(role).to_string(),
                value: v[m],
            });
            match role {
                Role::Train if Some(n) != first_train => rest.push(v[m]),
                Role::Heldout => held.push(v[m]),
                Role::Train => {}
            }
        }
        for (role, vals) in [("rest", rest), ("heldout_mean", held)] {
            if !vals.is_empty() {
                rows.push(MetricRow {
                    metric: name.to_string(),
                    time_index: None,
                    raw_time: None,
                    role: role.to_string(),
                    value: vals.iter().sum::<f64>() / vals.len() as f64,
                });
            }
        }
    }
    Ok(Evaluation { predicted, rows })
}

pub fn role_name(role: Role) -> &'static str {
    match role {
        Role::Train => "train",
        Role::Heldout => "heldout",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::alternating_roles;

    fn dataset() -> SnapshotDataset {
        let times = [0.0, 0.5, 1.0, 1.5, 2.0];
        let marginals = times
            .iter()
            .map(|&t| EmpiricalMeasure::new((0..6).map(|i| vec![t + 0.1 * i as f64, -t]).collect()).unwrap())
            .collect();
        SnapshotDataset::new(SnapshotSchedule::new(&times).unwrap(), marginals, alternating_roles(5)).unwrap()
    }

    fn settings() -> MetricSettings {
        MetricSettings { swd_projections: 16, mmd_bandwidth: Bandwidth::MedianHeuristic, trimmed: false }
    }

    #[test]
    fn identical_ensembles_score_zero() {
        let ds = dataset();
        let eval = score(&ds, ds.marginals.clone(), &settings(), 3).unwrap();
        assert!(eval.rows.iter().all(|r| r.value.abs() < 1e-7), "{:?}", eval.rows);
        assert_eq!(eval.rows.len(), 4 * (5 + 2));
    }

    #[test]
    fn rest_skips_the_first_training_marginal() {
        let ds = dataset();
        let mut pred = ds.marginals.clone();
        pred[0] = EmpiricalMeasure::new(vec![vec![100.0, 0.0]; 6]).unwrap();
        let eval = score(&ds, pred, &settings(), 3).unwrap();
        assert!(eval.value("w2", "rest").unwrap() < 1e-12);
        assert!(eval.per_time("w2")[0].1 > 50.0);
    }

    #[test]
    fn indices_follow_the_training_schedule() {
        let ds = dataset();
        let train = ds.train_schedule().unwrap();
        let grid = TimeGrid::new(train.num_segments(), 10).unwrap();
        assert_eq!(evaluation_indices(&ds, &train, grid).unwrap(), vec![0, 5, 10, 15, 20]);
    }

    #[test]
    fn bridge_materializations_hit_the_coupling() {
        let ds = dataset();
        let coupling: Vec<PinnedSet> = (0..4)
            .map(|i| PinnedSet::from_points(vec![vec![0.1 * i as f64, 0.0], vec![1.0, -1.0], vec![2.0, -2.0]]).unwrap())
            .collect();
        let v0 = vec![vec![0.0, 0.0]; 4];
        let pred = bridge_at_dataset_times(&coupling, &v0, None, &ds, 400, 0.0, 1).unwrap();
        for (p, c) in pred[4].points().iter().zip(&coupling) {
            assert!((p[0] - c.point(2)[0]).abs() < 1e-2 && (p[1] - c.point(2)[1]).abs() < 1e-2, "{p:?}");
        }
    }
}
