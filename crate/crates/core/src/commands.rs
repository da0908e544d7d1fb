//! The four pipeline commands behind the `mmsbm` binary.
//!
//! Every command reads a validated [`RunConfig`] and writes fixed file names
//! under `config.output.dir`.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::oracle::{FiniteCOracle, OracleIntegrator};
use crate::bridge::{lambda_vector, ConditionalBridge, PhaseState, PinnedSet};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{AblationAxis, RunConfig};
use crate::data::{Role, SnapshotDataset};
use crate::error::{Error, Result};
use crate::evaluation::{bridge_at_dataset_times, score, simulate_at_dataset_times, Evaluation, MetricSettings};
use crate::gaussian_path::TimeGrid;
use crate::matching::{train, LogRow, TrainOutcome};
use crate::metrics::{Bandwidth, EmpiricalMeasure};
use crate::nn::{DriftNet, ShadowDrift};
use crate::plot::{Figure, Mark};
use crate::sde::{path_seeds, simulate_batch, BridgeDrift, Record};

pub const LOG_FILE: &str = "log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PLOT_FILE: &str = "plot.svg";

/// Offset between the training seed and the evaluation simulation seed.
const EVAL_SEED_OFFSET: u64 = 0x5eed;

struct CsvOut {
    path: PathBuf,
    w: csv::Writer<File>,
}

impl CsvOut {
    fn create(dir: &Path, name: &str, header: &[String]) -> Result<Self> {
        let path = dir.join(name);
        let w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
        let mut out = CsvOut { path, w };
        out.row(header)?;
        Ok(out)
    }

    fn row<S: AsRef<[u8]>>(&mut self, cells: &[S]) -> Result<()> {
        self.w.write_record(cells).map_err(|e| Error::io(&self.path, e.into()))?;
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn strings(cells: &[&str]) -> Vec<String> {
    cells.iter().map(|s| s.to_string()).collect()
}

fn prepare_out(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

#[derive(Debug, Clone)]
pub struct DemoSummary {
    /// Mean distance to the pinned point at each pinned time; empty without paths.
    pub pin_errors: Vec<f64>,
    /// Largest relative deviation from the finite-c oracle, when checked.
    pub oracle_max_rel_error: Option<f64>,
    pub num_paths: usize,
}

/// Simulates bridge materializations through the configured pinned points.
pub fn demo_bridge(config: &RunConfig) -> Result<DemoSummary> {
    config.validate_bridge()?;
    let out = prepare_out(config)?;
    let hash = config.hash();
    let b = &config.bridge;
    let pins = PinnedSet::from_points(b.pinned_points.clone())?;
    let n_seg = pins.num_segments();
    let d = pins.dim();
    let bridge = ConditionalBridge::new(n_seg, b.truncation_k)?;
    let grid = TimeGrid::new(n_seg, b.steps_per_unit)?;
    let v0 = b.v0.clone().unwrap_or_else(|| vec![0.0; d]);
    let all_pins = vec![pins.clone(); b.num_paths];
    let drift = BridgeDrift::new(&bridge, &all_pins, grid);
    let starts = vec![PhaseState::new(pins.point(0).to_vec(), v0)?; b.num_paths];
    let seeds = path_seeds(&mut ChaCha8Rng::seed_from_u64(config.train.seed), b.num_paths);
    let trajs = simulate_batch(&drift, &starts, grid, b.sigma, &seeds, Record::Full)?;

    let mut header = strings(&["config_hash", "path", "step", "t"]);
    header.extend((0..d).map(|k| format!("x_{k}")));
    let mut log = CsvOut::create(&out, LOG_FILE, &header)?;
    for (p, tr) in trajs.iter().enumerate() {
        for (i, (t, m)) in tr.times.iter().zip(&tr.states).enumerate() {
            let mut row = vec![hash.clone(), p.to_string(), i.to_string(), format!("{t:.6}")];
            row.extend(m.x.iter().map(|c| format!("{c:.10e}")));
            log.row(&row)?;
        }
    }

    // No paths, no pin errors: an empty mean would read as a perfect fit.
    let measured = if trajs.is_empty() { 0 } else { n_seg + 1 };
    let pin_errors: Vec<f64> = (0..measured)
        .map(|n| {
            let total: f64 = trajs
                .iter()
                .map(|tr| {
                    tr.snapshot(n).x.iter().zip(pins.point(n)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                })
                .sum();
            total / trajs.len() as f64
        })
        .collect();

    let oracle_max_rel_error = match (b.oracle_check, b.truncation_k, trajs.first()) {
        (true, None, Some(tr)) => Some(oracle_deviation(config, &pins, &bridge, tr)?),
        _ => None,
    };

    let mut metrics = CsvOut::create(&out, METRICS_FILE, &strings(&["config_hash", "metric", "time_index", "value"]))?;
    for (n, e) in pin_errors.iter().enumerate() {
        metrics.row(&[hash.clone(), "pin_error".into(), n.to_string(), format!("{e:.10e}")])?;
    }
    if let Some(e) = oracle_max_rel_error {
        metrics.row(&[hash.clone(), "oracle_max_rel_error".into(), String::new(), format!("{e:.10e}")])?;
    }

    let mut fig = if d == 1 {
        Figure::new(format!("{} bridge paths, sigma = {}", b.num_paths, b.sigma), "t", "x")
    } else {
        Figure::new(format!("{} bridge paths, sigma = {}", b.num_paths, b.sigma), "x_0", "x_1")
    };
    let xy = |t: f64, x: &[f64]| if d == 1 { (t, x[0]) } else { (x[0], x[1]) };
    for tr in &trajs {
        let stride = (tr.states.len() / 400).max(1);
        let pts = tr.states.iter().zip(&tr.times).step_by(stride).map(|(m, &t)| xy(t, &m.x)).collect();
        fig.add(None, pts, Mark::Line, 0, 0.5);
    }
    let pin_pts = (0..=n_seg).map(|n| xy(n as f64, pins.point(n))).collect();
    fig.add(Some("pinned points"), pin_pts, Mark::Rings, 1, 1.0);
    fig.save(&out.join(PLOT_FILE))?;

    Ok(DemoSummary { pin_errors, oracle_max_rel_error, num_paths: b.num_paths })
}

/// Closed form against the finite-c oracle at 20 interior times per segment,
/// evaluated at states of a simulated path.
fn oracle_deviation(config: &RunConfig, pins: &PinnedSet, bridge: &ConditionalBridge, tr: &crate::sde::Trajectory) -> Result<f64> {
    let mut soft = config.bridge.soft_constraint();
    if soft.sigma == 0.0 {
        // The closed form does not depend on sigma; the oracle needs it positive.
        soft.sigma = 1.0;
    }
    let times: Vec<f64> = (0..=pins.num_segments()).map(|n| n as f64).collect();
    let oracle = FiniteCOracle::new(&times, pins.points(), &soft, OracleIntegrator::Exact)?;
    let k = config.bridge.steps_per_unit;
    let mut worst: f64 = 0.0;
    for n in 0..pins.num_segments() {
        for j in 1..=20 {
            let i = n * k + (j * k) / 21;
            let (t, m) = (tr.times[i], &tr.states[i]);
            let a = oracle.acceleration(t, &m.x, &m.v)?;
            let mut b = vec![0.0; m.dim()];
            bridge.accelerate(t, &m.x, &m.v, pins.points(), &mut b);
            let num: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let den: f64 = b.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(num / den);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
}

fn train_marginals(dataset: &SnapshotDataset) -> Vec<EmpiricalMeasure> {
    dataset.train_marginals().into_iter().cloned().collect()
}

fn build_checkpoint(config: &RunConfig, dataset: &SnapshotDataset, outcome: &TrainOutcome) -> Result<Checkpoint> {
    let net = &outcome.net;
    Ok(Checkpoint {
        meta: CheckpointMeta {
            config: config.to_value(),
            config_hash: config.hash(),
            net: net.config(),
            dim: net.dim(),
            num_params: net.num_params(),
            outer_iteration: outcome.outer_completed,
            normalization: net.norm.clone(),
            train_times: dataset.train_schedule()?.raw_times().to_vec(),
            start_x0: outcome.coupling.iter().map(|p| p.point(0).to_vec()).collect(),
            start_v0: outcome.coupling_v0.clone(),
            coupling: outcome.coupling.iter().map(|p| p.points().to_vec()).collect(),
        },
        params: net.params.clone(),
        shadow: net.shadow.clone(),
    })
}

fn run_training(
    config: &RunConfig,
    dataset: &SnapshotDataset,
    log: Option<&mut CsvOut>,
) -> Result<TrainOutcome> {
    let hash = config.hash();
    let marginals = train_marginals(dataset);
    let mut sink = log;
    let mut on_log = |row: &LogRow| -> Result<()> {
        if let Some(out) = sink.as_deref_mut() {
            let mut cells = vec![hash.clone(), row.outer.to_string(), format!("{:.10e}", row.loss), format!("{:.10e}", row.loss_se), row.plateau.to_string()];
            cells.extend(row.w2.iter().map(|w| format!("{w:.10e}")));
            out.row(&cells)?;
        }
        Ok(())
    };
    train(&marginals, &config.train, &mut on_log)
}

/// Trains on the dataset's training marginals; writes `log.csv`,
/// `checkpoint.bin` and a W2-per-iteration `plot.svg`.
pub fn train_command(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let out = prepare_out(config)?;
    let train_idx = dataset.indices(Role::Train);
    let mut header = strings(&["config_hash", "outer", "loss", "loss_se", "plateau"]);
    header.extend(train_idx.iter().map(|n| format!("w2_{n}")));
    let mut log = CsvOut::create(&out, LOG_FILE, &header)?;
    let outcome = run_training(config, &dataset, Some(&mut log))?;
    let checkpoint = build_checkpoint(config, &dataset, &outcome)?;
    checkpoint.save(&out.join(CHECKPOINT_FILE))?;

    let mut fig = Figure::new("coupling W2 per training marginal", "outer iteration", "W2");
    for (j, n) in train_idx.iter().enumerate() {
        let pts = outcome.log.iter().map(|r| (r.outer as f64, r.w2[j])).collect();
        fig.add(Some(&format!("t_{n}")), pts, Mark::Line, j, 1.0);
    }
    fig.save(&out.join(PLOT_FILE))?;
    Ok(TrainSummary { outcome, checkpoint })
}

fn metric_settings(config: &RunConfig) -> MetricSettings {
    MetricSettings {
        swd_projections: config.eval.swd_projections,
        mmd_bandwidth: config.eval.mmd_bandwidth.map_or(Bandwidth::MedianHeuristic, Bandwidth::Fixed),
        trimmed: config.eval.trim > 0.0,
    }
}

fn eval_seed(config: &RunConfig) -> u64 {
    config.train.seed.wrapping_add(EVAL_SEED_OFFSET)
}

fn check_compatible(checkpoint: &Checkpoint, dataset: &SnapshotDataset) -> Result<()> {
    if checkpoint.meta.dim != dataset.dim() {
        return Err(Error::Dimension { expected: dataset.dim(), found: checkpoint.meta.dim });
    }
    let train_times = dataset.train_schedule()?.raw_times().to_vec();
    if checkpoint.meta.train_times != train_times {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on times {:?}, dataset trains on {:?}",
            checkpoint.meta.train_times, train_times
        )));
    }
    Ok(())
}

/// Simulates the EMA drift from the checkpoint's start pairs and scores every marginal.
pub fn evaluate_model(config: &RunConfig, dataset: &SnapshotDataset, checkpoint: &Checkpoint) -> Result<Evaluation> {
    check_compatible(checkpoint, dataset)?;
    let net: DriftNet = checkpoint.net()?;
    let x0 = &checkpoint.meta.start_x0;
    let v0 = &checkpoint.meta.start_v0;
    if x0.is_empty() || x0.len() != v0.len() {
        return Err(Error::Checkpoint("checkpoint holds no usable start pairs".into()));
    }
    let m = config.eval.num_paths.unwrap_or(x0.len());
    let starts: Vec<PhaseState> =
        (0..m).map(|i| PhaseState::new(x0[i % x0.len()].clone(), v0[i % v0.len()].clone())).collect::<Result<_>>()?;
    let predicted = simulate_at_dataset_times(
        &ShadowDrift(&net),
        &starts,
        dataset,
        config.eval.steps_per_unit,
        config.train.sigma,
        eval_seed(config),
    )?;
    score(dataset, predicted, &metric_settings(config), eval_seed(config))
}

fn write_metric_rows(out: &Path, hash: &str, eval: &Evaluation) -> Result<()> {
    let header = strings(&["config_hash", "metric", "time_index", "raw_time", "role", "value"]);
    let mut csv = CsvOut::create(out, METRICS_FILE, &header)?;
    for r in &eval.rows {
        csv.row(&[
            hash.to_string(),
            r.metric.clone(),
            r.time_index.map(|i| i.to_string()).unwrap_or_default(),
            r.raw_time.map(|t| format!("{t}")).unwrap_or_default(),
            r.role.clone(),
            format!("{:.10e}", r.value),
        ])?;
    }
    Ok(())
}

fn ensemble_figure(dataset: &SnapshotDataset, eval: &Evaluation) -> Figure {
    let d = dataset.dim();
    let (xl, yl) = if d == 1 { ("t", "x_0") } else { ("x_0", "x_1") };
    let mut fig = Figure::new("data (rings) and simulated ensembles (dots)", xl, yl);
    for (n, (data, pred)) in dataset.marginals.iter().zip(&eval.predicted).enumerate() {
        let t = dataset.schedule.raw_times()[n];
        let xy = |p: &Vec<f64>| if d == 1 { (t, p[0]) } else { (p[0], p[1]) };
        let label = format!("t_{n} ({})", crate::evaluation::role_name(dataset.roles[n]));
        fig.add(Some(&label), pred.points().iter().map(xy).collect(), Mark::Dots, n, 0.5);
        fig.add(None, data.points().iter().map(xy).collect(), Mark::Rings, n, 0.25);
    }
    fig
}

/// Scores the checkpoint against every marginal; writes `metrics.csv` and,
/// when enabled, `plot.svg`.
pub fn evaluate_command(config: &RunConfig) -> Result<Evaluation> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let checkpoint = Checkpoint::load(&config.checkpoint_path())?;
    let out = prepare_out(config)?;
    let eval = evaluate_model(config, &dataset, &checkpoint)?;
    write_metric_rows(&out, &config.hash(), &eval)?;
    if config.eval.plot {
        ensemble_figure(&dataset, &eval).save(&out.join(PLOT_FILE))?;
    }
    Ok(eval)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    pub setting: f64,
    pub heldout_mean_w2: f64,
    pub heldout_w2: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub axis: AblationAxis,
    pub points: Vec<AblationPoint>,
    /// `|λ|` for the configured number of future pins (pins axis only).
    pub lambda_table: Vec<f64>,
}

fn ablation_point(setting: f64, eval: &Evaluation) -> Result<AblationPoint> {
    let heldout_mean_w2 = eval
        .value("w2", "heldout_mean")
        .ok_or_else(|| Error::config("data", "the ablation needs at least one heldout marginal"))?;
    let heldout_w2 = eval
        .rows
        .iter()
        .filter(|r| r.metric == "w2" && r.role == "heldout")
        .filter_map(|r| r.time_index.map(|i| (i, r.value)))
        .collect();
    Ok(AblationPoint { setting, heldout_mean_w2, heldout_w2 })
}

/// Checkpoint at the configured path, or a fresh training run saved there.
fn shared_checkpoint(config: &RunConfig, dataset: &SnapshotDataset) -> Result<Checkpoint> {
    let path = config.checkpoint_path();
    if path.is_file() {
        let ck = Checkpoint::load(&path)?;
        check_compatible(&ck, dataset)?;
        return Ok(ck);
    }
    let outcome = run_training(config, dataset, None)?;
    let ck = build_checkpoint(config, dataset, &outcome)?;
    ck.save(&path)?;
    Ok(ck)
}

/// Sweeps truncation levels (re-evaluating bridge materializations through
/// one trained coupling) or sigma (re-training per value).
pub fn ablate_command(config: &RunConfig) -> Result<Ablation> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let out = prepare_out(config)?;
    let hash = config.hash();
    let axis = config.eval.ablation.axis;
    let settings = metric_settings(config);
    let seed = eval_seed(config);
    let mut points = Vec::new();
    let mut lambda_table = Vec::new();
    match axis {
        AblationAxis::Pins => {
            let ck = shared_checkpoint(config, &dataset)?;
            let coupling: Vec<PinnedSet> = ck.coupling()?;
            let n_seg = dataset.train_schedule()?.num_segments();
            let levels = config.eval.ablation.truncations.clone().unwrap_or_else(|| (1..=n_seg).collect());
            for k in levels {
                let predicted = bridge_at_dataset_times(
                    &coupling,
                    &ck.meta.start_v0,
                    Some(k),
                    &dataset,
                    config.eval.steps_per_unit,
                    config.train.sigma,
                    seed,
                )?;
                points.push(ablation_point(k as f64, &score(&dataset, predicted, &settings, seed)?)?);
            }
            lambda_table = lambda_vector(config.eval.ablation.lambda_future)?.iter().map(|l| l.abs()).collect();
        }
        AblationAxis::Sigma => {
            for &sigma in &config.eval.ablation.sigmas {
                let mut cfg = config.clone();
                cfg.train.sigma = sigma;
                let outcome = run_training(&cfg, &dataset, None)?;
                let ck = build_checkpoint(&cfg, &dataset, &outcome)?;
                points.push(ablation_point(sigma, &evaluate_model(&cfg, &dataset, &ck)?)?);
            }
        }
    }

    let axis_name = match axis {
        AblationAxis::Pins => "truncation_k",
        AblationAxis::Sigma => "sigma",
    };
    let header = strings(&["config_hash", "axis", "setting", "metric", "time_index", "value"]);
    let mut csv = CsvOut::create(&out, METRICS_FILE, &header)?;
    for p in &points {
        let setting = format!("{}", p.setting);
        for (n, w) in &p.heldout_w2 {
            csv.row(&[hash.clone(), axis_name.into(), setting.clone(), "w2".into(), n.to_string(), format!("{w:.10e}")])?;
        }
        csv.row(&[hash.clone(), axis_name.into(), setting, "heldout_mean_w2".into(), String::new(), format!("{:.10e}", p.heldout_mean_w2)])?;
    }
    for (j, l) in lambda_table.iter().enumerate() {
        csv.row(&[hash.clone(), "lambda".into(), (j + 1).to_string(), "abs_lambda".into(), String::new(), format!("{l:.10e}")])?;
    }

    let mut fig = Figure::new("mean heldout W2", axis_name, "W2");
    let pts = points.iter().map(|p| (p.setting, p.heldout_mean_w2)).collect::<Vec<_>>();
    fig.add(None, pts.clone(), Mark::Line, 0, 1.0);
    fig.add(None, pts, Mark::Rings, 0, 1.0);
    fig.save(&out.join(PLOT_FILE))?;
    Ok(Ablation { axis, points, lambda_table })
}
