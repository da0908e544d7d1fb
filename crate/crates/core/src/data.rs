//! Snapshot datasets: synthetic generators and CSV ingestion.
//!
//! CSV layout: header `time_index,sample_id,x_0,...,x_{d-1}`, one row per
//! sample. A sidecar manifest `<stem>.manifest.json` holds
//! `{"times": [...], "roles": ["train" | "heldout", ...], "dimension": d}`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::distr::{Distribution, weighted::WeightedIndex};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EmpiricalMeasure;
use crate::schedule::SnapshotSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Heldout,
}

/// Even indices train, odd indices held out.
pub fn alternating_roles(n: usize) -> Vec<Role> {
    (0..n)
        .map(|i| if i % 2 == 0 { Role::Train } else { Role::Heldout })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub schedule: SnapshotSchedule,
    pub marginals: Vec<EmpiricalMeasure>,
    pub roles: Vec<Role>,
}

impl SnapshotDataset {
    pub fn new(schedule: SnapshotSchedule, marginals: Vec<EmpiricalMeasure>, roles: Vec<Role>) -> Result<Self> {
        let n = schedule.num_marginals();
        if marginals.len() != n || roles.len() != n {
            return Err(Error::Domain(format!(
                "{} times but {} marginals and {} roles",
                n,
                marginals.len(),
                roles.len()
            )));
        }
        let d = marginals[0].dim();
        if let Some(m) = marginals.iter().find(|m| m.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: m.dim(),
            });
        }
        Ok(SnapshotDataset {
            schedule,
            marginals,
            roles,
        })
    }

    pub fn dim(&self) -> usize {
        self.marginals[0].dim()
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }

    /// Schedule over the training times only.
    pub fn train_schedule(&self) -> Result<SnapshotSchedule> {
        let raw = self.schedule.raw_times();
        let times: Vec<f64> = self.indices(Role::Train).iter().map(|&i| raw[i]).collect();
        SnapshotSchedule::new(&times)
    }

    pub fn train_marginals(&self) -> Vec<&EmpiricalMeasure> {
        self.indices(Role::Train).iter().map(|&i| &self.marginals[i]).collect()
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LotkaVolterraParams {
    /// Prey growth.
    pub alpha: f64,
    /// Predation.
    pub beta: f64,
    /// Predator decay.
    pub gamma: f64,
    /// Predator growth from predation.
    pub delta: f64,
    pub initial: [f64; 2],
    /// Relative standard deviation of the initial-condition perturbation.
    pub ic_jitter: f64,
}

impl Default for LotkaVolterraParams {
    fn default() -> Self {
        LotkaVolterraParams {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            initial: [1.6, 1.0],
            ic_jitter: 0.1,
        }
    }
}

impl LotkaVolterraParams {
    fn rhs(&self, s: [f64; 2]) -> [f64; 2] {
        let [x, y] = s;
        [self.alpha * x - self.beta * x * y, self.delta * x * y - self.gamma * y]
    }

    /// Conserved quantity of the flow.
    pub fn invariant(&self, s: [f64; 2]) -> f64 {
        let [x, y] = s;
        self.delta * x - self.gamma * x.ln() + self.beta * y - self.alpha * y.ln()
    }

    /// RK4 flow from `s` over `duration`.
    pub fn flow(&self, mut s: [f64; 2], duration: f64) -> Result<[f64; 2]> {
        const DT: f64 = 1e-3;
        let steps = (duration / DT).ceil().max(1.0) as usize;
        let h = duration / steps as f64;
        let add = |a: [f64; 2], b: [f64; 2], k: f64| [a[0] + k * b[0], a[1] + k * b[1]];
        for i in 0..steps {
            let k1 = self.rhs(s);
            let k2 = self.rhs(add(s, k1, h / 2.0));
            let k3 = self.rhs(add(s, k2, h / 2.0));
            let k4 = self.rhs(add(s, k3, h));
            for c in 0..2 {
                s[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
            if !s.iter().all(|c| c.is_finite() && c.abs() < 1e6) {
                return Err(Error::Domain(format!(
                    "Lotka-Volterra flow blew up at t = {:.3}; check the rates",
                    (i + 1) as f64 * h
                )));
            }
        }
        Ok(s)
    }
}

pub fn generate_lotka_volterra<R: Rng + ?Sized>(
    params: &LotkaVolterraParams,
    n_samples: usize,
    times: &[f64],
    obs_noise: f64,
    rng: &mut R,
) -> Result<SnapshotDataset> {
    let p = params;
    if [p.alpha, p.beta, p.gamma, p.delta].iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Domain("Lotka-Volterra rates must be positive".into()));
    }
    if p.initial.iter().any(|c| !(*c > 0.0)) || p.ic_jitter < 0.0 || obs_noise < 0.0 || n_samples == 0 {
        return Err(Error::Domain("invalid Lotka-Volterra initial state, jitter, noise or sample count".into()));
    }
    let schedule = SnapshotSchedule::new(times)?;
    let mut marginals = vec![Vec::with_capacity(n_samples); times.len()];
    for _ in 0..n_samples {
        let mut s = [0.0; 2];
        for c in 0..2 {
            s[c] = (p.initial[c] * (1.0 + p.ic_jitter * gaussian(rng))).max(1e-3);
        }
        let mut now = 0.0;
        for (n, &t) in times.iter().enumerate() {
            if t > now {
                s = params.flow(s, t - now)?;
                now = t;
            }
            marginals[n].push(vec![s[0] + obs_noise * gaussian(rng), s[1] + obs_noise * gaussian(rng)]);
        }
    }
    let marginals = marginals.into_iter().map(EmpiricalMeasure::new).collect::<Result<_>>()?;
    SnapshotDataset::new(schedule, marginals, alternating_roles(times.len()))
}

/// A half annulus (radii 1 to 1.5) rotated by `angular_speed` per unit time, with radial jitter.
pub fn generate_vortex_2d<R: Rng + ?Sized>(
    n_samples: usize,
    times: &[f64],
    angular_speed: f64,
    noise: f64,
    rng: &mut R,
) -> Result<SnapshotDataset> {
    if n_samples == 0 || noise < 0.0 {
        return Err(Error::Domain("vortex needs samples and non-negative noise".into()));
    }
    let schedule = SnapshotSchedule::new(times)?;
    let base: Vec<(f64, f64)> = (0..n_samples)
        .map(|_| (1.0 + 0.5 * rng.random::<f64>(), PI * rng.random::<f64>()))
        .collect();
    let marginals = times
        .iter()
        .map(|&t| {
            let pts = base
                .iter()
                .map(|&(r, th)| {
                    let r = r + noise * gaussian(rng);
                    let a = th + angular_speed * (t - times[0]);
                    vec![r * a.cos(), r * a.sin()]
                })
                .collect();
            EmpiricalMeasure::new(pts)
        })
        .collect::<Result<_>>()?;
    SnapshotDataset::new(schedule, marginals, alternating_roles(times.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub mean: Vec<f64>,
    #[serde(default)]
    pub std: f64,
    #[serde(default = "unit")]
    pub weight: f64,
}

fn unit() -> f64 {
    1.0
}

/// Per-time Gaussian blobs; `blobs[n]` are the components at `times[n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub times: Vec<f64>,
    pub samples_per_time: usize,
    pub blobs: Vec<Vec<Blob>>,
    #[serde(default)]
    pub roles: Option<Vec<Role>>,
}

pub fn generate_gaussian_mixture_sequence<R: Rng + ?Sized>(spec: &MixtureSpec, rng: &mut R) -> Result<SnapshotDataset> {
    let bad = |m: String| Error::config("data.mixture", m);
    if spec.blobs.len() != spec.times.len() {
        return Err(bad(format!("{} blob lists for {} times", spec.blobs.len(), spec.times.len())));
    }
    if spec.samples_per_time == 0 {
        return Err(bad("samples_per_time must be positive".into()));
    }
    let d = spec
        .blobs
        .first()
        .and_then(|b| b.first())
        .map(|b| b.mean.len())
        .ok_or_else(|| bad("no blobs".into()))?;
    let schedule = SnapshotSchedule::new(&spec.times)?;
    let mut marginals = Vec::with_capacity(spec.times.len());
    for (n, blobs) in spec.blobs.iter().enumerate() {
        if blobs.is_empty() || blobs.iter().any(|b| b.mean.len() != d || !(b.std >= 0.0) || !(b.weight > 0.0)) {
            return Err(bad(format!("time {n}: blobs need dimension {d}, std >= 0 and weight > 0")));
        }
        let pick = WeightedIndex::new(blobs.iter().map(|b| b.weight)).map_err(|e| bad(e.to_string()))?;
        let pts = (0..spec.samples_per_time)
            .map(|_| {
                let b = &blobs[pick.sample(rng)];
                b.mean.iter().map(|m| m + b.std * gaussian(rng)).collect()
            })
            .collect();
        marginals.push(EmpiricalMeasure::new(pts)?);
    }
    let roles = spec.roles.clone().unwrap_or_else(|| vec![Role::Train; spec.times.len()]);
    SnapshotDataset::new(schedule, marginals, roles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub times: Vec<f64>,
    pub roles: Vec<Role>,
    pub dimension: usize,
}

pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.json")
}

pub fn write_csv(dataset: &SnapshotDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = dataset.dim();
    let header: Vec<String> = ["time_index".to_string(), "sample_id".to_string()]
        .into_iter()
        .chain((0..d).map(|k| format!("x_{k}")))
        .collect();
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (n, m) in dataset.marginals.iter().enumerate() {
        for (i, p) in m.points().iter().enumerate() {
            write!(w, "{n},{i}").map_err(io)?;
            for c in p {
                write!(w, ",{c:.16e}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    let manifest = Manifest {
        times: dataset.schedule.raw_times().to_vec(),
        roles: dataset.roles.clone(),
        dimension: d,
    };
    let mp = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mp, json).map_err(|e| Error::io(mp, e))
}

/// Reads a snapshot CSV. Without a manifest, raw times are the time indices and roles alternate.
pub fn read_csv(path: &Path) -> Result<SnapshotDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let parse = |line: u64, message: String| Error::Parse {
        file: name.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let header = reader.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    let d = header.len().saturating_sub(2);
    let expected: Vec<String> = ["time_index".to_string(), "sample_id".to_string()]
        .into_iter()
        .chain((0..d).map(|k| format!("x_{k}")))
        .collect();
    if d == 0 || header.iter().zip(&expected).any(|(a, b)| a.trim() != b) {
        return Err(parse(
            1,
            format!("header must be `time_index,sample_id,x_0,...`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows: Vec<(usize, u64, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let int = |i: usize, what: &str| -> Result<u64> {
            record[i].trim().parse::<u64>().map_err(|_| parse(line, format!("{what} `{}` is not a non-negative integer", &record[i])))
        };
        let n = int(0, "time_index")? as usize;
        let id = int(1, "sample_id")?;
        let x = (2..record.len())
            .map(|i| {
                record[i]
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse(line, format!("column {} value `{}` is not a finite number", &header[i], &record[i])))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((n, id, x));
    }
    let num_times = rows.iter().map(|r| r.0 + 1).max().ok_or_else(|| parse(2, "no data rows".into()))?;
    let mut marginals: Vec<Vec<(u64, Vec<f64>)>> = vec![Vec::new(); num_times];
    for (n, id, x) in rows {
        marginals[n].push((id, x));
    }
    if let Some(n) = marginals.iter().position(|m| m.is_empty()) {
        return Err(parse(0, format!("time_index {n} has no samples")));
    }
    let marginals = marginals
        .into_iter()
        .map(|mut m| {
            m.sort_by_key(|(id, _)| *id);
            EmpiricalMeasure::new(m.into_iter().map(|(_, x)| x).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mp = manifest_path(path);
    let (times, roles) = if mp.exists() {
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: mp.display().to_string(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        if m.dimension != d {
            return Err(Error::Dimension {
                expected: m.dimension,
                found: d,
            });
        }
        if m.times.len() != num_times {
            return Err(parse(0, format!("manifest lists {} times, data has {num_times}", m.times.len())));
        }
        (m.times, m.roles)
    } else {
        ((0..num_times).map(|n| n as f64).collect(), alternating_roles(num_times))
    };
    SnapshotDataset::new(SnapshotSchedule::new(&times)?, marginals, roles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::wasserstein;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lv_times() -> Vec<f64> {
        (0..9).map(|i| 0.8 * i as f64).collect()
    }

    #[test]
    fn lv_defaults_shape_and_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = generate_lotka_volterra(&Default::default(), 50, &lv_times(), 0.05, &mut rng).unwrap();
        assert_eq!(ds.marginals.len(), 9);
        assert!(ds.marginals.iter().all(|m| m.len() == 50 && m.dim() == 2));
        assert_eq!(ds.indices(Role::Train), vec![0, 2, 4, 6, 8]);
        assert_eq!(ds.train_schedule().unwrap().normalized_times(), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn lv_point_mass_without_noise() {
        let p = LotkaVolterraParams { ic_jitter: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = generate_lotka_volterra(&p, 5, &lv_times(), 0.0, &mut rng).unwrap();
        for m in &ds.marginals {
            assert!(m.points().iter().all(|x| x == &m.points()[0]));
        }
    }

    #[test]
    fn lv_conserves_invariant_and_is_periodic_near_center() {
        let p = LotkaVolterraParams::default();
        let s0 = [1.6, 1.0];
        let s1 = p.flow(s0, 5.0).unwrap();
        assert!((p.invariant(s0) - p.invariant(s1)).abs() < 1e-9);
        let near = [1.05, 1.0];
        let back = p.flow(near, 2.0 * PI).unwrap();
        let rel = ((back[0] - near[0]).powi(2) + (back[1] - near[1]).powi(2)).sqrt() / 1.05;
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn lv_rejects_bad_rates() {
        let p = LotkaVolterraParams { gamma: 0.0, ..Default::default() };
        assert!(generate_lotka_volterra(&p, 5, &lv_times(), 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn vortex_rotation_symmetry() {
        let times: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let still = generate_vortex_2d(30, &times, 0.0, 0.0, &mut rng).unwrap();
        assert!(still.marginals.iter().all(|m| m == &still.marginals[0]));

        let ds = generate_vortex_2d(300, &times, PI / 4.0, 0.0, &mut rng).unwrap();
        let (c, s) = ((PI / 4.0).cos(), (PI / 4.0).sin());
        for (p, q) in ds.marginals[0].points().iter().zip(ds.marginals[1].points()) {
            let r = [c * p[0] - s * p[1], s * p[0] + c * p[1]];
            assert!((r[0] - q[0]).abs() < 1e-12 && (r[1] - q[1]).abs() < 1e-12);
        }
    }

    fn swap_spec() -> MixtureSpec {
        let blob = |x: f64| Blob { mean: vec![x, 0.0], std: 0.0, weight: 1.0 };
        MixtureSpec {
            times: vec![0.0, 1.0, 2.0],
            samples_per_time: 40,
            blobs: vec![vec![blob(-1.0), blob(1.0)], vec![blob(0.0)], vec![blob(-1.0), blob(1.0)]],
            roles: None,
        }
    }

    #[test]
    fn mixture_point_masses_and_known_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = generate_gaussian_mixture_sequence(&swap_spec(), &mut rng).unwrap();
        // Every point of the middle marginal is the origin, every outer point is at distance 1.
        assert!((wasserstein(&ds.marginals[0], &ds.marginals[1], 2).unwrap() - 1.0).abs() < 1e-12);
        assert!(ds.marginals[1].points().iter().all(|p| p == &vec![0.0, 0.0]));
    }

    #[test]
    fn mixture_rejects_malformed_spec() {
        let mut spec = swap_spec();
        spec.blobs[1][0].mean = vec![0.0];
        assert!(generate_gaussian_mixture_sequence(&spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(serde_json::from_str::<MixtureSpec>(r#"{"times": [0], "samples_per_time": 1, "blobs": [], "extra": 1}"#).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lv.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = generate_lotka_volterra(&Default::default(), 20, &lv_times(), 0.05, &mut rng).unwrap();
        write_csv(&ds, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), ds);

        let mix = generate_gaussian_mixture_sequence(&swap_spec(), &mut rng).unwrap();
        write_csv(&mix, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), mix);
    }

    #[test]
    fn wide_rows_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.csv");
        let pts: Vec<Vec<f64>> = (0..3).map(|i| (0..100).map(|k| (i * k) as f64 * 0.01).collect()).collect();
        let m = EmpiricalMeasure::new(pts).unwrap();
        let ds = SnapshotDataset::new(SnapshotSchedule::new(&[0.0, 1.0]).unwrap(), vec![m.clone(), m], alternating_roles(2)).unwrap();
        write_csv(&ds, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap().dim(), 100);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0,0,1.0\n1,0,2.0\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Parse { line: 1, .. })));

        std::fs::write(&path, "time_index,sample_id,x_0,x_1\n0,0,1.0,2.0\n0,1,1.0\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Parse { line: 3, .. })));

        std::fs::write(&path, "time_index,sample_id,x_0\n0,0,1.0\n1,0,abc\n").unwrap();
        match read_csv(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("x_0"));
            }
            other => panic!("{other:?}"),
        }
    }
}
