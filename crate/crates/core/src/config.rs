//! JSON run configuration shared by every CLI command.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::SoftConstraintConfig;
use crate::data::{
    generate_gaussian_mixture_sequence, generate_lotka_volterra, generate_vortex_2d, read_csv, LotkaVolterraParams,
    MixtureSpec, SnapshotDataset,
};
use crate::error::{Error, Result};
use crate::matching::TrainConfig;
use crate::metrics::DEFAULT_PROJECTIONS;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub bridge: BridgeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV snapshot file; its manifest sidecar supplies times and roles.
    pub path: Option<PathBuf>,
    /// Synthetic dataset, used when `path` is absent.
    pub generator: Option<Generator>,
    /// Seed for synthetic data, independent of the training seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, generator: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    LotkaVolterra {
        #[serde(default)]
        params: LotkaVolterraParams,
        #[serde(default = "lv_samples")]
        n_samples: usize,
        #[serde(default = "lv_times")]
        times: Vec<f64>,
        #[serde(default = "lv_noise")]
        obs_noise: f64,
    },
    Vortex {
        #[serde(default = "vortex_samples")]
        n_samples: usize,
        #[serde(default = "unit_times")]
        times: Vec<f64>,
        #[serde(default = "quarter_turn")]
        angular_speed: f64,
        #[serde(default = "vortex_noise")]
        noise: f64,
    },
    Mixture(MixtureSpec),
}

fn lv_samples() -> usize {
    50
}
fn lv_times() -> Vec<f64> {
    (0..9).map(|i| 0.8 * i as f64).collect()
}
fn lv_noise() -> f64 {
    0.05
}
fn vortex_samples() -> usize {
    300
}
fn unit_times() -> Vec<f64> {
    (0..9).map(f64::from).collect()
}
fn quarter_turn() -> f64 {
    PI / 4.0
}
fn vortex_noise() -> f64 {
    0.05
}

/// Bridge demo settings plus the soft-constraint oracle parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    /// Positions the demo paths are pinned to, one per unit time.
    pub pinned_points: Vec<Vec<f64>>,
    pub sigma: f64,
    pub num_paths: usize,
    pub steps_per_unit: usize,
    /// Initial velocity of the demo paths; zero when absent.
    pub v0: Option<Vec<f64>>,
    pub truncation_k: Option<usize>,
    /// Soft-constraint scale of the finite-c oracle.
    pub c: f64,
    pub ode_steps: usize,
    /// Compare the closed form against the finite-c oracle in the demo.
    pub oracle_check: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        let soft = SoftConstraintConfig::default();
        BridgeConfig {
            pinned_points: vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]],
            sigma: 0.3,
            num_paths: 20,
            steps_per_unit: 2000,
            v0: None,
            truncation_k: None,
            c: soft.c,
            ode_steps: soft.ode_steps,
            oracle_check: true,
        }
    }
}

impl BridgeConfig {
    pub fn soft_constraint(&self) -> SoftConstraintConfig {
        SoftConstraintConfig { c: self.c, sigma: self.sigma, ode_steps: self.ode_steps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Pins,
    Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Checkpoint to evaluate; defaults to `checkpoint.bin` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub steps_per_unit: usize,
    /// Simulated trajectories; defaults to the checkpoint's coupling size.
    pub num_paths: Option<usize>,
    pub swd_projections: usize,
    /// RBF bandwidth for MMD; median heuristic when absent.
    pub mmd_bandwidth: Option<f64>,
    /// Fraction of each ensemble's costliest matches dropped from W2 (0 keeps all).
    pub trim: f64,
    pub plot: bool,
    pub ablation: AblationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            steps_per_unit: 2000,
            num_paths: None,
            swd_projections: DEFAULT_PROJECTIONS,
            mmd_bandwidth: None,
            trim: 0.0,
            plot: true,
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub axis: AblationAxis,
    /// Truncation levels to sweep; 1..=N when absent.
    pub truncations: Option<Vec<usize>>,
    pub sigmas: Vec<f64>,
    /// Length of the lambda-decay table printed alongside the pins sweep.
    pub lambda_future: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { axis: AblationAxis::Pins, truncations: None, sigmas: vec![0.1, 0.3, 1.0], lambda_future: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "<root>".to_string() } else { path };
            Error::config(path, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks cross-field constraints before any computation starts.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match (&self.data.path, &self.data.generator) {
            (Some(p), _) if !p.is_file() => {
                return Err(Error::config("data.path", format!("no such file: {}", p.display())));
            }
            (None, None) => {
                return Err(Error::config("data.path", "a dataset path or data.generator is required"));
            }
            _ => {}
        }
        let b = &self.bridge;
        if !(b.sigma >= 0.0 && b.sigma.is_finite()) {
            return Err(Error::config("bridge.sigma", "must be finite and non-negative"));
        }
        if b.steps_per_unit == 0 {
            return Err(Error::config("bridge.steps_per_unit", "must be positive"));
        }
        if !(b.c > 0.0) {
            return Err(Error::config("bridge.c", "must be positive"));
        }
        if b.ode_steps == 0 {
            return Err(Error::config("bridge.ode_steps", "must be positive"));
        }
        let e = &self.eval;
        if e.steps_per_unit == 0 {
            return Err(Error::config("eval.steps_per_unit", "must be positive"));
        }
        if e.swd_projections == 0 {
            return Err(Error::config("eval.swd_projections", "must be positive"));
        }
        if e.num_paths == Some(0) {
            return Err(Error::config("eval.num_paths", "must be positive"));
        }
        if matches!(e.mmd_bandwidth, Some(h) if !(h > 0.0)) {
            return Err(Error::config("eval.mmd_bandwidth", "must be positive"));
        }
        if !(0.0..0.5).contains(&e.trim) {
            return Err(Error::config("eval.trim", "must lie in [0, 0.5)"));
        }
        if e.ablation.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("eval.ablation.sigmas", "every sigma must be positive"));
        }
        if matches!(&e.ablation.truncations, Some(k) if k.contains(&0)) {
            return Err(Error::config("eval.ablation.truncations", "truncation levels start at 1"));
        }
        Ok(())
    }

    /// Validates the demo-bridge section only; the dataset is not needed there.
    pub fn validate_bridge(&self) -> Result<()> {
        let b = &self.bridge;
        if b.pinned_points.len() < 2 {
            return Err(Error::config("bridge.pinned_points", "needs at least two points"));
        }
        let d = b.pinned_points[0].len();
        if d == 0 || b.pinned_points.iter().any(|p| p.len() != d) {
            return Err(Error::config("bridge.pinned_points", "points must share a positive dimension"));
        }
        if matches!(&b.v0, Some(v) if v.len() != d) {
            return Err(Error::config("bridge.v0", format!("expected {d} components")));
        }
        if matches!(b.truncation_k, Some(0)) {
            return Err(Error::config("bridge.truncation_k", "must be at least 1"));
        }
        if !(b.sigma >= 0.0 && b.sigma.is_finite()) {
            return Err(Error::config("bridge.sigma", "must be finite and non-negative"));
        }
        if b.steps_per_unit == 0 {
            return Err(Error::config("bridge.steps_per_unit", "must be positive"));
        }
        if !(b.c > 0.0) || b.ode_steps == 0 {
            return Err(Error::config("bridge.c", "c and ode_steps must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form without `output`, hex encoded, so
    /// the same run written to two directories hashes the same.
    pub fn hash(&self) -> String {
        let mut value = self.to_value();
        if let Some(map) = value.as_object_mut() {
            map.remove("output");
        }
        let json = serde_json::to_vec(&value).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn load_dataset(&self) -> Result<SnapshotDataset> {
        if let Some(path) = &self.data.path {
            return read_csv(path);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.data.seed);
        match &self.data.generator {
            Some(Generator::LotkaVolterra { params, n_samples, times, obs_noise }) => {
                generate_lotka_volterra(params, *n_samples, times, *obs_noise, &mut rng)
            }
            Some(Generator::Vortex { n_samples, times, angular_speed, noise }) => {
                generate_vortex_2d(*n_samples, times, *angular_speed, *noise, &mut rng)
            }
            Some(Generator::Mixture(spec)) => generate_gaussian_mixture_sequence(spec, &mut rng),
            None => Err(Error::config("data.path", "a dataset path or data.generator is required")),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval.checkpoint.clone().unwrap_or_else(|| self.output.dir.join("checkpoint.bin"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(err: Error) -> String {
        match err {
            Error::Config { path, .. } => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = RunConfig::from_json(r#"{"train": {"net": {"widht": 3}}}"#).unwrap_err();
        assert_eq!(field(err), "train.net.widht");
        let err = RunConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert_eq!(field(err), "bogus");
    }

    #[test]
    fn wrong_types_name_their_path() {
        let err = RunConfig::from_json(r#"{"train": {"sigma": "big"}}"#).unwrap_err();
        assert_eq!(field(err), "train.sigma");
        let err = RunConfig::from_json(r#"{"bridge": {"c": []}}"#).unwrap_err();
        assert_eq!(field(err), "bridge.c");
    }

    #[test]
    fn missing_dataset_is_reported_as_data_path() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(field(cfg.validate().unwrap_err()), "data.path");
        let cfg = RunConfig::from_json(r#"{"data": {"path": "/nonexistent/x.csv"}}"#).unwrap();
        assert_eq!(field(cfg.validate().unwrap_err()), "data.path");
    }

    #[test]
    fn every_train_and_soft_constraint_field_is_addressable() {
        let json = r#"{
            "data": {"generator": {"kind": "vortex", "n_samples": 10}},
            "bridge": {"c": 1e-4, "sigma": 0.5, "ode_steps": 100},
            "train": {"sigma": 0.2, "batch_size": 8, "learning_rate": 1e-3, "outer_iterations": 2,
                      "inner_steps": 3, "refinement_rounds": 1, "truncation_k": 2, "seed": 9,
                      "coupling_size": 16, "steps_per_unit": 20, "path_steps_per_unit": 50,
                      "ema_decay": 0.9, "anchored": true, "stop_on_plateau": true,
                      "plateau_tolerance": 0.01,
                      "optimizer": {"beta1": 0.8, "beta2": 0.99, "eps": 1e-6, "weight_decay": 0.0},
                      "net": {"width": 8, "blocks": 1, "frequencies": 2}}
        }"#;
        let cfg = RunConfig::from_json(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.truncation_k, Some(2));
        assert_eq!(cfg.train.net.width, 8);
        assert_eq!(cfg.bridge.soft_constraint(), SoftConstraintConfig { c: 1e-4, sigma: 0.5, ode_steps: 100 });
        assert_eq!(cfg.load_dataset().unwrap().marginals[0].len(), 10);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.data.generator = Some(Generator::LotkaVolterra {
            params: LotkaVolterraParams::default(),
            n_samples: 5,
            times: lv_times(),
            obs_noise: 0.0,
        });
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
