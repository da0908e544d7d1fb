//! The four CLI commands driven from Rust: bridge demo, training, evaluation
//! and a pins ablation on a small vortex dataset, followed by a checkpoint
//! round trip. Pass an output directory, or a temporary one is used.

use mmsbm::checkpoint::Checkpoint;
use mmsbm::commands::{ablate_command, demo_bridge, evaluate_command, train_command, CHECKPOINT_FILE};
use mmsbm::config::RunConfig;

const CONFIG: &str = r#"{
  "data": { "generator": { "kind": "vortex", "n_samples": 120, "times": [0, 1, 2, 3, 4] } },
  "bridge": { "pinned_points": [[0, 0], [1, 1], [2, 0]], "num_paths": 5 },
  "train": {
    "learning_rate": 1e-3, "batch_size": 100, "outer_iterations": 4, "inner_steps": 600,
    "coupling_size": 120, "anchored": true, "net": { "width": 32 }
  },
  "eval": { "steps_per_unit": 500, "ablation": { "axis": "pins", "truncations": [1, 2] } }
}"#;

fn main() -> mmsbm::Result<()> {
    let tmp = tempfile::tempdir().map_err(|e| mmsbm::Error::io("tempdir", e))?;
    let mut config = RunConfig::from_json(CONFIG)?;
    config.output.dir = std::env::args().nth(1).map_or_else(|| tmp.path().to_path_buf(), Into::into);
    config.validate()?;
    println!("config hash {}", config.hash());

    let demo = demo_bridge(&config)?;
    println!("demo: {} paths, worst pin error {:.2e}", demo.num_paths, demo.pin_errors.iter().cloned().fold(0.0, f64::max));

    let trained = train_command(&config)?;
    println!("trained {} outer iterations, checkpoint hash {}", trained.outcome.outer_completed, trained.checkpoint.meta.config_hash);

    let eval = evaluate_command(&config)?;
    for metric in ["w1", "w2", "swd", "mmd"] {
        println!(
            "{metric}: train rest {:.3}, heldout mean {:.3}",
            eval.value(metric, "rest").unwrap_or(f64::NAN),
            eval.value(metric, "heldout_mean").unwrap_or(f64::NAN)
        );
    }

    let ablation = ablate_command(&config)?;
    for p in &ablation.points {
        println!("truncation {}: heldout W2 {:.3}", p.setting, p.heldout_mean_w2);
    }

    let path = config.output.dir.join(CHECKPOINT_FILE);
    let ckpt = Checkpoint::load(&path)?;
    let again = Checkpoint::from_bytes(&ckpt.to_bytes())?;
    assert_eq!(again, ckpt);
    println!(
        "checkpoint: {} parameters, dim {}, {} coupled paths, trained at times {:?}",
        ckpt.meta.num_params,
        ckpt.meta.dim,
        ckpt.meta.coupling.len(),
        ckpt.meta.train_times
    );
    Ok(())
}
