//! Trains the drift network on a small 2D mixture sequence with the library
//! API, then scores the learned dynamics against every marginal.

use mmsbm::data::{generate_gaussian_mixture_sequence, Blob, MixtureSpec};
use mmsbm::evaluation::{score, simulate_at_dataset_times, MetricSettings};
use mmsbm::matching::{train, TrainConfig};
use mmsbm::metrics::Bandwidth;
use mmsbm::nn::{NetConfig, ShadowDrift};
use mmsbm::bridge::PhaseState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mmsbm::Result<()> {
    let blob = |x: f64, y: f64| Blob { mean: vec![x, y], std: 0.1, weight: 1.0 };
    let spec = MixtureSpec {
        times: vec![0.0, 1.0, 2.0],
        samples_per_time: 150,
        blobs: vec![vec![blob(-1.0, 0.0), blob(1.0, 0.0)], vec![blob(0.0, -1.0), blob(0.0, 1.0)], vec![blob(-1.0, 0.0), blob(1.0, 0.0)]],
        roles: None,
    };
    let dataset = generate_gaussian_mixture_sequence(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;

    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 128,
        outer_iterations: 6,
        inner_steps: 800,
        coupling_size: 150,
        anchored: true,
        net: NetConfig { width: 32, ..Default::default() },
        ..Default::default()
    };
    let marginals: Vec<_> = dataset.train_marginals().into_iter().cloned().collect();
    let outcome = train(&marginals, &config, &mut |row| {
        let w2: Vec<String> = row.w2.iter().map(|w| format!("{w:.3}")).collect();
        println!("outer {}: loss {:.3} ± {:.3}, coupling W2 [{}]", row.outer, row.loss, row.loss_se, w2.join(", "));
        Ok(())
    })?;

    let starts: Vec<PhaseState> = outcome
        .coupling
        .iter()
        .zip(&outcome.coupling_v0)
        .map(|(p, v)| PhaseState::new(p.point(0).to_vec(), v.clone()))
        .collect::<mmsbm::Result<_>>()?;
    let predicted = simulate_at_dataset_times(&ShadowDrift(&outcome.net), &starts, &dataset, 500, config.sigma, 1)?;
    let settings = MetricSettings { swd_projections: 128, mmd_bandwidth: Bandwidth::MedianHeuristic, trimmed: false };
    let eval = score(&dataset, predicted, &settings, 2)?;
    for (n, w2) in eval.per_time("w2") {
        println!("marginal {n}: W2 {w2:.3}");
    }
    println!("mean W2 after the first marginal: {:.3}", eval.value("w2", "rest").unwrap_or(f64::NAN));
    Ok(())
}
