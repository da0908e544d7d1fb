//! Draws phase-space states from the conditional Gaussian path of one pinned
//! set and checks the sample moments against the closed-form mean and covariance.

use mmsbm::bridge::{ConditionalBridge, PinnedSet};
use mmsbm::gaussian_path::{PathSampler, TimeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mmsbm::Result<()> {
    let sigma = 0.5;
    let pinned = PinnedSet::from_points(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]])?;
    let v0 = vec![1.0, 0.0];
    let bridge = ConditionalBridge::new(2, None)?;
    let sampler = PathSampler::new(&bridge, TimeGrid::new(2, 1000)?, sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 20_000;

    println!("   t   mean x0 (exact / sampled)   var x0 (exact / sampled)   cov(x0, v0)");
    for t in [0.0, 0.3, 0.7, 1.0, 1.4, 1.9] {
        let exact = sampler.mean_at(t, pinned.points(), &v0);
        let cov = sampler.covariance().covariance_at(t);
        let draws: Vec<_> = (0..n).map(|_| sampler.sample(t, pinned.points(), &v0, &mut rng)).collect();
        let mx = draws.iter().map(|s| s.x[0]).sum::<f64>() / n as f64;
        let mv = draws.iter().map(|s| s.v[0]).sum::<f64>() / n as f64;
        let vx = draws.iter().map(|s| (s.x[0] - mx).powi(2)).sum::<f64>() / n as f64;
        let cxv = draws.iter().map(|s| (s.x[0] - mx) * (s.v[0] - mv)).sum::<f64>() / n as f64;
        println!(
            "{t:>4}   {:>8.4} / {mx:>8.4}          {:>8.5} / {vx:>8.5}       {:>8.5} / {cxv:>8.5}",
            exact.x[0], cov[0], cov[1]
        );
    }
    Ok(())
}
