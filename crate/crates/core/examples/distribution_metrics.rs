//! W1, W2, sliced W2 and RBF MMD between Gaussian samples, next to their
//! population values where those are known.

use mmsbm::metrics::{mmd_rbf, sliced_wasserstein, wasserstein, wasserstein_trimmed, Bandwidth, EmpiricalMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, mean: [f64; 2]) -> EmpiricalMeasure {
    let pts = (0..n).map(|_| mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    EmpiricalMeasure::new(pts).expect("non-empty, equal dimensions")
}

fn main() -> mmsbm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = gaussian(&mut rng, 800, [0.0, 0.0]);
    println!("shift  W1      W2      trimmed W2  SWD (population) MMD");
    for shift in [0.0, 0.5, 1.0, 2.0] {
        let other = gaussian(&mut rng, 800, [shift, 0.0]);
        println!(
            "{shift:>5}  {:.4}  {:.4}  {:.4}      {:.4} ({:.4})  {:.4}",
            wasserstein(&base, &other, 1)?,
            wasserstein(&base, &other, 2)?,
            wasserstein_trimmed(&base, &other, 2)?,
            sliced_wasserstein(&base, &other, 256, &mut rng)?,
            shift / 2f64.sqrt(),
            mmd_rbf(&base, &other, Bandwidth::MedianHeuristic)?,
        );
    }
    Ok(())
}
