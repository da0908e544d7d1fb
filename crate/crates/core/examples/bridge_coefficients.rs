//! Closed-form bridge coefficients, and how they compare with the finite-c
//! soft-constraint solution on a three-marginal problem.

use mmsbm::bridge::{
    lambda_vector, segment_alpha_beta, ConditionalBridge, FiniteCOracle, OracleIntegrator, SoftConstraintConfig,
};

fn main() -> mmsbm::Result<()> {
    println!("future pins  alpha  beta  lambda");
    for k in 1..=4 {
        let (a, b) = segment_alpha_beta(k)?;
        let lambda: Vec<String> = lambda_vector(k)?.iter().map(|l| format!("{l:+.4}")).collect();
        println!("{k:>11}  {a:>5}  {b:>4}  [{}]", lambda.join(", "));
    }

    // Three pins at t = 0, 1, 2; acceleration of the state (x, v) = (0.2, 0.5).
    let pins = vec![vec![0.0], vec![1.0], vec![0.0]];
    let bridge = ConditionalBridge::new(2, None)?;
    for c in [1e-4, 1e-6, 1e-8] {
        let cfg = SoftConstraintConfig { c, sigma: 0.3, ..Default::default() };
        let oracle = FiniteCOracle::new(&[0.0, 1.0, 2.0], &pins, &cfg, OracleIntegrator::Exact)?;
        print!("c = {c:.0e}:");
        for t in [0.25, 0.5, 0.9, 1.5] {
            let mut closed = [0.0];
            bridge.accelerate(t, &[0.2], &[0.5], &pins, &mut closed);
            let finite = oracle.acceleration(t, &[0.2], &[0.5])?;
            print!("  t={t}: {:.4} vs {:.4}", closed[0], finite[0]);
        }
        println!();
    }
    Ok(())
}
