//! Euler-Maruyama simulation of second-order bridges through a few pinned
//! sets, written as an SVG of the trajectories.

use mmsbm::bridge::{ConditionalBridge, PhaseState, PinnedSet};
use mmsbm::gaussian_path::TimeGrid;
use mmsbm::plot::{Figure, Mark};
use mmsbm::sde::{path_seeds, simulate_batch, BridgeDrift, Record};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mmsbm::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "bridge_simulation.svg".into());
    let pins: Vec<PinnedSet> = (0..4)
        .map(|i| {
            let s = i as f64 * 0.4;
            PinnedSet::from_points(vec![vec![s, 0.0], vec![1.0 + s, 1.0], vec![2.0, s], vec![1.0, -1.0]])
        })
        .collect::<mmsbm::Result<_>>()?;
    let bridge = ConditionalBridge::new(3, None)?;
    let grid = TimeGrid::new(3, 1000)?;
    let drift = BridgeDrift::new(&bridge, &pins, grid);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut fig = Figure::new("pinned bridges", "x_1", "x_2");
    for (sigma, color) in [(0.0, 0), (0.5, 1)] {
        let starts: Vec<PhaseState> = pins.iter().map(|p| PhaseState::at_rest(p.point(0).to_vec())).collect();
        let seeds = path_seeds(&mut rng, starts.len());
        let paths = simulate_batch(&drift, &starts, grid, sigma, &seeds, Record::Full)?;
        for (p, tr) in pins.iter().zip(&paths) {
            let worst = (0..4)
                .map(|n| tr.snapshot(n).x.iter().zip(p.point(n)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            println!("sigma {sigma}: largest pin miss {worst:.2e}, final velocity {:?}", tr.last().v);
            let label = format!("sigma = {sigma}");
            let first = std::ptr::eq(p, &pins[0]);
            fig.add(first.then_some(label.as_str()), tr.states.iter().map(|s| (s.x[0], s.x[1])).collect(), Mark::Line, color, 0.8);
        }
    }
    for p in &pins {
        fig.add(None, p.points().iter().map(|q| (q[0], q[1])).collect(), Mark::Rings, 2, 1.0);
    }
    fig.save(out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
