//! Distances between empirical measures: exact W1/W2 by optimal assignment,
//! sliced W2 and RBF maximum mean discrepancy.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest assignment problem solved exactly.
pub const MAX_ASSIGNMENT: usize = 5000;
pub const DEFAULT_PROJECTIONS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::build(points, None)
    }

    pub fn weighted(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != points.len() {
            return Err(Error::Dimension {
                expected: points.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Domain("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("weights sum to {total}, not 1")));
        }
        Self::build(points, Some(weights))
    }

    fn build(points: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("empirical measure has no points".into()));
        }
        let d = points[0].len();
        if d == 0 {
            return Err(Error::Domain("points must have at least one coordinate".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: p.len(),
            });
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Domain("empirical measure has non-finite coordinates".into()));
        }
        Ok(EmpiricalMeasure { points, weights })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0 / self.points.len() as f64, |w| w[i])
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }
}

fn same_dim(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn ground_cost(a: &[f64], b: &[f64], order: u32) -> f64 {
    let d2 = sq_dist(a, b);
    if order == 2 { d2 } else { d2.sqrt() }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Minimum-cost perfect assignment on a square cost matrix; `result[row] = column`.
pub fn assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    // Shortest augmenting paths with row/column potentials, 1-based internally.
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &cost[i0 - 1];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[row_of[j] - 1] = j - 1;
    }
    result
}

/// Exact `W_order` (order 1 or 2) between uniform empirical measures.
///
/// Unequal sizes are handled by replicating both supports up to their least
/// common multiple, which must not exceed [`MAX_ASSIGNMENT`].
pub fn wasserstein(p: &EmpiricalMeasure, q: &EmpiricalMeasure, order: u32) -> Result<f64> {
    if order != 1 && order != 2 {
        return Err(Error::Domain(format!("order must be 1 or 2, got {order}")));
    }
    same_dim(p, q)?;
    if !p.is_uniform() || !q.is_uniform() {
        return Err(Error::Domain("exact assignment needs uniform weights; use sliced_wasserstein".into()));
    }
    let (n, m) = (p.len(), q.len());
    let g = gcd(n, m);
    let size = n / g * m;
    if size > MAX_ASSIGNMENT {
        return Err(Error::Domain(format!(
            "assignment of size {size} exceeds {MAX_ASSIGNMENT}; use sliced_wasserstein for large ensembles"
        )));
    }
    let rows: Vec<&[f64]> = (0..size).map(|i| p.points[i / (size / n)].as_slice()).collect();
    let cols: Vec<&[f64]> = (0..size).map(|j| q.points[j / (size / m)].as_slice()).collect();

    let perm = if p.dim() == 1 {
        sorted_assignment(&rows, &cols)
    } else {
        let cost: Vec<Vec<f64>> = rows
            .par_iter()
            .map(|a| cols.iter().map(|b| ground_cost(a, b, order)).collect())
            .collect();
        assignment(&cost)
    };
    let total: f64 = rows
        .iter()
        .zip(&perm)
        .map(|(a, &j)| ground_cost(a, cols[j], order))
        .sum();
    let mean = (total / size as f64).max(0.0);
    Ok(if order == 2 { mean.sqrt() } else { mean })
}

/// [`wasserstein`] after trimming the larger ensemble to a multiple of the
/// smaller one whenever the replicated problem would exceed [`MAX_ASSIGNMENT`].
pub fn wasserstein_trimmed(p: &EmpiricalMeasure, q: &EmpiricalMeasure, order: u32) -> Result<f64> {
    let (n, m) = (p.len(), q.len());
    if n / gcd(n, m) * m <= MAX_ASSIGNMENT {
        return wasserstein(p, q, order);
    }
    let trim = |big: &EmpiricalMeasure, small: usize| -> Result<EmpiricalMeasure> {
        let keep = (big.len() / small * small).min(MAX_ASSIGNMENT / small * small);
        if keep == 0 {
            return Err(Error::Domain(format!("ensembles of {n} and {m} points exceed the exact assignment cap")));
        }
        EmpiricalMeasure::new(big.points[..keep].to_vec())
    };
    if n >= m {
        wasserstein(&trim(p, m)?, q, order)
    } else {
        wasserstein(p, &trim(q, n)?, order)
    }
}

/// In one dimension the monotone matching is optimal for both orders.
fn sorted_assignment(rows: &[&[f64]], cols: &[&[f64]]) -> Vec<usize> {
    let mut ri: Vec<usize> = (0..rows.len()).collect();
    let mut ci: Vec<usize> = (0..cols.len()).collect();
    ri.sort_by(|&a, &b| rows[a][0].total_cmp(&rows[b][0]));
    ci.sort_by(|&a, &b| cols[a][0].total_cmp(&cols[b][0]));
    let mut perm = vec![0; rows.len()];
    for (r, c) in ri.into_iter().zip(ci) {
        perm[r] = c;
    }
    perm
}

/// Squared 1D W2 between weighted samples, by merging quantile functions.
fn w2_squared_1d(a: &mut [(f64, f64)], b: &mut [(f64, f64)]) -> f64 {
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let mass = ra.min(rb);
        let diff = a[i].0 - b[j].0;
        total += mass * diff * diff;
        ra -= mass;
        rb -= mass;
        if ra <= 1e-15 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 1e-15 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    total
}

/// Sliced W2: root mean square over random unit directions of the projected W2.
///
/// In one dimension every direction gives the same value, which is returned
/// as the exact W2.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    p: &EmpiricalMeasure,
    q: &EmpiricalMeasure,
    num_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if num_projections == 0 {
        return Err(Error::Domain("num_projections must be at least 1".into()));
    }
    same_dim(p, q)?;
    let d = p.dim();
    if d == 1 && p.is_uniform() && q.is_uniform() && gcd(p.len(), q.len()) * MAX_ASSIGNMENT >= p.len() * q.len() {
        return wasserstein(p, q, 2);
    }
    let dirs: Vec<Vec<f64>> = (0..num_projections)
        .map(|_| loop {
            let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = g.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break g.into_iter().map(|c| c / norm).collect();
            }
        })
        .collect();
    let project = |m: &EmpiricalMeasure, dir: &[f64]| -> Vec<(f64, f64)> {
        m.points
            .iter()
            .enumerate()
            .map(|(i, x)| (x.iter().zip(dir).map(|(a, b)| a * b).sum(), m.weight(i)))
            .collect()
    };
    let total: f64 = dirs
        .par_iter()
        .map(|dir| w2_squared_1d(&mut project(p, dir), &mut project(q, dir)))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok((total / num_projections as f64).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

/// Median pairwise distance of the pooled sample.
pub fn median_bandwidth(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> f64 {
    let pooled: Vec<&Vec<f64>> = p.points.iter().chain(&q.points).collect();
    let mut d: Vec<f64> = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if *m > 0.0 { *m } else { 1.0 }
}

/// Biased (V-statistic) MMD with kernel `exp(-|x - y|² / (2 h²))`; returns the
/// square root of the squared discrepancy.
pub fn mmd_rbf(p: &EmpiricalMeasure, q: &EmpiricalMeasure, bandwidth: Bandwidth) -> Result<f64> {
    same_dim(p, q)?;
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::Domain(format!("bandwidth = {h} must be positive"))),
        Bandwidth::MedianHeuristic => median_bandwidth(p, q),
    };
    let gamma = 1.0 / (2.0 * h * h);
    let mean_kernel = |a: &EmpiricalMeasure, b: &EmpiricalMeasure| -> f64 {
        (0..a.len())
            .into_par_iter()
            .map(|i| {
                let x = &a.points[i];
                let row: f64 = b
                    .points
                    .iter()
                    .enumerate()
                    .map(|(j, y)| b.weight(j) * (-gamma * sq_dist(x, y)).exp())
                    .sum();
                a.weight(i) * row
            })
            .collect::<Vec<_>>()
            .iter()
            .sum()
    };
    let sq = mean_kernel(p, p) + mean_kernel(q, q) - 2.0 * mean_kernel(p, q);
    Ok(sq.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(points: &[&[f64]]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(points.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    fn brute_force(p: &EmpiricalMeasure, q: &EmpiricalMeasure, order: u32) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, p: &EmpiricalMeasure, q: &EmpiricalMeasure, order: u32) {
            if k == perm.len() {
                let c: f64 = perm.iter().enumerate().map(|(i, &j)| ground_cost(&p.points[i], &q.points[j], order)).sum();
                *best = best.min(c);
                return;
            }
            for i in k..perm.len() {
                perm.swap(k, i);
                permute(k + 1, perm, best, p, q, order);
                perm.swap(k, i);
            }
        }
        let mut perm: Vec<usize> = (0..p.len()).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut perm, &mut best, p, q, order);
        let mean = best / p.len() as f64;
        if order == 2 { mean.sqrt() } else { mean }
    }

    #[test]
    fn small_cases() {
        assert_eq!(wasserstein(&m(&[&[0.0]]), &m(&[&[3.0]]), 2).unwrap(), 3.0);
        assert_eq!(wasserstein(&m(&[&[0.0], &[1.0]]), &m(&[&[1.0], &[2.0]]), 1).unwrap(), 1.0);
        let a = m(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        assert_eq!(wasserstein(&a, &a, 2).unwrap(), 0.0);
        assert_eq!(wasserstein(&a, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn unequal_sizes_replicate() {
        let a = m(&[&[0.0], &[2.0]]);
        let b = m(&[&[1.0]]);
        assert!((wasserstein(&a, &b, 1).unwrap() - 1.0).abs() < 1e-15);
        let a = m(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let b = m(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]]);
        // p mass 1/2 at 0 and 2; q thirds: optimal moves 1/6 from each end to the middle.
        assert!((wasserstein(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn trimming_keeps_a_multiple() {
        let a = EmpiricalMeasure::new((0..256).map(|i| vec![(i % 50) as f64]).collect()).unwrap();
        let b = EmpiricalMeasure::new((0..50).map(|i| vec![i as f64]).collect()).unwrap();
        assert!(wasserstein(&a, &b, 2).is_err());
        assert_eq!(wasserstein_trimmed(&a, &b, 2).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let a = m(&[&[0.0]]);
        let b = m(&[&[0.0, 1.0]]);
        assert!(matches!(wasserstein(&a, &b, 2), Err(Error::Dimension { .. })));
        let big: Vec<Vec<f64>> = (0..5001).map(|i| vec![i as f64]).collect();
        let big = EmpiricalMeasure::new(big).unwrap();
        assert!(wasserstein(&big, &big, 2).is_err());
        assert!(EmpiricalMeasure::new(vec![]).is_err());
        assert!(EmpiricalMeasure::weighted(vec![vec![0.0]], vec![0.5]).is_err());
        assert!(mmd_rbf(&a, &a, Bandwidth::Fixed(0.0)).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..60 {
            let n = 1 + trial % 7;
            let d = 1 + trial % 3;
            let gen = |rng: &mut ChaCha8Rng| {
                EmpiricalMeasure::new((0..n).map(|_| (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).collect()).unwrap()
            };
            let (p, q) = (gen(&mut rng), gen(&mut rng));
            for order in [1, 2] {
                // Tied optima (common for order 1 in 1D) may sum in a different order.
                let (a, b) = (wasserstein(&p, &q, order).unwrap(), brute_force(&p, &q, order));
                assert!((a - b).abs() <= 1e-12 * b.max(1e-300), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn swd_is_w2_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = m(&[&[0.3], &[-1.0], &[2.5]]);
        let q = m(&[&[0.0], &[1.0], &[4.0]]);
        assert_eq!(sliced_wasserstein(&p, &q, 7, &mut rng).unwrap(), wasserstein(&p, &q, 2).unwrap());
    }

    #[test]
    fn swd_gaussian_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2000;
        let mu = [1.5, -2.0];
        let draw = |rng: &mut ChaCha8Rng, shift: bool| -> EmpiricalMeasure {
            EmpiricalMeasure::new(
                (0..n)
                    .map(|_| {
                        (0..2)
                            .map(|k| rng.sample::<f64, _>(StandardNormal) + if shift { mu[k] } else { 0.0 })
                            .collect()
                    })
                    .collect(),
            )
            .unwrap()
        };
        let p = draw(&mut rng, false);
        let q = draw(&mut rng, true);
        let swd = sliced_wasserstein(&p, &q, 256, &mut rng).unwrap();
        let expected = 2.5 / 2f64.sqrt();
        assert!((swd - expected).abs() < 0.1 * expected, "{swd}");
    }

    #[test]
    fn weighted_quantile_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EmpiricalMeasure::weighted(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![0.25, 0.75]).unwrap();
        let q = EmpiricalMeasure::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(sliced_wasserstein(&p, &q, 16, &mut rng).unwrap() < 1e-12);
        assert!(mmd_rbf(&p, &q, Bandwidth::Fixed(1.0)).unwrap() < 1e-7);
    }

    #[test]
    fn mmd_saturates_for_far_clusters() {
        let p = m(&[&[0.0, 0.0], &[0.01, 0.0]]);
        let q = m(&[&[100.0, 0.0], &[100.0, 0.01]]);
        let v = mmd_rbf(&p, &q, Bandwidth::Fixed(1.0)).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-4);
        assert!(mmd_rbf(&p, &p, Bandwidth::MedianHeuristic).unwrap() < 1e-7);
    }

    fn cloud(max: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), 1..max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_symmetric_and_nonnegative(a in cloud(6, 2), b in cloud(6, 2), seed in 0u64..1000) {
            let p = EmpiricalMeasure::new(a).unwrap();
            let q = EmpiricalMeasure::new(b).unwrap();
            for order in [1, 2] {
                let pq = wasserstein(&p, &q, order).unwrap();
                let qp = wasserstein(&q, &p, order).unwrap();
                prop_assert!(pq >= 0.0);
                prop_assert!((pq - qp).abs() <= 1e-12 * (1.0 + pq));
                prop_assert!(wasserstein(&p, &p, order).unwrap() == 0.0);
            }
            let s1 = sliced_wasserstein(&p, &q, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let s2 = sliced_wasserstein(&q, &p, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(s1 >= 0.0 && (s1 - s2).abs() <= 1e-9 * (1.0 + s1));
            let k1 = mmd_rbf(&p, &q, Bandwidth::MedianHeuristic).unwrap();
            let k2 = mmd_rbf(&q, &p, Bandwidth::MedianHeuristic).unwrap();
            prop_assert!(k1 >= 0.0 && (k1 - k2).abs() <= 1e-9);
        }

        #[test]
        fn mmd_permutation_invariant(a in cloud(8, 3), b in cloud(8, 3)) {
            let p = EmpiricalMeasure::new(a.clone()).unwrap();
            let q = EmpiricalMeasure::new(b).unwrap();
            let mut r = a;
            r.reverse();
            let pr = EmpiricalMeasure::new(r).unwrap();
            let x = mmd_rbf(&p, &q, Bandwidth::Fixed(1.3)).unwrap();
            let y = mmd_rbf(&pr, &q, Bandwidth::Fixed(1.3)).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
