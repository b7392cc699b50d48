//! Deterministic k-means over patch vectors.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

pub const DEFAULT_SEED: u64 = 42;
pub const MAX_ITERATIONS: usize = 100;
/// Lloyd iterations stop once no center moves farther than this.
pub const MOVEMENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub centers: Vec<Vec<f64>>,
    /// Index of the center each point is assigned to.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from points to their centers.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the point closest to `center`; ties go to the lowest index.
pub fn nearest_member<P: AsRef<[f64]>>(points: &[P], center: &[f64]) -> Result<usize> {
    if points.is_empty() {
        return Err(invalid("nearest_member needs at least one point"));
    }
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = squared_distance(p.as_ref(), center);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

fn count_distinct<P: AsRef<[f64]>>(points: &[P]) -> usize {
    points
        .iter()
        .map(|p| p.as_ref().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn plus_plus_init<P: AsRef<[f64]>>(points: &[P], c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].as_ref().to_vec()];
    let mut closest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), &centers[0]))
        .collect();
    while centers.len() < c {
        // c never exceeds the number of distinct points, so some weight is positive.
        let sampler = WeightedIndex::new(&closest).expect("positive D^2 weights");
        let next = points[sampler.sample(rng)].as_ref().to_vec();
        for (d, p) in closest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p.as_ref(), &next));
        }
        centers.push(next);
    }
    centers
}

/// Assigns every point to its nearest center. Returns whether anything moved.
fn assign<P: AsRef<[f64]>>(points: &[P], centers: &[Vec<f64>], assignments: &mut [usize]) -> bool {
    let mut changed = false;
    for (p, a) in points.iter().zip(assignments.iter_mut()) {
        let nearest = nearest_member(centers, p.as_ref()).expect("centers nonempty");
        if nearest != *a {
            *a = nearest;
            changed = true;
        }
    }
    changed
}

/// Moves the point farthest from its center into each empty cluster.
fn reseed_empty<P: AsRef<[f64]>>(points: &[P], centers: &mut [Vec<f64>], assignments: &mut [usize]) {
    let c = centers.len();
    loop {
        let mut sizes = vec![0usize; c];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let farthest = (0..points.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&i, &j| {
                let di = squared_distance(points[i].as_ref(), &centers[assignments[i]]);
                let dj = squared_distance(points[j].as_ref(), &centers[assignments[j]]);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("more points than clusters");
        centers[empty] = points[farthest].as_ref().to_vec();
        assignments[farthest] = empty;
    }
}

fn means<P: AsRef<[f64]>>(points: &[P], assignments: &[usize], c: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; dim]; c];
    let mut counts = vec![0usize; c];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.as_ref()) {
            *s += v;
        }
    }
    for (s, n) in sums.iter_mut().zip(counts) {
        let n = n as f64;
        s.iter_mut().for_each(|v| *v /= n);
    }
    sums
}

fn inertia<P: AsRef<[f64]>>(points: &[P], centers: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p.as_ref(), &centers[a]))
        .sum()
}

/// Partitions `points` into `c` groups with k-means++ seeding and Lloyd
/// iterations.
///
/// `c` is reduced to the number of distinct points when it exceeds it. The
/// result is a pure function of `(points, c, seed)`.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], c: usize, seed: u64) -> Result<ClusterResult> {
    let first = points
        .first()
        .ok_or_else(|| invalid("k-means needs at least one point"))?;
    if c == 0 {
        return Err(invalid("cluster count must be >= 1"));
    }
    let dim = first.as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(invalid("k-means points must share one dimension"));
    }
    let distinct = count_distinct(points);
    let c = if c > distinct {
        log::debug!("reducing k-means cluster count from {c} to {distinct} distinct points");
        distinct
    } else {
        c
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, c, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let changed = assign(points, &centers, &mut assignments);
        reseed_empty(points, &mut centers, &mut assignments);
        history.push(inertia(points, &centers, &assignments));
        if !changed && iterations > 1 {
            break;
        }
        let updated = means(points, &assignments, c, dim);
        let movement = centers
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = updated;
        if movement < MOVEMENT_TOLERANCE {
            assign(points, &centers, &mut assignments);
            reseed_empty(points, &mut centers, &mut assignments);
            history.push(inertia(points, &centers, &assignments));
            break;
        }
    }
    let inertia = inertia(points, &centers, &assignments);
    Ok(ClusterResult {
        centers,
        assignments,
        inertia,
        iterations,
        inertia_history: history,
    })
}
