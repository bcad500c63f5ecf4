use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{LsptError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans<T> {
    /// `[k × D]`, in initialization order.
    pub centroids: Tensor<T>,
    pub assignments: Vec<usize>,
    /// Lloyd iterations actually run.
    pub iterations: usize,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Nearest centroid, ties to the lowest index.
fn nearest<T: Scalar>(point: &[T], centroids: &[T], d: usize) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centroids.chunks(d).enumerate() {
        let dist = sq_dist(point, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

/// Lloyd's k-means over the rows of `points`.
///
/// Centroids start at the first `k` bitwise-distinct rows of a seeded
/// shuffle; if fewer exist, the shuffle order fills the rest. A cluster that
/// ends up empty is re-seeded to the point farthest from its own centroid.
/// Stops early once assignments stop changing.
pub fn lloyd_kmeans<T: Scalar>(points: &Tensor<T>, k: usize, iters: usize, seed: u64) -> Result<KMeans<T>> {
    if points.shape().len() != 2 {
        return Err(LsptError::contract("k-means expects a 2-D point matrix"));
    }
    let (n, d) = (points.rows(), points.cols());
    if k > n {
        return Err(LsptError::contract(format!("k-means with k={k} on {n} points")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.iter().any(|&j| points.row(j) == points.row(i)) {
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let mut centroids: Vec<T> = chosen.iter().flat_map(|&i| points.row(i).iter().copied()).collect();
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    if k > 0 {
        for _ in 0..iters {
            let next: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centroids, d).0).collect();
            if next == assignments {
                break;
            }
            assignments = next;
            iterations += 1;
            update_centroids(points, &mut assignments, &mut centroids, k);
        }
        if iterations == 0 || assignments.contains(&usize::MAX) {
            assignments = (0..n).map(|i| nearest(points.row(i), &centroids, d).0).collect();
        }
    }
    Ok(KMeans {
        centroids: Tensor::new(vec![k, d], centroids)?,
        assignments,
        iterations,
    })
}

fn update_centroids<T: Scalar>(points: &Tensor<T>, assignments: &mut [usize], centroids: &mut [T], k: usize) {
    let d = points.cols();
    let mut sums = vec![T::zero(); k * d];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let inv = T::lit(counts[j] as f64);
        for (c, &s) in centroids[j * d..(j + 1) * d].iter_mut().zip(&sums[j * d..(j + 1) * d]) {
            *c = s / inv;
        }
    }
    for j in 0..k {
        if counts[j] != 0 {
            continue;
        }
        // farthest point from its own centroid, ties to the lowest index
        let mut far = (0, T::neg_infinity());
        for (i, &a) in assignments.iter().enumerate() {
            if counts[a] <= 1 {
                continue;
            }
            let dist = sq_dist(points.row(i), &centroids[a * d..(a + 1) * d]);
            if dist > far.1 {
                far = (i, dist);
            }
        }
        if far.1 == T::neg_infinity() {
            continue;
        }
        let (i, _) = far;
        counts[assignments[i]] -= 1;
        assignments[i] = j;
        counts[j] = 1;
        centroids[j * d..(j + 1) * d].copy_from_slice(points.row(i));
    }
}
