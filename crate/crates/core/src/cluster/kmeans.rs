//! Lloyd's k-means with farthest-point seeding.

use rand::Rng;

use super::ClusterError;

pub const MAX_ITERATIONS: usize = 100;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_distance = f64::INFINITY;
    for (k, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best_distance {
            best = k;
            best_distance = d;
        }
    }
    best
}

/// First center uniform from `rng`, every later one the point farthest from
/// the centers chosen so far (ties to the lowest index, preferring points not
/// already used as centers).
fn farthest_point_init<R: Rng + ?Sized>(points: &[Vec<f64>], c: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut min_distance: Vec<f64> =
        points.iter().map(|p| squared_distance(p, &points[chosen[0]])).collect();
    while chosen.len() < c {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            match best {
                Some(b) if min_distance[i] <= min_distance[b] => {}
                _ => best = Some(i),
            }
        }
        let next = best.expect("c <= n leaves an unchosen point");
        for (i, p) in points.iter().enumerate() {
            min_distance[i] = min_distance[i].min(squared_distance(p, &points[next]));
        }
        chosen.push(next);
    }
    chosen
}

/// Moves points into empty clusters: each empty cluster takes the point
/// farthest from its current centroid among clusters with more than one member.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let c = centroids.len();
    loop {
        let mut sizes = vec![0usize; c];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut donor: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[labels[i]]);
            match donor {
                Some((_, best)) if d <= best => {}
                _ => donor = Some((i, d)),
            }
        }
        let (moved, _) = donor.expect("c <= n guarantees a cluster with two members");
        labels[moved] = empty;
        centroids[empty] = points[moved].clone();
    }
}

fn recompute_centroids(points: &[Vec<f64>], labels: &[usize], c: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        if count > 0 {
            for s in sum.iter_mut() {
                *s /= count as f64;
            }
        }
    }
    sums
}

/// Hard labels in `[0, c)`; every label value is used when `c <= n`.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    c: usize,
    rng: &mut R,
) -> Result<Vec<usize>, ClusterError> {
    let n = points.len();
    if c == 0 || c > n {
        return Err(ClusterError::TooManyClusters { clusters: c, points: n });
    }
    let mut centroids: Vec<Vec<f64>> =
        farthest_point_init(points, c, rng).into_iter().map(|i| points[i].clone()).collect();
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut next, &mut centroids);
        if next == labels {
            break;
        }
        labels = next;
        centroids = recompute_centroids(points, &labels, c);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    // Exhaustive oracle: the 2-partition of 4 points minimizing within-cluster SSE.
    fn best_two_partition(points: &[Vec<f64>]) -> Vec<usize> {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let centroids = recompute_centroids(points, &labels, 2);
            let sse: f64 =
                points.iter().zip(&labels).map(|(p, &l)| squared_distance(p, &centroids[l])).sum();
            if sse < best.0 {
                best = (sse, labels);
            }
        }
        best.1
    }

    #[test]
    fn single_cluster_labels_everything_zero() {
        let points = vec![vec![0.0], vec![5.0], vec![9.0]];
        assert_eq!(kmeans(&points, 1, &mut seeded(1)).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn separated_pairs_match_exhaustive_oracle() {
        let points = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 10.0], vec![10.0, 10.1]];
        let oracle = best_two_partition(&points);
        for seed in 0..10 {
            let labels = kmeans(&points, 2, &mut seeded(seed)).unwrap();
            assert_eq!(labels[0] == labels[1], oracle[0] == oracle[1]);
            assert_eq!(labels[2] == labels[3], oracle[2] == oracle[3]);
            assert_ne!(labels[0], labels[2]);
        }
    }

    #[test]
    fn duplicates_share_labels_and_no_cluster_is_empty() {
        let points = vec![vec![1.0], vec![1.0], vec![1.0], vec![4.0]];
        for seed in 0..10 {
            let labels = kmeans(&points, 3, &mut seeded(seed)).unwrap();
            for k in 0..3 {
                assert!(labels.contains(&k), "{labels:?}");
            }
        }
        let points = vec![vec![2.0], vec![2.0], vec![7.0], vec![7.0]];
        let labels = kmeans(&points, 2, &mut seeded(5)).unwrap();
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[2], labels[3]);
    }

    #[test]
    fn c_equal_n_gives_distinct_labels() {
        let points = vec![vec![0.0], vec![3.0], vec![9.0], vec![20.0]];
        let mut labels = kmeans(&points, 4, &mut seeded(2)).unwrap();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3]);
        assert!(kmeans(&points, 5, &mut seeded(2)).is_err());
    }
}
