use super::{ClusterAssignment, ClusterMethod, FeatureMatrix};
use crate::error::{Error, Result};
use crate::synth::CounterRng;
use crate::tensor::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KMeansInit {
    /// The first r points are the initial centers.
    FixedFirst,
    /// r distinct points drawn from the seeded generator.
    Random { seed: u64 },
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd iterations until the assignment stops changing or `max_iter`.
///
/// An empty cluster is reseeded with the point farthest from its current
/// center, taken from a cluster with at least two members. When every such
/// point sits exactly on its center the cluster stays empty, so the returned
/// assignment may have fewer than `r` clusters.
pub fn kmeans_cluster(f: &FeatureMatrix, r: usize, init: KMeansInit, max_iter: usize) -> Result<ClusterAssignment> {
    let n = f.len();
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("cluster count {r} must be in 1..={n}")));
    }
    let points = &f.rows;
    let seeds: Vec<usize> = match init {
        KMeansInit::FixedFirst => (0..r).collect(),
        KMeansInit::Random { seed } => CounterRng::new(seed, 0x6b6d).sample_distinct(n, r),
    };
    let mut centers: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].clone()).collect();
    let mut labels: Vec<usize> = Vec::new();

    for _ in 0..max_iter.max(1) {
        let mut next = Vec::with_capacity(n);
        let mut dist = Vec::with_capacity(n);
        for p in points {
            let (j, d) = nearest(p, &centers);
            next.push(j);
            dist.push(d);
        }
        let mut sizes = vec![0usize; r];
        for &j in &next {
            sizes[j] += 1;
        }
        for empty in 0..r {
            if sizes[empty] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| sizes[next[i]] > 1 && dist[i] > 0.0)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = donor {
                sizes[next[i]] -= 1;
                next[i] = empty;
                dist[i] = 0.0;
                sizes[empty] = 1;
                centers[empty] = points[i].clone();
            }
        }
        for (j, center) in centers.iter_mut().enumerate() {
            if sizes[j] == 0 {
                continue;
            }
            let mut sum = vec![0.0; f.dim()];
            for (p, _) in points.iter().zip(&next).filter(|(_, &l)| l == j) {
                for (s, v) in sum.iter_mut().zip(p) {
                    *s += v;
                }
            }
            *center = sum.into_iter().map(|s| s / sizes[j] as f64).collect();
        }
        let converged = next == labels;
        labels = next;
        if converged {
            break;
        }
    }
    let method = match init {
        KMeansInit::FixedFirst => ClusterMethod::KMeansFixed,
        KMeansInit::Random { .. } => ClusterMethod::KMeansRandom,
    };
    Ok(ClusterAssignment::from_labels(&labels, method))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::FeatureKind;

    fn fm(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        FeatureMatrix::new(FeatureKind::ExpertOutput, rows).unwrap()
    }

    #[test]
    fn r_equals_n_gives_singletons() {
        let f = fm(vec![vec![0.0], vec![3.0], vec![-2.0], vec![7.0]]);
        let a = kmeans_cluster(&f, 4, KMeansInit::FixedFirst, 1).unwrap();
        assert_eq!(a.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn planted_groups_with_one_seed_per_group() {
        // Points arranged so the first three rows come from distinct groups.
        let rows = vec![
            vec![0.0, 0.0],
            vec![10.0, 0.0],
            vec![0.0, 10.0],
            vec![0.1, 0.1],
            vec![10.1, -0.1],
            vec![-0.1, 10.2],
            vec![0.2, -0.1],
            vec![9.9, 0.1],
            vec![0.1, 9.8],
        ];
        let a = kmeans_cluster(&fm(rows), 3, KMeansInit::FixedFirst, 50).unwrap();
        assert_eq!(a.labels, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn identical_points_terminate() {
        let f = fm(vec![vec![1.0, 1.0]; 5]);
        let a = kmeans_cluster(&f, 2, KMeansInit::FixedFirst, 20).unwrap();
        assert_eq!(a.r, 1);
        assert_eq!(a.labels, vec![0; 5]);
        a.validate().unwrap();
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Both initial centers coincide; the second cluster starts empty.
        let f = fm(vec![vec![0.0], vec![0.0], vec![5.0], vec![6.0]]);
        let a = kmeans_cluster(&f, 2, KMeansInit::FixedFirst, 20).unwrap();
        assert_eq!(a.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn random_init_is_seeded() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![(i * i % 7) as f64, (i % 3) as f64]).collect();
        let f = fm(rows);
        let a = kmeans_cluster(&f, 3, KMeansInit::Random { seed: 4 }, 30).unwrap();
        let b = kmeans_cluster(&f, 3, KMeansInit::Random { seed: 4 }, 30).unwrap();
        assert_eq!(a, b);
        assert!(kmeans_cluster(&f, 13, KMeansInit::FixedFirst, 1).is_err());
    }
}
