use serde::{Deserialize, Serialize};

use super::{ClusterAssignment, ClusterMethod, DistanceMatrix, MergeStep};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    Single,
    Complete,
    /// Unweighted all-pairs mean (UPGMA).
    Average,
}

impl std::str::FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            "average" => Ok(Linkage::Average),
            other => Err(Error::InvalidArgument(format!("unknown linkage `{other}`"))),
        }
    }
}

impl std::fmt::Display for Linkage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Linkage::Single => "single",
            Linkage::Complete => "complete",
            Linkage::Average => "average",
        })
    }
}

/// Linkage distance between two member lists, computed from the base matrix.
pub fn linkage_distance(d: &DistanceMatrix, a: &[usize], b: &[usize], linkage: Linkage) -> f64 {
    let pairs = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j)));
    match linkage {
        Linkage::Single => pairs.map(|(i, j)| d.get(i, j)).fold(f64::INFINITY, f64::min),
        Linkage::Complete => pairs.map(|(i, j)| d.get(i, j)).fold(f64::NEG_INFINITY, f64::max),
        Linkage::Average => {
            let sum: f64 = pairs.map(|(i, j)| d.get(i, j)).sum();
            sum / (a.len() * b.len()) as f64
        }
    }
}

/// Bottom-up agglomeration from singletons until `r` clusters remain.
///
/// Each step merges the pair with the smallest linkage distance; ties go to
/// the lexicographically smallest `(a, b)` cluster-id pair, where a cluster's
/// id is its smallest member.
pub fn hierarchical_cluster(d: &DistanceMatrix, r: usize, linkage: Linkage) -> Result<ClusterAssignment> {
    let n = d.len();
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("cluster count {r} must be in 1..={n}")));
    }
    // Kept sorted by smallest member, which is also the cluster id.
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut trace = Vec::with_capacity(n - r);
    while clusters.len() > r {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let dist = linkage_distance(d, &clusters[a], &clusters[b], linkage);
                if best.is_none_or(|(_, _, bd)| dist < bd) {
                    best = Some((a, b, dist));
                }
            }
        }
        let (a, b, dist) = best.expect("at least two clusters");
        trace.push(MergeStep {
            a: clusters[a][0],
            b: clusters[b][0],
            distance: dist,
        });
        let absorbed = clusters.remove(b);
        clusters[a].extend(absorbed);
        clusters[a].sort_unstable();
    }
    let mut labels = vec![0; n];
    for (id, members) in clusters.iter().enumerate() {
        for &i in members {
            labels[i] = id;
        }
    }
    Ok(ClusterAssignment {
        labels,
        r,
        merge_trace: trace,
        method: ClusterMethod::Hierarchical(linkage),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{distance_matrix, FeatureKind, FeatureMatrix};
    use crate::synth::CounterRng;
    use proptest::prelude::*;

    const ALL: [Linkage; 3] = [Linkage::Single, Linkage::Complete, Linkage::Average];

    fn features(rows: Vec<Vec<f64>>) -> DistanceMatrix {
        distance_matrix(&FeatureMatrix::new(FeatureKind::ExpertOutput, rows).unwrap()).unwrap()
    }

    fn random_points(seed: u64, n: usize, dim: usize) -> DistanceMatrix {
        let mut rng = CounterRng::new(seed, 77);
        features((0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect())
    }

    #[test]
    fn boundary_budgets() {
        let d = random_points(1, 6, 3);
        for linkage in ALL {
            let id = hierarchical_cluster(&d, 6, linkage).unwrap();
            assert_eq!(id.labels, (0..6).collect::<Vec<_>>());
            assert!(id.merge_trace.is_empty());
            let one = hierarchical_cluster(&d, 1, linkage).unwrap();
            assert_eq!(one.labels, vec![0; 6]);
            assert_eq!(one.merge_trace.len(), 5);
        }
        assert!(hierarchical_cluster(&d, 0, Linkage::Average).is_err());
        assert!(hierarchical_cluster(&d, 7, Linkage::Average).is_err());
    }

    #[test]
    fn three_points_on_a_line() {
        let d = features(vec![vec![0.0], vec![1.0], vec![10.0]]);
        for linkage in ALL {
            let a = hierarchical_cluster(&d, 2, linkage).unwrap();
            assert_eq!(a.labels, vec![0, 0, 1]);
        }
    }

    #[test]
    fn average_linkage_is_unweighted_mean() {
        // {0,1} vs {10}: mean(10, 9) = 9.5
        let d = features(vec![vec![0.0], vec![1.0], vec![10.0]]);
        assert_eq!(linkage_distance(&d, &[0, 1], &[2], Linkage::Average), 9.5);
        assert_eq!(linkage_distance(&d, &[0, 1], &[2], Linkage::Single), 9.0);
        assert_eq!(linkage_distance(&d, &[0, 1], &[2], Linkage::Complete), 10.0);
    }

    #[test]
    fn tie_break_prefers_smallest_pair() {
        // Equidistant square corners: (0,1), (0,2), (1,3), (2,3) all at 1.
        let d = features(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let a = hierarchical_cluster(&d, 3, Linkage::Single).unwrap();
        assert_eq!((a.merge_trace[0].a, a.merge_trace[0].b), (0, 1));
    }

    /// Independent route: Lance–Williams updates on a working matrix.
    fn lance_williams(d: &DistanceMatrix, r: usize, linkage: Linkage) -> Vec<(usize, usize, f64)> {
        let n = d.len();
        let mut w: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| d.get(i, j)).collect()).collect();
        let mut size = vec![1usize; n];
        let mut alive: Vec<usize> = (0..n).collect();
        let mut steps = Vec::new();
        while alive.len() > r {
            let mut best = (0, 0, f64::INFINITY);
            for (ia, &a) in alive.iter().enumerate() {
                for &b in &alive[ia + 1..] {
                    if w[a][b] < best.2 {
                        best = (a, b, w[a][b]);
                    }
                }
            }
            let (a, b, dist) = best;
            steps.push(best);
            for &c in &alive {
                if c == a || c == b {
                    continue;
                }
                let v = match linkage {
                    Linkage::Single => w[a][c].min(w[b][c]),
                    Linkage::Complete => w[a][c].max(w[b][c]),
                    Linkage::Average => {
                        (size[a] as f64 * w[a][c] + size[b] as f64 * w[b][c]) / (size[a] + size[b]) as f64
                    }
                };
                w[a][c] = v;
                w[c][a] = v;
            }
            size[a] += size[b];
            alive.retain(|&x| x != b);
            let _ = dist;
        }
        steps
    }

    #[test]
    fn matches_lance_williams_rescan_for_small_n() {
        for seed in 0..200 {
            let n = 2 + (seed as usize % 7);
            let d = random_points(seed, n, 4);
            for linkage in ALL {
                let got = hierarchical_cluster(&d, 1, linkage).unwrap();
                let want = lance_williams(&d, 1, linkage);
                for (s, (a, b, dist)) in got.merge_trace.iter().zip(want) {
                    assert_eq!((s.a, s.b), (a, b), "seed {seed} {linkage}");
                    assert!((s.distance - dist).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let d = random_points(5, 12, 6);
        for linkage in ALL {
            assert_eq!(
                hierarchical_cluster(&d, 4, linkage).unwrap(),
                hierarchical_cluster(&d, 4, linkage).unwrap()
            );
        }
    }

    #[test]
    fn planted_four_by_four_recovered() {
        let mut rng = CounterRng::new(12, 0);
        let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| 10.0 * rng.normal()).collect()).collect();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..16 {
            let c = (i * 7) % 4;
            rows.push(centers[c].iter().map(|v| v + 0.01 * rng.normal()).collect());
            truth.push(c);
        }
        let a = hierarchical_cluster(&features(rows), 4, Linkage::Average).unwrap();
        assert_eq!(a.labels, crate::clustering::canonical_labels(&truth));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn merge_distances_are_monotone(seed in any::<u64>(), n in 2usize..12, li in 0usize..3) {
            let d = random_points(seed, n, 3);
            let a = hierarchical_cluster(&d, 1, ALL[li]).unwrap();
            for w in a.merge_trace.windows(2) {
                prop_assert!(w[1].distance >= w[0].distance - 1e-12 * w[0].distance.abs().max(1.0));
            }
            prop_assert_eq!(a.labels.len(), n);
        }
    }
}
