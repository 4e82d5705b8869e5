use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, FeatureMatrix};
use crate::error::{check_dim, Error, Result};

/// Reported Dunn index when every cluster has zero diameter.
pub const DUNN_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Euclidean,
    /// 1 − cosine similarity. A zero vector is at distance 0 from another
    /// zero vector and 1 from anything else.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => crate::tensor::sq_dist(a, b).sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                match (na == 0.0, nb == 0.0) {
                    (true, true) => 0.0,
                    (true, false) | (false, true) => 1.0,
                    _ => 1.0 - (dot / (na * nb)).clamp(-1.0, 1.0),
                }
            }
        }
    }
}

fn check(f: &FeatureMatrix, a: &ClusterAssignment) -> Result<()> {
    check_dim("assignment size", f.len(), a.n())?;
    a.validate()?;
    if a.r < 2 {
        return Err(Error::InvalidArgument(
            "validity indices need at least two clusters".into(),
        ));
    }
    Ok(())
}

#[allow(clippy::needless_range_loop)]
fn pairwise(f: &FeatureMatrix, metric: Metric) -> Vec<Vec<f64>> {
    let n = f.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = metric.distance(&f.rows[i], &f.rows[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Mean silhouette. Points in singleton clusters score 0, as do points whose
/// intra- and nearest-cluster mean distances are both 0.
pub fn silhouette(f: &FeatureMatrix, a: &ClusterAssignment, metric: Metric) -> Result<f64> {
    check(f, a)?;
    let d = pairwise(f, metric);
    let clusters = a.clusters();
    let n = f.len();
    let total: f64 = (0..n)
        .map(|i| {
            let own = a.labels[i];
            if clusters[own].len() == 1 {
                return 0.0;
            }
            let mean_to = |c: &[usize]| c.iter().filter(|&&j| j != i).map(|&j| d[i][j]).sum::<f64>();
            let intra = mean_to(&clusters[own]) / (clusters[own].len() - 1) as f64;
            let nearest = clusters
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != own)
                .map(|(_, c)| mean_to(c) / c.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let scale = intra.max(nearest);
            if scale == 0.0 {
                0.0
            } else {
                (nearest - intra) / scale
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// Smallest between-cluster point distance over the largest cluster
/// diameter, capped at [`DUNN_CAP`].
#[allow(clippy::needless_range_loop)]
pub fn dunn_index(f: &FeatureMatrix, a: &ClusterAssignment, metric: Metric) -> Result<f64> {
    check(f, a)?;
    let d = pairwise(f, metric);
    let n = f.len();
    let mut min_between = f64::INFINITY;
    let mut max_diameter = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            if a.labels[i] == a.labels[j] {
                max_diameter = max_diameter.max(d[i][j]);
            } else {
                min_between = min_between.min(d[i][j]);
            }
        }
    }
    if max_diameter == 0.0 {
        return Ok(DUNN_CAP);
    }
    Ok((min_between / max_diameter).min(DUNN_CAP))
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items. Two
/// identical partitions score 1 even in degenerate cases where the usual
/// formula is 0/0.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let ca = crate::clustering::canonical_labels(a);
    let cb = crate::clustering::canonical_labels(b);
    if ca == cb {
        return 1.0;
    }
    let ra = ca.iter().max().map_or(0, |m| m + 1);
    let rb = cb.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; rb]; ra];
    for (&x, &y) in ca.iter().zip(&cb) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..rb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 0.0;
    }
    (index - expected) / (max - expected)
}
