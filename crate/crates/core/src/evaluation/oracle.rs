use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, ClusterMethod, FeatureMatrix};
use crate::error::{check_dim, Error, Result};

/// Largest item count the exhaustive partition oracle accepts.
pub const ORACLE_MAX_N: usize = 12;

/// Stirling number of the second kind from the alternating sum
/// S(n,r) = (1/r!) Σ_{i=0}^{r} (−1)^i C(r,i) (r−i)^n.
pub fn stirling2(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    if n == 0 {
        return 1;
    }
    let mut binom: i128 = 1;
    let mut sum: i128 = 0;
    let mut factorial: i128 = 1;
    for i in 0..=r {
        let term = binom * (r as i128 - i as i128).pow(n as u32);
        sum += if i % 2 == 0 { term } else { -term };
        binom = binom * (r - i) as i128 / (i as i128 + 1);
        if i > 0 {
            factorial *= i as i128;
        }
    }
    (sum / factorial) as u128
}

fn guard(n: usize, r: usize) -> Result<()> {
    if n > ORACLE_MAX_N {
        return Err(Error::InvalidArgument(format!(
            "partition oracle is limited to n <= {ORACLE_MAX_N} items, got {n} (S({n},{r}) = {})",
            stirling2(n, r)
        )));
    }
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("cluster count {r} must be in 1..={n}")));
    }
    Ok(())
}

/// Visits every partition of 0..n into exactly r blocks as a restricted
/// growth string, in lexicographic order.
fn for_each_partition(n: usize, r: usize, mut visit: impl FnMut(&[usize])) {
    fn rec(labels: &mut Vec<usize>, n: usize, r: usize, used: usize, visit: &mut dyn FnMut(&[usize])) {
        let i = labels.len();
        if i == n {
            if used == r {
                visit(labels);
            }
            return;
        }
        // Not enough items left to open the remaining blocks.
        if r - used > n - i {
            return;
        }
        for b in 0..=used.min(r - 1) {
            labels.push(b);
            rec(labels, n, r, used.max(b + 1), visit);
            labels.pop();
        }
    }
    rec(&mut Vec::with_capacity(n), n, r, 0, &mut visit);
}

/// All partitions of n items into r blocks, as label vectors.
pub fn set_partitions(n: usize, r: usize) -> Result<Vec<Vec<usize>>> {
    guard(n, r)?;
    let mut out = Vec::new();
    for_each_partition(n, r, |p| out.push(p.to_vec()));
    Ok(out)
}

/// Σ_i ‖e_i − mean(C_{label(i)})‖².
pub fn partition_cost(f: &FeatureMatrix, labels: &[usize]) -> Result<f64> {
    check_dim("partition labels", f.len(), labels.len())?;
    let r = labels.iter().max().map_or(0, |m| m + 1);
    let dim = f.dim();
    let mut sums = vec![vec![0.0f64; dim]; r];
    let mut counts = vec![0usize; r];
    for (row, &l) in f.rows.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(row) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    Ok(f.rows
        .iter()
        .zip(labels)
        .map(|(row, &l)| crate::tensor::sq_dist(row, &means[l]))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptPartition {
    pub assignment: ClusterAssignment,
    pub cost: f64,
    /// Number of partitions visited; equals S(n, r).
    pub enumerated: u128,
}

/// Exact minimum-variance partition into r blocks by exhaustive search.
/// Ties keep the lexicographically first restricted growth string.
pub fn opt_partition_oracle(f: &FeatureMatrix, r: usize) -> Result<OptPartition> {
    let n = f.len();
    guard(n, r)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut enumerated = 0u128;
    let mut failure = None;
    for_each_partition(n, r, |labels| {
        enumerated += 1;
        match partition_cost(f, labels) {
            Ok(c) if best.as_ref().is_none_or(|(b, _)| c < *b) => best = Some((c, labels.to_vec())),
            Ok(_) => {}
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let (cost, labels) = best.expect("at least one partition exists for 1 <= r <= n");
    Ok(OptPartition {
        assignment: ClusterAssignment::from_labels(&labels, ClusterMethod::Planted),
        cost,
        enumerated,
    })
}
