use serde::{Deserialize, Serialize};

use super::{ClusterAssignment, ClusterMethod, FeatureMatrix};
use crate::error::{Error, Result};
use crate::synth::CounterRng;
use crate::tensor::sq_dist;

/// Soft assignment: `u[i][j]` is expert i's degree of membership in cluster j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub u: Vec<Vec<f64>>,
}

impl Membership {
    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn r(&self) -> usize {
        self.u.first().map_or(0, Vec::len)
    }

    /// Argmax per row, ties to the lower cluster.
    pub fn hard_labels(&self) -> ClusterAssignment {
        let labels: Vec<usize> = self
            .u
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                    )
                    .0
            })
            .collect();
        ClusterAssignment::from_labels(&labels, ClusterMethod::FuzzyCMeans)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FcmInit {
    FirstR,
    Seeded(u64),
    Centers(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcmOptions {
    /// Fuzzifier, must exceed 1.
    pub m: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub init: FcmInit,
}

impl Default for FcmOptions {
    fn default() -> Self {
        Self {
            m: 2.0,
            tol: 1e-6,
            max_iter: 300,
            init: FcmInit::FirstR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcmResult {
    pub membership: Membership,
    pub centers: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Objective J_m after each iteration.
    pub objective: Vec<f64>,
}

fn update_membership(points: &[Vec<f64>], centers: &[Vec<f64>], m: f64) -> Vec<Vec<f64>> {
    let exponent = 1.0 / (m - 1.0);
    points
        .iter()
        .map(|p| {
            let d2: Vec<f64> = centers.iter().map(|c| sq_dist(p, c)).collect();
            if let Some(hit) = d2.iter().position(|&d| d == 0.0) {
                let mut row = vec![0.0; centers.len()];
                row[hit] = 1.0;
                return row;
            }
            // (‖e−c_j‖/‖e−c_k‖)^(2/(m−1)) = (d2_j/d2_k)^(1/(m−1))
            d2.iter()
                .map(|&dj| 1.0 / d2.iter().map(|&dk| (dj / dk).powf(exponent)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn update_centers(points: &[Vec<f64>], u: &[Vec<f64>], m: f64, r: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    (0..r)
        .map(|j| {
            let mut num = vec![0.0; dim];
            let mut den = 0.0;
            for (p, row) in points.iter().zip(u) {
                let w = row[j].powf(m);
                den += w;
                for (a, v) in num.iter_mut().zip(p) {
                    *a += w * v;
                }
            }
            num.into_iter().map(|a| a / den).collect()
        })
        .collect()
}

pub(crate) fn fcm_objective(points: &[Vec<f64>], u: &[Vec<f64>], centers: &[Vec<f64>], m: f64) -> f64 {
    points
        .iter()
        .zip(u)
        .map(|(p, row)| {
            row.iter()
                .zip(centers)
                .map(|(&uij, c)| uij.powf(m) * sq_dist(p, c))
                .sum::<f64>()
        })
        .sum()
}

/// Fuzzy C-means: alternate the membership and center updates until the
/// largest membership change drops below `tol`.
pub fn fcm_cluster(f: &FeatureMatrix, r: usize, options: &FcmOptions) -> Result<FcmResult> {
    let n = f.len();
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("cluster count {r} must be in 1..={n}")));
    }
    if options.m.is_nan() || options.m <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "fuzzifier m must exceed 1, got {}",
            options.m
        )));
    }
    let points = &f.rows;
    let mut centers = match &options.init {
        FcmInit::FirstR => points[..r].to_vec(),
        FcmInit::Seeded(seed) => CounterRng::new(*seed, 0x66636d)
            .sample_distinct(n, r)
            .into_iter()
            .map(|i| points[i].clone())
            .collect(),
        FcmInit::Centers(c) => {
            if c.len() != r || c.iter().any(|row| row.len() != f.dim()) {
                return Err(Error::InvalidArgument("initial centers have the wrong shape".into()));
            }
            c.clone()
        }
    };
    let mut u = update_membership(points, &centers, options.m);
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        centers = update_centers(points, &u, options.m, r);
        let next = update_membership(points, &centers, options.m);
        let delta = u
            .iter()
            .flatten()
            .zip(next.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        u = next;
        objective.push(fcm_objective(points, &u, &centers, options.m));
        if delta < options.tol {
            break;
        }
    }
    Ok(FcmResult {
        membership: Membership { u },
        centers,
        iterations,
        objective,
    })
}
