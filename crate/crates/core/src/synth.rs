//! Planted-redundancy model generator and the crate's deterministic PRNG.
//!
//! `CounterRng` is a counter-based generator: output `i` of stream `(seed,
//! stream)` is `mix64(key + i·φ)` with `key = mix64(seed ^ mix64(stream ^ C))`
//! and `mix64` the SplitMix64 finalizer. Uniforms take the top 53 bits;
//! normals use one Box–Muller draw (cosine branch) per pair of uniforms.
//! Every value depends only on `(seed, stream, counter)`, so generated models
//! are reproducible across platforms up to the host `ln`/`cos`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clustering::canonical_labels;
use crate::error::{Error, Result};
use crate::moe::{ExpertWeights, MoeLayer, MoeModel, TokenBatch};
use crate::tensor::Matrix;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0x632B_E59B_D9B4_E019;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix64(seed ^ mix64(stream ^ STREAM_SALT)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n`, in draw order.
    pub fn sample_distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}

// Stream purposes; the low 32 bits carry the layer index.
const STREAM_BASE: u64 = 1 << 32;
const STREAM_NOISE: u64 = 2 << 32;
const STREAM_ROUTER: u64 = 3 << 32;
const STREAM_PERM: u64 = 4 << 32;
const STREAM_BATCH: u64 = 5 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub layers: usize,
    pub experts: usize,
    pub groups: usize,
    pub d_h: usize,
    pub d_m: usize,
    pub k: usize,
    /// Relative per-entry perturbation scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            experts: 16,
            groups: 4,
            d_h: 32,
            d_m: 64,
            k: 2,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.d_h == 0 || self.d_m == 0 {
            return Err(Error::Config("experts, d_h and d_m must be positive".into()));
        }
        if self.groups == 0 || self.groups > self.experts {
            return Err(Error::Config(format!(
                "groups must be in 1..={}, got {}",
                self.experts, self.groups
            )));
        }
        if self.k == 0 || self.k > self.experts {
            return Err(Error::Config(format!("k must be in 1..={}", self.experts)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Consumes the spec keys from a parsed `key=value` map; unknown keys are
    /// left in the map for the caller.
    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
            match map.remove(key) {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| Error::Config(format!("cannot parse {key}={v}"))),
            }
        }
        let d = Self::default();
        let spec = Self {
            layers: take(map, "layers", d.layers)?,
            experts: take(map, "experts", d.experts)?,
            groups: take(map, "groups", d.groups)?,
            d_h: take(map, "d_h", d.d_h)?,
            d_m: take(map, "d_m", d.d_m)?,
            k: take(map, "k", d.k)?,
            noise: take(map, "noise", d.noise)?,
            seed: take(map, "seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = parse_key_values(text)?;
        let spec = Self::from_map(&mut map)?;
        if let Some(key) = map.keys().next() {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        Ok(spec)
    }
}

impl fmt::Display for PlantedSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layers={}", self.layers)?;
        writeln!(f, "experts={}", self.experts)?;
        writeln!(f, "groups={}", self.groups)?;
        writeln!(f, "d_h={}", self.d_h)?;
        writeln!(f, "d_m={}", self.d_m)?;
        writeln!(f, "k={}", self.k)?;
        writeln!(f, "noise={}", self.noise)?;
        writeln!(f, "seed={}", self.seed)
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn normal_matrix(rng: &mut CounterRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| (rng.normal() * scale) as f32)
}

fn perturb(rng: &mut CounterRng, m: &Matrix, noise: f64) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        (f64::from(m.get(i, j)) * (1.0 + noise * rng.normal())) as f32
    })
}

/// Group sizes: `n / g` each, the first `n % g` groups one larger.
fn group_sizes(n: usize, g: usize) -> Vec<usize> {
    (0..g).map(|j| n / g + usize::from(j < n % g)).collect()
}

/// Builds a model whose experts in each layer are perturbed copies of
/// `groups` base experts, shuffled across slots. Returns the model and the
/// planted labels per layer (canonical: first occurrence order).
pub fn gen_planted_model(spec: &PlantedSpec) -> Result<(MoeModel, Vec<Vec<usize>>)> {
    spec.validate()?;
    let scale = 1.0 / (spec.d_h as f64).sqrt();
    let mut layers = Vec::with_capacity(spec.layers);
    let mut truth = Vec::with_capacity(spec.layers);
    for l in 0..spec.layers as u64 {
        let mut base_rng = CounterRng::new(spec.seed, STREAM_BASE | l);
        let bases: Vec<ExpertWeights> = (0..spec.groups)
            .map(|_| ExpertWeights {
                w_gate: normal_matrix(&mut base_rng, spec.d_h, spec.d_m, scale),
                w_up: normal_matrix(&mut base_rng, spec.d_h, spec.d_m, scale),
                w_down: normal_matrix(&mut base_rng, spec.d_m, spec.d_h, scale),
            })
            .collect();

        let mut member_group = Vec::with_capacity(spec.experts);
        for (g, size) in group_sizes(spec.experts, spec.groups).into_iter().enumerate() {
            member_group.extend(std::iter::repeat_n(g, size));
        }
        let mut noise_rng = CounterRng::new(spec.seed, STREAM_NOISE | l);
        let members: Vec<ExpertWeights> = member_group
            .iter()
            .map(|&g| {
                let b = &bases[g];
                ExpertWeights {
                    w_gate: perturb(&mut noise_rng, &b.w_gate, spec.noise),
                    w_up: perturb(&mut noise_rng, &b.w_up, spec.noise),
                    w_down: perturb(&mut noise_rng, &b.w_down, spec.noise),
                }
            })
            .collect();

        let mut order: Vec<usize> = (0..spec.experts).collect();
        CounterRng::new(spec.seed, STREAM_PERM | l).shuffle(&mut order);
        let experts: Vec<ExpertWeights> = order.iter().map(|&m| members[m].clone()).collect();
        let labels: Vec<usize> = order.iter().map(|&m| member_group[m]).collect();

        let mut router_rng = CounterRng::new(spec.seed, STREAM_ROUTER | l);
        let router = normal_matrix(&mut router_rng, spec.d_h, spec.experts, scale);
        layers.push(MoeLayer::dense(router, experts, spec.k)?);
        truth.push(canonical_labels(&labels));
    }
    Ok((MoeModel::new(spec.d_h, spec.d_m, layers)?, truth))
}

/// `tokens` standard-normal hidden vectors drawn from the spec's seed.
pub fn gen_batch(spec: &PlantedSpec, tokens: usize) -> Result<TokenBatch> {
    if tokens == 0 {
        return Err(Error::InvalidArgument("token count must be at least 1".into()));
    }
    let mut rng = CounterRng::new(spec.seed, STREAM_BATCH);
    TokenBatch::new(normal_matrix(&mut rng, tokens, spec.d_h, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_is_deterministic_and_stream_separated() {
        let a: Vec<u64> = {
            let mut r = CounterRng::new(7, 1);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = CounterRng::new(7, 1);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = CounterRng::new(7, 2);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_and_below_ranges() {
        let mut r = CounterRng::new(0, 0);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(7) < 7);
        }
    }

    #[test]
    fn sample_distinct_has_no_repeats() {
        let mut r = CounterRng::new(3, 3);
        let mut s = r.sample_distinct(20, 20);
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn zero_noise_members_are_bitwise_equal() {
        let spec = PlantedSpec {
            noise: 0.0,
            layers: 2,
            experts: 8,
            groups: 3,
            ..PlantedSpec::default()
        };
        let (model, truth) = gen_planted_model(&spec).unwrap();
        for (layer, labels) in model.layers().iter().zip(&truth) {
            for i in 0..8 {
                for j in 0..8 {
                    if labels[i] == labels[j] {
                        assert_eq!(layer.experts()[i], layer.experts()[j]);
                    } else {
                        assert_ne!(layer.experts()[i], layer.experts()[j]);
                    }
                }
            }
            // 8 experts over 3 groups: sizes 3,3,2
            let mut counts = vec![0; 3];
            for &l in labels {
                counts[l] += 1;
            }
            counts.sort_unstable();
            assert_eq!(counts, vec![2, 3, 3]);
        }
    }

    #[test]
    fn same_seed_same_model() {
        let spec = PlantedSpec::default();
        assert_eq!(gen_planted_model(&spec).unwrap(), gen_planted_model(&spec).unwrap());
        let other = PlantedSpec { seed: 1, ..spec };
        assert_ne!(
            gen_planted_model(&other).unwrap().0,
            gen_planted_model(&spec).unwrap().0
        );
    }

    #[test]
    fn batch_examples() {
        let spec = PlantedSpec::default();
        assert_eq!(gen_batch(&spec, 1).unwrap().len(), 1);
        assert_eq!(gen_batch(&spec, 5).unwrap(), gen_batch(&spec, 5).unwrap());
        assert!(gen_batch(&spec, 0).is_err());

        let t = 4096;
        let batch = gen_batch(&spec, t).unwrap();
        let bound = 5.0 / (t as f64).sqrt();
        for j in 0..spec.d_h {
            let mean: f64 = (0..t).map(|i| f64::from(batch.token(i)[j])).sum::<f64>() / t as f64;
            assert!(mean.abs() < bound, "dim {j} mean {mean}");
        }
    }

    #[test]
    fn spec_round_trips_through_text() {
        let spec = PlantedSpec {
            noise: 0.05,
            seed: 42,
            ..PlantedSpec::default()
        };
        assert_eq!(PlantedSpec::parse(&spec.to_string()).unwrap(), spec);
        assert!(PlantedSpec::parse("bogus=1").is_err());
        assert!(PlantedSpec::parse("groups=99").is_err());
    }
}
