//! Workload generation and experiment drivers.

pub mod export;
pub mod studies;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::ItemVocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    Poisson,
    Uniform,
}

/// Prompt-length distribution. Lengths in recommendation traffic are
/// heavy-tailed, so the default is a truncated discrete power law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LenDist {
    Fixed(usize),
    PowerLaw { alpha: f64, min: usize, max: usize },
}

fn default_rps() -> f64 {
    10.0
}
fn default_duration() -> f64 {
    5.0
}
fn default_arrival() -> Arrival {
    Arrival::Poisson
}
fn default_len() -> LenDist {
    LenDist::PowerLaw {
        alpha: 1.2,
        min: 10,
        max: 3000,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_rps")]
    pub rps: f64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_arrival")]
    pub arrival: Arrival,
    #[serde(default = "default_len")]
    pub prompt_len: LenDist,
    #[serde(default)]
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rps <= 0.0 || !self.rps.is_finite() {
            return Err(Error::Config(format!("rps must be positive, got {}", self.rps)));
        }
        if self.duration_s <= 0.0 || !self.duration_s.is_finite() {
            return Err(Error::Config(format!(
                "duration must be positive, got {}",
                self.duration_s
            )));
        }
        if let LenDist::PowerLaw { alpha, min, max } = self.prompt_len {
            if min == 0 || min > max {
                return Err(Error::Config(format!(
                    "power-law bounds need 1 <= min <= max, got [{min}, {max}]"
                )));
            }
            if !alpha.is_finite() || alpha <= 0.0 {
                return Err(Error::Config(format!("power-law alpha must be positive, got {alpha}")));
            }
        }
        if let LenDist::Fixed(0) = self.prompt_len {
            return Err(Error::Config("fixed prompt length must be >= 1".into()));
        }
        Ok(())
    }
}

/// One generated request before admission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenRequest {
    pub arrival_us: u64,
    pub prompt: Vec<u32>,
}

fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1]: safe for ln().
    ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9007199254740992.0)
}

/// Inverse CDF of the truncated continuous power law with density
/// proportional to `x^-alpha` on `[min, max]`.
pub fn power_law_quantile(alpha: f64, min: usize, max: usize, u: f64) -> f64 {
    let (lo, hi) = (min as f64, max as f64);
    if (alpha - 1.0).abs() < 1e-9 {
        // alpha = 1: log-uniform.
        (lo.ln() + u * (hi.ln() - lo.ln())).exp()
    } else {
        let e = 1.0 - alpha;
        (lo.powf(e) + u * (hi.powf(e) - lo.powf(e))).powf(1.0 / e)
    }
}

/// Deterministic workload: exponential inter-arrivals for Poisson mode,
/// fixed spacing for uniform; lengths via inverse-CDF sampling; prompt
/// tokens uniform over the vocabulary.
pub fn generate_workload(spec: &WorkloadSpec, vocab_size: usize) -> Result<Vec<GenRequest>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let horizon_us = (spec.duration_s * 1e6) as u64;
    let mut arrivals: Vec<u64> = Vec::new();
    match spec.arrival {
        Arrival::Uniform => {
            let spacing = 1e6 / spec.rps;
            let count = (spec.rps * spec.duration_s).floor() as u64;
            for i in 0..count {
                arrivals.push((i as f64 * spacing) as u64);
            }
        }
        Arrival::Poisson => {
            let mut t = 0f64;
            loop {
                let dt = -unit_open(&mut rng).ln() / spec.rps;
                t += dt;
                let us = (t * 1e6) as u64;
                if us >= horizon_us {
                    break;
                }
                arrivals.push(us);
            }
        }
    }
    let mut out = Vec::with_capacity(arrivals.len());
    for arrival_us in arrivals {
        let len = match spec.prompt_len {
            LenDist::Fixed(n) => n,
            LenDist::PowerLaw { alpha, min, max } => {
                let u = unit_open(&mut rng);
                (power_law_quantile(alpha, min, max, u).round() as usize).clamp(min, max)
            }
        };
        let prompt: Vec<u32> = (0..len).map(|_| rng.next_u32() % vocab_size as u32).collect();
        out.push(GenRequest { arrival_us, prompt });
    }
    Ok(out)
}

/// Synthetic vocabulary: `items` random distinct-ish tuples of depth `nd`.
pub fn random_vocab(items: usize, nd: usize, vocab_size: usize, seed: u64) -> Result<ItemVocabulary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
    let tuples: Vec<Vec<u32>> = (0..items)
        .map(|_| (0..nd).map(|_| rng.next_u32() % vocab_size as u32).collect())
        .collect();
    ItemVocabulary::build(tuples, nd, vocab_size)
}

/// Vocabulary covering an exact pseudo-random fraction of the whole
/// `vocab_size^nd` tuple space: each tuple is included independently with
/// probability `density` under a seeded hash, so emitted tuples from an
/// unmasked search hit it at rate `density` regardless of model bias.
pub fn planted_density_vocab(
    density: f64,
    nd: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<ItemVocabulary> {
    let total = (vocab_size as u64).pow(nd as u32);
    if total > 1 << 24 {
        return Err(Error::Config(format!(
            "planted-density vocabulary over {total} tuples is too large; shrink vocab_size or nd"
        )));
    }
    let threshold = (density * (u64::MAX as f64)) as u64;
    let mut tuples = Vec::new();
    for idx in 0..total {
        if splitmix(seed ^ idx) <= threshold {
            let mut tuple = Vec::with_capacity(nd);
            let mut rest = idx;
            for _ in 0..nd {
                tuple.push((rest % vocab_size as u64) as u32);
                rest /= vocab_size as u64;
            }
            tuples.push(tuple);
        }
    }
    ItemVocabulary::build(tuples, nd, vocab_size)
}

/// Membership test matching [`planted_density_vocab`] without building it.
pub fn planted_density_contains(
    density: f64,
    vocab_size: usize,
    seed: u64,
    tuple: &[u32],
) -> bool {
    let mut idx = 0u64;
    for &t in tuple.iter().rev() {
        idx = idx * vocab_size as u64 + t as u64;
    }
    let threshold = (density * (u64::MAX as f64)) as u64;
    splitmix(seed ^ idx) <= threshold
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_fixed_spacing() {
        let spec = WorkloadSpec {
            rps: 10.0,
            duration_s: 1.0,
            arrival: Arrival::Uniform,
            prompt_len: LenDist::Fixed(100),
            seed: 3,
        };
        let reqs = generate_workload(&spec, 64).unwrap();
        assert_eq!(reqs.len(), 10);
        for (i, r) in reqs.iter().enumerate() {
            assert_eq!(r.arrival_us, i as u64 * 100_000);
            assert_eq!(r.prompt.len(), 100);
        }
    }

    #[test]
    fn poisson_count_within_three_sigma() {
        let spec = WorkloadSpec {
            rps: 100.0,
            duration_s: 60.0,
            arrival: Arrival::Poisson,
            prompt_len: LenDist::Fixed(10),
            seed: 7,
        };
        let reqs = generate_workload(&spec, 64).unwrap();
        let expected = 6000.0f64;
        let sigma = expected.sqrt();
        assert!(
            (reqs.len() as f64 - expected).abs() < 3.0 * sigma,
            "got {} arrivals",
            reqs.len()
        );
    }

    #[test]
    fn workload_is_reproducible() {
        let spec = WorkloadSpec::default();
        let a = generate_workload(&spec, 128).unwrap();
        let b = generate_workload(&spec, 128).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn power_law_matches_inverse_cdf_oracle() {
        // Kolmogorov-Smirnov distance between the empirical CDF of 10^4
        // samples and the analytic CDF must be below 0.05.
        let (alpha, min, max) = (1.2, 10usize, 3000usize);
        let spec = WorkloadSpec {
            rps: 10_000.0,
            duration_s: 1.0,
            arrival: Arrival::Uniform,
            prompt_len: LenDist::PowerLaw { alpha, min, max },
            seed: 11,
        };
        let reqs = generate_workload(&spec, 64).unwrap();
        let n = reqs.len();
        assert!(n >= 9_999);
        let mut lens: Vec<f64> = reqs.iter().map(|r| r.prompt.len() as f64).collect();
        lens.sort_by(|a, b| a.total_cmp(b));
        let (lo, hi) = (min as f64, max as f64);
        let e = 1.0 - alpha;
        let cdf = |x: f64| (x.powf(e) - lo.powf(e)) / (hi.powf(e) - lo.powf(e));
        let mut ks = 0f64;
        for (i, &x) in lens.iter().enumerate() {
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            let c = cdf(x.clamp(lo, hi));
            ks = ks.max((emp_hi - c).abs()).max((c - emp_lo).abs());
        }
        assert!(ks < 0.05, "KS distance {ks}");
    }

    #[test]
    fn planted_density_membership_is_consistent() {
        let v = planted_density_vocab(0.5, 3, 8, 42).unwrap();
        let frac = v.item_count() as f64 / 512.0;
        assert!((frac - 0.5).abs() < 0.1, "planted fraction {frac}");
        for idx in 0..512u64 {
            let tuple = [(idx % 8) as u32, ((idx / 8) % 8) as u32, ((idx / 64) % 8) as u32];
            assert_eq!(
                v.contains(&tuple),
                planted_density_contains(0.5, 8, 42, &tuple),
                "tuple {tuple:?}"
            );
        }
    }
}
