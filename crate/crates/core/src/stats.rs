//! Bayesian comparison of paired accuracy differences with a region of
//! practical equivalence (ROPE).
//!
//! Each dataset gets a correlated Bayesian t-test posterior over its mean
//! difference. The cross-dataset verdict is a Monte Carlo approximation:
//! draw one mean per dataset from its posterior, bootstrap the datasets,
//! and count where the average falls. This stands in for a full
//! hierarchical model fitted by MCMC.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::seeds;

pub const DEFAULT_ROPE: f64 = 0.1;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
pub const MIN_MC_SAMPLES: usize = 10_000;
const SHARD: usize = 8192;

pub const METHOD_NOTE: &str = "per-dataset correlated Bayesian t-tests combined by Monte Carlo \
dataset bootstrap; an approximation of a full hierarchical model";

/// Per-seed accuracy differences (with-llm minus base, percentage points)
/// on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSample {
    pub dataset: String,
    pub diffs: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

impl DiffSample {
    /// Correlation between resampled runs: the test share of the data.
    pub fn rho(&self) -> f64 {
        let total = self.n_train + self.n_test;
        if total == 0 {
            0.3
        } else {
            self.n_test as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProbabilities {
    pub p_left: f64,
    pub p_rope: f64,
    pub p_right: f64,
}

impl RegionProbabilities {
    fn point(location: f64, rope: f64) -> Self {
        let (l, m, r) = if location < -rope {
            (1.0, 0.0, 0.0)
        } else if location > rope {
            (0.0, 0.0, 1.0)
        } else {
            (0.0, 1.0, 0.0)
        };
        Self {
            p_left: l,
            p_rope: m,
            p_right: r,
        }
    }

    /// The region holding the most mass.
    pub fn verdict(&self) -> &'static str {
        if self.p_right >= self.p_left && self.p_right >= self.p_rope {
            "right"
        } else if self.p_left >= self.p_rope {
            "left"
        } else {
            "rope"
        }
    }
}

/// Location-scale Student-t posterior over a mean difference. A zero scale
/// is a point mass at `location`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub location: f64,
    pub scale: f64,
    pub dof: f64,
}

impl Posterior {
    pub fn is_point_mass(&self) -> bool {
        self.scale == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub location: f64,
    pub scale: f64,
    pub dof: f64,
    pub degenerate: bool,
    pub p_left: f64,
    pub p_rope: f64,
    pub p_right: f64,
}

impl PosteriorSummary {
    pub fn new(post: Posterior, rope: f64) -> Result<Self> {
        let p = rope_probabilities(&post, rope)?;
        Ok(Self {
            location: post.location,
            scale: post.scale,
            dof: post.dof,
            degenerate: post.is_point_mass(),
            p_left: p.p_left,
            p_rope: p.p_rope,
            p_right: p.p_right,
        })
    }

    pub fn posterior(&self) -> Posterior {
        Posterior {
            location: self.location,
            scale: self.scale,
            dof: self.dof,
        }
    }
}

/// Correlated t-test posterior: dof n−1, location the sample mean, scale
/// `sqrt((1/n + rho/(1-rho)) s²)` with `s²` the unbiased sample variance.
pub fn correlated_t_posterior(diffs: &[f64], rho: f64) -> Result<Posterior> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 differences, got {n}")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Invalid(format!("rho {rho} outside [0, 1)")));
    }
    if let Some(bad) = diffs.iter().find(|d| !d.is_finite()) {
        return Err(Error::Invalid(format!("non-finite difference {bad}")));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (nf - 1.0);
    Ok(Posterior {
        location: mean,
        scale: ((1.0 / nf + rho / (1.0 - rho)) * var).sqrt(),
        dof: nf - 1.0,
    })
}

/// Mass left of, inside, and right of `[-rope, rope]` (boundaries count as
/// inside).
pub fn rope_probabilities(post: &Posterior, rope: f64) -> Result<RegionProbabilities> {
    if !(rope >= 0.0) {
        return Err(Error::Invalid(format!("rope {rope} must be non-negative")));
    }
    if post.is_point_mass() {
        return Ok(RegionProbabilities::point(post.location, rope));
    }
    let t = StudentsT::new(post.location, post.scale, post.dof)
        .map_err(|e| Error::Invalid(format!("bad posterior {post:?}: {e}")))?;
    let p_left = t.cdf(-rope);
    let p_right = t.sf(rope);
    Ok(RegionProbabilities {
        p_left,
        p_rope: (1.0 - p_left - p_right).max(0.0),
        p_right,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetComparison {
    pub dataset: String,
    pub n: usize,
    pub rho: f64,
    #[serde(flatten)]
    pub posterior: PosteriorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub rope: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub method: String,
    pub per_dataset: Vec<DatasetComparison>,
    pub aggregate: RegionProbabilities,
}

#[derive(Debug, Clone, Copy)]
enum Sampler {
    Point(f64),
    T { location: f64, scale: f64, t: StudentT<f64> },
}

impl Sampler {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Sampler::Point(x) => *x,
            Sampler::T { location, scale, t } => location + scale * t.sample(rng),
        }
    }
}

/// Monte Carlo comparison across datasets. `rho` overrides each sample's
/// own test-share correlation. Work is split into fixed-size shards with
/// derived seeds so the counts do not depend on the thread count.
pub fn hierarchical_compare(
    samples: &[DiffSample],
    rope: f64,
    mc_samples: usize,
    seed: u64,
    rho: Option<f64>,
) -> Result<ComparisonResult> {
    if samples.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 datasets, got {}", samples.len())));
    }
    if mc_samples < MIN_MC_SAMPLES {
        return Err(Error::Invalid(format!(
            "mc_samples {mc_samples} below the minimum {MIN_MC_SAMPLES}"
        )));
    }
    let mut per_dataset = Vec::with_capacity(samples.len());
    let mut samplers = Vec::with_capacity(samples.len());
    for s in samples {
        let r = rho.unwrap_or_else(|| s.rho());
        let post = correlated_t_posterior(&s.diffs, r)
            .map_err(|e| Error::Invalid(format!("dataset `{}`: {e}", s.dataset)))?;
        per_dataset.push(DatasetComparison {
            dataset: s.dataset.clone(),
            n: s.diffs.len(),
            rho: r,
            posterior: PosteriorSummary::new(post, rope)?,
        });
        samplers.push(if post.is_point_mass() {
            Sampler::Point(post.location)
        } else {
            Sampler::T {
                location: post.location,
                scale: post.scale,
                t: StudentT::new(post.dof).map_err(|e| Error::Invalid(e.to_string()))?,
            }
        });
    }

    let shards = mc_samples.div_ceil(SHARD);
    let run_shard = |shard: usize| -> [u64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::MONTE_CARLO ^ shard as u64));
        let draws = SHARD.min(mc_samples - shard * SHARD);
        let k = samplers.len();
        let mut deltas = vec![0.0; k];
        let mut counts = [0u64; 3];
        for _ in 0..draws {
            for (d, s) in deltas.iter_mut().zip(&samplers) {
                *d = s.draw(&mut rng);
            }
            let mean = (0..k).map(|_| deltas[rng.random_range(0..k)]).sum::<f64>() / k as f64;
            let region = if mean < -rope {
                0
            } else if mean > rope {
                2
            } else {
                1
            };
            counts[region] += 1;
        }
        counts
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(shards);
    let mut counts = [0u64; 3];
    if workers <= 1 {
        for shard in 0..shards {
            let c = run_shard(shard);
            (0..3).for_each(|i| counts[i] += c[i]);
        }
    } else {
        let partial: Vec<[u64; 3]> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run_shard = &run_shard;
                    scope.spawn(move || {
                        let mut c = [0u64; 3];
                        for shard in (w..shards).step_by(workers) {
                            let s = run_shard(shard);
                            (0..3).for_each(|i| c[i] += s[i]);
                        }
                        c
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("monte carlo worker")).collect()
        });
        for c in partial {
            (0..3).for_each(|i| counts[i] += c[i]);
        }
    }
    let total = mc_samples as f64;
    let p_left = counts[0] as f64 / total;
    let p_right = counts[2] as f64 / total;
    Ok(ComparisonResult {
        rope,
        mc_samples,
        seed,
        method: METHOD_NOTE.to_string(),
        per_dataset,
        aggregate: RegionProbabilities {
            p_left,
            p_rope: 1.0 - p_left - p_right,
            p_right,
        },
    })
}
