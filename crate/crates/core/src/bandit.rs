//! Adaptive batch-size selection.
//!
//! Batch sizes are grouped into buckets; each bucket is a bandit arm with a
//! Gaussian reward model (batch velocity) maintained as a normal-inverse-gamma
//! posterior. Selection uses mean-variance Thompson sampling: each round a
//! mean and variance are drawn from every arm's posterior, the arm maximizing
//! `mean - rho * variance` wins, and the arm's maximal covered size is the
//! recommendation. Rewards update the arm whose bucket contains the batch
//! size that was actually built.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Velocity of a verified batch: balls proven robust within the batch divided
/// by the batch's analysis time (refinement verification excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub proven: usize,
    pub time_s: f64,
}

impl Velocity {
    pub fn new(proven: usize, time_s: f64) -> Result<Self> {
        if !time_s.is_finite() || time_s <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "velocity time must be positive, got {}",
                time_s
            )));
        }
        Ok(Self { proven, time_s })
    }

    pub fn value(&self) -> f64 {
        self.proven as f64 / self.time_s
    }
}

/// Posterior state of one bucketed arm.
///
/// The sufficient statistics (count, mean, sum of squared deviations) feed a
/// normal-inverse-gamma posterior with a weakly-informative prior: prior mean
/// 0, prior pseudo-count 1, prior shape 1, prior scale 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmState {
    /// Smallest batch size this arm covers.
    pub lo: usize,
    /// Largest batch size this arm covers; used as the recommendation.
    pub hi: usize,
    pub count: usize,
    pub mean: f64,
    pub sum_sq_dev: f64,
}

const PRIOR_MEAN: f64 = 0.0;
const PRIOR_PSEUDO_COUNT: f64 = 1.0;
const PRIOR_SHAPE: f64 = 1.0;
const PRIOR_SCALE: f64 = 1.0;

impl ArmState {
    fn new(lo: usize, hi: usize) -> Self {
        Self {
            lo,
            hi,
            count: 0,
            mean: 0.0,
            sum_sq_dev: 0.0,
        }
    }

    fn observe(&mut self, reward: f64) {
        // Welford update of mean and sum of squared deviations.
        self.count += 1;
        let delta = reward - self.mean;
        self.mean += delta / self.count as f64;
        self.sum_sq_dev += delta * (reward - self.mean);
    }

    /// Draws (mean, variance) from the posterior.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let n = self.count as f64;
        let kappa_n = PRIOR_PSEUDO_COUNT + n;
        let mu_n = (PRIOR_PSEUDO_COUNT * PRIOR_MEAN + n * self.mean) / kappa_n;
        let alpha_n = PRIOR_SHAPE + n / 2.0;
        let beta_n = PRIOR_SCALE
            + 0.5 * self.sum_sq_dev
            + PRIOR_PSEUDO_COUNT * n * (self.mean - PRIOR_MEAN).powi(2) / (2.0 * kappa_n);
        // variance ~ InvGamma(alpha_n, beta_n)
        let gamma = Gamma::new(alpha_n, 1.0 / beta_n).expect("valid gamma parameters");
        let precision: f64 = gamma.sample(rng).max(1e-12);
        let variance = 1.0 / precision;
        let normal = Normal::new(mu_n, (variance / kappa_n).sqrt()).expect("valid normal");
        (normal.sample(rng), variance)
    }
}

/// One recorded selection round, for trace export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Sampled mean-variance scores per arm; empty during forced initial pulls.
    pub scores: Vec<f64>,
    pub chosen_arm: usize,
    pub recommended_k: usize,
    /// Filled in by the matching update: (actual size, reward).
    pub reward: Option<(usize, f64)>,
}

/// Mean-variance Thompson sampling over bucketed batch sizes.
#[derive(Debug, Clone)]
pub struct BatchSizeBandit {
    arms: Vec<ArmState>,
    max_batch_size: usize,
    rho: f64,
    trace: Vec<RoundTrace>,
}

impl BatchSizeBandit {
    /// Creates `ceil(max_batch_size / bucket_size)` arms; arm `j` covers
    /// sizes `j*bucket_size + 1 ..= min((j+1)*bucket_size, max_batch_size)`.
    pub fn new(max_batch_size: usize, bucket_size: usize, rho: f64) -> Result<Self> {
        if max_batch_size < 1 {
            return Err(Error::InvalidInput("max_batch_size must be at least 1".into()));
        }
        if bucket_size < 1 || bucket_size > max_batch_size {
            return Err(Error::InvalidInput(format!(
                "bucket_size must lie in [1, {}], got {}",
                max_batch_size, bucket_size
            )));
        }
        if !rho.is_finite() || rho < 0.0 {
            return Err(Error::InvalidInput("rho must be non-negative".into()));
        }
        let mut arms = Vec::new();
        let mut lo = 1;
        while lo <= max_batch_size {
            let hi = (lo + bucket_size - 1).min(max_batch_size);
            arms.push(ArmState::new(lo, hi));
            lo = hi + 1;
        }
        Ok(Self {
            arms,
            max_batch_size,
            rho,
            trace: Vec::new(),
        })
    }

    pub fn arms(&self) -> &[ArmState] {
        &self.arms
    }

    pub fn max_batch_size(&self) -> usize {
        self.max_batch_size
    }

    /// Recommends a batch size: every arm is pulled once in round-robin order
    /// first; afterwards the mean-variance Thompson rule picks the arm and
    /// the arm's maximal covered size is returned.
    pub fn recommend<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let round = self.trace.len();
        if let Some(idx) = self.arms.iter().position(|a| a.count == 0) {
            let k = self.arms[idx].hi;
            self.trace.push(RoundTrace {
                round,
                scores: Vec::new(),
                chosen_arm: idx,
                recommended_k: k,
                reward: None,
            });
            return k;
        }
        let mut scores = Vec::with_capacity(self.arms.len());
        for arm in &self.arms {
            let (mean, variance) = arm.sample(rng);
            scores.push(mean - self.rho * variance);
        }
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        let k = self.arms[best].hi;
        self.trace.push(RoundTrace {
            round,
            scores,
            chosen_arm: best,
            recommended_k: k,
            reward: None,
        });
        k
    }

    /// Absorbs the velocity of a completed batch into the arm whose bucket
    /// contains the batch's actual size.
    pub fn update(&mut self, actual_size: usize, velocity: Velocity) -> Result<()> {
        if actual_size < 1 || actual_size > self.max_batch_size {
            return Err(Error::InvalidInput(format!(
                "batch size {} outside [1, {}]",
                actual_size, self.max_batch_size
            )));
        }
        let idx = self
            .arms
            .iter()
            .position(|a| a.lo <= actual_size && actual_size <= a.hi)
            .expect("buckets cover every size");
        self.arms[idx].observe(velocity.value());
        if let Some(last) = self.trace.last_mut() {
            if last.reward.is_none() {
                last.reward = Some((actual_size, velocity.value()));
            }
        }
        Ok(())
    }

    /// Index of the arm covering a size.
    pub fn arm_of(&self, size: usize) -> Option<usize> {
        self.arms.iter().position(|a| a.lo <= size && size <= a.hi)
    }

    pub fn trace(&self) -> &[RoundTrace] {
        &self.trace
    }

    /// Renders the selection trace as CSV (one row per round).
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("round,chosen_arm,recommended_k,actual_k,reward,scores\n");
        for r in &self.trace {
            let (actual, reward) = match r.reward {
                Some((a, v)) => (a.to_string(), format!("{}", v)),
                None => (String::new(), String::new()),
            };
            let scores = r
                .scores
                .iter()
                .map(|s| format!("{}", s))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round, r.chosen_arm, r.recommended_k, actual, reward, scores
            ));
        }
        out
    }
}
