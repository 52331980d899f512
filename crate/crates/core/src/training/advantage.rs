//! Per-instance reward normalization over the N multi-start trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-8;

/// What the centred rewards are divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageScale {
    /// Standard deviation: advantages are unit-free.
    #[default]
    StdDev,
    /// Mean squared deviation, taken literally. Scale-dependent.
    Variance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageStats {
    pub mean: f64,
    /// Spread actually divided by, after the floor.
    pub sigma: f64,
    pub advantages: Vec<f64>,
    /// True when every reward is equal and all advantages are zero.
    pub degenerate: bool,
}

pub fn normalized_advantages(rewards: &[f64]) -> Result<AdvantageStats> {
    normalized_advantages_with(rewards, AdvantageScale::StdDev)
}

pub fn normalized_advantages_with(rewards: &[f64], scale: AdvantageScale) -> Result<AdvantageStats> {
    if rewards.len() < 2 {
        return Err(Error::param(format!("need at least 2 rewards, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let msd = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let spread = match scale {
        AdvantageScale::StdDev => msd.sqrt(),
        AdvantageScale::Variance => msd,
    };
    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    let sigma = spread.max(SIGMA_FLOOR);
    let advantages = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / sigma).collect()
    };
    Ok(AdvantageStats {
        mean,
        sigma,
        advantages,
        degenerate,
    })
}

/// `(|mean|, |std − 1|)` of a set of advantages; the second is 0 for degenerate sets.
pub fn advantage_moments(stats: &AdvantageStats) -> (f64, f64) {
    let a = &stats.advantages;
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    if stats.degenerate || stats.sigma <= SIGMA_FLOOR {
        return (mean.abs(), 0.0);
    }
    let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean.abs(), (std - 1.0).abs())
}
