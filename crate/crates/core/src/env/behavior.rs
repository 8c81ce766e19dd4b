//! Scripted behavior policies for the point mass, in three quality tiers.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pointmass::{PointMassConfig, ACTION_DIM, STATE_DIM};
use super::Policy;
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorTier {
    Random,
    Medium,
    Expert,
}

impl BehaviorTier {
    pub fn name(self) -> &'static str {
        match self {
            BehaviorTier::Random => "random",
            BehaviorTier::Medium => "medium",
            BehaviorTier::Expert => "expert",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BehaviorTier::Random),
            "medium" => Ok(BehaviorTier::Medium),
            "expert" => Ok(BehaviorTier::Expert),
            _ => Err(Error::param(format!("unknown behavior tier {s:?}"))),
        }
    }

    /// Default real-data ratio for augmented training on this tier.
    pub fn default_real_ratio(self) -> f64 {
        match self {
            BehaviorTier::Random => 0.5,
            BehaviorTier::Medium => 0.7,
            BehaviorTier::Expert => 0.9,
        }
    }
}

/// Noisy PD controller toward the goal, or uniform noise for the random tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedController {
    pub tier: BehaviorTier,
    pub kp: f64,
    pub kd: f64,
    pub noise_std: f64,
    pub action_bound: f64,
    pub goal: [f64; 2],
}

impl ScriptedController {
    pub fn for_tier(tier: BehaviorTier, env: &PointMassConfig) -> Self {
        let (kp, kd, noise_std) = match tier {
            BehaviorTier::Random => (0.0, 0.0, 0.0),
            BehaviorTier::Medium => (0.4, 0.4, 0.6),
            BehaviorTier::Expert => (1.0, 1.6, 0.05),
        };
        Self {
            tier,
            kp,
            kd,
            noise_std,
            action_bound: env.action_bound,
            goal: env.goal,
        }
    }
}

impl Policy for ScriptedController {
    fn act(&self, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        check_dim("controller state", STATE_DIM, s.len())?;
        let b = self.action_bound;
        if self.tier == BehaviorTier::Random {
            return Ok((0..ACTION_DIM).map(|_| rng.random_range(-b..=b)).collect());
        }
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::param(e.to_string()))?;
        Ok((0..ACTION_DIM)
            .map(|i| {
                let u = -self.kp * (s[i] - self.goal[i]) - self.kd * s[i + 2] + noise.sample(rng);
                u.clamp(-b, b)
            })
            .collect())
    }
}
