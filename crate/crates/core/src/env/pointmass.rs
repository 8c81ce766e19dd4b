//! Planar point mass driven by bounded accelerations.
//!
//! State is `[px, py, vx, vy]`, action is `[ax, ay]`. One step is a
//! semi-implicit Euler update of a double integrator plus optional Gaussian
//! noise on every state coordinate. Reward is minus the distance from the
//! next position to the goal.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvDescriptor, EnvSpec, Environment};
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMassConfig {
    pub dt: f64,
    pub noise_std: f64,
    pub action_bound: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub goal: [f64; 2],
    /// Start positions are uniform in `[-start_radius, start_radius]^2`.
    pub start_radius: f64,
    /// Start velocities are uniform in `[-start_speed, start_speed]^2`.
    pub start_speed: f64,
    /// Positions are confined to `[-wall, wall]^2`; hitting a wall stops
    /// motion along that axis. Zero means no walls.
    pub wall: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            noise_std: 0.01,
            action_bound: 1.0,
            horizon: 100,
            gamma: 0.99,
            goal: [0.0, 0.0],
            start_radius: 1.0,
            start_speed: 1.0,
            wall: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PointMass {
    config: PointMassConfig,
    noise: Option<Normal<f64>>,
}

impl PointMass {
    pub fn new(config: PointMassConfig) -> Result<Self> {
        let c = &config;
        if !(c.dt > 0.0) || !(c.action_bound > 0.0) || !(c.start_radius >= 0.0) || !(c.start_speed >= 0.0) || c.horizon == 0 {
            return Err(Error::param("point mass needs dt, action_bound, horizon > 0"));
        }
        if !(c.wall >= 0.0) || !c.wall.is_finite() {
            return Err(Error::param(format!("wall must be finite and >= 0, got {}", c.wall)));
        }
        if !(0.0..1.0).contains(&c.gamma) {
            return Err(Error::param(format!("gamma must lie in [0, 1), got {}", c.gamma)));
        }
        let noise = match c.noise_std {
            s if s == 0.0 => None,
            s if s > 0.0 && s.is_finite() => Some(Normal::new(0.0, s).unwrap()),
            s => return Err(Error::param(format!("invalid noise_std {s}"))),
        };
        Ok(Self { config, noise })
    }

    pub fn config(&self) -> &PointMassConfig {
        &self.config
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        let b = self.config.action_bound;
        a.iter().map(|x| x.clamp(-b, b)).collect()
    }

    /// Noise-free successor state.
    pub fn mean_next(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut next = self.integrate(s, a);
        self.confine(&mut next);
        next
    }

    fn integrate(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let dt = self.config.dt;
        let a = self.clip_action(a);
        let vx = s[2] + a[0] * dt;
        let vy = s[3] + a[1] * dt;
        vec![s[0] + vx * dt, s[1] + vy * dt, vx, vy]
    }

    /// Projects a position outside the walls back onto them.
    pub fn confine(&self, s: &mut [f64]) {
        let w = self.config.wall;
        if w > 0.0 {
            for axis in 0..2 {
                if s[axis].abs() > w {
                    s[axis] = s[axis].clamp(-w, w);
                    s[axis + 2] = 0.0;
                }
            }
        }
    }

    pub fn goal_distance(&self, s: &[f64]) -> f64 {
        let g = self.config.goal;
        ((s[0] - g[0]).powi(2) + (s[1] - g[1]).powi(2)).sqrt()
    }
}

impl Environment for PointMass {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            id: "pointmass-v0".into(),
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            action_bound: Some(self.config.action_bound),
            horizon: self.config.horizon,
            gamma: self.config.gamma,
            spec: EnvSpec::PointMass(self.config.clone()),
        }
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let r = self.config.start_radius;
        let v = self.config.start_speed;
        let mut draw = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        vec![draw(r), draw(r), draw(v), draw(v)]
    }

    fn step(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
        check_dim("point mass state", STATE_DIM, s.len())?;
        check_dim("point mass action", ACTION_DIM, a.len())?;
        if s.iter().chain(a).any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite point mass state or action"));
        }
        let mut next = self.integrate(s, a);
        if let Some(noise) = &self.noise {
            next.iter_mut().for_each(|x| *x += noise.sample(rng));
        }
        self.confine(&mut next);
        let r = -self.goal_distance(&next);
        Ok((next, r))
    }

    fn reward(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
        check_dim("point mass state", STATE_DIM, s.len())?;
        check_dim("point mass action", ACTION_DIM, a.len())?;
        check_dim("point mass next state", STATE_DIM, s_next.len())?;
        Ok(-self.goal_distance(s_next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn double_integrator_step() {
        let env = PointMass::new(PointMassConfig {
            noise_std: 0.0,
            wall: 0.0,
            ..Default::default()
        })
        .unwrap();
        let mut rng = rng_from_seed(0);
        let (next, r) = env.step(&[1.0, 0.0, 0.5, 0.0], &[2.0, -1.0], &mut rng).unwrap();
        // Action clipped to (1, -1): v = (0.6, -0.1), p = (1.06, -0.01).
        let want = [1.06, -0.01, 0.6, -0.1];
        for (n, w) in next.iter().zip(want) {
            assert!((n - w).abs() < 1e-12);
        }
        assert!((r + (1.06f64.powi(2) + 0.0001).sqrt()).abs() < 1e-12);
        assert_eq!(env.reward(&[0.0; 4], &[0.0; 2], &next).unwrap(), r);
    }

    #[test]
    fn walls_stop_motion_along_the_blocked_axis() {
        let env = PointMass::new(PointMassConfig {
            noise_std: 0.0,
            wall: 1.0,
            ..Default::default()
        })
        .unwrap();
        let next = env.mean_next(&[0.98, 0.5, 0.5, -0.2], &[1.0, 0.0]);
        assert_eq!(next[0], 1.0);
        assert_eq!(next[2], 0.0);
        assert!((next[1] - 0.48).abs() < 1e-12 && (next[3] + 0.2).abs() < 1e-12);
        let inside = env.mean_next(&[0.0, 0.0, 0.1, 0.1], &[0.0, 0.0]);
        assert!((inside[0] - 0.01).abs() < 1e-15 && inside[2] == 0.1);
    }

    #[test]
    fn resets_stay_in_the_start_box() {
        let env = PointMass::new(PointMassConfig::default()).unwrap();
        let c = env.config().clone();
        let mut rng = rng_from_seed(2);
        for _ in 0..1000 {
            let s = env.reset(&mut rng);
            assert!(s[..2].iter().all(|p| p.abs() <= c.start_radius));
            assert!(s[2..].iter().all(|v| v.abs() <= c.start_speed));
        }
    }

    #[test]
    fn seeded_steps_repeat() {
        let env = PointMass::new(PointMassConfig::default()).unwrap();
        let run = || {
            let mut rng = rng_from_seed(4);
            let s = env.reset(&mut rng);
            env.step(&s, &[0.3, 0.3], &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_config_and_inputs() {
        assert!(PointMass::new(PointMassConfig {
            dt: 0.0,
            ..Default::default()
        })
        .is_err());
        let env = PointMass::new(PointMassConfig::default()).unwrap();
        let mut rng = rng_from_seed(0);
        assert!(env.step(&[0.0; 3], &[0.0; 2], &mut rng).is_err());
        assert!(env.step(&[f64::NAN, 0.0, 0.0, 0.0], &[0.0; 2], &mut rng).is_err());
    }
}
