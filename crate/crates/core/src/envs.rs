//! Deterministic continuous-control tasks with scripted experts.
//!
//! Both tasks use actions in `[-1, 1]^action_dim`, per-step rewards in
//! `[0, 1]`, and fixed-length episodes. Environments are value-semantic: a
//! step maps `(state, action)` to a new state without touching `self`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    /// Length of the observation vector handed to learners.
    pub state_dim: usize,
    pub action_dim: usize,
    pub episode_length: usize,
    pub dt: f64,
}

/// Internal physical state plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub physics: Vec<f64>,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Draws an initial state; identical seeds give identical states.
    fn reset(&self, seed: u64) -> EnvState;

    fn observe(&self, state: &EnvState) -> Vec<f64>;

    /// Advances one step. Actions outside the box are clipped.
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome>;

    /// Scripted controller action, always inside the action box.
    fn expert_action(&self, state: &EnvState) -> Vec<f64>;

    /// A state from a region much wider than normal operation, for probes.
    fn random_state(&self, rng: &mut dyn rand::RngCore) -> EnvState;
}

pub type EnvOverrides = BTreeMap<String, f64>;
pub type EnvFactory = fn(&EnvOverrides) -> Result<Box<dyn Environment>>;

/// Known environments by name.
pub fn env_registry() -> Registry<EnvFactory> {
    fn point_mass(o: &EnvOverrides) -> Result<Box<dyn Environment>> {
        Ok(Box::new(PointMass::from_overrides(o)?))
    }
    fn pendulum(o: &EnvOverrides) -> Result<Box<dyn Environment>> {
        Ok(Box::new(Pendulum::from_overrides(o)?))
    }
    let mut r: Registry<EnvFactory> = Registry::new("environment");
    r.register("point_mass", point_mass as EnvFactory)
        .register("pendulum", pendulum as EnvFactory);
    r
}

pub fn make_env(name: &str, overrides: &EnvOverrides) -> Result<Box<dyn Environment>> {
    let factory = env_registry().get(name)?;
    factory(overrides)
}

fn clip_action(action: &[f64], dim: usize) -> Result<Vec<f64>> {
    if action.len() != dim {
        return Err(Error::Invalid(format!(
            "action has {} entries, expected {dim}",
            action.len()
        )));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Invalid("non-finite action".into()));
    }
    Ok(action.iter().map(|a| a.clamp(-1.0, 1.0)).collect())
}

/// Applies overrides onto named fields, rejecting unknown names.
fn apply_overrides(
    env: &str,
    overrides: &EnvOverrides,
    fields: &mut [(&str, &mut f64)],
) -> Result<()> {
    for (k, v) in overrides {
        match fields.iter_mut().find(|(n, _)| n == k) {
            Some((_, slot)) => **slot = *v,
            None => {
                let known: Vec<&str> = fields.iter().map(|(n, _)| *n).collect();
                return Err(Error::config(
                    format!("{env}.{k}"),
                    format!("unknown physics constant (known: {})", known.join(", ")),
                ));
            }
        }
    }
    Ok(())
}

/// 2-D point mass pushed toward the origin.
///
/// State `(x, y, vx, vy)`, action `(fx, fy)`. Semi-implicit Euler:
/// `v ← v + dt·(force·a − drag·v)`, then `p ← p + dt·v`. Inelastic walls
/// at `±arena` stop the mass: a clamped coordinate loses its velocity.
/// Reward `exp(−4·|p|²)` at the next state.
#[derive(Debug, Clone)]
pub struct PointMass {
    spec: EnvSpec,
    pub force: f64,
    pub drag: f64,
    /// Initial positions are uniform in `[-start_range, start_range]²`.
    pub start_range: f64,
    pub start_speed: f64,
    pub arena: f64,
    pub expert_kp: f64,
    pub expert_kd: f64,
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                name: "point_mass".into(),
                state_dim: 4,
                action_dim: 2,
                episode_length: 300,
                dt: 0.02,
            },
            force: 4.0,
            drag: 0.05,
            start_range: 1.0,
            start_speed: 0.1,
            arena: 2.0,
            expert_kp: 4.0,
            expert_kd: 2.0,
        }
    }
}

impl PointMass {
    pub fn from_overrides(o: &EnvOverrides) -> Result<Self> {
        let mut env = Self::default();
        let mut len = env.spec.episode_length as f64;
        apply_overrides(
            "point_mass",
            o,
            &mut [
                ("force", &mut env.force),
                ("drag", &mut env.drag),
                ("start_range", &mut env.start_range),
                ("start_speed", &mut env.start_speed),
                ("arena", &mut env.arena),
                ("dt", &mut env.spec.dt),
                ("episode_length", &mut len),
                ("expert_kp", &mut env.expert_kp),
                ("expert_kd", &mut env.expert_kd),
            ],
        )?;
        if len < 1.0 || len.fract() != 0.0 {
            return Err(Error::config("point_mass.episode_length", "must be a positive integer"));
        }
        if !(env.arena > env.start_range) {
            return Err(Error::config("point_mass.arena", "must exceed start_range"));
        }
        if !(env.spec.dt > 0.0) || env.force < 0.0 || env.drag < 0.0 {
            return Err(Error::config("point_mass", "dt must be positive, force and drag non-negative"));
        }
        env.spec.episode_length = len as usize;
        Ok(env)
    }

    pub fn reward_at(x: f64, y: f64) -> f64 {
        (-4.0 * (x * x + y * y)).exp()
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.start_range;
        let s = self.start_speed;
        let mut draw = |b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
        EnvState {
            physics: vec![draw(r), draw(r), draw(s), draw(s)],
            step_index: 0,
        }
    }

    fn observe(&self, state: &EnvState) -> Vec<f64> {
        state.physics.clone()
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        if state.step_index >= self.spec.episode_length {
            return Err(Error::EpisodeDone);
        }
        let a = clip_action(action, 2)?;
        let dt = self.spec.dt;
        let p = &state.physics;
        let mut next = vec![0.0; 4];
        for i in 0..2 {
            let v = p[i + 2] + dt * (self.force * a[i] - self.drag * p[i + 2]);
            let x = p[i] + dt * v;
            let clamped = x.clamp(-self.arena, self.arena);
            next[i] = clamped;
            next[i + 2] = if clamped == x { v } else { 0.0 };
        }
        let (x, y) = (next[0], next[1]);
        let step_index = state.step_index + 1;
        Ok(StepOutcome {
            state: EnvState {
                physics: next,
                step_index,
            },
            reward: Self::reward_at(x, y),
            done: step_index == self.spec.episode_length,
        })
    }

    fn expert_action(&self, state: &EnvState) -> Vec<f64> {
        let p = &state.physics;
        (0..2)
            .map(|i| (-self.expert_kp * p[i] - self.expert_kd * p[i + 2]).clamp(-1.0, 1.0))
            .collect()
    }

    fn random_state(&self, rng: &mut dyn rand::RngCore) -> EnvState {
        let mut draw = |b: f64| rng.gen_range(-b..=b);
        EnvState {
            physics: vec![
                draw(self.arena),
                draw(self.arena),
                draw(10.0),
                draw(10.0),
            ],
            step_index: 0,
        }
    }
}

/// Torque-limited pendulum that starts hanging down.
///
/// Physical state `(θ, θ̇)` with θ = 0 upright; observation
/// `(cos θ, sin θ, θ̇)`. Dynamics `θ̈ = (g/l)·sin θ − damping·θ̇ + u·max_torque/(m·l²)`
/// integrated with classic RK4. Reward `(cos θ + 1)/2` at the next state.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub damping: f64,
    pub max_torque: f64,
    /// Expert switches from energy pumping to PD capture within this angle of upright.
    pub capture_angle: f64,
    pub expert_ke: f64,
    pub expert_kp: f64,
    pub expert_kd: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                name: "pendulum".into(),
                state_dim: 3,
                action_dim: 1,
                episode_length: 400,
                dt: 0.02,
            },
            gravity: 9.81,
            length: 1.0,
            mass: 1.0,
            damping: 0.02,
            max_torque: 4.0,
            capture_angle: 0.5,
            expert_ke: 1.0,
            expert_kp: 25.0,
            expert_kd: 6.0,
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn from_overrides(o: &EnvOverrides) -> Result<Self> {
        let mut env = Self::default();
        let mut len = env.spec.episode_length as f64;
        apply_overrides(
            "pendulum",
            o,
            &mut [
                ("gravity", &mut env.gravity),
                ("length", &mut env.length),
                ("mass", &mut env.mass),
                ("damping", &mut env.damping),
                ("max_torque", &mut env.max_torque),
                ("dt", &mut env.spec.dt),
                ("episode_length", &mut len),
                ("capture_angle", &mut env.capture_angle),
                ("expert_ke", &mut env.expert_ke),
                ("expert_kp", &mut env.expert_kp),
                ("expert_kd", &mut env.expert_kd),
            ],
        )?;
        if len < 1.0 || len.fract() != 0.0 {
            return Err(Error::config("pendulum.episode_length", "must be a positive integer"));
        }
        if !(env.spec.dt > 0.0 && env.length > 0.0 && env.mass > 0.0) || env.damping < 0.0 {
            return Err(Error::config("pendulum", "dt, length, mass must be positive; damping non-negative"));
        }
        env.spec.episode_length = len as usize;
        Ok(env)
    }

    fn accel(&self, theta: f64, omega: f64, u: f64) -> f64 {
        let inertia = self.mass * self.length * self.length;
        self.gravity / self.length * theta.sin() - self.damping * omega + u * self.max_torque / inertia
    }

    /// Mechanical energy, zero when resting upright.
    pub fn energy(&self, state: &EnvState) -> f64 {
        let (theta, omega) = (state.physics[0], state.physics[1]);
        let inertia = self.mass * self.length * self.length;
        0.5 * inertia * omega * omega + self.mass * self.gravity * self.length * (theta.cos() - 1.0)
    }

    pub fn reward_at(theta: f64) -> f64 {
        (theta.cos() + 1.0) / 2.0
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = PI + rng.gen_range(-0.1..=0.1);
        let omega = rng.gen_range(-0.05..=0.05);
        EnvState {
            physics: vec![theta, omega],
            step_index: 0,
        }
    }

    fn observe(&self, state: &EnvState) -> Vec<f64> {
        let (theta, omega) = (state.physics[0], state.physics[1]);
        vec![theta.cos(), theta.sin(), omega]
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        if state.step_index >= self.spec.episode_length {
            return Err(Error::EpisodeDone);
        }
        let u = clip_action(action, 1)?[0];
        let dt = self.spec.dt;
        let (th, w) = (state.physics[0], state.physics[1]);
        let f = |th: f64, w: f64| (w, self.accel(th, w, u));
        let k1 = f(th, w);
        let k2 = f(th + 0.5 * dt * k1.0, w + 0.5 * dt * k1.1);
        let k3 = f(th + 0.5 * dt * k2.0, w + 0.5 * dt * k2.1);
        let k4 = f(th + dt * k3.0, w + dt * k3.1);
        let th = th + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        let w = w + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        let step_index = state.step_index + 1;
        Ok(StepOutcome {
            state: EnvState {
                physics: vec![wrap_angle(th), w],
                step_index,
            },
            reward: Self::reward_at(th),
            done: step_index == self.spec.episode_length,
        })
    }

    fn expert_action(&self, state: &EnvState) -> Vec<f64> {
        let (th, w) = (wrap_angle(state.physics[0]), state.physics[1]);
        let u = if th.cos() > self.capture_angle.cos() {
            -(self.expert_kp * th + self.expert_kd * w) / self.max_torque
        } else {
            // energy pumping along θ̇ until the upright energy is reached
            let dir = if w >= 0.0 { 1.0 } else { -1.0 };
            self.expert_ke * (-self.energy(state)) * dir
        };
        vec![u.clamp(-1.0, 1.0)]
    }

    fn random_state(&self, rng: &mut dyn rand::RngCore) -> EnvState {
        EnvState {
            physics: vec![rng.gen_range(-PI..=PI), rng.gen_range(-20.0..=20.0)],
            step_index: 0,
        }
    }
}

/// Runs one episode of `policy` from `seed`, returning the summed reward.
pub fn rollout_return(
    env: &dyn Environment,
    seed: u64,
    mut policy: impl FnMut(&EnvState, &[f64]) -> Vec<f64>,
) -> Result<f64> {
    let mut s = env.reset(seed);
    let mut total = 0.0;
    loop {
        let obs = env.observe(&s);
        let a = policy(&s, &obs);
        let out = env.step(&s, &a)?;
        total += out.reward;
        s = out.state;
        if out.done {
            return Ok(total);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        let env = PointMass::default();
        assert_eq!(env.reset(7), env.reset(7));
        assert_ne!(env.reset(7), env.reset(8));
        assert_eq!(env.reset(7).step_index, 0);
    }

    #[test]
    fn pendulum_reset_hangs_down() {
        let env = Pendulum::default();
        for seed in 0..500 {
            let s = env.reset(seed);
            assert!((s.physics[0] - PI).abs() <= 0.1);
            assert!(s.physics[1].abs() <= 0.05);
            assert_eq!(s.step_index, 0);
        }
    }

    #[test]
    fn point_mass_goal_reward_and_rest() {
        let env = PointMass::default();
        let s = EnvState {
            physics: vec![0.0, 0.0, 0.0, 0.0],
            step_index: 0,
        };
        let out = env.step(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(out.reward, 1.0);
        let s = EnvState {
            physics: vec![0.3, -0.2, 0.0, 0.0],
            step_index: 0,
        };
        let out = env.step(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(&out.state.physics[..2], &[0.3, -0.2]);
    }

    #[test]
    fn point_mass_walls_stop_the_mass() {
        let env = PointMass::default();
        let s = EnvState {
            physics: vec![1.99, 0.0, 5.0, -1.0],
            step_index: 0,
        };
        let out = env.step(&s, &[1.0, 0.0]).unwrap();
        assert_eq!(out.state.physics[0], env.arena);
        assert_eq!(out.state.physics[2], 0.0);
        assert!(out.state.physics[3] < 0.0);
    }

    #[test]
    fn pendulum_bottom_reward_is_zero() {
        let env = Pendulum::default();
        let s = EnvState {
            physics: vec![PI, 0.0],
            step_index: 0,
        };
        let out = env.step(&s, &[0.0]).unwrap();
        assert!(out.reward.abs() < 1e-12);
    }

    #[test]
    fn stepping_past_the_end_is_rejected() {
        let env = PointMass::default();
        let mut s = env.reset(0);
        for i in 0..env.spec().episode_length {
            let out = env.step(&s, &[0.1, 0.1]).unwrap();
            assert_eq!(out.done, i + 1 == env.spec().episode_length);
            s = out.state;
        }
        assert!(matches!(env.step(&s, &[0.0, 0.0]), Err(Error::EpisodeDone)));
    }

    #[test]
    fn out_of_box_actions_are_clipped() {
        let env = PointMass::default();
        let s = env.reset(3);
        assert_eq!(env.step(&s, &[5.0, -9.0]).unwrap(), env.step(&s, &[1.0, -1.0]).unwrap());
    }

    #[test]
    fn unknown_override_rejected() {
        let mut o = EnvOverrides::new();
        o.insert("mass".into(), 2.0);
        assert!(PointMass::from_overrides(&o).is_err());
        assert!(Pendulum::from_overrides(&o).is_ok());
        assert!(make_env("cartpole", &EnvOverrides::new()).is_err());
    }
}
