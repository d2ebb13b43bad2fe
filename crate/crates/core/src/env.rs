//! Environment interface and the cart-pole swing-up simulator.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::batch::{stacked_dim, Episode, Observation, StartTag, Transition};
use crate::costs::CostSpec;
use crate::error::{NfqError, Result};
use crate::qfunc::{scale_action, ActionSet, QFunction};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub force_bound: f64,
    pub tau: f64,
    pub x_bound: f64,
    /// Uniform jitter half-width applied to `x` and `alpha` on a fresh start.
    pub start_jitter: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force_bound: 10.0,
            tau: 0.02,
            x_bound: 2.4,
            start_jitter: 0.05,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("gravity", self.gravity),
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("half_length", self.half_length),
            ("force_bound", self.force_bound),
            ("tau", self.tau),
            ("x_bound", self.x_bound),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NfqError::config(format!("env.sim.{name}: must be positive, got {v}")));
            }
        }
        if !(0.0..=0.05).contains(&self.start_jitter) {
            return Err(NfqError::config("env.sim.start_jitter: must lie in [0, 0.05]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub x: f64,
    pub dx: f64,
    /// Pole angle in `(-π, π]`, 0 upright.
    pub alpha: f64,
    pub dalpha: f64,
}

impl SimState {
    pub fn hanging() -> Self {
        SimState { x: 0.0, dx: 0.0, alpha: PI, dalpha: 0.0 }
    }

    pub fn observation(&self) -> Observation {
        Observation::from_angle(self.x, self.dx, self.alpha, self.dalpha)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub delay_cycles: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum StartMode {
    CenterHanging,
    ContinueFromLast,
    Explicit { state: SimState },
}

pub trait Environment {
    /// Starts an episode and reports how it was started.
    fn reset(&mut self, start: StartMode, rng: &mut dyn RngCore) -> Result<(Observation, StartTag)>;
    /// Applies one action; returns the next observation and whether an endstop was hit.
    fn step(&mut self, action: f64) -> Result<(Observation, bool)>;
    /// Marks the current state as terminal, e.g. when the cost function ended the episode.
    fn terminate(&mut self);
}

#[derive(Clone, Debug)]
pub struct CartPole {
    pub params: SimParams,
    state: Option<SimState>,
    terminated: bool,
    pending: VecDeque<f64>,
    latency: LatencyModel,
}

impl CartPole {
    pub fn new(params: SimParams, latency: LatencyModel) -> Result<Self> {
        params.validate()?;
        Ok(CartPole { params, state: None, terminated: false, pending: VecDeque::new(), latency })
    }

    pub fn state(&self) -> Option<SimState> {
        self.state
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    fn fill_queue(&mut self) {
        self.pending = std::iter::repeat_n(0.0, self.latency.delay_cycles).collect();
    }

    /// Time derivative of `(x, dx, alpha, dalpha)` under force `f`.
    pub fn derivatives(p: &SimParams, s: &SimState, force: f64) -> [f64; 4] {
        let total_mass = p.cart_mass + p.pole_mass;
        let pm_l = p.pole_mass * p.half_length;
        let (sin_t, cos_t) = s.alpha.sin_cos();
        let temp = (force + pm_l * s.dalpha * s.dalpha * sin_t) / total_mass;
        let alpha_acc = (p.gravity * sin_t - cos_t * temp)
            / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos_t * cos_t / total_mass));
        let x_acc = temp - pm_l * alpha_acc * cos_t / total_mass;
        [s.dx, x_acc, s.dalpha, alpha_acc]
    }

    /// One explicit Euler step of length `tau`, without wrapping.
    pub fn euler(p: &SimParams, s: &SimState, force: f64, tau: f64) -> SimState {
        let d = Self::derivatives(p, s, force);
        SimState { x: s.x + tau * d[0], dx: s.dx + tau * d[1], alpha: s.alpha + tau * d[2], dalpha: s.dalpha + tau * d[3] }
    }

    /// Mechanical energy with potential measured from the pivot height.
    pub fn energy(p: &SimParams, s: &SimState) -> f64 {
        let (m, l) = (p.pole_mass, p.half_length);
        let kinetic = 0.5 * (p.cart_mass + m) * s.dx * s.dx
            + m * l * s.dx * s.dalpha * s.alpha.cos()
            + (2.0 / 3.0) * m * l * l * s.dalpha * s.dalpha;
        kinetic + m * p.gravity * l * s.alpha.cos()
    }
}

impl Environment for CartPole {
    fn reset(&mut self, start: StartMode, rng: &mut dyn RngCore) -> Result<(Observation, StartTag)> {
        let fresh = |rng: &mut dyn RngCore, p: &SimParams| {
            let j = p.start_jitter;
            let mut s = SimState::hanging();
            if j > 0.0 {
                s.x += rng.gen_range(-j..=j);
                s.alpha = wrap_angle(s.alpha + rng.gen_range(-j..=j));
            }
            s
        };
        let (state, tag) = match start {
            StartMode::CenterHanging => (fresh(rng, &self.params), StartTag::FreshCenter),
            StartMode::ContinueFromLast => match self.state {
                Some(s) if !self.terminated => (s, StartTag::Continued),
                _ => (fresh(rng, &self.params), StartTag::FreshCenter),
            },
            StartMode::Explicit { state } => {
                let values = [state.x, state.dx, state.alpha, state.dalpha];
                if values.iter().any(|v| !v.is_finite()) || state.x.abs() > self.params.x_bound {
                    return Err(NfqError::input(format!("explicit start state {state:?} is out of bounds")));
                }
                (SimState { alpha: wrap_angle(state.alpha), ..state }, StartTag::FreshCenter)
            }
        };
        if tag == StartTag::FreshCenter {
            self.fill_queue();
        }
        self.state = Some(state);
        self.terminated = false;
        Ok((state.observation(), tag))
    }

    fn step(&mut self, action: f64) -> Result<(Observation, bool)> {
        let Some(state) = self.state else {
            return Err(NfqError::Protocol("step before reset".into()));
        };
        if self.terminated {
            return Err(NfqError::Protocol("step after termination".into()));
        }
        if !(action.abs() <= self.params.force_bound) {
            return Err(NfqError::input(format!("force {action} exceeds bound {}", self.params.force_bound)));
        }
        let force = if self.latency.delay_cycles == 0 {
            action
        } else {
            self.pending.push_back(action);
            self.pending.pop_front().unwrap_or(0.0)
        };
        let mut next = Self::euler(&self.params, &state, force, self.params.tau);
        next.alpha = wrap_angle(next.alpha);
        self.terminated = next.x.abs() > self.params.x_bound;
        self.state = Some(next);
        Ok((next.observation(), self.terminated))
    }

    fn terminate(&mut self) {
        self.terminated = true;
    }
}

/// Chooses greedy actions from stacked states.
pub trait Policy {
    fn greedy(&self, state: &[f64], mask: Option<&[bool]>) -> Result<usize>;
}

impl Policy for QFunction {
    fn greedy(&self, state: &[f64], mask: Option<&[bool]>) -> Result<usize> {
        self.greedy_action(state, mask).map(|(i, _)| i)
    }
}

/// Adapter turning a closure over stacked states into a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&[f64]) -> usize> Policy for FnPolicy<F> {
    fn greedy(&self, state: &[f64], _mask: Option<&[bool]>) -> Result<usize> {
        Ok((self.0)(state))
    }
}

/// Everything [`run_episode`] needs besides the environment and the policy.
#[derive(Clone, Debug)]
pub struct EpisodeSpec<'a> {
    pub actions: &'a ActionSet,
    pub action_bound: f64,
    pub lookback: usize,
    pub cost: &'a CostSpec,
    pub start: StartMode,
    pub max_steps: usize,
    pub epsilon: f64,
    pub mask: Option<&'a [bool]>,
}

/// Rolling history that yields stacked states online, matching [`Episode::stacked_state`].
#[derive(Clone, Debug)]
struct History {
    lookback: usize,
    obs: VecDeque<Observation>,
    actions: VecDeque<f64>,
}

impl History {
    fn new(lookback: usize, first: Observation) -> Self {
        History {
            lookback,
            obs: std::iter::repeat_n(first, lookback).collect(),
            actions: std::iter::repeat_n(0.0, lookback.saturating_sub(1)).collect(),
        }
    }

    fn push(&mut self, scaled_action: f64, next: Observation) {
        self.obs.pop_back();
        self.obs.push_front(next);
        if self.lookback > 1 {
            self.actions.pop_back();
            self.actions.push_front(scaled_action);
        }
    }

    fn stacked(&self, out: &mut Vec<f64>) {
        out.clear();
        for o in &self.obs {
            out.extend_from_slice(&o.to_array());
        }
        out.extend(self.actions.iter().copied());
    }
}

/// Rolls out one ε-greedy episode and records its transitions with costs from `spec.cost`.
///
/// A uniform draw from `rng` decides exploration at every step; exploring picks uniformly
/// among the unmasked actions. `env_rng` only feeds the environment reset.
pub fn run_episode(
    env: &mut dyn Environment,
    policy: &dyn Policy,
    spec: &EpisodeSpec<'_>,
    rng: &mut dyn RngCore,
    env_rng: &mut dyn RngCore,
) -> Result<Episode> {
    if spec.max_steps == 0 {
        return Err(NfqError::config("max_steps must be at least 1"));
    }
    if spec.lookback == 0 {
        return Err(NfqError::config("lookback must be at least 1"));
    }
    let allowed: Vec<usize> = match spec.mask {
        Some(m) if m.len() != spec.actions.len() => return Err(NfqError::shape("mask length differs from action count")),
        Some(m) => (0..m.len()).filter(|i| m[*i]).collect(),
        None => (0..spec.actions.len()).collect(),
    };
    if allowed.is_empty() {
        return Err(NfqError::input("every action is masked"));
    }
    let (mut obs, tag) = env.reset(spec.start, env_rng)?;
    let mut history = History::new(spec.lookback, obs);
    let mut stacked = Vec::with_capacity(stacked_dim(spec.lookback));
    let mut episode = Episode::new(tag);
    for step in 0..spec.max_steps {
        let explore = rng.gen::<f64>() < spec.epsilon;
        let index = if explore {
            allowed[rng.gen_range(0..allowed.len())]
        } else {
            history.stacked(&mut stacked);
            policy.greedy(&stacked, spec.mask)?
        };
        let action = *spec
            .actions
            .values()
            .get(index)
            .ok_or_else(|| NfqError::input(format!("policy chose action index {index} out of range")))?;
        let (next, hit_endstop) = env.step(action)?;
        let (mut cost, mut terminal) = spec.cost.evaluate(&obs, action, &next);
        if hit_endstop && !terminal {
            log::warn!("environment terminated at x = {} outside the cost function's terminal region", next.x);
            cost = spec.cost.terminal_cost;
            terminal = true;
        }
        if terminal && !hit_endstop {
            env.terminate();
        }
        episode.transitions.push(Transition {
            obs,
            action_index: index,
            action_value: action,
            next_obs: next,
            cost,
            terminal,
            episode_id: 0,
            step_index: step,
        });
        if terminal {
            break;
        }
        history.push(scale_action(action, spec.action_bound)?, next);
        obs = next;
    }
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn env() -> CartPole {
        CartPole::new(SimParams { start_jitter: 0.0, ..SimParams::default() }, LatencyModel::default()).unwrap()
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn reset_modes() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (obs, tag) = e.reset(StartMode::CenterHanging, &mut rng).unwrap();
        assert_eq!(tag, StartTag::FreshCenter);
        assert_eq!([obs.x, obs.dx, obs.cos_a, obs.da], [0.0, 0.0, -1.0, 0.0]);
        assert!(obs.sin_a.abs() < 1e-15);
        let up = SimState { x: 0.3, dx: 0.1, alpha: 0.0, dalpha: 0.0 };
        let (obs, _) = e.reset(StartMode::Explicit { state: up }, &mut rng).unwrap();
        assert_eq!(obs.to_array(), [0.3, 0.1, 1.0, 0.0, 0.0]);
        let far = SimState { x: 3.0, ..up };
        assert!(e.reset(StartMode::Explicit { state: far }, &mut rng).is_err());
    }

    #[test]
    fn continue_after_endstop_starts_fresh() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let edge = SimState { x: 2.39, dx: 2.0, alpha: PI, dalpha: 0.0 };
        e.reset(StartMode::Explicit { state: edge }, &mut rng).unwrap();
        let (_, done) = e.step(10.0).unwrap();
        assert!(done);
        assert!(matches!(e.step(0.0), Err(NfqError::Protocol(_))));
        let (obs, tag) = e.reset(StartMode::ContinueFromLast, &mut rng).unwrap();
        assert_eq!(tag, StartTag::FreshCenter);
        assert_eq!(obs.x, 0.0);
    }

    #[test]
    fn equilibria_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for alpha in [0.0, PI] {
            let mut e = env();
            e.reset(StartMode::Explicit { state: SimState { x: 0.0, dx: 0.0, alpha, dalpha: 0.0 } }, &mut rng).unwrap();
            for _ in 0..10 {
                e.step(0.0).unwrap();
            }
            let s = e.state().unwrap();
            assert!(s.x.abs() < 1e-12 && s.dx.abs() < 1e-12 && s.dalpha.abs() < 1e-12);
            assert!((s.alpha.cos() - alpha.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn latency_delays_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut delayed = CartPole::new(SimParams { start_jitter: 0.0, ..SimParams::default() }, LatencyModel { delay_cycles: 2 }).unwrap();
        delayed.reset(StartMode::CenterHanging, &mut rng).unwrap();
        let a = delayed.step(10.0).unwrap().0;
        let b = delayed.step(10.0).unwrap().0;
        assert!(a.x.abs() < 1e-15);
        assert!(b.dx.abs() < 1e-15);
        let c = delayed.step(0.0).unwrap().0;
        assert!(c.dx > 0.0);
    }
}
