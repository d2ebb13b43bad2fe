//! Declarative experiment configuration and the named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::costs::CostSpec;
use crate::env::{LatencyModel, SimParams, StartMode};
use crate::error::{NfqError, Result};
use crate::net::{Activation, LayerSpec, OptimizerKind, WeightInit};
use crate::nfq::{EpsilonKind, EpsilonSchedule, TrainSchedule};
use crate::qfunc::{ActionSet, Encoding, QFunction};
use crate::batch::stacked_dim;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub sim: SimParams,
    pub latency: LatencyModel,
    /// How training episodes start.
    pub start: StartMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub encoding: Encoding,
    pub hidden: Vec<LayerSpec>,
    pub output: Activation,
    pub init: WeightInit,
    pub optimizer: OptimizerKind,
    pub lookback: usize,
    pub actions: Vec<f64>,
    /// Fixed scale mapping actions into `[-1, 1]`.
    pub action_bound: f64,
    /// Whether the action set is meant to be extended after training.
    pub plan_action_extension: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerCadence {
    pub refit_every: usize,
    /// Last episode (exclusive) that may trigger a refit; `None` means half the run.
    pub refit_until: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train: TrainSchedule,
    pub epsilon: EpsilonSchedule,
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Run a greedy evaluation episode after each training episode.
    pub eval_each_episode: bool,
    /// Offline mode: TD updates between evaluations.
    pub eval_every_td: usize,
    /// Offline mode: total TD updates.
    pub offline_td_updates: usize,
    pub normalizer: NormalizerCadence,
    /// Accepts `gamma = 1` without re-initialization; divergence is likely.
    pub allow_gamma_one: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub network: u64,
    pub exploration: u64,
    pub environment: u64,
}

impl Seeds {
    pub fn from_base(seed: u64) -> Self {
        Seeds { network: seed, exploration: seed.wrapping_add(1_000_003), environment: seed.wrapping_add(2_000_003) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: Option<PathBuf>,
    /// Dataset injected as demonstration before training starts.
    pub demonstration: Option<PathBuf>,
    /// Write a checkpoint every this many episodes (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub save_eval_trajectories: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub schedule: ScheduleConfig,
    pub cost: CostSpec,
    pub seeds: Seeds,
    pub io: IoConfig,
}

pub const PRESETS: &[&str] = &[
    "nfq2-default",
    "nfq-legacy",
    "dqn-like",
    "small-network",
    "fresh-network",
    "epsilon-constant-0.1",
    "epsilon-zero",
    "lr-1e-4",
    "normalize-every-episode",
    "normalize-until-50",
    "short-episodes",
    "time-optimal",
    "shaped-in-margin",
    "energy-penalty",
    "extended-actions",
];

impl ExperimentConfig {
    /// Defaults for the simulator.
    pub fn nfq2_default() -> Self {
        let force = 10.0;
        ExperimentConfig {
            preset: "nfq2-default".into(),
            env: EnvConfig {
                sim: SimParams { force_bound: force, ..SimParams::default() },
                latency: LatencyModel::default(),
                start: StartMode::ContinueFromLast,
            },
            agent: AgentConfig {
                encoding: Encoding::ActionInInput,
                hidden: vec![
                    LayerSpec::new(256, Activation::Relu),
                    LayerSpec::new(256, Activation::Relu),
                    LayerSpec::new(100, Activation::Tanh),
                ],
                output: Activation::Sigmoid,
                init: WeightInit::Glorot,
                optimizer: OptimizerKind::Adam,
                lookback: 1,
                actions: vec![-force, 0.0, force],
                action_bound: force,
                plan_action_extension: false,
            },
            schedule: ScheduleConfig {
                train: TrainSchedule::default(),
                epsilon: EpsilonSchedule::default(),
                episodes: 200,
                steps_per_episode: 400,
                eval_each_episode: true,
                eval_every_td: 4,
                offline_td_updates: 400,
                normalizer: NormalizerCadence { refit_every: 10, refit_until: None },
                allow_gamma_one: false,
            },
            cost: CostSpec::shaped(),
            seeds: Seeds::from_base(0),
            io: IoConfig { out_dir: None, demonstration: None, checkpoint_every: 1, save_eval_trajectories: true },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::nfq2_default();
        match name {
            "nfq2-default" => {}
            "nfq-legacy" => {
                c.agent.hidden = vec![LayerSpec::new(20, Activation::Tanh), LayerSpec::new(20, Activation::Tanh)];
                c.agent.init = WeightInit::Uniform { bound: 0.5 };
                c.agent.optimizer = OptimizerKind::Rprop;
                c.schedule.train.mini_batch = None;
                c.schedule.train.gamma = 1.0;
                c.schedule.train.reinit_network_each_iteration = true;
                c.schedule.train.epochs_if_reinit = 300;
                c.schedule.train.bellman_updates_per_episode = 1;
                c.schedule.epsilon = EpsilonSchedule::constant(0.1);
                c.schedule.allow_gamma_one = true;
            }
            "dqn-like" => c.agent.encoding = Encoding::ActionPerOutput,
            "small-network" => {
                c.agent.hidden = vec![LayerSpec::new(20, Activation::Tanh), LayerSpec::new(20, Activation::Tanh)];
            }
            "fresh-network" => {
                c.schedule.train.reinit_network_each_iteration = true;
                c.schedule.train.epochs_if_reinit = 120;
                c.schedule.train.bellman_updates_per_episode = 1;
            }
            "epsilon-constant-0.1" => c.schedule.epsilon = EpsilonSchedule::constant(0.1),
            "epsilon-zero" => c.schedule.epsilon = EpsilonSchedule::constant(0.0),
            "lr-1e-4" => c.schedule.train.learning_rate = 1e-4,
            "normalize-every-episode" => {
                c.schedule.normalizer = NormalizerCadence { refit_every: 1, refit_until: Some(usize::MAX) };
            }
            "normalize-until-50" => c.schedule.normalizer = NormalizerCadence { refit_every: 10, refit_until: Some(50) },
            "short-episodes" => c.schedule.steps_per_episode = 200,
            "time-optimal" => c.cost = CostSpec::time_optimal(),
            "shaped-in-margin" => c.cost = CostSpec::shaped_in_margin(0.05),
            "energy-penalty" => c.cost = c.cost.with_action_penalty(0.001 * c.cost.step_cost),
            "extended-actions" => {
                let bound = ActionSet::extended(10.0).max_magnitude();
                c.agent.action_bound = bound;
                c.env.sim.force_bound = bound;
                c.agent.plan_action_extension = true;
            }
            other => {
                return Err(NfqError::config(format!("preset: unknown preset `{other}`, expected one of {}", PRESETS.join(", "))))
            }
        }
        c.preset = name.to_string();
        Ok(c)
    }

    /// Parses a JSON document. Missing fields are filled from the preset named by its
    /// `preset` key (default `nfq2-default`).
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| NfqError::config(format!("config is not valid JSON: {e}")))?;
        let preset = value.get("preset").and_then(Value::as_str).unwrap_or("nfq2-default");
        let mut base = serde_json::to_value(Self::preset(preset)?).expect("config serializes");
        merge(&mut base, value);
        let config: Self = serde_json::from_value(base).map_err(|e| NfqError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NfqError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn action_set(&self) -> Result<ActionSet> {
        ActionSet::new(self.agent.actions.clone()).map_err(|e| NfqError::config(format!("agent.actions: {e}")))
    }

    pub fn state_dim(&self) -> usize {
        stacked_dim(self.agent.lookback)
    }

    /// Fresh Q-function for this configuration.
    pub fn build_qfunction(&self, seed: u64) -> Result<QFunction> {
        QFunction::new(
            self.agent.encoding,
            self.state_dim(),
            &self.agent.hidden,
            self.agent.output,
            self.action_set()?,
            self.agent.action_bound,
            self.agent.init,
            seed,
        )
    }

    /// Last episode (exclusive) in which the normalizer may be refit.
    pub fn refit_until(&self) -> usize {
        self.schedule.normalizer.refit_until.unwrap_or(self.schedule.episodes / 2)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.sim.validate()?;
        self.cost.validate()?;
        let actions = self.action_set()?;
        let a = &self.agent;
        if a.lookback == 0 {
            return Err(NfqError::config("agent.lookback: must be at least 1"));
        }
        if !(a.action_bound > 0.0) || actions.max_magnitude() > a.action_bound {
            return Err(NfqError::config(format!(
                "agent.action_bound: {} must be positive and cover the largest action {}",
                a.action_bound,
                actions.max_magnitude()
            )));
        }
        if actions.max_magnitude() > self.env.sim.force_bound {
            return Err(NfqError::config("env.sim.force_bound: smaller than the largest action"));
        }
        if a.encoding == Encoding::ActionPerOutput && a.plan_action_extension {
            return Err(NfqError::config(
                "agent.plan_action_extension: the action set of an action-per-output network cannot be extended",
            ));
        }
        if let Some(i) = a.hidden.iter().position(|l| l.width == 0) {
            return Err(NfqError::config(format!("agent.hidden[{i}].width: must be at least 1")));
        }
        if let WeightInit::Uniform { bound } = a.init {
            if !(bound > 0.0) {
                return Err(NfqError::config("agent.init.bound: must be positive"));
            }
        }
        let s = &self.schedule;
        let t = &s.train;
        if !(t.gamma >= 0.0 && t.gamma <= 1.0) {
            return Err(NfqError::config(format!("schedule.train.gamma: must lie in [0, 1], got {}", t.gamma)));
        }
        if t.gamma == 1.0 {
            if !(t.reinit_network_each_iteration || s.allow_gamma_one) {
                return Err(NfqError::config(
                    "schedule.train.gamma: 1.0 requires reinit_network_each_iteration or schedule.allow_gamma_one",
                ));
            }
            log::warn!("gamma = 1.0: undiscounted targets can diverge; step costs are no longer bounded by the terminal cost");
        } else {
            self.cost.check_safety(t.gamma)?;
        }
        if !(t.learning_rate > 0.0) {
            return Err(NfqError::config("schedule.train.learning_rate: must be positive"));
        }
        if t.bellman_updates_per_episode == 0 {
            return Err(NfqError::config("schedule.train.bellman_updates_per_episode: must be at least 1"));
        }
        if t.mini_batch == Some(0) {
            return Err(NfqError::config("schedule.train.mini_batch: must be positive or null for full batch"));
        }
        if t.reinit_network_each_iteration && t.epochs_if_reinit == 0 {
            return Err(NfqError::config("schedule.train.epochs_if_reinit: must be at least 1"));
        }
        s.epsilon.validate()?;
        if s.steps_per_episode == 0 {
            return Err(NfqError::config("schedule.steps_per_episode: must be at least 1"));
        }
        if s.eval_every_td == 0 {
            return Err(NfqError::config("schedule.eval_every_td: must be at least 1"));
        }
        if s.normalizer.refit_every == 0 {
            return Err(NfqError::config("schedule.normalizer.refit_every: must be at least 1"));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl EpsilonSchedule {
    pub fn constant(value: f64) -> Self {
        EpsilonSchedule { kind: EpsilonKind::Constant, constant_value: value, ..EpsilonSchedule::default() }
    }
}
