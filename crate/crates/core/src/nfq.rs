//! Fitted Q-iteration: Bellman sweeps, fitting rounds, exploration schedules
//! and the growing-batch, offline and replay training loops.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{BatchMeta, DataSource, Episode, GrowingBatch, StackedTransitions, StartTag, OBS_DIM};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::env::{run_episode, CartPole, Environment, EpisodeSpec, SimState, StartMode};
use crate::error::{NfqError, Result};
use crate::metrics::{stability_metrics, StabilityParams, StabilityReport, TrajectoryRecord, METRICS_CSV_HEADER};
use crate::net::{fit, Dataset, Network, OptimizerKind, OptimizerState, WeightInit};
use crate::qfunc::{Encoding, Normalizer, QFunction, QModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub bellman_updates_per_episode: usize,
    pub epochs_per_bellman: usize,
    /// `None` trains on the full pattern set at once.
    pub mini_batch: Option<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub reinit_network_each_iteration: bool,
    pub epochs_if_reinit: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            bellman_updates_per_episode: 4,
            epochs_per_bellman: 8,
            mini_batch: Some(2048),
            gamma: 0.98,
            learning_rate: 1e-3,
            reinit_network_each_iteration: false,
            epochs_if_reinit: 120,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonKind {
    Linear,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub kind: EpsilonKind,
    pub start: f64,
    pub end: f64,
    /// Fraction of the run over which `start` decays to `end`.
    pub decay_fraction: f64,
    pub constant_value: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule { kind: EpsilonKind::Linear, start: 0.8, end: 0.05, decay_fraction: 0.25, constant_value: 0.1 }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("start", self.start), ("end", self.end), ("constant_value", self.constant_value)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(NfqError::config(format!("schedule.epsilon.{name}: must lie in [0, 1], got {v}")));
            }
        }
        if self.kind == EpsilonKind::Linear {
            if self.start < self.end {
                return Err(NfqError::config("schedule.epsilon.start: must not be below end"));
            }
            if !(self.decay_fraction > 0.0 && self.decay_fraction <= 1.0) {
                return Err(NfqError::config("schedule.epsilon.decay_fraction: must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

pub fn epsilon_at(schedule: &EpsilonSchedule, episode: usize, total_episodes: usize) -> f64 {
    match schedule.kind {
        EpsilonKind::Constant => schedule.constant_value,
        EpsilonKind::Linear => {
            let span = schedule.decay_fraction * total_episodes as f64;
            let progress = if span > 0.0 { (episode as f64 / span).min(1.0) } else { 1.0 };
            schedule.start + (schedule.end - schedule.start) * progress
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QStats {
    pub q_min: f64,
    pub q_avg: f64,
    pub q_max: f64,
}

impl QStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        // rounding in the mean must not break the ordering
        let avg = (sum / values.len() as f64).clamp(lo, hi);
        Some(QStats { q_min: lo, q_avg: avg, q_max: hi })
    }
}

/// One row of the q-statistics trace. Epoch 0 summarizes the next-state q-values of the
/// Bellman sweep; epochs `1..` summarize the network outputs seen while fitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QStatsRow {
    pub round: usize,
    pub epoch: usize,
    pub stats: QStats,
}

pub const QSTATS_CSV_HEADER: &str = "round,epoch,qmin,qavg,qmax";

impl QStatsRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.round, self.epoch, self.stats.q_min, self.stats.q_avg, self.stats.q_max)
    }
}

/// One supervised pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub input: Vec<f64>,
    pub target: f64,
    /// Output neuron the target applies to, for action-per-output networks.
    pub head: Option<usize>,
}

/// Result of one Bellman sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub targets: Vec<f64>,
    /// Statistics over every `Q(s', a)` evaluated for non-terminal transitions.
    pub next_q: Option<QStats>,
}

/// `c + γ min_a Q(s', a)` per transition, terminal transitions keep their cost, clipped to `[0, 1]`.
pub fn bellman_targets(model: &dyn QModel, data: &StackedTransitions, gamma: f64) -> Result<Sweep> {
    if data.is_empty() {
        return Err(NfqError::input("cannot generate patterns from an empty batch"));
    }
    let live: Vec<usize> = (0..data.len()).filter(|&i| !data.terminals[i]).collect();
    let mut next_states = Vec::with_capacity(live.len() * data.state_dim);
    for &i in &live {
        next_states.extend_from_slice(data.next_state(i));
    }
    let q = if live.is_empty() { Vec::new() } else { model.q_values_batch(&next_states, data.state_dim)? };
    let k = model.action_count();
    if q.len() != live.len() * k {
        return Err(NfqError::shape("model returned an unexpected number of q-values"));
    }
    let mut targets = data.costs.clone();
    for (row, &i) in live.iter().enumerate() {
        let min_q = q[row * k..(row + 1) * k].iter().fold(f64::INFINITY, |m, v| m.min(*v));
        targets[i] += gamma * min_q;
    }
    for t in &mut targets {
        *t = t.clamp(0.0, 1.0);
    }
    Ok(Sweep { targets, next_q: QStats::of(&q) })
}

/// Encoded network inputs for every transition of `data`.
fn encode_inputs(qf: &QFunction, data: &StackedTransitions) -> Result<Dataset> {
    let mut inputs = Vec::with_capacity(data.len() * qf.net.input_dim());
    for i in 0..data.len() {
        qf.encode_input_into(data.state(i), data.action_values[i], &mut inputs)?;
    }
    let heads = (qf.encoding == Encoding::ActionPerOutput).then(|| data.action_indices.clone());
    Ok(Dataset { input_dim: qf.net.input_dim(), inputs, targets: Vec::new(), heads })
}

/// One Bellman sweep over the batch, producing the training set for the next fit.
pub fn generate_pattern_set(data: &StackedTransitions, qf: &QFunction, gamma: f64) -> Result<(Dataset, Sweep)> {
    let sweep = bellman_targets(qf, data, gamma)?;
    let mut set = encode_inputs(qf, data)?;
    set.targets = sweep.targets.clone();
    Ok((set, sweep))
}

/// Expands a dataset back into individual patterns.
pub fn patterns(set: &Dataset) -> Vec<Pattern> {
    (0..set.len())
        .map(|i| Pattern {
            input: set.inputs[i * set.input_dim..(i + 1) * set.input_dim].to_vec(),
            target: set.targets[i],
            head: set.heads.as_ref().map(|h| h[i]),
        })
        .collect()
}

/// Mutable learner state carried across rounds.
#[derive(Clone, Debug)]
pub struct Learner {
    pub qf: QFunction,
    pub optimizer: OptimizerState,
    pub kind: OptimizerKind,
    pub init: WeightInit,
    pub learning_rate: f64,
    pub rng: ChaCha8Rng,
    pub rounds: usize,
}

impl Learner {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let qf = config.build_qfunction(config.seeds.network)?;
        let optimizer = OptimizerState::for_network(config.agent.optimizer, &qf.net, config.schedule.train.learning_rate);
        Ok(Learner {
            qf,
            optimizer,
            kind: config.agent.optimizer,
            init: config.agent.init,
            learning_rate: config.schedule.train.learning_rate,
            // offset keeps the shuffle stream apart from the initialization stream
            rng: ChaCha8Rng::seed_from_u64(config.seeds.network ^ 0x5eed_f17d),
            rounds: 0,
        })
    }
}

/// One Bellman sweep followed by fitting; returns the q-statistics trace of the round.
pub fn td_round(learner: &mut Learner, data: &StackedTransitions, schedule: &TrainSchedule) -> Result<Vec<QStatsRow>> {
    let round = learner.rounds;
    let (set, sweep) = generate_pattern_set(data, &learner.qf, schedule.gamma)?;
    let mut trace = Vec::new();
    if let Some(stats) = sweep.next_q.or_else(|| QStats::of(&sweep.targets)) {
        trace.push(QStatsRow { round, epoch: 0, stats });
    }
    let epochs = if schedule.reinit_network_each_iteration {
        let net = &learner.qf.net;
        learner.qf.net = Network::init(net.input_dim(), net.layers(), learner.init, learner.rng.gen())?;
        learner.optimizer = OptimizerState::for_network(learner.kind, &learner.qf.net, learner.learning_rate);
        schedule.epochs_if_reinit
    } else {
        schedule.epochs_per_bellman
    };
    let batch = schedule.mini_batch.unwrap_or(set.len());
    let stats = fit(&mut learner.qf.net, &set, epochs, batch, &mut learner.optimizer, &mut learner.rng)?;
    for (e, s) in stats.iter().enumerate() {
        trace.push(QStatsRow {
            round,
            epoch: e + 1,
            stats: QStats { q_min: s.outputs.min, q_avg: s.outputs.mean.clamp(s.outputs.min, s.outputs.max), q_max: s.outputs.max },
        });
    }
    learner.rounds += 1;
    Ok(trace)
}

/// Statistics over every `(state, action)` q-value of the probe states.
pub fn q_diagnostics(model: &dyn QModel, probe_states: &[f64], state_dim: usize) -> Result<QStats> {
    if probe_states.is_empty() {
        return Err(NfqError::input("probe set is empty"));
    }
    let q = model.q_values_batch(probe_states, state_dim)?;
    QStats::of(&q).ok_or_else(|| NfqError::input("probe set produced no q-values"))
}

/// Per-evaluation record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Training episode (growing batch, replay) or TD update count (offline).
    pub episode: usize,
    pub epsilon: f64,
    pub transitions: usize,
    pub report: StabilityReport,
}

pub const CURVE_CSV_HEADER: &str = "episode,avg_cost_per_step,steps,terminated";

/// Everything a training loop produces.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub curve: Vec<CurvePoint>,
    pub qstats: Vec<QStatsRow>,
    pub qf: QFunction,
    pub batch: GrowingBatch,
    /// Transition count after each appended episode.
    pub growth: Vec<usize>,
    pub evals: Vec<TrajectoryRecord>,
    pub out_dir: Option<PathBuf>,
    /// Diagnostics such as an exhausted replay log.
    pub notes: Vec<String>,
}

impl RunArtifacts {
    /// Evaluation with the lowest average cost per step.
    pub fn best(&self) -> Option<&CurvePoint> {
        self.curve.iter().min_by(|a, b| a.report.avg_cost.total_cmp(&b.report.avg_cost))
    }
}

/// Where the episodes of a growing-batch loop come from.
pub enum EpisodeSource<'a> {
    Live(&'a mut dyn Environment),
    Replay { log: &'a [Episode], env: Option<&'a mut dyn Environment>, continue_live: bool },
}

impl EpisodeSource<'_> {
    fn env(&mut self) -> Option<&mut dyn Environment> {
        match self {
            EpisodeSource::Live(env) => Some(&mut **env),
            EpisodeSource::Replay { env, .. } => env.as_mut().map(|e| &mut **e as &mut dyn Environment),
        }
    }
}

struct RunWriter {
    dir: Option<PathBuf>,
}

impl RunWriter {
    fn new(dir: Option<&Path>, config: &ExperimentConfig) -> Result<Self> {
        if let Some(d) = dir {
            for sub in ["checkpoints", "data", "eval"] {
                fs::create_dir_all(d.join(sub)).map_err(|e| NfqError::io(d.join(sub), e))?;
            }
            let path = d.join("config.json");
            fs::write(&path, config.to_json()).map_err(|e| NfqError::io(&path, e))?;
        }
        Ok(RunWriter { dir: dir.map(Path::to_path_buf) })
    }

    fn checkpoint(&self, name: &str, learner: &Learner, episode: usize) -> Result<()> {
        if let Some(d) = &self.dir {
            checkpoint::save(&d.join("checkpoints").join(name), &learner.qf, &learner.optimizer, episode)?;
        }
        Ok(())
    }

    fn eval(&self, index: usize, traj: &TrajectoryRecord, enabled: bool) -> Result<()> {
        match &self.dir {
            Some(d) if enabled => traj.save(&d.join("eval").join(format!("ep{index}.jsonl"))),
            _ => Ok(()),
        }
    }

    fn finish(&self, curve: &[CurvePoint], qstats: &[QStatsRow], batch: &GrowingBatch) -> Result<()> {
        let Some(d) = &self.dir else { return Ok(()) };
        let mut text = String::from(CURVE_CSV_HEADER);
        text.push('\n');
        for p in curve {
            text.push_str(&format!("{},{},{},{}\n", p.episode, p.report.avg_cost, p.report.steps, p.report.terminated));
        }
        write_file(&d.join("curve.csv"), &text)?;
        let mut text = String::from(METRICS_CSV_HEADER);
        text.push('\n');
        for p in curve {
            text.push_str(&p.report.csv_row(p.episode));
            text.push('\n');
        }
        write_file(&d.join("metrics.csv"), &text)?;
        let mut text = String::from(QSTATS_CSV_HEADER);
        text.push('\n');
        for r in qstats {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        write_file(&d.join("qstats.csv"), &text)?;
        batch.save(&d.join("data").join("batch.jsonl"))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| NfqError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| NfqError::io(path, e))
}

fn empty_batch(config: &ExperimentConfig) -> Result<GrowingBatch> {
    GrowingBatch::new(BatchMeta {
        lookback: config.agent.lookback,
        action_set: config.action_set()?,
        action_bound: config.agent.action_bound,
        cost: config.cost,
        source: DataSource::Sim,
    })
}

/// Fits the normalizer on observation channels of all stacked states; action channels stay unscaled.
pub fn fit_normalizer(data: &StackedTransitions, lookback: usize) -> Result<Normalizer> {
    Ok(Normalizer::fit(&data.states, data.state_dim)?.with_identity_from(lookback * OBS_DIM))
}

fn evaluate(
    env: &mut dyn Environment,
    learner: &Learner,
    config: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
    label: String,
) -> Result<(TrajectoryRecord, StabilityReport)> {
    let actions = learner.qf.action_set.clone();
    let spec = EpisodeSpec {
        actions: &actions,
        action_bound: config.agent.action_bound,
        lookback: config.agent.lookback,
        cost: &config.cost,
        start: config.env.start,
        max_steps: config.schedule.steps_per_episode,
        epsilon: 0.0,
        mask: None,
    };
    let mut greedy_rng = ChaCha8Rng::seed_from_u64(0);
    let episode = run_episode(env, &learner.qf, &spec, &mut greedy_rng, rng)?;
    let traj = TrajectoryRecord::from_episode(&episode, label, config.seeds.network);
    let report = stability_metrics(&traj, &StabilityParams::default())?;
    Ok((traj, report))
}

/// Growing-batch training against a live environment.
pub fn train_growing_batch(env: &mut dyn Environment, config: &ExperimentConfig) -> Result<RunArtifacts> {
    run_growing(EpisodeSource::Live(env), config)
}

/// Growing-batch training that consumes logged episodes instead of exploring.
pub fn train_replay<'a>(
    log: &'a [Episode],
    env: Option<&'a mut dyn Environment>,
    continue_live: bool,
    config: &ExperimentConfig,
) -> Result<RunArtifacts> {
    if log.is_empty() {
        return Err(NfqError::input("replay log is empty"));
    }
    if continue_live && env.is_none() {
        return Err(NfqError::config("continuing live after the log requires an environment"));
    }
    run_growing(EpisodeSource::Replay { log, env, continue_live }, config)
}

fn run_growing(mut source: EpisodeSource<'_>, config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let writer = RunWriter::new(config.io.out_dir.as_deref(), config)?;
    let mut learner = Learner::new(config)?;
    let mut batch = empty_batch(config)?;
    if let EpisodeSource::Replay { log, .. } = &mut source {
        // demonstrations recorded at the head of a log were injected, not explored
        let demos = log.iter().take_while(|e| e.start == StartTag::Demonstration).count();
        for ep in &log[..demos] {
            batch.inject_demonstration(ep.clone())?;
        }
        *log = &log[demos..];
    } else if let Some(path) = &config.io.demonstration {
        let (demo, warnings) = GrowingBatch::load_for_run(path, config.agent.lookback)?;
        warnings.iter().for_each(|w| log::warn!("{w}"));
        for ep in demo.episodes {
            batch.inject_demonstration(ep)?;
        }
    }
    let mut explore_rng = ChaCha8Rng::seed_from_u64(config.seeds.exploration);
    let mut env_rng = ChaCha8Rng::seed_from_u64(config.seeds.environment);
    let mut art = RunArtifacts {
        curve: Vec::new(),
        qstats: Vec::new(),
        qf: learner.qf.clone(),
        batch: batch.clone(),
        growth: Vec::new(),
        evals: Vec::new(),
        out_dir: config.io.out_dir.clone(),
        notes: Vec::new(),
    };
    writer.checkpoint("ep0", &learner, 0)?;
    let total = config.schedule.episodes;
    let refit_until = config.refit_until();
    let result = (|| -> Result<()> {
        for e in 0..total {
            let eps = epsilon_at(&config.schedule.epsilon, e, total);
            let episode = match &mut source {
                EpisodeSource::Replay { log, continue_live, env } => match log.get(e) {
                    Some(ep) => ep.clone(),
                    None if *continue_live => {
                        let env = env.as_mut().expect("checked at entry");
                        explore(&mut **env, &learner, config, eps, &mut explore_rng, &mut env_rng)?
                    }
                    None => {
                        let note = format!("replay log exhausted after {} episodes; stopping", log.len());
                        log::warn!("{note}");
                        art.notes.push(note);
                        break;
                    }
                },
                EpisodeSource::Live(env) => explore(&mut **env, &learner, config, eps, &mut explore_rng, &mut env_rng)?,
            };
            batch.append_episode(episode)?;
            art.growth.push(batch.len());
            let data = batch.stacked()?;
            if e % config.schedule.normalizer.refit_every == 0 && e < refit_until && data.len() >= 2 {
                learner.qf.normalizer = fit_normalizer(&data, config.agent.lookback)?;
            } else if e >= refit_until {
                learner.qf.normalizer.frozen = true;
            }
            for _ in 0..config.schedule.train.bellman_updates_per_episode {
                art.qstats.extend(td_round(&mut learner, &data, &config.schedule.train)?);
            }
            let ep_no = e + 1;
            if config.schedule.eval_each_episode {
                if let Some(env) = source.env() {
                    let (traj, report) = evaluate(env, &learner, config, &mut env_rng, format!("ep{ep_no}"))?;
                    writer.eval(ep_no, &traj, config.io.save_eval_trajectories)?;
                    log::info!(
                        "episode {ep_no}: eps {eps:.3} avg cost {:.5} steps {} N {:?} transitions {}",
                        report.avg_cost,
                        report.steps,
                        report.big_n,
                        batch.len()
                    );
                    art.curve.push(CurvePoint { episode: ep_no, epsilon: eps, transitions: batch.len(), report });
                    art.evals.push(traj);
                }
            }
            let every = config.io.checkpoint_every;
            if (every > 0 && ep_no % every == 0) || ep_no == total {
                writer.checkpoint(&format!("ep{ep_no}"), &learner, ep_no)?;
            }
        }
        Ok(())
    })();
    art.qf = learner.qf.clone();
    art.batch = batch;
    writer.finish(&art.curve, &art.qstats, &art.batch)?;
    result.map(|_| art)
}

fn explore(
    env: &mut dyn Environment,
    learner: &Learner,
    config: &ExperimentConfig,
    epsilon: f64,
    explore_rng: &mut ChaCha8Rng,
    env_rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let actions = learner.qf.action_set.clone();
    let spec = EpisodeSpec {
        actions: &actions,
        action_bound: config.agent.action_bound,
        lookback: config.agent.lookback,
        cost: &config.cost,
        start: config.env.start,
        max_steps: config.schedule.steps_per_episode,
        epsilon,
        mask: None,
    };
    run_episode(env, &learner.qf, &spec, explore_rng, env_rng)
}

/// Repeated TD rounds on a fixed batch, evaluating every `eval_every_td` rounds.
pub fn train_offline(
    batch: &GrowingBatch,
    env: Option<&mut dyn Environment>,
    config: &ExperimentConfig,
    initial: Option<QFunction>,
) -> Result<RunArtifacts> {
    config.validate()?;
    if batch.is_empty() {
        return Err(NfqError::input("offline training needs a non-empty batch"));
    }
    let writer = RunWriter::new(config.io.out_dir.as_deref(), config)?;
    let mut learner = Learner::new(config)?;
    if let Some(qf) = initial {
        learner.optimizer = OptimizerState::for_network(config.agent.optimizer, &qf.net, config.schedule.train.learning_rate);
        learner.qf = qf;
    }
    let mut batch = batch.clone();
    batch.meta.lookback = config.agent.lookback;
    let data = batch.stacked()?;
    if data.state_dim != learner.qf.state_dim() {
        return Err(NfqError::shape("batch lookback does not match the Q-function"));
    }
    learner.qf.normalizer = fit_normalizer(&data, config.agent.lookback)?;
    learner.qf.normalizer.frozen = true;
    let mut env = env;
    let mut env_rng = ChaCha8Rng::seed_from_u64(config.seeds.environment);
    let mut art = RunArtifacts {
        curve: Vec::new(),
        qstats: Vec::new(),
        qf: learner.qf.clone(),
        batch: batch.clone(),
        growth: vec![batch.len()],
        evals: Vec::new(),
        out_dir: config.io.out_dir.clone(),
        notes: Vec::new(),
    };
    writer.checkpoint("td0", &learner, 0)?;
    let every = config.schedule.eval_every_td;
    let result = (|| -> Result<()> {
        for td in 1..=config.schedule.offline_td_updates {
            art.qstats.extend(td_round(&mut learner, &data, &config.schedule.train)?);
            if td % every == 0 {
                if let Some(env) = env.as_mut() {
                    let (traj, report) = evaluate(&mut **env, &learner, config, &mut env_rng, format!("td{td}"))?;
                    writer.eval(td, &traj, config.io.save_eval_trajectories)?;
                    log::info!("td {td}: avg cost {:.5} N {:?}", report.avg_cost, report.big_n);
                    art.curve.push(CurvePoint { episode: td, epsilon: 0.0, transitions: batch.len(), report });
                    art.evals.push(traj);
                }
                writer.checkpoint(&format!("td{td}"), &learner, td)?;
            }
        }
        Ok(())
    })();
    art.qf = learner.qf.clone();
    writer.finish(&art.curve, &art.qstats, &art.batch)?;
    result.map(|_| art)
}

/// Start condition for stand-alone greedy evaluations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalStart {
    /// Hanging near the center, with the configured jitter.
    Center,
    /// Uniform `x` in `±1`, uniform angle, at rest.
    Random,
    /// The same explicit state for every episode.
    Fixed(SimState),
    /// Each episode continues where the previous one stopped.
    Continue,
}

/// Options for [`greedy_rollouts`].
#[derive(Clone, Debug)]
pub struct RolloutOptions<'a> {
    pub episodes: usize,
    pub max_steps: usize,
    pub start: EvalStart,
    pub mask: Option<&'a [bool]>,
    pub seed: u64,
}

/// Greedy episodes of `qf` on a fresh simulator configured by `config`.
pub fn greedy_rollouts(
    qf: &QFunction,
    config: &ExperimentConfig,
    opts: &RolloutOptions<'_>,
) -> Result<Vec<(TrajectoryRecord, StabilityReport)>> {
    let mut params = config.env.sim;
    params.force_bound = params.force_bound.max(qf.action_set.max_magnitude());
    let mut env = CartPole::new(params, config.env.latency)?;
    let lookback = (qf.state_dim() + 1) / (OBS_DIM + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(opts.episodes);
    for i in 0..opts.episodes {
        let start = match opts.start {
            EvalStart::Center => StartMode::CenterHanging,
            EvalStart::Continue => StartMode::ContinueFromLast,
            EvalStart::Fixed(state) => StartMode::Explicit { state },
            EvalStart::Random => StartMode::Explicit {
                state: SimState {
                    x: rng.gen_range(-1.0..=1.0),
                    dx: 0.0,
                    alpha: crate::env::wrap_angle(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)),
                    dalpha: 0.0,
                },
            },
        };
        let spec = EpisodeSpec {
            actions: &qf.action_set,
            action_bound: qf.action_bound,
            lookback,
            cost: &config.cost,
            start,
            max_steps: opts.max_steps,
            epsilon: 0.0,
            mask: opts.mask,
        };
        let episode = run_episode(&mut env, qf, &spec, &mut unused, &mut rng)?;
        let traj = TrajectoryRecord::from_episode(&episode, format!("eval{i}"), opts.seed);
        let report = stability_metrics(&traj, &StabilityParams::default())?;
        out.push((traj, report));
    }
    Ok(out)
}
