//! Transition storage: observations, episodes, the growing batch, history
//! stacking, relabeling and the JSONL dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costs::CostSpec;
use crate::error::{NfqError, Result};
use crate::qfunc::{scale_action, ActionSet};

/// Number of features in one observation.
pub const OBS_DIM: usize = 5;

pub const SCHEMA_VERSION: u32 = 1;

/// Length of a stacked state for lookback `n`.
pub const fn stacked_dim(lookback: usize) -> usize {
    lookback * OBS_DIM + lookback.saturating_sub(1)
}

/// `(x, dx, cos α, sin α, dα)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; OBS_DIM]", into = "[f64; OBS_DIM]")]
pub struct Observation {
    pub x: f64,
    pub dx: f64,
    pub cos_a: f64,
    pub sin_a: f64,
    pub da: f64,
}

impl From<[f64; OBS_DIM]> for Observation {
    fn from(v: [f64; OBS_DIM]) -> Self {
        Observation { x: v[0], dx: v[1], cos_a: v[2], sin_a: v[3], da: v[4] }
    }
}

impl From<Observation> for [f64; OBS_DIM] {
    fn from(o: Observation) -> Self {
        o.to_array()
    }
}

impl Observation {
    pub fn from_angle(x: f64, dx: f64, alpha: f64, dalpha: f64) -> Self {
        let (sin_a, cos_a) = alpha.sin_cos();
        Observation { x, dx, cos_a, sin_a, da: dalpha }
    }

    pub fn to_array(&self) -> [f64; OBS_DIM] {
        [self.x, self.dx, self.cos_a, self.sin_a, self.da]
    }

    /// Pole angle in `(-π, π]`, 0 upright.
    pub fn angle(&self) -> f64 {
        self.sin_a.atan2(self.cos_a)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(NfqError::input("observation contains a non-finite value"));
        }
        let norm = self.cos_a * self.cos_a + self.sin_a * self.sin_a;
        if (norm - 1.0).abs() > 1e-9 {
            return Err(NfqError::input(format!("observation angle encoding has cos²+sin² = {norm}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartTag {
    FreshCenter,
    Continued,
    Demonstration,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action_index: usize,
    pub action_value: f64,
    pub next_obs: Observation,
    pub cost: f64,
    pub terminal: bool,
    pub episode_id: usize,
    pub step_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub start: StartTag,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn new(start: StartTag) -> Self {
        Episode { start, transitions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.terminal)
    }

    pub fn total_cost(&self) -> f64 {
        self.transitions.iter().map(|t| t.cost).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(NfqError::input("episode is empty"));
        }
        let last = self.transitions.len() - 1;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.step_index != i {
                return Err(NfqError::input(format!("step index {} at position {i}", t.step_index)));
            }
            if t.terminal && i != last {
                return Err(NfqError::input(format!("terminal transition at step {i} is not the last one")));
            }
            if !(0.0..=1.0).contains(&t.cost) {
                return Err(NfqError::input(format!("cost {} at step {i} lies outside [0, 1]", t.cost)));
            }
            if !t.action_value.is_finite() {
                return Err(NfqError::input(format!("non-finite action at step {i}")));
            }
            t.obs.validate()?;
            t.next_obs.validate()?;
        }
        Ok(())
    }

    /// Observation `k` of the episode's state sequence; `k == len` is the final next state.
    fn state_obs(&self, k: usize) -> &Observation {
        if k < self.transitions.len() {
            &self.transitions[k].obs
        } else {
            &self.transitions[k - 1].next_obs
        }
    }

    /// Stacked view of state `k` in `0..=len` of the observation sequence.
    fn stack_into(&self, k: usize, lookback: usize, action_bound: f64, out: &mut Vec<f64>) -> Result<()> {
        for j in 0..lookback {
            out.extend_from_slice(&self.state_obs(k.saturating_sub(j)).to_array());
        }
        for j in 1..lookback {
            let a = if k >= j { scale_action(self.transitions[k - j].action_value, action_bound)? } else { 0.0 };
            out.push(a);
        }
        Ok(())
    }

    /// Stacked state of transition `t`: observations `t, t-1, ..`, then scaled actions `t-1, t-2, ..`.
    /// Missing history repeats the first observation and uses the neutral action.
    pub fn stacked_state(&self, t: usize, lookback: usize, action_bound: f64) -> Result<Vec<f64>> {
        self.check_index(t, lookback)?;
        let mut out = Vec::with_capacity(stacked_dim(lookback));
        self.stack_into(t, lookback, action_bound, &mut out)?;
        Ok(out)
    }

    /// Stacked view of the state reached by transition `t`.
    pub fn stacked_next_state(&self, t: usize, lookback: usize, action_bound: f64) -> Result<Vec<f64>> {
        self.check_index(t, lookback)?;
        let mut out = Vec::with_capacity(stacked_dim(lookback));
        self.stack_into(t + 1, lookback, action_bound, &mut out)?;
        Ok(out)
    }

    fn check_index(&self, t: usize, lookback: usize) -> Result<()> {
        if lookback == 0 {
            return Err(NfqError::config("lookback must be at least 1"));
        }
        if t >= self.transitions.len() {
            return Err(NfqError::input(format!("step {t} out of range for episode of {}", self.transitions.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Sim,
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub lookback: usize,
    pub action_set: ActionSet,
    pub action_bound: f64,
    pub cost: CostSpec,
    pub source: DataSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowingBatch {
    pub meta: BatchMeta,
    pub episodes: Vec<Episode>,
}

/// Stacked states and next states of every transition, row-major, with costs and terminal flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StackedTransitions {
    pub state_dim: usize,
    pub states: Vec<f64>,
    pub next_states: Vec<f64>,
    pub action_values: Vec<f64>,
    pub action_indices: Vec<usize>,
    pub costs: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl StackedTransitions {
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }
}

impl GrowingBatch {
    pub fn new(meta: BatchMeta) -> Result<Self> {
        if meta.lookback == 0 {
            return Err(NfqError::config("lookback must be at least 1"));
        }
        if meta.action_set.max_magnitude() > meta.action_bound {
            return Err(NfqError::config("action bound smaller than the largest action"));
        }
        Ok(GrowingBatch { meta, episodes: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn state_dim(&self) -> usize {
        stacked_dim(self.meta.lookback)
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    /// Validates and appends an episode; its transitions are renumbered to the new episode id.
    pub fn append_episode(&mut self, mut episode: Episode) -> Result<()> {
        episode.validate()?;
        for t in &episode.transitions {
            match self.meta.action_set.values().get(t.action_index) {
                Some(v) if *v == t.action_value => {}
                _ => {
                    return Err(NfqError::input(format!(
                        "action {} (index {}) is not part of the batch action set",
                        t.action_value, t.action_index
                    )))
                }
            }
        }
        let id = self.episodes.len();
        episode.transitions.iter_mut().for_each(|t| t.episode_id = id);
        self.episodes.push(episode);
        Ok(())
    }

    pub fn inject_demonstration(&mut self, mut episode: Episode) -> Result<()> {
        episode.start = StartTag::Demonstration;
        self.append_episode(episode)
    }

    pub fn stacked_state(&self, episode: usize, t: usize) -> Result<Vec<f64>> {
        self.episode(episode)?.stacked_state(t, self.meta.lookback, self.meta.action_bound)
    }

    pub fn stacked_next_state(&self, episode: usize, t: usize) -> Result<Vec<f64>> {
        self.episode(episode)?.stacked_next_state(t, self.meta.lookback, self.meta.action_bound)
    }

    fn episode(&self, i: usize) -> Result<&Episode> {
        self.episodes.get(i).ok_or_else(|| NfqError::input(format!("episode {i} out of range")))
    }

    /// All transitions in stacked form, in batch order.
    pub fn stacked(&self) -> Result<StackedTransitions> {
        let n = self.len();
        let dim = self.state_dim();
        let mut out = StackedTransitions {
            state_dim: dim,
            states: Vec::with_capacity(n * dim),
            next_states: Vec::with_capacity(n * dim),
            action_values: Vec::with_capacity(n),
            action_indices: Vec::with_capacity(n),
            costs: Vec::with_capacity(n),
            terminals: Vec::with_capacity(n),
        };
        let (lookback, bound) = (self.meta.lookback, self.meta.action_bound);
        for ep in &self.episodes {
            for (t, tr) in ep.transitions.iter().enumerate() {
                ep.stack_into(t, lookback, bound, &mut out.states)?;
                ep.stack_into(t + 1, lookback, bound, &mut out.next_states)?;
                out.action_values.push(tr.action_value);
                out.action_indices.push(tr.action_index);
                out.costs.push(tr.cost);
                out.terminals.push(tr.terminal);
            }
        }
        Ok(out)
    }

    /// Recomputes every cost and terminal flag; episodes are cut after a newly terminal transition.
    pub fn relabel(&self, cost: &CostSpec) -> GrowingBatch {
        let episodes = self
            .episodes
            .iter()
            .map(|ep| {
                let mut transitions = Vec::with_capacity(ep.len());
                for t in &ep.transitions {
                    let (c, terminal) = cost.evaluate(&t.obs, t.action_value, &t.next_obs);
                    transitions.push(Transition { cost: c, terminal, ..*t });
                    if terminal {
                        break;
                    }
                }
                Episode { start: ep.start, transitions }
            })
            .collect();
        GrowingBatch { meta: BatchMeta { cost: *cost, ..self.meta.clone() }, episodes }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| NfqError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            schema_version: SCHEMA_VERSION,
            lookback: self.meta.lookback,
            action_set: self.meta.action_set.clone(),
            action_bound: self.meta.action_bound,
            cost_id: self.meta.cost.id(),
            cost: self.meta.cost,
            source: self.meta.source,
        };
        let io = |e: std::io::Error| NfqError::io(path, e);
        serde_json::to_writer(&mut w, &header).map_err(|e| NfqError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        for ep in &self.episodes {
            for t in &ep.transitions {
                serde_json::to_writer(&mut w, &Record::new(ep.start, t)).map_err(|e| NfqError::io(path, e.into()))?;
                w.write_all(b"\n").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| NfqError::io(path, e))?;
        let parse_err = |line: usize, message: String| NfqError::Parse { path: path.to_path_buf(), line, message };
        let mut lines = BufReader::new(file).lines();
        let header: Header = match lines.next() {
            Some(l) => serde_json::from_str(&l.map_err(|e| NfqError::io(path, e))?)
                .map_err(|e| parse_err(1, format!("bad header: {e}")))?,
            None => return Err(parse_err(1, "missing header".into())),
        };
        if header.schema_version != SCHEMA_VERSION {
            return Err(parse_err(1, format!("unsupported schema version {}", header.schema_version)));
        }
        header.cost.validate().map_err(|e| parse_err(1, e.to_string()))?;
        let meta = BatchMeta {
            lookback: header.lookback,
            action_set: header.action_set,
            action_bound: header.action_bound,
            cost: header.cost,
            source: header.source,
        };
        let mut batch = GrowingBatch::new(meta).map_err(|e| parse_err(1, e.to_string()))?;
        let mut current: Option<(usize, Episode, usize)> = None;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| NfqError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            if !(0.0..=1.0).contains(&rec.cost) {
                return Err(parse_err(lineno, format!("cost {} outside [0, 1]", rec.cost)));
            }
            let same = current.as_ref().is_some_and(|(id, _, _)| *id == rec.episode);
            if !same {
                if let Some((_, ep, first)) = current.take() {
                    batch.append_episode(ep).map_err(|e| parse_err(first, e.to_string()))?;
                }
                current = Some((rec.episode, Episode::new(rec.start), lineno));
            }
            let (_, ep, _) = current.as_mut().expect("episode is open");
            ep.transitions.push(rec.into_transition());
        }
        if let Some((_, ep, first)) = current.take() {
            batch.append_episode(ep).map_err(|e| parse_err(first, e.to_string()))?;
        }
        Ok(batch)
    }

    /// Loads a dataset for a run with the given lookback. A differing stored lookback
    /// is reported as a warning and replaced by the run's value.
    pub fn load_for_run(path: &Path, lookback: usize) -> Result<(Self, Vec<String>)> {
        let mut batch = Self::load(path)?;
        let mut warnings = Vec::new();
        if batch.meta.lookback != lookback {
            let msg = format!(
                "{} was recorded with lookback {}, stacking with the run's lookback {lookback}",
                path.display(),
                batch.meta.lookback
            );
            log::warn!("{msg}");
            warnings.push(msg);
            if lookback == 0 {
                return Err(NfqError::config("lookback must be at least 1"));
            }
            batch.meta.lookback = lookback;
        }
        Ok((batch, warnings))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    lookback: usize,
    action_set: ActionSet,
    action_bound: f64,
    cost_id: String,
    cost: CostSpec,
    source: DataSource,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    episode: usize,
    step: usize,
    start: StartTag,
    obs: Observation,
    action_index: usize,
    action_value: f64,
    next_obs: Observation,
    cost: f64,
    terminal: bool,
}

impl Record {
    fn new(start: StartTag, t: &Transition) -> Self {
        Record {
            episode: t.episode_id,
            step: t.step_index,
            start,
            obs: t.obs,
            action_index: t.action_index,
            action_value: t.action_value,
            next_obs: t.next_obs,
            cost: t.cost,
            terminal: t.terminal,
        }
    }

    fn into_transition(self) -> Transition {
        Transition {
            obs: self.obs,
            action_index: self.action_index,
            action_value: self.action_value,
            next_obs: self.next_obs,
            cost: self.cost,
            terminal: self.terminal,
            episode_id: self.episode,
            step_index: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn meta(lookback: usize) -> BatchMeta {
        BatchMeta {
            lookback,
            action_set: ActionSet::symmetric(10.0).unwrap(),
            action_bound: 10.0,
            cost: CostSpec::shaped(),
            source: DataSource::Sim,
        }
    }

    fn episode(len: usize, offset: f64) -> Episode {
        let actions = [-10.0, 0.0, 10.0];
        let transitions = (0..len)
            .map(|i| {
                let obs = Observation::from_angle(offset + i as f64 * 0.005, 0.1, PI - i as f64 * 0.01, 0.0);
                let next_obs = Observation::from_angle(offset + (i + 1) as f64 * 0.005, 0.1, PI - (i + 1) as f64 * 0.01, 0.0);
                let a = i % 3;
                let (cost, terminal) = CostSpec::shaped().evaluate(&obs, actions[a], &next_obs);
                Transition {
                    obs,
                    action_index: a,
                    action_value: actions[a],
                    next_obs,
                    cost,
                    terminal,
                    episode_id: 0,
                    step_index: i,
                }
            })
            .collect();
        Episode { start: StartTag::FreshCenter, transitions }
    }

    #[test]
    fn stacked_dimensions() {
        assert_eq!(stacked_dim(1), 5);
        assert_eq!(stacked_dim(6), 35);
        let ep = episode(4, 0.0);
        assert_eq!(ep.stacked_state(2, 1, 10.0).unwrap(), ep.transitions[2].obs.to_array().to_vec());
        assert!(ep.stacked_state(4, 1, 10.0).is_err());
    }

    #[test]
    fn stacking_layout_by_hand() {
        let ep = episode(2, 0.0);
        let o0 = ep.transitions[0].obs.to_array();
        let o1 = ep.transitions[1].obs.to_array();
        let s = ep.stacked_state(1, 6, 10.0).unwrap();
        assert_eq!(s.len(), 35);
        let mut expected = Vec::new();
        expected.extend(o1);
        for _ in 0..5 {
            expected.extend(o0);
        }
        expected.extend([-1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s, expected);

        let s0 = ep.stacked_state(0, 3, 10.0).unwrap();
        assert_eq!(&s0[..5], &o0);
        assert_eq!(&s0[5..10], &o0);
        assert_eq!(&s0[15..], &[0.0, 0.0]);

        let next = ep.stacked_next_state(1, 2, 10.0).unwrap();
        assert_eq!(&next[..5], &ep.transitions[1].next_obs.to_array());
        assert_eq!(&next[5..10], &o1);
        assert_eq!(next[10], 0.0);
    }

    #[test]
    fn append_validates() {
        let mut b = GrowingBatch::new(meta(1)).unwrap();
        b.append_episode(episode(400, 0.0)).unwrap();
        assert_eq!(b.len(), 400);
        let mut bad = episode(3, 0.0);
        bad.transitions[0].terminal = true;
        assert!(b.append_episode(bad).is_err());
        let mut bad = episode(3, 0.0);
        bad.transitions[1].action_value = 5.0;
        assert!(b.append_episode(bad).is_err());
        assert!(b.append_episode(Episode::new(StartTag::Continued)).is_err());
        b.inject_demonstration(episode(10, 0.0)).unwrap();
        assert_eq!(b.episodes[1].start, StartTag::Demonstration);
        assert!(b.episodes[1].transitions.iter().all(|t| t.episode_id == 1));
    }

    #[test]
    fn relabel_truncates_at_new_terminal() {
        let mut b = GrowingBatch::new(meta(1)).unwrap();
        b.append_episode(episode(50, 0.0)).unwrap();
        assert_eq!(b.relabel(&CostSpec::shaped()), b);
        let mut tight = CostSpec::shaped();
        tight.regions = crate::costs::TrackRegions { center: 0.0, center_tolerance: 0.05, soft_limit: 0.1, hard_limit: 0.2 };
        let r = b.relabel(&tight);
        let ep = &r.episodes[0];
        assert!(ep.terminated());
        assert!(ep.transitions.last().unwrap().next_obs.x > 0.2);
        assert!(ep.transitions[..ep.len() - 1].iter().all(|t| t.next_obs.x <= 0.2));
        ep.validate().unwrap();
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.jsonl");
        let mut b = GrowingBatch::new(meta(6)).unwrap();
        b.append_episode(episode(30, 0.0)).unwrap();
        b.append_episode(Episode { start: StartTag::Continued, ..episode(7, 0.3) }).unwrap();
        b.save(&path).unwrap();
        assert_eq!(GrowingBatch::load(&path).unwrap(), b);

        let (loaded, warnings) = GrowingBatch::load_for_run(&path, 4).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(loaded.meta.lookback, 4);
        assert_eq!(loaded.state_dim(), 23);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut rec: serde_json::Value = serde_json::from_str(&lines[3]).unwrap();
        rec["cost"] = serde_json::json!(1.5);
        lines[3] = rec.to_string();
        std::fs::write(&path, lines.join("\n")).unwrap();
        match GrowingBatch::load(&path) {
            Err(NfqError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
