//! Policy-quality metrics on evaluation trajectories.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batch::{Episode, Observation};
use crate::error::{NfqError, Result};

/// A greedy evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// Observation at the start of each step.
    pub observations: Vec<Observation>,
    pub actions: Vec<f64>,
    pub costs: Vec<f64>,
    pub terminated: bool,
    pub checkpoint: String,
    pub seed: u64,
}

impl TrajectoryRecord {
    pub fn from_episode(episode: &Episode, checkpoint: impl Into<String>, seed: u64) -> Self {
        TrajectoryRecord {
            observations: episode.transitions.iter().map(|t| t.obs).collect(),
            actions: episode.transitions.iter().map(|t| t.action_value).collect(),
            costs: episode.transitions.iter().map(|t| t.cost).collect(),
            terminated: episode.terminated(),
            checkpoint: checkpoint.into(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// `|angle|` per step in degrees.
    pub fn abs_angles_deg(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.angle().abs().to_degrees()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(NfqError::input("trajectory is empty"));
        }
        if self.actions.len() != self.len() || self.costs.len() != self.len() {
            return Err(NfqError::shape("trajectory streams differ in length"));
        }
        Ok(())
    }

    /// Header line, then one line per step.
    pub fn save(&self, path: &Path) -> Result<()> {
        let to_io = |e: serde_json::Error| NfqError::io(path, e.into());
        let file = File::create(path).map_err(|e| NfqError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = TrajectoryHeader { checkpoint: self.checkpoint.clone(), seed: self.seed, terminated: self.terminated, steps: self.len() };
        serde_json::to_writer(&mut w, &header).map_err(to_io)?;
        w.write_all(b"\n").map_err(|e| NfqError::io(path, e))?;
        for i in 0..self.len() {
            let rec = StepRecord { step: i, obs: self.observations[i], action: self.actions[i], cost: self.costs[i] };
            serde_json::to_writer(&mut w, &rec).map_err(to_io)?;
            w.write_all(b"\n").map_err(|e| NfqError::io(path, e))?;
        }
        w.flush().map_err(|e| NfqError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| NfqError::io(path, e))?;
        let parse = |line: usize, message: String| NfqError::Parse { path: path.to_path_buf(), line, message };
        let mut lines = BufReader::new(file).lines();
        let header: TrajectoryHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l.map_err(|e| NfqError::io(path, e))?).map_err(|e| parse(1, e.to_string()))?,
            None => return Err(parse(1, "missing header".into())),
        };
        let mut rec = TrajectoryRecord {
            observations: Vec::with_capacity(header.steps),
            actions: Vec::with_capacity(header.steps),
            costs: Vec::with_capacity(header.steps),
            terminated: header.terminated,
            checkpoint: header.checkpoint,
            seed: header.seed,
        };
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| NfqError::io(path, e))?;
            let step: StepRecord = serde_json::from_str(&line).map_err(|e| parse(i + 2, e.to_string()))?;
            if step.step != i {
                return Err(parse(i + 2, format!("expected step {i}, found {}", step.step)));
            }
            rec.observations.push(step.obs);
            rec.actions.push(step.action);
            rec.costs.push(step.cost);
        }
        if rec.len() != header.steps {
            return Err(parse(rec.len() + 1, format!("header announces {} steps, found {}", header.steps, rec.len())));
        }
        Ok(rec)
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    checkpoint: String,
    seed: u64,
    terminated: bool,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    step: usize,
    obs: Observation,
    action: f64,
    cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityParams {
    pub tolerance_deg: f64,
    pub n_max: usize,
    pub settle: usize,
}

impl Default for StabilityParams {
    fn default() -> Self {
        StabilityParams { tolerance_deg: 10.0, n_max: 200, settle: 20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// First step inside the tolerance band.
    pub n: Option<usize>,
    /// First step after which the angle never leaves the band.
    #[serde(rename = "N")]
    pub big_n: Option<usize>,
    pub e_inf: Option<f64>,
    /// Maximum absolute deviation over the evaluation window.
    #[serde(rename = "e_T")]
    pub e_t: Option<f64>,
    /// Mean absolute deviation from the zero reference over the window.
    #[serde(rename = "e_T_mean")]
    pub e_t_mean: Option<f64>,
    pub avg_cost: f64,
    pub steps: usize,
    pub terminated: bool,
}

pub const METRICS_CSV_HEADER: &str = "episode,n,N,e_inf,e_T,e_T_mean,avg_cost,steps,terminated";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl StabilityReport {
    pub fn csv_row(&self, episode: usize) -> String {
        let mut row = String::new();
        let _ = write!(
            row,
            "{episode},{},{},{},{},{},{},{},{}",
            opt(self.n),
            opt(self.big_n),
            opt(self.e_inf),
            opt(self.e_t),
            opt(self.e_t_mean),
            self.avg_cost,
            self.steps,
            self.terminated
        );
        row
    }
}

/// Computes n, N and the windowed errors on `|angle|` in degrees.
pub fn stability_from_angles(abs_deg: &[f64], params: &StabilityParams) -> (Option<usize>, Option<usize>, Option<(f64, f64, f64)>) {
    let inside = |a: f64| a <= params.tolerance_deg;
    let n = abs_deg.iter().position(|a| inside(*a));
    let big_n = match abs_deg.iter().rposition(|a| !inside(*a)) {
        None if abs_deg.is_empty() => None,
        None => Some(0),
        Some(last_out) if last_out + 1 < abs_deg.len() => Some(last_out + 1),
        Some(_) => None,
    };
    let errors = big_n.and_then(|nn| {
        let start = if nn <= params.n_max { params.n_max } else { nn + params.settle };
        let window = abs_deg.get(start..).filter(|w| !w.is_empty());
        if window.is_none() {
            log::debug!("evaluation window from step {start} is empty for an episode of {} steps", abs_deg.len());
        }
        window.map(|w| {
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let max = w.iter().fold(0.0f64, |m, v| m.max(*v));
            (mean, max, mean)
        })
    });
    (n, big_n, errors)
}

pub fn stability_metrics(traj: &TrajectoryRecord, params: &StabilityParams) -> Result<StabilityReport> {
    traj.validate()?;
    let (n, big_n, errors) = stability_from_angles(&traj.abs_angles_deg(), params);
    Ok(StabilityReport {
        n,
        big_n,
        e_inf: errors.map(|e| e.0),
        e_t: errors.map(|e| e.1),
        e_t_mean: errors.map(|e| e.2),
        avg_cost: avg_cost_per_step(&traj.costs)?,
        steps: traj.len(),
        terminated: traj.terminated,
    })
}

pub fn avg_cost_per_step(costs: &[f64]) -> Result<f64> {
    if costs.is_empty() {
        return Err(NfqError::input("no steps to average"));
    }
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// Pointwise mean and population standard deviation; shorter runs drop out of the tail.
pub fn aggregate_curves(runs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = runs.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let present: Vec<f64> = runs.iter().filter_map(|r| r.get(i).copied()).collect();
            let k = present.len() as f64;
            let mean = present.iter().sum::<f64>() / k;
            let var = present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
            (mean, var.sqrt())
        })
        .unzip()
}

/// Mean and population standard deviation of the present values.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    Some((mean, var.sqrt()))
}
