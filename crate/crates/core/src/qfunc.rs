//! Q-function over a network: input encoding, normalization, action scaling
//! and greedy action selection.

use serde::{Deserialize, Serialize};

use crate::error::{NfqError, Result};
use crate::net::{LayerSpec, Network, WeightInit};

/// Floor applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Ordered, duplicate-free set of action magnitudes containing exactly one zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ActionSetRepr", into = "ActionSetRepr")]
pub struct ActionSet {
    values: Vec<f64>,
    neutral_index: usize,
}

#[derive(Serialize, Deserialize)]
struct ActionSetRepr {
    values: Vec<f64>,
    neutral_index: usize,
}

impl TryFrom<ActionSetRepr> for ActionSet {
    type Error = NfqError;

    fn try_from(repr: ActionSetRepr) -> Result<Self> {
        let set = ActionSet::new(repr.values)?;
        if set.neutral_index != repr.neutral_index {
            return Err(NfqError::config("action set neutral_index does not point at the zero action"));
        }
        Ok(set)
    }
}

impl From<ActionSet> for ActionSetRepr {
    fn from(set: ActionSet) -> Self {
        ActionSetRepr { values: set.values, neutral_index: set.neutral_index }
    }
}

/// Magnitudes used when extending a three-action controller, mirrored to negative values.
pub const EXTENDED_MAGNITUDES: [f64; 17] =
    [0.0, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 90.0, 100.0, 150.0, 200.0, 300.0, 500.0];

impl ActionSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NfqError::config("action values must be finite"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NfqError::config("action values must be strictly increasing"));
        }
        let zeros: Vec<usize> = values.iter().enumerate().filter(|(_, v)| **v == 0.0).map(|(i, _)| i).collect();
        match zeros.as_slice() {
            [i] => Ok(ActionSet { neutral_index: *i, values }),
            _ => Err(NfqError::config("action set must contain exactly one zero action")),
        }
    }

    /// `(-m, 0, m)`.
    pub fn symmetric(magnitude: f64) -> Result<Self> {
        Self::new(vec![-magnitude, 0.0, magnitude])
    }

    /// The 33-action extension, expressed relative to the magnitude 300 of the
    /// original three-action set and rescaled by `unit / 300`.
    pub fn extended(unit: f64) -> Self {
        let scale = unit / 300.0;
        let mut values: Vec<f64> = EXTENDED_MAGNITUDES.iter().rev().filter(|m| **m > 0.0).map(|m| -m * scale).collect();
        values.extend(EXTENDED_MAGNITUDES.iter().map(|m| m * scale));
        Self::new(values).expect("extended action set is well formed")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn neutral_index(&self) -> usize {
        self.neutral_index
    }

    pub fn max_magnitude(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn index_of(&self, value: f64) -> Option<usize> {
        self.values.iter().position(|v| *v == value)
    }

    /// Mask that excludes the listed values; `true` means selectable.
    pub fn mask_excluding(&self, removed: &[f64]) -> Result<Vec<bool>> {
        for r in removed {
            if self.index_of(*r).is_none() {
                return Err(NfqError::input(format!("action {r} is not in the action set")));
            }
        }
        Ok(self.values.iter().map(|v| !removed.contains(v)).collect())
    }
}

/// Maps an action to `[-1, 1]`.
pub fn scale_action(action: f64, bound: f64) -> Result<f64> {
    if !(bound > 0.0) {
        return Err(NfqError::input("action bound must be positive"));
    }
    if action.abs() > bound {
        return Err(NfqError::input(format!("action {action} exceeds bound {bound}")));
    }
    Ok(action / bound)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frozen: bool,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], std: vec![1.0; dim], frozen: false }
    }

    /// Per-feature mean and population standard deviation of a row-major batch.
    pub fn fit(rows: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(NfqError::shape("row buffer is not a multiple of the feature dimension"));
        }
        let n = rows.len() / dim;
        if n < 2 {
            return Err(NfqError::input("normalizer needs at least 2 samples"));
        }
        let mut mean = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Normalizer { mean, std, frozen: false })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Resets features `from..` to the identity transform.
    pub fn with_identity_from(mut self, from: usize) -> Self {
        for i in from..self.mean.len() {
            self.mean[i] = 0.0;
            self.std[i] = 1.0;
        }
        self
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        self.normalize_into(x, &mut out);
        out
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// One network input carries the scaled action; one output.
    ActionInInput,
    /// One output neuron per action.
    ActionPerOutput,
}

/// Minimal interface the Bellman sweep needs from a Q approximator.
pub trait QModel {
    fn action_count(&self) -> usize;
    /// Q-values of all actions for a raw stacked state.
    fn q_values_of(&self, state: &[f64]) -> Result<Vec<f64>>;
    /// Q-values of all actions for a row-major batch of raw stacked states.
    fn q_values_batch(&self, states: &[f64], state_dim: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(states.len() / state_dim.max(1) * self.action_count());
        for s in states.chunks_exact(state_dim) {
            out.extend(self.q_values_of(s)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QFunction {
    pub encoding: Encoding,
    pub net: Network,
    pub normalizer: Normalizer,
    pub action_set: ActionSet,
    pub action_bound: f64,
    /// Number of heads for `ActionPerOutput`; the action set it was built for.
    trained_actions: ActionSet,
}

impl QFunction {
    /// Builds a fresh Q-function. `hidden` excludes the output layer, whose width follows the encoding.
    pub fn new(
        encoding: Encoding,
        state_dim: usize,
        hidden: &[LayerSpec],
        output: crate::net::Activation,
        action_set: ActionSet,
        action_bound: f64,
        init: WeightInit,
        seed: u64,
    ) -> Result<Self> {
        if action_set.max_magnitude() > action_bound {
            return Err(NfqError::config(format!(
                "agent.action_bound: {action_bound} is smaller than the largest action {}",
                action_set.max_magnitude()
            )));
        }
        let (input_dim, out_width) = match encoding {
            Encoding::ActionInInput => (state_dim + 1, 1),
            Encoding::ActionPerOutput => (state_dim, action_set.len()),
        };
        let mut layers = hidden.to_vec();
        layers.push(LayerSpec::new(out_width, output));
        let net = Network::init(input_dim, &layers, init, seed)?;
        Ok(QFunction {
            encoding,
            net,
            normalizer: Normalizer::identity(state_dim),
            trained_actions: action_set.clone(),
            action_set,
            action_bound,
        })
    }

    /// Reassembles a Q-function from checkpointed parts.
    pub fn from_parts(
        encoding: Encoding,
        net: Network,
        normalizer: Normalizer,
        action_set: ActionSet,
        action_bound: f64,
    ) -> Result<Self> {
        let state_dim = normalizer.dim();
        match encoding {
            Encoding::ActionInInput => {
                if net.input_dim() != state_dim + 1 || net.output_dim() != 1 {
                    return Err(NfqError::shape("action-in-input network must take state + 1 inputs and emit 1 output"));
                }
            }
            Encoding::ActionPerOutput => {
                if net.input_dim() != state_dim || net.output_dim() != action_set.len() {
                    return Err(NfqError::shape("action-per-output network must emit one output per action"));
                }
            }
        }
        if action_set.max_magnitude() > action_bound {
            return Err(NfqError::config("action bound smaller than the largest action"));
        }
        Ok(QFunction { encoding, net, normalizer, trained_actions: action_set.clone(), action_set, action_bound })
    }

    pub fn state_dim(&self) -> usize {
        self.normalizer.dim()
    }

    /// Network input for one (state, action) pair. For `ActionPerOutput` the action is ignored.
    pub fn encode_input_into(&self, state: &[f64], action: f64, out: &mut Vec<f64>) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(NfqError::shape(format!(
                "stacked state has {} features, Q-function expects {}",
                state.len(),
                self.state_dim()
            )));
        }
        self.normalizer.normalize_into(state, out);
        if self.encoding == Encoding::ActionInInput {
            out.push(scale_action(action, self.action_bound)?);
        }
        Ok(())
    }

    /// Q-values for `actions`, in the order of that set.
    pub fn q_values(&self, state: &[f64], actions: &ActionSet) -> Result<Vec<f64>> {
        match self.encoding {
            Encoding::ActionInInput => {
                let mut input = Vec::with_capacity(actions.len() * self.net.input_dim());
                for &a in actions.values() {
                    self.encode_input_into(state, a, &mut input)?;
                }
                self.net.forward(&input)
            }
            Encoding::ActionPerOutput => {
                if *actions != self.trained_actions {
                    return Err(NfqError::config("action-per-output Q-function queried with a different action set"));
                }
                let mut input = Vec::with_capacity(self.net.input_dim());
                self.encode_input_into(state, 0.0, &mut input)?;
                self.net.forward(&input)
            }
        }
    }

    pub fn greedy_action(&self, state: &[f64], mask: Option<&[bool]>) -> Result<(usize, f64)> {
        let q = self.q_values(state, &self.action_set)?;
        argmin_masked(&q, mask)
    }

    /// Replaces the action set without touching the network.
    pub fn extend_action_set(&self, actions: ActionSet) -> Result<QFunction> {
        if self.encoding == Encoding::ActionPerOutput {
            return Err(NfqError::Unsupported(
                "cannot change the action set of an action-per-output network; its head width is fixed".into(),
            ));
        }
        if actions.max_magnitude() > self.action_bound {
            return Err(NfqError::input(format!(
                "action {} exceeds the fixed action bound {}",
                actions.max_magnitude(),
                self.action_bound
            )));
        }
        let mut qf = self.clone();
        qf.trained_actions = actions.clone();
        qf.action_set = actions;
        Ok(qf)
    }
}

impl QModel for QFunction {
    fn action_count(&self) -> usize {
        self.action_set.len()
    }

    fn q_values_of(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.q_values(state, &self.action_set)
    }

    fn q_values_batch(&self, states: &[f64], state_dim: usize) -> Result<Vec<f64>> {
        if state_dim != self.state_dim() || !states.len().is_multiple_of(state_dim) {
            return Err(NfqError::shape("stacked state batch does not match the Q-function"));
        }
        let rows = states.len() / state_dim;
        let mut input = Vec::with_capacity(rows * self.action_set.len() * self.net.input_dim());
        match self.encoding {
            Encoding::ActionInInput => {
                for s in states.chunks_exact(state_dim) {
                    for &a in self.action_set.values() {
                        self.encode_input_into(s, a, &mut input)?;
                    }
                }
            }
            Encoding::ActionPerOutput => {
                for s in states.chunks_exact(state_dim) {
                    self.encode_input_into(s, 0.0, &mut input)?;
                }
            }
        }
        let mut out = Vec::with_capacity(rows * self.action_set.len());
        // bounded chunks keep the intermediate activations small
        let chunk_rows = 4096 * self.net.input_dim();
        for chunk in input.chunks(chunk_rows) {
            out.extend(self.net.forward(chunk)?);
        }
        Ok(out)
    }
}

/// Index and value of the smallest unmasked entry; ties go to the lowest index.
pub fn argmin_masked(q: &[f64], mask: Option<&[bool]>) -> Result<(usize, f64)> {
    if let Some(m) = mask {
        if m.len() != q.len() {
            return Err(NfqError::shape("action mask length differs from action count"));
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in q.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.ok_or_else(|| NfqError::input("every action is masked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;

    fn qf(encoding: Encoding, seed: u64) -> QFunction {
        QFunction::new(
            encoding,
            5,
            &[LayerSpec::new(8, Activation::Relu), LayerSpec::new(6, Activation::Tanh)],
            Activation::Sigmoid,
            ActionSet::symmetric(10.0).unwrap(),
            10.0,
            WeightInit::Glorot,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn action_set_invariants() {
        assert!(ActionSet::new(vec![-1.0, 0.0, 1.0]).is_ok());
        assert!(ActionSet::new(vec![-1.0, 1.0]).is_err());
        assert!(ActionSet::new(vec![0.0, -1.0]).is_err());
        assert!(ActionSet::new(vec![-1.0, 0.0, 0.0, 1.0]).is_err());
        let json = r#"{"values":[-1.0,0.0,1.0],"neutral_index":0}"#;
        assert!(serde_json::from_str::<ActionSet>(json).is_err());
    }

    #[test]
    fn extended_set_has_33_actions_and_one_zero() {
        let set = ActionSet::extended(300.0);
        assert_eq!(set.len(), 33);
        assert_eq!(set.values().iter().filter(|v| **v == 0.0).count(), 1);
        assert_eq!(set.max_magnitude(), 500.0);
        assert!(set.index_of(-300.0).is_some() && set.index_of(300.0).is_some());
    }

    #[test]
    fn scaling() {
        assert_eq!(scale_action(300.0, 300.0).unwrap(), 1.0);
        assert_eq!(scale_action(0.0, 300.0).unwrap(), 0.0);
        assert_eq!(scale_action(-10.0, 10.0).unwrap(), -1.0);
        assert!(scale_action(10.5, 10.0).is_err());
    }

    #[test]
    fn constant_feature_hits_std_floor() {
        let rows = [3.0, 1.0, 3.0, 2.0, 3.0, 6.0];
        let n = Normalizer::fit(&rows, 2).unwrap();
        assert_eq!(n.mean[0], 3.0);
        assert_eq!(n.std[0], STD_FLOOR);
        assert!(Normalizer::fit(&rows[..2], 2).is_err());
    }

    #[test]
    fn greedy_rules() {
        assert_eq!(argmin_masked(&[0.3, 0.1, 0.3], None).unwrap().0, 1);
        assert_eq!(argmin_masked(&[0.2, 0.2, 0.5], None).unwrap().0, 0);
        assert_eq!(argmin_masked(&[0.1, 0.4, 0.05], Some(&[true, true, false])).unwrap().0, 0);
        assert!(argmin_masked(&[0.1, 0.2], Some(&[false, false])).is_err());
    }

    #[test]
    fn zero_weight_net_gives_half_everywhere() {
        let mut q = qf(Encoding::ActionInInput, 1);
        q.net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let v = q.q_values(&[0.1, 0.2, -1.0, 0.0, 0.3], &q.action_set).unwrap();
        assert_eq!(v, vec![0.5; 3]);
    }

    #[test]
    fn action_in_input_matches_single_forward_calls() {
        let q = qf(Encoding::ActionInInput, 2);
        let s = [0.4, -0.2, 0.6, 0.8, 1.5];
        let all = q.q_values(&s, &q.action_set).unwrap();
        assert_eq!(all.len(), 3);
        for (i, &a) in q.action_set.values().iter().enumerate() {
            let mut input = Vec::new();
            q.encode_input_into(&s, a, &mut input).unwrap();
            assert_eq!(q.net.forward(&input).unwrap()[0], all[i]);
        }
    }

    #[test]
    fn per_output_layout_and_set_guard() {
        let q = qf(Encoding::ActionPerOutput, 3);
        let s = [0.4, -0.2, 0.6, 0.8, 1.5];
        assert_eq!(q.q_values(&s, &q.action_set).unwrap().len(), 3);
        let other = ActionSet::symmetric(5.0).unwrap();
        assert!(matches!(q.q_values(&s, &other), Err(NfqError::Config(_))));
        assert!(matches!(q.extend_action_set(ActionSet::extended(10.0)), Err(NfqError::Unsupported(_))));
    }

    #[test]
    fn extension_keeps_old_actions() {
        let q = QFunction::new(
            Encoding::ActionInInput,
            5,
            &[LayerSpec::new(8, Activation::Relu)],
            Activation::Sigmoid,
            ActionSet::symmetric(300.0).unwrap(),
            500.0,
            WeightInit::Glorot,
            4,
        )
        .unwrap();
        let s = [0.1, 0.2, -0.3, 0.95, 0.0];
        let same = q.extend_action_set(q.action_set.clone()).unwrap();
        assert_eq!(same.q_values_of(&s).unwrap(), q.q_values_of(&s).unwrap());
        let ext = q.extend_action_set(ActionSet::extended(300.0)).unwrap();
        let mask = ext.action_set.values().iter().map(|v| [-300.0, 0.0, 300.0].contains(v)).collect::<Vec<_>>();
        let (i_ext, v_ext) = ext.greedy_action(&s, Some(&mask)).unwrap();
        let (i_old, v_old) = q.greedy_action(&s, None).unwrap();
        assert_eq!(ext.action_set.values()[i_ext], q.action_set.values()[i_old]);
        assert_eq!(v_ext, v_old);
    }
}
