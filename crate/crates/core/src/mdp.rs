//! Tabular, time-inhomogeneous finite-horizon MDPs and the tables that live
//! on them.
//!
//! Steps are 0-based internally: step `h` ranges over `0..horizon`. Every
//! trajectory has exactly `horizon` state-action pairs; there is no state
//! after the last step in any table.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, PROB_TOL};

/// Full model: `P_h(s'|s,a)`, `r_h(s,a)` and the initial distribution `ν`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpJson", into = "MdpJson")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_dist: Vec<f64>,
    /// Flat `[h][s][a][s']`.
    transitions: Vec<f64>,
    /// Flat `[h][s][a]`.
    rewards: Vec<f64>,
}

/// One violated model invariant, with the offending indices.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyDimension { what: &'static str },
    InitialSum { sum: f64 },
    InitialNegative { state: usize, value: f64 },
    TransitionSum { step: usize, state: usize, action: usize, sum: f64 },
    TransitionNegative { step: usize, state: usize, action: usize, next: usize, value: f64 },
    RewardRange { step: usize, state: usize, action: usize, value: f64 },
    PolicySum { step: usize, state: usize, sum: f64 },
    PolicyNegative { step: usize, state: usize, action: usize, value: f64 },
    NonFinite { what: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyDimension { what } => write!(f, "{what} must be at least 1"),
            Violation::InitialSum { sum } => write!(f, "initial distribution sums to {sum}"),
            Violation::InitialNegative { state, value } => {
                write!(f, "initial_dist[{state}] = {value} is negative")
            }
            Violation::TransitionSum { step, state, action, sum } => {
                write!(f, "transitions[{step}][{state}][{action}] sums to {sum}")
            }
            Violation::TransitionNegative { step, state, action, next, value } => {
                write!(f, "transitions[{step}][{state}][{action}][{next}] = {value} is negative")
            }
            Violation::RewardRange { step, state, action, value } => {
                write!(f, "rewards[{step}][{state}][{action}] = {value} is outside [0, 1]")
            }
            Violation::PolicySum { step, state, sum } => {
                write!(f, "policy[{step}][{state}] sums to {sum}")
            }
            Violation::PolicyNegative { step, state, action, value } => {
                write!(f, "policy[{step}][{state}][{action}] = {value} is negative")
            }
            Violation::NonFinite { what } => write!(f, "{what} contains a non-finite value"),
        }
    }
}

/// Result of [`TabularMdp::validate`]: empty means the model is well formed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidModel(self.violations))
        }
    }
}

impl TabularMdp {
    /// Builds and validates a model from flat tables.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_dist: Vec<f64>,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self::new_unchecked(num_states, num_actions, horizon, initial_dist, transitions, rewards)?;
        mdp.validate().into_result()?;
        Ok(mdp)
    }

    /// Checks table lengths only; probability and reward invariants are left
    /// to [`validate`](Self::validate).
    pub fn new_unchecked(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_dist: Vec<f64>,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let (s, a, h) = (num_states, num_actions, horizon);
        if initial_dist.len() != s {
            return Err(Error::Dimension(format!("initial_dist has length {}, expected {s}", initial_dist.len())));
        }
        if transitions.len() != h * s * a * s {
            return Err(Error::Dimension(format!(
                "transitions have {} entries, expected {}",
                transitions.len(),
                h * s * a * s
            )));
        }
        if rewards.len() != h * s * a {
            return Err(Error::Dimension(format!("rewards have {} entries, expected {}", rewards.len(), h * s * a)));
        }
        Ok(Self { num_states, num_actions, horizon, initial_dist, transitions, rewards })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// `P_h(·|s,a)` as a slice over next states.
    #[inline]
    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = ((h * n + s) * self.num_actions + a) * n;
        &self.transitions[start..start + n]
    }

    #[inline]
    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[(h * self.num_states + s) * self.num_actions + a]
    }

    /// Rewards of step `h` as a flat `[s][a]` slice.
    pub fn step_rewards(&self, h: usize) -> &[f64] {
        let n = self.num_states * self.num_actions;
        &self.rewards[h * n..(h + 1) * n]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Returns a copy with a different reward table (flat `[h][s][a]`).
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.horizon,
            self.initial_dist.clone(),
            self.transitions.clone(),
            rewards,
        )
    }

    /// Lists every violated model invariant.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for (what, n) in [("num_states", self.num_states), ("num_actions", self.num_actions), ("horizon", self.horizon)]
        {
            if n == 0 {
                violations.push(Violation::EmptyDimension { what });
            }
        }
        if !violations.is_empty() {
            return ValidationReport { violations };
        }
        if self.initial_dist.iter().any(|x| !x.is_finite()) {
            violations.push(Violation::NonFinite { what: "initial_dist" });
        }
        if self.transitions.iter().any(|x| !x.is_finite()) {
            violations.push(Violation::NonFinite { what: "transitions" });
        }
        if self.rewards.iter().any(|x| !x.is_finite()) {
            violations.push(Violation::NonFinite { what: "rewards" });
        }

        for (state, &value) in self.initial_dist.iter().enumerate() {
            if value < 0.0 {
                violations.push(Violation::InitialNegative { state, value });
            }
        }
        let sum: f64 = self.initial_dist.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            violations.push(Violation::InitialSum { sum });
        }

        for step in 0..self.horizon {
            for state in 0..self.num_states {
                for action in 0..self.num_actions {
                    let row = self.transition_row(step, state, action);
                    for (next, &value) in row.iter().enumerate() {
                        if value < 0.0 {
                            violations.push(Violation::TransitionNegative { step, state, action, next, value });
                        }
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > PROB_TOL {
                        violations.push(Violation::TransitionSum { step, state, action, sum });
                    }
                    let value = self.reward(step, state, action);
                    if !(0.0..=1.0).contains(&value) {
                        violations.push(Violation::RewardRange { step, state, action, value });
                    }
                }
            }
        }
        ValidationReport { violations }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.horizon != self.horizon
            || policy.num_states != self.num_states
            || policy.num_actions != self.num_actions
        {
            return Err(Error::Dimension(format!(
                "policy shape (H={}, S={}, A={}) does not match the MDP (H={}, S={}, A={})",
                policy.horizon, policy.num_states, policy.num_actions, self.horizon, self.num_states, self.num_actions
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_dist: Vec<f64>,
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    rewards: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MdpJson> for TabularMdp {
    type Error = Error;

    fn try_from(raw: MdpJson) -> Result<Self> {
        let (s, a, h) = (raw.num_states, raw.num_actions, raw.horizon);
        let transitions = flatten4(&raw.transitions, [h, s, a, s], "transitions")?;
        let rewards = flatten3(&raw.rewards, [h, s, a], "rewards")?;
        TabularMdp::new(s, a, h, raw.initial_dist, transitions, rewards)
    }
}

impl From<TabularMdp> for MdpJson {
    fn from(m: TabularMdp) -> Self {
        let (s, a, h) = (m.num_states, m.num_actions, m.horizon);
        MdpJson {
            num_states: s,
            num_actions: a,
            horizon: h,
            transitions: m.transitions.chunks(s * a * s).map(|step| nest3(step, s, a, s)).collect(),
            rewards: nest3(&m.rewards, h, s, a),
            initial_dist: m.initial_dist,
        }
    }
}

/// Per-step action distributions `π_h(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyJson", into = "PolicyJson")]
pub struct PolicyTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    /// Flat `[h][s][a]`.
    table: Vec<f64>,
}

impl PolicyTable {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != horizon * num_states * num_actions {
            return Err(Error::Dimension(format!(
                "policy table has {} entries, expected {}",
                table.len(),
                horizon * num_states * num_actions
            )));
        }
        let policy = Self { horizon, num_states, num_actions, table };
        let violations = policy.validate();
        if violations.is_empty() {
            Ok(policy)
        } else {
            Err(Error::InvalidModel(violations))
        }
    }

    /// Deterministic policy from an action per `(h, s)`, flat `[h][s]`.
    pub fn deterministic(horizon: usize, num_states: usize, num_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != horizon * num_states {
            return Err(Error::Dimension(format!("expected {} actions, got {}", horizon * num_states, actions.len())));
        }
        let mut table = vec![0.0; horizon * num_states * num_actions];
        for (i, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::InvalidArgument(format!("action {a} out of range")));
            }
            table[i * num_actions + a] = 1.0;
        }
        Ok(Self { horizon, num_states, num_actions, table })
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self { horizon, num_states, num_actions, table: vec![p; horizon * num_states * num_actions] }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.table[(h * self.num_states + s) * self.num_actions + a]
    }

    /// `π_h(·|s)`.
    #[inline]
    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let start = (h * self.num_states + s) * self.num_actions;
        &self.table[start..start + self.num_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.table
    }

    pub fn is_deterministic(&self) -> bool {
        self.table.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.table.iter().any(|p| !p.is_finite()) {
            out.push(Violation::NonFinite { what: "policy" });
            return out;
        }
        for step in 0..self.horizon {
            for state in 0..self.num_states {
                let row = self.row(step, state);
                for (action, &value) in row.iter().enumerate() {
                    if value < 0.0 {
                        out.push(Violation::PolicyNegative { step, state, action, value });
                    }
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    out.push(Violation::PolicySum { step, state, sum });
                }
            }
        }
        out
    }

    /// Reads either one policy object or an array of them.
    pub fn load_many(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        Self::parse_many(&std::fs::read_to_string(path)?)
    }

    /// Accepts one policy, an array, or `{"policies": [...]}`.
    pub fn parse_many(text: &str) -> Result<Vec<Self>> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value {
            serde_json::Value::Array(_) => Ok(serde_json::from_value(value)?),
            serde_json::Value::Object(ref map) if map.contains_key("policies") => {
                Ok(serde_json::from_value(map["policies"].clone())?)
            }
            other => Ok(vec![serde_json::from_value(other)?]),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyJson {
    horizon: usize,
    table: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<PolicyJson> for PolicyTable {
    type Error = Error;

    fn try_from(raw: PolicyJson) -> Result<Self> {
        if raw.table.len() != raw.horizon {
            return Err(Error::Dimension(format!(
                "policy table has {} steps but horizon is {}",
                raw.table.len(),
                raw.horizon
            )));
        }
        let s = raw.table.first().map_or(0, Vec::len);
        let a = raw.table.first().and_then(|t| t.first()).map_or(0, Vec::len);
        let flat = flatten3(&raw.table, [raw.horizon, s, a], "policy table")?;
        PolicyTable::new(raw.horizon, s, a, flat)
    }
}

impl From<PolicyTable> for PolicyJson {
    fn from(p: PolicyTable) -> Self {
        PolicyJson { horizon: p.horizon, table: nest3(&p.table, p.horizon, p.num_states, p.num_actions) }
    }
}

/// Per-step state-action mass `v_h(s,a)`; exact, coarse and thresholded
/// estimates share this layout. Serialises as nested `[H][S][A]` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Vec<f64>>>", into = "Vec<Vec<Vec<f64>>>")]
pub struct VisitationTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    data: Vec<f64>,
}

impl VisitationTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self { horizon, num_states, num_actions, data: vec![0.0; horizon * num_states * num_actions] }
    }

    pub fn from_flat(horizon: usize, num_states: usize, num_actions: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != horizon * num_states * num_actions {
            return Err(Error::Dimension(format!(
                "visitation table has {} entries, expected {}",
                data.len(),
                horizon * num_states * num_actions
            )));
        }
        Ok(Self { horizon, num_states, num_actions, data })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of `(s, a)` cells per step.
    pub fn width(&self) -> usize {
        self.num_states * self.num_actions
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.data[(h * self.num_states + s) * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, h: usize, s: usize, a: usize, value: f64) {
        self.data[(h * self.num_states + s) * self.num_actions + a] = value;
    }

    /// Step `h` as a flat `[s][a]` slice.
    #[inline]
    pub fn step(&self, h: usize) -> &[f64] {
        let w = self.width();
        &self.data[h * w..(h + 1) * w]
    }

    #[inline]
    pub fn step_mut(&mut self, h: usize) -> &mut [f64] {
        let w = self.width();
        &mut self.data[h * w..(h + 1) * w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn step_mass(&self, h: usize) -> f64 {
        self.step(h).iter().sum()
    }

    /// State marginal `Σ_a v_h(s,a)`.
    pub fn state_mass(&self, h: usize, s: usize) -> f64 {
        (0..self.num_actions).map(|a| self.get(h, s, a)).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.horizon == other.horizon && self.num_states == other.num_states && self.num_actions == other.num_actions
    }

    /// `Σ_h Σ_{s,a} |self − other|`.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(x, y)| (x - y).abs()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for VisitationTable {
    type Error = Error;

    fn try_from(raw: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let h = raw.len();
        let s = raw.first().map_or(0, Vec::len);
        let a = raw.first().and_then(|t| t.first()).map_or(0, Vec::len);
        let data = flatten3(&raw, [h, s, a], "visitation table")?;
        if data.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidArgument("visitation entries must be finite and non-negative".into()));
        }
        Ok(Self { horizon: h, num_states: s, num_actions: a, data })
    }
}

impl From<VisitationTable> for Vec<Vec<Vec<f64>>> {
    fn from(t: VisitationTable) -> Self {
        nest3(&t.data, t.horizon, t.num_states, t.num_actions)
    }
}

fn nest2(flat: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    debug_assert_eq!(flat.len(), rows * cols);
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn nest3(flat: &[f64], d0: usize, d1: usize, d2: usize) -> Vec<Vec<Vec<f64>>> {
    if d1 * d2 == 0 {
        return vec![Vec::new(); d0];
    }
    flat.chunks(d1 * d2).map(|c| nest2(c, d1, d2)).collect()
}

fn flatten3(raw: &[Vec<Vec<f64>>], dims: [usize; 3], what: &str) -> Result<Vec<f64>> {
    let bad = || Error::Dimension(format!("{what} must have shape {dims:?}"));
    if raw.len() != dims[0] {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    for plane in raw {
        if plane.len() != dims[1] {
            return Err(bad());
        }
        for row in plane {
            if row.len() != dims[2] {
                return Err(bad());
            }
            out.extend_from_slice(row);
        }
    }
    Ok(out)
}

fn flatten4(raw: &[Vec<Vec<Vec<f64>>>], dims: [usize; 4], what: &str) -> Result<Vec<f64>> {
    if raw.len() != dims[0] {
        return Err(Error::Dimension(format!("{what} must have shape {dims:?}")));
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    for cube in raw {
        out.extend(flatten3(cube, [dims[1], dims[2], dims[3]], what)?);
    }
    Ok(out)
}
