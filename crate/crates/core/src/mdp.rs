//! Finite, time-layered MDPs with exact enumeration and backward-induction oracles.
//!
//! States carry their time index through the layer they belong to: the kernel
//! only maps layer `t` to layer `t + 1`, and transitions out of the last layer
//! `T` end the episode (`next == None`) while still paying the reward `R_{T+1}`.
//! The discount factor is fixed at 1.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StateId = usize;
pub type ActionId = usize;

/// Maximum number of trajectories any enumeration is allowed to visit.
pub const ENUMERATION_LIMIT: u128 = 10_000_000;

const PROB_TOL: f64 = 1e-12;

/// One outcome of taking an action: successor state (if any), reward, probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub next: Option<StateId>,
    pub reward: f64,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initial {
    /// Episodes start in `state` and the first action is forced to `action`.
    Fixed { state: StateId, action: ActionId },
    /// `p(s_0)`; the first action is drawn from the policy.
    Distribution(Vec<(StateId, f64)>),
}

/// A single kernel entry as stored in MDP definition files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub s: StateId,
    pub a: ActionId,
    pub next: Option<StateId>,
    pub r: f64,
    pub p: f64,
}

/// On-disk representation of an [`Mdp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpFile {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub num_actions: usize,
    pub horizon: usize,
    /// State ids of each time layer `0..=horizon`.
    pub layers: Vec<Vec<StateId>>,
    pub initial: Initial,
    pub reward_bound: f64,
    pub transitions: Vec<TransitionEntry>,
}

fn default_schema_version() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct Mdp {
    name: String,
    num_actions: usize,
    horizon: usize,
    layers: Vec<Vec<StateId>>,
    layer_of: Vec<usize>,
    kernel: Vec<Vec<Vec<Edge>>>,
    initial: Initial,
    reward_bound: f64,
}

impl TryFrom<MdpFile> for Mdp {
    type Error = Error;

    fn try_from(file: MdpFile) -> Result<Self> {
        if file.schema_version != 1 {
            return Err(Error::InvalidMdp(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        let mut builder = MdpBuilder::new(file.num_actions, file.horizon);
        builder.name(&file.name);
        let num_states: usize = file.layers.iter().map(Vec::len).sum();
        let mut layer_of = vec![usize::MAX; num_states];
        for (t, layer) in file.layers.iter().enumerate() {
            for &s in layer {
                if s >= num_states {
                    return Err(Error::InvalidMdp(format!(
                        "state id {s} out of range (have {num_states} states)"
                    )));
                }
                if layer_of[s] != usize::MAX {
                    return Err(Error::InvalidMdp(format!("state {s} listed twice")));
                }
                layer_of[s] = t;
            }
        }
        for t in layer_of {
            builder.add_state(t);
        }
        for e in &file.transitions {
            builder.add_edge(e.s, e.a, e.next, e.r, e.p)?;
        }
        builder.initial(file.initial);
        builder.reward_bound(file.reward_bound);
        builder.build()
    }
}

impl From<Mdp> for MdpFile {
    fn from(mdp: Mdp) -> Self {
        let mut transitions = Vec::new();
        for (s, per_action) in mdp.kernel.iter().enumerate() {
            for (a, edges) in per_action.iter().enumerate() {
                for e in edges {
                    transitions.push(TransitionEntry {
                        s,
                        a,
                        next: e.next,
                        r: e.reward,
                        p: e.prob,
                    });
                }
            }
        }
        MdpFile {
            schema_version: 1,
            name: mdp.name,
            num_actions: mdp.num_actions,
            horizon: mdp.horizon,
            layers: mdp.layers,
            initial: mdp.initial,
            reward_bound: mdp.reward_bound,
            transitions,
        }
    }
}

/// Incremental constructor; all invariants are checked in [`MdpBuilder::build`].
#[derive(Clone, Debug)]
pub struct MdpBuilder {
    name: String,
    num_actions: usize,
    horizon: usize,
    layer_of: Vec<usize>,
    kernel: Vec<Vec<Vec<Edge>>>,
    initial: Option<Initial>,
    reward_bound: Option<f64>,
}

impl MdpBuilder {
    pub fn new(num_actions: usize, horizon: usize) -> Self {
        MdpBuilder {
            name: String::new(),
            num_actions,
            horizon,
            layer_of: Vec::new(),
            kernel: Vec::new(),
            initial: None,
            reward_bound: None,
        }
    }

    pub fn name(&mut self, name: &str) -> &mut Self {
        self.name = name.to_string();
        self
    }

    /// Adds a state in time layer `layer` and returns its id.
    pub fn add_state(&mut self, layer: usize) -> StateId {
        self.layer_of.push(layer);
        self.kernel.push(vec![Vec::new(); self.num_actions]);
        self.layer_of.len() - 1
    }

    pub fn add_edge(
        &mut self,
        s: StateId,
        a: ActionId,
        next: Option<StateId>,
        reward: f64,
        prob: f64,
    ) -> Result<&mut Self> {
        if s >= self.kernel.len() {
            return Err(Error::InvalidMdp(format!("edge from unknown state {s}")));
        }
        if a >= self.num_actions {
            return Err(Error::InvalidMdp(format!("edge with unknown action {a}")));
        }
        self.kernel[s][a].push(Edge { next, reward, prob });
        Ok(self)
    }

    pub fn initial(&mut self, initial: Initial) -> &mut Self {
        self.initial = Some(initial);
        self
    }

    pub fn reward_bound(&mut self, bound: f64) -> &mut Self {
        self.reward_bound = Some(bound);
        self
    }

    pub fn build(&self) -> Result<Mdp> {
        let invalid = |msg: String| Err(Error::InvalidMdp(msg));
        if self.num_actions == 0 {
            return invalid("num_actions must be positive".into());
        }
        let num_states = self.layer_of.len();
        if num_states == 0 {
            return invalid("no states".into());
        }
        let mut layers = vec![Vec::new(); self.horizon + 1];
        for (s, &t) in self.layer_of.iter().enumerate() {
            if t > self.horizon {
                return invalid(format!("state {s} in layer {t} beyond horizon {}", self.horizon));
            }
            layers[t].push(s);
        }
        if let Some(t) = layers.iter().position(Vec::is_empty) {
            return invalid(format!("layer {t} has no states"));
        }
        let bound = match self.reward_bound {
            Some(b) if b > 0.0 && b.is_finite() => b,
            Some(b) => return invalid(format!("reward bound must be positive, got {b}")),
            None => return invalid("missing reward bound".into()),
        };
        for (s, per_action) in self.kernel.iter().enumerate() {
            let t = self.layer_of[s];
            for (a, edges) in per_action.iter().enumerate() {
                if edges.is_empty() {
                    return invalid(format!("no transitions for (s={s}, a={a})"));
                }
                let mut total = 0.0;
                for e in edges {
                    if !(e.prob >= 0.0 && e.prob.is_finite()) {
                        return invalid(format!("bad probability {} at (s={s}, a={a})", e.prob));
                    }
                    if !e.reward.is_finite() || e.reward.abs() > bound {
                        return invalid(format!(
                            "reward {} at (s={s}, a={a}) exceeds bound {bound}",
                            e.reward
                        ));
                    }
                    match (e.next, t == self.horizon) {
                        (None, true) => {}
                        (Some(n), false) => {
                            if n >= num_states || self.layer_of[n] != t + 1 {
                                return invalid(format!(
                                    "edge (s={s}, a={a}) -> {n} crosses layers (from layer {t})"
                                ));
                            }
                        }
                        (Some(n), true) => {
                            return invalid(format!(
                                "terminal-layer state {s} has successor {n}"
                            ))
                        }
                        (None, false) => {
                            return invalid(format!(
                                "non-terminal state {s} (layer {t}) has an episode-ending edge"
                            ))
                        }
                    }
                    total += e.prob;
                }
                if (total - 1.0).abs() > PROB_TOL {
                    return invalid(format!(
                        "transition probabilities at (s={s}, a={a}) sum to {total}"
                    ));
                }
            }
        }
        let initial = match &self.initial {
            None => return invalid("missing initial condition".into()),
            Some(Initial::Fixed { state, action }) => {
                if *state >= num_states || self.layer_of[*state] != 0 {
                    return invalid(format!("initial state {state} is not in layer 0"));
                }
                if *action >= self.num_actions {
                    return invalid(format!("initial action {action} out of range"));
                }
                self.initial.clone().unwrap()
            }
            Some(Initial::Distribution(dist)) => {
                let mut total = 0.0;
                for &(s, p) in dist {
                    if s >= num_states || self.layer_of[s] != 0 {
                        return invalid(format!("initial state {s} is not in layer 0"));
                    }
                    if !(p >= 0.0 && p.is_finite()) {
                        return invalid(format!("bad initial probability {p}"));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > PROB_TOL {
                    return invalid(format!("initial distribution sums to {total}"));
                }
                self.initial.clone().unwrap()
            }
        };
        Ok(Mdp {
            name: self.name.clone(),
            num_actions: self.num_actions,
            horizon: self.horizon,
            layers,
            layer_of: self.layer_of.clone(),
            kernel: self.kernel.clone(),
            initial,
            reward_bound: bound,
        })
    }
}

impl Mdp {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serialization cannot fail")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_states(&self) -> usize {
        self.layer_of.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn initial(&self) -> &Initial {
        &self.initial
    }

    pub fn layer_of(&self, s: StateId) -> usize {
        self.layer_of[s]
    }

    pub fn layer(&self, t: usize) -> &[StateId] {
        &self.layers[t]
    }

    pub fn edges(&self, s: StateId, a: ActionId) -> &[Edge] {
        &self.kernel[s][a]
    }

    /// Index of the first time step whose action is drawn from the policy.
    pub fn first_policy_step(&self) -> usize {
        match self.initial {
            Initial::Fixed { .. } => 1,
            Initial::Distribution(_) => 0,
        }
    }

    /// `r(s, a) = E[R | s, a]`.
    pub fn expected_reward(&self, s: StateId, a: ActionId) -> f64 {
        self.kernel[s][a].iter().map(|e| e.prob * e.reward).sum()
    }

    /// Number of reward-resolved trajectories, counting every branch of the kernel
    /// and every action regardless of policy probabilities.
    pub fn trajectory_count(&self) -> u128 {
        let mut from_state = vec![0u128; self.num_states()];
        for t in (0..=self.horizon).rev() {
            for &s in &self.layers[t] {
                let mut total = 0u128;
                for a in 0..self.num_actions {
                    total = total.saturating_add(self.continuation_count(s, a, &from_state));
                }
                from_state[s] = total;
            }
        }
        match &self.initial {
            Initial::Fixed { state, action } => {
                self.continuation_count(*state, *action, &from_state)
            }
            Initial::Distribution(dist) => dist
                .iter()
                .fold(0u128, |acc, &(s, _)| acc.saturating_add(from_state[s])),
        }
    }

    fn continuation_count(&self, s: StateId, a: ActionId, from_state: &[u128]) -> u128 {
        self.kernel[s][a].iter().fold(0u128, |acc, e| {
            acc.saturating_add(e.next.map_or(1, |n| from_state[n]))
        })
    }

    pub fn check_enumerable(&self) -> Result<u128> {
        let count = self.trajectory_count();
        if count > ENUMERATION_LIMIT {
            Err(Error::EnumerationTooLarge {
                count,
                limit: ENUMERATION_LIMIT,
            })
        } else {
            Ok(count)
        }
    }

    /// States reachable with positive probability under the uniform policy.
    pub fn reachable_states(&self) -> Vec<bool> {
        let mut reach = vec![false; self.num_states()];
        let mark = |s: StateId, a: ActionId, reach: &mut Vec<bool>| {
            for e in &self.kernel[s][a] {
                if let (Some(n), true) = (e.next, e.prob > 0.0) {
                    reach[n] = true;
                }
            }
        };
        match &self.initial {
            Initial::Fixed { state, action } => {
                reach[*state] = true;
                mark(*state, *action, &mut reach);
            }
            Initial::Distribution(dist) => {
                for &(s, p) in dist {
                    if p > 0.0 {
                        reach[s] = true;
                        for a in 0..self.num_actions {
                            mark(s, a, &mut reach);
                        }
                    }
                }
            }
        }
        let start_layer = self.first_policy_step();
        for t in start_layer..self.horizon {
            for &s in &self.layers[t] {
                if reach[s] {
                    for a in 0..self.num_actions {
                        mark(s, a, &mut reach);
                    }
                }
            }
        }
        reach
    }
}

/// Anything that can report `π(· | s)`.
pub trait ActionProbabilities {
    fn action_probs(&self, state: StateId) -> Cow<'_, [f64]>;
}

/// Adapter for policies evaluated on demand.
pub struct FnPolicy<F>(pub F);

impl<F: Fn(StateId) -> Vec<f64>> ActionProbabilities for FnPolicy<F> {
    fn action_probs(&self, state: StateId) -> Cow<'_, [f64]> {
        Cow::Owned((self.0)(state))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    probs: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                return Err(Error::InvalidPolicy(format!("negative or non-finite entry at state {s}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {total}")));
            }
        }
        Ok(PolicyTable { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        PolicyTable {
            probs: vec![vec![1.0 / num_actions as f64; num_actions]; num_states],
        }
    }

    pub fn deterministic(actions: &[ActionId], num_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; num_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        PolicyTable { probs }
    }

    pub fn num_states(&self) -> usize {
        self.probs.len()
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.probs[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn check_against(&self, mdp: &Mdp) -> Result<()> {
        if self.probs.len() != mdp.num_states() {
            return Err(Error::InvalidPolicy(format!(
                "{} rows for {} states",
                self.probs.len(),
                mdp.num_states()
            )));
        }
        if let Some(s) = self.probs.iter().position(|r| r.len() != mdp.num_actions()) {
            return Err(Error::InvalidPolicy(format!("row {s} has wrong width")));
        }
        Ok(())
    }
}

impl ActionProbabilities for PolicyTable {
    fn action_probs(&self, state: StateId) -> Cow<'_, [f64]> {
        Cow::Borrowed(&self.probs[state])
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Step {
    pub state: StateId,
    pub action: ActionId,
    /// Realized `R_{t+1}` paid for this step's action.
    pub reward: f64,
}

/// A full episode `(s_0, a_0, r_1, ..., s_T, a_T, r_{T+1})`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }

    /// `G_0`, the undiscounted return of the whole episode.
    pub fn total_return(&self) -> f64 {
        self.rewards().sum()
    }

    /// All reward-to-go values `G_0, ..., G_T`.
    pub fn returns_to_go(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.steps.len()];
        let mut acc = 0.0;
        for (t, step) in self.steps.iter().enumerate().rev() {
            acc += step.reward;
            out[t] = acc;
        }
        out
    }

    fn cmp_key(&self, other: &Self) -> Ordering {
        for (x, y) in self.steps.iter().zip(&other.steps) {
            let ord = x
                .state
                .cmp(&y.state)
                .then(x.action.cmp(&y.action))
                .then(x.reward.total_cmp(&y.reward));
            if ord != Ordering::Equal {
                return ord;
            }
        }
        self.steps.len().cmp(&other.steps.len())
    }
}

impl PartialEq for Trajectory {
    fn eq(&self, other: &Self) -> bool {
        self.cmp_key(other) == Ordering::Equal
    }
}

impl Eq for Trajectory {}

impl PartialOrd for Trajectory {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Trajectory {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_key(other)
    }
}

impl Hash for Trajectory {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for s in &self.steps {
            s.state.hash(state);
            s.action.hash(state);
            s.reward.to_bits().hash(state);
        }
    }
}

/// `G_t = Σ_{k=t}^{T} R_{k+1}`.
pub fn return_to_go(tau: &Trajectory, t: usize) -> Result<f64> {
    if t >= tau.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            max: tau.len().saturating_sub(1),
        });
    }
    Ok(tau.steps[t..].iter().map(|s| s.reward).sum())
}

/// Every trajectory with non-zero probability under `policy`, with its probability.
pub fn enumerate_trajectories<P>(mdp: &Mdp, policy: &P) -> Result<Vec<(Trajectory, f64)>>
where
    P: ActionProbabilities + ?Sized,
{
    mdp.check_enumerable()?;
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(mdp.horizon() + 1);
    match mdp.initial() {
        Initial::Fixed { state, action } => {
            expand_action(mdp, policy, *state, *action, 1.0, &mut prefix, &mut out);
        }
        Initial::Distribution(dist) => {
            for &(s, p) in dist {
                if p > 0.0 {
                    expand_state(mdp, policy, s, p, &mut prefix, &mut out);
                }
            }
        }
    }
    Ok(out)
}

fn expand_state<P: ActionProbabilities + ?Sized>(
    mdp: &Mdp,
    policy: &P,
    s: StateId,
    prob: f64,
    prefix: &mut Vec<Step>,
    out: &mut Vec<(Trajectory, f64)>,
) {
    let probs = policy.action_probs(s);
    for (a, &pa) in probs.iter().enumerate() {
        if pa > 0.0 {
            expand_action(mdp, policy, s, a, prob * pa, prefix, out);
        }
    }
}

fn expand_action<P: ActionProbabilities + ?Sized>(
    mdp: &Mdp,
    policy: &P,
    s: StateId,
    a: ActionId,
    prob: f64,
    prefix: &mut Vec<Step>,
    out: &mut Vec<(Trajectory, f64)>,
) {
    for e in mdp.edges(s, a) {
        if e.prob <= 0.0 {
            continue;
        }
        prefix.push(Step {
            state: s,
            action: a,
            reward: e.reward,
        });
        let p = prob * e.prob;
        match e.next {
            None => out.push((
                Trajectory {
                    steps: prefix.clone(),
                },
                p,
            )),
            Some(n) => expand_state(mdp, policy, n, p, prefix, out),
        }
        prefix.pop();
    }
}

/// State-action prefixes `τ_{0,t}` with rewards marginalized out.
pub fn enumerate_prefixes<P>(
    mdp: &Mdp,
    policy: &P,
    t: usize,
) -> Result<Vec<(Vec<(StateId, ActionId)>, f64)>>
where
    P: ActionProbabilities + ?Sized,
{
    if t > mdp.horizon() {
        return Err(Error::IndexOutOfRange {
            index: t,
            max: mdp.horizon(),
        });
    }
    mdp.check_enumerable()?;
    let mut frontier: Vec<(Vec<(StateId, ActionId)>, f64)> = match mdp.initial() {
        Initial::Fixed { state, action } => vec![(vec![(*state, *action)], 1.0)],
        Initial::Distribution(dist) => {
            let mut v = Vec::new();
            for &(s, p) in dist {
                for (a, &pa) in policy.action_probs(s).iter().enumerate() {
                    if p * pa > 0.0 {
                        v.push((vec![(s, a)], p * pa));
                    }
                }
            }
            v
        }
    };
    for _ in 0..t {
        let mut next_frontier = Vec::new();
        for (prefix, prob) in frontier {
            let &(s, a) = prefix.last().expect("non-empty prefix");
            // marginal p(s' | s, a)
            let mut successors: Vec<(StateId, f64)> = Vec::new();
            for e in mdp.edges(s, a) {
                let n = e.next.expect("prefix stops before the terminal layer");
                match successors.iter_mut().find(|(m, _)| *m == n) {
                    Some(entry) => entry.1 += e.prob,
                    None => successors.push((n, e.prob)),
                }
            }
            for (n, pn) in successors {
                for (a2, &pa) in policy.action_probs(n).iter().enumerate() {
                    let p = prob * pn * pa;
                    if p > 0.0 {
                        let mut ext = prefix.clone();
                        ext.push((n, a2));
                        next_frontier.push((ext, p));
                    }
                }
            }
        }
        frontier = next_frontier;
    }
    Ok(frontier)
}

/// `P̃_π(τ)`: product of kernel and policy factors, including `p(s_0) π(a_0 | s_0)`
/// when the initial condition is a distribution.
pub fn trajectory_probability<P>(mdp: &Mdp, policy: &P, tau: &Trajectory) -> Result<f64>
where
    P: ActionProbabilities + ?Sized,
{
    let inconsistent = |msg: String| Err(Error::InconsistentTrajectory(msg));
    if tau.len() != mdp.horizon() + 1 {
        return inconsistent(format!(
            "length {} but horizon {} needs {}",
            tau.len(),
            mdp.horizon(),
            mdp.horizon() + 1
        ));
    }
    for (t, step) in tau.steps.iter().enumerate() {
        if step.state >= mdp.num_states() || mdp.layer_of(step.state) != t {
            return inconsistent(format!("state {} is not in layer {t}", step.state));
        }
        if step.action >= mdp.num_actions() {
            return inconsistent(format!("action {} out of range", step.action));
        }
    }
    let first = tau.steps[0];
    let mut prob = match mdp.initial() {
        Initial::Fixed { state, action } => {
            if first.state != *state || first.action != *action {
                return inconsistent("does not start at the fixed (s0, a0)".into());
            }
            1.0
        }
        Initial::Distribution(dist) => {
            let p0: f64 = dist
                .iter()
                .filter(|(s, _)| *s == first.state)
                .map(|(_, p)| p)
                .sum();
            p0 * policy.action_probs(first.state)[first.action]
        }
    };
    for (t, step) in tau.steps.iter().enumerate() {
        let next = tau.steps.get(t + 1).map(|n| n.state);
        let pk: f64 = mdp
            .edges(step.state, step.action)
            .iter()
            .filter(|e| e.next == next && e.reward == step.reward)
            .map(|e| e.prob)
            .sum();
        prob *= pk;
        if let Some(n) = next {
            prob *= policy.action_probs(n)[tau.steps[t + 1].action];
        }
    }
    Ok(prob)
}

/// Action values and state values of a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
}

/// Backward induction over time layers.
pub fn exact_q_values<P>(mdp: &Mdp, policy: &P) -> ValueTable
where
    P: ActionProbabilities + ?Sized,
{
    let n = mdp.num_states();
    let mut q = vec![vec![0.0; mdp.num_actions()]; n];
    let mut v = vec![0.0; n];
    for t in (0..=mdp.horizon()).rev() {
        for &s in mdp.layer(t) {
            for a in 0..mdp.num_actions() {
                q[s][a] = mdp
                    .edges(s, a)
                    .iter()
                    .map(|e| e.prob * (e.reward + e.next.map_or(0.0, |m| v[m])))
                    .sum();
            }
            let probs = policy.action_probs(s);
            v[s] = probs.iter().zip(&q[s]).map(|(p, x)| p * x).sum();
        }
    }
    ValueTable { q, v }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalPolicy {
    pub policy: PolicyTable,
    pub actions: Vec<ActionId>,
    pub values: ValueTable,
    /// Whether the maximizing action is strictly unique at each state.
    pub unique: Vec<bool>,
}

impl OptimalPolicy {
    pub fn is_unique(&self) -> bool {
        self.unique.iter().all(|&u| u)
    }

    /// Smallest `v*(s) - q*(s, a)` over states and non-optimal actions.
    pub fn min_gap(&self) -> Option<f64> {
        let mut gap: Option<f64> = None;
        for (s, row) in self.values.q.iter().enumerate() {
            for (a, &x) in row.iter().enumerate() {
                if a != self.actions[s] {
                    let g = self.values.v[s] - x;
                    gap = Some(gap.map_or(g, |m| m.min(g)));
                }
            }
        }
        gap
    }
}

pub fn optimal_policy(mdp: &Mdp) -> OptimalPolicy {
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let mut q = vec![vec![0.0; na]; n];
    let mut v = vec![0.0; n];
    let mut actions = vec![0; n];
    let mut unique = vec![true; n];
    for t in (0..=mdp.horizon()).rev() {
        for &s in mdp.layer(t) {
            for a in 0..na {
                q[s][a] = mdp
                    .edges(s, a)
                    .iter()
                    .map(|e| e.prob * (e.reward + e.next.map_or(0.0, |m| v[m])))
                    .sum();
            }
            let (best, &best_q) = q[s]
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(&x.0)))
                .expect("at least one action");
            let tol = 1e-12 * best_q.abs().max(1.0);
            unique[s] = q[s]
                .iter()
                .enumerate()
                .all(|(a, &x)| a == best || best_q - x > tol);
            actions[s] = best;
            v[s] = best_q;
        }
    }
    OptimalPolicy {
        policy: PolicyTable::deterministic(&actions, na),
        actions,
        values: ValueTable { q, v },
        unique,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_one_state_per_layer(horizon: usize, num_actions: usize, fixed: bool) -> Mdp {
        let mut b = MdpBuilder::new(num_actions, horizon);
        let states: Vec<_> = (0..=horizon).map(|t| b.add_state(t)).collect();
        for t in 0..=horizon {
            for a in 0..num_actions {
                let next = states.get(t + 1).copied();
                b.add_edge(states[t], a, next, a as f64, 1.0).unwrap();
            }
        }
        b.initial(if fixed {
            Initial::Fixed {
                state: states[0],
                action: 0,
            }
        } else {
            Initial::Distribution(vec![(states[0], 1.0)])
        });
        b.reward_bound(num_actions as f64);
        b.build().unwrap()
    }

    #[test]
    fn uniform_two_action_chain_has_four_equal_trajectories() {
        let mdp = chain_one_state_per_layer(1, 2, false);
        let pol = PolicyTable::uniform(mdp.num_states(), 2);
        let trajs = enumerate_trajectories(&mdp, &pol).unwrap();
        assert_eq!(trajs.len(), 4);
        for (_, p) in &trajs {
            assert_eq!(*p, 0.25);
        }
    }

    #[test]
    fn deterministic_policy_gives_single_trajectory() {
        let mdp = chain_one_state_per_layer(3, 2, false);
        let pol = PolicyTable::deterministic(&[1, 0, 1, 1], 2);
        let trajs = enumerate_trajectories(&mdp, &pol).unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].1, 1.0);
        assert_eq!(trajectory_probability(&mdp, &pol, &trajs[0].0).unwrap(), 1.0);
    }

    #[test]
    fn fixed_start_single_policy_factor() {
        let mdp = chain_one_state_per_layer(1, 2, true);
        let pol = PolicyTable::uniform(mdp.num_states(), 2);
        let tau = Trajectory {
            steps: vec![
                Step { state: 0, action: 0, reward: 0.0 },
                Step { state: 1, action: 1, reward: 1.0 },
            ],
        };
        assert_eq!(trajectory_probability(&mdp, &pol, &tau).unwrap(), 0.5);
        let wrong_start = Trajectory {
            steps: vec![
                Step { state: 0, action: 1, reward: 1.0 },
                Step { state: 1, action: 1, reward: 1.0 },
            ],
        };
        assert!(matches!(
            trajectory_probability(&mdp, &pol, &wrong_start),
            Err(Error::InconsistentTrajectory(_))
        ));
    }

    #[test]
    fn terminal_q_is_expected_immediate_reward() {
        let mut b = MdpBuilder::new(2, 0);
        let s = b.add_state(0);
        b.add_edge(s, 0, None, 1.0, 0.25).unwrap();
        b.add_edge(s, 0, None, -1.0, 0.75).unwrap();
        b.add_edge(s, 1, None, 0.5, 1.0).unwrap();
        b.initial(Initial::Distribution(vec![(s, 1.0)])).reward_bound(1.0);
        let mdp = b.build().unwrap();
        let vals = exact_q_values(&mdp, &PolicyTable::uniform(1, 2));
        assert_eq!(vals.q[0], vec![-0.5, 0.5]);
        assert_eq!(mdp.expected_reward(s, 0), -0.5);
    }

    #[test]
    fn deterministic_mdp_q_is_on_path_sum() {
        let mdp = chain_one_state_per_layer(2, 2, false);
        let pol = PolicyTable::deterministic(&[0, 1, 1], 2);
        let vals = exact_q_values(&mdp, &pol);
        // take action 0 at t=0 (reward 0), then 1 and 1.
        assert_eq!(vals.q[0][0], 2.0);
        assert_eq!(vals.q[0][1], 3.0);
    }

    #[test]
    fn bandit_optimal_arm() {
        let mut b = MdpBuilder::new(2, 0);
        let s = b.add_state(0);
        b.add_edge(s, 0, None, 1.0, 1.0).unwrap();
        b.add_edge(s, 1, None, 0.0, 1.0).unwrap();
        b.initial(Initial::Distribution(vec![(s, 1.0)])).reward_bound(1.0);
        let mdp = b.build().unwrap();
        let opt = optimal_policy(&mdp);
        assert_eq!(opt.actions, vec![0]);
        assert_eq!(opt.values.v[0], 1.0);
        assert!(opt.is_unique());
    }

    #[test]
    fn single_action_optimal_is_the_only_policy() {
        let mdp = chain_one_state_per_layer(2, 1, false);
        let opt = optimal_policy(&mdp);
        assert!(opt.policy.rows().iter().all(|r| r == &vec![1.0]));
        assert_eq!(opt.min_gap(), None);
    }

    #[test]
    fn ties_are_reported() {
        let mut b = MdpBuilder::new(2, 0);
        let s = b.add_state(0);
        b.add_edge(s, 0, None, 1.0, 1.0).unwrap();
        b.add_edge(s, 1, None, 1.0, 1.0).unwrap();
        b.initial(Initial::Distribution(vec![(s, 1.0)])).reward_bound(1.0);
        assert!(!optimal_policy(&b.build().unwrap()).is_unique());
    }

    #[test]
    fn return_to_go_values() {
        let tau = Trajectory {
            steps: [1.0, 2.0, 3.0]
                .iter()
                .enumerate()
                .map(|(t, &r)| Step { state: t, action: 0, reward: r })
                .collect(),
        };
        assert_eq!(return_to_go(&tau, 0).unwrap(), 6.0);
        assert_eq!(return_to_go(&tau, 2).unwrap(), 3.0);
        assert_eq!(tau.returns_to_go(), vec![6.0, 5.0, 3.0]);
        assert!(matches!(
            return_to_go(&tau, 3),
            Err(Error::IndexOutOfRange { index: 3, max: 2 })
        ));
    }

    #[test]
    fn builder_rejects_cross_layer_edges_and_bad_sums() {
        let mut b = MdpBuilder::new(1, 2);
        let s0 = b.add_state(0);
        let _s1 = b.add_state(1);
        let s2 = b.add_state(2);
        b.add_edge(s0, 0, Some(s2), 0.0, 1.0).unwrap();
        b.initial(Initial::Distribution(vec![(s0, 1.0)])).reward_bound(1.0);
        assert!(matches!(b.build(), Err(Error::InvalidMdp(_))));

        let mut b = MdpBuilder::new(1, 0);
        let s = b.add_state(0);
        b.add_edge(s, 0, None, 0.0, 0.5).unwrap();
        b.initial(Initial::Distribution(vec![(s, 1.0)])).reward_bound(1.0);
        assert!(matches!(b.build(), Err(Error::InvalidMdp(_))));

        let mut b = MdpBuilder::new(1, 0);
        let s = b.add_state(0);
        b.add_edge(s, 0, None, 2.0, 1.0).unwrap();
        b.initial(Initial::Distribution(vec![(s, 1.0)])).reward_bound(1.0);
        assert!(matches!(b.build(), Err(Error::InvalidMdp(_))));
    }

    #[test]
    fn json_round_trip() {
        let mdp = chain_one_state_per_layer(2, 2, true);
        let back = Mdp::from_json(&mdp.to_json()).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn enumeration_guard() {
        // 10 actions, 8 layers with 2 states each, full fan-out: (10*2)^7 * 10 >> 1e7.
        let mut b = MdpBuilder::new(10, 7);
        let layers: Vec<Vec<_>> = (0..=7).map(|t| vec![b.add_state(t), b.add_state(t)]).collect();
        for t in 0..=7 {
            for &s in &layers[t] {
                for a in 0..10 {
                    if t < 7 {
                        for &n in &layers[t + 1] {
                            b.add_edge(s, a, Some(n), 0.0, 0.5).unwrap();
                        }
                    } else {
                        b.add_edge(s, a, None, 0.0, 1.0).unwrap();
                    }
                }
            }
        }
        b.initial(Initial::Distribution(vec![(layers[0][0], 1.0)])).reward_bound(1.0);
        let mdp = b.build().unwrap();
        let pol = PolicyTable::uniform(mdp.num_states(), 10);
        assert!(matches!(
            enumerate_trajectories(&mdp, &pol),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }
}
