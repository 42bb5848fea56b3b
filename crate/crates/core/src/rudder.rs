//! RUDDER: a return-decomposition critic over trajectory prefixes, reward
//! redistribution, and an actor regressing `q̂(s, a; θ)` on redistributed
//! rewards under a fixed behavioral policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{Activation, Network, ParamVector};
use crate::control::ControlState;
use crate::error::{Error, Result};
use crate::mdp::{enumerate_trajectories, FnPolicy, Mdp, PolicyTable, StateId, Trajectory};
use crate::policy::{one_hot, softmax};
use crate::sampling::simulate_trajectory;
use crate::trainer::GradientEstimate;

/// Per-step rewards whose sum equals the realized return.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedistributedRewards {
    pub rewards: Vec<f64>,
    pub realized_return: f64,
}

impl RedistributedRewards {
    /// Share of the absolute redistributed reward placed before the last step.
    pub fn early_share(&self) -> f64 {
        let total: f64 = self.rewards.iter().map(|r| r.abs()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let n = self.rewards.len();
        self.rewards[..n - 1].iter().map(|r| r.abs()).sum::<f64>() / total
    }
}

/// Prefix differences of the return predictions plus a uniform correction so
/// the rewards sum to the realized return.
pub fn redistribute_predictions(predictions: &[f64], realized_return: f64) -> RedistributedRewards {
    let mut rewards: Vec<f64> = predictions
        .iter()
        .enumerate()
        .map(|(t, &g)| if t == 0 { g } else { g - predictions[t - 1] })
        .collect();
    let n = rewards.len() as f64;
    let correction = (realized_return - rewards.iter().sum::<f64>()) / n;
    for r in &mut rewards {
        *r += correction;
    }
    RedistributedRewards {
        rewards,
        realized_return,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RudderModel {
    /// `q̂(s, ·; θ)` over one-hot states.
    pub actor: Network,
    /// `g(τ_{0:t}; ω)` over the zero-padded one-hot prefix encoding.
    pub critic: Network,
    pub behavioral: PolicyTable,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Coefficient `c` of `ρ_θ = c ‖θ‖² / 2`.
    pub actor_decay: f64,
    /// Coefficient `c` of `ρ_ω = c ‖ω‖² / 2`.
    pub critic_decay: f64,
}

impl RudderModel {
    pub fn new(mdp: &Mdp, actor: Network, critic: Network, behavioral: PolicyTable) -> Result<Self> {
        let (ns, na, horizon) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
        let enc = (horizon + 1) * ns * na;
        for (expected, got) in [
            (ns, actor.input_dim()),
            (na, actor.output_dim()),
            (enc, critic.input_dim()),
            (1, critic.output_dim()),
        ] {
            if expected != got {
                return Err(Error::ShapeMismatch { expected, got });
            }
        }
        behavioral.check_against(mdp)?;
        Ok(RudderModel {
            actor,
            critic,
            behavioral,
            num_states: ns,
            num_actions: na,
            horizon,
            actor_decay: 1.0,
            critic_decay: 1.0,
        })
    }

    /// Networks with the given hidden widths and a uniform behavioral policy.
    pub fn for_mdp(
        mdp: &Mdp,
        actor_hidden: &[usize],
        critic_hidden: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let actor = Network::mlp(ns, actor_hidden, na, activation)?;
        let critic = Network::mlp((mdp.horizon() + 1) * ns * na, critic_hidden, 1, activation)?;
        RudderModel::new(mdp, actor, critic, PolicyTable::uniform(ns, na))
    }

    pub fn encoding_dim(&self) -> usize {
        (self.horizon + 1) * self.num_states * self.num_actions
    }

    /// One-hot `(s_k, a_k)` blocks for `k ≤ t`, zero elsewhere.
    pub fn encode_prefix(&self, tau: &Trajectory, t: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.encoding_dim()];
        let block = self.num_states * self.num_actions;
        for (k, st) in tau.steps.iter().take(t + 1).enumerate() {
            x[k * block + st.state * self.num_actions + st.action] = 1.0;
        }
        x
    }

    /// `g(τ_{0:t}; ω)` for every `t`.
    pub fn prefix_predictions(&self, omega: &ParamVector, tau: &Trajectory) -> Vec<f64> {
        (0..tau.len())
            .map(|t| self.critic.trace(&omega.values, &self.encode_prefix(tau, t)).output()[0])
            .collect()
    }

    pub fn redistribute(&self, tau: &Trajectory, omega: &ParamVector) -> RedistributedRewards {
        redistribute_predictions(&self.prefix_predictions(omega, tau), tau.total_return())
    }

    pub fn q_values(&self, theta: &ParamVector, s: StateId) -> Vec<f64> {
        self.actor
            .forward(theta, &one_hot(s, self.num_states))
            .expect("actor shape checked at construction")
    }

    /// `π(θ, z₁) = softmax(z₁ q̂(s; θ))`.
    pub fn policy_table(&self, theta: &ParamVector, slope: f64) -> PolicyTable {
        let rows = (0..self.num_states)
            .map(|s| softmax(&self.q_values(theta, s), slope))
            .collect();
        PolicyTable::new(rows).expect("softmax rows are normalized")
    }

    pub fn greedy_actions(&self, theta: &ParamVector) -> Vec<usize> {
        (0..self.num_states)
            .map(|s| crate::policy::argmax(&self.q_values(theta, s)))
            .collect()
    }

    pub fn at<'a>(
        &'a self,
        mdp: &'a Mdp,
        theta: &'a ParamVector,
        omega: &'a ParamVector,
        z: &'a ControlState,
    ) -> RudderPoint<'a> {
        RudderPoint {
            model: self,
            mdp,
            theta,
            omega,
            z,
            actor_cache: vec![None; self.num_states],
        }
    }
}

/// A [`RudderModel`] evaluated at fixed parameters and control state.
pub struct RudderPoint<'a> {
    model: &'a RudderModel,
    mdp: &'a Mdp,
    theta: &'a ParamVector,
    omega: &'a ParamVector,
    z: &'a ControlState,
    /// `q̂(s, ·)` and `∇_θ q̂(s, a)` per state.
    actor_cache: Vec<Option<(Vec<f64>, Vec<Vec<f64>>)>>,
}

impl RudderPoint<'_> {
    fn actor_terms(&mut self, s: StateId) -> &(Vec<f64>, Vec<Vec<f64>>) {
        if self.actor_cache[s].is_none() {
            let net = &self.model.actor;
            let trace = net.trace(&self.theta.values, &one_hot(s, self.model.num_states));
            let q = trace.output().to_vec();
            let grads = (0..q.len())
                .map(|a| {
                    let mut g = vec![0.0; self.theta.len()];
                    net.accumulate_backward(&self.theta.values, &trace, &one_hot(a, q.len()), &mut g);
                    g
                })
                .collect();
            self.actor_cache[s] = Some((q, grads));
        }
        self.actor_cache[s].as_ref().unwrap()
    }

    fn actor_errors(&mut self, tau: &Trajectory) -> Vec<f64> {
        let redistributed = self.model.redistribute(tau, self.omega);
        tau.steps
            .iter()
            .zip(redistributed.rewards)
            .map(|(st, r)| r - self.actor_terms(st.state).0[st.action])
            .collect()
    }

    /// `½ Σ_t (R_{t+1} − q̂(s_t, a_t; θ))² + z₂ ρ_θ`.
    pub fn actor_loss(&mut self, tau: &Trajectory) -> f64 {
        let sq: f64 = self.actor_errors(tau).iter().map(|e| e * e).sum();
        0.5 * sq + self.z.z2_now * 0.5 * self.model.actor_decay * self.theta.norm_sq()
    }

    pub fn actor_grad(&mut self, tau: &Trajectory) -> ParamVector {
        let mut out = ParamVector::zeros(&self.theta.shape);
        self.add_actor_grad(tau, 1.0, &mut out.values);
        out
    }

    fn add_actor_grad(&mut self, tau: &Trajectory, weight: f64, out: &mut [f64]) {
        let errors = self.actor_errors(tau);
        for (st, e) in tau.steps.iter().zip(errors) {
            let g = &self.actor_terms(st.state).1[st.action];
            for (o, gi) in out.iter_mut().zip(g) {
                *o -= weight * e * gi;
            }
        }
        let decay = weight * self.z.z2_now * self.model.actor_decay;
        if decay != 0.0 {
            for (o, th) in out.iter_mut().zip(&self.theta.values) {
                *o += decay * th;
            }
        }
    }

    /// `½ (G₀ − g(τ; ω))² + z₂ ρ_ω`.
    pub fn critic_loss(&self, tau: &Trajectory) -> f64 {
        let x = self.model.encode_prefix(tau, tau.len() - 1);
        let g = self.model.critic.trace(&self.omega.values, &x).output()[0];
        let e = tau.total_return() - g;
        0.5 * e * e + self.z.z2_now * 0.5 * self.model.critic_decay * self.omega.norm_sq()
    }

    pub fn critic_grad(&self, tau: &Trajectory) -> ParamVector {
        let mut out = ParamVector::zeros(&self.omega.shape);
        self.add_critic_grad(tau, 1.0, &mut out.values);
        out
    }

    fn add_critic_grad(&self, tau: &Trajectory, weight: f64, out: &mut [f64]) {
        let net = &self.model.critic;
        let x = self.model.encode_prefix(tau, tau.len() - 1);
        let trace = net.trace(&self.omega.values, &x);
        let e = tau.total_return() - trace.output()[0];
        net.accumulate_backward(&self.omega.values, &trace, &[-weight * e], out);
        let decay = weight * self.z.z2_now * self.model.critic_decay;
        if decay != 0.0 {
            for (o, w) in out.iter_mut().zip(&self.omega.values) {
                *o += decay * w;
            }
        }
    }

    /// Losses and gradients from a behavioral trajectory (actor) and an
    /// on-policy trajectory (critic).
    pub fn sampled(&mut self, behavioral: &Trajectory, on_policy: &Trajectory) -> GradientEstimate {
        GradientEstimate {
            loss_h: self.actor_loss(behavioral),
            loss_g: self.critic_loss(on_policy),
            h: self.actor_grad(behavioral),
            f: self.critic_grad(on_policy),
        }
    }

    /// Actor terms under `π̆` and critic terms under `π(θ, z₁)`, by enumeration.
    pub fn exact(&mut self) -> Result<GradientEstimate> {
        let mut est = self.exact_actor()?;
        let (loss_g, f) = self.exact_critic()?;
        est.loss_g = loss_g;
        est.f = f;
        Ok(est)
    }

    pub fn exact_actor(&mut self) -> Result<GradientEstimate> {
        let behavioral = enumerate_trajectories(self.mdp, &self.model.behavioral)?;
        let mut est = GradientEstimate {
            loss_h: 0.0,
            loss_g: 0.0,
            h: ParamVector::zeros(&self.theta.shape),
            f: ParamVector::zeros(&self.omega.shape),
        };
        for (tau, p) in &behavioral {
            est.loss_h += p * self.actor_loss(tau);
            self.add_actor_grad(tau, *p, &mut est.h.values);
        }
        Ok(est)
    }

    pub fn exact_critic(&self) -> Result<(f64, ParamVector)> {
        let table = self.model.policy_table(self.theta, self.z.z1_now);
        let on_policy = enumerate_trajectories(self.mdp, &table)?;
        let mut loss = 0.0;
        let mut f = ParamVector::zeros(&self.omega.shape);
        for (tau, p) in &on_policy {
            loss += p * self.critic_loss(tau);
            self.add_critic_grad(tau, *p, &mut f.values);
        }
        Ok((loss, f))
    }

    pub fn sample_behavioral<R: Rng + ?Sized>(&self, rng: &mut R) -> Trajectory {
        simulate_trajectory(self.mdp, &self.model.behavioral, rng)
    }

    pub fn sample_on_policy<R: Rng + ?Sized>(&self, rng: &mut R) -> Trajectory {
        let m = self.model;
        let policy = FnPolicy(|s| softmax(&m.q_values(self.theta, s), self.z.z1_now));
        simulate_trajectory(self.mdp, &policy, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{finite_diff_gradient, relative_error};
    use crate::control::{ControlConfig, ControlState};
    use crate::library::{chain5, random_layered, RandomMdpSpec};
    use crate::mdp::Step;
    use crate::sampling::rng_stream;

    fn random_point(seed: u64) -> (Mdp, RudderModel, ParamVector, ParamVector, ControlState) {
        let mut rng = rng_stream(seed, 0);
        let mdp = random_layered(&mut rng, RandomMdpSpec::default());
        let model = RudderModel::for_mdp(&mdp, &[5], &[4], Activation::Tanh).unwrap();
        let theta = model.actor.init_uniform(&mut rng, 0.5);
        let omega = model.critic.init_uniform(&mut rng, 0.5);
        let mut z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        z.z1_now = rng.random_range(1.0..3.0);
        z.z2_now = rng.random_range(0.0..1.0);
        (mdp, model, theta, omega, z)
    }

    fn tau(rewards: &[f64]) -> Trajectory {
        Trajectory {
            steps: rewards
                .iter()
                .map(|&r| Step {
                    state: 0,
                    action: 0,
                    reward: r,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_predictor_spreads_return_uniformly() {
        let out = redistribute_predictions(&[0.0; 5], 5.0);
        assert_eq!(out.rewards, vec![1.0; 5]);
    }

    #[test]
    fn perfect_prefix_predictor_recovers_rewards() {
        let rewards = [0.5, -1.0, 2.0, 0.25];
        let mut acc = 0.0;
        let prefix: Vec<f64> = rewards
            .iter()
            .map(|r| {
                acc += r;
                acc
            })
            .collect();
        let out = redistribute_predictions(&prefix, acc);
        for (a, b) in out.rewards.iter().zip(rewards) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn redistribution_preserves_return() {
        let mut rng = rng_stream(1, 0);
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let preds: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let g = rng.random_range(-10.0..10.0);
            let out = redistribute_predictions(&preds, g);
            assert!((out.rewards.iter().sum::<f64>() - g).abs() < 1e-10);
        }
    }

    #[test]
    fn encoding_places_pairs_in_blocks() {
        let mdp = chain5();
        let model = RudderModel::for_mdp(&mdp, &[4], &[4], Activation::Tanh).unwrap();
        let t = Trajectory {
            steps: vec![
                Step { state: 0, action: 1, reward: 0.0 },
                Step { state: 2, action: 0, reward: 0.0 },
            ],
        };
        let x = model.encode_prefix(&t, 1);
        assert_eq!(x.len(), 5 * 15 * 2);
        let ones: Vec<usize> = x.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![1, 30 + 4]);
        assert_eq!(model.encode_prefix(&t, 0).iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn actor_regression_at_targets_has_only_decay() {
        let mdp = chain5();
        let model = RudderModel::for_mdp(&mdp, &[], &[4], Activation::Tanh).unwrap();
        let omega = model.critic.zeros();
        // with g = 0 the targets are uniform shares of the return
        let t = simulate_trajectory(&mdp, &PolicyTable::deterministic(&vec![1; 15], 2), &mut rng_stream(0, 1));
        let mut theta = model.actor.zeros();
        for st in &t.steps {
            theta.values[st.action * 15 + st.state] = 1.0;
        }
        let mut z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        z.z2_now = 0.0;
        let mut point = model.at(&mdp, &theta, &omega, &z);
        assert_eq!(point.actor_grad(&t).norm(), 0.0);
        z.z2_now = 0.3;
        let mut point = model.at(&mdp, &theta, &omega, &z);
        let g = point.actor_grad(&t);
        let mut expected = theta.clone();
        expected.scale(0.3);
        assert!(g.distance(&expected) < 1e-15);
    }

    #[test]
    fn exact_critic_on_zero_returns() {
        let mdp = chain5();
        let model = RudderModel::for_mdp(&mdp, &[4], &[4], Activation::Tanh).unwrap();
        let theta = model.actor.zeros();
        let omega = model.critic.zeros();
        let mut z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        z.z2_now = 0.0;
        let point = model.at(&mdp, &theta, &omega, &z);
        let zero_return = tau(&[0.0; 5]);
        assert_eq!(point.critic_loss(&zero_return), 0.0);
        assert_eq!(point.critic_grad(&zero_return).norm(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let (mdp, model, theta, omega, z) = random_point(seed);
            let mut point = model.at(&mdp, &theta, &omega, &z);
            let exact = point.exact().unwrap();
            let fd_h = finite_diff_gradient(
                |th| model.at(&mdp, th, &omega, &z).exact_actor().unwrap().loss_h,
                &theta,
                1e-5,
            );
            let fd_f = finite_diff_gradient(
                |om| model.at(&mdp, &theta, om, &z).exact_critic().unwrap().0,
                &omega,
                1e-5,
            );
            assert!(relative_error(&exact.h.values, &fd_h.values) < 1e-5, "seed {seed}");
            assert!(relative_error(&exact.f.values, &fd_f.values) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn exact_is_mean_of_sampled() {
        let (mdp, model, theta, omega, z) = random_point(77);
        let mut point = model.at(&mdp, &theta, &omega, &z);
        let exact = point.exact().unwrap();
        let mut h = ParamVector::zeros(&theta.shape);
        for (t, p) in enumerate_trajectories(&mdp, &model.behavioral).unwrap() {
            h.axpy(p, &point.actor_grad(&t));
        }
        let mut f = ParamVector::zeros(&omega.shape);
        let table = model.policy_table(&theta, z.z1_now);
        for (t, p) in enumerate_trajectories(&mdp, &table).unwrap() {
            f.axpy(p, &point.critic_grad(&t));
        }
        assert!(relative_error(&h.values, &exact.h.values) < 1e-12);
        assert!(relative_error(&f.values, &exact.f.values) < 1e-12);
    }
}
