//! PPO with a decaying KL trust-region penalty and TD or Monte Carlo critics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{Network, ParamVector};
use crate::control::ControlState;
use crate::error::{Error, Result};
use crate::mdp::{enumerate_trajectories, FnPolicy, Mdp, PolicyTable, StateId, Trajectory};
use crate::policy::{
    kl_smoothed, kl_smoothed_score_cotangent, one_hot, softmax, SoftmaxPolicy, DEFAULT_KL_EPS,
};
use crate::sampling::simulate_trajectory;
use crate::trainer::GradientEstimate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    Td,
    Mc,
}

/// Actor `ψ(s; θ)` and critic `q̂(s, ·; ω)`, both over one-hot states, with
/// separate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoModel {
    pub actor: SoftmaxPolicy,
    pub critic: Network,
    pub mode: CriticMode,
    pub kl_eps: f64,
    pub weight_decay: f64,
}

impl PpoModel {
    pub fn new(actor: SoftmaxPolicy, critic: Network, mode: CriticMode) -> Result<Self> {
        if critic.input_dim() != actor.num_states() {
            return Err(Error::ShapeMismatch {
                expected: actor.num_states(),
                got: critic.input_dim(),
            });
        }
        if critic.output_dim() != actor.num_actions() {
            return Err(Error::ShapeMismatch {
                expected: actor.num_actions(),
                got: critic.output_dim(),
            });
        }
        Ok(PpoModel {
            actor,
            critic,
            mode,
            kl_eps: DEFAULT_KL_EPS,
            weight_decay: 0.0,
        })
    }

    /// Networks with the given hidden widths for `mdp`.
    pub fn for_mdp(
        mdp: &Mdp,
        actor_hidden: &[usize],
        critic_hidden: &[usize],
        activation: crate::approximator::Activation,
        mode: CriticMode,
    ) -> Result<Self> {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let actor = SoftmaxPolicy::new(Network::mlp(ns, actor_hidden, na, activation)?, ns, na)?;
        let critic = Network::mlp(ns, critic_hidden, na, activation)?;
        PpoModel::new(actor, critic, mode)
    }

    pub fn q_values(&self, omega: &ParamVector, s: StateId) -> Vec<f64> {
        self.critic
            .forward(omega, &one_hot(s, self.actor.num_states()))
            .expect("critic shape checked at construction")
    }

    pub fn policy_table(&self, theta: &ParamVector, slope: f64) -> PolicyTable {
        self.actor.table(theta, slope)
    }

    /// Everything evaluated at one `(θ, ω, z)`.
    pub fn at<'a>(
        &'a self,
        mdp: &'a Mdp,
        theta: &'a ParamVector,
        omega: &'a ParamVector,
        z: &'a ControlState,
    ) -> PpoPoint<'a> {
        PpoPoint {
            model: self,
            mdp,
            theta,
            omega,
            z,
            actor_cache: vec![None; mdp.num_states()],
            critic_cache: vec![None; mdp.num_states()],
        }
    }
}

/// Per-state actor quantities shared by every trajectory visiting the state.
#[derive(Clone, Debug)]
struct ActorTerms {
    probs: Vec<f64>,
    kl: f64,
    kl_grad: Vec<f64>,
    /// `∇_θ log π(a | s)` for each action.
    scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct CriticTerms {
    q: Vec<f64>,
    q_prev: Vec<f64>,
    /// `∇_ω q̂(s, a; ω)` for each action.
    q_grads: Vec<Vec<f64>>,
}

/// A [`PpoModel`] evaluated at fixed parameters and control state.
pub struct PpoPoint<'a> {
    model: &'a PpoModel,
    mdp: &'a Mdp,
    theta: &'a ParamVector,
    omega: &'a ParamVector,
    z: &'a ControlState,
    actor_cache: Vec<Option<ActorTerms>>,
    critic_cache: Vec<Option<CriticTerms>>,
}

impl PpoPoint<'_> {
    fn actor_terms(&mut self, s: StateId) -> &ActorTerms {
        if self.actor_cache[s].is_none() {
            let t = self.compute_actor_terms(s);
            self.actor_cache[s] = Some(t);
        }
        self.actor_cache[s].as_ref().unwrap()
    }

    fn critic_terms(&mut self, s: StateId) -> &CriticTerms {
        if self.critic_cache[s].is_none() {
            let t = self.compute_critic_terms(s);
            self.critic_cache[s] = Some(t);
        }
        self.critic_cache[s].as_ref().unwrap()
    }

    fn compute_actor_terms(&self, s: StateId) -> ActorTerms {
        let m = self.model;
        let actor = m.actor.net();
        let input = one_hot(s, m.actor.num_states());
        let slope = self.z.z1_now;

        let trace = actor.trace(&self.theta.values, &input);
        let probs = softmax(trace.output(), slope);
        let old = softmax(
            actor.trace(&self.z.theta_prev.values, &input).output(),
            self.z.z1_prev,
        );
        let kl = kl_smoothed(&old, &probs, m.kl_eps).expect("same action space");
        let mut kl_grad = vec![0.0; self.theta.len()];
        let cot = kl_smoothed_score_cotangent(&old, &probs, m.kl_eps, slope);
        actor.accumulate_backward(&self.theta.values, &trace, &cot, &mut kl_grad);

        let scores = (0..probs.len())
            .map(|a| {
                let cot: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| slope * (f64::from(j == a) - p))
                    .collect();
                let mut g = vec![0.0; self.theta.len()];
                actor.accumulate_backward(&self.theta.values, &trace, &cot, &mut g);
                g
            })
            .collect();
        ActorTerms {
            probs,
            kl,
            kl_grad,
            scores,
        }
    }

    fn compute_critic_terms(&self, s: StateId) -> CriticTerms {
        let critic = &self.model.critic;
        let input = one_hot(s, self.model.actor.num_states());
        let ctrace = critic.trace(&self.omega.values, &input);
        let q = ctrace.output().to_vec();
        let q_prev = critic.trace(&self.z.omega_prev.values, &input).output().to_vec();
        let q_grads = (0..q.len())
            .map(|a| {
                let mut g = vec![0.0; self.omega.len()];
                critic.accumulate_backward(
                    &self.omega.values,
                    &ctrace,
                    &one_hot(a, q.len()),
                    &mut g,
                );
                g
            })
            .collect();
        CriticTerms { q, q_prev, q_grads }
    }

    /// `ρ(τ)` at this point.
    pub fn trust_region(&mut self, tau: &Trajectory) -> f64 {
        let kl: f64 = tau.steps.iter().map(|st| self.actor_terms(st.state).kl).sum();
        kl + self.model.weight_decay * self.theta.norm_sq()
    }

    /// Per-trajectory policy loss `−G₀ + z₂ ρ(τ)`.
    pub fn policy_loss(&mut self, tau: &Trajectory) -> f64 {
        -tau.total_return() + self.z.z2_now * self.trust_region(tau)
    }

    /// Single-trajectory actor gradient `ĥ`.
    pub fn policy_grad(&mut self, tau: &Trajectory) -> ParamVector {
        let mut out = ParamVector::zeros(&self.theta.shape);
        self.add_policy_grad(tau, 1.0, &mut out.values);
        out
    }

    fn add_policy_grad(&mut self, tau: &Trajectory, weight: f64, out: &mut [f64]) {
        let z2 = self.z.z2_now;
        let rho = self.trust_region(tau);
        let start = self.mdp.first_policy_step();
        for (t, st) in tau.steps.iter().enumerate() {
            let q = self.critic_terms(st.state).q.clone();
            let terms = self.actor_terms(st.state);
            if z2 != 0.0 {
                for (o, g) in out.iter_mut().zip(&terms.kl_grad) {
                    *o += weight * z2 * g;
                }
            }
            if t < start {
                continue;
            }
            let baseline: f64 = terms.probs.iter().zip(&q).map(|(p, q)| p * q).sum();
            let advantage = q[st.action] - baseline;
            let coef = weight * (-advantage + z2 * rho);
            if coef != 0.0 {
                for (o, g) in out.iter_mut().zip(&terms.scores[st.action]) {
                    *o += coef * g;
                }
            }
        }
        let decay = weight * z2 * 2.0 * self.model.weight_decay;
        if decay != 0.0 {
            for (o, th) in out.iter_mut().zip(&self.theta.values) {
                *o += decay * th;
            }
        }
    }

    /// Critic targets minus predictions for each step of `tau`.
    fn critic_errors(&mut self, tau: &Trajectory) -> Vec<f64> {
        let mode = self.model.mode;
        let returns = tau.returns_to_go();
        let mut errors = Vec::with_capacity(tau.len());
        for t in 0..tau.len() {
            let st = tau.steps[t];
            let pred = self.critic_terms(st.state).q[st.action];
            let target = match mode {
                CriticMode::Mc => returns[t],
                CriticMode::Td => {
                    st.reward
                        + tau
                            .steps
                            .get(t + 1)
                            .map_or(0.0, |nx| self.critic_terms(nx.state).q_prev[nx.action])
                }
            };
            errors.push(target - pred);
        }
        errors
    }

    /// Per-trajectory critic loss `½ Σ_t δ_t²` (TD error or return error).
    pub fn critic_loss(&mut self, tau: &Trajectory) -> f64 {
        0.5 * self.critic_errors(tau).iter().map(|d| d * d).sum::<f64>()
    }

    /// Single-trajectory critic gradient `f̂ = −Σ_t δ_t ∇_ω q̂(s_t, a_t; ω)`.
    pub fn critic_grad(&mut self, tau: &Trajectory) -> ParamVector {
        let mut out = ParamVector::zeros(&self.omega.shape);
        self.add_critic_grad(tau, 1.0, &mut out.values);
        out
    }

    fn add_critic_grad(&mut self, tau: &Trajectory, weight: f64, out: &mut [f64]) {
        let errors = self.critic_errors(tau);
        for (st, d) in tau.steps.iter().zip(errors) {
            if d == 0.0 {
                continue;
            }
            let g = &self.critic_terms(st.state).q_grads[st.action];
            for (o, gi) in out.iter_mut().zip(g) {
                *o -= weight * d * gi;
            }
        }
    }

    /// Losses and gradients of one trajectory.
    pub fn sampled(&mut self, tau: &Trajectory) -> GradientEstimate {
        GradientEstimate {
            loss_h: self.policy_loss(tau),
            loss_g: self.critic_loss(tau),
            h: self.policy_grad(tau),
            f: self.critic_grad(tau),
        }
    }

    pub fn policy_table(&mut self) -> PolicyTable {
        let rows = (0..self.mdp.num_states())
            .map(|s| self.actor_terms(s).probs.clone())
            .collect();
        PolicyTable::new(rows).expect("softmax rows are normalized")
    }

    /// Expectations of [`Self::sampled`] under `π(θ, z₁)`, by enumeration.
    pub fn exact(&mut self) -> Result<GradientEstimate> {
        let table = self.policy_table();
        let trajectories = enumerate_trajectories(self.mdp, &table)?;
        let mut est = GradientEstimate {
            loss_h: 0.0,
            loss_g: 0.0,
            h: ParamVector::zeros(&self.theta.shape),
            f: ParamVector::zeros(&self.omega.shape),
        };
        for (tau, p) in &trajectories {
            est.loss_h += p * self.policy_loss(tau);
            est.loss_g += p * self.critic_loss(tau);
            self.add_policy_grad(tau, *p, &mut est.h.values);
            self.add_critic_grad(tau, *p, &mut est.f.values);
        }
        Ok(est)
    }

    /// Critic loss and gradient averaged over weighted trajectories.
    pub fn critic_over(&mut self, trajectories: &[(Trajectory, f64)]) -> (f64, ParamVector) {
        let mut loss = 0.0;
        let mut f = ParamVector::zeros(&self.omega.shape);
        for (tau, p) in trajectories {
            loss += p * self.critic_loss(tau);
            self.add_critic_grad(tau, *p, &mut f.values);
        }
        (loss, f)
    }

    /// One trajectory from `π(θ, z₁)`.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> Trajectory {
        let m = self.model;
        let policy = FnPolicy(|s| m.actor.action_distribution(self.theta, s, self.z.z1_now));
        simulate_trajectory(self.mdp, &policy, rng)
    }
}

/// `E_τ[−G₀ + z₂ ρ(τ)]`.
pub fn ppo_policy_loss_exact(
    model: &PpoModel,
    mdp: &Mdp,
    theta: &ParamVector,
    omega: &ParamVector,
    z: &ControlState,
) -> Result<f64> {
    Ok(model.at(mdp, theta, omega, z).exact()?.loss_h)
}

/// Exact actor gradient `h`.
pub fn ppo_policy_grad_exact(
    model: &PpoModel,
    mdp: &Mdp,
    theta: &ParamVector,
    omega: &ParamVector,
    z: &ControlState,
) -> Result<ParamVector> {
    Ok(model.at(mdp, theta, omega, z).exact()?.h)
}

pub fn ppo_policy_grad_sampled(
    model: &PpoModel,
    mdp: &Mdp,
    theta: &ParamVector,
    omega: &ParamVector,
    z: &ControlState,
    tau: &Trajectory,
) -> ParamVector {
    model.at(mdp, theta, omega, z).policy_grad(tau)
}

/// Sampled critic gradient with the model's critic mode.
pub fn critic_grad_sampled(
    model: &PpoModel,
    mdp: &Mdp,
    theta: &ParamVector,
    omega: &ParamVector,
    z: &ControlState,
    tau: &Trajectory,
) -> ParamVector {
    model.at(mdp, theta, omega, z).critic_grad(tau)
}

/// Exact critic loss and gradient with the model's critic mode.
pub fn critic_exact(
    model: &PpoModel,
    mdp: &Mdp,
    theta: &ParamVector,
    omega: &ParamVector,
    z: &ControlState,
) -> Result<(f64, ParamVector)> {
    let est = model.at(mdp, theta, omega, z).exact()?;
    Ok((est.loss_g, est.f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{finite_diff_gradient, relative_error, Activation};
    use crate::control::{ControlConfig, ControlState};
    use crate::library::{chain5, random_layered, RandomMdpSpec};
    use crate::mdp::{exact_q_values, MdpBuilder, Initial};
    use crate::sampling::rng_stream;

    fn tabular_model(mdp: &Mdp, mode: CriticMode) -> PpoModel {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let actor = SoftmaxPolicy::new(
            Network::mlp(ns, &[6], na, Activation::Tanh).unwrap(),
            ns,
            na,
        )
        .unwrap();
        PpoModel::new(actor, Network::mlp(ns, &[], na, Activation::Tanh).unwrap(), mode).unwrap()
    }

    /// Linear critic weights reproducing a Q table exactly.
    fn plant_q(model: &PpoModel, q: &[Vec<f64>]) -> ParamVector {
        let ns = model.actor.num_states();
        let mut omega = model.critic.zeros();
        for (s, row) in q.iter().enumerate() {
            for (a, &v) in row.iter().enumerate() {
                omega.values[a * ns + s] = v;
            }
        }
        omega
    }

    fn random_point(seed: u64, mode: CriticMode) -> (Mdp, PpoModel, ParamVector, ParamVector, ControlState) {
        let mut rng = rng_stream(seed, 0);
        let mdp = random_layered(&mut rng, RandomMdpSpec::default());
        let model = tabular_model(&mdp, mode);
        let theta = model.actor.net().init_uniform(&mut rng, 0.5);
        let omega = model.critic.init_uniform(&mut rng, 0.5);
        let mut z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        z.z1_now = rng.random_range(1.0..3.0);
        z.z1_prev = rng.random_range(1.0..3.0);
        z.z2_now = rng.random_range(0.0..1.0);
        z.theta_prev = model.actor.net().init_uniform(&mut rng, 0.5);
        z.omega_prev = model.critic.init_uniform(&mut rng, 0.5);
        (mdp, model, theta, omega, z)
    }

    #[test]
    fn deterministic_mdp_loss_is_negative_return() {
        let mdp = chain5();
        let model = tabular_model(&mdp, CriticMode::Mc);
        let theta = model.actor.net().zeros();
        let omega = model.critic.zeros();
        let mut z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        z.z2_now = 0.0;
        // uniform policy: expected final position of a floored random walk
        let table = model.policy_table(&theta, 1.0);
        let expected: f64 = enumerate_trajectories(&mdp, &table)
            .unwrap()
            .iter()
            .map(|(t, p)| p * t.total_return())
            .sum();
        let loss = ppo_policy_loss_exact(&model, &mdp, &theta, &omega, &z).unwrap();
        assert!((loss + expected).abs() < 1e-12);
    }

    #[test]
    fn zero_rewards_and_no_drift_give_zero_loss() {
        let mut b = MdpBuilder::new(2, 1);
        let s0 = b.add_state(0);
        let s1 = b.add_state(1);
        for a in 0..2 {
            b.add_edge(s0, a, Some(s1), 0.0, 1.0).unwrap();
            b.add_edge(s1, a, None, 0.0, 1.0).unwrap();
        }
        b.initial(Initial::Distribution(vec![(s0, 1.0)])).reward_bound(1.0);
        let mdp = b.build().unwrap();
        let model = tabular_model(&mdp, CriticMode::Td);
        let mut rng = rng_stream(1, 0);
        let theta = model.actor.net().init_uniform(&mut rng, 0.3);
        let omega = model.critic.zeros();
        let z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        let est = model.at(&mdp, &theta, &omega, &z).exact().unwrap();
        assert!(est.loss_h.abs() < 1e-15);
        assert_eq!(est.loss_g, 0.0);
        assert_eq!(est.f.norm(), 0.0);
    }

    #[test]
    fn constant_critic_has_no_advantage() {
        let (mdp, model, theta, _, mut z) = random_point(4, CriticMode::Mc);
        z.z2_now = 0.0;
        let mut omega = model.critic.zeros();
        let ns = mdp.num_states();
        for a in 0..mdp.num_actions() {
            omega.values[ns * mdp.num_actions() + a] = 2.5;
        }
        let h = ppo_policy_grad_exact(&model, &mdp, &theta, &omega, &z).unwrap();
        assert!(h.norm() < 1e-12);
    }

    #[test]
    fn exact_gradient_is_mean_of_sampled() {
        let (mdp, model, theta, omega, z) = random_point(5, CriticMode::Td);
        let mut point = model.at(&mdp, &theta, &omega, &z);
        let exact = point.exact().unwrap();
        let table = point.policy_table();
        let mut mean_h = ParamVector::zeros(&theta.shape);
        let mut mean_f = ParamVector::zeros(&omega.shape);
        for (tau, p) in enumerate_trajectories(&mdp, &table).unwrap() {
            mean_h.axpy(p, &point.policy_grad(&tau));
            mean_f.axpy(p, &point.critic_grad(&tau));
        }
        assert!(relative_error(&mean_h.values, &exact.h.values) < 1e-12);
        assert!(relative_error(&mean_f.values, &exact.f.values) < 1e-12);
    }

    #[test]
    fn actor_gradient_matches_finite_differences_with_exact_critic() {
        for seed in 0..10 {
            let (mdp, model, theta, _, z) = random_point(100 + seed, CriticMode::Mc);
            let table = model.policy_table(&theta, z.z1_now);
            let omega = plant_q(&model, &exact_q_values(&mdp, &table).q);
            let h = ppo_policy_grad_exact(&model, &mdp, &theta, &omega, &z).unwrap();
            let fd = finite_diff_gradient(
                |th| ppo_policy_loss_exact(&model, &mdp, th, &omega, &z).unwrap(),
                &theta,
                1e-5,
            );
            let err = relative_error(&h.values, &fd.values);
            assert!(err < 1e-5 || h.norm() < 1e-9, "seed {seed}: {err}");
        }
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        for mode in [CriticMode::Td, CriticMode::Mc] {
            for seed in 0..10 {
                let (mdp, model, theta, omega, z) = random_point(200 + seed, mode);
                let (_, f) = critic_exact(&model, &mdp, &theta, &omega, &z).unwrap();
                let fd = finite_diff_gradient(
                    |om| critic_exact(&model, &mdp, &theta, om, &z).unwrap().0,
                    &omega,
                    1e-5,
                );
                assert!(relative_error(&f.values, &fd.values) < 1e-5, "{mode:?} seed {seed}");
            }
        }
    }

    #[test]
    fn td_errors_vanish_at_bellman_solution() {
        let mdp = chain5();
        let model = tabular_model(&mdp, CriticMode::Td);
        let theta = model.actor.net().zeros();
        let table = model.policy_table(&theta, 1.0);
        let omega = plant_q(&model, &exact_q_values(&mdp, &table).q);
        let z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        // deterministic policy so every sampled TD error is zero
        let greedy = PolicyTable::deterministic(&vec![1; mdp.num_states()], 2);
        let omega = plant_q(&model, &exact_q_values(&mdp, &greedy).q);
        let z = z.with_history(&theta, &omega);
        let tau = simulate_trajectory(&mdp, &greedy, &mut rng_stream(0, 1));
        let f = critic_grad_sampled(&model, &mdp, &theta, &omega, &z, &tau);
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn mc_critic_on_realized_returns_has_zero_gradient() {
        let mdp = chain5();
        let model = tabular_model(&mdp, CriticMode::Mc);
        let theta = model.actor.net().zeros();
        let greedy = PolicyTable::deterministic(&vec![1; mdp.num_states()], 2);
        let omega = plant_q(&model, &exact_q_values(&mdp, &greedy).q);
        let z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        let tau = simulate_trajectory(&mdp, &greedy, &mut rng_stream(0, 1));
        assert_eq!(critic_grad_sampled(&model, &mdp, &theta, &omega, &z, &tau).norm(), 0.0);
    }

    #[test]
    fn mc_constant_critic_on_zero_rewards() {
        let mut b = MdpBuilder::new(2, 1);
        let s0 = b.add_state(0);
        let s1 = b.add_state(1);
        for a in 0..2 {
            b.add_edge(s0, a, Some(s1), 0.0, 1.0).unwrap();
            b.add_edge(s1, a, None, 0.0, 1.0).unwrap();
        }
        b.initial(Initial::Distribution(vec![(s0, 1.0)])).reward_bound(1.0);
        let mdp = b.build().unwrap();
        let model = tabular_model(&mdp, CriticMode::Mc);
        let theta = model.actor.net().zeros();
        let mut omega = model.critic.zeros();
        let c = 0.7;
        for a in 0..2 {
            omega.values[4 + a] = c;
        }
        let z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        let tau = simulate_trajectory(&mdp, &PolicyTable::uniform(2, 2), &mut rng_stream(2, 1));
        let f = critic_grad_sampled(&model, &mdp, &theta, &omega, &z, &tau);
        let mut expected = model.critic.zeros();
        for st in &tau.steps {
            let g = model
                .critic
                .backward(&omega, &one_hot(st.state, 2), &one_hot(st.action, 2))
                .unwrap();
            expected.axpy(c, &g);
        }
        assert!(relative_error(&f.values, &expected.values) < 1e-14);
    }

    #[test]
    fn single_action_has_no_score_term() {
        let mut rng = rng_stream(8, 0);
        let mdp = loop {
            let m = random_layered(&mut rng, RandomMdpSpec::default());
            if m.num_actions() == 1 {
                break m;
            }
        };
        let model = tabular_model(&mdp, CriticMode::Mc);
        let theta = model.actor.net().init_uniform(&mut rng, 0.5);
        let omega = model.critic.init_uniform(&mut rng, 0.5);
        let mut z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        z.z2_now = 0.0;
        let h = ppo_policy_grad_exact(&model, &mdp, &theta, &omega, &z).unwrap();
        assert_eq!(h.norm(), 0.0);
    }

    #[test]
    fn state_only_baseline_has_zero_expected_score_term() {
        for seed in 0..5 {
            let (mdp, model, theta, _, z) = random_point(300 + seed, CriticMode::Mc);
            let mut rng = rng_stream(seed, 9);
            let c: Vec<f64> = (0..mdp.num_states()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let table = model.policy_table(&theta, z.z1_now);
            let mut total = ParamVector::zeros(&theta.shape);
            for (tau, p) in enumerate_trajectories(&mdp, &table).unwrap() {
                for st in &tau.steps[mdp.first_policy_step()..] {
                    let g = model.actor.log_policy_gradient(&theta, st.state, st.action, z.z1_now);
                    total.axpy(p * c[st.state], &g);
                }
            }
            assert!(total.norm() < 1e-10, "seed {seed}: {}", total.norm());
        }
    }
}
