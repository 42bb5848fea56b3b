//! Slope-controlled softmax policies and the smoothed KL trust region.

use crate::approximator::{Network, ParamVector};
use crate::error::{Error, Result};
use crate::mdp::{ActionId, PolicyTable, StateId, Trajectory};

/// Default smoothing for [`kl_smoothed`].
pub const DEFAULT_KL_EPS: f64 = 1e-3;

/// `softmax(slope * scores)`, computed with the max shift.
pub fn softmax(scores: &[f64], slope: f64) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out: Vec<f64> = scores.iter().map(|&x| (slope * (x - max)).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `log softmax(slope * scores)` straight from the shifted logits.
pub fn log_softmax(scores: &[f64], slope: f64) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let shifted: Vec<f64> = scores.iter().map(|&x| slope * (x - max)).collect();
    let log_z = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.iter().map(|v| v - log_z).collect()
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Policy `π(a | s; θ, z₁) ∝ exp(z₁ ψ^a(s; θ))` over one-hot encoded states.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxPolicy {
    net: Network,
    num_states: usize,
    num_actions: usize,
}

impl SoftmaxPolicy {
    pub fn new(net: Network, num_states: usize, num_actions: usize) -> Result<Self> {
        if net.input_dim() != num_states {
            return Err(Error::ShapeMismatch {
                expected: num_states,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != num_actions {
            return Err(Error::ShapeMismatch {
                expected: num_actions,
                got: net.output_dim(),
            });
        }
        Ok(SoftmaxPolicy {
            net,
            num_states,
            num_actions,
        })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn encode(&self, s: StateId) -> Vec<f64> {
        one_hot(s, self.num_states)
    }

    /// `ψ(s; θ)`.
    pub fn scores(&self, params: &ParamVector, s: StateId) -> Vec<f64> {
        self.net
            .forward(params, &self.encode(s))
            .expect("policy network shape checked at construction")
    }

    pub fn action_distribution(&self, params: &ParamVector, s: StateId, slope: f64) -> Vec<f64> {
        softmax(&self.scores(params, s), slope)
    }

    /// `∇_θ log π(a | s) = z₁ (∇ψ^a − Σ_j π_j ∇ψ^j)`.
    pub fn log_policy_gradient(
        &self,
        params: &ParamVector,
        s: StateId,
        a: ActionId,
        slope: f64,
    ) -> ParamVector {
        let input = self.encode(s);
        let trace = self.net.trace(&params.values, &input);
        let probs = softmax(trace.output(), slope);
        let cot: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &p)| slope * (f64::from(j == a) - p))
            .collect();
        let mut grad = self.net.zeros();
        self.net
            .accumulate_backward(&params.values, &trace, &cot, &mut grad.values);
        grad
    }

    pub fn table(&self, params: &ParamVector, slope: f64) -> PolicyTable {
        let rows = (0..self.num_states)
            .map(|s| self.action_distribution(params, s, slope))
            .collect();
        PolicyTable::new(rows).expect("softmax rows are normalized")
    }

    /// Argmax of `ψ(s; ·)` per state (ties go to the lowest index).
    pub fn greedy_actions(&self, params: &ParamVector) -> Vec<ActionId> {
        (0..self.num_states)
            .map(|s| argmax(&self.scores(params, s)))
            .collect()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn smooth(p: f64, eps: f64, k: usize) -> f64 {
    (p + eps) / (1.0 + k as f64 * eps)
}

/// `KL(p̃ ‖ q̃)` with `p̃ᵢ = (pᵢ + ε) / (1 + kε)`.
pub fn kl_smoothed(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(p.len(), q.len()));
    }
    let k = p.len();
    let kl = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let (ps, qs) = (smooth(pi, eps, k), smooth(qi, eps, k));
            ps * (ps.ln() - qs.ln())
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Gradient of `KL_ε(p, softmax(z₁ ψ))` with respect to `ψ`, given `q = softmax(z₁ ψ)`.
pub fn kl_smoothed_score_cotangent(p: &[f64], q: &[f64], eps: f64, slope: f64) -> Vec<f64> {
    let k = p.len();
    let weights: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| smooth(pi, eps, k) * qi / (qi + eps))
        .collect();
    let total: f64 = weights.iter().sum();
    q.iter()
        .zip(&weights)
        .map(|(&qj, &wj)| slope * (-wj + qj * total))
        .collect()
}

/// A policy together with the parameters and slope it is evaluated at.
#[derive(Clone, Copy, Debug)]
pub struct PolicySnapshot<'a> {
    pub policy: &'a SoftmaxPolicy,
    pub params: &'a ParamVector,
    pub slope: f64,
}

/// `ρ(τ) = Σ_t KL_ε(π_old(·|s_t), π_new(·|s_t)) + c ‖θ_new‖²`.
pub fn trajectory_trust_region(
    old: PolicySnapshot<'_>,
    new: PolicySnapshot<'_>,
    tau: &Trajectory,
    eps: f64,
    weight_decay: f64,
) -> f64 {
    let kl: f64 = tau
        .steps
        .iter()
        .map(|step| {
            let p = old.policy.action_distribution(old.params, step.state, old.slope);
            let q = new.policy.action_distribution(new.params, step.state, new.slope);
            kl_smoothed(&p, &q, eps).expect("same action space")
        })
        .sum();
    kl + weight_decay * new.params.norm_sq()
}

/// Gradient of [`trajectory_trust_region`] with respect to the new parameters.
pub fn trajectory_trust_region_grad(
    old: PolicySnapshot<'_>,
    new: PolicySnapshot<'_>,
    tau: &Trajectory,
    eps: f64,
    weight_decay: f64,
) -> ParamVector {
    let net = new.policy.net();
    let mut grad = net.zeros();
    for step in &tau.steps {
        let p = old.policy.action_distribution(old.params, step.state, old.slope);
        let trace = net.trace(&new.params.values, &new.policy.encode(step.state));
        let q = softmax(trace.output(), new.slope);
        let cot = kl_smoothed_score_cotangent(&p, &q, eps, new.slope);
        net.accumulate_backward(&new.params.values, &trace, &cot, &mut grad.values);
    }
    grad.axpy(2.0 * weight_decay, new.params);
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{finite_diff_gradient, relative_error, Activation};
    use crate::mdp::Step;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_scores_give_uniform() {
        for slope in [1.0, 3.0, 50.0] {
            assert_eq!(softmax(&[0.0, 0.0], slope), vec![0.5, 0.5]);
        }
    }

    #[test]
    fn ln3_slope_gives_three_to_one() {
        let p = softmax(&[1.0, 0.0], 3f64.ln());
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn kl_closed_form() {
        let kl = kl_smoothed(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert!((kl - 2f64.ln() / 3.0).abs() < 1e-15);
        assert!((kl - 0.23105).abs() < 1e-5);
        assert_eq!(kl_smoothed(&[0.3, 0.7], &[0.3, 0.7], 1e-3).unwrap(), 0.0);
        assert!(matches!(
            kl_smoothed(&[1.0], &[0.5, 0.5], 0.1),
            Err(Error::DimensionMismatch(1, 2))
        ));
    }

    fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let t: f64 = raw.iter().sum();
        raw.iter().map(|x| x / t).collect()
    }

    #[test]
    fn smoothed_kl_below_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = rng.random_range(2..6);
            let p = random_dist(&mut rng, k);
            let q = random_dist(&mut rng, k);
            let direct: f64 = p
                .iter()
                .zip(&q)
                .map(|(a, b): (&f64, &f64)| if *a > 0.0 { a * (a / b.max(1e-300)).ln() } else { 0.0 })
                .sum();
            let smoothed = kl_smoothed(&p, &q, 1e-3).unwrap();
            assert!(smoothed >= 0.0);
            assert!(smoothed <= direct + 1e-12);
        }
    }

    fn policy(rng: &mut ChaCha8Rng, states: usize, actions: usize) -> (SoftmaxPolicy, ParamVector) {
        let net = Network::mlp(states, &[6], actions, Activation::Tanh).unwrap();
        let params = net.init_uniform(rng, 1.0);
        (SoftmaxPolicy::new(net, states, actions).unwrap(), params)
    }

    #[test]
    fn score_function_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (pol, theta) = policy(&mut rng, 4, 3);
        for s in 0..4 {
            let probs = pol.action_distribution(&theta, s, 2.5);
            let mut mean = pol.net().zeros();
            for (a, &p) in probs.iter().enumerate() {
                mean.axpy(p, &pol.log_policy_gradient(&theta, s, a, 2.5));
            }
            assert!(mean.norm() < 1e-12);
        }
    }

    #[test]
    fn single_action_log_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (pol, theta) = policy(&mut rng, 3, 1);
        assert_eq!(pol.log_policy_gradient(&theta, 1, 0, 4.0).norm(), 0.0);
    }

    #[test]
    fn log_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (pol, theta) = policy(&mut rng, 4, 3);
            let s = rng.random_range(0..4);
            let a = rng.random_range(0..3);
            let slope = rng.random_range(1.0..4.0);
            let g = pol.log_policy_gradient(&theta, s, a, slope);
            let fd = finite_diff_gradient(
                |p| log_softmax(&pol.scores(p, s), slope)[a],
                &theta,
                1e-5,
            );
            assert!(relative_error(&g.values, &fd.values) < 1e-5);
        }
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, states: usize, len: usize) -> Trajectory {
        Trajectory {
            steps: (0..len)
                .map(|_| Step {
                    state: rng.random_range(0..states),
                    action: 0,
                    reward: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn trust_region_zero_for_identical_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (pol, theta) = policy(&mut rng, 4, 3);
        let tau = random_trajectory(&mut rng, 4, 5);
        let snap = PolicySnapshot { policy: &pol, params: &theta, slope: 2.0 };
        assert_eq!(trajectory_trust_region(snap, snap, &tau, 1e-3, 0.0), 0.0);
        let empty = Trajectory::default();
        let wd = trajectory_trust_region(snap, snap, &empty, 1e-3, 0.3);
        assert!((wd - 0.3 * theta.norm_sq()).abs() < 1e-12);
    }

    #[test]
    fn trust_region_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let (pol, theta_old) = policy(&mut rng, 4, 3);
            let theta_new = pol.net().init_uniform(&mut rng, 1.0);
            let tau = random_trajectory(&mut rng, 4, 4);
            let (s_old, s_new) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
            let old = PolicySnapshot { policy: &pol, params: &theta_old, slope: s_old };
            let new = PolicySnapshot { policy: &pol, params: &theta_new, slope: s_new };
            let g = trajectory_trust_region_grad(old, new, &tau, 1e-3, 0.01);
            let fd = finite_diff_gradient(
                |p| {
                    let n = PolicySnapshot { policy: &pol, params: p, slope: s_new };
                    trajectory_trust_region(old, n, &tau, 1e-3, 0.01)
                },
                &theta_new,
                1e-5,
            );
            assert!(relative_error(&g.values, &fd.values) < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(scores in prop::collection::vec(-5.0f64..5.0, 2..6), c in -10.0f64..10.0, slope in 1.0f64..20.0) {
            let shifted: Vec<f64> = scores.iter().map(|x| x + c).collect();
            let a = softmax(&scores, slope);
            let b = softmax(&shifted, slope);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|&p| p > 0.0));
        }

        #[test]
        fn slope_preserves_ranking(scores in prop::collection::vec(-5.0f64..5.0, 2..6), slope in 1.0f64..50.0) {
            prop_assert_eq!(argmax(&softmax(&scores, slope)), argmax(&scores));
        }

        #[test]
        fn greediness_inequality(gap in 0.1f64..2.0, extra in prop::collection::vec(0.0f64..3.0, 1..5), beta in 1.0f64..30.0) {
            // best action scored 0, others at most -gap
            let mut scores = vec![0.0];
            scores.extend(extra.iter().map(|e| -gap - e));
            let p = softmax(&scores, beta);
            // compare the mass off the best action to avoid rounding 1 - tiny
            let off: f64 = p[1..].iter().sum();
            prop_assert!(off < (scores.len() as f64 - 1.0) * (-beta * gap).exp());
        }

        #[test]
        fn kl_definite(p in prop::collection::vec(0.0f64..1.0, 3), q in prop::collection::vec(0.0f64..1.0, 3)) {
            let norm = |v: &Vec<f64>| { let t: f64 = v.iter().sum::<f64>() + 1e-9; v.iter().map(|x| (x + 1e-9 / 3.0) / t).collect::<Vec<_>>() };
            let (p, q) = (norm(&p), norm(&q));
            let kl = kl_smoothed(&p, &q, 1e-3).unwrap();
            prop_assert!(kl >= 0.0);
            let max_diff = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if max_diff > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
