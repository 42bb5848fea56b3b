//! Executable checks of the assumptions behind two-timescale convergence and
//! of the greediness lemma.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::{finite_diff_gradient, relative_error, ParamVector};
use crate::control::{greediness_beta, ControlState};
use crate::error::{Error, Result};
use crate::mdp::{
    enumerate_prefixes, enumerate_trajectories, exact_q_values, optimal_policy, ActionProbabilities,
    Initial, Mdp, PolicyTable,
};
use crate::policy::{argmax, softmax, SoftmaxPolicy};
use crate::sampling::{rng_stream, STREAM_BEHAVIORAL, STREAM_DIAGNOSTIC};
use crate::trainer::{validate_schedule, LearningRateSchedule, Model, RunRecord, ScheduleDiagnosis};

/// Largest `|E_τ[R_{t+1}] − E_{τ_{0,t}}[r(s_t, a_t)]|` over `t`, with the left
/// side from full trajectories and the right side from prefixes.
pub fn check_causality<P>(mdp: &Mdp, policy: &P) -> Result<f64>
where
    P: ActionProbabilities + ?Sized,
{
    let full = enumerate_trajectories(mdp, policy)?;
    let mut worst: f64 = 0.0;
    for t in 0..=mdp.horizon() {
        let lhs: f64 = full.iter().map(|(tau, p)| p * tau.steps[t].reward).sum();
        let rhs: f64 = enumerate_prefixes(mdp, policy, t)?
            .iter()
            .map(|(prefix, p)| {
                let (s, a) = prefix[t];
                p * mdp.expected_reward(s, a)
            })
            .sum();
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// The three exact forms of `∇_θ E[−G₀]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyGradientReport {
    pub finite_difference: Vec<f64>,
    pub score_times_return: Vec<f64>,
    pub score_times_q: Vec<f64>,
    /// Relative deviation between the two score forms.
    pub return_vs_q: f64,
    /// Largest relative deviation of either score form from finite differences.
    pub score_vs_fd: f64,
}

impl PolicyGradientReport {
    pub fn max_deviation(&self) -> f64 {
        self.return_vs_q.max(self.score_vs_fd)
    }
}

/// `E[G₀]` under a policy, by backward induction.
pub fn expected_return<P>(mdp: &Mdp, policy: &P) -> f64
where
    P: ActionProbabilities + ?Sized,
{
    let values = exact_q_values(mdp, policy);
    match mdp.initial() {
        Initial::Fixed { state, action } => values.q[*state][*action],
        Initial::Distribution(dist) => dist.iter().map(|&(s, p)| p * values.v[s]).sum(),
    }
}

pub fn check_policy_gradient_theorem(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    theta: &ParamVector,
    slope: f64,
) -> Result<PolicyGradientReport> {
    let table = policy.table(theta, slope);
    let trajectories = enumerate_trajectories(mdp, &table)?;
    let q = exact_q_values(mdp, &table).q;
    let start = mdp.first_policy_step();

    let fd = finite_diff_gradient(
        |p| -expected_return(mdp, &policy.table(p, slope)),
        theta,
        1e-5,
    );
    let mut by_return = ParamVector::zeros(&theta.shape);
    let mut by_q = ParamVector::zeros(&theta.shape);
    for (tau, prob) in &trajectories {
        let to_go = tau.returns_to_go();
        for (t, step) in tau.steps.iter().enumerate().skip(start) {
            let score = policy.log_policy_gradient(theta, step.state, step.action, slope);
            by_return.axpy(-prob * to_go[t], &score);
            by_q.axpy(-prob * q[step.state][step.action], &score);
        }
    }
    Ok(PolicyGradientReport {
        return_vs_q: relative_error(&by_return.values, &by_q.values),
        score_vs_fd: relative_error(&by_return.values, &fd.values)
            .max(relative_error(&by_q.values, &fd.values)),
        finite_difference: fd.values,
        score_times_return: by_return.values,
        score_times_q: by_q.values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedinessReport {
    /// Half the smallest score gap between the optimal and any other action.
    /// `None` when there is a single action.
    pub delta: Option<f64>,
    /// Half the smallest optimal action-value gap.
    pub epsilon: Option<f64>,
    pub beta_required: f64,
    pub beta_used: f64,
    pub q_deviation: f64,
    pub argmax_correct: Vec<bool>,
    /// `max |q^{π*} − q^π| < ε/2`.
    pub deviation_ok: bool,
    /// `π(a* | s) > 1 − (|A|−1) e^{−βδ}` at every state.
    pub optimal_prob_ok: bool,
    /// `|∏π* − ∏π| < k (|A|−1) e^{−βδ}` on every trajectory, `k` policy factors.
    pub product_bound_ok: bool,
    /// Single-action MDP: nothing to check.
    pub trivial: bool,
}

impl GreedinessReport {
    pub fn passed(&self) -> bool {
        self.trivial
            || (self.deviation_ok
                && self.optimal_prob_ok
                && self.product_bound_ok
                && self.argmax_correct.iter().all(|&c| c))
    }
}

/// Sets the slope to `beta_factor` times the required bound (`beta_factor > 1`)
/// and verifies the conclusions of the greediness lemma by enumeration.
pub fn check_greediness(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    theta: &ParamVector,
    beta_factor: f64,
) -> Result<GreedinessReport> {
    let scores: Vec<Vec<f64>> = (0..mdp.num_states()).map(|s| policy.scores(theta, s)).collect();
    greediness_from_scores(mdp, &scores, beta_factor)
}

/// [`check_greediness`] for a trained model's actor.
pub fn check_model_greediness(
    model: &Model,
    mdp: &Mdp,
    theta: &ParamVector,
    beta_factor: f64,
) -> Result<GreedinessReport> {
    greediness_from_scores(mdp, &model.scores(theta), beta_factor)
}

/// The softmax of `slope · scores[s]` is the policy under test.
pub fn greediness_from_scores(mdp: &Mdp, scores: &[Vec<f64>], beta_factor: f64) -> Result<GreedinessReport> {
    if !(beta_factor > 1.0) {
        return Err(Error::Config(format!(
            "beta factor must exceed 1, got {beta_factor}"
        )));
    }
    if scores.len() != mdp.num_states() {
        return Err(Error::DimensionMismatch(scores.len(), mdp.num_states()));
    }
    let opt = optimal_policy(mdp);
    if let Some(state) = opt.unique.iter().position(|&u| !u) {
        return Err(Error::NonUniqueOptimum { state });
    }
    let na = mdp.num_actions();
    let ns = mdp.num_states();
    if na == 1 {
        return Ok(GreedinessReport {
            delta: None,
            epsilon: None,
            beta_required: 0.0,
            beta_used: 0.0,
            q_deviation: 0.0,
            argmax_correct: vec![true; ns],
            deviation_ok: true,
            optimal_prob_ok: true,
            product_bound_ok: true,
            trivial: true,
        });
    }

    let mut psi_gap = f64::INFINITY;
    for (s, row) in scores.iter().enumerate() {
        let best = opt.actions[s];
        for (a, &x) in row.iter().enumerate() {
            if a != best {
                let gap = row[best] - x;
                if !(gap > 0.0) {
                    return Err(Error::NotYetGreedy { state: s });
                }
                psi_gap = psi_gap.min(gap);
            }
        }
    }
    let delta = 0.5 * psi_gap;
    let epsilon = 0.5 * opt.min_gap().expect("at least two actions");
    let beta_required = greediness_beta(
        na,
        ns,
        mdp.horizon(),
        mdp.reward_bound(),
        delta,
        epsilon,
    )?;
    // slopes live in [1, β]; a bound below 1 (e.g. T = 0) is met by any of them
    let beta = beta_factor * beta_required.max(1.0);

    let table = PolicyTable::new(scores.iter().map(|row| softmax(row, beta)).collect())?;
    let q = exact_q_values(mdp, &table).q;
    let mut q_deviation: f64 = 0.0;
    for s in 0..ns {
        for a in 0..na {
            q_deviation = q_deviation.max((opt.values.q[s][a] - q[s][a]).abs());
        }
    }
    let argmax_correct: Vec<bool> = (0..ns).map(|s| argmax(&q[s]) == opt.actions[s]).collect();

    let others = (na - 1) as f64;
    let tail = others * (-beta * delta).exp();
    // compare the off-optimal mass: 1 − tiny rounds to 1, and the bound may underflow
    let below = |x: f64, bound: f64| x == 0.0 || x < bound;
    let optimal_prob_ok = (0..ns).all(|s| {
        let row = table.row(s);
        let off: f64 = (0..na).filter(|&a| a != opt.actions[s]).map(|a| row[a]).sum();
        below(off, tail)
    });

    let start = mdp.first_policy_step();
    let factors = (mdp.horizon() + 1 - start) as f64;
    let mut product_bound_ok = true;
    for (tau, _) in enumerate_trajectories(mdp, &table)? {
        let (mut learned, mut optimal) = (1.0, 1.0);
        for step in &tau.steps[start..] {
            learned *= table.row(step.state)[step.action];
            optimal *= opt.policy.row(step.state)[step.action];
        }
        if factors > 0.0 && !below((optimal - learned).abs(), factors * tail) {
            product_bound_ok = false;
        }
    }

    Ok(GreedinessReport {
        delta: Some(delta),
        epsilon: Some(epsilon),
        beta_required,
        beta_used: beta,
        q_deviation,
        argmax_correct,
        deviation_ok: q_deviation < epsilon / 2.0,
        optimal_prob_ok,
        product_bound_ok,
        trivial: false,
    })
}

/// Slope from the greediness bound for an actor whose scores rank actions
/// like `q*`, taking both the score gap and the Q gap to be half the smallest
/// optimal Q gap, with a 5% margin. `None` when the oracle cannot supply the
/// gaps (ties, a single action) or the bound does not exceed 1.
pub fn default_beta(mdp: &Mdp) -> Option<f64> {
    let opt = optimal_policy(mdp);
    if !opt.is_unique() {
        return None;
    }
    let gap = 0.5 * opt.min_gap()?;
    let bound = greediness_beta(mdp.num_actions(), mdp.num_states(), mdp.horizon(), mdp.reward_bound(), gap, gap).ok()?;
    let beta = 1.05 * bound;
    (beta > 1.0 && beta.is_finite()).then_some(beta)
}

/// Mean-residual test for one gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean_norm: f64,
    pub max_component_std: f64,
    pub band: f64,
    pub max_sq_norm: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub samples: usize,
    pub actor: ResidualStats,
    pub critic: ResidualStats,
    /// With a single sample the spread is undefined and the test says nothing.
    pub vacuous: bool,
}

impl MartingaleReport {
    pub fn passed(&self) -> bool {
        self.actor.passed && self.critic.passed
    }

    /// Largest observed `‖m‖²` over both gradients.
    pub fn second_moment_max(&self) -> f64 {
        self.actor.max_sq_norm.max(self.critic.max_sq_norm)
    }
}

fn residual_stats(residuals: &[Vec<f64>]) -> ResidualStats {
    let n = residuals.len();
    let dim = residuals.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for r in residuals {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let mut max_std: f64 = 0.0;
    if n > 1 {
        for i in 0..dim {
            let var = residuals
                .iter()
                .map(|r| (r[i] - mean[i]).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            max_std = max_std.max(var.sqrt());
        }
    }
    let mean_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    let band = 4.0 * max_std * (dim as f64).sqrt() / (n as f64).sqrt();
    let max_sq_norm = residuals
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>())
        .fold(0.0, f64::max);
    ResidualStats {
        mean_norm,
        max_component_std: max_std,
        band,
        max_sq_norm,
        passed: n > 1 && mean_norm <= band,
    }
}

/// Draws `samples` independent gradient estimates at a fixed `(θ, ω, z)` and
/// tests the residuals against the exact gradients for zero mean.
pub fn check_martingale(
    model: &Model,
    mdp: &Mdp,
    theta: &ParamVector,
    omega: &ParamVector,
    z: &ControlState,
    samples: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    let exact = model.exact(mdp, theta, omega, z)?;
    let mut on = rng_stream(seed, STREAM_DIAGNOSTIC);
    let mut beh = rng_stream(seed ^ 0x9e37_79b9_7f4a_7c15, STREAM_BEHAVIORAL);
    let mut m1 = Vec::with_capacity(samples);
    let mut m2 = Vec::with_capacity(samples);
    for _ in 0..samples {
        let est = model.sampled(mdp, theta, omega, z, &mut on, &mut beh);
        m1.push(est.h.sub(&exact.h).values);
        m2.push(est.f.sub(&exact.f).values);
    }
    Ok(MartingaleReport {
        samples,
        actor: residual_stats(&m1),
        critic: residual_stats(&m2),
        vacuous: samples < 2,
    })
}

/// Uniform draw from the ball of radius `radius` around `center`.
pub fn sample_in_ball<R: Rng + ?Sized>(rng: &mut R, center: &ParamVector, radius: f64) -> ParamVector {
    let dim = center.len();
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = radius * rng.random::<f64>().powf(1.0 / dim.max(1) as f64);
    let mut out = center.clone();
    if norm > 0.0 {
        for (o, d) in out.values.iter_mut().zip(dir) {
            *o += r * d / norm;
        }
    }
    out
}

/// Largest `‖g(x) − g(y)‖ / ‖x − y‖` over `num_pairs` uniform pairs from the
/// ball. An observed lower bound on the Lipschitz constant, never the constant
/// itself. A fixed seed draws the same pairs, so the estimate only grows with
/// `num_pairs`.
pub fn estimate_lipschitz<G>(
    grad: G,
    center: &ParamVector,
    radius: f64,
    num_pairs: usize,
    seed: u64,
) -> f64
where
    G: Fn(&ParamVector) -> ParamVector,
{
    let mut rng = rng_stream(seed, STREAM_DIAGNOSTIC);
    let mut best: f64 = 0.0;
    for _ in 0..num_pairs {
        let x = sample_in_ball(&mut rng, center, radius);
        let y = sample_in_ball(&mut rng, center, radius);
        let dist = x.distance(&y);
        if dist > 0.0 {
            best = best.max(grad(&x).distance(&grad(&y)) / dist);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub lipschitz_estimate_h: f64,
    pub lipschitz_estimate_f: f64,
    pub noise_second_moment_max: f64,
    pub schedule_diagnosis: ScheduleDiagnosis,
    /// Iterates stayed inside the parameter ball without being projected.
    pub boundedness_ok: bool,
}

/// Joins `θ` and `ω` so a single ball covers both arguments.
fn join(theta: &ParamVector, omega: &ParamVector) -> ParamVector {
    let mut values = theta.values.clone();
    values.extend_from_slice(&omega.values);
    ParamVector::flat(values)
}

fn split(model: &Model, x: &ParamVector) -> (ParamVector, ParamVector) {
    let k = model.actor_net().num_params();
    let theta = ParamVector {
        shape: model.actor_net().zeros().shape,
        values: x.values[..k].to_vec(),
    };
    let omega = ParamVector {
        shape: model.critic_net().zeros().shape,
        values: x.values[k..].to_vec(),
    };
    (theta, omega)
}

/// Empirical counterparts of the step-size, Lipschitz, noise and boundedness
/// assumptions for a finished run. Exact gradients are evaluated at the final
/// control state over the ball of radius `radius` around the final iterate.
pub fn assumption_report(
    model: &Model,
    mdp: &Mdp,
    run: &RunRecord,
    schedule: &LearningRateSchedule,
    z: &ControlState,
    radius: f64,
    num_pairs: usize,
) -> Result<AssumptionReport> {
    mdp.check_enumerable()?;
    let center = join(&run.final_theta, &run.final_omega);
    let exact = |x: &ParamVector| {
        let (theta, omega) = split(model, x);
        model
            .exact(mdp, &theta, &omega, z)
            .expect("enumerability checked above")
    };
    let lipschitz_estimate_h = estimate_lipschitz(|x| exact(x).h, &center, radius, num_pairs, run.seed);
    let lipschitz_estimate_f = estimate_lipschitz(|x| exact(x).f, &center, radius, num_pairs, run.seed);
    let noise = run
        .max_noise_h_sq
        .unwrap_or(0.0)
        .max(run.max_noise_f_sq.unwrap_or(0.0));
    Ok(AssumptionReport {
        lipschitz_estimate_h,
        lipschitz_estimate_f,
        noise_second_moment_max: noise,
        schedule_diagnosis: validate_schedule(schedule),
        boundedness_ok: run.clamp_events == 0 && run.max_param_norm.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{Activation, Network};
    use crate::control::ControlConfig;
    use crate::library::{chain5, random_layered, random_policy, RandomMdpSpec};
    use crate::mdp::{MdpBuilder, PolicyTable};
    use crate::sampling::STREAM_INIT;
    use crate::trainer::{Algorithm, ModelConfig};

    fn tabular_policy(mdp: &Mdp) -> SoftmaxPolicy {
        let net = Network::mlp(mdp.num_states(), &[], mdp.num_actions(), Activation::Tanh).unwrap();
        SoftmaxPolicy::new(net, mdp.num_states(), mdp.num_actions()).unwrap()
    }

    /// Tabular scores with `ψ(s, right) − ψ(s, left) = gap`; weights are `W[a][s]`.
    fn chain_theta(gap: f64) -> ParamVector {
        let mut theta = tabular_policy(&chain5()).net().zeros();
        for s in 0..15 {
            theta.values[15 + s] = gap;
        }
        theta
    }

    #[test]
    fn default_beta_on_chain() {
        let mdp = chain5();
        // optimal Q gaps on the chain are all 1, so both gaps are 0.5
        let expected = 1.05 * greediness_beta(2, 15, 4, mdp.reward_bound(), 0.5, 0.5).unwrap();
        assert!((default_beta(&mdp).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bound_below_one_still_uses_a_valid_slope() {
        let mdp = crate::library::bandit();
        let r = greediness_from_scores(&mdp, &[vec![1.0, 0.0]], 1.05).unwrap();
        assert_eq!(r.beta_required, 0.0);
        assert_eq!(r.beta_used, 1.05);
        assert!(r.passed());
    }

    #[test]
    fn default_beta_unavailable() {
        assert_eq!(default_beta(&crate::library::bandit()), None);
        assert_eq!(default_beta(&single_action_chain()), None);
    }

    #[test]
    fn model_greediness_matches_policy_check() {
        let mdp = chain5();
        let model = Model::build(Algorithm::PpoMc, &mdp, &ModelConfig { hidden: 0, ..Default::default() }).unwrap();
        let Model::Ppo(ppo) = &model else { unreachable!() };
        let mut theta = ppo.actor.net().zeros();
        for (i, v) in theta.values.iter_mut().enumerate() {
            *v = if i >= 15 && i < 30 { 1.0 } else { 0.0 };
        }
        let a = check_model_greediness(&model, &mdp, &theta, 1.05).unwrap();
        let b = check_greediness(&mdp, &ppo.actor, &theta, 1.05).unwrap();
        assert_eq!(a, b);
    }

    fn single_action_chain() -> Mdp {
        let mut b = MdpBuilder::new(1, 2);
        let s: Vec<_> = (0..3).map(|t| b.add_state(t)).collect();
        b.add_edge(s[0], 0, Some(s[1]), 1.0, 0.5).unwrap();
        b.add_edge(s[0], 0, Some(s[1]), -1.0, 0.5).unwrap();
        b.add_edge(s[1], 0, Some(s[2]), 0.5, 1.0).unwrap();
        b.add_edge(s[2], 0, None, 2.0, 1.0).unwrap();
        b.initial(Initial::Distribution(vec![(s[0], 1.0)])).reward_bound(2.0);
        b.build().unwrap()
    }

    #[test]
    fn causality_on_random_instances() {
        let mut rng = rng_stream(21, STREAM_INIT);
        for _ in 0..40 {
            let mdp = random_layered(&mut rng, RandomMdpSpec::default());
            let policy = random_policy(&mut rng, mdp.num_states(), mdp.num_actions());
            assert!(check_causality(&mdp, &policy).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn causality_exact_on_deterministic_chain() {
        let mdp = chain5();
        let policy = PolicyTable::deterministic(&[1; 15], 2);
        assert_eq!(check_causality(&mdp, &policy).unwrap(), 0.0);
    }

    #[test]
    fn policy_gradient_forms_agree() {
        let mut rng = rng_stream(4, STREAM_INIT);
        for _ in 0..10 {
            let mdp = random_layered(&mut rng, RandomMdpSpec::default());
            let net = Network::mlp(mdp.num_states(), &[4], mdp.num_actions(), Activation::Tanh).unwrap();
            let policy = SoftmaxPolicy::new(net.clone(), mdp.num_states(), mdp.num_actions()).unwrap();
            let theta = net.init_uniform(&mut rng, 0.5);
            let report = check_policy_gradient_theorem(&mdp, &policy, &theta, 1.5).unwrap();
            assert!(report.return_vs_q <= 1e-8, "{report:?}");
            assert!(report.score_vs_fd <= 1e-4, "{report:?}");
        }
    }

    #[test]
    fn policy_gradient_vanishes_with_one_action() {
        let mdp = single_action_chain();
        let policy = tabular_policy(&mdp);
        let mut theta = policy.net().zeros();
        theta.values.fill(0.3);
        let report = check_policy_gradient_theorem(&mdp, &policy, &theta, 1.0).unwrap();
        for v in report
            .finite_difference
            .iter()
            .chain(&report.score_times_q)
            .chain(&report.score_times_return)
        {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn greediness_on_chain_with_known_gap() {
        let mdp = chain5();
        let policy = tabular_policy(&mdp);
        let report = check_greediness(&mdp, &policy, &chain_theta(1.0), 1.01).unwrap();
        assert_eq!(report.delta, Some(0.5));
        assert_eq!(report.epsilon, Some(0.5));
        let expected = greediness_beta(2, 15, 4, 5.0, 0.5, 0.5).unwrap();
        assert_eq!(report.beta_required, expected);
        assert!(report.passed(), "{report:?}");
        let margin = policy.action_distribution(&chain_theta(1.0), 0, report.beta_used)[1]
            - (1.0 - (-report.beta_used * 0.5).exp());
        assert!(margin > 0.0);
    }

    #[test]
    fn larger_slope_shrinks_deviation() {
        let mdp = chain5();
        let policy = tabular_policy(&mdp);
        // a small slope multiple keeps the deviation above float resolution
        let theta = chain_theta(0.02);
        let at_bound = check_greediness(&mdp, &policy, &theta, 1.0001).unwrap();
        let far = check_greediness(&mdp, &policy, &theta, 10.0).unwrap();
        assert!(far.q_deviation <= at_bound.q_deviation);
        assert!(at_bound.passed() && far.passed());
    }

    #[test]
    fn greediness_rejections() {
        let mdp = chain5();
        let policy = tabular_policy(&mdp);
        assert!(matches!(
            check_greediness(&mdp, &policy, &chain_theta(-0.1), 2.0),
            Err(Error::NotYetGreedy { state: 0 })
        ));
        let mut b = MdpBuilder::new(2, 0);
        let s = b.add_state(0);
        b.add_edge(s, 0, None, 1.0, 1.0).unwrap();
        b.add_edge(s, 1, None, 1.0, 1.0).unwrap();
        b.initial(Initial::Distribution(vec![(s, 1.0)])).reward_bound(1.0);
        let tie = b.build().unwrap();
        let policy = tabular_policy(&tie);
        assert!(matches!(
            check_greediness(&tie, &policy, &policy.net().zeros(), 2.0),
            Err(Error::NonUniqueOptimum { state: 0 })
        ));
    }

    #[test]
    fn single_action_is_trivial() {
        let mdp = single_action_chain();
        let policy = tabular_policy(&mdp);
        let report = check_greediness(&mdp, &policy, &policy.net().zeros(), 2.0).unwrap();
        assert!(report.trivial && report.delta.is_none() && report.passed());
    }

    fn chain_point(algorithm: Algorithm) -> (Model, Mdp, ParamVector, ParamVector, ControlState) {
        let mdp = chain5();
        let model = Model::build(algorithm, &mdp, &ModelConfig { hidden: 4, ..Default::default() }).unwrap();
        let (theta, omega) = model.init(3, 0.3);
        let z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        (model, mdp, theta, omega, z)
    }

    #[test]
    fn martingale_band_holds() {
        for algorithm in Algorithm::ALL {
            let (model, mdp, theta, omega, z) = chain_point(algorithm);
            let report = check_martingale(&model, &mdp, &theta, &omega, &z, 2000, 5).unwrap();
            assert!(report.passed(), "{algorithm}: {report:?}");
            assert!(report.second_moment_max() > 0.0);
        }
    }

    #[test]
    fn martingale_single_sample_is_vacuous() {
        let (model, mdp, theta, omega, z) = chain_point(Algorithm::PpoMc);
        let report = check_martingale(&model, &mdp, &theta, &omega, &z, 1, 5).unwrap();
        assert!(report.vacuous);
        assert!(!report.passed());
    }

    #[test]
    fn martingale_zero_residual_on_single_action() {
        // one action and deterministic transitions: every sample is the same trajectory
        let mut b = MdpBuilder::new(1, 1);
        let s0 = b.add_state(0);
        let s1 = b.add_state(1);
        b.add_edge(s0, 0, Some(s1), 1.0, 1.0).unwrap();
        b.add_edge(s1, 0, None, 2.0, 1.0).unwrap();
        b.initial(Initial::Distribution(vec![(s0, 1.0)])).reward_bound(2.0);
        let mdp = b.build().unwrap();
        let model = Model::build(Algorithm::PpoMc, &mdp, &ModelConfig { hidden: 3, ..Default::default() }).unwrap();
        let (theta, omega) = model.init(1, 0.5);
        let z = ControlState::new(&ControlConfig::default(), &theta, &omega);
        let report = check_martingale(&model, &mdp, &theta, &omega, &z, 50, 0).unwrap();
        assert_eq!(report.second_moment_max(), 0.0);
        assert!(report.passed());
    }

    fn quadratic_grad(x: &ParamVector) -> ParamVector {
        let eig = [1.0, 2.0, 5.0];
        ParamVector {
            shape: x.shape.clone(),
            values: x.values.iter().zip(eig).map(|(v, e)| v * e).collect(),
        }
    }

    #[test]
    fn lipschitz_of_quadratic_matches_top_eigenvalue() {
        let center = ParamVector::flat(vec![0.0; 3]);
        let est = estimate_lipschitz(quadratic_grad, &center, 2.0, 1000, 7);
        assert!(est <= 5.0 + 1e-12 && est >= 4.5, "{est}");
    }

    #[test]
    fn lipschitz_of_constant_gradient_is_zero() {
        let center = ParamVector::flat(vec![0.0; 4]);
        let est = estimate_lipschitz(|_| ParamVector::flat(vec![1.0; 4]), &center, 1.0, 100, 0);
        assert_eq!(est, 0.0);
    }

    #[test]
    fn lipschitz_grows_with_pairs() {
        let center = ParamVector::flat(vec![0.0; 3]);
        let mut last = 0.0;
        for n in [1, 5, 20, 100, 400] {
            let est = estimate_lipschitz(quadratic_grad, &center, 1.0, n, 3);
            assert!(est >= last);
            last = est;
        }
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = rng_stream(0, STREAM_DIAGNOSTIC);
        let center = ParamVector::flat(vec![1.0; 5]);
        for _ in 0..500 {
            assert!(sample_in_ball(&mut rng, &center, 0.5).distance(&center) <= 0.5);
        }
    }
}
