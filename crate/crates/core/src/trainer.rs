//! Coupled two-timescale online SGD, learning-rate schedules and the ODE limit.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{Activation, Network, ParamVector};
use crate::control::{step_control, ControlConfig, ControlState};
use crate::error::{Error, Result};
use crate::mdp::{enumerate_trajectories, ActionId, Mdp, PolicyTable, Trajectory};
use crate::policy::argmax;
use crate::ppo::{CriticMode, PpoModel};
use crate::rudder::RudderModel;
use crate::sampling::{rng_stream, STREAM_BEHAVIORAL, STREAM_INIT, STREAM_ON_POLICY};

/// Losses and gradients at one `(θ, ω, z)`, either for one sample or in expectation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub loss_h: f64,
    pub loss_g: f64,
    pub h: ParamVector,
    pub f: ParamVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "ppo-td")]
    PpoTd,
    #[serde(rename = "ppo-mc")]
    PpoMc,
    #[serde(rename = "rudder")]
    Rudder,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::PpoMc, Algorithm::PpoTd, Algorithm::Rudder];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::PpoTd => "ppo-td",
            Algorithm::PpoMc => "ppo-mc",
            Algorithm::Rudder => "rudder",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo-td" => Ok(Algorithm::PpoTd),
            "ppo-mc" => Ok(Algorithm::PpoMc),
            "rudder" => Ok(Algorithm::Rudder),
            other => Err(Error::Config(format!(
                "unknown algorithm `{other}` (expected ppo-td, ppo-mc or rudder)"
            ))),
        }
    }
}

/// Network sizes and regularization shared by all algorithms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub activation: Activation,
    pub kl_eps: f64,
    /// Weight decay inside the PPO trust region.
    pub weight_decay: f64,
    /// RUDDER `ρ_θ = c ‖θ‖² / 2` coefficient.
    pub actor_decay: f64,
    /// RUDDER `ρ_ω = c ‖ω‖² / 2` coefficient.
    pub critic_decay: f64,
    /// RUDDER behavioral policy; uniform when absent.
    pub behavioral: Option<Vec<Vec<f64>>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 16,
            activation: Activation::Tanh,
            kl_eps: crate::policy::DEFAULT_KL_EPS,
            weight_decay: 0.0,
            actor_decay: 1.0,
            critic_decay: 1.0,
            behavioral: None,
        }
    }
}

/// An actor-critic pair for one of the supported algorithms.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Ppo(PpoModel),
    Rudder(RudderModel),
}

impl Model {
    pub fn build(algorithm: Algorithm, mdp: &Mdp, cfg: &ModelConfig) -> Result<Model> {
        let hidden: Vec<usize> = if cfg.hidden == 0 { vec![] } else { vec![cfg.hidden] };
        match algorithm {
            Algorithm::PpoTd | Algorithm::PpoMc => {
                let mode = if algorithm == Algorithm::PpoTd {
                    CriticMode::Td
                } else {
                    CriticMode::Mc
                };
                let mut m = PpoModel::for_mdp(mdp, &hidden, &hidden, cfg.activation, mode)?;
                m.kl_eps = cfg.kl_eps;
                m.weight_decay = cfg.weight_decay;
                Ok(Model::Ppo(m))
            }
            Algorithm::Rudder => {
                let mut m = RudderModel::for_mdp(mdp, &hidden, &hidden, cfg.activation)?;
                if let Some(rows) = &cfg.behavioral {
                    let table = PolicyTable::new(rows.clone())?;
                    table.check_against(mdp)?;
                    m.behavioral = table;
                }
                m.actor_decay = cfg.actor_decay;
                m.critic_decay = cfg.critic_decay;
                Ok(Model::Rudder(m))
            }
        }
    }

    pub fn actor_net(&self) -> &Network {
        match self {
            Model::Ppo(m) => m.actor.net(),
            Model::Rudder(m) => &m.actor,
        }
    }

    pub fn critic_net(&self) -> &Network {
        match self {
            Model::Ppo(m) => &m.critic,
            Model::Rudder(m) => &m.critic,
        }
    }

    /// Initial `(θ, ω)` drawn uniformly from `[-scale, scale]`.
    pub fn init(&self, seed: u64, scale: f64) -> (ParamVector, ParamVector) {
        let mut rng = rng_stream(seed, STREAM_INIT);
        let theta = self.actor_net().init_uniform(&mut rng, scale);
        let omega = self.critic_net().init_uniform(&mut rng, scale);
        (theta, omega)
    }

    /// `ψ(s; θ)` for every state (for RUDDER, `q̂(s, ·; θ)`).
    pub fn scores(&self, theta: &ParamVector) -> Vec<Vec<f64>> {
        let net = self.actor_net();
        let ns = net.input_dim();
        (0..ns)
            .map(|s| net.forward(theta, &crate::policy::one_hot(s, ns)).expect("actor shape"))
            .collect()
    }

    pub fn policy_table(&self, theta: &ParamVector, slope: f64) -> PolicyTable {
        match self {
            Model::Ppo(m) => m.policy_table(theta, slope),
            Model::Rudder(m) => m.policy_table(theta, slope),
        }
    }

    /// Argmax of the policy scores per state.
    pub fn greedy_actions(&self, theta: &ParamVector) -> Vec<ActionId> {
        self.scores(theta).iter().map(|row| argmax(row)).collect()
    }

    /// One stochastic gradient: trajectories come from the on-policy stream and,
    /// for RUDDER's actor, from the behavioral stream.
    pub fn sampled<R: Rng + ?Sized>(
        &self,
        mdp: &Mdp,
        theta: &ParamVector,
        omega: &ParamVector,
        z: &ControlState,
        on_policy: &mut R,
        behavioral: &mut R,
    ) -> GradientEstimate {
        match self {
            Model::Ppo(m) => {
                let mut point = m.at(mdp, theta, omega, z);
                let tau = point.sample_trajectory(on_policy);
                point.sampled(&tau)
            }
            Model::Rudder(m) => {
                let mut point = m.at(mdp, theta, omega, z);
                let beh = point.sample_behavioral(behavioral);
                let on = point.sample_on_policy(on_policy);
                point.sampled(&beh, &on)
            }
        }
    }

    pub fn exact(
        &self,
        mdp: &Mdp,
        theta: &ParamVector,
        omega: &ParamVector,
        z: &ControlState,
    ) -> Result<GradientEstimate> {
        match self {
            Model::Ppo(m) => m.at(mdp, theta, omega, z).exact(),
            Model::Rudder(m) => m.at(mdp, theta, omega, z).exact(),
        }
    }

    /// Trajectories and probabilities the critic is trained on at `(θ, z₁)`.
    pub fn critic_trajectories(
        &self,
        mdp: &Mdp,
        theta: &ParamVector,
        slope: f64,
    ) -> Result<Vec<(Trajectory, f64)>> {
        enumerate_trajectories(mdp, &self.policy_table(theta, slope))
    }

    /// Critic loss and gradient over a fixed weighted set of trajectories.
    pub fn critic_over(
        &self,
        mdp: &Mdp,
        theta: &ParamVector,
        omega: &ParamVector,
        z: &ControlState,
        trajectories: &[(Trajectory, f64)],
    ) -> (f64, ParamVector) {
        match self {
            Model::Ppo(m) => m.at(mdp, theta, omega, z).critic_over(trajectories),
            Model::Rudder(m) => {
                let point = m.at(mdp, theta, omega, z);
                let mut loss = 0.0;
                let mut f = ParamVector::zeros(&omega.shape);
                for (tau, p) in trajectories {
                    loss += p * point.critic_loss(tau);
                    f.axpy(*p, &point.critic_grad(tau));
                }
                (loss, f)
            }
        }
    }

    fn is_td(&self) -> bool {
        matches!(self, Model::Ppo(m) if m.mode == CriticMode::Td)
    }
}

/// `a(n) = a₀ / (1 + n)^{p_a}` and `b(n) = b₀ / (1 + n)^{p_b}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRateSchedule {
    pub a0: f64,
    pub pa: f64,
    pub b0: f64,
    pub pb: f64,
}

impl Default for LearningRateSchedule {
    fn default() -> Self {
        LearningRateSchedule {
            a0: 0.05,
            pa: 1.0,
            b0: 0.1,
            pb: 0.6,
        }
    }
}

impl LearningRateSchedule {
    pub fn a(&self, n: u64) -> f64 {
        self.a0 / (1.0 + n as f64).powf(self.pa)
    }

    pub fn b(&self, n: u64) -> f64 {
        self.b0 / (1.0 + n as f64).powf(self.pb)
    }
}

/// Outcome of each step-size condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDiagnosis {
    pub actor_sum_diverges: bool,
    pub critic_sum_diverges: bool,
    pub actor_square_summable: bool,
    pub critic_square_summable: bool,
    pub timescales_separated: bool,
    pub non_increasing: bool,
}

impl ScheduleDiagnosis {
    pub fn passed(&self) -> bool {
        self.actor_sum_diverges
            && self.critic_sum_diverges
            && self.actor_square_summable
            && self.critic_square_summable
            && self.timescales_separated
            && self.non_increasing
    }

    /// Names of the failed conditions.
    pub fn failures(&self) -> Vec<&'static str> {
        [
            (self.actor_sum_diverges, "actor step sizes are summable"),
            (self.critic_sum_diverges, "critic step sizes are summable"),
            (self.actor_square_summable, "actor step sizes are not square-summable"),
            (self.critic_square_summable, "critic step sizes are not square-summable"),
            (self.timescales_separated, "actor is not slower than critic (need pa > pb)"),
            (self.non_increasing, "step sizes increase"),
        ]
        .into_iter()
        .filter(|(ok, _)| !ok)
        .map(|(_, msg)| msg)
        .collect()
    }
}

/// Checks the step-size conditions by exponent algebra.
pub fn validate_schedule(s: &LearningRateSchedule) -> ScheduleDiagnosis {
    let positive = s.a0 > 0.0 && s.b0 > 0.0;
    ScheduleDiagnosis {
        actor_sum_diverges: positive && s.pa <= 1.0,
        critic_sum_diverges: positive && s.pb <= 1.0,
        actor_square_summable: 2.0 * s.pa > 1.0,
        critic_square_summable: 2.0 * s.pb > 1.0,
        timescales_separated: s.pa > s.pb,
        non_increasing: s.a0 >= 0.0 && s.b0 >= 0.0 && s.pa >= 0.0 && s.pb >= 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iters: u64,
    /// Record a row (and evaluate exact gradients) every this many iterations.
    pub record_every: u64,
    /// Threshold on the window-averaged parameter drift per unit step size.
    pub stop_tol: f64,
    pub stop_window: usize,
    /// Norm bound applied to `θ` and `ω` after every update.
    pub param_bound: f64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 200_000,
            record_every: 100,
            stop_tol: 0.05,
            stop_window: 200,
            param_bound: 100.0,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be positive".into()));
        }
        if self.stop_window == 0 {
            return Err(Error::Config("stop_window must be positive".into()));
        }
        if !(self.param_bound > 0.0) {
            return Err(Error::Config("param_bound must be positive".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// One recorded iteration. Optional fields are unavailable on the final row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub n: u64,
    pub a_n: f64,
    pub b_n: f64,
    pub z1: f64,
    pub z2: f64,
    /// Whether losses and gradient norms are exact expectations.
    pub exact: bool,
    pub loss_h: f64,
    pub loss_g: f64,
    pub h_norm: f64,
    pub f_norm: f64,
    pub theta_step: Option<f64>,
    pub omega_step: Option<f64>,
    pub noise_h_sq: Option<f64>,
    pub noise_f_sq: Option<f64>,
    pub theta_norm: f64,
    pub omega_norm: f64,
    pub theta_drift: Option<f64>,
    pub omega_drift: Option<f64>,
}

impl RunRow {
    pub const HEADER: [&'static str; 18] = [
        "n",
        "a_n",
        "b_n",
        "z1",
        "z2",
        "exact",
        "loss_h",
        "loss_g",
        "h_norm",
        "f_norm",
        "theta_step",
        "omega_step",
        "noise_h_sq",
        "noise_f_sq",
        "theta_norm",
        "omega_norm",
        "theta_drift",
        "omega_drift",
    ];

    /// Cells in [`Self::HEADER`] order; unavailable values are empty.
    pub fn cells(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.n.to_string(),
            self.a_n.to_string(),
            self.b_n.to_string(),
            self.z1.to_string(),
            self.z2.to_string(),
            u8::from(self.exact).to_string(),
            self.loss_h.to_string(),
            self.loss_g.to_string(),
            self.h_norm.to_string(),
            self.f_norm.to_string(),
            opt(self.theta_step),
            opt(self.omega_step),
            opt(self.noise_h_sq),
            opt(self.noise_f_sq),
            self.theta_norm.to_string(),
            self.omega_norm.to_string(),
            opt(self.theta_drift),
            opt(self.omega_drift),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rows: Vec<RunRow>,
    /// Whether the drift criterion fired before `max_iters`.
    pub converged: bool,
    pub iterations: u64,
    pub final_theta: ParamVector,
    pub final_omega: ParamVector,
    pub final_z: ControlState,
    pub max_param_norm: f64,
    pub clamp_events: u64,
    pub max_noise_h_sq: Option<f64>,
    pub max_noise_f_sq: Option<f64>,
}

/// Sliding window of iterates used by the stopping rule.
struct DriftWindow {
    size: usize,
    thetas: VecDeque<ParamVector>,
    omegas: VecDeque<ParamVector>,
    a: VecDeque<f64>,
    b: VecDeque<f64>,
}

impl DriftWindow {
    fn new(size: usize, theta: &ParamVector, omega: &ParamVector) -> Self {
        DriftWindow {
            size,
            thetas: VecDeque::from([theta.clone()]),
            omegas: VecDeque::from([omega.clone()]),
            a: VecDeque::new(),
            b: VecDeque::new(),
        }
    }

    fn push(&mut self, theta: &ParamVector, omega: &ParamVector, a: f64, b: f64) {
        self.thetas.push_back(theta.clone());
        self.omegas.push_back(omega.clone());
        self.a.push_back(a);
        self.b.push_back(b);
        if self.a.len() > self.size {
            self.thetas.pop_front();
            self.omegas.pop_front();
            self.a.pop_front();
            self.b.pop_front();
        }
    }

    /// `‖θ_n − θ_{n−W}‖ / Σ a` and the same for `ω`, once the window is full.
    fn drift(&self) -> Option<(f64, f64)> {
        if self.a.len() < self.size {
            return None;
        }
        let (sa, sb): (f64, f64) = (self.a.iter().sum(), self.b.iter().sum());
        if sa <= 0.0 || sb <= 0.0 {
            return None;
        }
        let dt = self.thetas.back()?.distance(self.thetas.front()?) / sa;
        let dw = self.omegas.back()?.distance(self.omegas.front()?) / sb;
        Some((dt, dw))
    }
}

/// Runs `θ_{n+1} = θ_n − a(n) ĥ_n`, `ω_{n+1} = ω_n − b(n) f̂_n` with one
/// fresh trajectory per iteration.
pub fn train(
    model: &Model,
    mdp: &Mdp,
    schedule: &LearningRateSchedule,
    control: &ControlConfig,
    cfg: &TrainConfig,
    seed: u64,
    algorithm: Algorithm,
) -> Result<RunRecord> {
    control.validate()?;
    cfg.validate()?;
    let (theta, omega) = model.init(seed, cfg.init_scale);
    train_from(model, mdp, schedule, control, cfg, seed, algorithm, theta, omega)
}

/// [`train`] from given initial parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    model: &Model,
    mdp: &Mdp,
    schedule: &LearningRateSchedule,
    control: &ControlConfig,
    cfg: &TrainConfig,
    seed: u64,
    algorithm: Algorithm,
    mut theta: ParamVector,
    mut omega: ParamVector,
) -> Result<RunRecord> {
    let enumerable = mdp.check_enumerable().is_ok();
    let mut on_rng = rng_stream(seed, STREAM_ON_POLICY);
    let mut beh_rng = rng_stream(seed, STREAM_BEHAVIORAL);
    let mut z = ControlState::new(control, &theta, &omega);
    let mut window = DriftWindow::new(cfg.stop_window, &theta, &omega);
    let mut rows = Vec::new();
    let mut converged = false;
    let mut clamp_events = 0;
    let mut max_param_norm = theta.norm().max(omega.norm());
    let (mut max_m1, mut max_m2): (Option<f64>, Option<f64>) = (None, None);
    // running averages of sampled losses for MDPs too large to enumerate
    let mut ema: Option<(f64, f64)> = None;
    let mut last_drift: Option<(f64, f64)> = None;
    let mut n = 0;

    while n < cfg.max_iters {
        let est = model.sampled(mdp, &theta, &omega, &z, &mut on_rng, &mut beh_rng);
        if !(est.h.is_finite() && est.f.is_finite()) {
            return Err(Error::NonFiniteUpdate { iteration: n });
        }
        ema = Some(match ema {
            None => (est.loss_h, est.loss_g),
            Some((lh, lg)) => (0.99 * lh + 0.01 * est.loss_h, 0.99 * lg + 0.01 * est.loss_g),
        });
        let record = n % cfg.record_every == 0;
        let exact = if record && enumerable {
            Some(model.exact(mdp, &theta, &omega, &z)?)
        } else {
            None
        };

        let (a_n, b_n) = (schedule.a(n), schedule.b(n));
        let theta_old = theta.clone();
        let omega_old = omega.clone();
        theta.axpy(-a_n, &est.h);
        omega.axpy(-b_n, &est.f);
        if !(theta.is_finite() && omega.is_finite()) {
            return Err(Error::NonFiniteUpdate { iteration: n });
        }
        clamp_events += u64::from(theta.clamp_norm(cfg.param_bound));
        clamp_events += u64::from(omega.clamp_norm(cfg.param_bound));
        max_param_norm = max_param_norm.max(theta.norm()).max(omega.norm());
        window.push(&theta, &omega, a_n, b_n);
        let drift = window.drift();
        if drift.is_some() {
            last_drift = drift;
        }

        if record {
            let (loss_h, loss_g, h_norm, f_norm, noise) = match &exact {
                Some(ex) => {
                    let m1 = est.h.sub(&ex.h).norm_sq();
                    let m2 = est.f.sub(&ex.f).norm_sq();
                    max_m1 = Some(max_m1.map_or(m1, |m: f64| m.max(m1)));
                    max_m2 = Some(max_m2.map_or(m2, |m: f64| m.max(m2)));
                    (ex.loss_h, ex.loss_g, ex.h.norm(), ex.f.norm(), Some((m1, m2)))
                }
                None => {
                    let (lh, lg) = ema.unwrap();
                    (lh, lg, est.h.norm(), est.f.norm(), None)
                }
            };
            rows.push(RunRow {
                n,
                a_n,
                b_n,
                z1: z.z1_now,
                z2: z.z2_now,
                exact: exact.is_some(),
                loss_h,
                loss_g,
                h_norm,
                f_norm,
                theta_step: Some(theta.distance(&theta_old)),
                omega_step: Some(omega.distance(&omega_old)),
                noise_h_sq: noise.map(|x| x.0),
                noise_f_sq: noise.map(|x| x.1),
                theta_norm: theta_old.norm(),
                omega_norm: omega_old.norm(),
                theta_drift: drift.map(|d| d.0),
                omega_drift: drift.map(|d| d.1),
            });
        }

        z = step_control(&z, &theta_old, &omega_old);
        n += 1;
        if let Some((dt, dw)) = drift {
            if dt < cfg.stop_tol && dw < cfg.stop_tol {
                converged = true;
                break;
            }
        }
    }

    // final row at the last iterate
    let (exact_flag, loss_h, loss_g, h_norm, f_norm) = if enumerable {
        let ex = model.exact(mdp, &theta, &omega, &z)?;
        (true, ex.loss_h, ex.loss_g, ex.h.norm(), ex.f.norm())
    } else {
        let (lh, lg) = ema.unwrap_or((f64::NAN, f64::NAN));
        (false, lh, lg, f64::NAN, f64::NAN)
    };
    rows.push(RunRow {
        n,
        a_n: schedule.a(n),
        b_n: schedule.b(n),
        z1: z.z1_now,
        z2: z.z2_now,
        exact: exact_flag,
        loss_h,
        loss_g,
        h_norm,
        f_norm,
        theta_step: None,
        omega_step: None,
        noise_h_sq: None,
        noise_f_sq: None,
        theta_norm: theta.norm(),
        omega_norm: omega.norm(),
        theta_drift: last_drift.map(|d| d.0),
        omega_drift: last_drift.map(|d| d.1),
    });

    Ok(RunRecord {
        algorithm,
        seed,
        rows,
        converged,
        iterations: n,
        final_theta: theta,
        final_omega: omega,
        final_z: z,
        max_param_norm,
        clamp_events,
        max_noise_h_sq: max_m1,
        max_noise_f_sq: max_m2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeConfig {
    /// Euler step of the slow (actor) flow.
    pub outer_step: f64,
    pub outer_steps: usize,
    /// Initial Euler step of the critic relaxation; adapted by backtracking.
    pub inner_step: f64,
    pub inner_tol: f64,
    pub inner_max_iters: u64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            outer_step: 0.05,
            outer_steps: 200,
            inner_step: 0.5,
            inner_tol: 1e-8,
            inner_max_iters: 200_000,
        }
    }
}

/// Result of relaxing the critic at fixed `θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticFixpoint {
    pub omega: ParamVector,
    pub iterations: u64,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Forward-Euler relaxation of `ω̇ = −f(θ, ω, z)` at the limit `z = (β, 0)`
/// until `‖f‖ < inner_tol`. TD targets follow the current `ω`.
///
/// Steps that increase the critic loss (for TD, `‖f‖`) are halved and retried.
pub fn critic_fixpoint(
    model: &Model,
    mdp: &Mdp,
    theta: &ParamVector,
    omega_start: &ParamVector,
    beta: f64,
    cfg: &OdeConfig,
) -> Result<CriticFixpoint> {
    let trajectories = model.critic_trajectories(mdp, theta, beta)?;
    let td = model.is_td();
    let eval = |omega: &ParamVector| {
        let z = ControlState::limit(beta, Default::default(), theta, omega);
        let (loss, f) = model.critic_over(mdp, theta, omega, &z, &trajectories);
        let merit = if td { f.norm_sq() } else { loss };
        (merit, f)
    };
    let mut omega = omega_start.clone();
    let (mut merit, mut f) = eval(&omega);
    let mut step = cfg.inner_step;
    let max_step = cfg.inner_step * 64.0;
    let mut iterations = 0;
    while f.norm() >= cfg.inner_tol && iterations < cfg.inner_max_iters {
        iterations += 1;
        let mut candidate = omega.clone();
        candidate.axpy(-step, &f);
        let (m_new, f_new) = eval(&candidate);
        if !m_new.is_finite() || !f_new.is_finite() {
            if step < 1e-12 {
                return Err(Error::InnerLoopDiverged { iterations });
            }
            step *= 0.5;
            continue;
        }
        // near the optimum the loss change drops below its rounding, so a
        // smaller gradient also counts as progress
        if m_new <= merit || f_new.norm() < f.norm() || step < 1e-12 {
            omega = candidate;
            merit = m_new;
            f = f_new;
            step = (step * 1.25).min(max_step);
        } else {
            step *= 0.5;
        }
    }
    let grad_norm = f.norm();
    Ok(CriticFixpoint {
        omega,
        iterations,
        grad_norm,
        converged: grad_norm < cfg.inner_tol,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdePoint {
    pub time: f64,
    pub theta: ParamVector,
    pub omega: ParamVector,
    pub h_norm: f64,
    pub inner_iterations: u64,
    pub inner_converged: bool,
}

/// Two-timescale limit: at each outer step the critic is relaxed to `λ(θ)`, then
/// `θ` moves along `−h(θ, λ(θ))` at `z = (β, 0)`.
pub fn ode_limit_flow(
    model: &Model,
    mdp: &Mdp,
    beta: f64,
    theta0: &ParamVector,
    omega0: &ParamVector,
    cfg: &OdeConfig,
) -> Result<Vec<OdePoint>> {
    let mut theta = theta0.clone();
    let mut omega = omega0.clone();
    let mut flow = Vec::with_capacity(cfg.outer_steps + 1);
    for k in 0..=cfg.outer_steps {
        let fix = critic_fixpoint(model, mdp, &theta, &omega, beta, cfg)?;
        omega = fix.omega;
        let z = ControlState::limit(beta, Default::default(), &theta, &omega);
        let h = model.exact(mdp, &theta, &omega, &z)?.h;
        flow.push(OdePoint {
            time: k as f64 * cfg.outer_step,
            theta: theta.clone(),
            omega: omega.clone(),
            h_norm: h.norm(),
            inner_iterations: fix.iterations,
            inner_converged: fix.converged,
        });
        if k < cfg.outer_steps {
            theta.axpy(-cfg.outer_step, &h);
            if !theta.is_finite() {
                return Err(Error::NonFiniteUpdate { iteration: k as u64 });
            }
        }
    }
    Ok(flow)
}
