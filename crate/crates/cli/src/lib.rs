//! Config-driven experiment runner: training runs, seed sweeps, ODE-limit
//! flows and diagnostic checks, with CSV/JSON artifacts.

pub mod config;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;
use tsac::approximator::Network;
use tsac::control::{ControlConfig, ControlState, Z2Mode};
use tsac::diagnostics::{
    check_causality, check_martingale, check_model_greediness, check_policy_gradient_theorem,
    greediness_from_scores, GreedinessReport, MartingaleReport,
};
use tsac::library::random_policy;
use tsac::mdp::{optimal_policy, ActionId, Mdp, PolicyTable};
use tsac::policy::SoftmaxPolicy;
use tsac::sampling::{rng_stream, STREAM_DIAGNOSTIC};
use tsac::trainer::{
    critic_fixpoint, ode_limit_flow, train, Algorithm, LearningRateSchedule, Model, RunRecord, RunRow,
    ScheduleDiagnosis, TrainConfig,
};

pub use config::{BetaSource, Check, Command, ExperimentConfig, Overrides};
pub use plot::emit_plot_data;

/// Version of every JSON document written by the runner.
pub const SCHEMA_VERSION: u32 = 1;

/// Slope factor over the bound used when reporting greediness of a trained actor.
const REPORT_BETA_FACTOR: f64 = 1.05;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::CheckFailed(_) => 1,
        }
    }
}

impl From<tsac::Error> for CliError {
    fn from(e: tsac::Error) -> Self {
        match e {
            tsac::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Writes the recorded rows with the fixed column order of [`RunRow::HEADER`].
pub fn write_run_csv(path: &Path, rows: &[RunRow]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(RunRow::HEADER).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(row.cells()).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// What a finished command left on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub message: String,
}

/// Runs the configured command, writing artifacts under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let diagnosis = cfg.validate()?;
    let mdp = cfg.load_mdp()?;
    let schedule_warning = (!diagnosis.passed()).then(|| {
        let msg = format!("schedule violates step-size conditions: {}", diagnosis.failures().join("; "));
        warn!("{msg}");
        msg
    });
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let ctx = Context { cfg, mdp: &mdp, diagnosis, schedule_warning };
    match cfg.command {
        Command::Train => ctx.train_one(cfg.algorithm, cfg.seed, &cfg.out).map(|s| Outcome {
            files: vec![cfg.out.join("run.csv"), cfg.out.join("summary.json")],
            message: format!(
                "{} seed {}: converged {} after {} iterations, greedy optimal {}",
                s.algorithm, s.seed, s.converged, s.iterations, s.greedy_optimal
            ),
        }),
        Command::Sweep => ctx.sweep(),
        Command::OdeFlow => ctx.ode_flow(),
        Command::Diagnose => ctx.diagnose(),
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    mdp: &'a Mdp,
    diagnosis: ScheduleDiagnosis,
    schedule_warning: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticBall {
    /// `‖ω_final − λ(θ_final)‖` with `λ` from the critic relaxation.
    pub distance: f64,
    pub inner_iterations: u64,
    pub inner_converged: bool,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GreedinessOutcome {
    Checked(GreedinessReport),
    NotApplicable { reason: String },
}

fn greediness_outcome(r: tsac::Result<GreedinessReport>) -> Result<GreedinessOutcome, CliError> {
    match r {
        Ok(report) => Ok(GreedinessOutcome::Checked(report)),
        Err(e @ (tsac::Error::NotYetGreedy { .. } | tsac::Error::NonUniqueOptimum { .. })) => {
            Ok(GreedinessOutcome::NotApplicable { reason: e.to_string() })
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ControlSummary {
    pub beta: f64,
    pub beta_source: BetaSource,
    pub z2_init: f64,
    pub z2_mode: Z2Mode,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub mdp: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub control: ControlSummary,
    pub schedule: LearningRateSchedule,
    pub schedule_diagnosis: ScheduleDiagnosis,
    pub schedule_warning: Option<String>,
    pub train: TrainConfig,
    pub converged: bool,
    pub iterations: u64,
    pub final_loss_h: f64,
    pub final_loss_g: f64,
    pub final_theta_drift: Option<f64>,
    pub final_omega_drift: Option<f64>,
    pub max_param_norm: f64,
    pub clamp_events: u64,
    pub max_noise_h_sq: Option<f64>,
    pub max_noise_f_sq: Option<f64>,
    pub greedy_actions: Vec<ActionId>,
    pub optimal_actions: Vec<ActionId>,
    pub greedy_optimal: bool,
    pub critic_ball: CriticBall,
    pub greediness: GreedinessOutcome,
}

impl<'a> Context<'a> {
    fn control(&self) -> (ControlConfig, BetaSource) {
        self.cfg.control_config(self.mdp)
    }

    fn control_summary(&self) -> ControlSummary {
        let (c, source) = self.control();
        ControlSummary { beta: c.beta, beta_source: source, z2_init: c.z2_init, z2_mode: c.z2_mode }
    }

    fn model(&self, algorithm: Algorithm) -> Result<Model, CliError> {
        Ok(Model::build(algorithm, self.mdp, &self.cfg.model_config())?)
    }

    fn summarize(&self, model: &Model, run: &RunRecord) -> Result<RunSummary, CliError> {
        let (control, _) = self.control();
        let last = run.rows.last().ok_or_else(|| CliError::Runtime("run recorded no rows".into()))?;
        let fix = critic_fixpoint(model, self.mdp, &run.final_theta, &run.final_omega, control.beta, &self.cfg.ode)?;
        let greedy_actions = model.greedy_actions(&run.final_theta);
        let optimal_actions = optimal_policy(self.mdp).actions;
        Ok(RunSummary {
            schema_version: SCHEMA_VERSION,
            mdp: self.mdp.name().to_string(),
            algorithm: run.algorithm,
            seed: run.seed,
            control: self.control_summary(),
            schedule: self.cfg.schedule,
            schedule_diagnosis: self.diagnosis,
            schedule_warning: self.schedule_warning.clone(),
            train: self.cfg.train.clone(),
            converged: run.converged,
            iterations: run.iterations,
            final_loss_h: last.loss_h,
            final_loss_g: last.loss_g,
            final_theta_drift: last.theta_drift,
            final_omega_drift: last.omega_drift,
            max_param_norm: run.max_param_norm,
            clamp_events: run.clamp_events,
            max_noise_h_sq: run.max_noise_h_sq,
            max_noise_f_sq: run.max_noise_f_sq,
            greedy_optimal: greedy_actions == optimal_actions,
            greedy_actions,
            optimal_actions,
            critic_ball: CriticBall {
                distance: run.final_omega.distance(&fix.omega),
                inner_iterations: fix.iterations,
                inner_converged: fix.converged,
            },
            greediness: greediness_outcome(check_model_greediness(
                model,
                self.mdp,
                &run.final_theta,
                REPORT_BETA_FACTOR,
            ))?,
        })
    }

    fn train_one(&self, algorithm: Algorithm, seed: u64, dir: &Path) -> Result<RunSummary, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let model = self.model(algorithm)?;
        let (control, _) = self.control();
        info!("training {algorithm} seed {seed} on {}", self.mdp.name());
        let run = train(&model, self.mdp, &self.cfg.schedule, &control, &self.cfg.train, seed, algorithm)?;
        write_run_csv(&dir.join("run.csv"), &run.rows)?;
        let summary = self.summarize(&model, &run)?;
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }

    fn sweep(&self) -> Result<Outcome, CliError> {
        let jobs: Vec<(Algorithm, u64)> = self
            .cfg
            .algorithm_list()
            .into_iter()
            .flat_map(|a| self.cfg.seed_list().into_iter().map(move |s| (a, s)))
            .collect();
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("TSAC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            pool = pool.num_threads(n.max(1));
        }
        let pool = pool.build().map_err(|e| CliError::Runtime(e.to_string()))?;
        let results: Vec<Result<RunSummary, CliError>> = pool.install(|| {
            jobs.par_iter()
                .map(|&(a, s)| self.train_one(a, s, &self.cfg.out.join(format!("{a}-seed{s}"))))
                .collect()
        });
        let summaries = results.into_iter().collect::<Result<Vec<_>, _>>()?;

        let path = self.cfg.out.join("aggregate.csv");
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(csv_err(&path))?;
        w.write_record(AGGREGATE_HEADER).map_err(csv_err(&path))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &summaries {
            w.write_record([
                s.algorithm.to_string(),
                s.seed.to_string(),
                u8::from(s.converged).to_string(),
                s.iterations.to_string(),
                u8::from(s.greedy_optimal).to_string(),
                s.critic_ball.distance.to_string(),
                s.final_loss_h.to_string(),
                s.final_loss_g.to_string(),
                opt(s.final_theta_drift),
                opt(s.final_omega_drift),
            ])
            .map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;

        let mut lines = Vec::new();
        for a in self.cfg.algorithm_list() {
            let mine: Vec<_> = summaries.iter().filter(|s| s.algorithm == a).collect();
            let converged = mine.iter().filter(|s| s.converged).count();
            let greedy = mine.iter().filter(|s| s.greedy_optimal).count();
            lines.push(format!("{a}: converged {converged}/{n}, greedy optimal {greedy}/{n}", n = mine.len()));
        }
        Ok(Outcome { files: vec![path], message: lines.join("\n") })
    }

    fn ode_flow(&self) -> Result<Outcome, CliError> {
        let model = self.model(self.cfg.algorithm)?;
        let (control, _) = self.control();
        let (theta0, omega0) = model.init(self.cfg.seed, self.cfg.train.init_scale);
        let flow = ode_limit_flow(&model, self.mdp, control.beta, &theta0, &omega0, &self.cfg.ode)?;
        let last = flow.last().ok_or_else(|| CliError::Runtime("empty ODE flow".into()))?;

        let csv_path = self.cfg.out.join("ode.csv");
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&csv_path)
            .map_err(csv_err(&csv_path))?;
        w.write_record(ODE_HEADER).map_err(csv_err(&csv_path))?;
        for p in &flow {
            w.write_record([
                p.time.to_string(),
                p.h_norm.to_string(),
                p.theta.norm().to_string(),
                p.omega.norm().to_string(),
                p.inner_iterations.to_string(),
                u8::from(p.inner_converged).to_string(),
            ])
            .map_err(csv_err(&csv_path))?;
        }
        w.flush().map_err(io_err(&csv_path))?;

        let greedy_actions = model.greedy_actions(&last.theta);
        let optimal_actions = optimal_policy(self.mdp).actions;
        let summary = OdeSummary {
            schema_version: SCHEMA_VERSION,
            mdp: self.mdp.name().to_string(),
            algorithm: self.cfg.algorithm,
            seed: self.cfg.seed,
            control: self.control_summary(),
            points: flow.len(),
            final_time: last.time,
            final_h_norm: last.h_norm,
            all_inner_converged: flow.iter().all(|p| p.inner_converged),
            greedy_optimal: greedy_actions == optimal_actions,
            greedy_actions,
            optimal_actions,
        };
        let json_path = self.cfg.out.join("summary.json");
        write_json(&json_path, &summary)?;
        Ok(Outcome {
            files: vec![csv_path, json_path],
            message: format!(
                "ODE flow to t={}: ‖h‖ = {:.3e}, greedy optimal {}",
                summary.final_time, summary.final_h_norm, summary.greedy_optimal
            ),
        })
    }

    fn diagnose(&self) -> Result<Outcome, CliError> {
        let d = &self.cfg.diagnose;
        let mut report = DiagnosticsReport {
            schema_version: SCHEMA_VERSION,
            mdp: self.mdp.name().to_string(),
            seed: self.cfg.seed,
            passed: true,
            causality: None,
            pgt: None,
            greediness: None,
            martingale: None,
            schedule: None,
        };
        for check in self.cfg.checks() {
            match check {
                Check::Causality => {
                    let mut rng = rng_stream(self.cfg.seed, STREAM_DIAGNOSTIC);
                    let (ns, na) = (self.mdp.num_states(), self.mdp.num_actions());
                    let mut worst = check_causality(self.mdp, &PolicyTable::uniform(ns, na))?;
                    for _ in 0..d.policies {
                        let policy = random_policy(&mut rng, ns, na);
                        worst = worst.max(check_causality(self.mdp, &policy)?);
                    }
                    let passed = worst <= d.causality_tol;
                    report.causality = Some(CausalityResult {
                        passed,
                        policies: d.policies + 1,
                        max_deviation: worst,
                        tolerance: d.causality_tol,
                    });
                }
                Check::Pgt => {
                    let (ns, na) = (self.mdp.num_states(), self.mdp.num_actions());
                    let hidden: Vec<usize> = if self.cfg.model.hidden == 0 { vec![] } else { vec![self.cfg.model.hidden] };
                    let net = Network::mlp(ns, &hidden, na, self.cfg.model.activation)?;
                    let policy = SoftmaxPolicy::new(net.clone(), ns, na)?;
                    let theta = net.init_uniform(&mut rng_stream(self.cfg.seed, STREAM_DIAGNOSTIC), PGT_INIT_SCALE);
                    let r = check_policy_gradient_theorem(self.mdp, &policy, &theta, 1.0)?;
                    report.pgt = Some(PgtResult {
                        passed: r.return_vs_q <= d.pgt_exact_tol && r.score_vs_fd <= d.pgt_fd_tol,
                        exact_vs_exact: r.return_vs_q,
                        exact_vs_finite_difference: r.score_vs_fd,
                        exact_tolerance: d.pgt_exact_tol,
                        finite_difference_tolerance: d.pgt_fd_tol,
                    });
                }
                Check::Greediness => {
                    // scores equal to q* rank the optimal action first with the
                    // oracle's own gaps
                    let q = optimal_policy(self.mdp).values.q;
                    let outcome = greediness_outcome(greediness_from_scores(self.mdp, &q, d.beta_factor))?;
                    let passed = match &outcome {
                        GreedinessOutcome::Checked(r) => r.passed(),
                        GreedinessOutcome::NotApplicable { .. } => true,
                    };
                    report.greediness = Some(GreedinessResult { passed, outcome });
                }
                Check::Martingale => {
                    let model = self.model(self.cfg.algorithm)?;
                    let (control, _) = self.control();
                    let (theta, omega) = model.init(self.cfg.seed, MARTINGALE_INIT_SCALE);
                    let z = ControlState::new(&control, &theta, &omega);
                    let r = check_martingale(&model, self.mdp, &theta, &omega, &z, d.samples, self.cfg.seed)?;
                    report.martingale = Some(MartingaleResult {
                        passed: r.passed() || r.vacuous,
                        algorithm: self.cfg.algorithm,
                        report: r,
                    });
                }
                Check::Schedule => {
                    report.schedule = Some(ScheduleResult {
                        passed: self.diagnosis.passed(),
                        failures: self.diagnosis.failures(),
                        diagnosis: self.diagnosis,
                    });
                }
                Check::All => unreachable!("expanded by ExperimentConfig::checks"),
            }
        }
        let verdicts = report.verdicts();
        report.passed = verdicts.iter().all(|(_, ok)| *ok);
        let path = self.cfg.out.join("diagnostics.json");
        write_json(&path, &report)?;
        let message = verdicts
            .iter()
            .map(|(name, ok)| format!("{name}: {}", if *ok { "pass" } else { "FAIL" }))
            .collect::<Vec<_>>()
            .join("\n");
        if report.passed {
            Ok(Outcome { files: vec![path], message })
        } else {
            let failed: Vec<_> = verdicts.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
            Err(CliError::CheckFailed(format!("{} (report in {})", failed.join(", "), path.display())))
        }
    }
}

const PGT_INIT_SCALE: f64 = 0.5;
const MARTINGALE_INIT_SCALE: f64 = 0.5;

pub const AGGREGATE_HEADER: [&str; 10] = [
    "algorithm",
    "seed",
    "converged",
    "iterations",
    "greedy_optimal",
    "critic_distance",
    "final_loss_h",
    "final_loss_g",
    "final_theta_drift",
    "final_omega_drift",
];

pub const ODE_HEADER: [&str; 6] = ["time", "h_norm", "theta_norm", "omega_norm", "inner_iterations", "inner_converged"];

#[derive(Clone, Debug, Serialize)]
pub struct OdeSummary {
    pub schema_version: u32,
    pub mdp: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub control: ControlSummary,
    pub points: usize,
    pub final_time: f64,
    pub final_h_norm: f64,
    pub all_inner_converged: bool,
    pub greedy_actions: Vec<ActionId>,
    pub optimal_actions: Vec<ActionId>,
    pub greedy_optimal: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CausalityResult {
    pub passed: bool,
    pub policies: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PgtResult {
    pub passed: bool,
    pub exact_vs_exact: f64,
    pub exact_vs_finite_difference: f64,
    pub exact_tolerance: f64,
    pub finite_difference_tolerance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GreedinessResult {
    pub passed: bool,
    #[serde(flatten)]
    pub outcome: GreedinessOutcome,
}

#[derive(Clone, Debug, Serialize)]
pub struct MartingaleResult {
    pub passed: bool,
    pub algorithm: Algorithm,
    #[serde(flatten)]
    pub report: MartingaleReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScheduleResult {
    pub passed: bool,
    pub failures: Vec<&'static str>,
    pub diagnosis: ScheduleDiagnosis,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub mdp: String,
    pub seed: u64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub causality: Option<CausalityResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pgt: Option<PgtResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub greediness: Option<GreedinessResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub martingale: Option<MartingaleResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleResult>,
}

impl DiagnosticsReport {
    /// `(check name, passed)` for every check that ran.
    pub fn verdicts(&self) -> Vec<(&'static str, bool)> {
        [
            ("causality", self.causality.as_ref().map(|r| r.passed)),
            ("pgt", self.pgt.as_ref().map(|r| r.passed)),
            ("greediness", self.greediness.as_ref().map(|r| r.passed)),
            ("martingale", self.martingale.as_ref().map(|r| r.passed)),
            ("schedule", self.schedule.as_ref().map(|r| r.passed)),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|ok| (n, ok)))
        .collect()
    }
}
