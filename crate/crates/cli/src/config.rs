use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tsac::control::{ControlConfig, Z2Mode, DEFAULT_BETA};
use tsac::diagnostics::default_beta;
use tsac::mdp::Mdp;
use tsac::policy::DEFAULT_KL_EPS;
use tsac::trainer::{
    validate_schedule, Algorithm, LearningRateSchedule, ModelConfig, OdeConfig, ScheduleDiagnosis, TrainConfig,
};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Diagnose,
    OdeFlow,
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Diagnose => "diagnose",
            Command::OdeFlow => "ode-flow",
            Command::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Causality,
    Pgt,
    Greediness,
    Martingale,
    Schedule,
    All,
}

impl Check {
    pub const EACH: [Check; 5] = [Check::Causality, Check::Pgt, Check::Greediness, Check::Martingale, Check::Schedule];

    pub fn name(&self) -> &'static str {
        match self {
            Check::Causality => "causality",
            Check::Pgt => "pgt",
            Check::Greediness => "greediness",
            Check::Martingale => "martingale",
            Check::Schedule => "schedule",
            Check::All => "all",
        }
    }
}

impl FromStr for Check {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let all = [Check::All].into_iter().chain(Check::EACH);
        all.into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown check `{s}` (expected causality, pgt, greediness, martingale, schedule or all)"))
    }
}

/// Control constants as written in a config file. `beta` is optional; see
/// [`ExperimentConfig::control_config`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub beta: Option<f64>,
    pub z2_init: f64,
    pub z2_mode: Z2Mode,
    pub kl_eps: f64,
    pub weight_decay: f64,
}

impl Default for ControlSection {
    fn default() -> Self {
        let c = ControlConfig::default();
        ControlSection {
            beta: None,
            z2_init: c.z2_init,
            z2_mode: c.z2_mode,
            kl_eps: DEFAULT_KL_EPS,
            weight_decay: 0.0,
        }
    }
}

/// Network shape and RUDDER regularization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub activation: tsac::approximator::Activation,
    pub actor_decay: f64,
    pub critic_decay: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            hidden: m.hidden,
            activation: m.activation,
            actor_decay: m.actor_decay,
            critic_decay: m.critic_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub checks: Vec<Check>,
    /// Random policies per causality check, in addition to the uniform one.
    pub policies: usize,
    /// Trajectories drawn per martingale point.
    pub samples: usize,
    pub beta_factor: f64,
    pub causality_tol: f64,
    pub pgt_exact_tol: f64,
    pub pgt_fd_tol: f64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            checks: vec![Check::All],
            policies: 20,
            samples: 10_000,
            beta_factor: 1.05,
            causality_tol: 1e-12,
            pgt_exact_tol: 1e-8,
            pgt_fd_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    /// MDP definition file, relative to the config file.
    pub mdp: PathBuf,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    /// Extra algorithms for sweeps; defaults to `algorithm` alone.
    #[serde(default)]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub seed: u64,
    /// Seeds for sweeps; defaults to `seed` alone.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub allow_invalid_schedule: bool,
    #[serde(default)]
    pub schedule: LearningRateSchedule,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ode: OdeConfig,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
}

fn default_algorithm() -> Algorithm {
    Algorithm::PpoMc
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub algorithm: Option<Algorithm>,
    pub out: Option<PathBuf>,
    pub record_every: Option<u64>,
    pub checks: Vec<Check>,
    pub allow_invalid_schedule: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.mdp.is_relative() {
            cfg.mdp = base.join(&cfg.mdp);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(c) = o.command {
            self.command = c;
        }
        if let Some(s) = o.seed {
            self.seed = s;
            self.seeds.clear();
        }
        if let Some(a) = o.algorithm {
            self.algorithm = a;
            self.algorithms.clear();
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(k) = o.record_every {
            self.train.record_every = k;
        }
        if !o.checks.is_empty() {
            self.diagnose.checks = o.checks.clone();
        }
        self.allow_invalid_schedule |= o.allow_invalid_schedule;
    }

    pub fn load_mdp(&self) -> Result<Mdp, CliError> {
        let text = std::fs::read_to_string(&self.mdp)
            .map_err(|e| CliError::Config(format!("mdp: cannot read {}: {e}", self.mdp.display())))?;
        Mdp::from_json(&text).map_err(|e| CliError::Config(format!("mdp: {}: {e}", self.mdp.display())))
    }

    /// Checks every section; returns the schedule diagnosis so that an
    /// allowed invalid schedule can be recorded.
    pub fn validate(&self) -> Result<ScheduleDiagnosis, CliError> {
        let field = |name: &'static str| move |e: tsac::Error| CliError::Config(format!("{name}: {e}"));
        self.train.validate().map_err(field("train"))?;
        if let Some(beta) = self.control.beta {
            if !(beta > 1.0 && beta.is_finite()) {
                return Err(CliError::Config(format!("control.beta: must exceed 1, got {beta}")));
            }
        }
        ControlConfig { beta: DEFAULT_BETA, z2_init: self.control.z2_init, z2_mode: self.control.z2_mode }
            .validate()
            .map_err(field("control"))?;
        if !(self.control.kl_eps > 0.0) {
            return Err(CliError::Config("control.kl_eps: must be positive".into()));
        }
        if !(self.control.weight_decay >= 0.0) {
            return Err(CliError::Config("control.weight_decay: must be non-negative".into()));
        }
        if !(self.diagnose.beta_factor > 1.0) {
            return Err(CliError::Config("diagnose.beta_factor: must exceed 1".into()));
        }
        if self.command == Command::Sweep && self.seed_list().is_empty() {
            return Err(CliError::Config("seeds: sweep needs at least one seed".into()));
        }
        let diagnosis = validate_schedule(&self.schedule);
        if !diagnosis.passed() && !self.allow_invalid_schedule {
            return Err(CliError::Config(format!(
                "schedule: {} (pass --allow-invalid-schedule to run anyway)",
                diagnosis.failures().join("; ")
            )));
        }
        Ok(diagnosis)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn algorithm_list(&self) -> Vec<Algorithm> {
        if self.algorithms.is_empty() {
            vec![self.algorithm]
        } else {
            self.algorithms.clone()
        }
    }

    /// The configured slope, else the greediness bound of the MDP when it can
    /// be computed, else the library default.
    pub fn control_config(&self, mdp: &Mdp) -> (ControlConfig, BetaSource) {
        let (beta, source) = match self.control.beta {
            Some(b) => (b, BetaSource::Config),
            None => match default_beta(mdp) {
                Some(b) => (b, BetaSource::GreedinessBound),
                None => (DEFAULT_BETA, BetaSource::Fallback),
            },
        };
        let cfg = ControlConfig { beta, z2_init: self.control.z2_init, z2_mode: self.control.z2_mode };
        (cfg, source)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.model.hidden,
            activation: self.model.activation,
            kl_eps: self.control.kl_eps,
            weight_decay: self.control.weight_decay,
            actor_decay: self.model.actor_decay,
            critic_decay: self.model.critic_decay,
            behavioral: None,
        }
    }

    pub fn checks(&self) -> Vec<Check> {
        let mut out: Vec<Check> = if self.diagnose.checks.contains(&Check::All) {
            Check::EACH.to_vec()
        } else {
            self.diagnose.checks.clone()
        };
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSource {
    Config,
    GreedinessBound,
    Fallback,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "command = \"train\"\nmdp = \"chain5.json\"\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.algorithm, Algorithm::PpoMc);
        assert_eq!(cfg.schedule, LearningRateSchedule::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.control.beta, None);
        assert_eq!(cfg.checks(), Check::EACH.to_vec());
    }

    #[test]
    fn sections_parse() {
        let text = r#"
command = "sweep"
mdp = "m.json"
algorithms = ["ppo-td", "rudder"]
seeds = [3, 4]

[schedule]
a0 = 0.02
pa = 0.9

[control]
beta = 50.0
z2_mode = { mode = "rational", alpha = 2.0 }

[train]
max_iters = 1000
record_every = 10

[diagnose]
checks = ["causality", "schedule"]
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.command, Command::Sweep);
        assert_eq!(cfg.algorithm_list(), vec![Algorithm::PpoTd, Algorithm::Rudder]);
        assert_eq!(cfg.seed_list(), vec![3, 4]);
        assert_eq!(cfg.schedule.a0, 0.02);
        assert_eq!(cfg.schedule.pb, 0.6);
        assert_eq!(cfg.control.z2_mode, Z2Mode::Rational { alpha: 2.0 });
        assert_eq!(cfg.train.max_iters, 1000);
        assert_eq!(cfg.checks(), vec![Check::Causality, Check::Schedule]);
    }

    #[test]
    fn errors_name_line_and_field() {
        let err = ExperimentConfig::parse("command = \"train\"\nmdp = \"m.json\"\n[train]\nmax_iter = 5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4"), "{msg}");
        assert!(msg.contains("max_iter"), "{msg}");

        let err = ExperimentConfig::parse("command = \"fly\"\nmdp = \"m.json\"\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_schedule_rejected_unless_allowed() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.schedule.pb = 0.4;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("schedule"), "{err}");
        cfg.allow_invalid_schedule = true;
        assert!(!cfg.validate().unwrap().passed());
    }

    #[test]
    fn beta_must_exceed_one() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.control.beta = Some(0.5);
        assert!(cfg.validate().unwrap_err().to_string().contains("control.beta"));
    }

    #[test]
    fn beta_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let chain = tsac::library::chain5();
        let (c, source) = cfg.control_config(&chain);
        assert_eq!(source, BetaSource::GreedinessBound);
        assert_eq!(Some(c.beta), default_beta(&chain));
        let (c, source) = cfg.control_config(&tsac::library::bandit());
        assert_eq!((c.beta, source), (DEFAULT_BETA, BetaSource::Fallback));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig::parse("command = \"sweep\"\nmdp = \"m.json\"\nseeds = [1, 2]\n").unwrap();
        cfg.apply(&Overrides {
            command: Some(Command::Train),
            seed: Some(9),
            record_every: Some(7),
            checks: vec![Check::Pgt],
            ..Default::default()
        });
        assert_eq!(cfg.command, Command::Train);
        assert_eq!(cfg.seed_list(), vec![9]);
        assert_eq!(cfg.train.record_every, 7);
        assert_eq!(cfg.checks(), vec![Check::Pgt]);
    }

    #[test]
    fn check_names_round_trip() {
        for c in Check::EACH.into_iter().chain([Check::All]) {
            assert_eq!(c.name().parse::<Check>().unwrap(), c);
        }
        assert!("everything".parse::<Check>().is_err());
    }
}
