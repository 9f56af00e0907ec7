//! Line-oriented `section.key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nsrl::envs::{BlocksConfig, KeyDoorConfig, Task};
use nsrl::numerics::AdamConfig;
use nsrl::policy::{DqnConfig, PpoConfig, PpoLossConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Directory searched for relative config paths that do not exist as given.
pub const CONFIG_DIR_VAR: &str = "NSRL_CONFIG_DIR";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("`{key}`: {message}")]
    Key { key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Where a value came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, Origin)>,
}

fn valid_key(key: &str) -> bool {
    let mut parts = key.split('.');
    let (Some(section), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
        return false;
    };
    [section, name]
        .iter()
        .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
}

impl RawConfig {
    /// Parses `section.key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError::Line { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `section.key = value`, found `{content}`")))?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(err(format!("`{key}` is not a `section.key` name")));
            }
            if let Some((_, Origin::Line(first))) = entries.get(key) {
                return Err(err(format!("`{key}` already set on line {first}")));
            }
            entries.insert(key.to_string(), (value.trim().to_string(), Origin::Line(line)));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Applies `--section.key=value` arguments.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<(), ConfigError> {
        for arg in args {
            let arg = arg.as_ref();
            let body = arg.strip_prefix("--").unwrap_or(arg);
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Key {
                key: body.to_string(),
                message: "override needs the form --section.key=value".into(),
            })?;
            if !valid_key(key) {
                return Err(ConfigError::Key {
                    key: key.to_string(),
                    message: "not a `section.key` name".into(),
                });
            }
            self.entries
                .insert(key.to_string(), (value.trim().to_string(), Origin::Override));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), Origin::Override));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn error(&self, key: &str, message: impl Into<String>) -> ConfigError {
        match self.entries.get(key) {
            Some((_, Origin::Line(line))) => ConfigError::Line {
                line: *line,
                message: format!("`{key}`: {}", message.into()),
            },
            _ => ConfigError::Key {
                key: key.to_string(),
                message: message.into(),
            },
        }
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| self.error(key, format!("`{v}`: {e}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }
}

/// Resolves a config path, falling back to [`CONFIG_DIR_VAR`] for relative
/// paths that do not exist.
pub fn resolve_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(CONFIG_DIR_VAR) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ppo,
    Dqn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Softmax,
    Greedy,
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "greedy" => Ok(Self::Greedy),
            _ => Err("expected `softmax` or `greedy`".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "lowercase")]
pub enum EnvConfig {
    Blocks {
        /// Variant name, or `custom` when piles were given directly.
        variant: String,
        config: BlocksConfig,
    },
    Keydoor {
        config: KeyDoorConfig,
    },
}

impl EnvConfig {
    pub fn task_name(&self) -> String {
        match self {
            Self::Blocks { config, .. } => config.task.name().to_string(),
            Self::Keydoor { .. } => "keydoor".into(),
        }
    }

    pub fn variant_name(&self) -> String {
        match self {
            Self::Blocks { variant, .. } => variant.clone(),
            Self::Keydoor { config } => {
                if config.success_probability < 1.0 {
                    format!("p{}", config.success_probability)
                } else {
                    "default".into()
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub steps: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub critic_hidden: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainerConfig {
    Ppo {
        ppo: PpoConfig,
        /// Training budget in episodes.
        episodes: u64,
        /// Environments stepped in lockstep.
        envs: usize,
    },
    Dqn {
        dqn: DqnConfig,
        /// Stop once an evaluation mean reaches this score.
        stop_at: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    /// Episodes (PPO) or steps (DQN) between evaluations.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    /// Episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

const KNOWN: &[&str] = &[
    "env.domain",
    "env.task",
    "env.variant",
    "env.piles",
    "env.blocks",
    "env.goal",
    "env.relabel",
    "env.masking",
    "env.horizon",
    "env.step_reward",
    "env.success_reward",
    "env.seed",
    "env.adjacency",
    "env.start",
    "env.decision_penalty",
    "env.key_reward",
    "env.door_reward",
    "env.extrinsic_training",
    "env.success_probability",
    "model.steps",
    "model.layers",
    "model.heads",
    "model.hidden",
    "model.head_hidden",
    "model.critic_hidden",
    "trainer.algorithm",
    "trainer.lr",
    "trainer.momentum",
    "trainer.rms_decay",
    "trainer.adam_eps",
    "trainer.gamma",
    "trainer.lambda",
    "trainer.clip",
    "trainer.value_coef",
    "trainer.entropy_coef",
    "trainer.epochs",
    "trainer.minibatch",
    "trainer.batch_episodes",
    "trainer.episodes",
    "trainer.envs",
    "trainer.steps",
    "trainer.buffer",
    "trainer.batch",
    "trainer.sync_every",
    "trainer.epsilon_start",
    "trainer.epsilon_end",
    "trainer.epsilon_fraction",
    "trainer.train_every",
    "trainer.learning_starts",
    "trainer.reward_scale",
    "trainer.stop_at",
    "trainer.eval_every",
    "trainer.eval_episodes",
    "trainer.eval_mode",
    "trainer.checkpoint_every",
    "io.checkpoint",
    "io.log",
];

fn parse_goal(text: &str) -> Result<(usize, usize), String> {
    let (x, y) = text
        .trim()
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split_once(',')
        .ok_or("expected `(x,y)`")?;
    // The floor's entity index follows the block names.
    let id = |name: &str| {
        nsrl::envs::blocks::BLOCK_NAMES
            .iter()
            .chain(std::iter::once(&"floor"))
            .position(|b| *b == name.trim())
            .ok_or_else(|| format!("`{}` is not a block or the floor", name.trim()))
    };
    Ok((id(x)?, id(y)?))
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        for key in raw.keys() {
            if !KNOWN.contains(&key) {
                return Err(raw.error(key, "unknown key"));
            }
        }
        let seed = raw.or("env.seed", 0u64)?;
        let env = Self::env(raw)?;
        let model = ModelConfig {
            steps: raw.or("model.steps", 4)?,
            layers: raw.or("model.layers", 2)?,
            heads: raw.or("model.heads", 4)?,
            hidden: raw.or("model.hidden", 64)?,
            head_hidden: raw.or("model.head_hidden", 64)?,
            critic_hidden: None,
        };
        if model.steps == 0 {
            return Err(raw.error("model.steps", "T must be at least 1"));
        }
        for key in ["model.layers", "model.heads", "model.hidden", "model.head_hidden"] {
            if raw.parsed::<usize>(key)? == Some(0) {
                return Err(raw.error(key, "must be positive"));
            }
        }
        if model.hidden % model.heads != 0 {
            return Err(raw.error("model.heads", "must divide model.hidden"));
        }
        let algorithm = match raw.required("trainer.algorithm")? {
            "ppo" => Algorithm::Ppo,
            "dqn" => Algorithm::Dqn,
            other => return Err(raw.error("trainer.algorithm", format!("`{other}`: expected `ppo` or `dqn`"))),
        };
        let optimizer = AdamConfig {
            lr: raw.or("trainer.lr", 1e-4)?,
            momentum: raw.or("trainer.momentum", 0.9)?,
            rms_decay: raw.or("trainer.rms_decay", 0.999)?,
            eps: raw.or("trainer.adam_eps", 1e-8)?,
        };
        if !(optimizer.lr > 0.0 && optimizer.lr.is_finite()) {
            return Err(raw.error("trainer.lr", "must be positive"));
        }
        let unit = |key: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(raw.error(key, "must be in [0, 1)"))
            }
        };
        unit("trainer.momentum", optimizer.momentum)?;
        unit("trainer.rms_decay", optimizer.rms_decay)?;
        let gamma_default = match algorithm {
            Algorithm::Ppo => 1.0,
            Algorithm::Dqn => 0.99,
        };
        let gamma: f64 = raw.or("trainer.gamma", gamma_default)?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(raw.error("trainer.gamma", "γ must be in (0, 1]"));
        }
        let positive = |key: &str, v: u64| {
            if v > 0 {
                Ok(v)
            } else {
                Err(raw.error(key, "must be positive"))
            }
        };
        let (trainer, critic_default, eval_mode_default, eval_every_default) = match algorithm {
            Algorithm::Ppo => {
                let d = PpoConfig::default();
                let loss = PpoLossConfig {
                    clip: raw.or("trainer.clip", d.loss.clip)?,
                    value_coef: raw.or("trainer.value_coef", d.loss.value_coef)?,
                    entropy_coef: raw.or("trainer.entropy_coef", d.loss.entropy_coef)?,
                };
                if !(loss.clip > 0.0 && loss.clip < 1.0) {
                    return Err(raw.error("trainer.clip", "must be in (0, 1)"));
                }
                let lambda: f64 = raw.or("trainer.lambda", d.lambda)?;
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(raw.error("trainer.lambda", "λ must be in [0, 1]"));
                }
                let ppo = PpoConfig {
                    batch_episodes: positive("trainer.batch_episodes", raw.or("trainer.batch_episodes", d.batch_episodes as u64)?)?
                        as usize,
                    epochs: positive("trainer.epochs", raw.or("trainer.epochs", d.epochs as u64)?)? as usize,
                    minibatch: positive("trainer.minibatch", raw.or("trainer.minibatch", d.minibatch as u64)?)? as usize,
                    gamma,
                    lambda,
                    loss,
                    optimizer,
                };
                let envs = positive("trainer.envs", raw.or("trainer.envs", ppo.batch_episodes as u64)?)? as usize;
                (
                    TrainerConfig::Ppo {
                        episodes: raw.or("trainer.episodes", 2000)?,
                        envs,
                        ppo,
                    },
                    Some(20),
                    EvalMode::Softmax,
                    256,
                )
            }
            Algorithm::Dqn => {
                let d = DqnConfig::default();
                let dqn = DqnConfig {
                    steps: raw.or("trainer.steps", d.steps)?,
                    buffer: positive("trainer.buffer", raw.or("trainer.buffer", d.buffer as u64)?)? as usize,
                    batch: positive("trainer.batch", raw.or("trainer.batch", d.batch as u64)?)? as usize,
                    sync_every: positive("trainer.sync_every", raw.or("trainer.sync_every", d.sync_every)?)?,
                    gamma,
                    epsilon_start: raw.or("trainer.epsilon_start", d.epsilon_start)?,
                    epsilon_end: raw.or("trainer.epsilon_end", d.epsilon_end)?,
                    epsilon_fraction: raw.or("trainer.epsilon_fraction", d.epsilon_fraction)?,
                    train_every: positive("trainer.train_every", raw.or("trainer.train_every", d.train_every)?)?,
                    learning_starts: raw.or("trainer.learning_starts", d.learning_starts)?,
                    reward_scale: raw.or("trainer.reward_scale", d.reward_scale)?,
                    optimizer,
                };
                for (key, v) in [
                    ("trainer.epsilon_start", dqn.epsilon_start),
                    ("trainer.epsilon_end", dqn.epsilon_end),
                    ("trainer.epsilon_fraction", dqn.epsilon_fraction),
                ] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(raw.error(key, "must be in [0, 1]"));
                    }
                }
                if !(dqn.reward_scale > 0.0 && dqn.reward_scale.is_finite()) {
                    return Err(raw.error("trainer.reward_scale", "must be positive"));
                }
                (
                    TrainerConfig::Dqn {
                        dqn,
                        stop_at: raw.parsed("trainer.stop_at")?,
                    },
                    None,
                    EvalMode::Greedy,
                    250,
                )
            }
        };
        let critic_hidden = match raw.parsed::<usize>("model.critic_hidden")? {
            Some(0) => None,
            Some(h) => Some(h),
            None => critic_default,
        };
        let eval_episodes = raw.or("trainer.eval_episodes", 100usize)?;
        if eval_episodes == 0 {
            return Err(raw.error("trainer.eval_episodes", "must be positive"));
        }
        Ok(Self {
            seed,
            env,
            model: ModelConfig { critic_hidden, ..model },
            trainer,
            eval_every: raw.or("trainer.eval_every", eval_every_default)?,
            eval_episodes,
            eval_mode: raw.or("trainer.eval_mode", eval_mode_default)?,
            checkpoint_every: raw.or("trainer.checkpoint_every", 0)?,
            checkpoint: PathBuf::from(raw.required("io.checkpoint")?),
            log: PathBuf::from(raw.required("io.log")?),
        })
    }

    fn env(raw: &RawConfig) -> Result<EnvConfig, ConfigError> {
        match raw.required("env.domain")? {
            "blocks" => {
                let task_key = "env.task";
                let task: Task = raw
                    .required(task_key)?
                    .parse()
                    .map_err(|e: nsrl::envs::EnvError| raw.error(task_key, e.to_string()))?;
                let (variant, mut config) = match raw.get("env.piles") {
                    Some(piles) => (
                        "custom".to_string(),
                        BlocksConfig::new(task, piles).map_err(|e| raw.error("env.piles", e.to_string()))?,
                    ),
                    None => {
                        let name = raw.get("env.variant").unwrap_or("training");
                        (
                            name.to_string(),
                            BlocksConfig::variant(task, name).map_err(|e| raw.error("env.variant", e.to_string()))?,
                        )
                    }
                };
                if let Some(goal) = raw.get("env.goal") {
                    config.goal = Some(parse_goal(goal).map_err(|e| raw.error("env.goal", e))?);
                }
                config.relabel = raw.or("env.relabel", false)?;
                config.masking = raw.or("env.masking", false)?;
                config.horizon = raw.or("env.horizon", config.horizon)?;
                config.step_reward = raw.or("env.step_reward", config.step_reward)?;
                config.success_reward = raw.or("env.success_reward", config.success_reward)?;
                if let Some(n) = raw.parsed::<usize>("env.blocks")? {
                    if n != config.block_count() {
                        return Err(raw.error(
                            "env.blocks",
                            format!("piles hold {} blocks, not {n}", config.block_count()),
                        ));
                    }
                }
                config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(EnvConfig::Blocks { variant, config })
            }
            "keydoor" => {
                let mut config = KeyDoorConfig::default();
                if let Some(adj) = raw.get("env.adjacency") {
                    config.adjacency =
                        nsrl::envs::keydoor::parse_adjacency(adj).map_err(|e| raw.error("env.adjacency", e.to_string()))?;
                }
                if let Some(start) = raw.get("env.start") {
                    config.start = start.to_string();
                }
                config.decision_penalty = raw.or("env.decision_penalty", config.decision_penalty)?;
                config.key_reward = raw.or("env.key_reward", config.key_reward)?;
                config.door_reward = raw.or("env.door_reward", config.door_reward)?;
                config.extrinsic_training = raw.or("env.extrinsic_training", config.extrinsic_training)?;
                config.success_probability = raw.or("env.success_probability", config.success_probability)?;
                config.horizon = raw.or("env.horizon", config.horizon)?;
                nsrl::envs::KeyDoor::new(config.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(EnvConfig::Keydoor { config })
            }
            other => Err(raw.error("env.domain", format!("`{other}`: expected `blocks` or `keydoor`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PPO: &str = "\
# UNSTACK
env.domain = blocks
env.task = unstack
trainer.algorithm = ppo   # default hyperparameters
io.checkpoint = run.ckpt
io.log = run.jsonl
";

    #[test]
    fn parses_comments_and_defaults() {
        let raw = RawConfig::parse(PPO).unwrap();
        assert_eq!(raw.get("env.task"), Some("unstack"));
        let run = RunConfig::from_raw(&raw).unwrap();
        assert_eq!(run.model.critic_hidden, Some(20));
        assert_eq!(run.eval_mode, EvalMode::Softmax);
        let TrainerConfig::Ppo { ppo, episodes, .. } = &run.trainer else {
            panic!("ppo expected")
        };
        assert_eq!((ppo.epochs, ppo.batch_episodes, *episodes), (4, 32, 2000));
        assert_eq!(ppo.optimizer.lr, 1e-4);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RawConfig::parse("env.domain = blocks\nnonsense\n").unwrap_err();
        assert_eq!(err, ConfigError::Line { line: 2, message: "expected `section.key = value`, found `nonsense`".into() });
        let err = RawConfig::parse("a.b = 1\na.b = 2").unwrap_err();
        assert!(matches!(err, ConfigError::Line { line: 2, .. }));
        let raw = RawConfig::parse(&format!("{PPO}trainer.lr = -1\n")).unwrap();
        let err = RunConfig::from_raw(&raw).unwrap_err();
        assert!(matches!(err, ConfigError::Line { line: 7, .. }), "{err}");
        let raw = RawConfig::parse(&format!("{PPO}trainer.lrr = 1\n")).unwrap();
        assert!(matches!(RunConfig::from_raw(&raw), Err(ConfigError::Line { line: 7, .. })));
    }

    #[test]
    fn overrides_replace_values() {
        let mut raw = RawConfig::parse(PPO).unwrap();
        raw.apply_overrides(&["--trainer.gamma=0.5", "--env.variant=5_blocks"]).unwrap();
        let run = RunConfig::from_raw(&raw).unwrap();
        let TrainerConfig::Ppo { ppo, .. } = &run.trainer else { panic!() };
        assert_eq!(ppo.gamma, 0.5);
        assert_eq!(run.env.variant_name(), "5_blocks");
        assert!(raw.apply_overrides(&["--trainer"]).is_err());
        raw.apply_overrides(&["--trainer.gamma=0"]).unwrap();
        assert!(matches!(RunConfig::from_raw(&raw), Err(ConfigError::Key { .. })));
    }

    #[test]
    fn required_keys() {
        let raw = RawConfig::parse("env.domain = blocks\nenv.task = on\nio.log = x\nio.checkpoint = y").unwrap();
        assert_eq!(RunConfig::from_raw(&raw), Err(ConfigError::Missing("trainer.algorithm".into())));
        let raw = RawConfig::parse("env.domain = keydoor\ntrainer.algorithm = dqn\nio.log = x").unwrap();
        assert_eq!(RunConfig::from_raw(&raw), Err(ConfigError::Missing("io.checkpoint".into())));
    }

    #[test]
    fn goals_and_block_counts() {
        let raw = RawConfig::parse(&format!("{PPO}env.blocks = 5\n")).unwrap();
        assert!(RunConfig::from_raw(&raw).is_err());
        let mut raw = RawConfig::parse(&PPO.replace("unstack", "on")).unwrap();
        raw.set("env.goal", "(b,floor)");
        let run = RunConfig::from_raw(&raw).unwrap();
        let EnvConfig::Blocks { config, .. } = run.env else { panic!() };
        assert_eq!(config.goal, Some((1, nsrl::envs::blocks::FLOOR)));
    }
}
