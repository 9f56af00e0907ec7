//! The `train`, `eval`, `oracle`, `rules` and `plot` commands.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use nsrl::envs::{
    enumerate, value_iteration, BlocksConfig, BlocksWorld, Dynamics, EnvError, Environment, KeyDoor, OptimalPolicy,
    RewardKind, StepOutcome, Task, STATE_CAP,
};
use nsrl::numerics::{init_rng, ParamSet};
use nsrl::policy::{
    evaluate_policy, ActionMode, DqnTrainer, EpisodeSummary, EvalSummary, NsrlModel, PolicyConfig, PolicyError,
    PpoTrainer,
};
use nsrl::reasoning::{kappa, AttentionWeights};
use nsrl::rules::{aggregate, best_pair, chain_confidences, report_line, ChainRule, RuleError};
use nsrl::symbolic::{EntityId, FlatState, GroundAtom, PredicateId, SymbolicState, Vocabulary};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, DqnState, TrainerState, FORMAT_VERSION};
use crate::config::{ConfigError, EnvConfig, EvalMode, RawConfig, RunConfig, TrainerConfig};
use crate::log::{read_log, EpisodeRecord, EvalRecord, LogError, LogRecord, LogWriter};
use crate::plot;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    Capacity(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Incompatible(_) => 3,
            Self::Capacity(_) => 4,
            Self::Failed(_) => 1,
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Incompatible(_) | CheckpointError::Version { .. } => Self::Incompatible(e.to_string()),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Capacity { .. } => Self::Capacity(e.to_string()),
            EnvError::Config(_) => Self::Config(ConfigError::Invalid(e.to_string())),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Env(env) => env.into(),
            PolicyError::Config(m) => Self::Config(ConfigError::Invalid(m)),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<LogError> for CliError {
    fn from(e: LogError) -> Self {
        Self::Failed(e.to_string())
    }
}

impl From<RuleError> for CliError {
    fn from(e: RuleError) -> Self {
        Self::Failed(e.to_string())
    }
}

/// Either supported environment behind one type.
#[derive(Clone, Debug)]
pub enum AnyEnv {
    Blocks(BlocksWorld),
    KeyDoor(KeyDoor),
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEnv::Blocks($e) => $body,
            AnyEnv::KeyDoor($e) => $body,
        }
    };
}

impl Environment for AnyEnv {
    fn vocabulary(&self) -> &Vocabulary {
        delegate!(self, e => Environment::vocabulary(e))
    }
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> SymbolicState {
        delegate!(self, e => e.reset(rng))
    }
    fn observation(&self) -> SymbolicState {
        delegate!(self, e => e.observation())
    }
    fn actions(&self) -> &[GroundAtom] {
        delegate!(self, e => Environment::actions(e))
    }
    fn action_mask(&self) -> Option<Vec<bool>> {
        delegate!(self, e => e.action_mask())
    }
    fn step(&mut self, action: &GroundAtom, rng: &mut ChaCha8Rng) -> Result<StepOutcome, EnvError> {
        delegate!(self, e => e.step(action, rng))
    }
    fn horizon(&self) -> usize {
        delegate!(self, e => Environment::horizon(e))
    }
}

pub fn build_env(config: &EnvConfig) -> Result<AnyEnv, CliError> {
    Ok(match config {
        EnvConfig::Blocks { config, .. } => AnyEnv::Blocks(BlocksWorld::new(config.clone())?),
        EnvConfig::Keydoor { config } => AnyEnv::KeyDoor(KeyDoor::new(config.clone())?),
    })
}

/// The environment used for evaluation: blocks are never relabeled there.
pub fn eval_env_config(config: &EnvConfig) -> EnvConfig {
    match config {
        EnvConfig::Blocks { variant, config } => EnvConfig::Blocks {
            variant: variant.clone(),
            config: BlocksConfig {
                relabel: false,
                ..config.clone()
            },
        },
        other => other.clone(),
    }
}

fn action_mode(mode: EvalMode) -> ActionMode {
    match mode {
        EvalMode::Softmax => ActionMode::Softmax,
        EvalMode::Greedy => ActionMode::Greedy { epsilon: 0.0 },
    }
}

fn mode_name(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Softmax => "softmax",
        EvalMode::Greedy => "greedy",
    }
}

/// Independent generator stream for evaluations and sampling.
fn side_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = init_rng(seed);
    rng.set_stream(stream);
    rng
}

const EVAL_STREAM: u64 = 1 << 32;
const RULES_STREAM: u64 = 2 << 32;

fn policy_config(run: &RunConfig, vocab: &Vocabulary) -> PolicyConfig {
    let mut pc = PolicyConfig::new(vocab);
    pc.attention.steps = run.model.steps;
    pc.attention.layers = run.model.layers;
    pc.attention.heads = run.model.heads;
    pc.attention.hidden = run.model.hidden;
    pc.head_hidden = run.model.head_hidden;
    pc.critic_hidden = run.model.critic_hidden;
    pc
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub evals: Vec<EvalRecord>,
}

struct Session<'a> {
    run: &'a RunConfig,
    raw: BTreeMap<String, String>,
    vocab: Vocabulary,
    model_config: PolicyConfig,
    model: NsrlModel,
    log: LogWriter,
    eval_envs: Vec<AnyEnv>,
    evals: Vec<EvalRecord>,
    steps: u64,
}

impl Session<'_> {
    fn record_episode(&mut self, index: u64, e: &EpisodeSummary) -> Result<(), CliError> {
        self.steps += e.length as u64;
        self.log.write(&LogRecord::Episode(EpisodeRecord {
            episode: index,
            steps: self.steps,
            ret: e.reward,
            score: e.score,
            length: e.length,
            task: self.run.env.task_name(),
            variant: self.run.env.variant_name(),
            atoms: None,
            rules: None,
        }))?;
        Ok(())
    }

    /// `key` selects the generator stream: the episode count for PPO, the
    /// step count for DQN.
    fn evaluate(&mut self, params: &ParamSet, episode: u64, steps: u64, key: u64) -> Result<EvalRecord, CliError> {
        let mut rng = side_rng(self.run.seed, EVAL_STREAM + key);
        let s = evaluate_policy(
            &self.model,
            params,
            &mut self.eval_envs,
            self.run.eval_episodes,
            action_mode(self.run.eval_mode),
            &mut rng,
        )?;
        let rec = EvalRecord {
            episode,
            steps,
            mean: s.mean,
            std: s.std,
            episodes: s.episodes.len(),
            mode: mode_name(self.run.eval_mode).into(),
            task: self.run.env.task_name(),
            variant: self.run.env.variant_name(),
        };
        self.log.write(&LogRecord::Eval(rec.clone()))?;
        self.evals.push(rec.clone());
        Ok(rec)
    }

    fn checkpoint(&self, params: &ParamSet, trainer: TrainerState, rng: &ChaCha8Rng) -> Result<Checkpoint, CliError> {
        let ck = Checkpoint {
            version: FORMAT_VERSION,
            vocabulary: self.vocab.clone(),
            model: self.model_config.clone(),
            params: params.clone(),
            trainer,
            config: self.raw.clone(),
            rng: rng.clone(),
        };
        ck.save(&self.run.checkpoint)?;
        Ok(ck)
    }
}

fn dqn_state(t: &DqnTrainer) -> TrainerState {
    TrainerState::Dqn(DqnState {
        steps: t.steps,
        episodes: t.episodes,
        updates: t.updates,
        epsilon: t.epsilon(),
        optimizer: t.optimizer.clone(),
        target: t.target.clone(),
    })
}

fn crossed(before: u64, after: u64, every: u64) -> bool {
    every > 0 && before / every != after / every
}

/// Runs the configured trainer, logging every episode and evaluation and
/// checkpointing periodically and at the end.
pub fn train(raw: &RawConfig) -> Result<TrainOutcome, CliError> {
    let run = RunConfig::from_raw(raw)?;
    let env = build_env(&run.env)?;
    let eval_env = build_env(&eval_env_config(&run.env))?;
    let vocab = env.vocabulary().clone();
    let model_config = policy_config(&run, &vocab);
    let mut rng = init_rng(run.seed);
    let mut params = ParamSet::new();
    let model = NsrlModel::register(&mut params, &vocab, model_config.clone(), &mut rng)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let log = LogWriter::create(&run.log)?;
    let mut s = Session {
        run: &run,
        raw: raw.keys().map(|k| (k.to_string(), raw.get(k).unwrap_or_default().to_string())).collect(),
        vocab,
        model_config,
        model,
        log,
        eval_envs: vec![eval_env; run.eval_episodes.min(32)],
        evals: Vec::new(),
        steps: 0,
    };
    let checkpoint = match &run.trainer {
        TrainerConfig::Ppo { ppo, episodes, envs } => {
            let mut trainer = PpoTrainer::new(ppo.clone(), &params);
            let mut pool = vec![env; *envs];
            let mut last_eval = None;
            while trainer.episodes < *episodes {
                let before = trainer.episodes;
                trainer.config.batch_episodes = ppo.batch_episodes.min((*episodes - before) as usize);
                let update = trainer.iteration(&s.model, &mut params, &mut pool, &mut rng);
                trainer.config.batch_episodes = ppo.batch_episodes;
                let update = update?;
                for (k, e) in update.episodes.iter().enumerate() {
                    s.record_episode(before + k as u64 + 1, e)?;
                }
                if crossed(before, trainer.episodes, run.eval_every) {
                    s.evaluate(&params, trainer.episodes, s.steps, trainer.episodes)?;
                    last_eval = Some(trainer.episodes);
                }
                if crossed(before, trainer.episodes, run.checkpoint_every) {
                    s.checkpoint(&params, TrainerState::Ppo(trainer.clone()), &rng)?;
                }
            }
            if last_eval != Some(trainer.episodes) {
                s.evaluate(&params, trainer.episodes, s.steps, trainer.episodes)?;
            }
            s.checkpoint(&params, TrainerState::Ppo(trainer), &rng)?
        }
        TrainerConfig::Dqn { dqn, stop_at } => {
            let mut trainer = DqnTrainer::new(dqn.clone(), &params);
            let mut env = env;
            let mut last_eval = None;
            while trainer.steps < dqn.steps {
                if let Some(e) = trainer.step(&s.model, &mut params, &mut env, &mut rng)? {
                    s.record_episode(trainer.episodes, &e)?;
                    if crossed(trainer.episodes - 1, trainer.episodes, run.checkpoint_every) {
                        s.checkpoint(&params, dqn_state(&trainer), &rng)?;
                    }
                }
                if run.eval_every > 0 && trainer.steps % run.eval_every == 0 {
                    let rec = s.evaluate(&params, trainer.episodes, trainer.steps, trainer.steps)?;
                    last_eval = Some(trainer.steps);
                    if stop_at.is_some_and(|target| rec.mean >= target) {
                        break;
                    }
                }
            }
            if last_eval != Some(trainer.steps) {
                s.evaluate(&params, trainer.episodes, trainer.steps, trainer.steps)?;
            }
            s.checkpoint(&params, dqn_state(&trainer), &rng)?
        }
    };
    Ok(TrainOutcome {
        checkpoint,
        evals: s.evals,
    })
}

/// Loads a checkpoint and reapplies env overrides to its config echo.
pub fn load_run(path: &Path, overrides: &[String]) -> Result<(Checkpoint, RunConfig), CliError> {
    let ck = Checkpoint::load(path)?;
    let mut raw = RawConfig::default();
    for (k, v) in &ck.config {
        raw.set(k, v.clone());
    }
    for o in overrides {
        let key = o.trim_start_matches("--").split('=').next().unwrap_or("");
        if !key.starts_with("env.") && !key.starts_with("io.") && !key.starts_with("trainer.eval") {
            return Err(ConfigError::Key {
                key: key.to_string(),
                message: "only env.*, io.* and trainer.eval_* may be overridden here".into(),
            }
            .into());
        }
    }
    raw.apply_overrides(overrides)?;
    let run = RunConfig::from_raw(&raw)?;
    Ok((ck, run))
}

pub enum EvalPolicy<'a> {
    Checkpoint(&'a Path),
    /// The value-iteration optimal policy of the configured environment.
    Oracle(&'a RawConfig),
}

pub struct EvalRequest<'a> {
    pub policy: EvalPolicy<'a>,
    pub overrides: &'a [String],
    pub episodes: usize,
    pub mode: Option<EvalMode>,
    /// Log to append the summary to; defaults to the configured log.
    pub log: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Evaluates a policy and appends the summary to the log.
pub fn eval(req: &EvalRequest<'_>) -> Result<EvalRecord, CliError> {
    if req.episodes == 0 {
        return Err(ConfigError::Invalid("evaluation needs at least one episode".into()).into());
    }
    let (run, summary, episode, steps) = match &req.policy {
        EvalPolicy::Checkpoint(path) => {
            let (ck, run) = load_run(path, req.overrides)?;
            let env = build_env(&eval_env_config(&run.env))?;
            ck.check_vocabulary(env.vocabulary())?;
            let model = ck.model()?;
            let mode = req.mode.unwrap_or(run.eval_mode);
            let mut rng = side_rng(req.seed.unwrap_or(run.seed), EVAL_STREAM - 1);
            let mut envs = vec![env; req.episodes.min(32)];
            let s = evaluate_policy(&model, &ck.params, &mut envs, req.episodes, action_mode(mode), &mut rng)?;
            (RunConfig { eval_mode: mode, ..run }, s, ck.trainer.episodes(), ck.trainer.steps())
        }
        EvalPolicy::Oracle(raw) => {
            let mut raw = (*raw).clone();
            raw.apply_overrides(req.overrides)?;
            let run = RunConfig::from_raw(&raw)?;
            let mut env = build_env(&eval_env_config(&run.env))?;
            let policy = match &env {
                AnyEnv::Blocks(b) => OptimalPolicy::solve(b, RewardKind::Evaluation)?,
                AnyEnv::KeyDoor(k) => OptimalPolicy::solve(k, RewardKind::Evaluation)?,
            };
            let mut rng = side_rng(req.seed.unwrap_or(run.seed), EVAL_STREAM - 1);
            let mut episodes = Vec::with_capacity(req.episodes);
            for _ in 0..req.episodes {
                let mut state = env.reset(&mut rng);
                let mut e = EpisodeSummary {
                    reward: 0.0,
                    score: 0.0,
                    length: 0,
                };
                loop {
                    let a = policy
                        .act(&state)
                        .ok_or_else(|| CliError::Failed("oracle policy met an unknown state".into()))?;
                    let out = env.step(&a, &mut rng)?;
                    e.reward += out.reward;
                    e.score += out.score;
                    e.length += 1;
                    state = out.state.clone();
                    if out.done() {
                        break;
                    }
                }
                episodes.push(e);
            }
            (
                RunConfig {
                    eval_mode: EvalMode::Greedy,
                    ..run
                },
                EvalSummary::from_episodes(episodes),
                0,
                0,
            )
        }
    };
    let rec = EvalRecord {
        episode,
        steps,
        mean: summary.mean,
        std: summary.std,
        episodes: summary.episodes.len(),
        mode: mode_name(run.eval_mode).into(),
        task: run.env.task_name(),
        variant: run.env.variant_name(),
    };
    let path = req.log.clone().unwrap_or(run.log.clone());
    LogWriter::append(&path)?.write(&LogRecord::Eval(rec.clone()))?;
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub task: String,
    pub variant: String,
    pub value: f64,
    pub states: usize,
}

fn oracle_value<D: Dynamics>(d: &D, kind: RewardKind) -> Result<(f64, usize), CliError> {
    let mdp = enumerate(d, kind, STATE_CAP)?;
    let table = value_iteration(&mdp, 1e-12)?;
    Ok((table.initial, mdp.state_count()))
}

/// Optimal returns of every named variant of every Blocks World task.
pub fn oracle_table() -> Result<Vec<OracleRow>, CliError> {
    let mut rows = Vec::new();
    for task in [Task::Unstack, Task::Stack, Task::On] {
        for (name, _) in task.variants() {
            let world = BlocksWorld::new(BlocksConfig::variant(task, name)?)?;
            let (value, states) = oracle_value(&world, RewardKind::Evaluation)?;
            rows.push(OracleRow {
                task: task.name().into(),
                variant: name.to_string(),
                value,
                states,
            });
        }
    }
    Ok(rows)
}

/// Optimal return of one configured environment.
pub fn oracle(raw: &RawConfig) -> Result<OracleRow, CliError> {
    let run = RunConfig::from_raw(raw)?;
    let config = eval_env_config(&run.env);
    let (value, states) = match build_env(&config)? {
        AnyEnv::Blocks(b) => oracle_value(&b, RewardKind::Evaluation)?,
        AnyEnv::KeyDoor(k) => oracle_value(&k, RewardKind::Evaluation)?,
    };
    Ok(OracleRow {
        task: config.task_name(),
        variant: config.variant_name(),
        value,
        states,
    })
}

pub struct RulesRequest<'a> {
    pub checkpoint: &'a Path,
    pub overrides: &'a [String],
    pub samples: usize,
    pub top_k: usize,
    /// Replace the learned attention with this one-hot chain.
    pub force: Option<Vec<String>>,
    /// Bind the clause ends to the most frequent best-scoring entity pair.
    pub ground: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleReport {
    pub support: usize,
    pub rules: Vec<ChainRule>,
    pub lines: Vec<String>,
}

/// States visited by the checkpoint's stochastic policy.
fn sample_states(
    model: &NsrlModel,
    params: &ParamSet,
    env: &mut AnyEnv,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SymbolicState>, CliError> {
    let mut states = Vec::with_capacity(count);
    while states.len() < count {
        let mut state = env.reset(rng);
        loop {
            states.push(state.clone());
            if states.len() == count {
                break;
            }
            let mask = env.action_mask();
            let a = model.act(params, &state, env.actions(), mask.as_deref(), ActionMode::Softmax, rng)?;
            let out = env.step(&a, rng)?;
            if out.done() {
                break;
            }
            state = out.state;
        }
    }
    Ok(states)
}

pub fn rules(req: &RulesRequest<'_>) -> Result<RuleReport, CliError> {
    if req.samples == 0 {
        return Err(ConfigError::Invalid("rule extraction needs at least one state".into()).into());
    }
    let (ck, run) = load_run(req.checkpoint, req.overrides)?;
    let mut env = build_env(&eval_env_config(&run.env))?;
    ck.check_vocabulary(env.vocabulary())?;
    let model = ck.model()?;
    let vocab = ck.vocabulary.clone();
    let n = vocab.predicate_count();
    let t = ck.model.attention.steps;
    let forced = match &req.force {
        Some(names) => {
            let chain: Vec<PredicateId> = names
                .iter()
                .map(|p| vocab.predicate(p).map_err(|e| ConfigError::Invalid(e.to_string())))
                .collect::<Result<_, _>>()?;
            if chain.is_empty() || chain.len() > t {
                return Err(ConfigError::Invalid(format!("forced chain length must be in 1..={t}")).into());
            }
            Some(AttentionWeights::one_hot(&chain, n, t))
        }
        None => None,
    };
    let mut rng = side_rng(run.seed, RULES_STREAM);
    let states = sample_states(&model, &ck.params, &mut env, req.samples, &mut rng)?;
    let mut per_state = Vec::with_capacity(states.len());
    let mut weights = Vec::with_capacity(states.len());
    for s in &states {
        let w = match &forced {
            Some(w) => w.clone(),
            None => model
                .attention
                .weights(&ck.params, &FlatState::from_state(s))
                .map_err(|e| CliError::Failed(e.to_string()))?,
        };
        per_state.push(chain_confidences(&w));
        weights.push(w);
    }
    let mut report = RuleReport {
        support: states.len(),
        rules: Vec::new(),
        lines: vec![format!("# support {} states", states.len())],
    };
    for &head in &model.action_predicates {
        let mut rules = aggregate(&per_state, head)?;
        rules.truncate(req.top_k);
        let pair = if req.ground {
            let mut counts: HashMap<(EntityId, EntityId), usize> = HashMap::new();
            let candidates: Vec<(EntityId, EntityId)> = env
                .actions()
                .iter()
                .filter(|a| a.predicate == head)
                .map(|a| (a.subject, a.object))
                .collect();
            for (s, w) in states.iter().zip(&weights) {
                let k = kappa(w, s).map_err(|e| CliError::Failed(e.to_string()))?;
                if let Some(p) = best_pair(&k, &candidates) {
                    *counts.entry(p).or_insert(0) += 1;
                }
            }
            counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(p, _)| p)
        } else {
            None
        };
        for r in &rules {
            let line = match pair {
                Some((x, y)) => format!("{:.4} {}", r.confidence, r.grounded(&vocab, x, y)?.render(&vocab)),
                None => report_line(r, &vocab)?,
            };
            report.lines.push(line);
        }
        report.rules.extend(rules);
    }
    Ok(report)
}

/// Writes one SVG of all `logs`, one run per log.
pub fn plot_logs(logs: &[PathBuf], out: &Path, title: &str) -> Result<plot::Envelope, CliError> {
    if logs.is_empty() {
        return Err(ConfigError::Invalid("plot needs at least one log".into()).into());
    }
    let mut runs = Vec::with_capacity(logs.len());
    for path in logs {
        let records = read_log(path).map_err(|e| match e {
            LogError::Parse { line, message } => CliError::Failed(format!("{}:{line}: {message}", path.display())),
            other => other.into(),
        })?;
        runs.push(plot::series(&records));
    }
    let env = plot::envelope(&runs);
    crate::checkpoint::write_atomic(out, plot::render_svg(&env, title).as_bytes())?;
    Ok(env)
}
