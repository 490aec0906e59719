//! Run configuration: a line-oriented `section.key = value` text format with
//! hard validation. Unknown keys are errors, every constraint violation
//! names the key, and the fully resolved configuration (defaults applied,
//! overrides folded in) is echoed to a `resolved_config` file so a run can
//! be reproduced from that file plus the seed alone.

use crate::env::{EnvError, MarkovChainSpec, RewardMode};
use crate::grpo::optim::Schedule;
use crate::grpo::RewardShape;
use crate::heuristics::{HeuristicKind, HeuristicSpec};
use crate::policy::{HeadKind, PolicyArch};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': {msg}")]
    Invalid { key: String, msg: String },
    #[error("config: {0}")]
    Other(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    Exact,
    Trained,
}

impl DenoiserKind {
    fn name(&self) -> &'static str {
        match self {
            DenoiserKind::Exact => "exact",
            DenoiserKind::Trained => "trained",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub spec: MarkovChainSpec,
    pub reward_mode: RewardMode,
    pub denoiser: DenoiserKind,
    /// Optional environment spec file; when set it supplies the chain.
    pub file: String,
    pub mdm_checkpoint: String,
    pub mdm_blocks: usize,
    pub mdm_hidden: usize,
    pub mdm_ff: usize,
    pub mdm_heads: usize,
    pub mdm_steps: usize,
    pub mdm_batch: usize,
    pub mdm_lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSection {
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub batch_prompts: usize,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub clip_eps: f64,
    pub group_size: usize,
    pub kl_beta: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub reward_shape: RewardShape,
    pub steps: usize,
    pub block_len: usize,
    pub rollout_workers: usize,
    pub checkpoint_every: usize,
    pub es: bool,
    pub es_kind: HeuristicKind,
    pub es_lambda: f64,
    pub es_k: usize,
    pub es_block_len: usize,
}

impl TrainSection {
    pub fn to_train_config(&self) -> crate::grpo::TrainConfig {
        crate::grpo::TrainConfig {
            lr: self.lr,
            schedule: self.schedule,
            warmup_steps: self.warmup_steps,
            batch_prompts: self.batch_prompts,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            clip_eps: self.clip_eps,
            group_size: self.group_size,
            kl_beta: self.kl_beta,
            epochs: self.epochs,
            alpha: self.alpha,
            reward_shape: self.reward_shape,
            es: self.es.then_some(HeuristicSpec {
                kind: self.es_kind,
                k: self.es_k,
                lambda: self.es_lambda,
                block_len: self.es_block_len,
            }),
            steps: self.steps,
            block_len: self.block_len,
            rollout_workers: self.rollout_workers,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub n_eval: usize,
    pub n_seeds: u64,
    pub tau: f64,
    pub block_len: usize,
    pub workers: usize,
    pub tau_pi_grid: Vec<f64>,
    pub checkpoints: Vec<String>,
    /// Empty means the length-scaled default grid.
    pub random_k_grid: Vec<usize>,
    pub top_k_grid: Vec<usize>,
    /// Empty means {0.1, ..., 1.0}.
    pub threshold_grid: Vec<f64>,
    pub oracle_alpha: f64,
    pub oracle_prompt: Vec<u16>,
    pub oracle_reference: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub policy: PolicyArch,
    pub train: TrainSection,
    pub eval: EvalSection,
}

struct Kv {
    map: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
}

impl Kv {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: i + 1,
                msg: "expected 'section.key = value'".into(),
            })?;
            let key = key.trim().to_string();
            if !key.contains('.') && key != "seed" {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    msg: format!("key '{key}' lacks a section prefix"),
                });
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    msg: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Kv {
            map,
            consumed: BTreeSet::new(),
        })
    }

    fn set_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::Other(format!("override '{kv}' is not key=value")))?;
        self.map
            .insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.consumed.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse::<T>().map_err(|e| ConfigError::Invalid {
                key: key.to_string(),
                msg: format!("cannot parse '{raw}': {e}"),
            }),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(raw) if raw.is_empty() || raw == "auto" => Ok(Some(Vec::new())),
            Some(raw) => raw
                .split_whitespace()
                .map(|t| {
                    t.parse::<T>().map_err(|e| ConfigError::Invalid {
                        key: key.to_string(),
                        msg: format!("cannot parse '{t}': {e}"),
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    fn finish(self) -> Result<(), ConfigError> {
        for key in self.map.keys() {
            if !self.consumed.contains(key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        Ok(())
    }
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn check(cond: bool, key: &str, constraint: &str) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(invalid(key, format!("must satisfy: {constraint}")))
    }
}

/// Parse config text plus `key=value` overrides into a validated RunConfig.
pub fn load_config(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut kv = Kv::parse(text)?;
    for o in overrides {
        kv.set_override(o)?;
    }
    // `seed = N` lines are tolerated (resolved_config carries one) but the
    // CLI flag is authoritative.
    let _ = kv.take("seed");

    // [env]
    let file = kv.string("env.file", "");
    let (spec, mut reward_mode) = if file.is_empty() {
        let spec = MarkovChainSpec {
            vocab_size: kv.parsed("env.vocab_size", 2usize)?,
            initial_dist: kv
                .list::<f64>("env.initial_dist")?
                .filter(|v| !v.is_empty())
                .unwrap_or_else(|| vec![0.5, 0.5]),
            transition: kv
                .list::<f64>("env.transition")?
                .filter(|v| !v.is_empty())
                .unwrap_or_else(|| vec![0.0, 1.0, 1.0, 0.0]),
            prompt_len: kv.parsed("env.prompt_len", 0usize)?,
            answer_len: kv.parsed("env.answer_len", 16usize)?,
        };
        (spec, RewardMode::Validity)
    } else {
        for k in [
            "env.vocab_size",
            "env.initial_dist",
            "env.transition",
            "env.prompt_len",
            "env.answer_len",
        ] {
            if kv.take(k).is_some() {
                return Err(invalid(k, "cannot be combined with env.file"));
            }
        }
        let text = std::fs::read_to_string(&file)?;
        crate::env::parse_env_spec(&text)?
    };
    if let Some(raw) = kv.take("env.reward_mode") {
        reward_mode = RewardMode::parse(&raw)?;
    }
    spec.validate()?;
    let denoiser = match kv.string("env.denoiser", "exact").as_str() {
        "exact" => DenoiserKind::Exact,
        "trained" => DenoiserKind::Trained,
        other => return Err(invalid("env.denoiser", format!("must be exact|trained, got '{other}'"))),
    };
    let env = EnvConfig {
        spec,
        reward_mode,
        denoiser,
        file,
        mdm_checkpoint: kv.string("env.mdm_checkpoint", ""),
        mdm_blocks: kv.parsed("env.mdm_blocks", 2usize)?,
        mdm_hidden: kv.parsed("env.mdm_hidden", 64usize)?,
        mdm_ff: kv.parsed("env.mdm_ff", 256usize)?,
        mdm_heads: kv.parsed("env.mdm_heads", 2usize)?,
        mdm_steps: kv.parsed("env.mdm_steps", 1200usize)?,
        mdm_batch: kv.parsed("env.mdm_batch", 32usize)?,
        mdm_lr: kv.parsed("env.mdm_lr", 1e-3)?,
    };
    check(env.mdm_hidden % env.mdm_heads == 0, "env.mdm_hidden", "divisible by env.mdm_heads")?;
    check(env.mdm_lr > 0.0, "env.mdm_lr", "positive")?;

    // [policy]
    let head_raw = kv.string("policy.head", "bernoulli");
    let head = HeadKind::parse(&head_raw)
        .ok_or_else(|| invalid("policy.head", format!("must be bernoulli|dpls, got '{head_raw}'")))?;
    let policy = PolicyArch {
        blocks: kv.parsed("policy.blocks", 1usize)?,
        hidden: kv.parsed("policy.hidden", 128usize)?,
        ff: kv.parsed("policy.ff", 512usize)?,
        heads: kv.parsed("policy.heads", 2usize)?,
        time_embed_dim: kv.parsed("policy.time_embed_dim", 128usize)?,
        top_n_conf: kv.parsed("policy.top_n_conf", 1usize)?,
        head,
    };
    policy
        .validate()
        .map_err(|e| invalid("policy", e.to_string()))?;

    // [train]
    let es = match kv.string("train.es", "off").as_str() {
        "off" => false,
        "on" => true,
        other => return Err(invalid("train.es", format!("must be on|off, got '{other}'"))),
    };
    let clip_default = if es { 0.2 } else { 0.5 };
    let schedule_raw = kv.string("train.schedule", "cosine");
    let schedule = Schedule::parse(&schedule_raw)
        .ok_or_else(|| invalid("train.schedule", format!("must be cosine|constant, got '{schedule_raw}'")))?;
    let shape_raw = kv.string("train.reward_shape", "multiplicative");
    let reward_shape = RewardShape::parse(&shape_raw).ok_or_else(|| {
        invalid(
            "train.reward_shape",
            format!("must be multiplicative|additive, got '{shape_raw}'"),
        )
    })?;
    let es_kind = match kv.string("train.es_kind", "threshold").as_str() {
        "threshold" => HeuristicKind::Threshold,
        "top_k" => HeuristicKind::TopK,
        other => {
            return Err(invalid(
                "train.es_kind",
                format!("must be threshold|top_k, got '{other}'"),
            ))
        }
    };
    let train = TrainSection {
        lr: kv.parsed("train.lr", 3e-5)?,
        schedule,
        warmup_steps: kv.parsed("train.warmup_steps", 100usize)?,
        batch_prompts: kv.parsed("train.batch_prompts", 16usize)?,
        weight_decay: kv.parsed("train.weight_decay", 0.1)?,
        max_grad_norm: kv.parsed("train.max_grad_norm", 0.2)?,
        clip_eps: kv.parsed("train.clip_eps", clip_default)?,
        group_size: kv.parsed("train.group_size", 8usize)?,
        kl_beta: kv.parsed("train.kl_beta", 0.0)?,
        epochs: kv.parsed("train.epochs", 1usize)?,
        alpha: kv.parsed("train.alpha", 0.0)?,
        reward_shape,
        steps: kv.parsed("train.steps", 600usize)?,
        block_len: kv.parsed("train.block_len", 0usize)?,
        rollout_workers: kv.parsed("train.rollout_workers", 1usize)?,
        checkpoint_every: kv.parsed("train.checkpoint_every", 50usize)?,
        es,
        es_kind,
        es_lambda: kv.parsed("train.es_lambda", 0.9)?,
        es_k: kv.parsed("train.es_k", 8usize)?,
        es_block_len: kv.parsed("train.es_block_len", 32usize)?,
    };
    check(train.lr > 0.0, "train.lr", "positive")?;
    check(
        train.clip_eps > 0.0 && train.clip_eps < 1.0,
        "train.clip_eps",
        "in (0, 1)",
    )?;
    check(train.kl_beta == 0.0, "train.kl_beta", "exactly 0 (KL-regularized training unsupported)")?;
    check(train.group_size >= 2, "train.group_size", "at least 2")?;
    check(train.steps >= 1, "train.steps", "at least 1")?;
    check(train.epochs >= 1, "train.epochs", "at least 1")?;
    check(train.batch_prompts >= 1, "train.batch_prompts", "at least 1")?;
    check(train.weight_decay >= 0.0, "train.weight_decay", "non-negative")?;
    check(train.max_grad_norm >= 0.0, "train.max_grad_norm", "non-negative")?;
    check(train.alpha >= 0.0, "train.alpha", "non-negative")?;
    check(train.rollout_workers >= 1, "train.rollout_workers", "at least 1")?;
    check(train.checkpoint_every >= 1, "train.checkpoint_every", "at least 1")?;
    check(
        train.block_len == 0 || env.spec.answer_len % train.block_len == 0,
        "train.block_len",
        "divides env.answer_len",
    )?;
    check(
        !(train.es && es_kind == HeuristicKind::Threshold && !(train.es_lambda > 0.0 && train.es_lambda <= 1.0)),
        "train.es_lambda",
        "in (0, 1]",
    )?;
    check(
        !(train.es && head != HeadKind::Bernoulli),
        "train.es",
        "requires policy.head = bernoulli",
    )?;

    // [eval]
    let eval = EvalSection {
        n_eval: kv.parsed("eval.n_eval", 200usize)?,
        n_seeds: kv.parsed("eval.n_seeds", 3u64)?,
        tau: kv.parsed("eval.tau", 0.0)?,
        block_len: kv.parsed("eval.block_len", 0usize)?,
        workers: kv.parsed("eval.workers", 1usize)?,
        tau_pi_grid: kv
            .list::<f64>("eval.tau_pi_grid")?
            .filter(|v| !v.is_empty())
            .unwrap_or_else(|| vec![1.0]),
        checkpoints: kv
            .list::<String>("eval.checkpoints")?
            .unwrap_or_default(),
        random_k_grid: kv.list::<usize>("eval.random_k_grid")?.unwrap_or_default(),
        top_k_grid: kv.list::<usize>("eval.top_k_grid")?.unwrap_or_default(),
        threshold_grid: kv.list::<f64>("eval.threshold_grid")?.unwrap_or_default(),
        oracle_alpha: kv.parsed("eval.oracle_alpha", 1.0)?,
        oracle_prompt: kv.list::<u16>("eval.oracle_prompt")?.unwrap_or_default(),
        oracle_reference: kv.list::<u16>("eval.oracle_reference")?.unwrap_or_default(),
    };
    check(eval.n_eval >= 1, "eval.n_eval", "at least 1")?;
    check(eval.n_seeds >= 1, "eval.n_seeds", "at least 1")?;
    check(eval.tau >= 0.0, "eval.tau", "non-negative")?;
    check(eval.workers >= 1, "eval.workers", "at least 1")?;
    check(
        eval.block_len == 0 || env.spec.answer_len % eval.block_len == 0,
        "eval.block_len",
        "divides env.answer_len",
    )?;
    for t in &eval.tau_pi_grid {
        check(*t > 0.0, "eval.tau_pi_grid", "entries positive")?;
    }
    for l in &eval.threshold_grid {
        check(*l > 0.0 && *l <= 1.0, "eval.threshold_grid", "entries in (0, 1]")?;
    }
    for k in eval.random_k_grid.iter().chain(&eval.top_k_grid) {
        check(*k >= 1, "eval.random_k_grid", "entries at least 1")?;
    }
    check(
        eval.oracle_prompt.is_empty() || eval.oracle_prompt.len() == env.spec.prompt_len,
        "eval.oracle_prompt",
        "length equals env.prompt_len",
    )?;

    kv.finish()?;
    Ok(RunConfig {
        env,
        policy,
        train,
        eval,
    })
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

impl RunConfig {
    /// Canonical echo of every effective value, prefixed with the seed.
    pub fn resolved_text(&self, seed: u64) -> String {
        let e = &self.env;
        let p = &self.policy;
        let t = &self.train;
        let v = &self.eval;
        let mut s = String::new();
        s.push_str(&format!("seed = {seed}\n"));
        s.push_str(&format!("env.file = {}\n", e.file));
        s.push_str(&format!("env.vocab_size = {}\n", e.spec.vocab_size));
        s.push_str(&format!("env.initial_dist = {}\n", join(&e.spec.initial_dist)));
        s.push_str(&format!("env.transition = {}\n", join(&e.spec.transition)));
        s.push_str(&format!("env.prompt_len = {}\n", e.spec.prompt_len));
        s.push_str(&format!("env.answer_len = {}\n", e.spec.answer_len));
        s.push_str(&format!("env.reward_mode = {}\n", e.reward_mode.name()));
        s.push_str(&format!("env.denoiser = {}\n", e.denoiser.name()));
        s.push_str(&format!("env.mdm_checkpoint = {}\n", e.mdm_checkpoint));
        s.push_str(&format!("env.mdm_blocks = {}\n", e.mdm_blocks));
        s.push_str(&format!("env.mdm_hidden = {}\n", e.mdm_hidden));
        s.push_str(&format!("env.mdm_ff = {}\n", e.mdm_ff));
        s.push_str(&format!("env.mdm_heads = {}\n", e.mdm_heads));
        s.push_str(&format!("env.mdm_steps = {}\n", e.mdm_steps));
        s.push_str(&format!("env.mdm_batch = {}\n", e.mdm_batch));
        s.push_str(&format!("env.mdm_lr = {}\n", e.mdm_lr));
        s.push_str(&format!("policy.blocks = {}\n", p.blocks));
        s.push_str(&format!("policy.hidden = {}\n", p.hidden));
        s.push_str(&format!("policy.ff = {}\n", p.ff));
        s.push_str(&format!("policy.heads = {}\n", p.heads));
        s.push_str(&format!("policy.time_embed_dim = {}\n", p.time_embed_dim));
        s.push_str(&format!("policy.top_n_conf = {}\n", p.top_n_conf));
        s.push_str(&format!("policy.head = {}\n", p.head.name()));
        s.push_str(&format!("train.lr = {}\n", t.lr));
        s.push_str(&format!("train.schedule = {}\n", t.schedule.name()));
        s.push_str(&format!("train.warmup_steps = {}\n", t.warmup_steps));
        s.push_str(&format!("train.batch_prompts = {}\n", t.batch_prompts));
        s.push_str(&format!("train.weight_decay = {}\n", t.weight_decay));
        s.push_str(&format!("train.max_grad_norm = {}\n", t.max_grad_norm));
        s.push_str(&format!("train.clip_eps = {}\n", t.clip_eps));
        s.push_str(&format!("train.group_size = {}\n", t.group_size));
        s.push_str(&format!("train.kl_beta = {}\n", t.kl_beta));
        s.push_str(&format!("train.epochs = {}\n", t.epochs));
        s.push_str(&format!("train.alpha = {}\n", t.alpha));
        s.push_str(&format!("train.reward_shape = {}\n", t.reward_shape.name()));
        s.push_str(&format!("train.steps = {}\n", t.steps));
        s.push_str(&format!("train.block_len = {}\n", t.block_len));
        s.push_str(&format!("train.rollout_workers = {}\n", t.rollout_workers));
        s.push_str(&format!("train.checkpoint_every = {}\n", t.checkpoint_every));
        s.push_str(&format!("train.es = {}\n", if t.es { "on" } else { "off" }));
        s.push_str(&format!("train.es_kind = {}\n", t.es_kind.name()));
        s.push_str(&format!("train.es_lambda = {}\n", t.es_lambda));
        s.push_str(&format!("train.es_k = {}\n", t.es_k));
        s.push_str(&format!("train.es_block_len = {}\n", t.es_block_len));
        s.push_str(&format!("eval.n_eval = {}\n", v.n_eval));
        s.push_str(&format!("eval.n_seeds = {}\n", v.n_seeds));
        s.push_str(&format!("eval.tau = {}\n", v.tau));
        s.push_str(&format!("eval.block_len = {}\n", v.block_len));
        s.push_str(&format!("eval.workers = {}\n", v.workers));
        s.push_str(&format!("eval.tau_pi_grid = {}\n", join(&v.tau_pi_grid)));
        s.push_str(&format!("eval.checkpoints = {}\n", join(&v.checkpoints)));
        s.push_str(&format!("eval.random_k_grid = {}\n", join(&v.random_k_grid)));
        s.push_str(&format!("eval.top_k_grid = {}\n", join(&v.top_k_grid)));
        s.push_str(&format!("eval.threshold_grid = {}\n", join(&v.threshold_grid)));
        s.push_str(&format!("eval.oracle_alpha = {}\n", v.oracle_alpha));
        s.push_str(&format!("eval.oracle_prompt = {}\n", join(&v.oracle_prompt)));
        s.push_str(&format!("eval.oracle_reference = {}\n", join(&v.oracle_reference)));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_yields_documented_defaults() {
        let cfg = load_config("", &[]).unwrap();
        assert_eq!(cfg.train.lr, 3e-5);
        assert_eq!(cfg.train.warmup_steps, 100);
        assert_eq!(cfg.train.group_size, 8);
        assert_eq!(cfg.train.clip_eps, 0.5);
        assert_eq!(cfg.policy.hidden, 128);
        assert_eq!(cfg.policy.ff, 512);
        assert_eq!(cfg.policy.heads, 2);
        assert_eq!(cfg.train.batch_prompts, 16);
        assert_eq!(cfg.train.weight_decay, 0.1);
        assert_eq!(cfg.train.max_grad_norm, 0.2);
        assert_eq!(cfg.train.kl_beta, 0.0);
        assert_eq!(cfg.train.epochs, 1);
    }

    #[test]
    fn overrides_apply_and_win() {
        let cfg = load_config("train.alpha = 1\n", &["train.alpha=3".into()]).unwrap();
        assert_eq!(cfg.train.alpha, 3.0);
    }

    #[test]
    fn clip_eps_defaults_to_point_two_under_expert_steering() {
        let cfg = load_config("train.es = on\n", &[]).unwrap();
        assert_eq!(cfg.train.clip_eps, 0.2);
        let explicit = load_config("train.es = on\ntrain.clip_eps = 0.4\n", &[]).unwrap();
        assert_eq!(explicit.train.clip_eps, 0.4);
    }

    #[test]
    fn constraint_violations_name_the_key() {
        let err = load_config("train.clip_eps = 1.5\n", &[]).unwrap_err();
        assert!(err.to_string().contains("train.clip_eps"), "{err}");
        let err = load_config("train.kl_beta = 0.1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("kl_beta"), "{err}");
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = load_config("train.bogus = 1\n", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "train.bogus"));
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = load_config(
            "env.vocab_size = 3\nenv.initial_dist = 0.2 0.3 0.5\nenv.transition = 1 0 0 0 1 0 0 0 1\ntrain.alpha = 2\n",
            &[],
        )
        .unwrap();
        let text = cfg.resolved_text(9);
        let reparsed = load_config(&text, &[]).unwrap();
        assert_eq!(reparsed.resolved_text(9), text);
        assert_eq!(reparsed.train.alpha, 2.0);
        assert_eq!(reparsed.env.spec.vocab_size, 3);
    }

    #[test]
    fn es_requires_bernoulli_head() {
        let err = load_config("train.es = on\npolicy.head = dpls\n", &[]).unwrap_err();
        assert!(err.to_string().contains("train.es"), "{err}");
    }
}
