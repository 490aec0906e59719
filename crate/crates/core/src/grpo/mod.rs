//! Group-relative policy optimization for the unmasking policy: collect a
//! group of greedy rollouts per prompt, score them with a terminal reward,
//! center rewards within the group, and update the policy with a clipped
//! importance-ratio objective. No KL term and no value baseline; with one
//! update per collected batch the ratio starts at 1 and the clip acts purely
//! as an off-policy safety net.

pub mod optim;

use crate::autodiff::{Gradients, NodeId, ParamStore, Tape};
use crate::env::rollout::{
    rollout, ActionKind, ActionRecord, RolloutSettings, Sampler, StepFeatures, Trajectory,
};
use crate::env::{Denoiser, DenoiserOutput, EnvError, Environment, GenState, Token};
use crate::heuristics::{expert_action, HeuristicKind, HeuristicSpec};
use crate::policy::heads::{
    bernoulli_logprob, bernoulli_logprob_graph, bernoulli_sample, cached_forward,
    dpls_logprob_graph, ForwardCache, PolicySampler,
};
use crate::policy::{HeadKind, Policy};
use crate::rng::stream;
use optim::{Optimizer, Schedule, StepStats};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardShape {
    Multiplicative,
    Additive,
}

impl RewardShape {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multiplicative" => Some(RewardShape::Multiplicative),
            "additive" => Some(RewardShape::Additive),
            _ => None,
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            RewardShape::Multiplicative => "multiplicative",
            RewardShape::Additive => "additive",
        }
    }
}

/// Terminal reward from binary correctness and the step count: the
/// multiplicative shape scales correctness by (1 - steps/T)^alpha so wrong
/// answers earn exactly zero; the additive shape subtracts alpha * steps/T
/// and can reward fast-but-wrong generations (kept for the ablation).
pub fn reward(r: f64, t_total: usize, t_hat: usize, alpha: f64, shape: RewardShape) -> f64 {
    debug_assert!(t_hat <= t_total);
    let frac = (t_total - t_hat) as f64 / t_total as f64;
    match shape {
        RewardShape::Multiplicative => r * (1.0 - frac).powf(alpha),
        RewardShape::Additive => r - alpha * frac,
    }
}

/// Group-mean-centered advantages, broadcast to every timestep downstream.
/// No standard-deviation normalization. An all-equal group yields exact
/// zeros (no rounding residue), which downstream code relies on to skip
/// uninformative groups.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    debug_assert!(rewards.len() >= 2);
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// Train-time mixture likelihood under expert steering: the policy with
/// weight G/(G+E) plus a Dirac on the expert action with weight E/(G+E).
/// Expert-matching actions are floored at log(E/(G+E)) so expert draws can
/// never have vanishing likelihood.
pub fn es_mixture_logprob(policy_logprob: f64, action_matches_expert: bool, g: usize, e: usize) -> f64 {
    let total = (g + e) as f64;
    let gf = g as f64 / total;
    let ef = e as f64 / total;
    if action_matches_expert {
        (gf * policy_logprob.exp() + ef).ln()
    } else {
        gf.ln() + policy_logprob
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
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
    /// Expert steering: one expert trajectory per group from this spec.
    pub es: Option<HeuristicSpec>,
    /// Optimizer steps per epoch.
    pub steps: usize,
    /// Rollout block length (0 = full answer).
    pub block_len: usize,
    pub rollout_workers: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            schedule: Schedule::Cosine,
            warmup_steps: 100,
            batch_prompts: 16,
            weight_decay: 0.1,
            max_grad_norm: 0.2,
            clip_eps: 0.5,
            group_size: 8,
            kl_beta: 0.0,
            epochs: 1,
            alpha: 0.0,
            reward_shape: RewardShape::Multiplicative,
            es: None,
            steps: 600,
            block_len: 0,
            rollout_workers: 1,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    /// The clipping factor default drops to 0.2 when expert steering is on.
    pub fn clip_for_es(mut self) -> Self {
        if self.es.is_some() {
            self.clip_eps = 0.2;
        }
        self
    }

    pub fn validate(&self, head: HeadKind) -> Result<(), EnvError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(EnvError::Contract(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if self.kl_beta != 0.0 {
            return Err(EnvError::Contract(
                "kl_beta must be 0; KL-regularized training is not supported".into(),
            ));
        }
        if self.group_size < 2 {
            return Err(EnvError::Contract("group_size must be at least 2".into()));
        }
        if self.lr <= 0.0 || self.steps == 0 || self.batch_prompts == 0 || self.epochs == 0 {
            return Err(EnvError::Contract("lr, steps, epochs and batch_prompts must be positive".into()));
        }
        if let Some(spec) = &self.es {
            spec.validate()?;
            if spec.kind == HeuristicKind::RandomK {
                return Err(EnvError::Contract("expert steering needs a deterministic expert".into()));
            }
            if head != HeadKind::Bernoulli {
                return Err(EnvError::Contract(
                    "expert steering is defined for the bernoulli head only".into(),
                ));
            }
        }
        Ok(())
    }
}

/// G (+1 expert) trajectories sharing one prompt, with terminal rewards.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt: Vec<Token>,
    pub reference: Vec<Token>,
    pub members: Vec<Trajectory>,
    pub correct: Vec<bool>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn advantages(&self) -> Vec<f64> {
        advantages(&self.rewards)
    }
}

/// Policy sampler that additionally evaluates the expert action at every
/// state and replaces the stored likelihood with the steering mixture.
struct EsPolicySampler<'a> {
    policy: &'a Policy,
    params: &'a ParamStore,
    expert: HeuristicSpec,
    g: usize,
    e: usize,
    cache: Option<&'a ForwardCache>,
}

impl Sampler for EsPolicySampler<'_> {
    fn select(
        &mut self,
        state: &GenState,
        den: &DenoiserOutput,
        feats: &StepFeatures,
        support: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Result<ActionRecord, EnvError> {
        let logits = cached_forward(self.policy, self.params, self.cache, feats)?;
        let mut action = bernoulli_sample(&logits, 1.0, support, rng, false);
        let expert_bits = expert_action(&self.expert, state, den)?;
        let matches = action.kind == ActionKind::Bits(expert_bits.clone());
        let plain = action.logprob_old.expect("bernoulli sample records logprob");
        action.logprob_old = Some(es_mixture_logprob(plain, matches, self.g, self.e));
        action.expert_bits = Some(expert_bits);
        Ok(action)
    }
}

/// The expert member of a steered group: deterministic expert actions with
/// the mixture likelihood (indicator = 1 by construction).
struct EsExpertSampler<'a> {
    policy: &'a Policy,
    params: &'a ParamStore,
    expert: HeuristicSpec,
    g: usize,
    e: usize,
    cache: Option<&'a ForwardCache>,
}

impl Sampler for EsExpertSampler<'_> {
    fn select(
        &mut self,
        state: &GenState,
        den: &DenoiserOutput,
        feats: &StepFeatures,
        support: &[usize],
        _rng: &mut ChaCha12Rng,
    ) -> Result<ActionRecord, EnvError> {
        let logits = cached_forward(self.policy, self.params, self.cache, feats)?;
        let bits = expert_action(&self.expert, state, den)?;
        let plain = bernoulli_logprob(&logits, 1.0, &bits, support);
        let mix = es_mixture_logprob(plain, true, self.g, self.e);
        Ok(ActionRecord {
            kind: ActionKind::Bits(bits.clone()),
            logprob_old: Some(mix),
            support: support.to_vec(),
            expert_bits: Some(bits),
        })
    }
}

/// Collect one GRPO group: G greedy rollouts (tau = 0, no fallback, step
/// budget T = L) plus one expert trajectory when steering is on. Incomplete
/// rollouts score zero.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    env: &Environment,
    denoiser: &dyn Denoiser,
    policy: &Policy,
    params: &ParamStore,
    prompt: &[Token],
    reference: &[Token],
    cfg: &TrainConfig,
    seed: u64,
    step: usize,
    prompt_idx: usize,
    cache: Option<&ForwardCache>,
) -> Result<RolloutGroup, EnvError> {
    let l = env.answer_len();
    let settings = RolloutSettings {
        block_len: cfg.block_len,
        tau: 0.0,
        fallback: false,
        max_steps: l,
        top_n: policy.arch.top_n_conf,
    };
    let mut members = Vec::with_capacity(cfg.group_size + 1);
    for g in 0..cfg.group_size {
        let mut rng = stream(seed, "rollout", &[step as u64, prompt_idx as u64, g as u64]);
        let traj = match &cfg.es {
            None => {
                let mut sampler = PolicySampler {
                    policy,
                    params,
                    tau_pi: 1.0,
                    fallback: false,
                    cache,
                };
                rollout(env, denoiser, &mut sampler, prompt, &settings, &mut rng)?
            }
            Some(expert) => {
                let mut sampler = EsPolicySampler {
                    policy,
                    params,
                    expert: *expert,
                    g: cfg.group_size,
                    e: 1,
                    cache,
                };
                rollout(env, denoiser, &mut sampler, prompt, &settings, &mut rng)?
            }
        };
        members.push(traj);
    }
    if let Some(expert) = &cfg.es {
        let mut rng = stream(seed, "rollout-expert", &[step as u64, prompt_idx as u64]);
        let mut sampler = EsExpertSampler {
            policy,
            params,
            expert: *expert,
            g: cfg.group_size,
            e: 1,
            cache,
        };
        let mut traj = rollout(env, denoiser, &mut sampler, prompt, &settings, &mut rng)?;
        traj.is_expert = true;
        members.push(traj);
    }
    let correct: Vec<bool> = members
        .iter()
        .map(|m| m.complete && env.correctness(prompt, &m.final_answer, reference))
        .collect();
    let rewards: Vec<f64> = members
        .iter()
        .zip(&correct)
        .map(|(m, &c)| reward(f64::from(u8::from(c)), l, m.t_hat, cfg.alpha, cfg.reward_shape))
        .collect();
    Ok(RolloutGroup {
        prompt: prompt.to_vec(),
        reference: reference.to_vec(),
        members,
        correct,
        rewards,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub value: f64,
    /// Fraction of surrogate terms where the clipped branch was strictly
    /// active (identically 0 on-policy).
    pub clip_frac: f64,
    pub terms: usize,
}

fn trajectory_key(traj: &Trajectory) -> Vec<u8> {
    let mut key = Vec::new();
    for step in &traj.steps {
        match &step.action.kind {
            ActionKind::Bits(bits) => {
                key.push(0);
                let mut byte = 0u8;
                for (i, &b) in bits.iter().enumerate() {
                    if b {
                        byte |= 1 << (i % 8);
                    }
                    if i % 8 == 7 {
                        key.push(byte);
                        byte = 0;
                    }
                }
                key.push(byte);
            }
            ActionKind::Ordered(list) => {
                key.push(1);
                for &k in list {
                    key.extend_from_slice(&(k as u16).to_le_bytes());
                }
            }
        }
        key.push(0xFF);
    }
    key
}

/// Build the clipped surrogate for a batch of groups on one tape. Members
/// with zero advantage contribute exactly zero loss and gradient and are
/// dropped. Identical (prompt, action-sequence) trajectories are merged
/// across the whole batch: greedy transitions make them bit-identical, so
/// one forward graph serves every owner, each keeping its own advantage and
/// its own clip-branch decision.
fn batch_loss_graph(
    tape: &mut Tape,
    policy: &Policy,
    params: &ParamStore,
    groups: &[RolloutGroup],
    cfg: &TrainConfig,
) -> Result<(NodeId, LossStats), EnvError> {
    let eps = cfg.clip_eps;
    let mut total: Option<NodeId> = None;
    let mut clipped_terms = 0usize;
    let mut terms = 0usize;

    struct Owner {
        advantage: f64,
        weight: f64,
    }
    // Distinct trajectories still share observation prefixes (every member
    // sees the same all-masked first step), so forward graphs are memoized
    // per distinct feature vector within this tape.
    let mut logits_memo: std::collections::HashMap<Vec<u8>, NodeId> = Default::default();
    let feature_key = |f: &crate::env::rollout::StepFeatures| -> Vec<u8> {
        let mut key = Vec::with_capacity(8 * (f.per_pos.len() + 2));
        key.extend_from_slice(&(f.len as u64).to_le_bytes());
        key.extend_from_slice(&f.time_frac.to_bits().to_le_bytes());
        for v in &f.per_pos {
            key.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        key
    };
    // key -> (group idx, member idx, owners sharing the trajectory)
    let mut merged: std::collections::BTreeMap<Vec<u8>, (usize, usize, Vec<Owner>)> =
        Default::default();
    for (gi, group) in groups.iter().enumerate() {
        let adv = group.advantages();
        let g_total = group.members.len() as f64;
        for (mi, traj) in group.members.iter().enumerate() {
            if adv[mi] == 0.0 {
                continue;
            }
            let mut key = Vec::with_capacity(2 * group.prompt.len() + 8);
            for &tok in &group.prompt {
                key.extend_from_slice(&tok.to_le_bytes());
            }
            key.push(0xFE);
            key.extend_from_slice(&trajectory_key(traj));
            let entry = merged.entry(key).or_insert_with(|| (gi, mi, Vec::new()));
            entry.2.push(Owner {
                advantage: adv[mi],
                weight: 1.0
                    / (g_total * groups.len() as f64 * traj.steps_used().max(1) as f64),
            });
        }
    }

    for (_, (gi, mi, owners)) in merged {
        let traj = &groups[gi].members[mi];
        for step in &traj.steps {
            let lp_old = step.action.logprob_old.ok_or_else(|| {
                EnvError::Contract("trajectory step lacks a stored log-probability".into())
            })?;
            if !lp_old.is_finite() {
                return Err(EnvError::Contract(format!(
                    "non-finite stored log-probability {lp_old}"
                )));
            }
            let logits = match logits_memo.entry(feature_key(&step.features)) {
                std::collections::hash_map::Entry::Occupied(e) => *e.get(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    *e.insert(policy.forward_graph(tape, params, &step.features)?)
                }
            };
            let lp_plain = match (&step.action.kind, policy.arch.head) {
                (ActionKind::Bits(bits), HeadKind::Bernoulli) => {
                    bernoulli_logprob_graph(tape, logits, 1.0, bits, &step.action.support)?
                }
                (ActionKind::Ordered(list), HeadKind::Dpls) => {
                    dpls_logprob_graph(tape, logits, 1.0, list, &step.action.support)?
                }
                _ => {
                    return Err(EnvError::Contract(
                        "action kind does not match the policy head".into(),
                    ))
                }
            };
            let lp_new = match (&cfg.es, &step.action.expert_bits) {
                (Some(_), Some(expert_bits)) => {
                    let g = cfg.group_size;
                    let gf = g as f64 / (g + 1) as f64;
                    let ef = 1.0 / (g + 1) as f64;
                    let matches = match &step.action.kind {
                        ActionKind::Bits(bits) => bits == expert_bits,
                        ActionKind::Ordered(_) => false,
                    };
                    if matches {
                        let p = tape.exp(lp_plain)?;
                        let scaled = tape.scale(p, gf)?;
                        let shifted = {
                            let c = tape.scalar_input(ef);
                            tape.add(scaled, c)?
                        };
                        tape.log(shifted)?
                    } else {
                        let c = tape.scalar_input(gf.ln());
                        tape.add(lp_plain, c)?
                    }
                }
                (Some(_), None) => {
                    return Err(EnvError::Contract(
                        "expert steering group without recorded expert actions".into(),
                    ))
                }
                _ => lp_plain,
            };
            let old_node = tape.scalar_input(-lp_old);
            let diff = tape.add(lp_new, old_node)?;
            let rho = tape.exp(diff)?;
            let rho_v = tape.scalar(rho);
            if !rho_v.is_finite() {
                return Err(EnvError::Contract(format!(
                    "non-finite importance ratio at a stored step (logprob_new {} vs old {lp_old})",
                    tape.scalar(lp_new)
                )));
            }
            let mut coeff = 0.0;
            let mut const_acc = 0.0;
            for owner in &owners {
                let unclipped = rho_v * owner.advantage;
                let clipped = rho_v.clamp(1.0 - eps, 1.0 + eps) * owner.advantage;
                terms += 1;
                if clipped < unclipped {
                    // Clip strictly active: a constant with zero gradient.
                    clipped_terms += 1;
                    const_acc += owner.weight * clipped;
                } else {
                    coeff += owner.weight * owner.advantage;
                }
            }
            if coeff != 0.0 {
                let term = tape.scale(rho, coeff)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            if const_acc != 0.0 {
                let term = tape.scalar_input(const_acc);
                total = Some(match total {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
        }
    }
    let objective = match total {
        Some(acc) => acc,
        None => tape.scalar_input(0.0),
    };
    let loss = tape.scale(objective, -1.0)?;
    let stats = LossStats {
        value: tape.scalar(loss),
        clip_frac: if terms == 0 {
            0.0
        } else {
            clipped_terms as f64 / terms as f64
        },
        terms,
    };
    Ok((loss, stats))
}

/// Clipped surrogate loss (to minimize) for a single group.
pub fn grpo_loss(
    policy: &Policy,
    params: &ParamStore,
    group: &RolloutGroup,
    cfg: &TrainConfig,
) -> Result<(Tape, NodeId, LossStats), EnvError> {
    let mut tape = Tape::new();
    let (loss, stats) = batch_loss_graph(&mut tape, policy, params, std::slice::from_ref(group), cfg)?;
    Ok((tape, loss, stats))
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_correct: f64,
    pub mean_steps: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_frac: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "step,mean_reward,mean_correct,mean_steps,lr,grad_norm,clip_frac";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.mean_correct,
            self.mean_steps,
            self.lr,
            self.grad_norm,
            self.clip_frac
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub metrics: Vec<MetricsRow>,
    /// Groups whose expert-member count differed from the configured E.
    pub expert_count_violations: usize,
    /// Smallest stored mixture log-likelihood among expert members.
    pub min_expert_mixture_lp: f64,
}

/// Full training loop: per optimizer step, sample a batch of prompts,
/// collect a group per prompt, compute rewards and advantages, and apply one
/// update. Batches whose advantages are identically zero are skipped so
/// uninformative groups cause no drift. Aborts after more than five
/// consecutive non-finite losses.
pub fn train(
    env: &Environment,
    denoiser: &dyn Denoiser,
    policy: &Policy,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&MetricsRow, &ParamStore),
) -> Result<TrainOutcome, EnvError> {
    cfg.validate(policy.arch.head)?;
    let mut params = crate::policy::init_policy(&policy.arch, &mut stream(seed, "policy-init", &[]))?;
    let mut opt = Optimizer::new(optim::OptimConfig {
        lr: cfg.lr,
        schedule: cfg.schedule,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps * cfg.epochs,
        weight_decay: cfg.weight_decay,
        max_grad_norm: cfg.max_grad_norm,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut nonfinite_streak = 0usize;
    let mut expert_count_violations = 0usize;
    let mut min_expert_mixture_lp = f64::INFINITY;
    let expected_experts = usize::from(cfg.es.is_some());
    let total_steps = cfg.steps * cfg.epochs;

    for step in 0..total_steps {
        let groups = collect_batch(env, denoiser, policy, &params, cfg, seed, step)?;
        for group in &groups {
            let experts = group.members.iter().filter(|m| m.is_expert).count();
            if experts != expected_experts {
                expert_count_violations += 1;
            }
            for member in group.members.iter().filter(|m| m.is_expert) {
                for s in &member.steps {
                    if let Some(lp) = s.action.logprob_old {
                        min_expert_mixture_lp = min_expert_mixture_lp.min(lp);
                    }
                }
            }
        }

        let n_members: usize = groups.iter().map(|g| g.members.len()).sum();
        let mean_reward =
            groups.iter().flat_map(|g| g.rewards.iter()).sum::<f64>() / n_members as f64;
        let mean_correct = groups
            .iter()
            .flat_map(|g| g.correct.iter())
            .filter(|&&c| c)
            .count() as f64
            / n_members as f64;
        let mean_steps = groups
            .iter()
            .flat_map(|g| g.members.iter())
            .map(|m| m.steps_used() as f64)
            .sum::<f64>()
            / n_members as f64;

        let informative = groups.iter().any(|g| g.advantages().iter().any(|&a| a != 0.0));
        let (stats, opt_stats) = if informative {
            let mut tape = Tape::new();
            let (loss, stats) = batch_loss_graph(&mut tape, policy, &params, &groups, cfg)?;
            if !stats.value.is_finite() {
                nonfinite_streak += 1;
                if nonfinite_streak > 5 {
                    return Err(EnvError::Diverged(step));
                }
                (stats, None)
            } else {
                nonfinite_streak = 0;
                let grads = tape.backward(loss, &params)?;
                let s = opt.step(&mut params, &grads);
                (stats, Some(s))
            }
        } else {
            (LossStats::default(), None)
        };

        let row = MetricsRow {
            step,
            mean_reward,
            mean_correct,
            mean_steps,
            lr: opt_stats.map_or_else(|| opt.lr_at(opt.applied_updates()), |s: StepStats| s.lr),
            grad_norm: opt_stats.map_or(0.0, |s| s.grad_norm),
            clip_frac: stats.clip_frac,
        };
        on_step(&row, &params);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        params,
        metrics,
        expert_count_violations,
        min_expert_mixture_lp,
    })
}

/// Collect the groups for one optimizer step, optionally across worker
/// threads. Every rollout owns its RNG stream, so the schedule of workers
/// cannot affect results.
fn collect_batch(
    env: &Environment,
    denoiser: &dyn Denoiser,
    policy: &Policy,
    params: &ParamStore,
    cfg: &TrainConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<RolloutGroup>, EnvError> {
    let tasks: Vec<(Vec<Token>, Vec<Token>)> = (0..cfg.batch_prompts)
        .map(|p| {
            let mut rng = stream(seed, "task", &[step as u64, p as u64]);
            env.sample_task(&mut rng)
        })
        .collect();
    let cache = ForwardCache::new();
    let workers = cfg.rollout_workers.max(1).min(cfg.batch_prompts);
    if workers == 1 {
        return tasks
            .iter()
            .enumerate()
            .map(|(p, (prompt, reference))| {
                collect_group(
                    env, denoiser, policy, params, prompt, reference, cfg, seed, step, p,
                    Some(&cache),
                )
            })
            .collect();
    }
    let mut results: Vec<Option<Result<RolloutGroup, EnvError>>> =
        (0..tasks.len()).map(|_| None).collect();
    let chunk = tasks.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot_chunk) in results.chunks_mut(chunk).enumerate() {
            let tasks = &tasks;
            let cache = &cache;
            scope.spawn(move || {
                for (off, slot) in slot_chunk.iter_mut().enumerate() {
                    let p = w * chunk + off;
                    let (prompt, reference) = &tasks[p];
                    *slot = Some(collect_group(
                        env, denoiser, policy, params, prompt, reference, cfg, seed, step, p,
                        Some(cache),
                    ));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}

/// Convenience for evaluation: reward-weighted stats of a finished group.
pub fn group_gradient(
    policy: &Policy,
    params: &ParamStore,
    group: &RolloutGroup,
    cfg: &TrainConfig,
) -> Result<Gradients, EnvError> {
    let (tape, loss, _) = grpo_loss(policy, params, group, cfg)?;
    Ok(tape.backward(loss, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplicative_reward_matches_closed_form() {
        // 8 steps used out of 256 with alpha = 1.
        let r = reward(1.0, 256, 248, 1.0, RewardShape::Multiplicative);
        assert!((r - 0.96875).abs() < 1e-15);
        assert_eq!(reward(0.0, 256, 248, 3.0, RewardShape::Multiplicative), 0.0);
    }

    #[test]
    fn additive_reward_can_favor_fast_but_wrong() {
        let r = reward(0.0, 256, 248, 1.0, RewardShape::Additive);
        assert!((r + 0.03125).abs() < 1e-15);
    }

    #[test]
    fn advantages_are_group_centered() {
        assert_eq!(advantages(&[1.0, 0.0, 0.0, 1.0]), vec![0.5, -0.5, -0.5, 0.5]);
        assert!(advantages(&[0.7, 0.7, 0.7]).iter().all(|&a| a == 0.0));
        let adv = advantages(&[-0.9, -0.99]);
        assert!((adv[0] - 0.045).abs() < 1e-12);
        assert!((adv[1] + 0.045).abs() < 1e-12);
    }

    #[test]
    fn reward_hacking_dichotomy() {
        // All-wrong group with distinct step counts.
        let steps = [3usize, 5, 9];
        let t = 16;
        let mult: Vec<f64> = steps
            .iter()
            .map(|&s| reward(0.0, t, t - s, 1.0, RewardShape::Multiplicative))
            .collect();
        assert!(advantages(&mult).iter().all(|&a| a == 0.0));
        let add: Vec<f64> = steps
            .iter()
            .map(|&s| reward(0.0, t, t - s, 1.0, RewardShape::Additive))
            .collect();
        let adv = advantages(&add);
        assert!(adv[0] > 0.0, "fastest wrong member gets positive advantage");
        assert!(adv[2] < 0.0);
    }

    #[test]
    fn mixture_logprob_examples() {
        let lp = -2.3;
        let off = es_mixture_logprob(lp, false, 8, 1);
        assert!((off - ((8.0f64 / 9.0).ln() + lp)).abs() < 1e-12);
        let on = es_mixture_logprob(lp, true, 8, 1);
        let expect = (8.0 / 9.0 * lp.exp() + 1.0 / 9.0f64).ln();
        assert!((on - expect).abs() < 1e-12);
        assert!(on >= (1.0f64 / 9.0).ln());
        // Saturated-against policy still lands at the mixture floor.
        let floor = es_mixture_logprob(-800.0, true, 8, 1);
        assert!((floor - (1.0f64 / 9.0).ln()).abs() < 1e-9);
    }
}
