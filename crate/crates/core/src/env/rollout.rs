//! The MDP loop: denoise, select, transition, repeat until every position is
//! committed or the step budget runs out. Records per-step observations,
//! actions and stored log-probabilities for the trainer.

use super::{
    active_block, transition, Denoiser, DenoiserOutput, EnvError, Environment, GenState, Token,
};
use rand_chacha::ChaCha12Rng;

/// Per-step observation fed to samplers: for each position the top-n
/// confidences in descending order (committed positions contribute
/// (1.0, 0, ...)), a mask bit, and the shared normalized time index.
#[derive(Debug, Clone)]
pub struct StepFeatures {
    pub len: usize,
    pub top_n: usize,
    /// len x (top_n + 1) row-major: confidences then the mask bit.
    pub per_pos: Vec<f64>,
    /// t / T with the countdown convention, so the first step sees 1.0.
    pub time_frac: f64,
}

impl StepFeatures {
    pub fn build(state: &GenState, den: &DenoiserOutput, top_n: usize, t_budget: usize) -> Self {
        assert!(top_n >= 1);
        let l = state.answer.len();
        let width = top_n + 1;
        let mut per_pos = vec![0.0; l * width];
        let mut scratch: Vec<f64> = Vec::with_capacity(den.vocab);
        for k in 0..l {
            let row = &mut per_pos[k * width..(k + 1) * width];
            if state.is_masked(k) {
                scratch.clear();
                scratch.extend_from_slice(den.row(k));
                scratch.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
                for (slot, &c) in row.iter_mut().zip(scratch.iter().take(top_n)) {
                    *slot = c;
                }
                row[top_n] = 1.0;
            } else {
                row[0] = 1.0;
            }
        }
        StepFeatures {
            len: l,
            top_n,
            per_pos,
            time_frac: state.t as f64 / t_budget.max(1) as f64,
        }
    }

    pub fn width(&self) -> usize {
        self.top_n + 1
    }
}

/// An unmasking decision: a bit vector for Bernoulli-style samplers, or an
/// ordered position list for sequential samplers.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionKind {
    Bits(Vec<bool>),
    Ordered(Vec<usize>),
}

impl ActionKind {
    pub fn to_bits(&self, len: usize) -> Vec<bool> {
        match self {
            ActionKind::Bits(b) => b.clone(),
            ActionKind::Ordered(list) => {
                let mut bits = vec![false; len];
                for &k in list {
                    bits[k] = true;
                }
                bits
            }
        }
    }

    pub fn selected(&self) -> Vec<usize> {
        match self {
            ActionKind::Bits(b) => b
                .iter()
                .enumerate()
                .filter_map(|(k, &s)| s.then_some(k))
                .collect(),
            ActionKind::Ordered(list) => list.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ActionRecord {
    pub kind: ActionKind,
    /// Log-likelihood under the behavior policy at sampling time; `None`
    /// for heuristics.
    pub logprob_old: Option<f64>,
    /// Positions the likelihood ranged over (masked within the active
    /// block).
    pub support: Vec<usize>,
    /// The deterministic expert's action at the same state, recorded when
    /// expert steering is on so the mixture indicator can be re-evaluated.
    pub expert_bits: Option<Vec<bool>>,
}

/// Anything that can turn an observation into an unmasking action.
pub trait Sampler {
    fn select(
        &mut self,
        state: &GenState,
        den: &DenoiserOutput,
        feats: &StepFeatures,
        support: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Result<ActionRecord, EnvError>;
}

#[derive(Debug, Clone)]
pub struct RolloutSettings {
    /// Semi-AR block length; 0 means one block spanning the answer.
    pub block_len: usize,
    /// dLLM sampling temperature for committing tokens (0 = argmax).
    pub tau: f64,
    /// Whether the sampler may apply its progress fallback.
    pub fallback: bool,
    /// Step budget T; rollouts stopping here are incomplete.
    pub max_steps: usize,
    /// Feature width (top-n confidences) recorded per position.
    pub top_n: usize,
}

impl RolloutSettings {
    pub fn greedy(answer_len: usize) -> Self {
        RolloutSettings {
            block_len: 0,
            tau: 0.0,
            fallback: false,
            max_steps: answer_len,
            top_n: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub features: StepFeatures,
    pub action: ActionRecord,
    /// Tokens committed by this step, as (position, token).
    pub committed: Vec<(usize, Token)>,
    /// Countdown index when the action was taken.
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub steps: Vec<StepRecord>,
    /// Countdown value at completion ("first timestep with all tokens
    /// unmasked"); 0 for incomplete rollouts.
    pub t_hat: usize,
    pub nfe: usize,
    pub complete: bool,
    pub final_answer: Vec<Token>,
    /// Marks trajectories drawn from the expert during expert steering.
    pub is_expert: bool,
}

impl Trajectory {
    pub fn steps_used(&self) -> usize {
        self.steps.len()
    }

    /// Debug dump: one record per step with the countdown index, the action
    /// bitmask in hex (bit k = position k), newly committed tokens and the
    /// cumulative NFE count.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        let l = self.final_answer.len();
        for (i, step) in self.steps.iter().enumerate() {
            let bits = step.action.kind.to_bits(l);
            let committed = step
                .committed
                .iter()
                .map(|(k, tok)| format!("{k}:{tok}"))
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&format!(
                "step {i}: t={} action=0x{} committed=[{}] nfe={}\n",
                step.t,
                bits_to_hex(&bits),
                committed,
                i + 1
            ));
        }
        out
    }
}

fn bits_to_hex(bits: &[bool]) -> String {
    let nibbles = bits.len().div_ceil(4);
    let mut digits = Vec::with_capacity(nibbles);
    for n in 0..nibbles {
        let mut val = 0u8;
        for b in 0..4 {
            let idx = n * 4 + b;
            if idx < bits.len() && bits[idx] {
                val |= 1 << b;
            }
        }
        digits.push(val);
    }
    // Most significant nibble first.
    let mut s: String = digits
        .iter()
        .rev()
        .map(|d| char::from_digit(u32::from(*d), 16).unwrap())
        .collect();
    while s.len() > 1 && s.starts_with('0') {
        s.remove(0);
    }
    s
}

/// Run the generation MDP to completion or to the step budget.
pub fn rollout(
    env: &Environment,
    denoiser: &dyn Denoiser,
    sampler: &mut dyn Sampler,
    prompt: &[Token],
    settings: &RolloutSettings,
    rng: &mut ChaCha12Rng,
) -> Result<Trajectory, EnvError> {
    let l = env.answer_len();
    if settings.block_len != 0 && l % settings.block_len != 0 {
        return Err(EnvError::Contract(format!(
            "block_len {} does not divide answer_len {l}",
            settings.block_len
        )));
    }
    let mut state = GenState::new(prompt.to_vec(), l, settings.max_steps, env.mask_token());
    let mut steps = Vec::new();
    while !state.is_complete() && steps.len() < settings.max_steps {
        state.active_block = active_block(&state.answer, state.mask_token(), settings.block_len);
        // A greedy parallel commit can drive the state off the data
        // manifold; the exact denoiser reports that as an inconsistent
        // context. A real masked predictor would keep emitting tokens and
        // the final answer would be wrong anyway, so the rollout ends here
        // as incomplete (reward zero) instead of propagating the error.
        let den = match denoiser.denoise(&state) {
            Ok(den) => den,
            Err(EnvError::InconsistentContext { .. }) => break,
            Err(e) => return Err(e),
        };
        let feats = StepFeatures::build(&state, &den, settings.top_n, settings.max_steps);
        let support: Vec<usize> = {
            let (lo, hi) = state.active_block.expect("incomplete state has a block");
            (lo..hi).filter(|&k| state.is_masked(k)).collect()
        };
        let action = sampler.select(&state, &den, &feats, &support, rng)?;
        let bits = action.kind.to_bits(l);
        if let Some(k) = bits
            .iter()
            .enumerate()
            .find_map(|(k, &s)| (s && !state.is_masked(k)).then_some(k))
        {
            return Err(EnvError::SelectionOutsideMask(k));
        }
        let next = transition(&state, &bits, &den, settings.tau, rng);
        let committed: Vec<(usize, Token)> = (0..l)
            .filter(|&k| state.is_masked(k) && !next.is_masked(k))
            .map(|k| (k, next.answer[k]))
            .collect();
        steps.push(StepRecord {
            features: feats,
            action,
            committed,
            t: state.t,
        });
        state = next;
    }
    let complete = state.is_complete();
    Ok(Trajectory {
        prompt: prompt.to_vec(),
        t_hat: if complete { state.t } else { 0 },
        nfe: state.nfe,
        complete,
        final_answer: state.answer,
        steps,
        is_expert: false,
    })
}

/// Unmasks every position in the support; the fastest possible sampler.
pub struct UnmaskAll;

impl Sampler for UnmaskAll {
    fn select(
        &mut self,
        state: &GenState,
        _den: &DenoiserOutput,
        _feats: &StepFeatures,
        support: &[usize],
        _rng: &mut ChaCha12Rng,
    ) -> Result<ActionRecord, EnvError> {
        let mut bits = vec![false; state.answer.len()];
        for &k in support {
            bits[k] = true;
        }
        Ok(ActionRecord {
            kind: ActionKind::Bits(bits),
            logprob_old: None,
            support: support.to_vec(),
            expert_bits: None,
        })
    }
}

/// Unmasks exactly the first masked position per step; fully sequential.
pub struct OneAtATime;

impl Sampler for OneAtATime {
    fn select(
        &mut self,
        state: &GenState,
        _den: &DenoiserOutput,
        _feats: &StepFeatures,
        support: &[usize],
        _rng: &mut ChaCha12Rng,
    ) -> Result<ActionRecord, EnvError> {
        let mut bits = vec![false; state.answer.len()];
        if let Some(&k) = support.first() {
            bits[k] = true;
        }
        Ok(ActionRecord {
            kind: ActionKind::Bits(bits),
            logprob_old: None,
            support: support.to_vec(),
            expert_bits: None,
        })
    }
}
