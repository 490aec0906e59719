//! The generation environment: a Markov-chain data distribution with an
//! exact per-position posterior denoiser (the ideal masked predictor), the
//! unmasking transition kernel, semi-autoregressive block scheduling, NFE
//! accounting and the correctness predicate. An optional trained denoiser
//! lives in [`mdm`].

pub mod mdm;
pub mod rollout;

use crate::autodiff::GradError;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

pub type Token = u16;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("inconsistent context at answer position {pos}: zero-probability bracket")]
    InconsistentContext { pos: usize },
    #[error("sampler selected position {0} outside the masked set")]
    SelectionOutsideMask(usize),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("denoiser training diverged at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// 1 iff every adjacent pair of the full sequence has positive
    /// transition probability (and the first token positive initial
    /// probability when there is no prompt).
    Validity,
    /// 1 iff the answer equals the sampled reference.
    ExactMatch,
}

impl RewardMode {
    pub fn parse(s: &str) -> Result<Self, EnvError> {
        match s {
            "validity" => Ok(RewardMode::Validity),
            "exact_match" => Ok(RewardMode::ExactMatch),
            other => Err(EnvError::InvalidSpec(format!(
                "reward_mode must be validity|exact_match, got '{other}'"
            ))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            RewardMode::Validity => "validity",
            RewardMode::ExactMatch => "exact_match",
        }
    }
}

/// First-order Markov chain over `vocab_size` symbols; the mask token is the
/// extra index `vocab_size`.
#[derive(Debug, Clone)]
pub struct MarkovChainSpec {
    pub vocab_size: usize,
    pub initial_dist: Vec<f64>,
    /// Row-major vocab_size x vocab_size; zero entries are forbidden pairs.
    pub transition: Vec<f64>,
    pub prompt_len: usize,
    pub answer_len: usize,
}

const DIST_TOL: f64 = 1e-12;

impl MarkovChainSpec {
    pub fn mask_token(&self) -> Token {
        self.vocab_size as Token
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let v = self.vocab_size;
        if v == 0 || v >= usize::from(Token::MAX) {
            return Err(EnvError::InvalidSpec(format!("vocab_size {v} out of range")));
        }
        if self.answer_len == 0 {
            return Err(EnvError::InvalidSpec("answer_len must be positive".into()));
        }
        if self.initial_dist.len() != v {
            return Err(EnvError::InvalidSpec(format!(
                "initial_dist has {} entries, expected {v}",
                self.initial_dist.len()
            )));
        }
        if self.transition.len() != v * v {
            return Err(EnvError::InvalidSpec(format!(
                "transition has {} entries, expected {}",
                self.transition.len(),
                v * v
            )));
        }
        if self.initial_dist.iter().any(|&p| p < 0.0)
            || self.transition.iter().any(|&p| p < 0.0)
        {
            return Err(EnvError::InvalidSpec("negative probability".into()));
        }
        let s: f64 = self.initial_dist.iter().sum();
        if (s - 1.0).abs() > DIST_TOL {
            return Err(EnvError::InvalidSpec(format!("initial_dist sums to {s}")));
        }
        for r in 0..v {
            let s: f64 = self.transition[r * v..(r + 1) * v].iter().sum();
            if (s - 1.0).abs() > DIST_TOL {
                return Err(EnvError::InvalidSpec(format!("transition row {r} sums to {s}")));
            }
            if self.transition[r * v..(r + 1) * v].iter().all(|&p| p <= 0.0) {
                return Err(EnvError::InvalidSpec(format!("state {r} has no outgoing transition")));
            }
        }
        Ok(())
    }

    /// Two isolated modes: uniform initial over {0, 1}, identity transition.
    /// Valid sequences are constant runs of one symbol.
    pub fn two_mode(prompt_len: usize, answer_len: usize) -> Self {
        MarkovChainSpec {
            vocab_size: 2,
            initial_dist: vec![0.5, 0.5],
            transition: vec![1.0, 0.0, 0.0, 1.0],
            prompt_len,
            answer_len,
        }
    }

    /// Two alternating modes: uniform initial over {0, 1} and a transition
    /// that always swaps the symbol. Valid sequences are 0101... or 1010...,
    /// so committing the same symbol at mixed parities is incoherent; this
    /// is the smallest environment where unmasking everything at once fails.
    pub fn alternating(prompt_len: usize, answer_len: usize) -> Self {
        MarkovChainSpec {
            vocab_size: 2,
            initial_dist: vec![0.5, 0.5],
            transition: vec![0.0, 1.0, 1.0, 0.0],
            prompt_len,
            answer_len,
        }
    }

    /// Deterministic cycle 0 -> 1 -> ... -> V-1 -> 0 with uniform initial.
    pub fn cyclic(vocab_size: usize, prompt_len: usize, answer_len: usize) -> Self {
        let mut transition = vec![0.0; vocab_size * vocab_size];
        for s in 0..vocab_size {
            transition[s * vocab_size + (s + 1) % vocab_size] = 1.0;
        }
        MarkovChainSpec {
            vocab_size,
            initial_dist: vec![1.0 / vocab_size as f64; vocab_size],
            transition,
            prompt_len,
            answer_len,
        }
    }
}

/// The MDP state: prompt, partially masked answer, countdown step index and
/// NFE counter. `active_block` is the semi-AR restriction in force, set by
/// the rollout loop.
#[derive(Debug, Clone)]
pub struct GenState {
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    pub t: usize,
    pub nfe: usize,
    pub active_block: Option<(usize, usize)>,
    mask: Token,
}

impl GenState {
    pub fn new(prompt: Vec<Token>, answer_len: usize, t_budget: usize, mask: Token) -> Self {
        GenState {
            prompt,
            answer: vec![mask; answer_len],
            t: t_budget,
            nfe: 0,
            active_block: None,
            mask,
        }
    }

    /// State with some answer positions already committed; used by tests and
    /// verification fixtures.
    pub fn with_answer(
        prompt: Vec<Token>,
        answer: Vec<Token>,
        t: usize,
        mask: Token,
    ) -> Self {
        GenState {
            prompt,
            answer,
            t,
            nfe: 0,
            active_block: None,
            mask,
        }
    }

    pub fn mask_token(&self) -> Token {
        self.mask
    }

    pub fn is_masked(&self, k: usize) -> bool {
        self.answer[k] == self.mask
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.answer.len()).filter(|&k| self.is_masked(k)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.answer.iter().all(|&a| a != self.mask)
    }
}

/// Per-position denoiser output over the non-mask vocabulary. Rows for
/// already committed positions are one-hot on the committed token, so the
/// confidences are a total function of the state.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub vocab: usize,
    /// answer_len x vocab, row-major.
    pub dists: Vec<f64>,
    /// Per-position max probability.
    pub confidences: Vec<f64>,
}

impl DenoiserOutput {
    pub fn from_dists(vocab: usize, dists: Vec<f64>) -> Self {
        let confidences = dists
            .chunks(vocab)
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        DenoiserOutput {
            vocab,
            dists,
            confidences,
        }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.dists[k * self.vocab..(k + 1) * self.vocab]
    }

    /// Argmax token with ties broken by lowest index.
    pub fn argmax(&self, k: usize) -> Token {
        let row = self.row(k);
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        best as Token
    }
}

/// A source of per-position token distributions for the current state.
pub trait Denoiser: Sync {
    fn denoise(&self, state: &GenState) -> Result<DenoiserOutput, EnvError>;
}

/// The exact conditional of the chain given all observed tokens; the ideal
/// masked predictor for this data distribution.
pub struct ExactDenoiser<'a> {
    env: &'a Environment,
}

impl Denoiser for ExactDenoiser<'_> {
    fn denoise(&self, state: &GenState) -> Result<DenoiserOutput, EnvError> {
        self.env.exact_posterior(state)
    }
}

/// Immutable bundle of chain spec, reward mode and precomputed transition
/// powers/marginals. Safe for concurrent reads.
pub struct Environment {
    spec: MarkovChainSpec,
    reward_mode: RewardMode,
    /// powers[j] = transition^j, row-major, j in 0..=prompt_len+answer_len.
    powers: Vec<Vec<f64>>,
    /// marginals[j] = initial_dist . transition^j for absolute position j.
    marginals: Vec<Vec<f64>>,
}

pub fn build_env(spec: MarkovChainSpec, reward_mode: RewardMode) -> Result<Environment, EnvError> {
    Environment::new(spec, reward_mode)
}

impl Environment {
    pub fn new(spec: MarkovChainSpec, reward_mode: RewardMode) -> Result<Self, EnvError> {
        spec.validate()?;
        let v = spec.vocab_size;
        let horizon = spec.prompt_len + spec.answer_len;
        let mut powers = Vec::with_capacity(horizon + 1);
        let mut eye = vec![0.0; v * v];
        for i in 0..v {
            eye[i * v + i] = 1.0;
        }
        powers.push(eye);
        for j in 1..=horizon {
            let prev = &powers[j - 1];
            let mut next = vec![0.0; v * v];
            for r in 0..v {
                for m in 0..v {
                    let p = prev[r * v + m];
                    if p == 0.0 {
                        continue;
                    }
                    for c in 0..v {
                        next[r * v + c] += p * spec.transition[m * v + c];
                    }
                }
            }
            powers.push(next);
        }
        let marginals = (0..=horizon)
            .map(|j| {
                let pw = &powers[j];
                (0..v)
                    .map(|c| {
                        (0..v)
                            .map(|r| spec.initial_dist[r] * pw[r * v + c])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        Ok(Environment {
            spec,
            reward_mode,
            powers,
            marginals,
        })
    }

    pub fn spec(&self) -> &MarkovChainSpec {
        &self.spec
    }

    pub fn reward_mode(&self) -> RewardMode {
        self.reward_mode
    }

    pub fn vocab(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn prompt_len(&self) -> usize {
        self.spec.prompt_len
    }

    pub fn answer_len(&self) -> usize {
        self.spec.answer_len
    }

    pub fn mask_token(&self) -> Token {
        self.spec.mask_token()
    }

    pub fn exact_denoiser(&self) -> ExactDenoiser<'_> {
        ExactDenoiser { env: self }
    }

    /// Marginal distribution of the chain at absolute position `j`.
    pub fn marginal(&self, j: usize) -> &[f64] {
        &self.marginals[j]
    }

    pub fn transition_prob(&self, from: Token, to: Token) -> f64 {
        let v = self.spec.vocab_size;
        self.spec.transition[usize::from(from) * v + usize::from(to)]
    }

    /// Draw a full sequence from the chain and split it into prompt and
    /// reference answer.
    pub fn sample_task(&self, rng: &mut ChaCha12Rng) -> (Vec<Token>, Vec<Token>) {
        let v = self.spec.vocab_size;
        let total = self.spec.prompt_len + self.spec.answer_len;
        let mut seq = Vec::with_capacity(total);
        let mut cur = sample_categorical(&self.spec.initial_dist, rng);
        seq.push(cur as Token);
        for _ in 1..total {
            cur = sample_categorical(&self.spec.transition[cur * v..(cur + 1) * v], rng);
            seq.push(cur as Token);
        }
        let answer = seq.split_off(self.spec.prompt_len);
        (seq, answer)
    }

    /// Exact per-position posterior p(x_k = v | all observed tokens),
    /// computed by message passing between the nearest observed neighbors
    /// through transition powers. Pure; increments no counters.
    pub fn exact_posterior(&self, state: &GenState) -> Result<DenoiserOutput, EnvError> {
        let v = self.spec.vocab_size;
        let d = self.spec.prompt_len;
        let l = self.spec.answer_len;
        debug_assert_eq!(state.answer.len(), l);
        let mut dists = vec![0.0; l * v];
        for k in 0..l {
            let row = &mut dists[k * v..(k + 1) * v];
            if !state.is_masked(k) {
                row[usize::from(state.answer[k])] = 1.0;
                continue;
            }
            let j = d + k; // absolute index
            // Nearest observed neighbor to the left (answer first, then the
            // prompt tail).
            let left = (0..k)
                .rev()
                .find(|&i| !state.is_masked(i))
                .map(|i| (d + i, state.answer[i]))
                .or_else(|| {
                    if d > 0 {
                        Some((d - 1, state.prompt[d - 1]))
                    } else {
                        None
                    }
                });
            let right = ((k + 1)..l)
                .find(|&m| !state.is_masked(m))
                .map(|m| (d + m, state.answer[m]));

            let mut total = 0.0;
            for c in 0..v {
                let lm = match left {
                    Some((i, u)) => self.powers[j - i][usize::from(u) * v + c],
                    None => self.marginals[j][c],
                };
                let rm = match right {
                    Some((m, w)) => self.powers[m - j][c * v + usize::from(w)],
                    None => 1.0,
                };
                row[c] = lm * rm;
                total += row[c];
            }
            if total <= 0.0 {
                return Err(EnvError::InconsistentContext { pos: k });
            }
            for p in row.iter_mut() {
                *p /= total;
            }
        }
        Ok(DenoiserOutput::from_dists(v, dists))
    }

    /// Binary correctness of a fully committed answer. Incomplete answers
    /// are incorrect by definition.
    pub fn correctness(&self, prompt: &[Token], answer: &[Token], reference: &[Token]) -> bool {
        let mask = self.mask_token();
        if answer.iter().any(|&a| a == mask) {
            return false;
        }
        match self.reward_mode {
            RewardMode::ExactMatch => answer == reference,
            RewardMode::Validity => {
                if prompt.is_empty() && self.spec.initial_dist[usize::from(answer[0])] <= 0.0 {
                    return false;
                }
                let mut prev: Option<Token> = prompt.last().copied();
                for window in prompt.windows(2) {
                    if self.transition_prob(window[0], window[1]) <= 0.0 {
                        return false;
                    }
                }
                for &a in answer {
                    if let Some(p) = prev {
                        if self.transition_prob(p, a) <= 0.0 {
                            return false;
                        }
                    }
                    prev = Some(a);
                }
                true
            }
        }
    }
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding residue: last positive entry.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("categorical over all-zero weights")
}

/// Forward corruption: replace each token independently with the mask with
/// probability `t`.
pub fn forward_mask(x0: &[Token], t: f64, mask: Token, rng: &mut ChaCha12Rng) -> Vec<Token> {
    debug_assert!((0.0..=1.0).contains(&t));
    x0.iter()
        .map(|&tok| {
            if rng.gen_range(0.0..1.0) < t {
                mask
            } else {
                tok
            }
        })
        .collect()
}

/// One generation transition: commit a token at every selected masked
/// position inside the active block (argmax at tau = 0, tempered sampling
/// otherwise), decrement the countdown and count one denoiser evaluation
/// regardless of how many tokens were unmasked. Bits on non-masked or
/// out-of-block positions are ignored.
pub fn transition(
    state: &GenState,
    action: &[bool],
    den: &DenoiserOutput,
    tau: f64,
    rng: &mut ChaCha12Rng,
) -> GenState {
    debug_assert_eq!(action.len(), state.answer.len());
    let mut next = state.clone();
    let (lo, hi) = state
        .active_block
        .unwrap_or((0, state.answer.len()));
    for (k, &selected) in action.iter().enumerate() {
        if !selected || !state.is_masked(k) || k < lo || k >= hi {
            continue;
        }
        let row = den.row(k);
        let tok = if tau <= 0.0 {
            den.argmax(k)
        } else {
            let inv = 1.0 / tau;
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = row
                .iter()
                .map(|&p| if p > 0.0 { (p / mx).powf(inv) } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
            sample_categorical(&normalized, rng) as Token
        };
        next.answer[k] = tok;
    }
    next.t = state.t.saturating_sub(1);
    next.nfe = state.nfe + 1;
    next
}

/// The earliest block of length `block_len` that still contains a masked
/// position, or `None` when the answer is complete. `block_len == 0` means
/// one block spanning the whole answer.
pub fn active_block(answer: &[Token], mask: Token, block_len: usize) -> Option<(usize, usize)> {
    let first = answer.iter().position(|&a| a == mask)?;
    if block_len == 0 || block_len >= answer.len() {
        return Some((0, answer.len()));
    }
    let b = first / block_len;
    Some((b * block_len, ((b + 1) * block_len).min(answer.len())))
}

/// Parse the environment spec file format: one `key = value` per line with
/// keys vocab_size, initial_dist, transition (row-major), prompt_len,
/// answer_len, reward_mode. `#` starts a comment.
pub fn parse_env_spec(text: &str) -> Result<(MarkovChainSpec, RewardMode), EnvError> {
    let mut vocab_size = None;
    let mut initial_dist = None;
    let mut transition = None;
    let mut prompt_len = None;
    let mut answer_len = None;
    let mut reward_mode = RewardMode::Validity;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            EnvError::InvalidSpec(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |e: &dyn std::fmt::Display| {
            EnvError::InvalidSpec(format!("line {}: {key}: {e}", lineno + 1))
        };
        match key {
            "vocab_size" => vocab_size = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "prompt_len" => prompt_len = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "answer_len" => answer_len = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "initial_dist" => initial_dist = Some(parse_floats(value).map_err(|e| bad(&e))?),
            "transition" => transition = Some(parse_floats(value).map_err(|e| bad(&e))?),
            "reward_mode" => reward_mode = RewardMode::parse(value)?,
            other => {
                return Err(EnvError::InvalidSpec(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    let spec = MarkovChainSpec {
        vocab_size: vocab_size.ok_or_else(|| EnvError::InvalidSpec("missing vocab_size".into()))?,
        initial_dist: initial_dist
            .ok_or_else(|| EnvError::InvalidSpec("missing initial_dist".into()))?,
        transition: transition.ok_or_else(|| EnvError::InvalidSpec("missing transition".into()))?,
        prompt_len: prompt_len.ok_or_else(|| EnvError::InvalidSpec("missing prompt_len".into()))?,
        answer_len: answer_len.ok_or_else(|| EnvError::InvalidSpec("missing answer_len".into()))?,
    };
    spec.validate()?;
    Ok((spec, reward_mode))
}

fn parse_floats(s: &str) -> Result<Vec<f64>, std::num::ParseFloatError> {
    s.split_whitespace().map(|t| t.parse::<f64>()).collect()
}

pub fn format_env_spec(spec: &MarkovChainSpec, reward_mode: RewardMode) -> String {
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        "vocab_size = {}\ninitial_dist = {}\ntransition = {}\nprompt_len = {}\nanswer_len = {}\nreward_mode = {}\n",
        spec.vocab_size,
        fmt(&spec.initial_dist),
        fmt(&spec.transition),
        spec.prompt_len,
        spec.answer_len,
        reward_mode.name()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn two_mode_env_builds_and_identity_chain_is_constant() {
        let env = Environment::new(MarkovChainSpec::two_mode(1, 4), RewardMode::Validity).unwrap();
        let mut rng = stream(0, "task", &[]);
        for _ in 0..20 {
            let (prompt, answer) = env.sample_task(&mut rng);
            assert!(answer.iter().all(|&a| a == prompt[0]));
        }
    }

    #[test]
    fn cyclic_chain_has_unique_continuation() {
        let env = Environment::new(MarkovChainSpec::cyclic(3, 1, 3), RewardMode::ExactMatch).unwrap();
        let mut rng = stream(1, "task", &[]);
        let (prompt, answer) = env.sample_task(&mut rng);
        let expect: Vec<Token> = (1..=3)
            .map(|i| ((usize::from(prompt[0]) + i) % 3) as Token)
            .collect();
        assert_eq!(answer, expect);
    }

    #[test]
    fn invalid_stochastic_matrix_is_rejected() {
        let mut spec = MarkovChainSpec::two_mode(1, 4);
        spec.transition[0] = 0.7;
        assert!(Environment::new(spec, RewardMode::Validity).is_err());
    }

    #[test]
    fn sample_task_marginals_match_matrix_powers() {
        let spec = MarkovChainSpec {
            vocab_size: 3,
            initial_dist: vec![0.5, 0.3, 0.2],
            transition: vec![0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.25, 0.25, 0.5],
            prompt_len: 0,
            answer_len: 4,
        };
        let env = Environment::new(spec, RewardMode::Validity).unwrap();
        let mut rng = stream(2, "task", &[]);
        let n = 100_000;
        let mut counts = vec![vec![0usize; 3]; 4];
        for _ in 0..n {
            let (_, answer) = env.sample_task(&mut rng);
            for (j, &a) in answer.iter().enumerate() {
                counts[j][usize::from(a)] += 1;
            }
        }
        for j in 0..4 {
            let tv: f64 = (0..3)
                .map(|c| (counts[j][c] as f64 / n as f64 - env.marginal(j)[c]).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.01, "position {j}: tv {tv}");
        }
    }

    #[test]
    fn posterior_prompt_determines_two_mode() {
        let env = Environment::new(MarkovChainSpec::two_mode(1, 4), RewardMode::Validity).unwrap();
        let state = GenState::new(vec![0], 4, 4, env.mask_token());
        let den = env.exact_posterior(&state).unwrap();
        for k in 0..4 {
            assert_eq!(den.row(k), &[1.0, 0.0]);
            assert_eq!(den.confidences[k], 1.0);
        }
    }

    #[test]
    fn posterior_empty_prompt_two_mode_is_uniform() {
        let env = Environment::new(MarkovChainSpec::two_mode(0, 4), RewardMode::Validity).unwrap();
        let state = GenState::new(vec![], 4, 4, env.mask_token());
        let den = env.exact_posterior(&state).unwrap();
        for k in 0..4 {
            assert_eq!(den.row(k), &[0.5, 0.5]);
        }
    }

    #[test]
    fn posterior_observed_positions_are_one_hot() {
        let env = Environment::new(MarkovChainSpec::two_mode(0, 4), RewardMode::Validity).unwrap();
        let mask = env.mask_token();
        let state = GenState::with_answer(vec![], vec![1, mask, mask, 1], 3, mask);
        let den = env.exact_posterior(&state).unwrap();
        assert_eq!(den.row(0), &[0.0, 1.0]);
        assert_eq!(den.row(3), &[0.0, 1.0]);
        assert_eq!(den.row(1), &[0.0, 1.0]); // forced by the mode
    }

    #[test]
    fn posterior_inconsistent_context_is_an_error() {
        let env = Environment::new(MarkovChainSpec::two_mode(0, 3), RewardMode::Validity).unwrap();
        let mask = env.mask_token();
        // Both modes observed: the bracket around position 1 is impossible.
        let state = GenState::with_answer(vec![], vec![0, mask, 1], 2, mask);
        assert!(matches!(
            env.exact_posterior(&state),
            Err(EnvError::InconsistentContext { pos: 1 })
        ));
    }

    #[test]
    fn forward_mask_endpoints_and_rate() {
        let mut rng = stream(3, "mask", &[]);
        let x0: Vec<Token> = vec![1; 1000];
        assert_eq!(forward_mask(&x0, 0.0, 9, &mut rng), x0);
        assert!(forward_mask(&x0, 1.0, 9, &mut rng).iter().all(|&t| t == 9));
        let n = 100_000;
        let big: Vec<Token> = vec![1; n];
        let masked = forward_mask(&big, 0.3, 9, &mut rng);
        let frac = masked.iter().filter(|&&t| t == 9).count() as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.005, "fraction {frac}");
    }

    #[test]
    fn transition_empty_action_counts_nfe() {
        let env = Environment::new(MarkovChainSpec::two_mode(0, 4), RewardMode::Validity).unwrap();
        let state = GenState::new(vec![], 4, 4, env.mask_token());
        let den = env.exact_posterior(&state).unwrap();
        let mut rng = stream(4, "tr", &[]);
        let next = transition(&state, &[false; 4], &den, 0.0, &mut rng);
        assert_eq!(next.answer, state.answer);
        assert_eq!(next.nfe, 1);
        assert_eq!(next.t, 3);
    }

    #[test]
    fn transition_greedy_commits_argmax() {
        let spec = MarkovChainSpec {
            vocab_size: 2,
            initial_dist: vec![0.9, 0.1],
            transition: vec![0.9, 0.1, 0.1, 0.9],
            prompt_len: 0,
            answer_len: 1,
        };
        let env = Environment::new(spec, RewardMode::Validity).unwrap();
        let state = GenState::new(vec![], 1, 1, env.mask_token());
        let den = env.exact_posterior(&state).unwrap();
        let mut rng = stream(5, "tr", &[]);
        let next = transition(&state, &[true], &den, 0.0, &mut rng);
        assert_eq!(next.answer[0], 0);
    }

    #[test]
    fn transition_tempered_sampling_matches_row() {
        let env = Environment::new(MarkovChainSpec::two_mode(0, 1), RewardMode::Validity).unwrap();
        let state = GenState::new(vec![], 1, 1, env.mask_token());
        let den = env.exact_posterior(&state).unwrap(); // (0.5, 0.5)
        let mut rng = stream(6, "tr", &[]);
        let n = 10_000;
        let mut ones = 0;
        for _ in 0..n {
            let next = transition(&state, &[true], &den, 1.0, &mut rng);
            if next.answer[0] == 1 {
                ones += 1;
            }
        }
        let f = ones as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.01, "frequency {f}");
    }

    #[test]
    fn correctness_validity_and_exact_match() {
        let env = Environment::new(MarkovChainSpec::two_mode(1, 4), RewardMode::Validity).unwrap();
        assert!(env.correctness(&[0], &[0, 0, 0, 0], &[0, 0, 0, 0]));
        assert!(!env.correctness(&[0], &[0, 0, 1, 1], &[0, 0, 0, 0]));
        let cyc = Environment::new(MarkovChainSpec::cyclic(3, 1, 4), RewardMode::Validity).unwrap();
        assert!(cyc.correctness(&[0], &[1, 2, 0, 1], &[1, 2, 0, 1]));
        let em = Environment::new(MarkovChainSpec::two_mode(0, 2), RewardMode::ExactMatch).unwrap();
        assert!(em.correctness(&[], &[1, 1], &[1, 1]));
        assert!(!em.correctness(&[], &[0, 0], &[1, 1]));
    }

    #[test]
    fn incomplete_answer_is_never_correct() {
        let env = Environment::new(MarkovChainSpec::two_mode(0, 2), RewardMode::Validity).unwrap();
        let mask = env.mask_token();
        assert!(!env.correctness(&[], &[0, mask], &[0, 0]));
    }

    #[test]
    fn active_block_walks_left_to_right() {
        let mask = 9;
        assert_eq!(active_block(&[9, 9, 9, 9], mask, 2), Some((0, 2)));
        assert_eq!(active_block(&[1, 1, 9, 9], mask, 2), Some((2, 4)));
        assert_eq!(active_block(&[1, 9, 9, 9], mask, 2), Some((0, 2)));
        assert_eq!(active_block(&[1, 1, 1, 1], mask, 2), None);
        assert_eq!(active_block(&[9, 1, 1, 9], mask, 0), Some((0, 4)));
    }

    #[test]
    fn env_spec_file_round_trip() {
        let spec = MarkovChainSpec {
            vocab_size: 3,
            initial_dist: vec![0.25, 0.25, 0.5],
            transition: vec![0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.5],
            prompt_len: 2,
            answer_len: 8,
        };
        let text = format_env_spec(&spec, RewardMode::ExactMatch);
        let (parsed, mode) = parse_env_spec(&text).unwrap();
        assert_eq!(parsed.transition, spec.transition);
        assert_eq!(parsed.initial_dist, spec.initial_dist);
        assert_eq!(parsed.prompt_len, 2);
        assert_eq!(mode, RewardMode::ExactMatch);
        assert!(parse_env_spec("vocab_size = 2\nbogus = 1\n").is_err());
    }
}
