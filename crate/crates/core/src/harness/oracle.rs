//! Brute-force oracles for tiny instances: exhaustive posterior enumeration
//! (the reference for the message-passing denoiser) and exhaustive search
//! over unmask schedules (the reward upper bound no sampler may beat).

use crate::env::{transition, Denoiser, EnvError, Environment, GenState, Token};
use crate::grpo::{reward, RewardShape};
use crate::rng::stream;
use std::collections::HashMap;

/// Per-position posterior over the non-mask vocabulary by full enumeration
/// of completions, weighted by chain likelihood. Ground truth for
/// [`Environment::exact_posterior`] at small sizes.
pub fn enumeration_posterior(
    env: &Environment,
    state: &GenState,
) -> Result<Vec<Vec<f64>>, EnvError> {
    let v = env.vocab();
    let l = env.answer_len();
    let masked = state.masked_positions();
    if masked.len() > 16 {
        return Err(EnvError::Contract(format!(
            "{} masked positions is too many to enumerate",
            masked.len()
        )));
    }
    let mut marginals = vec![vec![0.0; v]; l];
    for (k, &tok) in state.answer.iter().enumerate() {
        if tok != state.mask_token() {
            marginals[k][usize::from(tok)] = 1.0;
        }
    }
    if masked.is_empty() {
        return Ok(marginals);
    }

    let seq_prob = |answer: &[Token]| -> f64 {
        let mut p = 1.0;
        let mut prev: Option<Token> = state.prompt.last().copied();
        if state.prompt.is_empty() {
            p *= env.marginal(0)[usize::from(answer[0])];
            prev = Some(answer[0]);
            for &a in &answer[1..] {
                p *= env.transition_prob(prev.unwrap(), a);
                prev = Some(a);
            }
            return p;
        }
        for &a in answer {
            p *= env.transition_prob(prev.unwrap(), a);
            prev = Some(a);
        }
        p
    };

    let mut total = 0.0;
    let mut acc = vec![vec![0.0; v]; masked.len()];
    let mut completion = vec![0usize; masked.len()];
    loop {
        let mut answer = state.answer.clone();
        for (i, &k) in masked.iter().enumerate() {
            answer[k] = completion[i] as Token;
        }
        let p = seq_prob(&answer);
        if p > 0.0 {
            total += p;
            for (i, &c) in completion.iter().enumerate() {
                acc[i][c] += p;
            }
        }
        // Odometer over V^masked.
        let mut carry = true;
        for slot in completion.iter_mut() {
            *slot += 1;
            if *slot < v {
                carry = false;
                break;
            }
            *slot = 0;
        }
        if carry {
            break;
        }
    }
    if total <= 0.0 {
        return Err(EnvError::InconsistentContext { pos: masked[0] });
    }
    for (i, &k) in masked.iter().enumerate() {
        for c in 0..v {
            marginals[k][c] = acc[i][c] / total;
        }
    }
    Ok(marginals)
}

/// Upper bound on the number of answer positions the schedule oracle will
/// enumerate over.
pub const ORACLE_MAX_LEN: usize = 12;

#[derive(Debug, Clone)]
pub struct OracleResult {
    /// Best achievable terminal reward over all unmask schedules.
    pub best_reward: f64,
    /// A schedule attaining it: the position sets unmasked per step.
    pub schedule: Vec<Vec<usize>>,
    /// Steps the witnessing schedule takes (answer length when no correct
    /// completion is reachable).
    pub steps: usize,
}

/// Exhaustively evaluate every sequence of non-empty unmask subsets under
/// greedy (tau = 0) dynamics and return the best multiplicative reward with
/// a witnessing schedule. States are memoized on the committed answer, which
/// turns the search into shortest-path over a DAG of mask patterns.
pub fn brute_force_best(
    env: &Environment,
    denoiser: &dyn Denoiser,
    prompt: &[Token],
    reference: &[Token],
    alpha: f64,
) -> Result<OracleResult, EnvError> {
    let l = env.answer_len();
    if l > ORACLE_MAX_LEN {
        return Err(EnvError::Contract(format!(
            "answer length {l} exceeds the oracle bound {ORACLE_MAX_LEN}"
        )));
    }
    const INF: u32 = u32::MAX;
    // answer -> (min steps to a correct completion, best action)
    let mut memo: HashMap<Vec<Token>, (u32, Option<Vec<bool>>)> = HashMap::new();
    let mut rng = stream(0, "oracle", &[]);

    fn solve(
        env: &Environment,
        denoiser: &dyn Denoiser,
        prompt: &[Token],
        reference: &[Token],
        state: &GenState,
        memo: &mut HashMap<Vec<Token>, (u32, Option<Vec<bool>>)>,
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> Result<(u32, Option<Vec<bool>>), EnvError> {
        const INF: u32 = u32::MAX;
        if let Some(hit) = memo.get(&state.answer) {
            return Ok(hit.clone());
        }
        if state.is_complete() {
            let ok = env.correctness(prompt, &state.answer, reference);
            let res = (if ok { 0 } else { INF }, None);
            memo.insert(state.answer.clone(), res.clone());
            return Ok(res);
        }
        if memo.len() > 2_000_000 {
            return Err(EnvError::Contract("oracle state space exploded".into()));
        }
        // Cycle-safe placeholder (states form a DAG, commits only grow).
        memo.insert(state.answer.clone(), (INF, None));
        let den = match denoiser.denoise(state) {
            Ok(d) => d,
            Err(EnvError::InconsistentContext { .. }) => {
                // Dead end: off-manifold state, no correct completion.
                return Ok((INF, None));
            }
            Err(e) => return Err(e),
        };
        let masked = state.masked_positions();
        let m = masked.len();
        let mut best = (INF, None);
        for subset in 1u64..(1u64 << m) {
            let mut bits = vec![false; state.answer.len()];
            for (i, &k) in masked.iter().enumerate() {
                if subset & (1 << i) != 0 {
                    bits[k] = true;
                }
            }
            let next = transition(state, &bits, &den, 0.0, rng);
            let (sub, _) = solve(env, denoiser, prompt, reference, &next, memo, rng)?;
            if sub != INF && sub + 1 < best.0 {
                best = (sub + 1, Some(bits));
            }
        }
        memo.insert(state.answer.clone(), best.clone());
        Ok(best)
    }

    let start = GenState::new(prompt.to_vec(), l, l, env.mask_token());
    let (steps, _) = solve(env, denoiser, prompt, reference, &start, &mut memo, &mut rng)?;
    if steps == INF || steps as usize > l {
        return Ok(OracleResult {
            best_reward: 0.0,
            schedule: Vec::new(),
            steps: l,
        });
    }
    // Reconstruct the witnessing schedule.
    let mut schedule = Vec::new();
    let mut state = start;
    while !state.is_complete() {
        let (_, action) = memo.get(&state.answer).cloned().expect("memoized");
        let bits = action.expect("incomplete optimal state has an action");
        schedule.push(
            bits.iter()
                .enumerate()
                .filter_map(|(k, &b)| b.then_some(k))
                .collect(),
        );
        let den = denoiser.denoise(&state)?;
        state = transition(&state, &bits, &den, 0.0, &mut rng);
    }
    let best_reward = reward(
        1.0,
        l,
        l - steps as usize,
        alpha,
        RewardShape::Multiplicative,
    );
    Ok(OracleResult {
        best_reward,
        schedule,
        steps: steps as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{MarkovChainSpec, RewardMode};

    #[test]
    fn enumeration_matches_exact_posterior_on_a_random_chain() {
        let spec = MarkovChainSpec {
            vocab_size: 3,
            initial_dist: vec![0.5, 0.25, 0.25],
            transition: vec![0.2, 0.5, 0.3, 0.4, 0.1, 0.5, 0.25, 0.25, 0.5],
            prompt_len: 0,
            answer_len: 6,
        };
        let env = Environment::new(spec, RewardMode::Validity).unwrap();
        let mask = env.mask_token();
        let state =
            GenState::with_answer(vec![], vec![mask, 2, mask, mask, 0, mask], 5, mask);
        let exact = env.exact_posterior(&state).unwrap();
        let brute = enumeration_posterior(&env, &state).unwrap();
        for k in 0..6 {
            for c in 0..3 {
                let d = (exact.row(k)[c] - brute[k][c]).abs();
                assert!(d < 1e-12, "pos {k} tok {c}: {d}");
            }
        }
    }

    #[test]
    fn oracle_on_deterministic_cycle_finds_reward_one_at_alpha_zero() {
        let env = Environment::new(MarkovChainSpec::cyclic(3, 1, 4), RewardMode::Validity).unwrap();
        let den = env.exact_denoiser();
        let res = brute_force_best(&env, &den, &[0], &[1, 2, 0, 1], 0.0).unwrap();
        assert_eq!(res.best_reward, 1.0);
        assert_eq!(res.steps, 1); // the posterior is one-hot: unmask all at once
    }

    #[test]
    fn oracle_on_prompted_two_mode_unmasks_everything_in_one_step() {
        let l = 4;
        let env = Environment::new(MarkovChainSpec::two_mode(1, l), RewardMode::Validity).unwrap();
        let den = env.exact_denoiser();
        for alpha in [0.0, 1.0, 2.5] {
            let res = brute_force_best(&env, &den, &[1], &[1, 1, 1, 1], alpha).unwrap();
            let expect = (1.0 - 1.0 / l as f64).powf(alpha);
            assert!((res.best_reward - expect).abs() < 1e-12);
            assert_eq!(res.schedule.len(), 1);
            assert_eq!(res.schedule[0], vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn oracle_on_alternating_chain_needs_two_steps() {
        let env =
            Environment::new(MarkovChainSpec::alternating(0, 4), RewardMode::Validity).unwrap();
        let den = env.exact_denoiser();
        let res = brute_force_best(&env, &den, &[], &[0, 1, 0, 1], 1.0).unwrap();
        assert_eq!(res.steps, 2);
        assert!((res.best_reward - (1.0 - 2.0 / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn oracle_refuses_oversized_instances() {
        let env =
            Environment::new(MarkovChainSpec::two_mode(0, 16), RewardMode::Validity).unwrap();
        let den = env.exact_denoiser();
        assert!(brute_force_best(&env, &den, &[], &[0; 16], 0.0).is_err());
    }
}
