//! Training-free baseline samplers over denoiser confidences, and the
//! deterministic expert used by expert steering. Ties are broken by lowest
//! index everywhere so every selection is reproducible; thresholding uses
//! strict `>`.

use crate::env::rollout::{ActionKind, ActionRecord, Sampler, StepFeatures};
use crate::env::{active_block, DenoiserOutput, EnvError, GenState};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeuristicKind {
    RandomK,
    TopK,
    Threshold,
}

impl HeuristicKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeuristicKind::RandomK => "random_k",
            HeuristicKind::TopK => "top_k",
            HeuristicKind::Threshold => "threshold",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeuristicSpec {
    pub kind: HeuristicKind,
    /// Number of positions for random_k / top_k.
    pub k: usize,
    /// Confidence threshold for the threshold sampler, in (0, 1].
    pub lambda: f64,
    /// Block length the expert applies internally (0 = whole answer).
    pub block_len: usize,
}

impl HeuristicSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        match self.kind {
            HeuristicKind::RandomK | HeuristicKind::TopK => {
                if self.k == 0 {
                    return Err(EnvError::Contract("heuristic K must be at least 1".into()));
                }
            }
            HeuristicKind::Threshold => {
                if !(self.lambda > 0.0 && self.lambda <= 1.0) {
                    return Err(EnvError::Contract(format!(
                        "threshold lambda must lie in (0, 1], got {}",
                        self.lambda
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Uniformly chosen min(K, |masked|) positions.
pub fn random_k(masked: &[usize], k: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    debug_assert!(!masked.is_empty());
    let take = k.min(masked.len());
    // Partial Fisher-Yates over a scratch copy.
    let mut pool = masked.to_vec();
    for i in 0..take {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut sel = pool[..take].to_vec();
    sel.sort_unstable();
    sel
}

/// The min(K, |masked|) masked positions of highest confidence, ties to the
/// lowest index.
pub fn top_k_confidence(confidences: &[f64], masked: &[usize], k: usize) -> Vec<usize> {
    debug_assert!(!masked.is_empty());
    let mut order = masked.to_vec();
    // Stable sort by descending confidence keeps index order within ties.
    order.sort_by(|&a, &b| confidences[b].partial_cmp(&confidences[a]).unwrap());
    let mut sel = order[..k.min(order.len())].to_vec();
    sel.sort_unstable();
    sel
}

/// All masked positions with confidence strictly above lambda; when none
/// qualify, exactly the highest-confidence position so sampling cannot
/// stall.
pub fn threshold_with_fallback(confidences: &[f64], masked: &[usize], lambda: f64) -> Vec<usize> {
    debug_assert!(!masked.is_empty());
    let sel: Vec<usize> = masked
        .iter()
        .copied()
        .filter(|&k| confidences[k] > lambda)
        .collect();
    if !sel.is_empty() {
        return sel;
    }
    let mut best = masked[0];
    for &k in masked {
        if confidences[k] > confidences[best] {
            best = k;
        }
    }
    vec![best]
}

/// The deterministic expert: restrict to the earliest block (of the spec's
/// own block length) containing a masked position, apply the heuristic
/// there, and leave every other bit zero. A pure function of the state and
/// denoiser output; randomized specs are rejected.
pub fn expert_action(
    spec: &HeuristicSpec,
    state: &GenState,
    den: &DenoiserOutput,
) -> Result<Vec<bool>, EnvError> {
    if spec.kind == HeuristicKind::RandomK {
        return Err(EnvError::Contract(
            "expert policy must be deterministic; random_k is not".into(),
        ));
    }
    spec.validate()?;
    let l = state.answer.len();
    let mut bits = vec![false; l];
    let Some((lo, hi)) = active_block(&state.answer, state.mask_token(), spec.block_len) else {
        return Ok(bits);
    };
    let masked: Vec<usize> = (lo..hi).filter(|&k| state.is_masked(k)).collect();
    if masked.is_empty() {
        return Ok(bits);
    }
    let sel = match spec.kind {
        HeuristicKind::TopK => top_k_confidence(&den.confidences, &masked, spec.k),
        HeuristicKind::Threshold => {
            threshold_with_fallback(&den.confidences, &masked, spec.lambda)
        }
        HeuristicKind::RandomK => unreachable!(),
    };
    for k in sel {
        bits[k] = true;
    }
    Ok(bits)
}

/// Rollout adapter applying a heuristic to the current support.
pub struct HeuristicSampler {
    pub spec: HeuristicSpec,
}

impl Sampler for HeuristicSampler {
    fn select(
        &mut self,
        state: &GenState,
        den: &DenoiserOutput,
        _feats: &StepFeatures,
        support: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Result<ActionRecord, EnvError> {
        self.spec.validate()?;
        let sel = match self.spec.kind {
            HeuristicKind::RandomK => random_k(support, self.spec.k, rng),
            HeuristicKind::TopK => top_k_confidence(&den.confidences, support, self.spec.k),
            HeuristicKind::Threshold => {
                threshold_with_fallback(&den.confidences, support, self.spec.lambda)
            }
        };
        let mut bits = vec![false; state.answer.len()];
        for k in sel {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DenoiserOutput, GenState};
    use crate::rng::stream;
    use std::collections::HashMap;

    #[test]
    fn random_k_clamps_and_covers() {
        let mut rng = stream(0, "heur", &[]);
        assert_eq!(random_k(&[1, 2, 3, 4, 5], 5, &mut rng), vec![1, 2, 3, 4, 5]);
        assert_eq!(random_k(&[3], 8, &mut rng), vec![3]);
    }

    #[test]
    fn random_k_pairs_are_uniform() {
        let mut rng = stream(1, "heur", &[]);
        let masked = [1usize, 2, 3, 4];
        let n = 100_000;
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for _ in 0..n {
            let sel = random_k(&masked, 2, &mut rng);
            *counts.entry((sel[0], sel[1])).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (&pair, &c) in &counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.01, "{pair:?}: {f}");
        }
    }

    #[test]
    fn top_k_selects_highest_confidence_with_index_ties() {
        let conf = [0.9, 0.5, 0.7];
        assert_eq!(top_k_confidence(&conf, &[0, 1, 2], 2), vec![0, 2]);
        let equal = [0.4, 0.4, 0.4];
        assert_eq!(top_k_confidence(&equal, &[0, 1, 2], 1), vec![0]);
        assert_eq!(top_k_confidence(&conf, &[0, 1, 2], 3), vec![0, 1, 2]);
    }

    #[test]
    fn threshold_selects_above_and_falls_back_to_argmax() {
        let conf = [0.95, 0.4, 0.97];
        assert_eq!(threshold_with_fallback(&conf, &[0, 1, 2], 0.9), vec![0, 2]);
        let low = [0.4, 0.3];
        assert_eq!(threshold_with_fallback(&low, &[0, 1], 0.9), vec![0]);
        // Nothing exceeds 1.0: singleton argmax every time.
        assert_eq!(threshold_with_fallback(&[1.0, 1.0], &[0, 1], 1.0), vec![0]);
    }

    fn uniform_den(l: usize) -> DenoiserOutput {
        DenoiserOutput::from_dists(2, vec![0.5; l * 2])
    }

    #[test]
    fn expert_bits_confined_to_first_block() {
        let spec = HeuristicSpec {
            kind: HeuristicKind::Threshold,
            k: 0,
            lambda: 0.9,
            block_len: 32,
        };
        let state = GenState::new(vec![], 64, 64, 2);
        let den = uniform_den(64);
        let bits = expert_action(&spec, &state, &den).unwrap();
        assert!(bits[32..].iter().all(|&b| !b));
        // All confidences below lambda: exactly one bit.
        assert_eq!(bits.iter().filter(|&&b| b).count(), 1);
        // Deterministic: identical on repeat.
        assert_eq!(bits, expert_action(&spec, &state, &den).unwrap());
    }

    #[test]
    fn expert_rejects_randomized_spec() {
        let spec = HeuristicSpec {
            kind: HeuristicKind::RandomK,
            k: 2,
            lambda: 0.0,
            block_len: 0,
        };
        let state = GenState::new(vec![], 4, 4, 2);
        assert!(expert_action(&spec, &state, &uniform_den(4)).is_err());
    }

    #[test]
    fn tiny_lambda_unmasks_everything_at_once() {
        let conf = [0.2, 0.8, 0.5];
        assert_eq!(
            threshold_with_fallback(&conf, &[0, 1, 2], 1e-9),
            vec![0, 1, 2]
        );
    }
}
