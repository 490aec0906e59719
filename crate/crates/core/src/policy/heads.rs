//! Action heads over the policy logits: independent Bernoulli gates per
//! position, and dynamic Plackett-Luce sampling (sequential sampling without
//! replacement against a STOP pseudo-item of fixed utility 0, implemented as
//! a Gumbel argsort). Both expose exact log-likelihoods in scalar form (for
//! rollout records) and as graph builders (for training gradients).

use crate::autodiff::{log_sigmoid, GradError, NodeId, Shape, Tape};
use crate::env::rollout::{ActionKind, ActionRecord, Sampler, StepFeatures};
use crate::env::{DenoiserOutput, EnvError, GenState};
use crate::policy::{HeadKind, Policy};
use crate::autodiff::ParamStore;
use crate::rng::gumbel;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Independent Bernoulli draws with success probability sigmoid(b_k / tau).
/// With `fallback` set and an all-zero draw, the highest-parameter position
/// (lowest index on ties) is forced on; the recorded log-probability stays
/// the plain Bernoulli product, which is inference-only by construction.
pub fn bernoulli_sample(
    logits: &[f64],
    tau_pi: f64,
    support: &[usize],
    rng: &mut ChaCha12Rng,
    fallback: bool,
) -> ActionRecord {
    debug_assert!(!support.is_empty());
    debug_assert!(tau_pi > 0.0);
    let mut bits = vec![false; logits.len()];
    let mut any = false;
    for &k in support {
        let s = crate::autodiff::stable_sigmoid(logits[k] / tau_pi);
        if rng.gen_range(0.0..1.0) < s {
            bits[k] = true;
            any = true;
        }
    }
    if fallback && !any {
        let mut best = support[0];
        for &k in support {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        bits[best] = true;
    }
    let logprob = bernoulli_logprob(logits, tau_pi, &bits, support);
    ActionRecord {
        kind: ActionKind::Bits(bits),
        logprob_old: Some(logprob),
        support: support.to_vec(),
        expert_bits: None,
    }
}

/// Exact Bernoulli product log-likelihood over the support, computed with
/// log-sigmoid stability. A saturated logit contradicting its bit yields the
/// -inf sentinel.
pub fn bernoulli_logprob(logits: &[f64], tau_pi: f64, bits: &[bool], support: &[usize]) -> f64 {
    let mut total = 0.0;
    for &k in support {
        let z = logits[k] / tau_pi;
        total += if bits[k] { log_sigmoid(z) } else { log_sigmoid(-z) };
    }
    total
}

/// Graph version of [`bernoulli_logprob`], differentiable through the
/// logits node (shape L x 1).
pub fn bernoulli_logprob_graph(
    tape: &mut Tape,
    logits: NodeId,
    tau_pi: f64,
    bits: &[bool],
    support: &[usize],
) -> Result<NodeId, GradError> {
    debug_assert!(!support.is_empty());
    let zeta = tape.scale(logits, 1.0 / tau_pi)?;
    let sup = tape.gather(zeta, support.to_vec())?;
    let signs: Vec<f64> = support
        .iter()
        .map(|&k| if bits[k] { 1.0 } else { -1.0 })
        .collect();
    let m = support.len();
    let sign_node = tape.input(Shape::new(m, 1), signs);
    let z = tape.mul(sup, sign_node)?;
    // log sigmoid(z) = -log(1 + exp(-z))
    let nz = tape.scale(z, -1.0)?;
    let e = tape.exp(nz)?;
    let one = tape.input(Shape::new(m, 1), vec![1.0; m]);
    let p = tape.add(e, one)?;
    let lg = tape.log(p)?;
    let s = tape.sum(lg)?;
    tape.scale(s, -1.0)
}

/// Dynamic Plackett-Luce sampling. The first position is drawn by a Gumbel
/// argmax over the tempered logits with STOP excluded, so at least one
/// position is always chosen; the rest of the loop is a single Gumbel
/// argsort over the remaining positions plus the STOP utility 0, keeping
/// every position whose perturbed value beats STOP's, in descending order.
/// The STOP perturbation must be fresh relative to the first draw or the
/// selection-size distribution is biased toward singletons.
pub fn dpls_sample(
    logits: &[f64],
    tau_pi: f64,
    support: &[usize],
    rng: &mut ChaCha12Rng,
) -> ActionRecord {
    debug_assert!(!support.is_empty());
    let first = support
        .iter()
        .map(|&k| (k, logits[k] / tau_pi + gumbel(rng)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(k, _)| k)
        .expect("non-empty support");
    let mut rest: Vec<(usize, f64)> = support
        .iter()
        .filter(|&&k| k != first)
        .map(|&k| (k, logits[k] / tau_pi + gumbel(rng)))
        .collect();
    let g_stop = gumbel(rng);
    rest.retain(|&(_, g)| g > g_stop);
    rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut list = vec![first];
    list.extend(rest.into_iter().map(|(k, _)| k));
    let logprob = dpls_logprob(logits, tau_pi, &list, support).expect("sampled list is valid");
    ActionRecord {
        kind: ActionKind::Ordered(list),
        logprob_old: Some(logprob),
        support: support.to_vec(),
        expert_bits: None,
    }
}

fn log_sum_exp(extra_zero: bool, zs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut m = if extra_zero { 0.0 } else { f64::NEG_INFINITY };
    for z in zs.clone() {
        m = m.max(z);
    }
    let mut s = if extra_zero { (-m).exp() } else { 0.0 };
    for z in zs {
        s += (z - m).exp();
    }
    m + s.ln()
}

fn check_dpls_list(list: &[usize], support: &[usize]) -> Result<(), EnvError> {
    if list.is_empty() {
        return Err(EnvError::Contract("dpls selection must be non-empty".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &k in list {
        if !support.contains(&k) {
            return Err(EnvError::Contract(format!(
                "dpls selection {k} outside the support"
            )));
        }
        if !seen.insert(k) {
            return Err(EnvError::Contract(format!("duplicate dpls selection {k}")));
        }
    }
    Ok(())
}

/// Exact log-likelihood of an ordered selection under the sequential
/// process: the first factor is a softmax over positions only; each later
/// factor renormalizes over the remaining positions plus STOP (utility 0);
/// the terminal STOP factor is omitted when the list exhausts the support.
pub fn dpls_logprob(
    logits: &[f64],
    tau_pi: f64,
    list: &[usize],
    support: &[usize],
) -> Result<f64, EnvError> {
    check_dpls_list(list, support)?;
    let z = |k: usize| logits[k] / tau_pi;
    let mut remaining: Vec<usize> = support.to_vec();
    let mut total = 0.0;
    for (i, &pick) in list.iter().enumerate() {
        let lse = log_sum_exp(i > 0, remaining.iter().map(|&k| z(k)));
        total += z(pick) - lse;
        remaining.retain(|&k| k != pick);
    }
    if !remaining.is_empty() {
        total -= log_sum_exp(true, remaining.iter().map(|&k| z(k)));
    }
    Ok(total)
}

/// Graph version of [`dpls_logprob`]. Normalizer shifts are taken from the
/// eagerly known values as constants, which leaves the gradient exact.
pub fn dpls_logprob_graph(
    tape: &mut Tape,
    logits: NodeId,
    tau_pi: f64,
    list: &[usize],
    support: &[usize],
) -> Result<NodeId, EnvError> {
    check_dpls_list(list, support)?;
    let zeta = tape.scale(logits, 1.0 / tau_pi)?;
    let zvals = tape.value(zeta).to_vec();
    let z_of = |k: usize| zvals[k];

    let mut remaining: Vec<usize> = support.to_vec();
    let mut total: Option<NodeId> = None;
    let push = |tape: &mut Tape, node: NodeId, total: &mut Option<NodeId>| -> Result<(), GradError> {
        *total = Some(match *total {
            Some(acc) => tape.add(acc, node)?,
            None => node,
        });
        Ok(())
    };

    let denom = |tape: &mut Tape, rem: &[usize], with_stop: bool| -> Result<NodeId, GradError> {
        let mut shift = if with_stop { 0.0 } else { f64::NEG_INFINITY };
        for &k in rem {
            shift = shift.max(z_of(k));
        }
        let g = tape.gather(zeta, rem.to_vec())?;
        let sh = tape.scalar_input(-shift);
        let g = tape.add(g, sh)?;
        let e = tape.exp(g)?;
        let mut s = tape.sum(e)?;
        if with_stop {
            let stop = tape.scalar_input((-shift).exp());
            s = tape.add(s, stop)?;
        }
        let lg = tape.log(s)?;
        let back = tape.scalar_input(shift);
        tape.add(lg, back)
    };

    for (i, &pick) in list.iter().enumerate() {
        let num = tape.gather(zeta, vec![pick])?;
        push(tape, num, &mut total)?;
        let den = denom(tape, &remaining, i > 0)?;
        let nden = tape.scale(den, -1.0)?;
        push(tape, nden, &mut total)?;
        remaining.retain(|&k| k != pick);
    }
    if !remaining.is_empty() {
        let den = denom(tape, &remaining, true)?;
        let nden = tape.scale(den, -1.0)?;
        push(tape, nden, &mut total)?;
    }
    Ok(total.expect("list is non-empty"))
}

/// Memo of policy forwards keyed by the exact feature bytes. Valid only
/// while the parameters are frozen (one collection phase); logits are a pure
/// function of the features, so hits are exact.
#[derive(Default)]
pub struct ForwardCache {
    map: std::sync::Mutex<std::collections::HashMap<Vec<u8>, Vec<f64>>>,
}

impl ForwardCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(feats: &StepFeatures) -> Vec<u8> {
        let mut key = Vec::with_capacity(8 * (feats.per_pos.len() + 2));
        key.extend_from_slice(&(feats.len as u64).to_le_bytes());
        key.extend_from_slice(&feats.time_frac.to_bits().to_le_bytes());
        for v in &feats.per_pos {
            key.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        key
    }
}

/// Evaluate the policy logits, going through the cache when one is supplied.
pub fn cached_forward(
    policy: &Policy,
    params: &ParamStore,
    cache: Option<&ForwardCache>,
    feats: &StepFeatures,
) -> Result<Vec<f64>, crate::autodiff::GradError> {
    let Some(cache) = cache else {
        return policy.forward(params, feats);
    };
    let key = ForwardCache::key(feats);
    if let Some(hit) = cache.map.lock().unwrap().get(&key) {
        return Ok(hit.clone());
    }
    let logits = policy.forward(params, feats)?;
    cache.map.lock().unwrap().insert(key, logits.clone());
    Ok(logits)
}

/// Rollout adapter sampling actions from the policy network.
pub struct PolicySampler<'a> {
    pub policy: &'a Policy,
    pub params: &'a ParamStore,
    pub tau_pi: f64,
    pub fallback: bool,
    pub cache: Option<&'a ForwardCache>,
}

impl Sampler for PolicySampler<'_> {
    fn select(
        &mut self,
        _state: &GenState,
        _den: &DenoiserOutput,
        feats: &StepFeatures,
        support: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Result<ActionRecord, EnvError> {
        let logits = cached_forward(self.policy, self.params, self.cache, feats)?;
        Ok(match self.policy.arch.head {
            HeadKind::Bernoulli => {
                bernoulli_sample(&logits, self.tau_pi, support, rng, self.fallback)
            }
            HeadKind::Dpls => dpls_sample(&logits, self.tau_pi, support, rng),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn bernoulli_zero_logits_give_quarter_probability() {
        let logits = [0.0, 0.0];
        for bits in [[false, false], [true, false], [false, true], [true, true]] {
            let lp = bernoulli_logprob(&logits, 1.0, &bits, &[0, 1]);
            assert!((lp - 0.25f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bernoulli_probabilities_sum_to_one_exhaustively() {
        let logits = [0.7, -1.3, 0.2, 2.5];
        let support = [0usize, 1, 2, 3];
        let mut total = 0.0;
        for mask in 0..(1u32 << 4) {
            let bits: Vec<bool> = (0..4).map(|k| mask & (1 << k) != 0).collect();
            total += bernoulli_logprob(&logits, 1.0, &bits, &support).exp();
        }
        assert!((total - 1.0).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn bernoulli_saturated_logits_are_decisive() {
        let mut rng = stream(0, "bern", &[]);
        let logits = [20.0, -20.0];
        for _ in 0..1000 {
            let a = bernoulli_sample(&logits, 1.0, &[0, 1], &mut rng, false);
            assert_eq!(a.kind, ActionKind::Bits(vec![true, false]));
        }
    }

    #[test]
    fn bernoulli_fallback_forces_argmax_with_index_ties() {
        let mut rng = stream(1, "bern", &[]);
        let logits = [-20.0, -20.0];
        for _ in 0..200 {
            let a = bernoulli_sample(&logits, 1.0, &[0, 1], &mut rng, true);
            assert_eq!(a.kind, ActionKind::Bits(vec![true, false]));
        }
    }

    #[test]
    fn low_temperature_approaches_deterministic_sign_rule() {
        let mut rng = stream(2, "bern", &[]);
        let logits = [0.4, -0.3, 0.05];
        for _ in 0..500 {
            let a = bernoulli_sample(&logits, 1e-3, &[0, 1, 2], &mut rng, false);
            // Deterministic limit selects exactly the positive logits.
            assert_eq!(a.kind, ActionKind::Bits(vec![true, false, true]));
        }
    }

    #[test]
    fn temperature_sharpens_matching_actions() {
        let logits = [1.0, -0.5];
        let bits = [true, false];
        let lp1 = bernoulli_logprob(&logits, 1.0, &bits, &[0, 1]);
        let lp_half = bernoulli_logprob(&logits, 0.5, &bits, &[0, 1]);
        assert!(lp_half > lp1);
    }

    #[test]
    fn bernoulli_graph_matches_scalar() {
        let logits = vec![0.3, -1.1, 2.0, 0.0, -0.4];
        let support = [1usize, 2, 4];
        let bits = [false, true, false, false, true];
        let scalar = bernoulli_logprob(&logits, 0.7, &bits, &support);
        let mut t = Tape::new();
        let l = t.input(Shape::new(5, 1), logits.clone());
        let node = bernoulli_logprob_graph(&mut t, l, 0.7, &bits, &support).unwrap();
        assert!((t.scalar(node) - scalar).abs() < 1e-12);
    }

    #[test]
    fn dpls_singleton_support_is_forced_with_probability_one() {
        let mut rng = stream(3, "dpls", &[]);
        let logits = [0.3];
        for _ in 0..100 {
            let a = dpls_sample(&logits, 1.0, &[0], &mut rng);
            assert_eq!(a.kind, ActionKind::Ordered(vec![0]));
            assert_eq!(a.logprob_old, Some(0.0));
        }
    }

    #[test]
    fn dpls_symmetric_two_support_probabilities() {
        // With b = (0, 0): P({0}) = P({1}) = 1/4 and P((0,1)) = P((1,0)) = 1/4.
        let logits = [0.0, 0.0];
        let sup = [0usize, 1];
        let quarter = 0.25f64.ln();
        for list in [vec![0], vec![1]] {
            let lp = dpls_logprob(&logits, 1.0, &list, &sup).unwrap();
            assert!((lp - quarter).abs() < 1e-12, "{list:?}: {lp}");
        }
        for list in [vec![0, 1], vec![1, 0]] {
            let lp = dpls_logprob(&logits, 1.0, &list, &sup).unwrap();
            assert!((lp - quarter).abs() < 1e-12, "{list:?}: {lp}");
        }
    }

    fn ordered_selections(support: &[usize]) -> Vec<Vec<usize>> {
        fn rec(prefix: &mut Vec<usize>, rest: &[usize], out: &mut Vec<Vec<usize>>) {
            if !prefix.is_empty() {
                out.push(prefix.clone());
            }
            for (i, &k) in rest.iter().enumerate() {
                let mut next: Vec<usize> = rest.to_vec();
                next.remove(i);
                prefix.push(k);
                rec(prefix, &next, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), support, &mut out);
        out
    }

    #[test]
    fn dpls_probabilities_sum_to_one_exhaustively() {
        let logits = [0.9, -0.6, 0.1, 1.4];
        let support = [0usize, 1, 2, 3];
        let mut total = 0.0;
        for list in ordered_selections(&support) {
            total += dpls_logprob(&logits, 1.0, &list, &support).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn dpls_saturated_logit_always_leads() {
        let mut rng = stream(4, "dpls", &[]);
        let logits = [20.0, -20.0];
        for _ in 0..500 {
            let a = dpls_sample(&logits, 1.0, &[0, 1], &mut rng);
            match a.kind {
                ActionKind::Ordered(list) => assert_eq!(list[0], 0),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn dpls_rejects_bad_lists() {
        let logits = [0.0, 0.0, 0.0];
        let sup = [0usize, 1];
        assert!(dpls_logprob(&logits, 1.0, &[], &sup).is_err());
        assert!(dpls_logprob(&logits, 1.0, &[2], &sup).is_err());
        assert!(dpls_logprob(&logits, 1.0, &[0, 0], &sup).is_err());
    }

    #[test]
    fn dpls_graph_matches_scalar() {
        let logits = vec![0.4, -0.2, 1.3, 0.8];
        let support = [0usize, 2, 3];
        for list in [vec![2], vec![2, 0], vec![3, 0, 2]] {
            let scalar = dpls_logprob(&logits, 0.8, &list, &support).unwrap();
            let mut t = Tape::new();
            let l = t.input(Shape::new(4, 1), logits.clone());
            let node = dpls_logprob_graph(&mut t, l, 0.8, &list, &support).unwrap();
            assert!(
                (t.scalar(node) - scalar).abs() < 1e-12,
                "{list:?}: {} vs {scalar}",
                t.scalar(node)
            );
        }
    }

    #[test]
    fn dpls_empirical_frequencies_match_likelihood() {
        let logits = [0.5, -0.3];
        let support = [0usize, 1];
        let mut rng = stream(5, "dpls", &[]);
        let n = 100_000;
        let mut counts: std::collections::BTreeMap<Vec<usize>, usize> = Default::default();
        for _ in 0..n {
            let a = dpls_sample(&logits, 1.0, &support, &mut rng);
            if let ActionKind::Ordered(list) = a.kind {
                *counts.entry(list).or_default() += 1;
            }
        }
        let mut tv = 0.0;
        for list in ordered_selections(&support) {
            let p = dpls_logprob(&logits, 1.0, &list, &support).unwrap().exp();
            let f = counts.get(&list).copied().unwrap_or(0) as f64 / n as f64;
            tv += (p - f).abs();
        }
        assert!(tv / 2.0 < 0.01, "tv {tv}");
    }
}
