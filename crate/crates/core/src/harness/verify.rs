//! The invariant battery behind the `verify` command: gradient checks for
//! every primitive and every loss, likelihood normalization, sampler versus
//! likelihood consistency, posterior versus enumeration, the reward-shaping
//! dichotomy, semi-AR containment and fallback termination. Each check
//! yields one PASS/FAIL report line; any failure makes the run exit nonzero.

use super::oracle::enumeration_posterior;
use crate::autodiff::{finite_difference_check, ParamStore, Shape, Tape};
use crate::env::rollout::{rollout, ActionKind, RolloutSettings};
use crate::env::{Environment, GenState, MarkovChainSpec, RewardMode};
use crate::grpo::{advantages, collect_group, grpo_loss, reward, RewardShape, TrainConfig};
use crate::heuristics::{expert_action, HeuristicKind, HeuristicSampler, HeuristicSpec};
use crate::policy::heads::{
    bernoulli_logprob, bernoulli_logprob_graph, bernoulli_sample, dpls_logprob,
    dpls_logprob_graph, dpls_sample,
};
use crate::policy::{init_policy, HeadKind, Policy, PolicyArch};
use crate::rng::stream;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const NORM_TOL: f64 = 1e-9;
pub const CONSISTENCY_TOL: f64 = 0.01;
pub const POSTERIOR_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Plain-text report: one line per check with a PASS/FAIL prefix.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(if c.passed { "PASS " } else { "FAIL " });
            out.push_str(&c.name);
            if !c.detail.is_empty() {
                out.push_str(": ");
                out.push_str(&c.detail);
            }
            out.push('\n');
        }
        out
    }

    fn record(&mut self, name: &str, result: Result<String, String>) {
        match result {
            Ok(detail) => self.checks.push(CheckResult {
                name: name.to_string(),
                passed: true,
                detail,
            }),
            Err(detail) => self.checks.push(CheckResult {
                name: name.to_string(),
                passed: false,
                detail,
            }),
        }
    }
}

fn small_arch(head: HeadKind) -> PolicyArch {
    PolicyArch {
        blocks: 1,
        hidden: 16,
        ff: 32,
        heads: 2,
        time_embed_dim: 8,
        top_n_conf: 1,
        head,
    }
}

/// Max relative gradient error of one primitive against central finite
/// differences on a small random instance. `tamper` perturbs the analytic
/// gradient before comparison; it exists so fault-injection tests can prove
/// the check actually detects a broken backward rule.
pub fn primitive_gradient_error(name: &str, tamper: bool) -> Result<f64, String> {
    let shape = Shape::new(5, 4);
    let mut rng = stream(17, "verify-prim", &[name.len() as u64]);
    let data: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.2..1.2)).collect();
    let mut store = ParamStore::new();
    store.insert("x", shape, data).map_err(|e| e.to_string())?;
    let fixed: Vec<f64> = (0..shape.len())
        .map(|i| (0.9 + i as f64 * 1.73).sin())
        .collect();
    let build = |p: &ParamStore| -> Result<(Tape, usize), crate::autodiff::GradError> {
        let mut t = Tape::new();
        let x = t.param(p, "x")?;
        let out = match name {
            "matmul" => {
                let b = t.input(Shape::new(4, 3), fixed[..12].to_vec());
                t.matmul(x, b)?
            }
            "add" => {
                let b = t.input(Shape::new(1, 4), fixed[..4].to_vec());
                t.add(x, b)?
            }
            "mul" => {
                let b = t.input(shape, fixed.clone());
                t.mul(x, b)?
            }
            "sigmoid" => t.sigmoid(x)?,
            "exp" => t.exp(x)?,
            "log" => {
                let s = t.sigmoid(x)?;
                t.log(s)?
            }
            "softmax" => t.softmax(x)?,
            "layer_norm" => t.layer_norm(x, 1e-5)?,
            "rotary" => t.rotary(x, 4, 10000.0, 0)?,
            "gather" => t.gather(x, vec![0, 2, 2, 4, 1])?,
            "sum" => t.sum(x)?,
            "mean" => t.mean(x)?,
            other => panic!("unknown primitive {other}"),
        };
        let os = t.shape(out);
        let w: Vec<f64> = (0..os.len()).map(|i| 0.2 + 0.09 * i as f64).collect();
        let wn = t.input(os, w);
        let prod = t.mul(out, wn)?;
        let loss = t.sum(prod)?;
        Ok((t, loss))
    };
    let (tape, loss) = build(&store).map_err(|e| e.to_string())?;
    let mut analytic = tape.backward(loss, &store).map_err(|e| e.to_string())?;
    if tamper {
        for (_, g) in analytic.iter_mut() {
            g[0] += 0.05;
        }
    }
    let ga = analytic.get("x").unwrap().to_vec();
    let h = FD_STEP;
    let mut max_rel: f64 = 0.0;
    for i in 0..shape.len() {
        let eval = |delta: f64| -> Result<f64, String> {
            let p = store.with_perturbed("x", i, delta).map_err(|e| e.to_string())?;
            let (t, l) = build(&p).map_err(|e| e.to_string())?;
            Ok(t.scalar(l))
        };
        let num = (eval(h)? - eval(-h)?) / (2.0 * h);
        let rel = (ga[i] - num).abs() / ga[i].abs().max(num.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

pub const PRIMITIVES: [&str; 12] = [
    "matmul",
    "add",
    "mul",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "rotary",
    "gather",
    "sum",
    "mean",
];

fn check_primitive_gradients() -> Result<String, String> {
    let mut worst = (0.0f64, "");
    for name in PRIMITIVES {
        let err = primitive_gradient_error(name, false)?;
        if err > worst.0 {
            worst = (err, name);
        }
        if err > FD_TOL {
            return Err(format!("{name}: max relative error {err:.3e}"));
        }
    }
    Ok(format!("worst {} at {:.3e}", worst.1, worst.0))
}

/// Finite-difference check of the policy log-likelihood under one head.
pub fn head_logprob_fd_error(head: HeadKind) -> Result<f64, String> {
    let arch = small_arch(head);
    let policy = Policy::new(arch);
    let params = init_policy(&arch, &mut stream(23, "verify-pol", &[])).unwrap();
    let env = Environment::new(
        MarkovChainSpec {
            vocab_size: 3,
            initial_dist: vec![0.4, 0.3, 0.3],
            transition: vec![0.5, 0.3, 0.2, 0.2, 0.5, 0.3, 0.3, 0.2, 0.5],
            prompt_len: 1,
            answer_len: 5,
        },
        RewardMode::Validity,
    )
    .unwrap();
    let mask = env.mask_token();
    let state = GenState::with_answer(vec![0], vec![mask, 1, mask, mask, 2], 4, mask);
    let den = env.exact_posterior(&state).unwrap();
    let feats = crate::policy::featurize(&state, &den, &arch, 5);
    let support = vec![0usize, 2, 3];
    let report = finite_difference_check(&params, FD_STEP, |p| {
        let mut tape = Tape::new();
        let logits = policy.forward_graph(&mut tape, p, &feats)?;
        let lp = match head {
            HeadKind::Bernoulli => {
                let bits = vec![true, false, false, true, false];
                bernoulli_logprob_graph(&mut tape, logits, 1.0, &bits, &support)?
            }
            HeadKind::Dpls => dpls_logprob_graph(&mut tape, logits, 1.0, &[3, 0], &support)
                .map_err(|e| crate::autodiff::GradError::Format(e.to_string()))?,
        };
        Ok((tape, lp))
    })
    .map_err(|e| e.to_string())?;
    Ok(report.max_rel_err)
}

/// Finite-difference check of the clipped surrogate on a synthetic group.
pub fn grpo_fd_error() -> Result<f64, String> {
    let arch = small_arch(HeadKind::Bernoulli);
    let policy = Policy::new(arch);
    let params = init_policy(&arch, &mut stream(29, "verify-grpo", &[])).unwrap();
    let env =
        Environment::new(MarkovChainSpec::alternating(0, 5), RewardMode::Validity).unwrap();
    let den = env.exact_denoiser();
    let cfg = TrainConfig {
        group_size: 4,
        alpha: 1.0,
        block_len: 0,
        ..TrainConfig::default()
    };
    let group = collect_group(&env, &den, &policy, &params, &[], &[0, 1, 0, 1], &cfg, 31, 0, 0, None)
        .map_err(|e| e.to_string())?;
    if group.advantages().iter().all(|&a| a == 0.0) {
        return Err("synthetic group has no advantage signal".into());
    }
    let report = finite_difference_check(&params, FD_STEP, |p| {
        let (tape, loss, _) = grpo_loss(&policy, p, &group, &cfg)
            .map_err(|e| crate::autodiff::GradError::Format(e.to_string()))?;
        Ok((tape, loss))
    })
    .map_err(|e| e.to_string())?;
    Ok(report.max_rel_err)
}

/// Finite-difference check of the masked-prediction bound. The fixture
/// weights are scaled away from the fresh-init point: right at init the
/// query/key gradients are vanishingly small (they scale with weight
/// products), and finite differences cannot resolve them against rounding.
pub fn elbo_fd_error() -> Result<f64, String> {
    use crate::env::mdm::{elbo_loss_graph, init_mdm_params, ElboBatch, MdmArch};
    let arch = MdmArch {
        blocks: 1,
        hidden: 8,
        ff: 16,
        heads: 2,
        vocab: 3,
        max_len: 6,
    };
    let mut params = init_mdm_params(&arch, &mut stream(37, "verify-elbo", &[])).unwrap();
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in names {
        for v in params.get_mut(&name).unwrap() {
            *v *= 6.0;
        }
    }
    let sel = crate::nn::head_selectors(arch.hidden, arch.heads);
    let batch = ElboBatch {
        x0: vec![vec![0, 1, 2, 1, 0, 2], vec![2, 2, 1, 0, 1, 1]],
        t: vec![0.4, 0.7],
        xt: vec![vec![0, 3, 2, 3, 0, 3], vec![3, 2, 1, 3, 1, 3]],
    };
    let report = finite_difference_check(&params, 1e-4, |p| {
        let mut tape = Tape::new();
        let loss = elbo_loss_graph(&mut tape, p, &arch, &sel, &batch, 3)
            .map_err(|e| crate::autodiff::GradError::Format(e.to_string()))?;
        Ok((tape, loss))
    })
    .map_err(|e| e.to_string())?;
    Ok(report.max_rel_err)
}

/// Exhaustive Bernoulli normalization over a support of the given size.
pub fn bernoulli_normalization_error(support_size: usize) -> f64 {
    assert!(support_size <= 20);
    let mut rng = stream(41, "verify-bnorm", &[support_size as u64]);
    let logits: Vec<f64> = (0..support_size).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let support: Vec<usize> = (0..support_size).collect();
    let mut total = 0.0;
    for mask in 0u64..(1 << support_size) {
        let bits: Vec<bool> = (0..support_size).map(|k| mask & (1 << k) != 0).collect();
        total += bernoulli_logprob(&logits, 1.0, &bits, &support).exp();
    }
    (total - 1.0).abs()
}

fn ordered_selections(support: &[usize]) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &[usize], out: &mut Vec<Vec<usize>>) {
        if !prefix.is_empty() {
            out.push(prefix.clone());
        }
        for (i, &k) in rest.iter().enumerate() {
            let mut next = rest.to_vec();
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

/// Exhaustive normalization of the sequential selection likelihood.
pub fn dpls_normalization_error(support_size: usize) -> f64 {
    assert!(support_size <= 7);
    let mut rng = stream(43, "verify-dnorm", &[support_size as u64]);
    let logits: Vec<f64> = (0..support_size).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let support: Vec<usize> = (0..support_size).collect();
    let mut total = 0.0;
    for list in ordered_selections(&support) {
        total += dpls_logprob(&logits, 1.0, &list, &support).unwrap().exp();
    }
    (total - 1.0).abs()
}

/// Total variation between 1e5 sampled actions and exp(logprob) on a
/// three-position support.
pub fn sampler_consistency_tv(head: HeadKind) -> f64 {
    let logits = [0.6, -0.4, 0.1];
    let support = [0usize, 1, 2];
    let n = 100_000;
    let mut rng = stream(47, "verify-cons", &[head as u64]);
    let mut counts: std::collections::BTreeMap<Vec<u8>, usize> = Default::default();
    for _ in 0..n {
        let key = match head {
            HeadKind::Bernoulli => {
                let a = bernoulli_sample(&logits, 1.0, &support, &mut rng, false);
                match a.kind {
                    ActionKind::Bits(bits) => bits.iter().map(|&b| u8::from(b)).collect(),
                    _ => unreachable!(),
                }
            }
            HeadKind::Dpls => {
                let a = dpls_sample(&logits, 1.0, &support, &mut rng);
                match a.kind {
                    ActionKind::Ordered(list) => list.iter().map(|&k| k as u8).collect(),
                    _ => unreachable!(),
                }
            }
        };
        *counts.entry(key).or_default() += 1;
    }
    let mut tv = 0.0;
    match head {
        HeadKind::Bernoulli => {
            for mask in 0u8..8 {
                let bits: Vec<bool> = (0..3).map(|k| mask & (1 << k) != 0).collect();
                let p = bernoulli_logprob(&logits, 1.0, &bits, &support).exp();
                let key: Vec<u8> = bits.iter().map(|&b| u8::from(b)).collect();
                let f = counts.get(&key).copied().unwrap_or(0) as f64 / n as f64;
                tv += (p - f).abs();
            }
        }
        HeadKind::Dpls => {
            for list in ordered_selections(&support) {
                let p = dpls_logprob(&logits, 1.0, &list, &support).unwrap().exp();
                let key: Vec<u8> = list.iter().map(|&k| k as u8).collect();
                let f = counts.get(&key).copied().unwrap_or(0) as f64 / n as f64;
                tv += (p - f).abs();
            }
        }
    }
    tv / 2.0
}

/// Random chain specs for posterior cross-checks; some include forbidden
/// transitions.
pub fn random_chain_spec(seed: u64, vocab: usize, answer_len: usize, zeros: bool) -> MarkovChainSpec {
    let mut rng = stream(seed, "verify-chain", &[vocab as u64, answer_len as u64]);
    let draw_dist = |rng: &mut rand_chacha::ChaCha12Rng, zero_one: bool| -> Vec<f64> {
        loop {
            let mut v: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
            if zero_one && vocab > 1 {
                let kill = rng.gen_range(0..vocab);
                v[kill] = 0.0;
            }
            let s: f64 = v.iter().sum();
            if s > 0.0 {
                for x in v.iter_mut() {
                    *x /= s;
                }
                // Exact renormalization to absorb rounding.
                let s2: f64 = v.iter().sum();
                v[vocab - 1] += 1.0 - s2;
                if v[vocab - 1] >= 0.0 {
                    return v;
                }
            }
        }
    };
    let initial_dist = draw_dist(&mut rng, false);
    let mut transition = Vec::with_capacity(vocab * vocab);
    for _ in 0..vocab {
        transition.extend(draw_dist(&mut rng, zeros));
    }
    MarkovChainSpec {
        vocab_size: vocab,
        initial_dist,
        transition,
        prompt_len: 1,
        answer_len,
    }
}

/// Max absolute deviation of the message-passing posterior from exhaustive
/// enumeration across all mask patterns of a chain-drawn sequence.
pub fn posterior_vs_enumeration(spec: &MarkovChainSpec, seed: u64) -> Result<f64, String> {
    let env = Environment::new(spec.clone(), RewardMode::Validity).map_err(|e| e.to_string())?;
    let l = env.answer_len();
    assert!(l <= 10);
    let mut rng = stream(seed, "verify-post", &[]);
    let (prompt, answer) = env.sample_task(&mut rng);
    let mut worst: f64 = 0.0;
    for pattern in 0u32..(1 << l) {
        let mut masked = answer.clone();
        for (k, tok) in masked.iter_mut().enumerate() {
            if pattern & (1 << k) != 0 {
                *tok = env.mask_token();
            }
        }
        let state = GenState::with_answer(prompt.clone(), masked, l, env.mask_token());
        let exact = env.exact_posterior(&state).map_err(|e| e.to_string())?;
        let brute = enumeration_posterior(&env, &state).map_err(|e| e.to_string())?;
        for k in 0..l {
            for c in 0..env.vocab() {
                worst = worst.max((exact.row(k)[c] - brute[k][c]).abs());
            }
        }
    }
    Ok(worst)
}

fn check_reward_dichotomy() -> Result<String, String> {
    let steps = [2usize, 5, 9, 13];
    let t = 16;
    let mult: Vec<f64> = steps
        .iter()
        .map(|&s| reward(0.0, t, t - s, 1.0, RewardShape::Multiplicative))
        .collect();
    if !advantages(&mult).iter().all(|&a| a == 0.0) {
        return Err("multiplicative all-wrong group has non-zero advantages".into());
    }
    let add: Vec<f64> = steps
        .iter()
        .map(|&s| reward(0.0, t, t - s, 1.0, RewardShape::Additive))
        .collect();
    let adv = advantages(&add);
    if !(adv[0] > 0.0) {
        return Err("additive reward failed to favor the fastest wrong member".into());
    }
    Ok("multiplicative zeros, additive favors speed".into())
}

fn check_semi_ar_containment() -> Result<String, String> {
    let env = Environment::new(
        MarkovChainSpec {
            vocab_size: 3,
            initial_dist: vec![0.4, 0.3, 0.3],
            transition: vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0],
            prompt_len: 1,
            answer_len: 16,
        },
        RewardMode::Validity,
    )
    .map_err(|e| e.to_string())?;
    let mask = env.mask_token();
    let mut rng = stream(53, "verify-semiar", &[]);
    for trial in 0..1000u64 {
        // A random partially committed state with a random block length.
        let (prompt, answer) = env.sample_task(&mut rng);
        let mut partial = answer.clone();
        for tok in partial.iter_mut() {
            if rng.gen_range(0.0..1.0) < 0.6 {
                *tok = mask;
            }
        }
        if partial.iter().all(|&t| t != mask) {
            partial[15] = mask;
        }
        let bl = [2usize, 4, 8][rng.gen_range(0..3)];
        let state = {
            let mut s = GenState::with_answer(prompt, partial, 16, mask);
            s.active_block = crate::env::active_block(&s.answer, mask, bl);
            s
        };
        let den = env.exact_posterior(&state).map_err(|e| e.to_string())?;
        let spec = HeuristicSpec {
            kind: HeuristicKind::Threshold,
            k: 0,
            lambda: 0.7,
            block_len: bl,
        };
        let bits = expert_action(&spec, &state, &den).map_err(|e| e.to_string())?;
        let (lo, hi) = state.active_block.unwrap();
        for (k, &b) in bits.iter().enumerate() {
            if b && (k < lo || k >= hi) {
                return Err(format!("trial {trial}: bit {k} outside block {lo}..{hi}"));
            }
            if b && !state.is_masked(k) {
                return Err(format!("trial {trial}: bit {k} on a committed position"));
            }
        }
        if bits.iter().all(|&b| !b) {
            return Err(format!("trial {trial}: no progress on a masked state"));
        }
    }
    Ok("1000 random states contained".into())
}

fn check_fallback_termination() -> Result<String, String> {
    let env = Environment::new(MarkovChainSpec::two_mode(1, 16), RewardMode::Validity)
        .map_err(|e| e.to_string())?;
    let den = env.exact_denoiser();
    let mut rng = stream(59, "verify-fb", &[]);
    for trial in 0..50 {
        let (prompt, _) = env.sample_task(&mut rng);
        // Lambda 1.0 never clears the threshold, so every step must be a
        // single fallback commit and the rollout still finishes within L.
        let mut sampler = HeuristicSampler {
            spec: HeuristicSpec {
                kind: HeuristicKind::Threshold,
                k: 0,
                lambda: 1.0,
                block_len: 0,
            },
        };
        let traj = rollout(
            &env,
            &den,
            &mut sampler,
            &prompt,
            &RolloutSettings {
                block_len: 0,
                tau: 0.0,
                fallback: true,
                max_steps: 16,
                top_n: 1,
            },
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        if !traj.complete || traj.nfe != 16 {
            return Err(format!("trial {trial}: nfe {} complete {}", traj.nfe, traj.complete));
        }
        for step in &traj.steps {
            if step.committed.len() != 1 {
                return Err(format!("trial {trial}: fallback committed {} positions", step.committed.len()));
            }
        }
    }
    Ok("all rollouts complete in at most L steps".into())
}

/// Run the full battery. Failures are report content, not errors.
pub fn verify_suite(seed: u64) -> VerifyReport {
    let mut report = VerifyReport::default();

    report.record("gradient_check_primitives", check_primitive_gradients());
    for head in [HeadKind::Bernoulli, HeadKind::Dpls] {
        let name = format!("gradient_check_policy_logprob_{}", head.name());
        match head_logprob_fd_error(head) {
            Ok(err) if err < FD_TOL => report.record(&name, Ok(format!("max rel err {err:.3e}"))),
            Ok(err) => report.record(&name, Err(format!("max rel err {err:.3e}"))),
            Err(e) => report.record(&name, Err(e)),
        }
    }
    match grpo_fd_error() {
        Ok(err) if err < FD_TOL => {
            report.record("gradient_check_grpo_loss", Ok(format!("max rel err {err:.3e}")))
        }
        Ok(err) => report.record("gradient_check_grpo_loss", Err(format!("max rel err {err:.3e}"))),
        Err(e) => report.record("gradient_check_grpo_loss", Err(e)),
    }
    match elbo_fd_error() {
        Ok(err) if err < FD_TOL => {
            report.record("gradient_check_elbo", Ok(format!("max rel err {err:.3e}")))
        }
        Ok(err) => report.record("gradient_check_elbo", Err(format!("max rel err {err:.3e}"))),
        Err(e) => report.record("gradient_check_elbo", Err(e)),
    }

    let bn = bernoulli_normalization_error(12);
    report.record(
        "bernoulli_normalization_12",
        if bn < NORM_TOL {
            Ok(format!("|sum - 1| = {bn:.3e}"))
        } else {
            Err(format!("|sum - 1| = {bn:.3e}"))
        },
    );
    let dn = dpls_normalization_error(5);
    report.record(
        "dpls_normalization_5",
        if dn < NORM_TOL {
            Ok(format!("|sum - 1| = {dn:.3e}"))
        } else {
            Err(format!("|sum - 1| = {dn:.3e}"))
        },
    );

    for head in [HeadKind::Bernoulli, HeadKind::Dpls] {
        let tv = sampler_consistency_tv(head);
        report.record(
            &format!("sampler_likelihood_consistency_{}", head.name()),
            if tv < CONSISTENCY_TOL {
                Ok(format!("tv {tv:.4}"))
            } else {
                Err(format!("tv {tv:.4}"))
            },
        );
    }

    let mut worst_post: f64 = 0.0;
    let mut post_err = None;
    for i in 0..5u64 {
        let spec = random_chain_spec(seed ^ (100 + i), 3 + (i as usize % 2), 6, i % 2 == 1);
        match posterior_vs_enumeration(&spec, seed ^ (200 + i)) {
            Ok(dev) => worst_post = worst_post.max(dev),
            Err(e) => post_err = Some(e),
        }
    }
    report.record(
        "posterior_vs_enumeration",
        match post_err {
            Some(e) => Err(e),
            None if worst_post < POSTERIOR_TOL => Ok(format!("max abs dev {worst_post:.3e}")),
            None => Err(format!("max abs dev {worst_post:.3e}")),
        },
    );

    report.record("reward_hacking_dichotomy", check_reward_dichotomy());
    report.record("semi_ar_containment", check_semi_ar_containment());
    report.record("fallback_termination", check_fallback_termination());

    report
}
