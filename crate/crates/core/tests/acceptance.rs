//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with the measured values. The heavier training fixtures
//! are shared across criteria through lazy statics; their build time is
//! recorded so runtime budgets charge the criterion that owns them.

use std::sync::OnceLock;
use std::time::Instant;
use unmaskrl::autodiff::ParamStore;
use unmaskrl::env::mdm::{train_mdm, MdmTrainConfig};
use unmaskrl::env::{Environment, GenState, MarkovChainSpec, RewardMode};
use unmaskrl::grpo::{
    advantages, collect_group, reward, train, MetricsRow, RewardShape, TrainConfig, TrainOutcome,
};
use unmaskrl::harness::oracle::{brute_force_best, enumeration_posterior};
use unmaskrl::harness::verify::{
    bernoulli_normalization_error, dpls_normalization_error, elbo_fd_error, grpo_fd_error,
    head_logprob_fd_error, random_chain_spec, sampler_consistency_tv,
};
use unmaskrl::harness::{
    pareto_sweep, scaled_k_grid, write_pareto_csv, MethodSpec, ParetoRow, SweepSettings,
};
use unmaskrl::heuristics::{HeuristicKind, HeuristicSpec};
use unmaskrl::policy::{HeadKind, Policy, PolicyArch};
use unmaskrl::rng::stream;

fn alternating_env(l: usize) -> Environment {
    Environment::new(MarkovChainSpec::alternating(0, l), RewardMode::Validity).unwrap()
}

fn pass(criterion: &str, detail: impl std::fmt::Display) {
    println!("PASS {criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// Shared heavy fixture: policies trained with defaults on the L=16
// alternating environment, two seeds. Used by criteria 8 and 12.

struct TrainedPolicies {
    arch: PolicyArch,
    seeds: Vec<(u64, ParamStore, Vec<MetricsRow>)>,
    build_secs: f64,
}

static FIXTURE: OnceLock<TrainedPolicies> = OnceLock::new();

fn default_train_cfg() -> TrainConfig {
    TrainConfig {
        steps: 2000,
        ..TrainConfig::default()
    }
}

fn trained_policies() -> &'static TrainedPolicies {
    FIXTURE.get_or_init(|| {
        let start = Instant::now();
        let env = alternating_env(16);
        let den = env.exact_denoiser();
        let arch = PolicyArch::default();
        let policy = Policy::new(arch);
        let cfg = default_train_cfg();
        let seeds = [0u64, 1]
            .iter()
            .map(|&seed| {
                let out: TrainOutcome =
                    train(&env, &den, &policy, &cfg, seed, |_, _| {}).expect("training runs");
                (seed, out.params, out.metrics)
            })
            .collect();
        TrainedPolicies {
            arch,
            seeds,
            build_secs: start.elapsed().as_secs_f64(),
        }
    })
}

/// Mean accuracy / NFE over test seeds for each (method, param).
fn aggregate(rows: &[ParetoRow]) -> Vec<(String, String, f64, f64)> {
    let mut out: Vec<(String, String, f64, f64)> = Vec::new();
    let mut keys: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.method.clone(), r.param.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    for (method, param) in keys {
        let cells: Vec<&ParetoRow> = rows
            .iter()
            .filter(|r| r.method == method && r.param == param)
            .collect();
        let acc = cells.iter().map(|r| r.accuracy).sum::<f64>() / cells.len() as f64;
        let nfe = cells.iter().map(|r| r.mean_nfe).sum::<f64>() / cells.len() as f64;
        out.push((method, param, acc, nfe));
    }
    out
}

/// Piecewise-linear accuracy of a frontier at the query NFE (clamped to the
/// endpoints outside the covered range).
fn frontier_accuracy_at(points: &mut Vec<(f64, f64)>, nfe: f64) -> f64 {
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if nfe <= points[0].0 {
        return points[0].1;
    }
    if nfe >= points[points.len() - 1].0 {
        return points[points.len() - 1].1;
    }
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if nfe >= x0 && nfe <= x1 {
            if x1 == x0 {
                return y0.max(y1);
            }
            return y0 + (y1 - y0) * (nfe - x0) / (x1 - x0);
        }
    }
    points[points.len() - 1].1
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for head in [HeadKind::Bernoulli, HeadKind::Dpls] {
        let err = head_logprob_fd_error(head).unwrap();
        assert!(err < 1e-4, "{} logprob fd error {err:.3e}", head.name());
        worst = worst.max(err);
    }
    let err = grpo_fd_error().unwrap();
    assert!(err < 1e-4, "grpo loss fd error {err:.3e}");
    worst = worst.max(err);
    let err = elbo_fd_error().unwrap();
    assert!(err < 1e-4, "elbo fd error {err:.3e}");
    worst = worst.max(err);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient checks took {secs:.1}s");
    pass(
        "criterion 1 (gradient correctness)",
        format!("worst relative error {worst:.3e} in {secs:.1}s"),
    );
}

#[test]
fn criterion_02_likelihood_normalization() {
    let start = Instant::now();
    let bern = bernoulli_normalization_error(12);
    assert!(bern < 1e-9, "bernoulli |sum-1| = {bern:.3e}");
    let dpls = dpls_normalization_error(5);
    assert!(dpls < 1e-9, "dpls |sum-1| = {dpls:.3e}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "normalization checks took {secs:.1}s");
    pass(
        "criterion 2 (likelihood normalization)",
        format!("bernoulli {bern:.2e}, dpls {dpls:.2e} in {secs:.1}s"),
    );
}

#[test]
fn criterion_03_sampler_likelihood_consistency() {
    let b = sampler_consistency_tv(HeadKind::Bernoulli);
    assert!(b < 0.01, "bernoulli tv {b:.4}");
    let d = sampler_consistency_tv(HeadKind::Dpls);
    assert!(d < 0.01, "dpls tv {d:.4}");
    pass(
        "criterion 3 (sampler/likelihood consistency)",
        format!("tv bernoulli {b:.4}, dpls {d:.4} at 1e5 draws"),
    );
}

#[test]
fn criterion_04_exact_denoiser_vs_enumeration() {
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let vocab = 2 + (i as usize % 3); // 2..4
        let l = 4 + (i as usize % 5); // 4..8
        let spec = random_chain_spec(900 + i, vocab, l, i % 2 == 0);
        let env = Environment::new(spec, RewardMode::Validity).unwrap();
        let mut rng = stream(700 + i, "crit4", &[]);
        let (prompt, answer) = env.sample_task(&mut rng);
        for pattern in 0u32..(1 << l) {
            let mut masked = answer.clone();
            for (k, tok) in masked.iter_mut().enumerate() {
                if pattern & (1 << k) != 0 {
                    *tok = env.mask_token();
                }
            }
            let state = GenState::with_answer(prompt.clone(), masked, l, env.mask_token());
            let exact = env.exact_posterior(&state).unwrap();
            let brute = enumeration_posterior(&env, &state).unwrap();
            for k in 0..l {
                for c in 0..env.vocab() {
                    worst = worst.max((exact.row(k)[c] - brute[k][c]).abs());
                }
            }
        }
    }
    assert!(worst < 1e-12, "max abs deviation {worst:.3e}");
    pass(
        "criterion 4 (exact denoiser correctness)",
        format!("20 specs, all mask patterns, max abs deviation {worst:.3e}"),
    );
}

#[test]
fn criterion_05_mdm_training_sanity() {
    let start = Instant::now();
    let env = Environment::new(MarkovChainSpec::two_mode(0, 16), RewardMode::Validity).unwrap();
    let cfg = MdmTrainConfig {
        blocks: 1,
        hidden: 32,
        ff: 64,
        heads: 2,
        steps: 600,
        batch: 32,
        lr: 2e-3,
    };
    let mdm = train_mdm(&env, &cfg, 1).unwrap();
    use rand::Rng;
    let mut rng = stream(2, "crit5-holdout", &[]);
    let mut tv_sum = 0.0;
    let mut n = 0usize;
    for _ in 0..200 {
        let (prompt, answer) = env.sample_task(&mut rng);
        let mut masked = answer.clone();
        for tok in masked.iter_mut() {
            if rng.gen_range(0.0..1.0) < 0.5 {
                *tok = env.mask_token();
            }
        }
        let state = GenState::with_answer(prompt.clone(), masked.clone(), 16, env.mask_token());
        let exact = env.exact_posterior(&state).unwrap();
        let pred = mdm.predict(&prompt, &masked).unwrap();
        for k in 0..16 {
            if masked[k] == env.mask_token() {
                let tv: f64 = exact
                    .row(k)
                    .iter()
                    .zip(pred.row(k))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / 2.0;
                tv_sum += tv;
                n += 1;
            }
        }
    }
    let mean_tv = tv_sum / n as f64;
    let secs = start.elapsed().as_secs_f64();
    assert!(mean_tv < 0.05, "mean total variation {mean_tv:.4}");
    assert!(secs < 600.0, "mdm sanity took {secs:.1}s");
    pass(
        "criterion 5 (masked-predictor training sanity)",
        format!("mean TV {mean_tv:.4} over {n} held-out positions in {secs:.1}s"),
    );
}

#[test]
fn criterion_06_reward_hacking_dichotomy() {
    let steps = [2usize, 5, 9, 13];
    let t = 16;
    let mult: Vec<f64> = steps
        .iter()
        .map(|&s| reward(0.0, t, t - s, 1.0, RewardShape::Multiplicative))
        .collect();
    let mult_adv = advantages(&mult);
    assert!(mult_adv.iter().all(|&a| a == 0.0));
    let add: Vec<f64> = steps
        .iter()
        .map(|&s| reward(0.0, t, t - s, 1.0, RewardShape::Additive))
        .collect();
    let add_adv = advantages(&add);
    assert!(add_adv[0] > 0.0);
    for w in add_adv.windows(2) {
        assert!(w[0] > w[1], "additive advantages must decrease with steps");
    }
    pass(
        "criterion 6 (reward-hacking dichotomy)",
        format!(
            "multiplicative advantages all zero; additive fastest member advantage {:+.5}",
            add_adv[0]
        ),
    );
}

#[test]
fn criterion_07_heuristic_contracts() {
    use rand::Rng;
    let l = 16;
    let env = Environment::new(
        MarkovChainSpec {
            vocab_size: 3,
            initial_dist: vec![0.4, 0.3, 0.3],
            transition: vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0],
            prompt_len: 1,
            answer_len: l,
        },
        RewardMode::Validity,
    )
    .unwrap();
    let den = env.exact_denoiser();
    let settings = SweepSettings {
        n_eval: 50,
        n_seeds: 1,
        ..SweepSettings::default()
    };
    // Threshold 1.0: strictly sequential, exactly L calls.
    let rows = pareto_sweep(
        &env,
        &den,
        &[(
            "threshold".into(),
            "lambda=1".into(),
            MethodSpec::Heuristic(HeuristicSpec {
                kind: HeuristicKind::Threshold,
                k: 0,
                lambda: 1.0,
                block_len: 0,
            }),
        )],
        &settings,
        11,
    )
    .unwrap();
    assert_eq!(rows[0].mean_nfe, l as f64);
    // K = L: one call.
    for kind in [HeuristicKind::RandomK, HeuristicKind::TopK] {
        let rows = pareto_sweep(
            &env,
            &den,
            &[(
                kind.name().into(),
                format!("K={l}"),
                MethodSpec::Heuristic(HeuristicSpec {
                    kind,
                    k: l,
                    lambda: 0.0,
                    block_len: 0,
                }),
            )],
            &settings,
            12,
        )
        .unwrap();
        assert_eq!(rows[0].mean_nfe, 1.0, "{kind:?}");
    }
    // Fallback always unmasks exactly one position, and semi-AR never
    // touches positions outside the active block: 1000 random states.
    let mut rng = stream(13, "crit7", &[]);
    for trial in 0..1000 {
        let (prompt, answer) = env.sample_task(&mut rng);
        let mut partial = answer.clone();
        for tok in partial.iter_mut() {
            if rng.gen_range(0.0..1.0) < 0.7 {
                *tok = env.mask_token();
            }
        }
        if partial.iter().all(|&t| t != env.mask_token()) {
            partial[l - 1] = env.mask_token();
        }
        let bl = [2usize, 4, 8, 16][rng.gen_range(0..4)];
        let mut state = GenState::with_answer(prompt, partial, l, env.mask_token());
        state.active_block = unmaskrl::env::active_block(&state.answer, env.mask_token(), bl);
        let d = env.exact_posterior(&state).unwrap();
        // Low confidences are common in this chain, so lambda high enough
        // forces the fallback often; check both regimes.
        for lambda in [0.95, 0.5] {
            let spec = HeuristicSpec {
                kind: HeuristicKind::Threshold,
                k: 0,
                lambda,
                block_len: bl,
            };
            let bits = unmaskrl::heuristics::expert_action(&spec, &state, &d).unwrap();
            let selected: Vec<usize> = bits
                .iter()
                .enumerate()
                .filter_map(|(k, &b)| b.then_some(k))
                .collect();
            assert!(!selected.is_empty(), "trial {trial}: empty selection");
            let (lo, hi) = state.active_block.unwrap();
            let max_conf = (lo..hi)
                .filter(|&k| state.is_masked(k))
                .map(|k| d.confidences[k])
                .fold(f64::NEG_INFINITY, f64::max);
            if max_conf <= lambda {
                assert_eq!(selected.len(), 1, "trial {trial}: fallback must be a singleton");
            }
            for &k in &selected {
                assert!(k >= lo && k < hi, "trial {trial}: {k} outside {lo}..{hi}");
                assert!(state.is_masked(k), "trial {trial}: {k} already committed");
            }
        }
    }
    pass(
        "criterion 7 (heuristic contracts)",
        "threshold(1.0) = L calls, K=L = 1 call, fallback singleton, block containment over 1000 states",
    );
}

#[test]
fn criterion_08_learning_end_to_end() {
    let fix = trained_policies();
    let start = Instant::now();
    let env = alternating_env(16);
    let den = env.exact_denoiser();
    let settings = SweepSettings {
        n_eval: 400,
        n_seeds: 3,
        ..SweepSettings::default()
    };

    // Baseline frontiers from the same harness.
    let mut methods: Vec<(String, String, MethodSpec)> = Vec::new();
    for k in scaled_k_grid(16) {
        methods.push((
            "random_k".into(),
            format!("K={k}"),
            MethodSpec::Heuristic(HeuristicSpec {
                kind: HeuristicKind::RandomK,
                k,
                lambda: 0.0,
                block_len: 0,
            }),
        ));
    }
    for lambda in unmaskrl::harness::default_threshold_grid() {
        methods.push((
            "threshold".into(),
            format!("lambda={lambda}"),
            MethodSpec::Heuristic(HeuristicSpec {
                kind: HeuristicKind::Threshold,
                k: 0,
                lambda,
                block_len: 0,
            }),
        ));
    }
    let policy = Policy::new(fix.arch);
    for (seed, params, _) in &fix.seeds {
        for tau_pi in [1.0, 0.5, 0.25, 0.1] {
            methods.push((
                format!("policy_seed{seed}"),
                format!("alpha=0,tau_pi={tau_pi}"),
                MethodSpec::Policy {
                    policy: &policy,
                    params,
                    tau_pi,
                },
            ));
        }
    }
    let rows = pareto_sweep(&env, &den, &methods, &settings, 77).unwrap();
    let agg = aggregate(&rows);

    let mut random_k_points: Vec<(f64, f64)> = agg
        .iter()
        .filter(|(m, ..)| m == "random_k")
        .map(|(_, _, acc, nfe)| (*nfe, *acc))
        .collect();
    let threshold_points: Vec<(f64, f64)> = agg
        .iter()
        .filter(|(m, ..)| m == "threshold")
        .map(|(_, _, acc, nfe)| (*nfe, *acc))
        .collect();

    for (seed, _, _) in &fix.seeds {
        let name = format!("policy_seed{seed}");
        let best = agg
            .iter()
            .filter(|(m, ..)| *m == name)
            .max_by(|a, b| (a.2, -a.3).partial_cmp(&(b.2, -b.3)).unwrap())
            .expect("policy rows present");
        let (_, param, acc, nfe) = best;
        assert!(
            *acc >= 0.95 && *nfe <= 3.0,
            "seed {seed}: accuracy {acc} at mean_nfe {nfe}"
        );
        // Strict domination of the random-K frontier at equal NFE.
        let rk = frontier_accuracy_at(&mut random_k_points, *nfe);
        assert!(
            *acc > rk,
            "seed {seed}: accuracy {acc} does not strictly dominate random-K {rk} at nfe {nfe}"
        );
        // Match or beat the best threshold accuracy at equal-or-lower NFE.
        let best_threshold = threshold_points
            .iter()
            .filter(|(tnfe, _)| *tnfe >= *nfe - 1e-9)
            .map(|(_, tacc)| *tacc)
            .fold(0.0f64, f64::max);
        assert!(
            *acc >= best_threshold,
            "seed {seed}: accuracy {acc} below best threshold {best_threshold} at equal-or-lower nfe"
        );
        println!(
            "  seed {seed}: best policy row {param} -> accuracy {acc}, mean_nfe {nfe} \
             (random-K frontier there: {rk:.3}, best threshold at >= nfe: {best_threshold:.3})"
        );
    }
    let secs = fix.build_secs + start.elapsed().as_secs_f64();
    assert!(secs < 1800.0, "criterion 8 took {secs:.0}s including training");
    pass(
        "criterion 8 (learning end-to-end)",
        format!(
            "2 seeds trained and evaluated in {secs:.0}s total\n{}",
            write_pareto_csv(&rows)
        ),
    );
}

#[test]
fn criterion_09_alpha_trend() {
    // Qualitative trend: higher alpha gives faster (or equally fast)
    // policies. The training recipe is not pinned here; a higher learning
    // rate keeps the runs short, and they must actually converge or the
    // transient ordering is meaningless (with alpha = 0 empty steps are
    // free, so the converged policy is the most cautious and the slowest).
    let env = alternating_env(8);
    let den = env.exact_denoiser();
    let arch = PolicyArch::default();
    let policy = Policy::new(arch);
    let mut finals: Vec<(f64, f64)> = Vec::new();
    for &alpha in &[0.0, 1.0, 3.0] {
        let mut per_seed = Vec::new();
        for seed in [0u64, 1] {
            let cfg = TrainConfig {
                lr: 2e-4,
                warmup_steps: 50,
                steps: 500,
                alpha,
                ..TrainConfig::default()
            };
            let out = train(&env, &den, &policy, &cfg, 40 + seed, |_, _| {}).unwrap();
            let tail = &out.metrics[out.metrics.len() - 125..];
            let ms = tail.iter().map(|r| r.mean_steps).sum::<f64>() / tail.len() as f64;
            per_seed.push(ms);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        finals.push((alpha, mean));
    }
    // Non-increasing in alpha; ties allowed, so give equality a little
    // Monte-Carlo slack.
    for w in finals.windows(2) {
        assert!(
            w[1].1 <= w[0].1 + 0.25,
            "mean_steps rose with alpha: {:?}",
            finals
        );
    }
    pass(
        "criterion 9 (alpha trend)",
        format!(
            "final mean_steps by alpha: {}",
            finals
                .iter()
                .map(|(a, s)| format!("alpha={a}: {s:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

#[test]
fn criterion_10_oracle_dominance() {
    let alpha = 1.0;
    let envs: Vec<(&str, Environment)> = vec![
        (
            "two_mode_l4",
            Environment::new(MarkovChainSpec::two_mode(0, 4), RewardMode::Validity).unwrap(),
        ),
        ("alternating_l6", alternating_env(6)),
        (
            "cyclic_l6",
            Environment::new(MarkovChainSpec::cyclic(3, 1, 6), RewardMode::Validity).unwrap(),
        ),
        (
            "random_l6",
            Environment::new(random_chain_spec(501, 3, 6, true), RewardMode::Validity).unwrap(),
        ),
    ];
    // A briefly trained policy joins the heuristics as an evaluated method.
    let arch = PolicyArch::default();
    let policy = Policy::new(arch);
    let quick_env = alternating_env(6);
    let quick_den = quick_env.exact_denoiser();
    let cfg = TrainConfig {
        lr: 1e-4,
        warmup_steps: 20,
        steps: 150,
        ..TrainConfig::default()
    };
    let quick = train(&quick_env, &quick_den, &policy, &cfg, 7, |_, _| {}).unwrap();

    let mut checked = 0usize;
    for (env_name, env) in &envs {
        let den = env.exact_denoiser();
        let l = env.answer_len();
        let mut methods: Vec<(String, String, MethodSpec)> = Vec::new();
        for k in scaled_k_grid(l) {
            for kind in [HeuristicKind::RandomK, HeuristicKind::TopK] {
                methods.push((
                    kind.name().into(),
                    format!("K={k}"),
                    MethodSpec::Heuristic(HeuristicSpec {
                        kind,
                        k,
                        lambda: 0.0,
                        block_len: 0,
                    }),
                ));
            }
        }
        for lambda in [0.3, 0.6, 0.9, 1.0] {
            methods.push((
                "threshold".into(),
                format!("lambda={lambda}"),
                MethodSpec::Heuristic(HeuristicSpec {
                    kind: HeuristicKind::Threshold,
                    k: 0,
                    lambda,
                    block_len: 0,
                }),
            ));
        }
        methods.push((
            "policy".into(),
            "alpha=0,tau_pi=1".into(),
            MethodSpec::Policy {
                policy: &policy,
                params: &quick.params,
                tau_pi: 1.0,
            },
        ));

        let settings = SweepSettings {
            n_eval: 100,
            n_seeds: 1,
            ..SweepSettings::default()
        };
        let mut oracle_cache: std::collections::HashMap<Vec<u16>, f64> = Default::default();
        for (mi, (mname, mparam, spec)) in methods.iter().enumerate() {
            let label = format!("crit10/{env_name}/{mname}/{mparam}");
            let outcomes =
                unmaskrl::harness::evaluate_cell(env, &den, spec, &label, &settings, 600 + mi as u64, 0)
                    .unwrap();
            for o in outcomes {
                let key = {
                    let mut k = o.prompt.clone();
                    k.push(u16::MAX);
                    k.extend_from_slice(&o.reference);
                    k
                };
                let best = *oracle_cache.entry(key).or_insert_with(|| {
                    brute_force_best(env, &den, &o.prompt, &o.reference, alpha)
                        .unwrap()
                        .best_reward
                });
                let r = reward(
                    f64::from(u8::from(o.correct)),
                    l,
                    l - o.steps,
                    alpha,
                    RewardShape::Multiplicative,
                );
                assert!(
                    r <= best + 1e-12,
                    "{env_name}/{mname}/{mparam}: task reward {r} exceeds oracle optimum {best}"
                );
                checked += 1;
            }
        }
    }
    pass(
        "criterion 10 (oracle dominance)",
        format!("{checked} task rewards bounded by the schedule oracle across 4 environments"),
    );
}

#[test]
fn criterion_11_expert_steering_mechanics() {
    let env = alternating_env(12);
    let den = env.exact_denoiser();
    let arch = PolicyArch::default();
    let policy = Policy::new(arch);
    let cfg = TrainConfig {
        steps: 200,
        es: Some(HeuristicSpec {
            kind: HeuristicKind::Threshold,
            k: 0,
            lambda: 0.9,
            block_len: 32,
        }),
        clip_eps: 0.2,
        ..TrainConfig::default()
    };
    // Group composition: exactly one expert member.
    let params = unmaskrl::policy::init_policy(&arch, &mut stream(3, "crit11", &[])).unwrap();
    let group = collect_group(&env, &den, &policy, &params, &[], &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1], &cfg, 5, 0, 0, None)
        .unwrap();
    assert_eq!(group.members.len(), 9);
    assert_eq!(group.members.iter().filter(|m| m.is_expert).count(), 1);

    let out = train(&env, &den, &policy, &cfg, 6, |_, _| {}).unwrap();
    assert_eq!(out.metrics.len(), 200, "training must stay finite for 200 steps");
    assert_eq!(out.expert_count_violations, 0, "every group carries exactly one expert");
    let floor = (1.0f64 / 9.0).ln();
    assert!(
        out.min_expert_mixture_lp >= floor - 1e-12,
        "expert mixture logprob {} under the floor {floor}",
        out.min_expert_mixture_lp
    );
    assert!(out.metrics.iter().all(|r| r.grad_norm.is_finite()));
    pass(
        "criterion 11 (expert steering mechanics)",
        format!(
            "200 finite steps, one expert per group, min expert mixture logprob {:.4} >= log(1/9) = {:.4}",
            out.min_expert_mixture_lp, floor
        ),
    );
}

#[test]
fn criterion_12_length_transfer() {
    let fix = trained_policies();
    let env32 = alternating_env(32);
    let den32 = env32.exact_denoiser();
    let policy = Policy::new(fix.arch);
    let settings = SweepSettings {
        n_eval: 300,
        n_seeds: 2,
        ..SweepSettings::default()
    };
    let eval_best = |params: &ParamStore, tag: &str| -> (f64, f64) {
        let methods: Vec<(String, String, MethodSpec)> = [1.0, 0.5, 0.25]
            .iter()
            .map(|&tau_pi| {
                (
                    tag.to_string(),
                    format!("tau_pi={tau_pi}"),
                    MethodSpec::Policy {
                        policy: &policy,
                        params,
                        tau_pi,
                    },
                )
            })
            .collect();
        let rows = pareto_sweep(&env32, &den32, &methods, &settings, 88).unwrap();
        let agg = aggregate(&rows);
        let best = agg
            .iter()
            .max_by(|a, b| (a.2, -a.3).partial_cmp(&(b.2, -b.3)).unwrap())
            .unwrap();
        (best.2, best.3)
    };

    // The L=16 policy runs at L=32 without any re-initialization.
    let (transfer_acc, transfer_nfe) = eval_best(&fix.seeds[0].1, "transfer");

    // Fresh L=32 policy. Cold-start validity signal is vanishing at this
    // length (a random policy almost never produces a coherent parallel
    // commit), so the fresh run uses expert steering; the recipe for the
    // comparison policy is unpinned.
    let cfg = TrainConfig {
        steps: 700,
        es: Some(HeuristicSpec {
            kind: HeuristicKind::Threshold,
            k: 0,
            lambda: 0.9,
            block_len: 32,
        }),
        ..TrainConfig::default()
    }
    .clip_for_es();
    let fresh = train(&env32, &den32, &policy, &cfg, 0, |_, _| {}).unwrap();
    let (fresh_acc, fresh_nfe) = eval_best(&fresh.params, "fresh");

    assert!(
        transfer_acc >= fresh_acc - 0.1,
        "transfer accuracy {transfer_acc} vs freshly trained {fresh_acc}"
    );
    pass(
        "criterion 12 (length transfer)",
        format!(
            "L=16 policy at L=32: accuracy {transfer_acc} (nfe {transfer_nfe}); fresh L=32: accuracy {fresh_acc} (nfe {fresh_nfe})"
        ),
    );
}

#[test]
fn criterion_13_determinism() {
    let bin = env!("CARGO_BIN_EXE_unmaskrl");
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str], cwd: &std::path::Path| {
        let out = std::process::Command::new(bin)
            .args(args)
            .current_dir(cwd)
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "command {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let read = |p: std::path::PathBuf| std::fs::read(p).expect("output exists");

    // verify twice
    for d in ["v1", "v2"] {
        run(&["verify", "--seed", "9", "--out", d], tmp.path());
    }
    assert_eq!(
        read(tmp.path().join("v1/report.txt")),
        read(tmp.path().join("v2/report.txt"))
    );
    assert_eq!(
        read(tmp.path().join("v1/resolved_config")),
        read(tmp.path().join("v2/resolved_config"))
    );

    // train twice (10 steps)
    for d in ["t1", "t2"] {
        run(
            &[
                "train",
                "--seed",
                "9",
                "--out",
                d,
                "--set",
                "train.steps=10",
                "--set",
                "train.checkpoint_every=5",
            ],
            tmp.path(),
        );
    }
    for f in [
        "metrics.csv",
        "checkpoint_000005.uprl",
        "checkpoint_000010.uprl",
        "checkpoint_final.uprl",
        "resolved_config",
    ] {
        assert_eq!(
            read(tmp.path().join("t1").join(f)),
            read(tmp.path().join("t2").join(f)),
            "train output {f} differs between identical runs"
        );
    }

    // eval twice against the same relative checkpoint path
    for d in ["e1", "e2"] {
        run(
            &[
                "eval",
                "--seed",
                "9",
                "--out",
                d,
                "--set",
                "eval.checkpoints=t1/checkpoint_final.uprl",
                "--set",
                "eval.n_eval=50",
                "--set",
                "eval.n_seeds=2",
            ],
            tmp.path(),
        );
    }
    for f in ["pareto.csv", "resolved_config"] {
        assert_eq!(
            read(tmp.path().join("e1").join(f)),
            read(tmp.path().join("e2").join(f)),
            "eval output {f} differs between identical runs"
        );
    }
    // metrics rows are append-only and monotone in step
    let metrics = String::from_utf8(read(tmp.path().join("t1/metrics.csv"))).unwrap();
    let steps: Vec<usize> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    pass(
        "criterion 13 (determinism)",
        "verify, train (10 steps) and eval outputs byte-identical across repeated seeded runs",
    );
}
