//! Command-line entry point: train | eval | sweep | verify | oracle, driven
//! by a line-oriented config file plus repeatable `--set key=value`
//! overrides. All randomness flows from `--seed` through named sub-streams;
//! repeated runs write byte-identical outputs.

use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use unmaskrl::autodiff::{load_checkpoint, save_checkpoint, GradError, ParamStore};
use unmaskrl::config::{load_config, ConfigError, DenoiserKind, RunConfig};
use unmaskrl::env::mdm::{train_mdm, Mdm, MdmArch, MdmTrainConfig};
use unmaskrl::env::{Denoiser, EnvError, Environment};
use unmaskrl::grpo::MetricsRow;
use unmaskrl::harness::{
    default_threshold_grid, oracle::brute_force_best, pareto_sweep, scaled_k_grid,
    verify::verify_suite, write_pareto_csv, MethodSpec, SweepSettings,
};
use unmaskrl::heuristics::{HeuristicKind, HeuristicSpec};
use unmaskrl::policy::{init_policy, Policy, PolicyArch};
use unmaskrl::rng::stream;

#[derive(Parser)]
#[command(
    name = "unmaskrl",
    about = "Learned parallel-unmasking policies on solvable diffusion environments",
    version
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train an unmasking policy and write checkpoints plus metrics.
    Train(Common),
    /// Evaluate policy checkpoints into an accuracy-vs-NFE CSV.
    Eval(Common),
    /// Sweep heuristic grids (and any checkpoints) into a Pareto CSV.
    Sweep(Common),
    /// Run the invariant battery; nonzero exit on any failure.
    Verify(Common),
    /// Brute-force the best unmask schedule for one prompt.
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    /// Path to a config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.alpha=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed; every random stream derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

enum AppError {
    Config(String),
    Check,
    Numerical(String),
    Runtime(String),
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Check => 1,
            AppError::Config(_) => 2,
            AppError::Numerical(_) => 3,
            AppError::Runtime(_) => 1,
        }
    }
    fn message(&self) -> String {
        match self {
            AppError::Check => "verification failed".into(),
            AppError::Config(m) | AppError::Numerical(m) | AppError::Runtime(m) => m.clone(),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<GradError> for AppError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::NonFinite { .. }
            | GradError::NonFiniteLoss(_)
            | GradError::LogUnderflow { .. } => AppError::Numerical(e.to_string()),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<EnvError> for AppError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Diverged(_) => AppError::Numerical(e.to_string()),
            EnvError::Grad(g) => AppError::from(g),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(format!("i/o: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.verb {
        Verb::Train(c) => run_train(c),
        Verb::Eval(c) => run_eval(c, false),
        Verb::Sweep(c) => run_eval(c, true),
        Verb::Verify(c) => run_verify(c),
        Verb::Oracle(c) => run_oracle(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, AppError> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    Ok(load_config(&text, &common.set)?)
}

fn prepare_out(common: &Common, cfg: &RunConfig) -> Result<(), AppError> {
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(
        common.out.join("resolved_config"),
        cfg.resolved_text(common.seed),
    )?;
    Ok(())
}

/// The denoiser the rollouts run against: the exact chain posterior, or a
/// trained masked predictor (loaded from a checkpoint, or trained now and
/// saved next to the run outputs).
fn build_denoiser<'a>(
    cfg: &RunConfig,
    env: &'a Environment,
    seed: u64,
    out: Option<&Path>,
) -> Result<Box<dyn Denoiser + 'a>, AppError> {
    match cfg.env.denoiser {
        DenoiserKind::Exact => Ok(Box::new(env.exact_denoiser())),
        DenoiserKind::Trained => {
            if !cfg.env.mdm_checkpoint.is_empty() {
                let (params, manifest) = load_checkpoint(Path::new(&cfg.env.mdm_checkpoint))?;
                if manifest.kind != "mdm" {
                    return Err(AppError::Runtime(format!(
                        "checkpoint {} holds '{}', expected 'mdm'",
                        cfg.env.mdm_checkpoint, manifest.kind
                    )));
                }
                let arch: MdmArch = serde_json::from_value(manifest.arch.clone())
                    .map_err(|e| AppError::Runtime(format!("denoiser manifest: {e}")))?;
                if arch.vocab != env.vocab() || arch.max_len < env.prompt_len() + env.answer_len() {
                    return Err(AppError::Runtime(format!(
                        "denoiser checkpoint mismatch: vocab {} / max_len {} vs environment vocab {} / length {}",
                        arch.vocab,
                        arch.max_len,
                        env.vocab(),
                        env.prompt_len() + env.answer_len()
                    )));
                }
                Ok(Box::new(Mdm::new(arch, params, env.mask_token())))
            } else {
                let mdm_cfg = MdmTrainConfig {
                    blocks: cfg.env.mdm_blocks,
                    hidden: cfg.env.mdm_hidden,
                    ff: cfg.env.mdm_ff,
                    heads: cfg.env.mdm_heads,
                    steps: cfg.env.mdm_steps,
                    batch: cfg.env.mdm_batch,
                    lr: cfg.env.mdm_lr,
                };
                let mdm = train_mdm(env, &mdm_cfg, seed)?;
                if let Some(out) = out {
                    save_checkpoint(
                        &out.join("mdm.uprl"),
                        &mdm.params,
                        "mdm",
                        serde_json::to_value(mdm.arch).expect("arch serializes"),
                        cfg.env.mdm_steps as u64,
                        seed,
                        None,
                    )?;
                }
                Ok(Box::new(mdm))
            }
        }
    }
}

fn run_train(common: &Common) -> Result<(), AppError> {
    let cfg = load(common)?;
    prepare_out(common, &cfg)?;
    let env = Environment::new(cfg.env.spec.clone(), cfg.env.reward_mode)?;
    let denoiser = build_denoiser(&cfg, &env, common.seed, Some(&common.out))?;
    let policy = Policy::new(cfg.policy);
    let train_cfg = cfg.train.to_train_config();

    let metrics_path = common.out.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path)?;
    writeln!(metrics, "{}", MetricsRow::CSV_HEADER)?;
    let every = cfg.train.checkpoint_every;
    let alpha = cfg.train.alpha;
    let arch_json = serde_json::to_value(cfg.policy).expect("arch serializes");
    let out_dir = common.out.clone();
    let seed = common.seed;
    let mut io_err: Option<std::io::Error> = None;

    let outcome = unmaskrl::grpo::train(
        &env,
        denoiser.as_ref(),
        &policy,
        &train_cfg,
        seed,
        |row, params| {
            if io_err.is_some() {
                return;
            }
            let mut write = || -> std::io::Result<()> {
                writeln!(metrics, "{}", row.to_csv())?;
                metrics.flush()?;
                if (row.step + 1) % every == 0 {
                    save_params(
                        &out_dir.join(format!("checkpoint_{:06}.uprl", row.step + 1)),
                        params,
                        &arch_json,
                        (row.step + 1) as u64,
                        seed,
                        alpha,
                    )?;
                }
                Ok(())
            };
            if let Err(e) = write() {
                io_err = Some(e);
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_params(
        &common.out.join("checkpoint_final.uprl"),
        &outcome.params,
        &arch_json,
        (cfg.train.steps * cfg.train.epochs) as u64,
        seed,
        alpha,
    )?;
    let last = outcome.metrics.last();
    println!(
        "trained {} steps; final mean_reward {} mean_steps {}",
        outcome.metrics.len(),
        last.map_or(0.0, |r| r.mean_reward),
        last.map_or(0.0, |r| r.mean_steps),
    );
    Ok(())
}

fn save_params(
    path: &Path,
    params: &ParamStore,
    arch_json: &serde_json::Value,
    step: u64,
    seed: u64,
    alpha: f64,
) -> std::io::Result<()> {
    save_checkpoint(path, params, "policy", arch_json.clone(), step, seed, Some(alpha))
        .map_err(|e| std::io::Error::other(e.to_string()))
}

/// Load a policy checkpoint and check its parameters against the manifest
/// architecture, naming any mismatched field.
fn load_policy_checkpoint(path: &str) -> Result<(Policy, ParamStore, f64), AppError> {
    let (params, manifest) = load_checkpoint(Path::new(path))?;
    if manifest.kind != "policy" {
        return Err(AppError::Runtime(format!(
            "checkpoint {path} holds '{}', expected 'policy'",
            manifest.kind
        )));
    }
    let arch: PolicyArch = serde_json::from_value(manifest.arch.clone())
        .map_err(|e| AppError::Runtime(format!("{path}: manifest arch: {e}")))?;
    let expect = init_policy(&arch, &mut stream(0, "ckpt-shape-check", &[]))
        .map_err(|e| AppError::Runtime(e.to_string()))?;
    for (name, shape, _) in expect.iter() {
        match params.shape(name) {
            None => {
                return Err(AppError::Runtime(format!(
                    "{path}: missing parameter '{name}' for the manifest architecture"
                )))
            }
            Some(s) if s != shape => {
                return Err(AppError::Runtime(format!(
                    "{path}: parameter '{name}' has shape {}x{}, architecture wants {}x{}",
                    s.rows, s.cols, shape.rows, shape.cols
                )))
            }
            _ => {}
        }
    }
    if params.len() != expect.len() {
        let extra: Vec<&str> = params
            .names()
            .filter(|n| expect.shape(n).is_none())
            .collect();
        return Err(AppError::Runtime(format!(
            "{path}: unexpected parameters {extra:?}"
        )));
    }
    Ok((Policy::new(arch), params, manifest.alpha.unwrap_or(0.0)))
}

fn run_eval(common: &Common, include_heuristics: bool) -> Result<(), AppError> {
    let cfg = load(common)?;
    if !include_heuristics && cfg.eval.checkpoints.is_empty() {
        return Err(AppError::Config(
            "eval requires eval.checkpoints (use sweep for heuristics alone)".into(),
        ));
    }
    prepare_out(common, &cfg)?;
    let env = Environment::new(cfg.env.spec.clone(), cfg.env.reward_mode)?;
    let denoiser = build_denoiser(&cfg, &env, common.seed, Some(&common.out))?;

    let loaded: Vec<(Policy, ParamStore, f64)> = cfg
        .eval
        .checkpoints
        .iter()
        .map(|p| load_policy_checkpoint(p))
        .collect::<Result<_, _>>()?;

    let mut methods: Vec<(String, String, MethodSpec)> = Vec::new();
    if include_heuristics {
        let l = env.answer_len();
        let ks = |grid: &[usize]| -> Vec<usize> {
            if grid.is_empty() {
                scaled_k_grid(l)
            } else {
                grid.to_vec()
            }
        };
        for k in ks(&cfg.eval.random_k_grid) {
            methods.push((
                "random_k".into(),
                format!("K={k}"),
                MethodSpec::Heuristic(HeuristicSpec {
                    kind: HeuristicKind::RandomK,
                    k,
                    lambda: 0.0,
                    block_len: cfg.eval.block_len,
                }),
            ));
        }
        for k in ks(&cfg.eval.top_k_grid) {
            methods.push((
                "top_k".into(),
                format!("K={k}"),
                MethodSpec::Heuristic(HeuristicSpec {
                    kind: HeuristicKind::TopK,
                    k,
                    lambda: 0.0,
                    block_len: cfg.eval.block_len,
                }),
            ));
        }
        let thresholds = if cfg.eval.threshold_grid.is_empty() {
            default_threshold_grid()
        } else {
            cfg.eval.threshold_grid.clone()
        };
        for lambda in thresholds {
            methods.push((
                "threshold".into(),
                format!("lambda={lambda}"),
                MethodSpec::Heuristic(HeuristicSpec {
                    kind: HeuristicKind::Threshold,
                    k: 0,
                    lambda,
                    block_len: cfg.eval.block_len,
                }),
            ));
        }
    }
    for (policy, params, alpha) in &loaded {
        for &tau_pi in &cfg.eval.tau_pi_grid {
            methods.push((
                "policy".into(),
                format!("alpha={alpha},tau_pi={tau_pi}"),
                MethodSpec::Policy {
                    policy,
                    params,
                    tau_pi,
                },
            ));
        }
    }

    let settings = SweepSettings {
        n_eval: cfg.eval.n_eval,
        n_seeds: cfg.eval.n_seeds,
        tau: cfg.eval.tau,
        block_len: cfg.eval.block_len,
        workers: cfg.eval.workers,
    };
    let rows = pareto_sweep(&env, denoiser.as_ref(), &methods, &settings, common.seed)?;
    let csv = write_pareto_csv(&rows);
    std::fs::write(common.out.join("pareto.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_verify(common: &Common) -> Result<(), AppError> {
    let cfg = load(common)?;
    prepare_out(common, &cfg)?;
    let report = verify_suite(common.seed);
    let text = report.to_text();
    std::fs::write(common.out.join("report.txt"), &text)?;
    print!("{text}");
    if report.passed() {
        Ok(())
    } else {
        Err(AppError::Check)
    }
}

fn run_oracle(common: &Common) -> Result<(), AppError> {
    let cfg = load(common)?;
    prepare_out(common, &cfg)?;
    let env = Environment::new(cfg.env.spec.clone(), cfg.env.reward_mode)?;
    if env.prompt_len() > 0 && cfg.eval.oracle_prompt.len() != env.prompt_len() {
        return Err(AppError::Config(
            "oracle needs eval.oracle_prompt with env.prompt_len entries".into(),
        ));
    }
    if cfg.env.reward_mode == unmaskrl::env::RewardMode::ExactMatch
        && cfg.eval.oracle_reference.len() != env.answer_len()
    {
        return Err(AppError::Config(
            "oracle under exact_match needs eval.oracle_reference with env.answer_len entries".into(),
        ));
    }
    let denoiser = build_denoiser(&cfg, &env, common.seed, Some(&common.out))?;
    let result = brute_force_best(
        &env,
        denoiser.as_ref(),
        &cfg.eval.oracle_prompt,
        &cfg.eval.oracle_reference,
        cfg.eval.oracle_alpha,
    )?;
    let mut text = format!(
        "best_reward = {}\nsteps = {}\n",
        result.best_reward, result.steps
    );
    for (i, set) in result.schedule.iter().enumerate() {
        let positions: Vec<String> = set.iter().map(|k| k.to_string()).collect();
        text.push_str(&format!("step {i}: unmask {}\n", positions.join(" ")));
    }
    std::fs::write(common.out.join("oracle.txt"), &text)?;
    print!("{text}");
    Ok(())
}
