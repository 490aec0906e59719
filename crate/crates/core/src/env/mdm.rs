//! A tiny trained masked predictor over chain sequences: BERT-style
//! transformer that reads the prompt plus partially masked answer and
//! predicts every original token. Trained by stochastic masking under the
//! standard masked-diffusion bound; it takes no explicit time input, the
//! mask count determines the effective corruption level.

use super::{forward_mask, Denoiser, DenoiserOutput, EnvError, Environment, GenState, Token};
use crate::autodiff::{GradError, NodeId, ParamStore, Shape, Tape};
use crate::grpo::optim::{OptimConfig, Optimizer, Schedule};
use crate::nn;
use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdmArch {
    pub blocks: usize,
    pub hidden: usize,
    pub ff: usize,
    pub heads: usize,
    /// Non-mask vocabulary size; the embedding table has one extra row for
    /// the mask token.
    pub vocab: usize,
    /// Longest sequence (prompt + answer) the model can read; sizes the
    /// learned absolute position table.
    pub max_len: usize,
}

impl MdmArch {
    pub fn validate(&self) -> Result<(), GradError> {
        let ok = self.blocks >= 1
            && self.heads >= 1
            && self.hidden % self.heads == 0
            && (self.hidden / self.heads) % 2 == 0
            && self.vocab >= 1
            && self.max_len >= 1;
        if ok {
            Ok(())
        } else {
            Err(GradError::Format(format!("invalid denoiser architecture {self:?}")))
        }
    }
}

pub fn init_mdm_params(
    arch: &MdmArch,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<ParamStore, GradError> {
    arch.validate()?;
    let mut store = ParamStore::new();
    nn::init_matrix(&mut store, "mdm.embed", arch.vocab + 1, arch.hidden, rng)?;
    // Learned absolute positions, BERT-style: a masked predictor must be
    // able to tell identical masked inputs apart by position alone.
    nn::init_matrix(&mut store, "mdm.pos", arch.max_len, arch.hidden, rng)?;
    for b in 0..arch.blocks {
        nn::init_block(&mut store, &format!("mdm.b{b}"), arch.hidden, arch.ff, rng)?;
    }
    nn::init_matrix(&mut store, "mdm.out.w", arch.hidden, arch.vocab, rng)?;
    nn::init_zeros(&mut store, "mdm.out.b", 1, arch.vocab)?;
    Ok(store)
}

/// Build the logits graph for one token sequence: rows are sequence
/// positions, columns the non-mask vocabulary.
pub fn mdm_logits_graph(
    tape: &mut Tape,
    params: &ParamStore,
    arch: &MdmArch,
    sel: &nn::HeadSelectors,
    tokens: &[Token],
) -> Result<NodeId, GradError> {
    if tokens.len() > arch.max_len {
        return Err(GradError::Format(format!(
            "sequence of {} tokens exceeds the model's max_len {}",
            tokens.len(),
            arch.max_len
        )));
    }
    let table = tape.param(params, "mdm.embed")?;
    let rows: Vec<usize> = tokens.iter().map(|&t| usize::from(t)).collect();
    let tok_emb = tape.gather(table, rows)?;
    let pos_table = tape.param(params, "mdm.pos")?;
    let pos_emb = tape.gather(pos_table, (0..tokens.len()).collect())?;
    let mut h = tape.add(tok_emb, pos_emb)?;
    for b in 0..arch.blocks {
        h = nn::block_forward(tape, params, &format!("mdm.b{b}"), h, sel, None, 0)?;
    }
    let h = tape.layer_norm(h, nn::LN_EPS)?;
    nn::linear(tape, params, h, "mdm.out.w", "mdm.out.b")
}

/// One training batch for the masked-prediction bound.
#[derive(Debug, Clone)]
pub struct ElboBatch {
    pub x0: Vec<Vec<Token>>,
    pub t: Vec<f64>,
    pub xt: Vec<Vec<Token>>,
}

/// Negative masked-prediction bound, averaged over the batch: for each
/// element, -(1/t) * sum over masked positions of log p(x0 | xt).
pub fn elbo_loss_graph(
    tape: &mut Tape,
    params: &ParamStore,
    arch: &MdmArch,
    sel: &nn::HeadSelectors,
    batch: &ElboBatch,
    mask: Token,
) -> Result<NodeId, EnvError> {
    assert_eq!(batch.x0.len(), batch.t.len());
    assert_eq!(batch.x0.len(), batch.xt.len());
    let mut total: Option<NodeId> = None;
    for ((x0, &t), xt) in batch.x0.iter().zip(&batch.t).zip(&batch.xt) {
        let n_masked = xt.iter().filter(|&&tok| tok == mask).count();
        if n_masked == 0 {
            continue;
        }
        if t <= 0.0 {
            return Err(EnvError::Contract(
                "corruption level t must be positive when masked tokens are present".into(),
            ));
        }
        let logits = mdm_logits_graph(tape, params, arch, sel, xt)?;
        let probs = tape.softmax(logits)?;
        let logp = tape.log(probs)?;
        let s = xt.len();
        let mut onehot = vec![0.0; s * arch.vocab];
        for (i, (&orig, &cur)) in x0.iter().zip(xt).enumerate() {
            if cur == mask {
                onehot[i * arch.vocab + usize::from(orig)] = 1.0;
            }
        }
        let ind = tape.input(Shape::new(s, arch.vocab), onehot);
        let picked = tape.mul(logp, ind)?;
        let ssum = tape.sum(picked)?;
        let weighted = tape.scale(ssum, 1.0 / t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    let loss = match total {
        Some(acc) => tape.scale(acc, -1.0 / batch.x0.len() as f64)?,
        None => tape.scalar_input(0.0),
    };
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct MdmTrainConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub ff: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for MdmTrainConfig {
    fn default() -> Self {
        MdmTrainConfig {
            blocks: 2,
            hidden: 64,
            ff: 256,
            heads: 2,
            steps: 1200,
            batch: 32,
            lr: 1e-3,
        }
    }
}

/// A trained denoiser bundled with its architecture.
pub struct Mdm {
    pub arch: MdmArch,
    pub params: ParamStore,
    sel: nn::HeadSelectors,
    mask: Token,
}

impl Mdm {
    pub fn new(arch: MdmArch, params: ParamStore, mask: Token) -> Self {
        let sel = nn::head_selectors(arch.hidden, arch.heads);
        Mdm {
            arch,
            params,
            sel,
            mask,
        }
    }

    /// Per-position distributions for the answer region; committed rows are
    /// one-hot on the committed token.
    pub fn predict(&self, prompt: &[Token], answer: &[Token]) -> Result<DenoiserOutput, EnvError> {
        let mut tokens = Vec::with_capacity(prompt.len() + answer.len());
        tokens.extend_from_slice(prompt);
        tokens.extend_from_slice(answer);
        let mut tape = Tape::new();
        let logits = mdm_logits_graph(&mut tape, &self.params, &self.arch, &self.sel, &tokens)?;
        let probs = tape.softmax(logits)?;
        let v = self.arch.vocab;
        let all = tape.value(probs);
        let d = prompt.len();
        let mut dists = vec![0.0; answer.len() * v];
        for (k, &tok) in answer.iter().enumerate() {
            let row = &mut dists[k * v..(k + 1) * v];
            if tok == self.mask {
                row.copy_from_slice(&all[(d + k) * v..(d + k + 1) * v]);
            } else {
                row[usize::from(tok)] = 1.0;
            }
        }
        Ok(DenoiserOutput::from_dists(v, dists))
    }
}

impl Denoiser for Mdm {
    fn denoise(&self, state: &GenState) -> Result<DenoiserOutput, EnvError> {
        self.predict(&state.prompt, &state.answer)
    }
}

/// Level below which the corruption draw is truncated: bounds the 1/t weight.
const T_FLOOR: f64 = 0.01;

/// Train a fresh tiny masked predictor on sequences drawn from the
/// environment. Aborts with the step index if the loss goes non-finite.
pub fn train_mdm(env: &Environment, cfg: &MdmTrainConfig, seed: u64) -> Result<Mdm, EnvError> {
    let arch = MdmArch {
        blocks: cfg.blocks,
        hidden: cfg.hidden,
        ff: cfg.ff,
        heads: cfg.heads,
        vocab: env.vocab(),
        max_len: env.prompt_len() + env.answer_len(),
    };
    let mut rng = stream(seed, "mdm-init", &[]);
    let mut params = init_mdm_params(&arch, &mut rng)?;
    let sel = nn::head_selectors(arch.hidden, arch.heads);
    let mask = env.mask_token();
    let mut opt = Optimizer::new(OptimConfig::new(cfg.lr, Schedule::Constant, 0, cfg.steps));
    for step in 0..cfg.steps {
        let mut data_rng = stream(seed, "mdm-data", &[step as u64]);
        let mut batch = ElboBatch {
            x0: Vec::with_capacity(cfg.batch),
            t: Vec::with_capacity(cfg.batch),
            xt: Vec::with_capacity(cfg.batch),
        };
        for _ in 0..cfg.batch {
            let (prompt, answer) = env.sample_task(&mut data_rng);
            let mut x0 = prompt;
            x0.extend_from_slice(&answer);
            let t: f64 = data_rng.gen_range(T_FLOOR..1.0);
            let xt = forward_mask(&x0, t, mask, &mut data_rng);
            batch.x0.push(x0);
            batch.t.push(t);
            batch.xt.push(xt);
        }
        let mut tape = Tape::new();
        let loss = elbo_loss_graph(&mut tape, &params, &arch, &sel, &batch, mask)?;
        if !tape.scalar(loss).is_finite() {
            return Err(EnvError::Diverged(step));
        }
        let grads = tape.backward(loss, &params)?;
        opt.step(&mut params, &grads);
    }
    Ok(Mdm::new(arch, params, mask))
}

/// Read-through cache over a deterministic denoiser, keyed by the full
/// (prompt, answer) token sequence. Purely a compute saver; results are
/// identical with or without it.
pub struct CachedDenoiser<'a> {
    inner: &'a dyn Denoiser,
    cache: Mutex<HashMap<Vec<Token>, DenoiserOutput>>,
    capacity: usize,
}

impl<'a> CachedDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser, capacity: usize) -> Self {
        CachedDenoiser {
            inner,
            cache: Mutex::new(HashMap::new()),
            capacity,
        }
    }
}

impl Denoiser for CachedDenoiser<'_> {
    fn denoise(&self, state: &GenState) -> Result<DenoiserOutput, EnvError> {
        let mut key = Vec::with_capacity(state.prompt.len() + state.answer.len());
        key.extend_from_slice(&state.prompt);
        key.extend_from_slice(&state.answer);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let out = self.inner.denoise(state)?;
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= self.capacity {
            cache.clear();
        }
        cache.insert(key, out.clone());
        Ok(out)
    }
}
