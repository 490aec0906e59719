//! The learnable unmasking policy: a single pre-norm transformer block over
//! per-position confidence features, conditioned on the normalized time
//! index through adaptive layer norm, with a scalar score head per position.
//! Positions enter only through rotary rotation inside attention, so the
//! same parameters run at any generation length.

pub mod heads;

use crate::autodiff::{GradError, NodeId, ParamStore, Shape, Tape};
use crate::env::rollout::StepFeatures;
use crate::env::{DenoiserOutput, GenState};
use crate::nn;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Bernoulli,
    Dpls,
}

impl HeadKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bernoulli" => Some(HeadKind::Bernoulli),
            "dpls" => Some(HeadKind::Dpls),
            _ => None,
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Bernoulli => "bernoulli",
            HeadKind::Dpls => "dpls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub blocks: usize,
    pub hidden: usize,
    pub ff: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub top_n_conf: usize,
    pub head: HeadKind,
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch {
            blocks: 1,
            hidden: 128,
            ff: 512,
            heads: 2,
            time_embed_dim: 128,
            top_n_conf: 1,
            head: HeadKind::Bernoulli,
        }
    }
}

impl PolicyArch {
    pub fn validate(&self) -> Result<(), GradError> {
        let ok = self.blocks >= 1
            && self.heads >= 1
            && self.hidden % self.heads == 0
            && (self.hidden / self.heads) % 2 == 0
            && self.time_embed_dim >= 2
            && self.time_embed_dim % 2 == 0
            && self.top_n_conf >= 1
            && self.ff >= 1;
        if ok {
            Ok(())
        } else {
            Err(GradError::Format(format!("invalid policy architecture {self:?}")))
        }
    }

    pub fn feature_width(&self) -> usize {
        self.top_n_conf + 1
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let block = 4 * (h * h + h) + (h * self.ff + self.ff) + (self.ff * h + h);
        let ada = (self.time_embed_dim * self.time_embed_dim + self.time_embed_dim)
            + 4 * (self.time_embed_dim * h + h);
        self.feature_width() * h + h + self.blocks * (block + ada) + h + 1
    }
}

/// Fresh parameters: truncated normal (std 0.02) weights, zero biases, and a
/// zero output head so the initial Bernoulli probabilities are exactly 0.5.
pub fn init_policy(arch: &PolicyArch, rng: &mut ChaCha12Rng) -> Result<ParamStore, GradError> {
    arch.validate()?;
    let mut store = ParamStore::new();
    nn::init_matrix(&mut store, "pol.in.w", arch.feature_width(), arch.hidden, rng)?;
    nn::init_zeros(&mut store, "pol.in.b", 1, arch.hidden)?;
    for b in 0..arch.blocks {
        let prefix = format!("pol.b{b}");
        nn::init_block(&mut store, &prefix, arch.hidden, arch.ff, rng)?;
        nn::init_adaln(&mut store, &prefix, arch.time_embed_dim, arch.hidden, rng)?;
    }
    nn::init_zeros(&mut store, "pol.out.w", arch.hidden, 1)?;
    nn::init_zeros(&mut store, "pol.out.b", 1, 1)?;
    debug_assert_eq!(store.total_count(), arch.param_count());
    Ok(store)
}

/// Observation features for the policy input; thin wrapper over the rollout
/// observation with the arch's confidence width.
pub fn featurize(
    state: &GenState,
    den: &DenoiserOutput,
    arch: &PolicyArch,
    t_budget: usize,
) -> StepFeatures {
    StepFeatures::build(state, den, arch.top_n_conf, t_budget)
}

/// Policy network plus its cached head selectors.
pub struct Policy {
    pub arch: PolicyArch,
    sel: nn::HeadSelectors,
}

impl Policy {
    pub fn new(arch: PolicyArch) -> Self {
        let sel = nn::head_selectors(arch.hidden, arch.heads);
        Policy { arch, sel }
    }

    /// Build the forward graph on `tape`, returning the L x 1 logits node.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        feats: &StepFeatures,
    ) -> Result<NodeId, GradError> {
        let width = self.arch.feature_width();
        debug_assert_eq!(feats.width(), width);
        let x = tape.input(Shape::new(feats.len, width), feats.per_pos.clone());
        let mut h = nn::linear(tape, params, x, "pol.in.w", "pol.in.b")?;
        for b in 0..self.arch.blocks {
            let prefix = format!("pol.b{b}");
            let cond = nn::adaln_cond(
                tape,
                params,
                &prefix,
                feats.time_frac,
                self.arch.time_embed_dim,
            )?;
            h = nn::block_forward(tape, params, &prefix, h, &self.sel, Some(&cond), 0)?;
        }
        let h = tape.layer_norm(h, nn::LN_EPS)?;
        nn::linear(tape, params, h, "pol.out.w", "pol.out.b")
    }

    /// Evaluate the unmasking logits for one observation.
    pub fn forward(&self, params: &ParamStore, feats: &StepFeatures) -> Result<Vec<f64>, GradError> {
        let mut tape = Tape::new();
        let out = self.forward_graph(&mut tape, params, feats)?;
        let v = tape.value(out);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GradError::NonFinite {
                node: out,
                op: "policy_forward",
            });
        }
        Ok(v.to_vec())
    }
}
