//! Shared network building blocks: a pre-norm transformer block with rotary
//! position rotation in the attention heads, SiLU feed-forward, and optional
//! adaptive layer-norm conditioning. Everything is assembled from the
//! autodiff primitive set; heads are sliced with constant 0/1 selector
//! matrices so no extra tensor ops are needed.

use crate::autodiff::{GradError, NodeId, ParamStore, Shape, Tape};
use crate::rng::trunc_normal;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

pub const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10000.0;
pub const INIT_STD: f64 = 0.02;

/// Constant column-selector matrices, one per attention head. Selector `h`
/// is `hidden x head_dim` with ones on the rows of head `h`'s slice.
#[derive(Clone)]
pub struct HeadSelectors {
    pub hidden: usize,
    pub heads: usize,
    pub mats: Vec<Arc<Vec<f64>>>,
}

pub fn head_selectors(hidden: usize, heads: usize) -> HeadSelectors {
    assert!(heads > 0 && hidden % heads == 0);
    let dh = hidden / heads;
    let mats = (0..heads)
        .map(|h| {
            let mut m = vec![0.0; hidden * dh];
            for c in 0..dh {
                m[(h * dh + c) * dh + c] = 1.0;
            }
            Arc::new(m)
        })
        .collect();
    HeadSelectors {
        hidden,
        heads,
        mats,
    }
}

pub fn init_matrix(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(), GradError> {
    let data: Vec<f64> = (0..rows * cols).map(|_| trunc_normal(rng, INIT_STD)).collect();
    store.insert(name, Shape::new(rows, cols), data)
}

pub fn init_zeros(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<(), GradError> {
    store.insert(name, Shape::new(rows, cols), vec![0.0; rows * cols])
}

/// Weights and zero biases for one transformer block under `{prefix}.`.
pub fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    hidden: usize,
    ff: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(), GradError> {
    for w in ["wq", "wk", "wv", "wo"] {
        init_matrix(store, &format!("{prefix}.attn.{w}"), hidden, hidden, rng)?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        init_zeros(store, &format!("{prefix}.attn.{b}"), 1, hidden)?;
    }
    init_matrix(store, &format!("{prefix}.ff.w1"), hidden, ff, rng)?;
    init_zeros(store, &format!("{prefix}.ff.b1"), 1, ff)?;
    init_matrix(store, &format!("{prefix}.ff.w2"), ff, hidden, rng)?;
    init_zeros(store, &format!("{prefix}.ff.b2"), 1, hidden)?;
    Ok(())
}

/// Conditioning MLP for adaptive layer norm: a shared hidden layer plus four
/// zero-initialized heads (scale/shift for each of the two norm sites), so a
/// fresh network starts as plain layer norm.
pub fn init_adaln(
    store: &mut ParamStore,
    prefix: &str,
    time_dim: usize,
    hidden: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(), GradError> {
    init_matrix(store, &format!("{prefix}.time.w1"), time_dim, time_dim, rng)?;
    init_zeros(store, &format!("{prefix}.time.b1"), 1, time_dim)?;
    for head in ["scale1", "shift1", "scale2", "shift2"] {
        init_zeros(store, &format!("{prefix}.ada.{head}.w"), time_dim, hidden)?;
        init_zeros(store, &format!("{prefix}.ada.{head}.b"), 1, hidden)?;
    }
    Ok(())
}

pub fn linear(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    w: &str,
    b: &str,
) -> Result<NodeId, GradError> {
    let wn = tape.param(store, w)?;
    let bn = tape.param(store, b)?;
    let y = tape.matmul(x, wn)?;
    tape.add(y, bn)
}

pub fn silu(tape: &mut Tape, x: NodeId) -> Result<NodeId, GradError> {
    let s = tape.sigmoid(x)?;
    tape.mul(x, s)
}

/// Sinusoidal embedding of a scalar in [0, 1]; the input is scaled up so the
/// low-frequency channels still vary over the unit interval.
pub fn sinusoidal_embedding(x: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let scaled = x * 1000.0;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = ROPE_BASE.powf(-(i as f64) / (half as f64));
        out.push((scaled * freq).sin());
    }
    for i in 0..half {
        let freq = ROPE_BASE.powf(-(i as f64) / (half as f64));
        out.push((scaled * freq).cos());
    }
    out
}

/// Per-block adaptive layer-norm conditioning computed from the normalized
/// time index.
pub struct AdaCond {
    pub scale1: NodeId,
    pub shift1: NodeId,
    pub scale2: NodeId,
    pub shift2: NodeId,
}

pub fn adaln_cond(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    time_frac: f64,
    time_dim: usize,
) -> Result<AdaCond, GradError> {
    let emb = sinusoidal_embedding(time_frac, time_dim);
    let e = tape.input(Shape::new(1, time_dim), emb);
    let h = linear(
        tape,
        store,
        e,
        &format!("{prefix}.time.w1"),
        &format!("{prefix}.time.b1"),
    )?;
    let h = silu(tape, h)?;
    let head = |tape: &mut Tape, name: &str| -> Result<NodeId, GradError> {
        linear(
            tape,
            store,
            h,
            &format!("{prefix}.ada.{name}.w"),
            &format!("{prefix}.ada.{name}.b"),
        )
    };
    Ok(AdaCond {
        scale1: head(tape, "scale1")?,
        shift1: head(tape, "shift1")?,
        scale2: head(tape, "scale2")?,
        shift2: head(tape, "shift2")?,
    })
}

fn modulated_norm(
    tape: &mut Tape,
    x: NodeId,
    scale: Option<NodeId>,
    shift: Option<NodeId>,
) -> Result<NodeId, GradError> {
    let h = tape.layer_norm(x, LN_EPS)?;
    match (scale, shift) {
        (Some(sc), Some(sh)) => {
            let cols = tape.shape(sc).cols;
            let one = tape.input(Shape::new(1, cols), vec![1.0; cols]);
            let gain = tape.add(one, sc)?;
            let scaled = tape.mul(h, gain)?;
            tape.add(scaled, sh)
        }
        _ => Ok(h),
    }
}

/// Pre-norm transformer block: modulated norm, rotary multi-head
/// self-attention, residual, modulated norm, SiLU feed-forward, residual.
/// `pos_offset` shifts the rotary positions; outputs are invariant to it.
pub fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    sel: &HeadSelectors,
    cond: Option<&AdaCond>,
    pos_offset: usize,
) -> Result<NodeId, GradError> {
    let hidden = sel.hidden;
    let dh = hidden / sel.heads;

    let h1 = modulated_norm(
        tape,
        x,
        cond.map(|c| c.scale1),
        cond.map(|c| c.shift1),
    )?;
    let q = linear(tape, store, h1, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
    let k = linear(tape, store, h1, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"))?;
    let v = linear(tape, store, h1, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;
    let q = tape.rotary(q, dh, ROPE_BASE, pos_offset)?;
    let k = tape.rotary(k, dh, ROPE_BASE, pos_offset)?;

    let mut merged: Option<NodeId> = None;
    for h in 0..sel.heads {
        let s = tape.input_shared(Shape::new(hidden, dh), sel.mats[h].clone());
        let qh = tape.matmul(q, s)?;
        let kh = tape.matmul(k, s)?;
        let vh = tape.matmul(v, s)?;
        let scores = tape.matmul_t(qh, kh, false, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores)?;
        let oh = tape.matmul(attn, vh)?;
        let back = tape.matmul_t(oh, s, false, true)?;
        merged = Some(match merged {
            Some(m) => tape.add(m, back)?,
            None => back,
        });
    }
    let attn_out = linear(
        tape,
        store,
        merged.expect("at least one head"),
        &format!("{prefix}.attn.wo"),
        &format!("{prefix}.attn.bo"),
    )?;
    let x2 = tape.add(x, attn_out)?;

    let h2 = modulated_norm(
        tape,
        x2,
        cond.map(|c| c.scale2),
        cond.map(|c| c.shift2),
    )?;
    let f = linear(tape, store, h2, &format!("{prefix}.ff.w1"), &format!("{prefix}.ff.b1"))?;
    let f = silu(tape, f)?;
    let f = linear(tape, store, f, &format!("{prefix}.ff.w2"), &format!("{prefix}.ff.b2"))?;
    tape.add(x2, f)
}
