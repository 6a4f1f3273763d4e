//! Transformer building blocks shared by the vision encoder and the Q-Former.
//!
//! Each block registers its tensors under a name prefix in a [`ParamStore`]
//! and reads them back by name when building a forward graph.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn register_linear(
    store: &mut ParamStore,
    init: &mut Init<'_>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), init.xavier(fan_in, fan_out))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub(crate) fn register_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]))?;
    Ok(())
}

/// Query/key/value/output projections. Keys and values read `kv_dim`-wide
/// inputs, so cross-attention over a different width needs no extra layer.
/// The key projection is bias-free.
pub(crate) fn register_attention(
    store: &mut ParamStore,
    init: &mut Init<'_>,
    prefix: &str,
    dim: usize,
    kv_dim: usize,
) -> Result<()> {
    register_linear(store, init, &format!("{prefix}.q"), dim, dim)?;
    store.insert(format!("{prefix}.k.w"), init.xavier(kv_dim, dim))?;
    register_linear(store, init, &format!("{prefix}.v"), kv_dim, dim)?;
    register_linear(store, init, &format!("{prefix}.out"), dim, dim)?;
    Ok(())
}

pub(crate) fn register_mlp(
    store: &mut ParamStore,
    init: &mut Init<'_>,
    prefix: &str,
    dim: usize,
    hidden: usize,
) -> Result<()> {
    register_linear(store, init, &format!("{prefix}.fc1"), dim, hidden)?;
    register_linear(store, init, &format!("{prefix}.fc2"), hidden, dim)?;
    Ok(())
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// `fc2(gelu(fc1(x)))`.
pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

/// Multi-head scaled dot-product attention of `queries` over `context`.
///
/// Columns of the score matrix where `key_mask` is false receive zero
/// probability. Dropout hits the attention probabilities.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    queries: Var,
    context: Var,
    key_mask: Option<&[bool]>,
    attn_dropout: f64,
) -> Result<Var> {
    let q = linear(g, store, &format!("{prefix}.q"), queries)?;
    let wk = g.param(store, &format!("{prefix}.k.w"))?;
    let k = g.matmul(context, wk)?;
    let v = linear(g, store, &format!("{prefix}.v"), context)?;
    let dim = g.shape(q)[1];
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model dim {dim} not divisible by {heads} heads"
        )));
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax_rows(scores, key_mask)?;
        let probs = g.dropout(probs, attn_dropout)?;
        outs.push(g.matmul(probs, vh)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    linear(g, store, &format!("{prefix}.out"), cat)
}

/// Pre-norm encoder block: `y = x + MSA(LN(x))`, `z = y + MLP(LN(y))`.
pub(crate) fn encoder_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    x: Var,
    attn_dropout: f64,
) -> Result<Var> {
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(g, store, &format!("{prefix}.attn"), heads, h, h, None, attn_dropout)?;
    let y = g.add(x, a)?;
    let h = layer_norm(g, store, &format!("{prefix}.ln2"), y)?;
    let m = mlp(g, store, &format!("{prefix}.mlp"), h)?;
    g.add(y, m)
}
