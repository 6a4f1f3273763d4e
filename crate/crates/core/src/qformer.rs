//! Query transformer: learnable queries fused with description tokens by
//! self-attention and with visual tokens by cross-attention, then pooled
//! and classified.
//!
//! Block `b` runs, on the sequence `Z = [Q; X_t]`:
//!
//! 1. `Y = Z + MSA(LN(Z))` with padded text keys masked out;
//! 2. on cross-attention blocks only, `Q' = Y_q + MCA(LN(Y_q), X_v)` for the
//!    query rows;
//! 3. `Q'' = Q' + FFN_q(LN(Q'))` and `T'' = T + FFN_t(LN(T))`, separate
//!    weights per stream.
//!
//! Text rows only see visual information through later self-attention.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{self, multi_head_attention};
use crate::params::{Init, ParamStore};
use crate::tensor::{sigmoid, Tensor};

pub const CROSS_ATTENTION_COUNTER: &str = "qformer.cross_attention";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultiLabel,
    SingleLabel,
}

/// Which blocks carry cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossParity {
    Odd,
    Even,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub dim: usize,
    /// Self-attention blocks; half of them also cross-attend.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub attn_dropout: f64,
    pub num_classes: usize,
    pub task: TaskKind,
    pub cross_parity: CrossParity,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            dim: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            attn_dropout: 0.4,
            num_classes: 26,
            task: TaskKind::MultiLabel,
            cross_parity: CrossParity::Odd,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.dim == 0 || self.ffn_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!("q-former config has a zero dimension: {self:?}")));
        }
        if self.layers == 0 || !self.layers.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "q-former layer count must be even and positive, got {}",
                self.layers
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "q-former dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config(format!("q-former attn_dropout {} outside [0, 1)", self.attn_dropout)));
        }
        if self.task == TaskKind::SingleLabel && self.num_classes < 2 {
            return Err(Error::Config("single-label task needs at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn has_cross_attention(&self, block: usize) -> bool {
        match self.cross_parity {
            CrossParity::Odd => block % 2 == 1,
            CrossParity::Even => block.is_multiple_of(2),
        }
    }
}

pub(crate) fn register(
    store: &mut ParamStore,
    init: &mut Init<'_>,
    cfg: &QFormerConfig,
    visual_dim: usize,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    store.insert("qformer.queries", init.normal(&[cfg.num_queries, d], 0.02))?;
    for b in 0..cfg.layers {
        let p = format!("qformer.blocks.{b}");
        layers::register_layer_norm(store, &format!("{p}.ln_sa"), d)?;
        layers::register_attention(store, init, &format!("{p}.sa"), d, d)?;
        if cfg.has_cross_attention(b) {
            layers::register_layer_norm(store, &format!("{p}.ln_ca"), d)?;
            layers::register_attention(store, init, &format!("{p}.ca"), d, visual_dim)?;
        }
        layers::register_layer_norm(store, &format!("{p}.ln_ffn_q"), d)?;
        layers::register_mlp(store, init, &format!("{p}.ffn_q"), d, cfg.ffn_dim)?;
        layers::register_layer_norm(store, &format!("{p}.ln_ffn_t"), d)?;
        layers::register_mlp(store, init, &format!("{p}.ffn_t"), d, cfg.ffn_dim)?;
    }
    layers::register_linear(store, init, "classifier", d, cfg.num_classes)?;
    Ok(())
}

/// `[Q; X_t]`: queries first, then text tokens. `text == None` is `L = 0`.
pub fn concat_sequence(g: &mut Graph, queries: Var, text: Option<Var>) -> Result<Var> {
    match text {
        None => Ok(queries),
        Some(t) => {
            if g.shape(queries)[1] != g.shape(t)[1] {
                return Err(Error::shape("concat_sequence", g.shape(queries), g.shape(t)));
            }
            g.concat_rows(&[queries, t])
        }
    }
}

/// Multi-head self-attention over `z` with the `qformer.blocks.{block}.sa`
/// weights. `key_mask[j] == false` removes position `j` as a key/value.
pub fn msa(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &QFormerConfig,
    block: usize,
    z: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let prefix = format!("qformer.blocks.{block}.sa");
    multi_head_attention(g, store, &prefix, cfg.heads, z, z, key_mask, cfg.attn_dropout)
}

/// Multi-head cross-attention from `queries` onto visual tokens.
pub fn mca(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &QFormerConfig,
    block: usize,
    queries: Var,
    visual: Var,
) -> Result<Var> {
    if g.shape(visual).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid("cross-attention over zero visual tokens".into()));
    }
    g.bump(CROSS_ATTENTION_COUNTER);
    let prefix = format!("qformer.blocks.{block}.ca");
    multi_head_attention(g, store, &prefix, cfg.heads, queries, visual, None, cfg.attn_dropout)
}

/// Runs every block and returns the final query rows, `[N, d]`.
///
/// `text` is `[L, d]` (already embedded) with `text_mask` of length `L`.
pub fn qformer_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &QFormerConfig,
    text: Option<(Var, &[bool])>,
    visual: Var,
) -> Result<Var> {
    let n = cfg.num_queries;
    let queries = g.param(store, "qformer.queries")?;
    if g.shape(queries) != [n, cfg.dim] {
        return Err(Error::shape("qformer.queries", &[n, cfg.dim], g.shape(queries)));
    }
    let (text_var, key_mask) = match text {
        Some((t, mask)) => {
            if mask.len() != g.shape(t)[0] {
                return Err(Error::shape("text_mask", g.shape(t), &[mask.len()]));
            }
            let mut km = vec![true; n];
            km.extend_from_slice(mask);
            (Some(t), Some(km))
        }
        None => (None, None),
    };
    let mut z = concat_sequence(g, queries, text_var)?;
    let total = g.shape(z)[0];

    for b in 0..cfg.layers {
        let p = format!("qformer.blocks.{b}");
        let h = layers::layer_norm(g, store, &format!("{p}.ln_sa"), z)?;
        let a = msa(g, store, cfg, b, h, key_mask.as_deref())?;
        let y = g.add(z, a)?;

        let mut q = if total > n { g.slice_rows(y, 0, n)? } else { y };
        if cfg.has_cross_attention(b) {
            let h = layers::layer_norm(g, store, &format!("{p}.ln_ca"), q)?;
            let c = mca(g, store, cfg, b, h, visual)?;
            q = g.add(q, c)?;
        }
        let h = layers::layer_norm(g, store, &format!("{p}.ln_ffn_q"), q)?;
        let f = layers::mlp(g, store, &format!("{p}.ffn_q"), h)?;
        q = g.add(q, f)?;

        z = if total > n {
            let t = g.slice_rows(y, n, total)?;
            let h = layers::layer_norm(g, store, &format!("{p}.ln_ffn_t"), t)?;
            let f = layers::mlp(g, store, &format!("{p}.ffn_t"), h)?;
            let t = g.add(t, f)?;
            g.concat_rows(&[q, t])?
        } else {
            q
        };
    }
    if total > n {
        g.slice_rows(z, 0, n)
    } else {
        Ok(z)
    }
}

/// Mean-pools the query rows and applies the classification layer.
/// Returns raw logits, `[1, C]`.
pub fn classify(g: &mut Graph, store: &ParamStore, attended: Var) -> Result<Var> {
    let pooled = g.mean_rows(attended)?;
    layers::linear(g, store, "classifier", pooled)
}

/// Output activation: per-class sigmoid or softmax across classes.
pub fn activate(logits: &[f64], task: TaskKind) -> Vec<f64> {
    match task {
        TaskKind::MultiLabel => logits.iter().map(|&z| sigmoid(z)).collect(),
        TaskKind::SingleLabel => {
            let t = Tensor::new(&[logits.len()], logits.to_vec()).expect("non-empty logits");
            crate::tensor::softmax(&t, 0).expect("axis 0 exists").into_data()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    fn cfg() -> QFormerConfig {
        QFormerConfig {
            num_queries: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 32,
            attn_dropout: 0.0,
            num_classes: 4,
            task: TaskKind::MultiLabel,
            cross_parity: CrossParity::Odd,
        }
    }

    fn store(cfg: &QFormerConfig, visual_dim: usize) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = RngState::new(5);
        register(&mut s, &mut Init { rng: &mut rng }, cfg, visual_dim).unwrap();
        s
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.uniform() - 0.5).collect()).unwrap()
    }

    #[test]
    fn concat_keeps_order() {
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(2, 4, 1));
        let t = g.constant(rand_tensor(3, 4, 2));
        let z = concat_sequence(&mut g, q, Some(t)).unwrap();
        assert_eq!(g.shape(z), &[5, 4]);
        let head = g.slice_rows(z, 0, 2).unwrap();
        let tail = g.slice_rows(z, 2, 5).unwrap();
        assert_eq!(g.value(head), g.value(q));
        assert_eq!(g.value(tail), g.value(t));
        let z = concat_sequence(&mut g, q, None).unwrap();
        assert_eq!(g.value(z), g.value(q));

        let bad = g.constant(rand_tensor(3, 5, 2));
        assert!(concat_sequence(&mut g, q, Some(bad)).is_err());
    }

    #[test]
    fn odd_layer_count_rejected() {
        let mut c = cfg();
        c.layers = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_shape_independent_of_text_length() {
        let c = cfg();
        let s = store(&c, 6);
        for l in [1usize, 4, 9] {
            let mut g = Graph::new();
            let text = g.constant(rand_tensor(l, 8, 7));
            let vis = g.constant(rand_tensor(5, 6, 8));
            let mask = vec![true; l];
            let q = qformer_forward(&mut g, &s, &c, Some((text, &mask)), vis).unwrap();
            assert_eq!(g.shape(q), &[3, 8]);
            assert_eq!(g.counter(CROSS_ATTENTION_COUNTER), 1);
        }
    }

    #[test]
    fn classify_zero_weights_gives_half() {
        let c = cfg();
        let mut s = store(&c, 6);
        let w = s.id("classifier.w").unwrap();
        s.tensor_mut(w).data_mut().fill(0.0);
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(3, 8, 1));
        let logits = classify(&mut g, &s, q).unwrap();
        assert_eq!(activate(g.value(logits).data(), TaskKind::MultiLabel), vec![0.5; 4]);
    }

    #[test]
    fn single_label_activation_sums_to_one() {
        let p = activate(&[0.3, -2.0, 5.0, 1.0, 0.0, 0.1, -0.4], TaskKind::SingleLabel);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
