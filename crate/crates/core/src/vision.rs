//! Patch-embedding vision transformer and temporal token pooling.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{self, encoder_block};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub attn_dropout: f64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            attn_dropout: 0.3,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            self.image_height,
            self.image_width,
            self.channels,
            self.patch,
            self.dim,
            self.heads,
        ];
        if nonzero.contains(&0) {
            return Err(Error::Config(format!("vision config has a zero dimension: {self:?}")));
        }
        if !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "vision dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config(format!("vision attn_dropout {} outside [0, 1)", self.attn_dropout)));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    /// Patches plus the classification token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Final hidden state of the encoder: `[(H/P)(W/P) + 1, D]`, classification
/// token first.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens(Tensor);

impl VisualTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::Invalid(format!(
                "visual tokens must be 2-D, got {:?}",
                tokens.shape()
            )));
        }
        Ok(Self(tokens))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn count(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Splits an `[H, W, C]` image into non-overlapping `P×P×C` patches, in
/// row-major patch order, each flattened as (row, col, channel).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::Invalid(format!(
            "image must be [H, W, C], got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let plen = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(ph * pw * plen);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * w + px * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(&[ph * pw, plen], out)
}

pub(crate) fn register(store: &mut ParamStore, init: &mut Init<'_>, cfg: &VisionConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    layers::register_linear(store, init, "vision.patch_embed", cfg.patch_len(), d)?;
    store.insert("vision.cls", init.normal(&[1, d], 0.02))?;
    store.insert("vision.pos", init.normal(&[cfg.num_tokens(), d], 0.02))?;
    for b in 0..cfg.depth {
        let p = format!("vision.blocks.{b}");
        layers::register_layer_norm(store, &format!("{p}.ln1"), d)?;
        layers::register_attention(store, init, &format!("{p}.attn"), d, d)?;
        layers::register_layer_norm(store, &format!("{p}.ln2"), d)?;
        layers::register_mlp(store, init, &format!("{p}.mlp"), d, 4 * d)?;
    }
    layers::register_layer_norm(store, "vision.ln_post", d)?;
    Ok(())
}

/// Encodes one `[H, W, C]` image into `[(H/P)(W/P) + 1, D]` tokens.
pub fn encode_image(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &VisionConfig,
    image: &Tensor,
) -> Result<Var> {
    let expected = [cfg.image_height, cfg.image_width, cfg.channels];
    if image.shape() != expected {
        return Err(Error::shape("encode_image", &expected, image.shape()));
    }
    let patches = g.constant(patchify(image, cfg.patch)?);
    let tokens = layers::linear(g, store, "vision.patch_embed", patches)?;
    let cls = g.param(store, "vision.cls")?;
    let seq = g.concat_rows(&[cls, tokens])?;
    let pos = g.param(store, "vision.pos")?;
    let mut x = g.add(seq, pos)?;
    for b in 0..cfg.depth {
        x = encoder_block(g, store, &format!("vision.blocks.{b}"), cfg.heads, x, cfg.attn_dropout)?;
    }
    layers::layer_norm(g, store, "vision.ln_post", x)
}

/// Elementwise mean over per-frame token sets.
pub fn temporal_pool(g: &mut Graph, frames: &[Var]) -> Result<Var> {
    match frames {
        [] => Err(Error::Invalid("temporal pooling of zero frames".into())),
        [single] => Ok(*single),
        many => g.mean_of(many),
    }
}

/// Eager pooling over already-encoded frames.
pub fn temporal_pool_tokens(frames: &[VisualTokens]) -> Result<VisualTokens> {
    let mut g = Graph::new();
    let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.0.clone())).collect();
    let pooled = temporal_pool(&mut g, &vars)?;
    VisualTokens::new(g.value(pooled).clone())
}

/// Inference-mode encoding outside any larger graph.
pub fn encode_image_tokens(store: &ParamStore, cfg: &VisionConfig, image: &Tensor) -> Result<VisualTokens> {
    let mut g = Graph::new();
    let v = encode_image(&mut g, store, cfg, image)?;
    VisualTokens::new(g.value(v).clone())
}
