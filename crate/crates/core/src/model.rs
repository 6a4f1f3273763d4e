//! The full classifier: vision encoder, text embedding, Q-Former, head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::qformer::{self, QFormerConfig, TaskKind};
use crate::tensor::{RngState, Tensor};
use crate::text::{self, Tokens};
use crate::vision::{self, VisionConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub qformer: QFormerConfig,
    pub max_text_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionConfig::default(),
            qformer: QFormerConfig::default(),
            max_text_len: 64,
            vocab_size: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.qformer.validate()?;
        if self.max_text_len == 0 {
            return Err(Error::Config("max_text_len must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must cover PAD and UNK".into()));
        }
        Ok(())
    }

    pub fn task(&self) -> TaskKind {
        self.qformer.task
    }

    pub fn num_classes(&self) -> usize {
        self.qformer.num_classes
    }
}

/// One sample as the model sees it: one or more `[H, W, C]` frames and a
/// tokenised description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub frames: Vec<Tensor>,
    pub tokens: Tokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl EmotionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        vision::register(&mut params, &mut init, &config.vision)?;
        let d = config.qformer.dim;
        params.insert("text.embed", init.normal(&[config.vocab_size, d], 0.02))?;
        params.insert("text.pos", init.normal(&[config.max_text_len, d], 0.02))?;
        qformer::register(&mut params, &mut init, &config.qformer, config.vision.dim)?;
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored tensors, checking every name and shape.
    pub fn from_parts(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn vision_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with("vision."))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Logits `[1, C]` for one sample.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<Var> {
        let cfg = &self.config;
        if input.frames.is_empty() {
            return Err(Error::Invalid("sample has no frames".into()));
        }
        let l = input.tokens.ids.len();
        if l == 0 || l > cfg.max_text_len || input.tokens.mask.len() != l {
            return Err(Error::Invalid(format!(
                "token sequence of length {l} (mask {}) does not fit max_text_len {}",
                input.tokens.mask.len(),
                cfg.max_text_len
            )));
        }
        let frames = input
            .frames
            .iter()
            .map(|f| vision::encode_image(g, &self.params, &cfg.vision, f))
            .collect::<Result<Vec<_>>>()?;
        let visual = vision::temporal_pool(g, &frames)?;
        let text = text::embed_sequence(g, &self.params, &input.tokens.ids)?;
        let attended = qformer::qformer_forward(
            g,
            &self.params,
            &cfg.qformer,
            Some((text, &input.tokens.mask)),
            visual,
        )?;
        qformer::classify(g, &self.params, attended)
    }

    pub fn logits(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Activated scores: sigmoid per class or softmax over classes.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<f64>> {
        Ok(qformer::activate(&self.logits(input)?, self.config.task()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qformer::CrossParity;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vision: VisionConfig {
                image_height: 8,
                image_width: 8,
                channels: 3,
                patch: 4,
                dim: 8,
                depth: 1,
                heads: 2,
                attn_dropout: 0.0,
            },
            qformer: QFormerConfig {
                num_queries: 4,
                dim: 8,
                layers: 2,
                heads: 2,
                ffn_dim: 32,
                attn_dropout: 0.0,
                num_classes: 3,
                task: TaskKind::SingleLabel,
                cross_parity: CrossParity::Odd,
            },
            max_text_len: 8,
            vocab_size: 10,
        }
    }

    #[test]
    fn from_parts_round_trip() {
        let m = EmotionModel::new(tiny_config(), 1).unwrap();
        let m2 = EmotionModel::from_parts(m.config.clone(), &m.params).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn predict_is_a_distribution_for_single_label() {
        let m = EmotionModel::new(tiny_config(), 1).unwrap();
        let input = ModelInput {
            frames: vec![Tensor::full(&[8, 8, 3], 0.5)],
            tokens: Tokens {
                ids: vec![3, 4, 0, 0],
                mask: vec![true, true, false, false],
            },
        };
        let p = m.predict(&input).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_long_text_rejected() {
        let m = EmotionModel::new(tiny_config(), 1).unwrap();
        let input = ModelInput {
            frames: vec![Tensor::zeros(&[8, 8, 3])],
            tokens: Tokens {
                ids: vec![2; 9],
                mask: vec![true; 9],
            },
        };
        assert!(m.logits(&input).is_err());
    }
}
