//! Flat TOML training configuration and dataset profiles.
//!
//! Every key is optional; unset keys take the value of the selected
//! profile. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::qformer::{CrossParity, QFormerConfig, TaskKind};
use crate::synth::SyntheticSpec;
use crate::train::OptimConfig;
use crate::vision::VisionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Multi-label video clips: 26 classes, 8 frames.
    BoldLike,
    /// Multi-label images with a frozen vision encoder.
    EmoticLike,
    /// Seven-way single-label images.
    CaersLike,
    /// Generated corpus for desk-scale checks.
    Synthetic,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::BoldLike => "bold-like",
            Profile::EmoticLike => "emotic-like",
            Profile::CaersLike => "caers-like",
            Profile::Synthetic => "synthetic",
        }
    }
}

/// Raw file contents.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,

    pub base_lr: Option<f64>,
    pub backbone_multiplier: Option<f64>,
    pub vision_multiplier: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub freeze_vision: Option<bool>,

    pub image_size: Option<usize>,
    pub patch: Option<usize>,
    pub vision_dim: Option<usize>,
    pub vision_depth: Option<usize>,
    pub vision_heads: Option<usize>,
    pub vision_dropout: Option<f64>,
    pub num_queries: Option<usize>,
    pub qformer_dim: Option<usize>,
    pub qformer_layers: Option<usize>,
    pub qformer_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub qformer_dropout: Option<f64>,
    pub cross_parity: Option<CrossParity>,
    pub max_text_len: Option<usize>,
    pub frames: Option<usize>,
    pub min_freq: Option<usize>,

    pub synth_train: Option<usize>,
    pub synth_val: Option<usize>,
    pub synth_seed: Option<u64>,
    pub synth_noise: Option<f64>,
    pub synth_anchored: Option<usize>,
}

/// Resolved configuration for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub optim: OptimConfig,
    /// Vision and Q-Former shape; task, class count and vocabulary size are
    /// filled in from the data.
    pub model: ModelConfig,
    pub frames: usize,
    pub min_freq: usize,
    pub synthetic: SyntheticSpec,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let vision = VisionConfig::default();
        let qformer = QFormerConfig::default();
        let base = TrainConfig {
            profile,
            seed: 0,
            manifest: None,
            output_dir: PathBuf::from("run"),
            resume: None,
            optim: OptimConfig::default(),
            model: ModelConfig {
                vision,
                qformer,
                max_text_len: 64,
                vocab_size: 2,
            },
            frames: 1,
            min_freq: 1,
            synthetic: SyntheticSpec::default(),
        };
        match profile {
            Profile::BoldLike => TrainConfig {
                optim: OptimConfig {
                    base_lr: 1e-4,
                    vision_multiplier: 0.01,
                    weight_decay: 0.1,
                    batch_size: 4,
                    ..OptimConfig::default()
                },
                frames: 8,
                ..base
            },
            Profile::EmoticLike => TrainConfig {
                optim: OptimConfig {
                    base_lr: 1e-4,
                    weight_decay: 0.0005,
                    freeze_vision: true,
                    ..OptimConfig::default()
                },
                ..base
            },
            Profile::CaersLike => TrainConfig {
                optim: OptimConfig {
                    base_lr: 1e-3,
                    weight_decay: 0.1,
                    ..OptimConfig::default()
                },
                model: ModelConfig {
                    qformer: QFormerConfig {
                        num_classes: 7,
                        task: TaskKind::SingleLabel,
                        ..base.model.qformer.clone()
                    },
                    ..base.model.clone()
                },
                ..base
            },
            Profile::Synthetic => {
                let spec = SyntheticSpec::default();
                TrainConfig {
                    optim: OptimConfig {
                        base_lr: 3e-3,
                        backbone_multiplier: 1.0,
                        vision_multiplier: 1.0,
                        weight_decay: 0.01,
                        max_epochs: 20,
                        patience: 5,
                        batch_size: 32,
                        ..OptimConfig::default()
                    },
                    model: ModelConfig {
                        vision: VisionConfig {
                            image_height: spec.image_size,
                            image_width: spec.image_size,
                            channels: 3,
                            patch: 4,
                            dim: 32,
                            depth: 1,
                            heads: 2,
                            attn_dropout: 0.0,
                        },
                        qformer: QFormerConfig {
                            num_queries: 4,
                            dim: 32,
                            layers: 2,
                            heads: 2,
                            ffn_dim: 128,
                            attn_dropout: 0.0,
                            num_classes: spec.num_classes,
                            task: TaskKind::SingleLabel,
                            cross_parity: CrossParity::Odd,
                        },
                        max_text_len: 8,
                        vocab_size: 2,
                    },
                    synthetic: spec,
                    ..base
                }
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.resume].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let mut c = Self::profile(raw.profile.unwrap_or(Profile::Synthetic));
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = raw.$src {
                    c.$($dst)+ = v;
                }
            };
        }
        set!(seed => seed);
        c.manifest = raw.manifest.or(c.manifest);
        set!(output_dir => output_dir);
        c.resume = raw.resume.or(c.resume);
        set!(base_lr => optim.base_lr);
        set!(backbone_multiplier => optim.backbone_multiplier);
        set!(vision_multiplier => optim.vision_multiplier);
        set!(weight_decay => optim.weight_decay);
        set!(beta1 => optim.beta1);
        set!(beta2 => optim.beta2);
        set!(eps => optim.eps);
        set!(max_epochs => optim.max_epochs);
        set!(patience => optim.patience);
        set!(batch_size => optim.batch_size);
        set!(freeze_vision => optim.freeze_vision);
        if let Some(s) = raw.image_size {
            c.model.vision.image_height = s;
            c.model.vision.image_width = s;
            c.synthetic.image_size = s;
        }
        set!(patch => model.vision.patch);
        set!(vision_dim => model.vision.dim);
        set!(vision_depth => model.vision.depth);
        set!(vision_heads => model.vision.heads);
        set!(vision_dropout => model.vision.attn_dropout);
        set!(num_queries => model.qformer.num_queries);
        set!(qformer_dim => model.qformer.dim);
        set!(qformer_layers => model.qformer.layers);
        set!(qformer_heads => model.qformer.heads);
        set!(ffn_dim => model.qformer.ffn_dim);
        set!(qformer_dropout => model.qformer.attn_dropout);
        set!(cross_parity => model.qformer.cross_parity);
        set!(max_text_len => model.max_text_len);
        set!(frames => frames);
        set!(min_freq => min_freq);
        set!(synth_train => synthetic.num_train);
        set!(synth_val => synthetic.num_val);
        set!(synth_seed => synthetic.seed);
        set!(synth_noise => synthetic.noise);
        set!(synth_anchored => synthetic.anchored);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.model.vision.validate()?;
        let mut q = self.model.qformer.clone();
        q.num_classes = q.num_classes.max(1);
        q.validate()?;
        if self.frames == 0 {
            return Err(Error::Config("frames must be at least 1".into()));
        }
        if self.model.max_text_len == 0 {
            return Err(Error::Config("max_text_len must be positive".into()));
        }
        if self.profile == Profile::Synthetic && self.manifest.is_none() {
            self.synthetic.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_synthetic_profile() {
        let c = TrainConfig::parse("").unwrap();
        assert_eq!(c, TrainConfig::profile(Profile::Synthetic));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::parse("base_lr = 0.1\nlearning_rate = 0.2\n").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn profiles_carry_dataset_regimes() {
        let bold = TrainConfig::profile(Profile::BoldLike);
        assert_eq!(bold.optim.vision_multiplier, 0.01);
        assert_eq!(bold.optim.batch_size, 4);
        assert_eq!(bold.frames, 8);
        let emotic = TrainConfig::profile(Profile::EmoticLike);
        assert!(emotic.optim.freeze_vision);
        assert_eq!(emotic.optim.weight_decay, 0.0005);
        let caers = TrainConfig::profile(Profile::CaersLike);
        assert_eq!(caers.optim.base_lr, 1e-3);
        assert_eq!(caers.model.qformer.task, TaskKind::SingleLabel);
        for p in [Profile::BoldLike, Profile::EmoticLike, Profile::CaersLike, Profile::Synthetic] {
            TrainConfig::profile(p).validate().unwrap();
        }
    }

    #[test]
    fn overrides_apply() {
        let c = TrainConfig::parse(
            "profile = \"caers-like\"\nbase_lr = 0.5\nmax_epochs = 3\ncross_parity = \"even\"\n",
        )
        .unwrap();
        assert_eq!(c.optim.base_lr, 0.5);
        assert_eq!(c.optim.max_epochs, 3);
        assert_eq!(c.model.qformer.cross_parity, CrossParity::Even);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(TrainConfig::parse("patience = 0").unwrap_err().is_config());
        assert!(TrainConfig::parse("backbone_multiplier = 2.0").unwrap_err().is_config());
        assert!(TrainConfig::parse("profile = \"nope\"").unwrap_err().is_config());
        assert!(TrainConfig::parse("base_lr = \"fast\"").unwrap_err().is_config());
    }
}
