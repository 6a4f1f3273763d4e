//! Command-line entry points.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};

use crate::autograd::OpKind;
use crate::checkpoint::Checkpoint;
use crate::config::{Profile, TrainConfig};
use crate::data::{self, Manifest, Split};
use crate::describe::{self, DescriptionCache, Describer, Endpoint, RetryPolicy, UreqTransport};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::{MetricReport, DEFAULT_IOU_THRESHOLDS};
use crate::model::{EmotionModel, ModelConfig};
use crate::synth::{self, SyntheticCorpus};
use crate::text::{self, Vocab};
use crate::train::{self, EpochRecord, Example, StopDecision, TrainState, Trainer};

pub const HISTORY_FILE: &str = "history.tsv";
pub const LR_FILE: &str = "lr.tsv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const META_FRAMES: &str = "frames";

#[derive(Debug, Parser)]
#[command(name = "ctxemo", version, about = "Context-aware emotion recognition with description fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill in missing sample descriptions from a vision-language endpoint.
    Describe {
        #[arg(long)]
        manifest: PathBuf,
        /// Enriched manifest destination.
        #[arg(long)]
        output: PathBuf,
        /// Chat-completion URL; falls back to CTXEMO_VLLM_ENDPOINT.
        #[arg(long)]
        endpoint: Option<String>,
        /// Model name sent to the endpoint; falls back to CTXEMO_VLLM_MODEL.
        #[arg(long)]
        model: Option<String>,
        /// Defaults to `descriptions.jsonl` next to the input manifest.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        in_flight: usize,
        #[arg(long, default_value_t = 4)]
        max_retries: u32,
        #[arg(long, default_value_t = describe::DEFAULT_STROKE)]
        stroke: usize,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoints plus a per-epoch history.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Checkpoint written by an earlier run (`last.ckpt`).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on one manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// mAP for overlapping and remaining boxes; thresholds default to
        /// 0.2,0.3,0.4,0.5,0.7.
        #[arg(long, num_args = 0..=1, value_delimiter = ',', require_equals = false, default_missing_value = "0.2,0.3,0.4,0.5,0.7")]
        iou_strata: Option<Vec<f64>>,
    },
    /// Finite-difference check of every layer and the end-to-end model.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Write the synthetic corpus as PNGs plus a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Describe {
            manifest,
            output,
            endpoint,
            model,
            cache,
            in_flight,
            max_retries,
            stroke,
            timeout_secs,
            seed,
        } => {
            let endpoint = Endpoint::resolve(endpoint, model, None)?;
            let cache_path = cache.unwrap_or_else(|| parent(&manifest).join("descriptions.jsonl"));
            let policy = RetryPolicy {
                max_retries,
                seed: seed.unwrap_or(0),
                ..RetryPolicy::default()
            };
            cmd_describe(&manifest, &output, endpoint, &cache_path, policy, in_flight, stroke, timeout_secs)
        }
        Command::Train {
            config,
            manifest,
            output_dir,
            resume,
            seed,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::profile(Profile::Synthetic),
            };
            if let Some(m) = manifest {
                cfg.manifest = Some(m);
            }
            if let Some(o) = output_dir {
                cfg.output_dir = o;
            }
            if let Some(r) = resume {
                cfg.resume = Some(r);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            cmd_train(&cfg).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            iou_strata,
        } => {
            let report = cmd_eval(&checkpoint, &manifest, split.into(), iou_strata.as_deref())?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Gradcheck { corrupt_op } => {
            let corrupt = match corrupt_op {
                None => None,
                Some(name) => Some(
                    OpKind::ALL
                        .into_iter()
                        .find(|k| k.name() == name)
                        .ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?,
                ),
            };
            let report = gradcheck::run_suite(corrupt)?;
            print!("{}", report.render());
            if report.passed() {
                Ok(())
            } else {
                let names: Vec<&str> = report.failures().map(|c| c.name).collect();
                Err(Error::Oracle(format!("gradient check failed: {}", names.join(", "))))
            }
        }
        Command::Synth { out, config, seed } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::profile(Profile::Synthetic),
            };
            if let Some(s) = seed {
                cfg.synthetic.seed = s;
            }
            cfg.synthetic.validate()?;
            let corpus = synth::generate(&cfg.synthetic)?;
            let manifest = corpus.write(&out)?;
            println!("wrote {} samples to {}", manifest.samples.len(), out.display());
            Ok(())
        }
    }
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

#[allow(clippy::too_many_arguments)]
fn cmd_describe(
    manifest_path: &Path,
    output: &Path,
    endpoint: Endpoint,
    cache_path: &Path,
    policy: RetryPolicy,
    in_flight: usize,
    stroke: usize,
    timeout_secs: u64,
) -> Result<()> {
    let mut manifest = data::load_manifest(manifest_path)?;
    manifest.header()?;
    let cache = DescriptionCache::open(cache_path)?;
    let transport = UreqTransport::new(Duration::from_secs(timeout_secs));
    let sleep = std::thread::sleep;
    let mut describer = Describer::new(&transport, endpoint, &cache, &sleep);
    describer.policy = policy;
    describer.stroke = stroke;
    let result = describe::describe_manifest(&mut manifest, &parent(manifest_path), &describer, in_flight);
    data::write_manifest(output, &manifest)?;
    let described = result?;
    println!(
        "samples={} described={} http_calls={}",
        manifest.samples.len(),
        described,
        describer.http_calls()
    );
    Ok(())
}

/// Training and validation examples with the vocabulary and model shape
/// they imply.
pub struct TrainingData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub vocab: Vocab,
    pub model: ModelConfig,
}

pub fn load_training_data(cfg: &TrainConfig) -> Result<TrainingData> {
    let mut model = cfg.model.clone();
    match &cfg.manifest {
        Some(path) => {
            let manifest = data::load_manifest(path)?;
            let header = manifest.header()?.clone();
            let train_samples = manifest.split(Split::Train);
            let val_samples = manifest.split(Split::Val);
            let texts: Vec<&str> = train_samples.iter().filter_map(|s| s.description.as_deref()).collect();
            let vocab = text::build_vocab(&texts, cfg.min_freq)?;
            model.qformer.task = header.task;
            model.qformer.num_classes = header.num_classes;
            model.vocab_size = vocab.len();
            let base = parent(path);
            let train = data::prepare_examples(&train_samples, &header, &base, &vocab, &model, cfg.frames)?;
            let val = data::prepare_examples(&val_samples, &header, &base, &vocab, &model, cfg.frames)?;
            Ok(TrainingData { train, val, vocab, model })
        }
        None if cfg.profile == Profile::Synthetic => {
            let corpus = synth::generate(&cfg.synthetic)?;
            let vocab = synth::vocab();
            model.qformer.task = crate::qformer::TaskKind::SingleLabel;
            model.qformer.num_classes = cfg.synthetic.num_classes;
            model.vocab_size = vocab.len();
            let train = SyntheticCorpus::examples(&corpus.train, &vocab, model.max_text_len);
            let val = SyntheticCorpus::examples(&corpus.val, &vocab, model.max_text_len);
            Ok(TrainingData { train, val, vocab, model })
        }
        None => Err(Error::Config(format!(
            "profile `{}` needs a manifest",
            cfg.profile.name()
        ))),
    }
}

fn model_checkpoint(model: &EmotionModel, vocab: &Vocab, frames: usize) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_model(model, vocab)?;
    ck.meta.insert(META_FRAMES.into(), frames.to_string());
    Ok(ck)
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{}", EpochRecord::HEADER)?;
    for r in history {
        writeln!(f, "{}", r.to_line())?;
    }
    f.flush()?;
    Ok(())
}

/// Summary of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_metric: f64,
    pub epochs: usize,
}

pub fn cmd_train(cfg: &TrainConfig) -> Result<TrainSummary> {
    let data = load_training_data(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let history_path = cfg.output_dir.join(HISTORY_FILE);
    let lr_path = cfg.output_dir.join(LR_FILE);
    let best_path = cfg.output_dir.join(BEST_CHECKPOINT);
    let last_path = cfg.output_dir.join(LAST_CHECKPOINT);

    let mut trainer = match &cfg.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (model, vocab) = ck.to_model()?;
            if vocab != data.vocab || model.config != data.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model or vocabulary",
                    path.display()
                )));
            }
            let state = TrainState::read_from(&ck, &model.params)?;
            let mut trainer = Trainer::resume(model, cfg.optim.clone(), cfg.seed, state)?;
            let best_saved = parent(path).join(BEST_CHECKPOINT);
            if best_saved.exists() {
                trainer.best = Some(Checkpoint::load(&best_saved)?.to_model()?.0);
            }
            log::info!("resuming after epoch {}", trainer.state.epoch);
            trainer
        }
        None => Trainer::new(EmotionModel::new(data.model.clone(), cfg.seed)?, cfg.optim.clone(), cfg.seed)?,
    };

    write_history(&history_path, &trainer.state.history)?;
    if trainer.state.step == 0 || !lr_path.exists() {
        let mut f = File::create(&lr_path)?;
        writeln!(f, "step\tgroup\tlr")?;
    }
    let mut logged_steps = trainer.lr_log.len();
    let vocab = &data.vocab;
    let frames = cfg.frames;
    let outcome = trainer.fit(&data.train, &data.val, |t, record, decision| {
        let mut h = OpenOptions::new().append(true).open(&history_path)?;
        writeln!(h, "{}", record.to_line())?;
        h.flush()?;
        let mut l = OpenOptions::new().append(true).open(&lr_path)?;
        for s in &t.lr_log[logged_steps..] {
            for g in &s.groups {
                writeln!(l, "{}\t{}\t{:e}", s.step, g.kind.name(), g.lr)?;
            }
        }
        l.flush()?;
        logged_steps = t.lr_log.len();
        if decision == StopDecision::Improved {
            model_checkpoint(&t.model, vocab, frames)?.save(&best_path)?;
        }
        let mut last = model_checkpoint(&t.model, vocab, frames)?;
        t.state.write_into(&mut last, &t.model.params)?;
        last.save(&last_path)?;
        Ok(())
    })?;
    if !best_path.exists() {
        model_checkpoint(&outcome.best, vocab, frames)?.save(&best_path)?;
    }
    println!(
        "epochs={} best_epoch={} best_val={:.6}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_metric
    );
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        best_metric: outcome.best_metric,
        epochs: outcome.history.len(),
    })
}

pub fn cmd_eval(checkpoint: &Path, manifest_path: &Path, split: Split, iou_strata: Option<&[f64]>) -> Result<MetricReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, vocab) = ck.to_model()?;
    let frames = match ck.meta.get(META_FRAMES) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Invalid(format!("bad frame count `{v}` in checkpoint")))?,
        None => 1,
    };
    let manifest: Manifest = data::load_manifest(manifest_path)?;
    let header = manifest.header()?.clone();
    let samples = manifest.split(split);
    if samples.is_empty() {
        return Err(Error::Config(format!("manifest has no {split:?} samples")));
    }
    let examples = data::prepare_examples(&samples, &header, &parent(manifest_path), &vocab, &model.config, frames)?;
    let mut pred = train::predict_set(&model, &examples)?;
    if iou_strata.is_some() {
        let boxes = samples
            .iter()
            .map(|s| {
                s.bbox
                    .ok_or_else(|| Error::Config(format!("--iou-strata needs a box on sample `{}`", s.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = samples.iter().map(|s| s.image_key()).collect();
        pred = pred.with_boxes(boxes, ids)?;
    }
    let thresholds = iou_strata.map(|t| if t.is_empty() { &DEFAULT_IOU_THRESHOLDS[..] } else { t });
    MetricReport::compute(&pred, thresholds)
}
