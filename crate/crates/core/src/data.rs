//! Line-delimited JSON manifests, frame sampling, image IO and batching.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::model::{ModelConfig, ModelInput};
use crate::qformer::TaskKind;
use crate::tensor::{RngState, Tensor};
use crate::text::{tokenize, Vocab};
use crate::train::{Example, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// First record of every non-empty manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub task: TaskKind,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    /// PNG file or directory of numbered PNG frames, relative to the
    /// manifest's directory unless absolute.
    pub media: PathBuf,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Multi-label indicators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    /// Single-label class index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub split: Split,
    /// Groups samples taken from the same source image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

impl Sample {
    pub fn target(&self, header: &ManifestHeader) -> Result<Target> {
        let c = header.num_classes;
        match (header.task, &self.labels, self.label) {
            (TaskKind::MultiLabel, Some(l), None) if l.len() == c && l.iter().all(|&v| v <= 1) => {
                Ok(Target::Multi(l.iter().map(|&v| f64::from(v)).collect()))
            }
            (TaskKind::SingleLabel, None, Some(k)) if k < c => Ok(Target::Single(k)),
            _ => Err(Error::Invalid(format!(
                "sample `{}` labels do not match a {c}-class {:?} task",
                self.id, header.task
            ))),
        }
    }

    /// Source-image key for overlap grouping; defaults to the media path.
    pub fn image_key(&self) -> String {
        self.image_id
            .clone()
            .unwrap_or_else(|| self.media.to_string_lossy().into_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub header: Option<ManifestHeader>,
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn new(header: ManifestHeader, samples: Vec<Sample>) -> Self {
        Self {
            header: Some(header),
            samples,
        }
    }

    pub fn header(&self) -> Result<&ManifestHeader> {
        self.header
            .as_ref()
            .ok_or_else(|| Error::Invalid("manifest has no header record".into()))
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Parses manifest text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        let mut manifest = Manifest::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            match &manifest.header {
                None => {
                    let h: ManifestHeader =
                        serde_json::from_str(raw).map_err(|e| err(line, format!("bad header: {e}")))?;
                    if h.num_classes == 0 || h.class_names.len() != h.num_classes {
                        return Err(err(line, "class_names must list num_classes names".into()));
                    }
                    manifest.header = Some(h);
                }
                Some(h) => {
                    let s: Sample = serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
                    s.target(h).map_err(|e| err(line, e.to_string()))?;
                    manifest.samples.push(s);
                }
            }
        }
        let mut ids: Vec<&str> = manifest.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(err(0, format!("duplicate sample id `{}`", w[0])));
        }
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        if let Some(h) = &self.header {
            out.push_str(&serde_json::to_string(h)?);
            out.push('\n');
        }
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(path)?, path)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(manifest.to_jsonl()?.as_bytes())?;
    Ok(())
}

/// `floor(i·n/T)` for `n ≥ T`; otherwise every frame once, then the last
/// frame repeated.
pub fn sample_frame_indices(n: usize, t: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if n >= t {
        (0..t).map(|i| i * n / t).collect()
    } else {
        (0..t).map(|i| i.min(n - 1)).collect()
    }
}

/// PNG files in `dir`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    frames.sort();
    Ok(frames)
}

pub fn sample_frames(dir: &Path, t: usize, height: usize, width: usize) -> Result<Vec<Tensor>> {
    let frames = list_frames(dir)?;
    if frames.is_empty() {
        return Err(Error::Invalid(format!("no PNG frames in {}", dir.display())));
    }
    sample_frame_indices(frames.len(), t)
        .into_iter()
        .map(|i| load_image(&frames[i], height, width))
        .collect()
}

/// `[H, W, 3]` in `[0, 1]`, resized when the file has other dimensions.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize != width || img.height() as usize != height {
        image::imageops::resize(
            &img,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Tensor::new(&[height, width, 3], data)
}

/// `[H, W, 3]` in `[0, 1]` at the file's own resolution.
pub fn load_image_native(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Tensor::new(&[h, w, 3], data)
}

pub fn to_rgb_image(t: &Tensor) -> Result<image::RgbImage> {
    let &[h, w, 3] = t.shape() else {
        return Err(Error::Invalid(format!("expected [H, W, 3], got {:?}", t.shape())));
    };
    let raw = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Invalid("image buffer size mismatch".into()))
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    to_rgb_image(t)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Shuffled index batches; the final short batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn batch<'a, T>(samples: &'a [T], batch_size: usize, rng: &mut RngState) -> Vec<Vec<&'a T>> {
    batch_indices(samples.len(), batch_size, rng)
        .into_iter()
        .map(|b| b.into_iter().map(|i| &samples[i]).collect())
        .collect()
}

fn resolve(base: &Path, media: &Path) -> PathBuf {
    if media.is_absolute() {
        media.to_owned()
    } else {
        base.join(media)
    }
}

/// Loads pixels and tokenises the description of each sample. Directories
/// are treated as clips of `frames` sampled frames.
pub fn prepare_examples(
    samples: &[&Sample],
    header: &ManifestHeader,
    base_dir: &Path,
    vocab: &Vocab,
    config: &ModelConfig,
    frames: usize,
) -> Result<Vec<Example>> {
    if header.task != config.task() || header.num_classes != config.num_classes() {
        return Err(Error::Config(format!(
            "manifest is a {}-class {:?} task, model is {}-class {:?}",
            header.num_classes,
            header.task,
            config.num_classes(),
            config.task()
        )));
    }
    let (h, w) = (config.vision.image_height, config.vision.image_width);
    samples
        .iter()
        .map(|s| {
            let path = resolve(base_dir, &s.media);
            let images = if path.is_dir() {
                sample_frames(&path, frames.max(1), h, w)?
            } else {
                vec![load_image(&path, h, w)?]
            };
            let text = s.description.as_deref().unwrap_or("");
            Ok(Example {
                input: ModelInput {
                    frames: images,
                    tokens: tokenize(text, vocab, config.max_text_len),
                },
                target: s.target(header)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> ManifestHeader {
        ManifestHeader {
            task: TaskKind::MultiLabel,
            num_classes: 2,
            class_names: vec!["happy".into(), "sad".into()],
        }
    }

    fn sample(id: &str) -> Sample {
        Sample {
            id: id.into(),
            media: "a.png".into(),
            bbox: Some(BBox::new(0.0, 0.0, 2.0, 2.0).unwrap()),
            description: Some("a person".into()),
            labels: Some(vec![1, 0]),
            label: None,
            split: Split::Train,
            image_id: Some("img".into()),
        }
    }

    #[test]
    fn empty_manifest() {
        let m = Manifest::parse("", Path::new("m.jsonl")).unwrap();
        assert!(m.samples.is_empty());
    }

    #[test]
    fn round_trip() {
        let m = Manifest::new(header(), vec![sample("x"), sample("y")]);
        let back = Manifest::parse(&m.to_jsonl().unwrap(), Path::new("m")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn errors_cite_line() {
        let m = Manifest::new(header(), vec![sample("x")]);
        let text = format!("{}{{oops\n", m.to_jsonl().unwrap());
        match Manifest::parse(&text, Path::new("m.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bad = sample("z");
        bad.labels = Some(vec![1, 0, 1]);
        let text = Manifest::new(header(), vec![bad]).to_jsonl().unwrap();
        match Manifest::parse(&text, Path::new("m.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn frame_indices() {
        assert_eq!(sample_frame_indices(16, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(sample_frame_indices(8, 8), (0..8).collect::<Vec<_>>());
        assert_eq!(sample_frame_indices(3, 8), vec![0, 1, 2, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn frames_sorted_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for i in [2u8, 0, 1] {
            let t = Tensor::full(&[2, 2, 3], f64::from(i) * 0.2);
            save_png(&t, &dir.path().join(format!("{i:04}.png"))).unwrap();
        }
        let frames = sample_frames(dir.path(), 4, 2, 2).unwrap();
        let firsts: Vec<f64> = frames.iter().map(|f| f.data()[0]).collect();
        assert_eq!(firsts, vec![0.0, 51.0 / 255.0, 102.0 / 255.0, 102.0 / 255.0]);
    }

    #[test]
    fn batches() {
        let items: Vec<u32> = (0..10).collect();
        let b = batch(&items, 4, &mut RngState::new(1));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<u32> = b.iter().flatten().map(|&&x| x).collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(batch(&items, 4, &mut RngState::new(1)), b);
    }
}
