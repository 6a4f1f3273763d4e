//! Synthetic multimodal corpus whose label needs both modalities.
//!
//! Each sample draws a shape `s` and a keyword `k`, both in `0..C`, and is
//! labelled `(s + k) mod C`. The image shows shape `s` in a random colour
//! and offset over noise; the description holds keyword `k` among
//! distractor words. Every shape co-occurs with every label equally often,
//! and likewise every keyword, so neither modality alone beats chance.
//!
//! Splits are built from groups of `C²` samples: `C` rendered images, one
//! per shape, crossed with `C` descriptions, one per keyword. Each image and
//! each description therefore appears once with every label, and any
//! classifier that sees a single modality scores exactly `1/C` on every
//! generated split.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::{save_png, Manifest, ManifestHeader, Sample, Split};
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::qformer::TaskKind;
use crate::tensor::{RngState, Tensor};
use crate::text::{tokenize, Vocab};
use crate::train::{Example, Target};

pub const MAX_CLASSES: usize = 8;

pub const KEYWORDS: [&str; MAX_CLASSES] = [
    "amber", "brisk", "cobalt", "dusky", "ember", "frosty", "golden", "hazel",
];

pub const DISTRACTORS: [&str; 6] = ["person", "scene", "standing", "near", "room", "light"];

const PALETTE: [[u8; 3]; 4] = [[230, 60, 50], [60, 200, 80], [70, 110, 240], [240, 210, 60]];

/// Offsets in pixels applied to the shape centre, per axis.
const OFFSETS: [i32; 3] = [-1, 0, 1];

/// Words in each description: one keyword plus distractors.
pub const DESCRIPTION_WORDS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Maximum background intensity.
    pub noise: f64,
    /// Keywords `k < anchored` leave the label at the shape's own class.
    pub anchored: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_train: 1000,
            num_val: 200,
            image_size: 16,
            num_classes: 5,
            seed: 7,
            noise: 0.1,
            anchored: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!("synthetic classes must be in 2..={MAX_CLASSES}")));
        }
        if self.image_size < 12 {
            return Err(Error::Config("synthetic images must be at least 12 pixels".into()));
        }
        let group = self.num_classes * self.num_classes;
        if !self.num_train.is_multiple_of(group) || !self.num_val.is_multiple_of(group) {
            return Err(Error::Config(format!(
                "split sizes must be multiples of {group} (classes squared)"
            )));
        }
        if self.anchored >= self.num_classes {
            return Err(Error::Config("anchored keywords must be fewer than classes".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn label(&self, shape: usize, keyword: usize) -> usize {
        if keyword < self.anchored {
            shape
        } else {
            (shape + keyword) % self.num_classes
        }
    }

    /// Bayes-optimal single-modality accuracy: vision recovers the anchored
    /// fraction, text only chance.
    pub fn stated_ceiling(&self) -> f64 {
        self.anchored.max(1) as f64 / self.num_classes as f64
    }
}

/// Discrete factors behind one sample; the background noise is drawn
/// separately and is independent of all of them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Factors {
    pub shape: usize,
    pub keyword: usize,
    pub colour: usize,
    pub dx: usize,
    pub dy: usize,
    /// Distractor word ids and the keyword's slot in the description.
    pub distractors: [usize; DESCRIPTION_WORDS - 1],
    pub keyword_slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Text,
}

impl Factors {
    fn vision_view(&self) -> (usize, usize, usize, usize) {
        (self.shape, self.colour, self.dx, self.dy)
    }

    fn text_view(&self) -> String {
        self.description()
    }

    pub fn description(&self) -> String {
        let mut words = Vec::with_capacity(DESCRIPTION_WORDS);
        let mut d = self.distractors.iter();
        for slot in 0..DESCRIPTION_WORDS {
            if slot == self.keyword_slot {
                words.push(KEYWORDS[self.keyword]);
            } else {
                words.push(DISTRACTORS[*d.next().expect("distractor per slot")]);
            }
        }
        words.join(" ")
    }
}

/// Every factor combination, each equally likely under the generator.
pub fn factor_grid(spec: &SyntheticSpec) -> Vec<Factors> {
    let c = spec.num_classes;
    let mut out = Vec::new();
    for shape in 0..c {
        for keyword in 0..c {
            for colour in 0..PALETTE.len() {
                for dx in 0..OFFSETS.len() {
                    for dy in 0..OFFSETS.len() {
                        for d0 in 0..DISTRACTORS.len() {
                            for d1 in 0..DISTRACTORS.len() {
                                for keyword_slot in 0..DESCRIPTION_WORDS {
                                    out.push(Factors {
                                        shape,
                                        keyword,
                                        colour,
                                        dx,
                                        dy,
                                        distractors: [d0, d1],
                                        keyword_slot,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact Bayes-optimal accuracy of a classifier that sees one modality,
/// by enumeration over the generator's discrete factor grid.
pub fn single_modality_ceiling(spec: &SyntheticSpec, modality: Modality) -> f64 {
    let grid = factor_grid(spec);
    let c = spec.num_classes;
    let mut counts: HashMap<String, Vec<usize>> = HashMap::new();
    for f in &grid {
        let key = match modality {
            Modality::Vision => format!("{:?}", f.vision_view()),
            Modality::Text => f.text_view(),
        };
        counts.entry(key).or_insert_with(|| vec![0; c])[spec.label(f.shape, f.keyword)] += 1;
    }
    let best: usize = counts.values().map(|v| *v.iter().max().expect("non-empty")).sum();
    best as f64 / grid.len() as f64
}

fn draw_shape(img: &mut [u8], size: usize, shape: usize, cx: i32, cy: i32, colour: [u8; 3]) {
    let inside = |x: i32, y: i32| -> bool {
        let (u, v) = (x - cx, y - cy);
        match shape {
            0 => u.abs() <= 3 && v.abs() <= 3,
            1 => u.abs().max(v.abs()) <= 4 && u.abs().max(v.abs()) >= 3,
            2 => (u.abs() <= 1 && v.abs() <= 4) || (v.abs() <= 1 && u.abs() <= 4),
            3 => u.abs() <= 5 && v.abs() <= 1,
            4 => u.abs() <= 1 && v.abs() <= 5,
            5 => (u - v).abs() <= 1 && u.abs() <= 4,
            6 => ((u - v).abs() <= 1 || (u + v).abs() <= 1) && u.abs() <= 4,
            _ => (-4..=3).contains(&v) && u.abs() <= (v + 4) / 2,
        }
    };
    for y in 0..size as i32 {
        for x in 0..size as i32 {
            if inside(x, y) {
                let p = (y as usize * size + x as usize) * 3;
                img[p..p + 3].copy_from_slice(&colour);
            }
        }
    }
}

/// `[size, size, 3]` image in `[0, 1]`, quantised to 8 bits so that it
/// survives a PNG round trip unchanged.
pub fn render(spec: &SyntheticSpec, f: &Factors, rng: &mut RngState) -> Tensor {
    let n = spec.image_size;
    let max = (spec.noise * 255.0).round() as u8;
    let mut img: Vec<u8> = (0..n * n * 3).map(|_| rng.random_range(0..=max)).collect();
    let centre = n as i32 / 2;
    draw_shape(
        &mut img,
        n,
        f.shape,
        centre + OFFSETS[f.dx],
        centre + OFFSETS[f.dy],
        PALETTE[f.colour],
    );
    let data = img.into_iter().map(|v| f64::from(v) / 255.0).collect();
    Tensor::new(&[n, n, 3], data).expect("square image")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub split: Split,
    pub factors: Factors,
    pub label: usize,
    pub image: Tensor,
}

fn split_samples(spec: &SyntheticSpec, split: Split, n: usize, stream: u64) -> Vec<SyntheticSample> {
    let c = spec.num_classes;
    let root = RngState::new(spec.seed).derive(stream);
    let tag = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    let mut out = Vec::with_capacity(n);
    for group in 0..(n / (c * c)) as u64 {
        let images: Vec<(usize, usize, usize, Tensor)> = (0..c)
            .map(|shape| {
                let mut rng = root.derive(group << 8 | shape as u64);
                let colour = rng.random_range(0..PALETTE.len());
                let dx = rng.random_range(0..OFFSETS.len());
                let dy = rng.random_range(0..OFFSETS.len());
                let probe = Factors {
                    shape,
                    keyword: 0,
                    colour,
                    dx,
                    dy,
                    distractors: [0; DESCRIPTION_WORDS - 1],
                    keyword_slot: 0,
                };
                (colour, dx, dy, render(spec, &probe, &mut rng))
            })
            .collect();
        let texts: Vec<([usize; DESCRIPTION_WORDS - 1], usize)> = (0..c)
            .map(|keyword| {
                let mut rng = root.derive(1 << 40 | group << 8 | keyword as u64);
                let distractors = [
                    rng.random_range(0..DISTRACTORS.len()),
                    rng.random_range(0..DISTRACTORS.len()),
                ];
                (distractors, rng.random_range(0..DESCRIPTION_WORDS))
            })
            .collect();
        for (shape, (colour, dx, dy, image)) in images.iter().enumerate() {
            for (keyword, (distractors, keyword_slot)) in texts.iter().enumerate() {
                let factors = Factors {
                    shape,
                    keyword,
                    colour: *colour,
                    dx: *dx,
                    dy: *dy,
                    distractors: *distractors,
                    keyword_slot: *keyword_slot,
                };
                out.push(SyntheticSample {
                    id: format!("{tag}-{:05}", out.len()),
                    split,
                    label: spec.label(shape, keyword),
                    factors,
                    image: image.clone(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        train: split_samples(spec, Split::Train, spec.num_train, 1),
        val: split_samples(spec, Split::Val, spec.num_val, 2),
    })
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("class{c}")).collect()
}

/// Vocabulary covering every word the generator can emit.
pub fn vocab() -> Vocab {
    let mut lines = vec![crate::text::PAD_TOKEN, crate::text::UNK_TOKEN];
    lines.extend(KEYWORDS);
    lines.extend(DISTRACTORS);
    Vocab::from_lines(&lines.join("\n")).expect("static vocabulary")
}

impl SyntheticCorpus {
    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            task: TaskKind::SingleLabel,
            num_classes: self.spec.num_classes,
            class_names: class_names(self.spec.num_classes),
        }
    }

    pub fn examples(samples: &[SyntheticSample], vocab: &Vocab, max_text_len: usize) -> Vec<Example> {
        samples
            .iter()
            .map(|s| Example {
                input: ModelInput {
                    frames: vec![s.image.clone()],
                    tokens: tokenize(&s.factors.description(), vocab, max_text_len),
                },
                target: Target::Single(s.label),
            })
            .collect()
    }

    /// Writes `images/<id>.png` and `manifest.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        let mut samples = Vec::with_capacity(self.train.len() + self.val.len());
        for s in self.train.iter().chain(&self.val) {
            let rel = Path::new("images").join(format!("{}.png", s.id));
            save_png(&s.image, &dir.join(&rel))?;
            samples.push(Sample {
                id: s.id.clone(),
                media: rel,
                bbox: None,
                description: Some(s.factors.description()),
                labels: None,
                label: Some(s.label),
                split: s.split,
                image_id: None,
            });
        }
        let manifest = Manifest::new(self.header(), samples);
        crate::data::write_manifest(&dir.join("manifest.jsonl"), &manifest)?;
        Ok(manifest)
    }
}

/// Zeroes one modality: blank images for text-only runs, empty descriptions
/// for vision-only runs.
pub fn ablate(examples: &[Example], keep: Option<Modality>) -> Vec<Example> {
    examples
        .iter()
        .map(|ex| {
            let mut ex = ex.clone();
            match keep {
                None => {}
                Some(Modality::Vision) => {
                    let n = ex.input.tokens.ids.len();
                    ex.input.tokens.ids = vec![crate::text::PAD; n];
                    ex.input.tokens.mask = vec![false; n];
                }
                Some(Modality::Text) => {
                    for f in &mut ex.input.frames {
                        *f = Tensor::zeros(f.shape());
                    }
                }
            }
            ex
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_train: 50,
            num_val: 25,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SyntheticSpec { seed: 8, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn single_modality_ceilings() {
        let spec = SyntheticSpec::default();
        let vision = single_modality_ceiling(&spec, Modality::Vision);
        assert!((vision - spec.stated_ceiling()).abs() < 1e-12, "{vision}");
        let text = single_modality_ceiling(&spec, Modality::Text);
        assert!((text - 1.0 / spec.num_classes as f64).abs() < 1e-12, "{text}");
        let plain = SyntheticSpec { anchored: 0, ..spec };
        assert!((single_modality_ceiling(&plain, Modality::Vision) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn crossing_structure() {
        let corpus = generate(&small()).unwrap();
        let mut by_image: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
        let mut by_text: HashMap<String, Vec<usize>> = HashMap::new();
        for s in corpus.train.iter().chain(&corpus.val) {
            let key = s.image.data().iter().map(|v| v.to_bits()).collect();
            by_image.entry(key).or_default().push(s.label);
            let index: usize = s.id.rsplit('-').next().unwrap().parse().unwrap();
            let group = format!("{:?}/{}/{}", s.split, index / 25, s.factors.description());
            by_text.entry(group).or_default().push(s.label);
        }
        for labels in by_text.values_mut() {
            labels.sort();
            assert_eq!(*labels, (0..5).collect::<Vec<_>>());
        }
        let anchored = small().anchored;
        for labels in by_image.values_mut() {
            labels.sort();
            let mut distinct = labels.clone();
            distinct.dedup();
            assert_eq!(distinct.len(), 5 - anchored + 1, "{labels:?}");
        }
    }

    #[test]
    fn split_sizes_must_fill_groups() {
        assert!(generate(&SyntheticSpec { num_train: 30, ..small() }).is_err());
    }

    #[test]
    fn labels_balanced() {
        let corpus = generate(&SyntheticSpec::default()).unwrap();
        let mut counts = [0usize; 5];
        for s in &corpus.train {
            counts[s.label] += 1;
        }
        assert!(counts.iter().all(|&n| n == 200));
    }

    #[test]
    fn shapes_are_distinct() {
        let mut seen = Vec::new();
        for shape in 0..MAX_CLASSES {
            let mut img = vec![0u8; 16 * 16 * 3];
            draw_shape(&mut img, 16, shape, 8, 8, [255, 255, 255]);
            assert!(img.iter().any(|&v| v > 0));
            assert!(!seen.contains(&img), "shape {shape} duplicates another");
            seen.push(img);
        }
    }

    #[test]
    fn ablation_blanks_one_side() {
        let corpus = generate(&small()).unwrap();
        let ex = SyntheticCorpus::examples(&corpus.val[..2], &vocab(), 8);
        let v = ablate(&ex, Some(Modality::Vision));
        assert!(v[0].input.tokens.mask.iter().all(|m| !m));
        assert_eq!(v[0].input.frames, ex[0].input.frames);
        let t = ablate(&ex, Some(Modality::Text));
        assert!(t[0].input.frames[0].data().iter().all(|&x| x == 0.0));
        assert_eq!(t[0].input.tokens, ex[0].input.tokens);
    }

    #[test]
    fn written_corpus_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate(&small()).unwrap();
        let m = corpus.write(dir.path()).unwrap();
        let back = crate::data::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back, m);
        let img = crate::data::load_image(&dir.path().join(&m.samples[0].media), 16, 16).unwrap();
        assert_eq!(img, corpus.train[0].image);
    }
}
