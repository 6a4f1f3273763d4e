//! Ranking and classification metrics, plus mAP stratified by subject-box
//! overlap.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels, `x2 > x1` and `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::Invalid(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Ground truth for a prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    /// `[M][C]` binary indicators.
    Multi(Vec<Vec<bool>>),
    /// One class index per sample.
    Single(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// `[M][C]` scores.
    pub scores: Vec<Vec<f64>>,
    pub labels: Labels,
    pub boxes: Option<Vec<BBox>>,
    pub image_ids: Option<Vec<String>>,
}

impl PredictionSet {
    pub fn new(scores: Vec<Vec<f64>>, labels: Labels) -> Result<Self> {
        let set = Self {
            scores,
            labels,
            boxes: None,
            image_ids: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_boxes(mut self, boxes: Vec<BBox>, image_ids: Vec<String>) -> Result<Self> {
        self.boxes = Some(boxes);
        self.image_ids = Some(image_ids);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if self.scores.iter().any(|r| r.len() != c) {
            return Err(Error::Invalid("score rows have differing class counts".into()));
        }
        if self.scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("non-finite score".into()));
        }
        match &self.labels {
            Labels::Multi(l) => {
                if l.len() != self.len() || l.iter().any(|r| r.len() != c) {
                    return Err(Error::Invalid("multi-label matrix does not match scores".into()));
                }
            }
            Labels::Single(l) => {
                if l.len() != self.len() || l.iter().any(|&k| k >= c) {
                    return Err(Error::Invalid("class labels do not match scores".into()));
                }
            }
        }
        for n in [self.boxes.as_ref().map(Vec::len), self.image_ids.as_ref().map(Vec::len)]
            .into_iter()
            .flatten()
        {
            if n != self.len() {
                return Err(Error::Invalid("box/image annotations do not match sample count".into()));
            }
        }
        Ok(())
    }

    fn class_column(&self, class: usize) -> (Vec<f64>, Vec<bool>) {
        let scores = self.scores.iter().map(|r| r[class]).collect();
        let labels = match &self.labels {
            Labels::Multi(l) => l.iter().map(|r| r[class]).collect(),
            Labels::Single(l) => l.iter().map(|&k| k == class).collect(),
        };
        (scores, labels)
    }

    fn subset(&self, idx: &[usize]) -> PredictionSet {
        PredictionSet {
            scores: idx.iter().map(|&i| self.scores[i].clone()).collect(),
            labels: match &self.labels {
                Labels::Multi(l) => Labels::Multi(idx.iter().map(|&i| l[i].clone()).collect()),
                Labels::Single(l) => Labels::Single(idx.iter().map(|&i| l[i]).collect()),
            },
            boxes: None,
            image_ids: None,
        }
    }
}

/// Indices sorted by score descending, ties by original index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// All-points average precision. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, i) in ranking(scores).into_iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Per-class AP; classes without positives map to `None`.
pub fn per_class_ap(pred: &PredictionSet) -> Vec<Option<f64>> {
    (0..pred.num_classes())
        .map(|c| {
            let (s, l) = pred.class_column(c);
            average_precision(&s, &l)
        })
        .collect()
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Unweighted mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(pred: &PredictionSet) -> Option<f64> {
    mean_defined(&per_class_ap(pred))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Mann-Whitney rank sum with midranks for ties.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

pub fn per_class_auc(pred: &PredictionSet) -> Vec<Option<f64>> {
    (0..pred.num_classes())
        .map(|c| {
            let (s, l) = pred.class_column(c);
            roc_auc(&s, &l)
        })
        .collect()
}

/// Macro-average AUC over classes where it is defined.
pub fn macro_auc(pred: &PredictionSet) -> Option<f64> {
    mean_defined(&per_class_auc(pred))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax (lowest index on ties) equals the label.
/// Multi-label sets count a hit when the argmax class is positive.
pub fn accuracy(pred: &PredictionSet) -> Option<f64> {
    if pred.is_empty() {
        return None;
    }
    let hits = pred
        .scores
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let k = argmax(row);
            match &pred.labels {
                Labels::Single(l) => l[*i] == k,
                Labels::Multi(l) => l[*i][k],
            }
        })
        .count();
    Some(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumRow {
    pub threshold: f64,
    pub map_overlapping: Option<f64>,
    pub map_remaining: Option<f64>,
    pub overlapping: usize,
    pub remaining: usize,
}

/// Indices of samples whose box has IoU strictly above `threshold` with any
/// other box of the same image.
pub fn overlapping_indices(boxes: &[BBox], image_ids: &[String], threshold: f64) -> Vec<usize> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in image_ids.iter().enumerate() {
        by_image.entry(id).or_default().push(i);
    }
    let mut flagged = vec![false; boxes.len()];
    for members in by_image.values() {
        for (a_pos, &a) in members.iter().enumerate() {
            for &b in &members[a_pos + 1..] {
                if iou(&boxes[a], &boxes[b]) > threshold {
                    flagged[a] = true;
                    flagged[b] = true;
                }
            }
        }
    }
    (0..boxes.len()).filter(|&i| flagged[i]).collect()
}

/// Splits samples into Overlapping / Remaining at each threshold and reports
/// mAP for each side.
pub fn stratified_map_at_iou(pred: &PredictionSet, thresholds: &[f64]) -> Result<Vec<StratumRow>> {
    let (Some(boxes), Some(ids)) = (&pred.boxes, &pred.image_ids) else {
        return Err(Error::Invalid(
            "IoU stratification needs a box and image id on every sample".into(),
        ));
    };
    thresholds
        .iter()
        .map(|&t| {
            let over = overlapping_indices(boxes, ids, t);
            let mut is_over = vec![false; pred.len()];
            for &i in &over {
                is_over[i] = true;
            }
            let rest: Vec<usize> = (0..pred.len()).filter(|&i| !is_over[i]).collect();
            let map_of = |idx: &[usize]| {
                if idx.is_empty() {
                    None
                } else {
                    mean_average_precision(&pred.subset(idx))
                }
            };
            Ok(StratumRow {
                threshold: t,
                map_overlapping: map_of(&over),
                map_remaining: map_of(&rest),
                overlapping: over.len(),
                remaining: rest.len(),
            })
        })
        .collect()
}

pub const DEFAULT_IOU_THRESHOLDS: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub samples: usize,
    pub map: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_auc: Vec<Option<f64>>,
    /// Classes excluded from the means because AP or AUC is undefined.
    pub skipped_classes: Vec<usize>,
    pub strata: Vec<StratumRow>,
}

impl MetricReport {
    /// Multi-label sets get mAP and AUC; single-label sets get accuracy.
    pub fn compute(pred: &PredictionSet, iou_thresholds: Option<&[f64]>) -> Result<Self> {
        pred.validate()?;
        let mut report = MetricReport {
            samples: pred.len(),
            ..Default::default()
        };
        match pred.labels {
            Labels::Multi(_) => {
                report.per_class_ap = per_class_ap(pred);
                report.per_class_auc = per_class_auc(pred);
                report.map = mean_defined(&report.per_class_ap);
                report.auc = mean_defined(&report.per_class_auc);
                report.skipped_classes = (0..pred.num_classes())
                    .filter(|&c| report.per_class_ap[c].is_none() || report.per_class_auc[c].is_none())
                    .collect();
            }
            Labels::Single(_) => report.accuracy = accuracy(pred),
        }
        if let Some(t) = iou_thresholds {
            report.strata = stratified_map_at_iou(pred, t)?;
        }
        Ok(report)
    }

    /// `key=value` lines; undefined values print as `nan`.
    pub fn render(&self) -> String {
        fn f(v: Option<f64>) -> String {
            v.map_or_else(|| "nan".to_owned(), |x| format!("{x:.6}"))
        }
        let mut s = String::new();
        let _ = writeln!(s, "samples={}", self.samples);
        if !self.per_class_ap.is_empty() {
            let _ = writeln!(s, "map={}", f(self.map));
            let _ = writeln!(s, "auc={}", f(self.auc));
            for (c, (ap, auc)) in self.per_class_ap.iter().zip(&self.per_class_auc).enumerate() {
                let _ = writeln!(s, "class.{c}.ap={}", f(*ap));
                let _ = writeln!(s, "class.{c}.auc={}", f(*auc));
            }
            let skipped: Vec<String> = self.skipped_classes.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "skipped_classes={}", skipped.join(","));
        }
        if self.accuracy.is_some() {
            let _ = writeln!(s, "accuracy={}", f(self.accuracy));
        }
        for row in &self.strata {
            let t = row.threshold;
            let _ = writeln!(s, "iou.{t}.map_overlapping={}", f(row.map_overlapping));
            let _ = writeln!(s, "iou.{t}.map_remaining={}", f(row.map_remaining));
            let _ = writeln!(s, "iou.{t}.count_overlapping={}", row.overlapping);
            let _ = writeln!(s, "iou.{t}.count_remaining={}", row.remaining);
        }
        s
    }
}
