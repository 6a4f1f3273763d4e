use std::path::Path;

use proptest::prelude::*;

use ctxemo::checkpoint::Checkpoint;
use ctxemo::data::{self, Manifest, ManifestHeader, Sample, Split};
use ctxemo::describe::render_bbox;
use ctxemo::metrics::{average_precision, iou, roc_auc, BBox};
use ctxemo::qformer::TaskKind;
use ctxemo::text::{build_vocab, tokenize};
use ctxemo::train::linear_schedule;
use ctxemo::{RngState, Tensor};

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..=40).prop_flat_map(|m| {
        (
            prop::collection::vec((0u8..16).prop_map(|v| f64::from(v) / 8.0), m),
            prop::collection::vec(any::<bool>(), m),
        )
    })
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn ranking_metrics_ignore_monotone_rescaling((scores, labels) in scored_labels()) {
        let moved: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
        prop_assert_eq!(average_precision(&scores, &labels), average_precision(&moved, &labels));
        prop_assert_eq!(roc_auc(&scores, &labels), roc_auc(&moved, &labels));
    }

    #[test]
    fn ranking_metrics_are_bounded((scores, labels) in scored_labels()) {
        if let Some(ap) = average_precision(&scores, &labels) {
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
        if let Some(auc) = roc_auc(&scores, &labels) {
            prop_assert!((0.0..=1.0).contains(&auc));
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            let flipped = roc_auc(&negated, &labels).unwrap();
            prop_assert!((auc + flipped - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn checkpoint_round_trips(values in prop::collection::vec(any::<f64>(), 1..64), meta in "[a-z]{1,8}") {
        let mut ck = Checkpoint::new();
        ck.meta.insert(meta.clone(), "v".into());
        ck.push_tensor("t", Tensor::new(&[values.len()], values.clone()).unwrap()).unwrap();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        let got: Vec<u64> = back.tensor("t").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn frame_indices_are_sorted_and_in_range(n in 1usize..64, t in 1usize..16) {
        let idx = data::sample_frame_indices(n, t);
        prop_assert_eq!(idx.len(), t);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        if n == t {
            prop_assert_eq!(idx, (0..t).collect::<Vec<_>>());
        }
    }

    #[test]
    fn batches_partition_the_dataset(n in 0usize..80, b in 1usize..12, seed in any::<u64>()) {
        let batches = data::batch_indices(n, b, &mut RngState::new(seed));
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().rev().skip(1).all(|x| x.len() == b));
        prop_assert_eq!(batches, data::batch_indices(n, b, &mut RngState::new(seed)));
    }

    #[test]
    fn schedule_is_non_increasing(total in 1usize..500) {
        let floor = 1.0 / total as f64;
        let mut prev = f64::INFINITY;
        for s in 0..total + 3 {
            let v = linear_schedule(s, total);
            prop_assert!(v <= prev && v >= floor && v <= 1.0);
            prev = v;
        }
    }

    #[test]
    fn tokens_fill_max_len_with_mask_prefix(text in "[a-z ]{0,60}", max_len in 1usize..12) {
        let vocab = build_vocab(&["a b c the person"], 1).unwrap();
        let t = tokenize(&text, &vocab, max_len);
        prop_assert_eq!(t.ids.len(), max_len);
        prop_assert_eq!(t.mask.len(), max_len);
        let real = t.mask.iter().take_while(|&&m| m).count();
        prop_assert!(t.mask[real..].iter().all(|&m| !m));
        prop_assert!(t.ids[real..].iter().all(|&id| id == ctxemo::text::PAD));
    }

    #[test]
    fn bbox_render_is_idempotent_and_only_paints_red(b in bbox(), stroke in 1usize..5) {
        let mut rng = RngState::new(1);
        let data: Vec<f64> = (0..32 * 40 * 3).map(|_| rng.uniform()).collect();
        let img = Tensor::new(&[32, 40, 3], data).unwrap();
        if let Ok(once) = render_bbox(&img, &b, stroke) {
            prop_assert_eq!(&render_bbox(&once, &b, stroke).unwrap(), &once);
            for (before, after) in img.data().chunks(3).zip(once.data().chunks(3)) {
                prop_assert!(before == after || after == [1.0, 0.0, 0.0]);
            }
        }
    }
}

#[test]
fn manifest_round_trip_and_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let header = ManifestHeader {
        task: TaskKind::MultiLabel,
        num_classes: 2,
        class_names: vec!["a".into(), "b".into()],
    };
    let samples = vec![
        Sample {
            id: "x".into(),
            media: "x.png".into(),
            bbox: Some(BBox::new(0.5, 1.0, 3.25, 4.0).unwrap()),
            description: Some("text".into()),
            labels: Some(vec![1, 0]),
            label: None,
            split: Split::Train,
            image_id: Some("img".into()),
        },
        Sample {
            id: "y".into(),
            media: "frames/y".into(),
            bbox: None,
            description: None,
            labels: Some(vec![0, 0]),
            label: None,
            split: Split::Test,
            image_id: None,
        },
    ];
    let m = Manifest::new(header, samples);
    data::write_manifest(&path, &m).unwrap();
    assert_eq!(data::load_manifest(&path).unwrap(), m);

    assert!(Manifest::parse("", Path::new("e")).unwrap().samples.is_empty());
    let mut text = m.to_jsonl().unwrap();
    text.push_str("{oops\n");
    match Manifest::parse(&text, Path::new("bad.jsonl")) {
        Err(ctxemo::Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn sixteen_frames_to_eight_takes_every_other() {
    assert_eq!(data::sample_frame_indices(16, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
    assert_eq!(data::sample_frame_indices(3, 8), vec![0, 1, 2, 2, 2, 2, 2, 2]);
}
