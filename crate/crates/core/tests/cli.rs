use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ctxemo::data::{self, Manifest, ManifestHeader, Sample, Split};
use ctxemo::describe::{Endpoint, CAERS_CLASSES};
use ctxemo::metrics::BBox;
use ctxemo::qformer::TaskKind;
use ctxemo::Tensor;

fn ctxemo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxemo"))
        .args(args)
        .env_remove(Endpoint::URL_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const TINY: &str = "profile = \"synthetic\"\nsynth_train = 50\nsynth_val = 25\nbatch_size = 16\n";

#[test]
fn unknown_command_is_rejected_with_usage() {
    let o = ctxemo(&["dance"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn invalid_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "profile = \"synthetic\"\nlearning_rate = 0.1\n").unwrap();
    let o = ctxemo(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn train_resume_and_eval_on_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, format!("{TINY}max_epochs = 2\n")).unwrap();
    let run = dir.path().join("run");
    let o = ctxemo(&["train", "--config", s(&cfg), "--output-dir", s(&run), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "history.tsv", "lr.tsv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let history = std::fs::read_to_string(run.join("history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");

    std::fs::write(&cfg, format!("{TINY}max_epochs = 4\n")).unwrap();
    let o = ctxemo(&[
        "train",
        "--config",
        s(&cfg),
        "--output-dir",
        s(&run),
        "--seed",
        "3",
        "--resume",
        s(&run.join("last.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let history = std::fs::read_to_string(run.join("history.tsv")).unwrap();
    let epochs: Vec<&str> = history.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4"], "{history}");

    let corpus = dir.path().join("corpus");
    let o = ctxemo(&["synth", "--out", s(&corpus), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = ctxemo(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--manifest",
        s(&corpus.join("manifest.jsonl")),
        "--split",
        "val",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.contains("samples=25"), "{report}");
    assert!(report.lines().any(|l| l.starts_with("accuracy=")), "{report}");
}

fn write_png(path: &Path, value: f64) {
    data::save_png(&Tensor::full(&[12, 16, 3], value), path).unwrap();
}

#[test]
fn eval_multi_label_with_iou_strata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ml.toml");
    std::fs::write(
        &cfg,
        "profile = \"emotic-like\"\nimage_size = 16\npatch = 8\nvision_dim = 8\nvision_depth = 1\nvision_heads = 2\n\
         num_queries = 2\nqformer_dim = 8\nqformer_layers = 2\nqformer_heads = 2\nffn_dim = 16\nmax_text_len = 6\n\
         max_epochs = 1\nbatch_size = 4\n",
    )
    .unwrap();
    let header = ManifestHeader {
        task: TaskKind::MultiLabel,
        num_classes: 3,
        class_names: vec!["Anger".into(), "Fear".into(), "Peace".into()],
    };
    let boxes = [
        [0.0, 0.0, 10.0, 10.0],
        [5.0, 0.0, 15.0, 10.0],
        [0.0, 0.0, 8.0, 8.0],
        [1.0, 1.0, 9.0, 9.0],
    ];
    let mut samples = Vec::new();
    for (i, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            let image = format!("{i}_{}.png", j / 2);
            write_png(&dir.path().join(&image), (i * 4 + j) as f64 / 12.0);
            samples.push(Sample {
                id: format!("{i}-{j}"),
                media: image.into(),
                bbox: Some(BBox::new(b[0], b[1], b[2], b[3]).unwrap()),
                description: Some(format!("the person looks {}", ["calm", "angry"][j % 2])),
                labels: Some(vec![u8::from(j % 2 == 0), u8::from(j % 2 == 1), 1]),
                label: None,
                split,
                image_id: None,
            });
        }
    }
    let manifest = dir.path().join("manifest.jsonl");
    data::write_manifest(&manifest, &Manifest::new(header, samples)).unwrap();
    let run = dir.path().join("run");
    let o = ctxemo(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--output-dir", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let ck = run.join("best.ckpt");
    let o = ctxemo(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--iou-strata"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.lines().any(|l| l.starts_with("map=")), "{report}");
    assert!(report.lines().any(|l| l.starts_with("auc=")), "{report}");
    let counts: Vec<&str> = report.lines().filter(|l| l.contains(".count_overlapping=")).collect();
    assert_eq!(counts.len(), 5, "{report}");
    // Pair one has IoU 1/3, pair two 49/79.
    let expected = [("0.2", 4), ("0.3", 4), ("0.4", 2), ("0.5", 2), ("0.7", 0)];
    for (t, n) in expected {
        assert!(report.contains(&format!("iou.{t}.count_overlapping={n}\n")), "{t}: {report}");
        assert!(report.contains(&format!("iou.{t}.count_remaining={}\n", 4 - n)), "{t}: {report}");
    }
}

#[test]
fn gradcheck_passes_and_fault_injection_names_op() {
    let o = ctxemo(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("end_to_end_single"));

    let o = ctxemo(&["gradcheck", "--corrupt-op", "layer_norm"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("layer_norm"), "{err}");
}

struct MockEndpoint {
    url: String,
    requests: Arc<AtomicUsize>,
}

/// Answers every POST with a fixed chat completion.
fn mock_endpoint(reply: &'static str) -> MockEndpoint {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let counter = requests.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let request: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert_eq!(request["messages"][0]["role"], "user");
            counter.fetch_add(1, Ordering::SeqCst);
            let payload = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": reply}}]}).to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    MockEndpoint { url, requests }
}

fn describe_fixture(dir: &Path) -> PathBuf {
    write_png(&dir.join("a.png"), 0.2);
    write_png(&dir.join("b.png"), 0.7);
    let clip = dir.join("clip");
    std::fs::create_dir(&clip).unwrap();
    for i in 0..3 {
        write_png(&clip.join(format!("{i:04}.png")), i as f64 / 3.0);
    }
    let header = ManifestHeader {
        task: TaskKind::SingleLabel,
        num_classes: 7,
        class_names: CAERS_CLASSES.iter().map(|s| s.to_string()).collect(),
    };
    let sample = |id: &str, media: &str, bbox: Option<BBox>| Sample {
        id: id.into(),
        media: media.into(),
        bbox,
        description: None,
        labels: None,
        label: Some(3),
        split: Split::Train,
        image_id: None,
    };
    let samples = vec![
        sample("a", "a.png", Some(BBox::new(2.0, 2.0, 12.0, 10.0).unwrap())),
        sample("b", "b.png", None),
        sample("clip", "clip", Some(BBox::new(0.0, 0.0, 8.0, 8.0).unwrap())),
    ];
    let path = dir.join("manifest.jsonl");
    data::write_manifest(&path, &Manifest::new(header, samples)).unwrap();
    path
}

#[test]
fn describe_caches_and_preserves_progress() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = describe_fixture(dir.path());
    let out = dir.path().join("described.jsonl");
    let mock = mock_endpoint("The person appears happy.");

    let o = Command::new(env!("CARGO_BIN_EXE_ctxemo"))
        .args(["describe", "--manifest", s(&manifest), "--output", s(&out)])
        .env(Endpoint::URL_ENV, &mock.url)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(mock.requests.load(Ordering::SeqCst), 3);
    let described = data::load_manifest(&out).unwrap();
    assert_eq!(described.samples.len(), 3);
    assert!(described
        .samples
        .iter()
        .all(|s| s.description.as_deref() == Some("The person appears happy.")));
    let cache = std::fs::read_to_string(dir.path().join("descriptions.jsonl")).unwrap();
    assert_eq!(cache.lines().count(), 3);
    assert!(cache.contains("middle-frame substitute"));

    let o = ctxemo(&["describe", "--manifest", s(&manifest), "--output", s(&out), "--endpoint", "http://127.0.0.1:9/none"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("http_calls=0"), "{}", stdout(&o));
    assert_eq!(mock.requests.load(Ordering::SeqCst), 3);

    write_png(&dir.path().join("c.png"), 0.9);
    let mut m = data::load_manifest(&manifest).unwrap();
    let mut extra = m.samples[1].clone();
    extra.id = "c".into();
    extra.media = "c.png".into();
    m.samples.push(extra);
    data::write_manifest(&manifest, &m).unwrap();
    let o = ctxemo(&[
        "describe",
        "--manifest",
        s(&manifest),
        "--output",
        s(&out),
        "--endpoint",
        "http://127.0.0.1:9/none",
        "--max-retries",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let partial = data::load_manifest(&out).unwrap();
    assert_eq!(partial.samples.len(), 4);
    assert_eq!(partial.samples.iter().filter(|s| s.description.is_some()).count(), 3);
}

#[test]
fn describe_without_endpoint_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = describe_fixture(dir.path());
    let o = ctxemo(&["describe", "--manifest", s(&manifest), "--output", s(&dir.path().join("o.jsonl"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
