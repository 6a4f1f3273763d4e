//! Description generation: box rendering, the prompt, an OpenAI-style chat
//! client with retries, and an append-only cache.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Manifest};
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::tensor::{RngState, Tensor};

pub const PROMPT_PREFIX: &str = "USER: <image>\n";

pub const EMOTIC_CLASSES: [&str; 26] = [
    "Affection",
    "Anger",
    "Annoyance",
    "Anticipation",
    "Aversion",
    "Confidence",
    "Disapproval",
    "Disconnection",
    "Disquietment",
    "Doubt/Confusion",
    "Embarrassment",
    "Engagement",
    "Esteem",
    "Excitement",
    "Fatigue",
    "Fear",
    "Happiness",
    "Pain",
    "Peace",
    "Pleasure",
    "Sadness",
    "Sensitivity",
    "Suffering",
    "Surprise",
    "Sympathy",
    "Yearning",
];

pub const CAERS_CLASSES: [&str; 7] = [
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
    "Neutral",
];

pub const MIDDLE_FRAME_TAG: &str = "middle-frame substitute";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    class_names: Vec<String>,
    pub has_bbox: bool,
}

impl PromptSpec {
    pub fn new<S: AsRef<str>>(class_names: &[S], has_bbox: bool) -> Result<Self> {
        let names: Vec<String> = class_names.iter().map(|s| s.as_ref().to_owned()).collect();
        if names.is_empty() || names.iter().any(|n| n.trim().is_empty()) {
            return Err(Error::Invalid("prompt needs at least one non-empty class name".into()));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Invalid("duplicate class name in prompt".into()));
        }
        Ok(Self {
            class_names: names,
            has_bbox,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
}

/// Canonical prompt bytes: the user turn marker and image placeholder on
/// the first line, the instruction on the second, no trailing newline.
pub fn build_prompt(spec: &PromptSpec) -> String {
    let subject = if spec.has_bbox {
        "the person in the red box"
    } else {
        "the person"
    };
    format!(
        "{PROMPT_PREFIX}Given the following list of emotions: {}, please explain in detail which emotions are more suitable for describing how {subject} feels based on the image context.",
        spec.class_names.join(", ")
    )
}

/// Text part of a chat request: the prompt without its turn marker, since
/// the image travels as its own content part.
pub fn instruction(prompt: &str) -> &str {
    prompt.strip_prefix(PROMPT_PREFIX).unwrap_or(prompt)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest over dimensions and 8-bit pixel values.
pub fn image_digest(image: &Tensor) -> Result<String> {
    let rgb = data::to_rgb_image(image)?;
    let mut bytes = Vec::with_capacity(8 + rgb.as_raw().len());
    bytes.extend_from_slice(&rgb.width().to_le_bytes());
    bytes.extend_from_slice(&rgb.height().to_le_bytes());
    bytes.extend_from_slice(rgb.as_raw());
    Ok(sha256_hex(&bytes))
}

pub const DEFAULT_STROKE: usize = 3;

/// Burns a pure red outline of `stroke` pixels just inside `bbox`.
/// Coordinates outside the image are clamped with a warning.
pub fn render_bbox(image: &Tensor, bbox: &BBox, stroke: usize) -> Result<Tensor> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::Invalid(format!("expected [H, W, 3], got {:?}", image.shape())));
    };
    if stroke == 0 {
        return Err(Error::Invalid("stroke must be at least one pixel".into()));
    }
    let (wf, hf) = (w as f64, h as f64);
    let (cx1, cy1) = (bbox.x1.clamp(0.0, wf), bbox.y1.clamp(0.0, hf));
    let (cx2, cy2) = (bbox.x2.clamp(0.0, wf), bbox.y2.clamp(0.0, hf));
    if (cx1, cy1, cx2, cy2) != (bbox.x1, bbox.y1, bbox.x2, bbox.y2) {
        log::warn!("box {bbox:?} clamped to {w}x{h} image");
    }
    if cx2 <= cx1 || cy2 <= cy1 {
        return Err(Error::Invalid(format!("box {bbox:?} is empty after clamping")));
    }
    let (x1, y1) = (cx1.floor(), cy1.floor());
    let (x2, y2) = ((cx2.ceil() - 1.0).max(x1), (cy2.ceil() - 1.0).max(y1));
    let (x1, y1, x2, y2) = (x1 as usize, y1 as usize, x2 as usize, y2 as usize);
    let mut out = image.clone();
    let data = out.data_mut();
    for y in y1..=y2 {
        for x in x1..=x2 {
            let edge = x < x1 + stroke || x + stroke > x2 || y < y1 + stroke || y + stroke > y2;
            if edge {
                let p = (y * w + x) * 3;
                data[p..p + 3].copy_from_slice(&[1.0, 0.0, 0.0]);
            }
        }
    }
    Ok(out)
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let rgb = data::to_rgb_image(image)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionRecord {
    pub image_digest: String,
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub prompt_digest: String,
    pub description: String,
    pub model: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub image_digest: String,
    pub bbox: Option<[u64; 4]>,
    pub prompt_digest: String,
}

impl CacheKey {
    pub fn new(image_digest: &str, bbox: Option<&BBox>, prompt_digest: &str) -> Self {
        Self {
            image_digest: image_digest.to_owned(),
            bbox: bbox.map(|b| [b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits()]),
            prompt_digest: prompt_digest.to_owned(),
        }
    }
}

impl DescriptionRecord {
    pub fn key(&self) -> CacheKey {
        CacheKey::new(&self.image_digest, self.bbox.as_ref(), &self.prompt_digest)
    }
}

/// Parses cache text, one record per line. Later records win.
pub fn parse_cache(text: &str, path: &Path) -> Result<HashMap<CacheKey, DescriptionRecord>> {
    let mut entries = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DescriptionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.insert(rec.key(), rec);
    }
    Ok(entries)
}

/// Append-only JSONL cache of description records.
#[derive(Debug)]
pub struct DescriptionCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<CacheKey, DescriptionRecord>>,
}

impl DescriptionCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            parse_cache(&fs::read_to_string(path)?, path)?
        } else {
            HashMap::new()
        };
        Ok(Self {
            path: Some(path.to_owned()),
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<DescriptionRecord> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, record: DescriptionRecord) -> Result<()> {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        entries.insert(record.key(), record);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// POSTs a JSON body. `Err` means no HTTP response was received.
pub trait ChatTransport: Send + Sync {
    fn post(&self, url: &str, api_key: Option<&str>, body: &serde_json::Value) -> std::result::Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl ChatTransport for UreqTransport {
    fn post(&self, url: &str, api_key: Option<&str>, body: &serde_json::Value) -> std::result::Result<HttpResponse, String> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => {
                let status = resp.status();
                let body = resp.into_string().map_err(|e| e.to_string())?;
                Ok(HttpResponse { status, body })
            }
            Err(ureq::Error::Status(status, resp)) => Ok(HttpResponse {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(e) => Err(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
}

impl Endpoint {
    pub const URL_ENV: &'static str = "CTXEMO_VLLM_ENDPOINT";
    pub const KEY_ENV: &'static str = "CTXEMO_VLLM_API_KEY";
    pub const MODEL_ENV: &'static str = "CTXEMO_VLLM_MODEL";
    pub const DEFAULT_MODEL: &'static str = "llava-1.5";

    /// Flags take precedence over the environment.
    pub fn resolve(url: Option<String>, model: Option<String>, api_key: Option<String>) -> Result<Self> {
        let url = url
            .or_else(|| std::env::var(Self::URL_ENV).ok())
            .ok_or_else(|| Error::Config(format!("no endpoint: pass --endpoint or set {}", Self::URL_ENV)))?;
        Ok(Self {
            url,
            model: model
                .or_else(|| std::env::var(Self::MODEL_ENV).ok())
                .unwrap_or_else(|| Self::DEFAULT_MODEL.to_owned()),
            api_key: api_key.or_else(|| std::env::var(Self::KEY_ENV).ok()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Fraction of each delay drawn uniformly as extra wait.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            jitter: 0.25,
            seed: 0,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32, rng: &mut RngState) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << retry.min(20));
        let capped = exp.min(self.max_delay);
        capped.mul_f64(1.0 + self.jitter * rng.uniform())
    }
}

pub fn chat_request_body(model: &str, png: &[u8], prompt: &str) -> serde_json::Value {
    let url = format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    );
    serde_json::json!({
        "model": model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "image_url", "image_url": {"url": url}},
                {"type": "text", "text": instruction(prompt)},
            ],
        }],
    })
}

/// Text of `choices[0].message.content`, either a string or a list of text
/// parts.
pub fn parse_chat_response(body: &str) -> Result<String> {
    let fail = |m: &str| Error::Endpoint {
        status: None,
        attempts: 0,
        message: m.to_owned(),
    };
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| fail(&format!("malformed response: {e}")))?;
    let content = v
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .ok_or_else(|| fail("response lacks choices[0].message.content"))?;
    let text = match content {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(fail("message content is neither text nor parts")),
    };
    if text.trim().is_empty() {
        return Err(fail("empty description"));
    }
    Ok(text)
}

/// Sends one request, retrying transport failures, 429 and 5xx with
/// exponential backoff. Returns the text and the number of attempts.
pub fn request_description(
    transport: &dyn ChatTransport,
    endpoint: &Endpoint,
    png: &[u8],
    prompt: &str,
    policy: &RetryPolicy,
    sleep: &dyn Fn(Duration),
) -> Result<(String, u32)> {
    let body = chat_request_body(&endpoint.model, png, prompt);
    let mut rng = RngState::new(policy.seed);
    let mut attempts = 0;
    loop {
        attempts += 1;
        let (status, message) = match transport.post(&endpoint.url, endpoint.api_key.as_deref(), &body) {
            Ok(resp) if (200..300).contains(&resp.status) => {
                return parse_chat_response(&resp.body)
                    .map(|t| (t, attempts))
                    .map_err(|e| match e {
                        Error::Endpoint { message, .. } => Error::Endpoint {
                            status: Some(resp.status),
                            attempts,
                            message,
                        },
                        other => other,
                    });
            }
            Ok(resp) => {
                let retryable = resp.status == 429 || resp.status >= 500;
                let message = format!("HTTP {}: {}", resp.status, resp.body.chars().take(200).collect::<String>());
                if !retryable {
                    return Err(Error::Endpoint {
                        status: Some(resp.status),
                        attempts,
                        message,
                    });
                }
                (Some(resp.status), message)
            }
            Err(e) => (None, e),
        };
        if attempts > policy.max_retries {
            return Err(Error::Endpoint {
                status,
                attempts,
                message,
            });
        }
        let wait = policy.delay(attempts - 1, &mut rng);
        log::warn!("attempt {attempts} failed ({message}); retrying in {wait:?}");
        sleep(wait);
    }
}

pub struct Describer<'a> {
    pub transport: &'a dyn ChatTransport,
    pub endpoint: Endpoint,
    pub policy: RetryPolicy,
    pub cache: &'a DescriptionCache,
    pub stroke: usize,
    pub sleep: &'a (dyn Fn(Duration) + Sync),
    calls: AtomicUsize,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl<'a> Describer<'a> {
    pub fn new(
        transport: &'a dyn ChatTransport,
        endpoint: Endpoint,
        cache: &'a DescriptionCache,
        sleep: &'a (dyn Fn(Duration) + Sync),
    ) -> Self {
        Self {
            transport,
            endpoint,
            policy: RetryPolicy::default(),
            cache,
            stroke: DEFAULT_STROKE,
            sleep,
            calls: AtomicUsize::new(0),
        }
    }

    /// HTTP attempts made so far, retries included.
    pub fn http_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn describe_tagged(&self, image: &Tensor, bbox: Option<&BBox>, spec: &PromptSpec, tag: Option<&str>) -> Result<DescriptionRecord> {
        let prompt = build_prompt(spec);
        let key = CacheKey::new(&image_digest(image)?, bbox, &sha256_hex(prompt.as_bytes()));
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let rendered = match bbox {
            Some(b) => render_bbox(image, b, self.stroke)?,
            None => image.clone(),
        };
        let png = encode_png(&rendered)?;
        let result = request_description(self.transport, &self.endpoint, &png, &prompt, &self.policy, self.sleep);
        let attempts = match &result {
            Ok((_, a)) => *a,
            Err(Error::Endpoint { attempts, .. }) => *attempts,
            Err(_) => 1,
        };
        self.calls.fetch_add(attempts as usize, Ordering::SeqCst);
        let (text, _) = result?;
        let model = match tag {
            Some(t) => format!("{} ({t})", self.endpoint.model),
            None => self.endpoint.model.clone(),
        };
        let record = DescriptionRecord {
            image_digest: key.image_digest,
            bbox: bbox.copied(),
            prompt_digest: key.prompt_digest,
            description: text,
            model,
            timestamp: now(),
        };
        self.cache.insert(record.clone())?;
        Ok(record)
    }

    pub fn describe_image(&self, image: &Tensor, bbox: Option<&BBox>, spec: &PromptSpec) -> Result<DescriptionRecord> {
        self.describe_tagged(image, bbox, spec, None)
    }

    /// Describes the temporally middle frame, `frames[len / 2]`.
    pub fn describe_video(&self, frames: &[Tensor], bbox: Option<&BBox>, spec: &PromptSpec) -> Result<DescriptionRecord> {
        match frames.len() {
            0 => Err(Error::Invalid("video has no frames".into())),
            1 => self.describe_image(&frames[0], bbox, spec),
            n => self.describe_tagged(&frames[middle_frame(n)], bbox, spec, Some(MIDDLE_FRAME_TAG)),
        }
    }
}

pub fn middle_frame(n: usize) -> usize {
    n / 2
}

/// Fills in missing descriptions, at most `in_flight` requests at a time.
/// Samples that already have a description are left alone. On error the
/// descriptions obtained so far stay in the cache and in `manifest`.
pub fn describe_manifest(
    manifest: &mut Manifest,
    base_dir: &Path,
    describer: &Describer<'_>,
    in_flight: usize,
) -> Result<usize> {
    let header = manifest.header()?.clone();
    let pending: Vec<usize> = (0..manifest.samples.len())
        .filter(|&i| manifest.samples[i].description.is_none())
        .collect();
    let mut done = 0;
    let mut first_error = None;
    for chunk in pending.chunks(in_flight.max(1)) {
        let results: Vec<(usize, Result<DescriptionRecord>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let sample = &manifest.samples[i];
                    let header = &header;
                    scope.spawn(move || {
                        let spec = PromptSpec::new(&header.class_names, sample.bbox.is_some())?;
                        let path = if sample.media.is_absolute() {
                            sample.media.clone()
                        } else {
                            base_dir.join(&sample.media)
                        };
                        if path.is_dir() {
                            let frames = data::list_frames(&path)?
                                .iter()
                                .map(|p| data::load_image_native(p))
                                .collect::<Result<Vec<_>>>()?;
                            describer.describe_video(&frames, sample.bbox.as_ref(), &spec)
                        } else {
                            describer.describe_image(&data::load_image_native(&path)?, sample.bbox.as_ref(), &spec)
                        }
                    })
                })
                .collect();
            chunk
                .iter()
                .zip(handles)
                .map(|(&i, h)| (i, h.join().expect("describe worker panicked")))
                .collect()
        });
        for (i, r) in results {
            match r {
                Ok(rec) => {
                    manifest.samples[i].description = Some(rec.description);
                    done += 1;
                }
                Err(e) => {
                    log::error!("sample `{}`: {e}", manifest.samples[i].id);
                    first_error.get_or_insert(e);
                }
            }
        }
        if first_error.is_some() {
            break;
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(done),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn no_sleep(_: Duration) {}

    struct Scripted {
        statuses: Vec<u16>,
        text: String,
        calls: AtomicU32,
    }

    impl ChatTransport for Scripted {
        fn post(&self, _: &str, _: Option<&str>, body: &serde_json::Value) -> std::result::Result<HttpResponse, String> {
            assert!(body["messages"][0]["content"][0]["image_url"]["url"]
                .as_str()
                .unwrap()
                .starts_with("data:image/png;base64,"));
            let n = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
            let status = self.statuses.get(n).copied().unwrap_or(200);
            let body = if status == 200 {
                serde_json::json!({"choices": [{"message": {"role": "assistant", "content": self.text}}]}).to_string()
            } else {
                "busy".into()
            };
            Ok(HttpResponse { status, body })
        }
    }

    fn endpoint() -> Endpoint {
        Endpoint {
            url: "http://mock".into(),
            model: "mock-vllm".into(),
            api_key: None,
        }
    }

    #[test]
    fn prompt_variants() {
        let with = build_prompt(&PromptSpec::new(&["Anger", "Fear"], true).unwrap());
        assert!(with.contains("the person in the red box"));
        assert!(with.contains("Anger, Fear"));
        let without = build_prompt(&PromptSpec::new(&["Anger", "Fear"], false).unwrap());
        assert!(!without.contains("red box"));
        assert!(without.contains("the person feels based on the image context"));
        assert_eq!(without, build_prompt(&PromptSpec::new(&["Anger", "Fear"], false).unwrap()));
        assert!(PromptSpec::new(&["A", "A"], true).is_err());
        assert!(PromptSpec::new::<&str>(&[], true).is_err());
    }

    #[test]
    fn bbox_outline() {
        let img = Tensor::full(&[12, 10, 3], 0.5);
        let full = BBox::new(0.0, 0.0, 10.0, 12.0).unwrap();
        let out = render_bbox(&img, &full, 3).unwrap();
        let px = |t: &Tensor, x: usize, y: usize| t.data()[(y * 10 + x) * 3..(y * 10 + x) * 3 + 3].to_vec();
        assert_eq!(px(&out, 0, 0), vec![1.0, 0.0, 0.0]);
        assert_eq!(px(&out, 2, 6), vec![1.0, 0.0, 0.0]);
        assert_eq!(px(&out, 3, 6), vec![0.5; 3]);
        assert_eq!(px(&out, 5, 6), vec![0.5; 3]);
        assert_eq!(px(&out, 9, 11), vec![1.0, 0.0, 0.0]);
        assert_eq!(render_bbox(&out, &full, 3).unwrap(), out);

        let inner = BBox::new(2.0, 3.0, 8.0, 9.0).unwrap();
        let out = render_bbox(&img, &inner, 1).unwrap();
        assert_eq!(px(&out, 2, 3), vec![1.0, 0.0, 0.0]);
        assert_eq!(px(&out, 1, 3), vec![0.5; 3]);

        let outside = BBox::new(-5.0, -5.0, 50.0, 50.0).unwrap();
        assert!(render_bbox(&img, &outside, 3).is_ok());
        let gone = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(render_bbox(&img, &gone, 3).is_err());
    }

    #[test]
    fn retries_then_succeeds() {
        let t = Scripted {
            statuses: vec![500, 500, 500],
            text: "A calm person.".into(),
            calls: AtomicU32::new(0),
        };
        let (text, attempts) =
            request_description(&t, &endpoint(), b"png", "USER: <image>\nhi", &RetryPolicy::default(), &no_sleep).unwrap();
        assert_eq!(text, "A calm person.");
        assert_eq!(attempts, 4);
    }

    #[test]
    fn gives_up_with_status() {
        let t = Scripted {
            statuses: vec![503; 10],
            text: String::new(),
            calls: AtomicU32::new(0),
        };
        let policy = RetryPolicy { max_retries: 2, ..Default::default() };
        match request_description(&t, &endpoint(), b"png", "p", &policy, &no_sleep) {
            Err(Error::Endpoint { status, attempts, .. }) => {
                assert_eq!(status, Some(503));
                assert_eq!(attempts, 3);
            }
            other => panic!("expected endpoint error, got {other:?}"),
        }
        let t = Scripted {
            statuses: vec![401],
            text: String::new(),
            calls: AtomicU32::new(0),
        };
        assert!(request_description(&t, &endpoint(), b"png", "p", &policy, &no_sleep).is_err());
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_response_is_error() {
        assert!(parse_chat_response(r#"{"choices":[{"message":{"content":"  "}}]}"#).is_err());
        assert!(parse_chat_response(r#"{"choices":[]}"#).is_err());
        assert_eq!(
            parse_chat_response(r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#).unwrap(),
            "ab"
        );
    }

    #[test]
    fn cache_serves_repeat_and_video_tags() {
        let t = Scripted {
            statuses: vec![],
            text: "Looks happy.".into(),
            calls: AtomicU32::new(0),
        };
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("cache.jsonl");
        let cache = DescriptionCache::open(&cache_path).unwrap();
        let d = Describer::new(&t, endpoint(), &cache, &no_sleep);
        let spec = PromptSpec::new(&CAERS_CLASSES, true).unwrap();
        let img = Tensor::full(&[8, 8, 3], 0.25);
        let b = BBox::new(1.0, 1.0, 6.0, 6.0).unwrap();
        let first = d.describe_image(&img, Some(&b), &spec).unwrap();
        assert_eq!(first.description, "Looks happy.");
        let second = d.describe_image(&img, Some(&b), &spec).unwrap();
        assert_eq!(first, second);
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);

        let reopened = DescriptionCache::open(&cache_path).unwrap();
        assert_eq!(reopened.len(), 1);

        let frames: Vec<Tensor> = (0..8).map(|i| Tensor::full(&[8, 8, 3], f64::from(i) / 8.0)).collect();
        let rec = d.describe_video(&frames, None, &spec).unwrap();
        assert!(rec.model.contains(MIDDLE_FRAME_TAG));
        assert_eq!(rec.image_digest, image_digest(&frames[4]).unwrap());
        let single = d.describe_video(&frames[..1], None, &spec).unwrap();
        assert_eq!(single, d.describe_image(&frames[0], None, &spec).unwrap());
    }
}
