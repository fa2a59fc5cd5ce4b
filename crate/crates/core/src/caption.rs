//! Scene-difference captions: side-by-side composites, a pluggable
//! captioner client with retries, and manifest merging.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetError, ManifestRecord};

pub const MAX_CAPTION_CHARS: usize = 300;
pub const DEFAULT_FEWSHOT_COUNT: usize = 10;
pub const ENDPOINT_ENV: &str = "POSEEDIT_CAPTIONER_URL";
pub const API_KEY_ENV: &str = "POSEEDIT_CAPTIONER_KEY";

pub const DEFAULT_PROMPT: &str = "The image shows two frames from the same video side by side. \
In one short present-tense sentence, describe how the person's pose or action changes \
from the left frame to the right frame. Mention body parts and direction. \
Do not describe clothing, background or identity.";

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("captioner unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: usize, last: String },
    #[error("invalid caption: {0}")]
    Validation(String),
    #[error("caption for unknown pair id {0}")]
    UnknownPairId(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("caption records line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Places `reference` on the left and `target`, scaled to the same height
/// with its aspect ratio kept, on the right.
pub fn compose_side_by_side(reference: &RgbImage, target: &RgbImage) -> RgbImage {
    let h = reference.height();
    let target = if target.height() == h {
        target.clone()
    } else {
        let w = ((target.width() as f64 * h as f64 / target.height() as f64).round() as u32).max(1);
        imageops::resize(target, w, h, FilterType::Triangle)
    };
    let mut out = RgbImage::new(reference.width() + target.width(), h);
    imageops::replace(&mut out, reference, 0, 0);
    imageops::replace(&mut out, &target, reference.width() as i64, 0);
    out
}

#[derive(Debug, Clone)]
pub struct CaptionRequest {
    pub composite: RgbImage,
    pub fewshot: Vec<(RgbImage, String)>,
    pub prompt_template: String,
}

/// Neutral stand-ins for the few-shot exemplars: flat grey composites with
/// generic captions.
pub fn placeholder_fewshot(count: usize) -> Vec<(RgbImage, String)> {
    (0..count)
        .map(|i| {
            let v = (64 + 12 * i) as u8;
            (RgbImage::from_pixel(32, 16, Rgb([v, v, v])), format!("The person changes pose slightly (example {}).", i + 1))
        })
        .collect()
}

impl CaptionRequest {
    pub fn new(composite: RgbImage) -> Self {
        Self { composite, fewshot: placeholder_fewshot(DEFAULT_FEWSHOT_COUNT), prompt_template: DEFAULT_PROMPT.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub pair_id: String,
    pub caption: String,
    pub captioner_id: String,
    /// RFC 3339, UTC.
    pub created_at: String,
}

/// Trims, then requires one non-empty sentence of at most 300 characters.
pub fn validate_caption(raw: &str) -> Result<String, CaptionError> {
    let text = raw.trim();
    if text.is_empty() {
        return Err(CaptionError::Validation("empty caption".into()));
    }
    if text.chars().count() > MAX_CAPTION_CHARS {
        return Err(CaptionError::Validation(format!("longer than {MAX_CAPTION_CHARS} characters")));
    }
    if text.contains('\n') {
        return Err(CaptionError::Validation("caption spans several lines".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let inner_break = chars
        .windows(2)
        .enumerate()
        .any(|(i, w)| matches!(w[0], '.' | '!' | '?') && w[1].is_whitespace() && chars[i + 2..].iter().any(|c| c.is_alphanumeric()));
    if inner_break {
        return Err(CaptionError::Validation("more than one sentence".into()));
    }
    Ok(text.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientError {
    /// Worth retrying: timeouts, rate limits, server errors.
    Transient(String),
    Fatal(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Transient(m) => write!(f, "transient: {m}"),
            ClientError::Fatal(m) => write!(f, "{m}"),
        }
    }
}

/// A multimodal captioner. Implementations must be usable from several
/// threads at once.
pub trait CaptionClient: Send + Sync {
    fn id(&self) -> &str;
    fn caption(&self, request: &CaptionRequest) -> Result<String, ClientError>;
}

fn sha_of(request: &CaptionRequest) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(request.composite.width().to_le_bytes());
    h.update(request.composite.height().to_le_bytes());
    h.update(request.composite.as_raw());
    h.update(request.prompt_template.as_bytes());
    h.finalize().into()
}

const STUB_SUBJECTS: [&str; 4] = ["The person", "The man", "The woman", "The athlete"];
const STUB_ACTIONS: [&str; 8] = [
    "raises the left arm above the head",
    "lowers both arms to the sides",
    "steps forward with the right foot",
    "turns slightly toward the camera",
    "bends down and reaches toward the floor",
    "lifts the right arm out to the side",
    "crouches and shifts weight onto one leg",
    "stretches both arms wide open",
];
const STUB_ENDINGS: [&str; 4] =
    [" while keeping the feet planted.", " and glances downward.", " in a smooth motion.", " as the torso leans back."];

/// Offline captioner: a fixed phrase chosen by hashing the composite and
/// prompt. Its phrase bank averages 68.75 characters.
#[derive(Debug, Clone, Default)]
pub struct StubCaptioner;

impl CaptionClient for StubCaptioner {
    fn id(&self) -> &str {
        "stub-v1"
    }

    fn caption(&self, request: &CaptionRequest) -> Result<String, ClientError> {
        let d = sha_of(request);
        Ok(format!(
            "{} {}{}",
            STUB_SUBJECTS[d[0] as usize % STUB_SUBJECTS.len()],
            STUB_ACTIONS[d[1] as usize % STUB_ACTIONS.len()],
            STUB_ENDINGS[d[2] as usize % STUB_ENDINGS.len()]
        ))
    }
}

pub fn png_base64(image: &RgbImage) -> String {
    use base64::Engine;
    let mut bytes = Vec::new();
    image
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[cfg(feature = "http")]
#[derive(Serialize)]
struct WireExample {
    image: String,
    caption: String,
}

#[cfg(feature = "http")]
#[derive(Serialize)]
struct WireRequest {
    image: String,
    prompt: String,
    fewshot: Vec<WireExample>,
}

#[cfg(feature = "http")]
#[derive(Deserialize)]
struct WireResponse {
    caption: String,
}

/// JSON-over-HTTP captioner.
///
/// `POST {endpoint}` with `{"image": <base64 PNG>, "prompt": ..., "fewshot":
/// [{"image", "caption"}]}` and `Authorization: Bearer <key>`; expects
/// `{"caption": "..."}`.
#[cfg(feature = "http")]
pub struct HttpCaptioner {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpCaptioner {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { endpoint: endpoint.into(), api_key, agent }
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env(timeout: Duration) -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty())?;
        Some(Self::new(endpoint, std::env::var(API_KEY_ENV).ok(), timeout))
    }
}

#[cfg(feature = "http")]
impl CaptionClient for HttpCaptioner {
    fn id(&self) -> &str {
        &self.endpoint
    }

    fn caption(&self, request: &CaptionRequest) -> Result<String, ClientError> {
        let body = WireRequest {
            image: png_base64(&request.composite),
            prompt: request.prompt_template.clone(),
            fewshot: request
                .fewshot
                .iter()
                .map(|(img, cap)| WireExample { image: png_base64(img), caption: cap.clone() })
                .collect(),
        };
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let payload = serde_json::to_vec(&body).map_err(|e| ClientError::Fatal(e.to_string()))?;
        let mut resp = req.send(&payload[..]).map_err(|e| ClientError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| ClientError::Transient(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str::<WireResponse>(&text)
                .map(|r| r.caption)
                .map_err(|e| ClientError::Fatal(format!("bad response body: {e}"))),
            408 | 429 | 500..=599 => Err(ClientError::Transient(format!("HTTP {status}"))),
            _ => Err(ClientError::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay_ms: 500, max_delay_ms: 8000 }
    }
}

impl RetryPolicy {
    /// Delay before retry `n` (1-based): `base * 2^(n-1)`, capped.
    pub fn delay(&self, n: usize) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << (n - 1).min(32));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn request_caption(
    pair_id: &str,
    request: &CaptionRequest,
    client: &dyn CaptionClient,
    policy: &RetryPolicy,
) -> Result<CaptionRecord, CaptionError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match client.caption(request) {
            Ok(text) => {
                return Ok(CaptionRecord {
                    pair_id: pair_id.to_string(),
                    caption: validate_caption(&text)?,
                    captioner_id: client.id().to_string(),
                    created_at: now_rfc3339(),
                })
            }
            Err(ClientError::Transient(msg)) if attempt <= policy.max_retries => {
                log::warn!("{pair_id}: attempt {attempt} failed ({msg}), retrying");
                std::thread::sleep(policy.delay(attempt));
            }
            Err(e) => return Err(CaptionError::Unavailable { attempts: attempt, last: e.to_string() }),
        }
    }
}

/// Captions every record, keeping at most `in_flight` requests open.
/// Results are returned in record order.
pub fn caption_records(
    records: &[ManifestRecord],
    root: &Path,
    client: &dyn CaptionClient,
    policy: &RetryPolicy,
    prompt_template: &str,
    in_flight: usize,
) -> Vec<Result<CaptionRecord, CaptionError>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CaptionRecord, CaptionError>>>> =
        Mutex::new((0..records.len()).map(|_| None).collect());
    let fewshot = placeholder_fewshot(DEFAULT_FEWSHOT_COUNT);
    std::thread::scope(|scope| {
        for _ in 0..in_flight.max(1).min(records.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(rec) = records.get(i) else { break };
                let out = load_composite(rec, root).and_then(|composite| {
                    let req = CaptionRequest {
                        composite,
                        fewshot: fewshot.clone(),
                        prompt_template: prompt_template.to_string(),
                    };
                    request_caption(&rec.pair_id, &req, client, policy)
                });
                results.lock().expect("result slots")[i] = Some(out);
            });
        }
    });
    results.into_inner().expect("result slots").into_iter().map(|r| r.expect("every record visited")).collect()
}

/// Reference frame on the left, target frame on the right.
pub fn load_composite(rec: &ManifestRecord, root: &Path) -> Result<RgbImage, CaptionError> {
    let open = |rel: &str| -> Result<RgbImage, CaptionError> {
        let path = root.join(rel);
        Ok(image::open(&path)
            .map_err(|source| DatasetError::Image { path: path.display().to_string(), source })?
            .to_rgb8())
    };
    Ok(compose_side_by_side(&open(&rec.reference_path)?, &open(&rec.target_path)?))
}

/// Writes captions into matching records. Order and count of records are
/// unchanged; on duplicate pair ids the last caption wins.
pub fn attach_captions(
    mut manifest: Vec<ManifestRecord>,
    captions: &[CaptionRecord],
) -> Result<Vec<ManifestRecord>, CaptionError> {
    let index: HashMap<&str, usize> = manifest.iter().enumerate().map(|(i, r)| (r.pair_id.as_str(), i)).collect();
    let mut resolved = Vec::with_capacity(captions.len());
    let mut seen = HashMap::new();
    for c in captions {
        let &i = index.get(c.pair_id.as_str()).ok_or_else(|| CaptionError::UnknownPairId(c.pair_id.clone()))?;
        if seen.insert(i, ()).is_some() {
            log::warn!("duplicate caption for {}; keeping the later one", c.pair_id);
        }
        resolved.push((i, c.caption.clone()));
    }
    for (i, caption) in resolved {
        manifest[i].caption = Some(caption);
    }
    Ok(manifest)
}

pub fn read_caption_records(path: &Path) -> Result<Vec<CaptionRecord>, CaptionError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CaptionError::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn write_caption_records(path: &Path, records: &[CaptionRecord]) -> Result<(), CaptionError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("caption records serialize");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
    f.write_all(&buf).map_err(|e| DatasetError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_examples() {
        let a = RgbImage::from_fn(64, 64, |x, y| Rgb([x as u8, y as u8, 1]));
        let b = RgbImage::from_pixel(64, 64, Rgb([9, 9, 9]));
        let c = compose_side_by_side(&a, &b);
        assert_eq!(c.dimensions(), (128, 64));
        assert!((0..64).all(|x| (0..64).all(|y| c.get_pixel(x, y) == a.get_pixel(x, y))));
        let big = RgbImage::from_pixel(128, 128, Rgb([5, 5, 5]));
        assert_eq!(compose_side_by_side(&a, &big).dimensions(), (128, 64));
        let wide = RgbImage::from_pixel(200, 100, Rgb([5, 5, 5]));
        assert_eq!(compose_side_by_side(&a, &wide).dimensions(), (64 + 128, 64));
    }

    #[test]
    fn validation_rules() {
        assert!(validate_caption("").is_err());
        assert!(validate_caption("   ").is_err());
        assert_eq!(validate_caption(" She waves. ").unwrap(), "She waves.");
        assert!(validate_caption("She waves. Then she sits.").is_err());
        assert!(validate_caption(&"a".repeat(301)).is_err());
        assert!(validate_caption(&"a".repeat(300)).is_ok());
        assert!(validate_caption("He lifts his arm to approx. shoulder height").is_err());
        assert!(validate_caption("He raises 2.5 arms.").is_ok());
    }

    #[test]
    fn stub_bank_mean_length() {
        let mut total = 0;
        let mut n = 0;
        for s in STUB_SUBJECTS {
            for a in STUB_ACTIONS {
                for e in STUB_ENDINGS {
                    let c = format!("{s} {a}{e}");
                    assert!(validate_caption(&c).is_ok());
                    total += c.len();
                    n += 1;
                }
            }
        }
        assert_eq!(total as f64 / n as f64, 68.75);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_retries: 5, base_delay_ms: 100, max_delay_ms: 350 };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(350));
    }
}
