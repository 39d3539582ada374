use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Re-annotates a piece of audio, addressed by its record id.
pub trait Captioner: Send + Sync {
    /// Stable identity used to key cached results.
    fn identity(&self) -> String;
    fn caption(&self, audio_id: &str) -> Result<String>;
}

/// Text–audio and text–text similarity in `[-1, 1]`.
pub trait Scorer: Send + Sync {
    fn identity(&self) -> String;
    fn text_audio(&self, text: &str, audio_id: &str) -> Result<f64>;
    fn text_text(&self, a: &str, b: &str) -> Result<f64>;
}

/// Completes a fusion prompt.
pub trait Fuser: Send + Sync {
    fn identity(&self) -> String;
    fn fuse(&self, prompt: &str) -> Result<String>;
}

fn check_similarity(s: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&s) {
        return Err(Error::Client(format!("similarity {s} outside [-1, 1]")));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Http,
    #[default]
    Mock,
}

/// Connection settings for one external client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    #[serde(default)]
    pub mode: ClientMode,
    /// Base URL in http mode.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Fixture file in mock mode.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            mode: ClientMode::Mock,
            endpoint: None,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            fixtures: None,
        }
    }
}

/// JSON-over-HTTP client shared by the three roles.
///
/// Requests are `POST`ed to `endpoint`; transport errors and non-2xx replies
/// are retried up to `retries` more times.
#[derive(Debug, Clone)]
pub struct HttpClient {
    endpoint: String,
    retries: u32,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(cfg: &ClientConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| Error::InvalidArgument("http client needs an endpoint".into()))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Ok(Self {
            endpoint,
            retries: cfg.retries,
            agent,
        })
    }

    fn post<T: DeserializeOwned>(&self, body: &Value) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                log::debug!("retrying {} (attempt {})", self.endpoint, attempt + 1);
            }
            match self.agent.post(&self.endpoint).send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<T>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = format!("bad response from {}: {e}", self.endpoint),
                },
                Err(e) => last = format!("{}: {e}", self.endpoint),
            }
        }
        Err(Error::Client(format!(
            "{last} (after {} attempts)",
            self.retries + 1
        )))
    }
}

#[derive(Deserialize)]
struct CaptionReply {
    caption: String,
}

#[derive(Deserialize)]
struct SimilarityReply {
    similarity: f64,
}

#[derive(Deserialize)]
struct TextReply {
    text: String,
}

impl Captioner for HttpClient {
    fn identity(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn caption(&self, audio_id: &str) -> Result<String> {
        Ok(self
            .post::<CaptionReply>(&json!({ "id": audio_id }))?
            .caption)
    }
}

impl Scorer for HttpClient {
    fn identity(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn text_audio(&self, text: &str, audio_id: &str) -> Result<f64> {
        let r: SimilarityReply = self.post(&json!({ "text": text, "audio_id": audio_id }))?;
        check_similarity(r.similarity)
    }

    fn text_text(&self, a: &str, b: &str) -> Result<f64> {
        let r: SimilarityReply = self.post(&json!({ "text_a": a, "text_b": b }))?;
        check_similarity(r.similarity)
    }
}

impl Fuser for HttpClient {
    fn identity(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn fuse(&self, prompt: &str) -> Result<String> {
        Ok(self.post::<TextReply>(&json!({ "prompt": prompt }))?.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextAudioEntry {
    pub text: String,
    pub audio_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextTextEntry {
    pub text_a: String,
    pub text_b: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionEntry {
    pub prompt: String,
    pub text: String,
}

/// Canned replies for offline runs. Ids listed in `captioner_failures`
/// make the captioner fail, to exercise per-record error handling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixtures {
    #[serde(default)]
    pub captions: HashMap<String, String>,
    #[serde(default)]
    pub captioner_failures: Vec<String>,
    #[serde(default)]
    pub text_audio: Vec<TextAudioEntry>,
    #[serde(default)]
    pub text_text: Vec<TextTextEntry>,
    #[serde(default)]
    pub fusions: Vec<FusionEntry>,
}

impl Fixtures {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Serves every role from a [`Fixtures`] table; unmapped inputs are errors.
#[derive(Debug, Clone)]
pub struct MockClient {
    name: String,
    fixtures: Fixtures,
}

impl MockClient {
    pub fn new(name: impl Into<String>, fixtures: Fixtures) -> Self {
        Self {
            name: name.into(),
            fixtures,
        }
    }

    pub fn from_config(name: &str, cfg: &ClientConfig) -> Result<Self> {
        let path = cfg
            .fixtures
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("mock {name} needs a fixtures file")))?;
        Ok(Self::new(
            format!("mock:{name}:{}", path.display()),
            Fixtures::load(path)?,
        ))
    }
}

impl Captioner for MockClient {
    fn identity(&self) -> String {
        self.name.clone()
    }

    fn caption(&self, audio_id: &str) -> Result<String> {
        if self
            .fixtures
            .captioner_failures
            .iter()
            .any(|f| f == audio_id)
        {
            return Err(Error::Client(format!(
                "captioner unavailable for `{audio_id}`"
            )));
        }
        self.fixtures
            .captions
            .get(audio_id)
            .cloned()
            .ok_or_else(|| Error::Client(format!("no caption fixture for `{audio_id}`")))
    }
}

impl Scorer for MockClient {
    fn identity(&self) -> String {
        self.name.clone()
    }

    fn text_audio(&self, text: &str, audio_id: &str) -> Result<f64> {
        let e = self
            .fixtures
            .text_audio
            .iter()
            .find(|e| e.text == text && e.audio_id == audio_id)
            .ok_or_else(|| {
                Error::Client(format!(
                    "no text-audio fixture for ({text:?}, `{audio_id}`)"
                ))
            })?;
        check_similarity(e.similarity)
    }

    fn text_text(&self, a: &str, b: &str) -> Result<f64> {
        let e = self
            .fixtures
            .text_text
            .iter()
            .find(|e| e.text_a == a && e.text_b == b)
            .ok_or_else(|| Error::Client(format!("no text-text fixture for ({a:?}, {b:?})")))?;
        check_similarity(e.similarity)
    }
}

impl Fuser for MockClient {
    fn identity(&self) -> String {
        self.name.clone()
    }

    fn fuse(&self, prompt: &str) -> Result<String> {
        self.fixtures
            .fusions
            .iter()
            .find(|e| e.prompt == prompt)
            .map(|e| e.text.clone())
            .ok_or_else(|| Error::Client(format!("no fusion fixture for prompt {prompt:?}")))
    }
}

/// On-disk result cache keyed by `sha256(client identity, request)`.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn path(&self, identity: &str, request: &Value) -> PathBuf {
        let mut h = Sha256::new();
        h.update(identity.as_bytes());
        h.update([0u8]);
        h.update(request.to_string().as_bytes());
        self.dir.join(format!("{}.json", hex::encode(h.finalize())))
    }

    fn get<T: DeserializeOwned>(&self, identity: &str, request: &Value) -> Option<T> {
        let text = fs::read_to_string(self.path(identity, request)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn put<T: Serialize>(&self, identity: &str, request: &Value, value: &T) -> Result<()> {
        let path = self.path(identity, request);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(value)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn through<T, F>(&self, identity: &str, request: Value, call: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        if let Some(v) = self.get(identity, &request) {
            return Ok(v);
        }
        let v = call()?;
        self.put(identity, &request, &v)?;
        Ok(v)
    }
}

/// Wraps a client so successful replies are served from a [`DiskCache`].
pub struct Cached<C> {
    inner: C,
    cache: DiskCache,
}

impl<C> Cached<C> {
    pub fn new(inner: C, cache: DiskCache) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: Captioner> Captioner for Cached<C> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn caption(&self, audio_id: &str) -> Result<String> {
        let req = json!({ "op": "caption", "id": audio_id });
        self.cache
            .through(&self.inner.identity(), req, || self.inner.caption(audio_id))
    }
}

impl<C: Scorer> Scorer for Cached<C> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn text_audio(&self, text: &str, audio_id: &str) -> Result<f64> {
        let req = json!({ "op": "text_audio", "text": text, "audio_id": audio_id });
        self.cache.through(&self.inner.identity(), req, || {
            self.inner.text_audio(text, audio_id)
        })
    }

    fn text_text(&self, a: &str, b: &str) -> Result<f64> {
        let req = json!({ "op": "text_text", "text_a": a, "text_b": b });
        self.cache
            .through(&self.inner.identity(), req, || self.inner.text_text(a, b))
    }
}

impl<C: Fuser> Fuser for Cached<C> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn fuse(&self, prompt: &str) -> Result<String> {
        let req = json!({ "op": "fuse", "prompt": prompt });
        self.cache
            .through(&self.inner.identity(), req, || self.inner.fuse(prompt))
    }
}

/// Applies `f` to every item with at most `limit` calls in flight and
/// returns the results in input order.
pub fn bounded_map<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
