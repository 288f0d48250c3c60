//! Client contract for scoring items with an external vision-language model,
//! with deterministic mock clients and a client backed by the local scorer.
//!
//! Requests and responses are plain JSON documents; see `docs/vlm_protocol.md`.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::codec::{parse_score_output, ParseMode};
use crate::curation::{label_to_mos, mos_to_label, DatasetRecord};
use crate::error::{Error, Result};
use crate::eval::ScoreVector;
use crate::rng::fnv1a;
use crate::scorer::{DecodeFormat, ScorerModel};
use crate::synth::{read_jsonl, write_jsonl};

pub const MIN_NEW_TOKENS: usize = 2;
pub const DEFAULT_NEW_TOKENS: usize = 4;

/// Decoding parameters. Temperature is always 0: there is no way to set it,
/// and a serialized request with any other temperature is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DecodingWire", into = "DecodingWire")]
pub struct Decoding {
    max_new_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct DecodingWire {
    temperature: f64,
    max_new_tokens: usize,
}

impl TryFrom<DecodingWire> for Decoding {
    type Error = Error;

    fn try_from(w: DecodingWire) -> Result<Self> {
        if w.temperature != 0.0 {
            return Err(Error::invalid(format!(
                "temperature must be 0, got {}",
                w.temperature
            )));
        }
        Decoding::new(w.max_new_tokens)
    }
}

impl From<Decoding> for DecodingWire {
    fn from(d: Decoding) -> Self {
        DecodingWire {
            temperature: 0.0,
            max_new_tokens: d.max_new_tokens,
        }
    }
}

impl Decoding {
    pub const TEMPERATURE: f64 = 0.0;

    pub fn new(max_new_tokens: usize) -> Result<Self> {
        if max_new_tokens < MIN_NEW_TOKENS {
            return Err(Error::invalid(format!(
                "max_new_tokens {max_new_tokens} is below {MIN_NEW_TOKENS}"
            )));
        }
        Ok(Self { max_new_tokens })
    }

    pub fn temperature(&self) -> f64 {
        Self::TEMPERATURE
    }

    pub fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            max_new_tokens: DEFAULT_NEW_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Media {
    /// Inline frame feature vectors.
    Features(Vec<Vec<f64>>),
    /// Paths or URLs of frame images.
    Paths(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub item_id: String,
    pub rendered_prompt: String,
    pub media: Media,
    pub decoding: Decoding,
}

impl InferenceRequest {
    pub fn for_record(record: &DatasetRecord) -> Self {
        Self {
            item_id: record.item_id.clone(),
            rendered_prompt: record.rendered_prompt.clone(),
            media: Media::Features(record.sampled_features.clone()),
            decoding: Decoding::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The reply was not a score.
    Parse,
    /// The service could not be reached after every retry.
    Transport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Label(u8),
    Failure { kind: FailureKind, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub item_id: String,
    /// Reply text exactly as received; empty after a transport failure.
    pub raw_text: String,
    pub outcome: Outcome,
}

impl InferenceResult {
    pub fn label(&self) -> Option<u8> {
        match self.outcome {
            Outcome::Label(l) => Some(l),
            Outcome::Failure { .. } => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.label().is_none()
    }
}

/// A model service. Implementations are shared across worker threads.
pub trait VlmClient: Send + Sync {
    /// Sends one request and returns the generated text. Connection
    /// problems are reported as [`Error::Transport`]; only those are retried.
    fn complete(&self, request: &InferenceRequest) -> Result<String>;
}

impl<C: VlmClient + ?Sized> VlmClient for &C {
    fn complete(&self, request: &InferenceRequest) -> Result<String> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: usize,
    /// Wait before the second attempt; doubled for each later one.
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Same attempt count without waiting; for tests and mocks.
    pub fn immediate() -> Self {
        Self {
            initial_backoff: Duration::ZERO,
            ..Self::default()
        }
    }
}

/// Scores one record. Transport errors are retried per `policy` and
/// returned once attempts run out; unparseable replies become failure
/// records.
pub fn score_item(
    client: &dyn VlmClient,
    record: &DatasetRecord,
    policy: &RetryPolicy,
) -> Result<InferenceResult> {
    let request = InferenceRequest::for_record(record);
    let mut backoff = policy.initial_backoff;
    let mut attempt = 0;
    let text = loop {
        attempt += 1;
        match client.complete(&request) {
            Ok(t) => break t,
            Err(Error::Transport(msg)) if attempt < policy.attempts.max(1) => {
                log::warn!("{}: attempt {attempt} failed: {msg}", record.item_id);
                thread::sleep(backoff);
                backoff *= 2;
            }
            Err(e) => return Err(e),
        }
    };
    let outcome = match parse_score_output(&text, ParseMode::Strict) {
        Ok(l) => Outcome::Label(l),
        Err(e) => Outcome::Failure {
            kind: FailureKind::Parse,
            message: e.to_string(),
        },
    };
    Ok(InferenceResult {
        item_id: record.item_id.clone(),
        raw_text: text,
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    /// MOS-scale scores of the successful items, ordered by item id.
    pub scores: ScoreVector,
    /// Every result, ordered by item id.
    pub results: Vec<InferenceResult>,
}

impl BatchOutput {
    pub fn failures(&self) -> impl Iterator<Item = &InferenceResult> {
        self.results.iter().filter(|r| r.is_failure())
    }

    pub fn failure_count(&self) -> usize {
        self.failures().count()
    }

    pub fn write_failures(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.failures().cloned().collect::<Vec<_>>())
    }
}

/// Scores every record with at most `concurrency` requests in flight. The
/// output depends only on the records and the client's replies, never on
/// completion order. Fails when more than half of the items fail.
pub fn batch_score(
    client: &dyn VlmClient,
    records: &[DatasetRecord],
    concurrency: usize,
    policy: &RetryPolicy,
) -> Result<BatchOutput> {
    if concurrency == 0 {
        return Err(Error::invalid("concurrency limit must be at least 1"));
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<InferenceResult>>> = Mutex::new(vec![None; records.len()]);
    thread::scope(|s| {
        for _ in 0..concurrency.min(records.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(record) = records.get(i) else { break };
                let result =
                    score_item(client, record, policy).unwrap_or_else(|e| InferenceResult {
                        item_id: record.item_id.clone(),
                        raw_text: String::new(),
                        outcome: Outcome::Failure {
                            kind: FailureKind::Transport,
                            message: e.to_string(),
                        },
                    });
                slots
                    .lock()
                    .expect("no worker panics while holding the lock")[i] = Some(result);
            });
        }
    });
    let mut results: Vec<InferenceResult> = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every index was scored"))
        .collect();
    results.sort_by(|a, b| a.item_id.cmp(&b.item_id));

    let failed = results.iter().filter(|r| r.is_failure()).count();
    if 2 * failed > results.len() {
        return Err(Error::TooManyFailures {
            failed,
            total: results.len(),
        });
    }
    let scores = ScoreVector::from_pairs(
        results
            .iter()
            .filter_map(|r| r.label().map(|l| (r.item_id.clone(), l)))
            .map(|(id, l)| label_to_mos(l).map(|m| (id, m)))
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok(BatchOutput { scores, results })
}

/// Replies with the same text to everything.
#[derive(Debug, Clone)]
pub struct EchoClient(pub String);

impl VlmClient for EchoClient {
    fn complete(&self, _: &InferenceRequest) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Perfect predictor: replies with the true label of each item.
#[derive(Debug, Clone)]
pub struct OracleClient {
    mos: HashMap<String, f64>,
}

impl OracleClient {
    pub fn new(records: &[DatasetRecord]) -> Self {
        Self {
            mos: records.iter().map(|r| (r.item_id.clone(), r.mos)).collect(),
        }
    }
}

impl VlmClient for OracleClient {
    fn complete(&self, req: &InferenceRequest) -> Result<String> {
        let mos = self
            .mos
            .get(&req.item_id)
            .ok_or_else(|| Error::invalid(format!("oracle has no truth for {}", req.item_id)))?;
        Ok(mos_to_label(*mos)?.to_string())
    }
}

/// Replies with unparseable text for a fixed set of items and defers to the
/// inner client otherwise.
pub struct BadOutputClient<C> {
    pub inner: C,
    pub bad_items: HashSet<String>,
}

impl<C: VlmClient> VlmClient for BadOutputClient<C> {
    fn complete(&self, req: &InferenceRequest) -> Result<String> {
        if self.bad_items.contains(&req.item_id) {
            Ok("the score is unclear".into())
        } else {
            self.inner.complete(req)
        }
    }
}

/// Fails the first `failures_per_item` attempts for every item with a
/// transport error, then defers to the inner client.
pub struct FlakyClient<C> {
    inner: C,
    failures_per_item: usize,
    seen: Mutex<HashMap<String, usize>>,
}

impl<C> FlakyClient<C> {
    pub fn new(inner: C, failures_per_item: usize) -> Self {
        Self {
            inner,
            failures_per_item,
            seen: Mutex::new(HashMap::new()),
        }
    }

    pub fn attempts(&self, item_id: &str) -> usize {
        self.seen
            .lock()
            .expect("lock")
            .get(item_id)
            .copied()
            .unwrap_or(0)
    }
}

impl<C: VlmClient> VlmClient for FlakyClient<C> {
    fn complete(&self, req: &InferenceRequest) -> Result<String> {
        let n = {
            let mut seen = self.seen.lock().expect("lock");
            let c = seen.entry(req.item_id.clone()).or_insert(0);
            *c += 1;
            *c
        };
        if n <= self.failures_per_item {
            return Err(Error::Transport(format!("connection reset (attempt {n})")));
        }
        self.inner.complete(req)
    }
}

/// Sleeps an item-dependent time before deferring, scrambling the order in
/// which concurrent requests finish.
pub struct DelayClient<C> {
    pub inner: C,
    pub max_delay: Duration,
}

impl<C: VlmClient> VlmClient for DelayClient<C> {
    fn complete(&self, req: &InferenceRequest) -> Result<String> {
        let frac = (fnv1a(req.item_id.as_bytes()) % 1000) as f64 / 1000.0;
        thread::sleep(self.max_delay.mul_f64(frac));
        self.inner.complete(req)
    }
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub request: InferenceRequest,
    pub response: String,
}

/// Replays recorded exchanges, matched on item id and prompt text.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    replies: HashMap<(String, String), String>,
}

impl FixtureClient {
    pub fn new(entries: Vec<FixtureEntry>) -> Self {
        Self {
            replies: entries
                .into_iter()
                .map(|e| ((e.request.item_id, e.request.rendered_prompt), e.response))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(read_jsonl(path)?))
    }
}

impl VlmClient for FixtureClient {
    fn complete(&self, req: &InferenceRequest) -> Result<String> {
        self.replies
            .get(&(req.item_id.clone(), req.rendered_prompt.clone()))
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no recorded reply for {}", req.item_id)))
    }
}

/// Wraps a client and keeps every exchange so it can be saved as a fixture.
pub struct RecordingClient<C> {
    pub inner: C,
    log: Mutex<Vec<FixtureEntry>>,
}

impl<C> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Recorded exchanges ordered by item id.
    pub fn entries(&self) -> Vec<FixtureEntry> {
        let mut e = self.log.lock().expect("lock").clone();
        e.sort_by(|a, b| a.request.item_id.cmp(&b.request.item_id));
        e
    }
}

impl<C: VlmClient> VlmClient for RecordingClient<C> {
    fn complete(&self, req: &InferenceRequest) -> Result<String> {
        let reply = self.inner.complete(req)?;
        self.log.lock().expect("lock").push(FixtureEntry {
            request: req.clone(),
            response: reply.clone(),
        });
        Ok(reply)
    }
}

/// Serves the local scorer behind the client contract; the prompt text is
/// represented by the model's task slot.
pub struct ScorerClient {
    pub model: ScorerModel,
}

impl VlmClient for ScorerClient {
    fn complete(&self, req: &InferenceRequest) -> Result<String> {
        let Media::Features(f) = &req.media else {
            return Err(Error::invalid("the local scorer needs inline features"));
        };
        let d = self.model.greedy_decode(f, DecodeFormat::Integer)?;
        Ok(d.label.to_string())
    }
}
