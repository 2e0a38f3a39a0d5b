//! LLM pseudo-labeling of transcripts into positive / negative / neutral.
//!
//! Requests go through an [`AnnotationBackend`]; responses are cached by
//! `(backend, sha256(transcript))` in an append-only JSONL file so repeated
//! runs and duplicate transcripts never pay for a second call.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dataset, Sentiment};
use crate::error::{Error, Result};

pub const PROMPT_TEMPLATE: &str = "You are a sentiment classification bot. Given the [sentence], classify as positive, negative or neutral sentiment. Please give the sentiment and no extra text as output.";

const PLACEHOLDER: &str = "[sentence]";

/// Fills the template's placeholder with `sentence`. Only the template's own
/// placeholder is replaced; the inserted text is never rescanned.
pub fn build_prompt(sentence: &str) -> String {
    PROMPT_TEMPLATE.replacen(PLACEHOLDER, sentence, 1)
}

fn prompt_sentence(prompt: &str) -> Option<&str> {
    let (head, tail) = PROMPT_TEMPLATE.split_once(PLACEHOLDER)?;
    prompt.strip_prefix(head)?.strip_suffix(tail)
}

/// Maps a free-form reply to a sentiment. The reply must mention exactly one
/// of the three class words (any case, any surrounding punctuation).
pub fn parse_response(raw: &str) -> Result<Sentiment> {
    let mut found: Option<Sentiment> = None;
    for word in raw.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()) {
        let Ok(s) = word.parse::<Sentiment>() else { continue };
        match found {
            Some(prev) if prev != s => return Err(Error::UnparseableResponse { raw: raw.to_string() }),
            _ => found = Some(s),
        }
    }
    found.ok_or_else(|| Error::UnparseableResponse { raw: raw.to_string() })
}

pub fn transcript_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub trait AnnotationBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Sends one prompt and returns the raw completion text.
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub const POSITIVE_WORDS: &[&str] = &[
    "great", "happy", "love", "wonderful", "excellent", "glad", "amazing", "good", "fantastic", "delighted",
    "enjoy", "awesome", "pleased", "lovely", "thrilled", "joy",
];

pub const NEGATIVE_WORDS: &[&str] = &[
    "terrible", "sad", "hate", "awful", "angry", "horrible", "bad", "miserable", "furious", "upset", "worst",
    "annoyed", "disgusting", "painful", "hurt", "lonely",
];

/// Lexicon vote: more positive than negative words is positive, the reverse
/// negative, anything else neutral.
pub fn lexicon_sentiment(text: &str) -> Sentiment {
    let (mut pos, mut neg) = (0usize, 0usize);
    for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let w = w.to_ascii_lowercase();
        if POSITIVE_WORDS.contains(&w.as_str()) {
            pos += 1;
        } else if NEGATIVE_WORDS.contains(&w.as_str()) {
            neg += 1;
        }
    }
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Sentiment::Positive,
        std::cmp::Ordering::Less => Sentiment::Negative,
        std::cmp::Ordering::Equal => Sentiment::Neutral,
    }
}

#[derive(Debug)]
enum MockMode {
    Lexicon { agreement: f64 },
    Constant(String),
}

/// Offline backend: a deterministic lexicon annotator, optionally degraded to
/// a target agreement rate, or a fixed reply for failure-path testing.
#[derive(Debug)]
pub struct MockBackend {
    name: String,
    mode: MockMode,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::with_agreement("mock", 1.0)
    }

    /// Replies agree with the lexicon annotator on roughly `agreement` of
    /// distinct transcripts; the rest are rotated to another class.
    pub fn with_agreement(name: impl Into<String>, agreement: f64) -> Self {
        Self { name: name.into(), mode: MockMode::Lexicon { agreement }, calls: AtomicUsize::new(0) }
    }

    pub fn constant(name: impl Into<String>, reply: impl Into<String>) -> Self {
        Self { name: name.into(), mode: MockMode::Constant(reply.into()), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl AnnotationBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.mode {
            MockMode::Constant(reply) => Ok(reply.clone()),
            MockMode::Lexicon { agreement } => {
                let sentence = prompt_sentence(prompt).unwrap_or(prompt);
                let truth = lexicon_sentiment(sentence);
                let digest = Sha256::digest(format!("{}\u{0}{sentence}", self.name).as_bytes());
                let u = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64;
                let label = if u < *agreement {
                    truth
                } else {
                    let shift = 1 + (digest[8] as usize & 1);
                    Sentiment::ALL[(truth.class_id() + shift) % 3]
                };
                Ok(format!("{}.", capitalize(label.as_str())))
            }
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// The three annotator families compared in the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendProfile {
    GptTurbo,
    Llama3,
    Mixtral,
}

impl BackendProfile {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "gpt-3.5-turbo" | "gpt" => Some(Self::GptTurbo),
            "llama-3" | "llama" => Some(Self::Llama3),
            "mixtral" => Some(Self::Mixtral),
            _ => None,
        }
    }

    pub fn model_id(self) -> &'static str {
        match self {
            BackendProfile::GptTurbo => "gpt-3.5-turbo",
            BackendProfile::Llama3 => "meta-llama/Llama-3-8b-chat-hf",
            BackendProfile::Mixtral => "mistralai/Mixtral-8x7B-Instruct-v0.1",
        }
    }
}

/// OpenAI-compatible chat-completions client with temperature 0.
#[cfg(feature = "http")]
pub struct HttpBackend {
    name: String,
    endpoint: String,
    model: String,
    api_key: String,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpBackend {
    pub fn new(profile: BackendProfile, endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            name: profile.model_id().to_string(),
            endpoint: endpoint.into(),
            model: profile.model_id().to_string(),
            api_key: api_key.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build(),
        }
    }

    /// Reads the key from `key_var` and the endpoint from `LLM_API_BASE`
    /// (default: the OpenAI chat-completions URL).
    pub fn from_env(profile: BackendProfile, key_var: &str) -> Result<Self> {
        let key = std::env::var(key_var)
            .map_err(|_| Error::Config(format!("environment variable {key_var} is not set")))?;
        let base = std::env::var("LLM_API_BASE").unwrap_or_else(|_| "https://api.openai.com/v1".into());
        Ok(Self::new(profile, format!("{}/chat/completions", base.trim_end_matches('/')), key))
    }
}

#[cfg(feature = "http")]
impl AnnotationBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp: serde_json::Value = self
            .agent
            .post(&self.endpoint)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| Error::Backend(e.to_string()))?
            .into_json()
            .map_err(|e| Error::Backend(e.to_string()))?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Backend(format!("no completion text in response: {resp}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    backend: String,
    hash: String,
    response: String,
}

/// Append-only response cache. File-backed caches persist every insert
/// immediately.
#[derive(Debug, Default)]
pub struct AnnotationCache {
    entries: HashMap<(String, String), String>,
    file: Option<(PathBuf, File)>,
}

impl AnnotationCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line)
                    .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
                entries.entry((entry.backend, entry.hash)).or_insert(entry.response);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { entries, file: Some((path.to_path_buf(), file)) })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, backend: &str, hash: &str) -> Option<&str> {
        self.entries.get(&(backend.to_string(), hash.to_string())).map(String::as_str)
    }

    /// Existing entries are never overwritten.
    pub fn insert(&mut self, backend: &str, hash: &str, response: &str) -> Result<()> {
        let key = (backend.to_string(), hash.to_string());
        if self.entries.contains_key(&key) {
            return Ok(());
        }
        if let Some((path, f)) = &mut self.file {
            let line = serde_json::to_string(&CacheLine {
                backend: backend.into(),
                hash: hash.into(),
                response: response.into(),
            })?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(path.clone(), e))?;
        }
        self.entries.insert(key, response.to_string());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    /// Extra attempts after the first one, for unparseable replies and
    /// transport errors alike.
    pub max_retries: usize,
    /// Upper bound on concurrent backend requests.
    pub max_in_flight: usize,
    /// Base delay before retrying a transport error; doubles per attempt.
    pub backoff: Duration,
    /// Minimum spacing between consecutive request starts.
    pub min_interval: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2, max_in_flight: 4, backoff: Duration::from_millis(500), min_interval: Duration::ZERO }
    }
}

impl RetryPolicy {
    /// No waiting at all; for offline backends.
    pub fn immediate() -> Self {
        Self { backoff: Duration::ZERO, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub text: String,
    pub sentiment: Sentiment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeledCorpus {
    pub backend: String,
    pub records: Vec<PseudoLabel>,
    pub failed_ids: Vec<String>,
}

impl PseudoLabeledCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `{"id","text","sentiment"}` per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, backend: &str) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?,
            );
        }
        Ok(Self { backend: backend.to_string(), records, failed_ids: Vec::new() })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TranscriptLine {
    id: String,
    text: String,
}

/// Reads `{"id","text"}` lines (extra fields ignored).
pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TranscriptLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push((t.id, t.text));
    }
    Ok(out)
}

pub fn write_transcripts(path: &Path, transcripts: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (id, text) in transcripts {
        out.push_str(&serde_json::to_string(&TranscriptLine { id: id.clone(), text: text.clone() })?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Every utterance transcript of a dataset, keyed by utterance id.
pub fn dataset_transcripts(dataset: &Dataset) -> Vec<(String, String)> {
    dataset.utterances().map(|u| (u.utterance_id.clone(), u.transcript.clone())).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AnnotateStats {
    pub backend_calls: usize,
    pub cache_hits: usize,
}

struct Throttle {
    next_start: Mutex<Instant>,
    interval: Duration,
}

impl Throttle {
    fn wait(&self) {
        if self.interval.is_zero() {
            return;
        }
        let start = {
            let mut next = self.next_start.lock().expect("throttle lock");
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.interval;
            start
        };
        let now = Instant::now();
        if start > now {
            std::thread::sleep(start - now);
        }
    }
}

pub fn annotate(
    transcripts: &[(String, String)],
    client: &dyn AnnotationBackend,
    cache: &mut AnnotationCache,
    policy: &RetryPolicy,
) -> Result<PseudoLabeledCorpus> {
    annotate_with_stats(transcripts, client, cache, policy).map(|(c, _)| c)
}

/// Labels every transcript, in input order. Replies that stay unparseable
/// after `max_retries` extra attempts, and transport failures, land in
/// `failed_ids`; only a cache write failure aborts the run.
pub fn annotate_with_stats(
    transcripts: &[(String, String)],
    client: &dyn AnnotationBackend,
    cache: &mut AnnotationCache,
    policy: &RetryPolicy,
) -> Result<(PseudoLabeledCorpus, AnnotateStats)> {
    let backend = client.name().to_string();
    let hashes: Vec<String> = transcripts.iter().map(|(_, t)| transcript_hash(t)).collect();

    let mut resolved: HashMap<String, Option<Sentiment>> = HashMap::new();
    let mut pending: Vec<(String, &str)> = Vec::new();
    let mut queued: HashSet<&str> = HashSet::new();
    let mut stats = AnnotateStats::default();
    for ((_, text), hash) in transcripts.iter().zip(&hashes) {
        if resolved.contains_key(hash) || queued.contains(hash.as_str()) {
            continue;
        }
        match cache.get(&backend, hash).map(parse_response) {
            Some(Ok(s)) => {
                stats.cache_hits += 1;
                resolved.insert(hash.clone(), Some(s));
            }
            _ => {
                queued.insert(hash);
                pending.push((hash.clone(), text.as_str()));
            }
        }
    }

    let calls = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let outcomes: Vec<Mutex<Option<(Sentiment, String)>>> = pending.iter().map(|_| Mutex::new(None)).collect();
    let throttle = Throttle { next_start: Mutex::new(Instant::now()), interval: policy.min_interval };
    let workers = policy.max_in_flight.max(1).min(pending.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, text)) = pending.get(i) else { break };
                let prompt = build_prompt(text);
                for attempt in 0..=policy.max_retries {
                    throttle.wait();
                    calls.fetch_add(1, Ordering::SeqCst);
                    match client.complete(&prompt) {
                        Ok(raw) => {
                            if let Ok(s) = parse_response(&raw) {
                                *outcomes[i].lock().expect("outcome lock") = Some((s, raw));
                                break;
                            }
                            log::debug!("unparseable reply on attempt {attempt}: {raw:?}");
                        }
                        Err(e) => {
                            log::warn!("backend {backend} failed on attempt {attempt}: {e}");
                            if !policy.backoff.is_zero() && attempt < policy.max_retries {
                                std::thread::sleep(policy.backoff * 2u32.saturating_pow(attempt as u32));
                            }
                        }
                    }
                }
            });
        }
    });
    stats.backend_calls = calls.load(Ordering::SeqCst);

    for ((hash, _), outcome) in pending.iter().zip(outcomes) {
        let outcome = outcome.into_inner().expect("outcome lock");
        if let Some((_, raw)) = &outcome {
            cache.insert(&backend, hash, raw)?;
        }
        resolved.insert(hash.clone(), outcome.map(|(s, _)| s));
    }

    let mut corpus = PseudoLabeledCorpus { backend, records: Vec::new(), failed_ids: Vec::new() };
    for ((id, text), hash) in transcripts.iter().zip(&hashes) {
        match resolved[hash] {
            Some(sentiment) => corpus.records.push(PseudoLabel { id: id.clone(), text: text.clone(), sentiment }),
            None => corpus.failed_ids.push(id.clone()),
        }
    }
    Ok((corpus, stats))
}

/// Fraction of positions where the two label lists agree.
pub fn label_overlap(pred: &[Sentiment], oracle: &[Sentiment]) -> Result<f64> {
    if pred.len() != oracle.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: oracle.len() });
    }
    if pred.is_empty() {
        return Err(Error::Precondition("label overlap needs at least one label".into()));
    }
    Ok(pred.iter().zip(oracle).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Sentiment::*;

    #[test]
    fn prompt_golden() {
        assert_eq!(
            build_prompt("I hate this"),
            "You are a sentiment classification bot. Given the I hate this, classify as positive, negative or neutral sentiment. Please give the sentiment and no extra text as output."
        );
    }

    #[test]
    fn prompt_empty_and_nested_placeholder() {
        assert_eq!(build_prompt(""), PROMPT_TEMPLATE.replace("[sentence]", ""));
        let p = build_prompt("say [sentence] twice");
        assert!(p.contains("Given the say [sentence] twice, classify"));
        assert_eq!(prompt_sentence(&p), Some("say [sentence] twice"));
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_response("Negative.").unwrap(), Negative);
        assert_eq!(parse_response("  POSITIVE\n").unwrap(), Positive);
        assert!(matches!(parse_response("positive or negative"), Err(Error::UnparseableResponse { .. })));
        assert!(parse_response("maybe").is_err());
        assert!(parse_response("").is_err());
        assert_eq!(parse_response("Sentiment: neutral (neutral)").unwrap(), Neutral);
    }

    proptest! {
        #[test]
        fn parse_survives_case_and_decoration(
            class in 0usize..3,
            caps in prop::collection::vec(any::<bool>(), 8),
            pre in "[ \t\n.,:;!?\"'*()-]{0,6}",
            post in "[ \t\n.,:;!?\"'*()-]{0,6}",
        ) {
            let s = Sentiment::ALL[class];
            let word: String = s.as_str().chars().zip(caps.iter().cycle())
                .map(|(c, &up)| if up { c.to_ascii_uppercase() } else { c })
                .collect();
            prop_assert_eq!(parse_response(&format!("{pre}{word}{post}")).unwrap(), s);
        }
    }

    fn ts(n: usize) -> Vec<(String, String)> {
        let texts = ["what a great day", "this is awful", "the bus leaves at noon"];
        (0..n).map(|i| (format!("t{i}"), texts[i % 3].to_string())).collect()
    }

    #[test]
    fn one_call_per_transcript_then_cache() {
        let mock = MockBackend::new();
        let mut cache = AnnotationCache::in_memory();
        let first = annotate(&ts(3), &mock, &mut cache, &RetryPolicy::immediate()).unwrap();
        assert_eq!(mock.calls(), 3);
        assert_eq!(first.records.iter().map(|r| r.sentiment).collect::<Vec<_>>(), vec![Positive, Negative, Neutral]);
        let second = annotate(&ts(3), &mock, &mut cache, &RetryPolicy::immediate()).unwrap();
        assert_eq!(mock.calls(), 3);
        assert_eq!(first, second);
    }

    #[test]
    fn duplicate_transcripts_cost_one_call() {
        let mock = MockBackend::new();
        let mut cache = AnnotationCache::in_memory();
        let corpus = annotate(&ts(9), &mock, &mut cache, &RetryPolicy::immediate()).unwrap();
        assert_eq!(mock.calls(), 3);
        assert_eq!(corpus.records.len(), 9);
        assert_eq!(corpus.records[4].id, "t4");
    }

    #[test]
    fn unparseable_replies_are_retried_then_recorded() {
        let mock = MockBackend::constant("mock", "maybe");
        let mut cache = AnnotationCache::in_memory();
        let policy = RetryPolicy { max_retries: 2, ..RetryPolicy::immediate() };
        let corpus = annotate(&ts(3), &mock, &mut cache, &policy).unwrap();
        assert!(corpus.records.is_empty());
        assert_eq!(corpus.failed_ids, vec!["t0", "t1", "t2"]);
        assert_eq!(mock.calls(), 9);
        assert!(cache.is_empty());
    }

    struct Flaky {
        fails: AtomicUsize,
    }

    impl AnnotationBackend for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _prompt: &str) -> Result<String> {
            if self.fails.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err(Error::Backend("connection reset".into()))
            } else {
                self.fails.store(0, Ordering::SeqCst);
                Ok("neutral".into())
            }
        }
    }

    #[test]
    fn transport_errors_never_abort() {
        let flaky = Flaky { fails: AtomicUsize::new(1) };
        let mut cache = AnnotationCache::in_memory();
        let policy = RetryPolicy { max_in_flight: 1, ..RetryPolicy::immediate() };
        let corpus = annotate(&ts(1), &flaky, &mut cache, &policy).unwrap();
        assert_eq!(corpus.records.len(), 1);
    }

    #[test]
    fn file_cache_persists_between_runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mock = MockBackend::new();
        {
            let mut cache = AnnotationCache::open(&path).unwrap();
            annotate(&ts(3), &mock, &mut cache, &RetryPolicy::immediate()).unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().starts_with(r#"{"backend":"mock","hash":""#));
        let mut cache = AnnotationCache::open(&path).unwrap();
        annotate(&ts(3), &mock, &mut cache, &RetryPolicy::immediate()).unwrap();
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn overlap_hand_cases() {
        let same = vec![Positive; 10];
        assert_eq!(label_overlap(&same, &same).unwrap(), 1.0);
        let v = label_overlap(&[Positive, Negative, Neutral, Positive], &[Positive, Positive, Neutral, Negative]).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(label_overlap(&[Positive, Negative], &[Neutral, Neutral]).unwrap(), 0.0);
        assert!(label_overlap(&[Positive], &[Positive, Negative]).is_err());
    }

    proptest! {
        #[test]
        fn overlap_is_symmetric_and_flip_costs_one_nth(
            a in prop::collection::vec(0usize..3, 1..60),
            b_seed in prop::collection::vec(0usize..3, 60),
        ) {
            let a: Vec<Sentiment> = a.iter().map(|&i| Sentiment::ALL[i]).collect();
            let b: Vec<Sentiment> = b_seed[..a.len()].iter().map(|&i| Sentiment::ALL[i]).collect();
            let ab = label_overlap(&a, &b).unwrap();
            prop_assert_eq!(ab, label_overlap(&b, &a).unwrap());
            prop_assert_eq!(label_overlap(&a, &a).unwrap(), 1.0);
            if let Some(i) = (0..a.len()).find(|&i| a[i] == b[i]) {
                let mut flipped = a.clone();
                flipped[i] = Sentiment::ALL[(a[i].class_id() + 1) % 3];
                let after = label_overlap(&flipped, &b).unwrap();
                let n = a.len() as f64;
                prop_assert!((ab - after - 1.0 / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn agreement_knob_plants_disagreement() {
        let texts: Vec<(String, String)> = (0..400).map(|i| (format!("t{i}"), format!("sample {i} great"))).collect();
        let noisy = MockBackend::with_agreement("noisy", 0.5);
        let mut cache = AnnotationCache::in_memory();
        let corpus = annotate(&texts, &noisy, &mut cache, &RetryPolicy::immediate()).unwrap();
        let agree = corpus.records.iter().filter(|r| r.sentiment == Positive).count() as f64 / 400.0;
        assert!((agree - 0.5).abs() < 0.08, "agreement {agree}");
    }
}
