//! Text-modality classification through a chat-completion backend.
//!
//! A full normalized dialogue is classified depressed / not depressed with
//! a few-shot prompt: a fixed system instruction, four exemplar transcripts
//! (two per class) replayed as prior conversation turns, then the target
//! dialogue. The response format is forced through a function/tool schema
//! so the verdict is machine-parseable; malformed payloads are retried with
//! exponential backoff.
//!
//! Backends implement [`ChatBackend`]. [`StubBackend`] is a deterministic
//! offline implementation keyed on marker phrases, so the whole pipeline
//! runs hermetically; the HTTP implementation lives in the application
//! crate. Verdicts are cached content-addressed by (backend id, request
//! payload hash).

use crate::corpus::Label;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

/// System instruction given to the diagnosis model.
pub const DIAGNOSIS_PROMPT: &str = "Take on the role of an expert in psychiatric diagnosis \
using the DSM 5. Read the following transcript and determine if the patient has depression.";

/// Phrases the offline stub keys on; the synthetic corpus templates draw
/// from the same list so the text modality carries real signal offline.
pub const DEPRESSION_MARKERS: &[&str] = &[
    "feeling hopeless",
    "nothing interests me",
    "can't sleep",
    "feel empty",
    "no energy",
    "feel worthless",
    "stopped seeing my friends",
];

/// Number of few-shot exemplars (two per class).
pub const EXEMPLAR_COUNT: usize = 4;

const DIAGNOSIS_TOOL: &str = "submit_diagnosis";
const REPORT_TOOL: &str = "write_report";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("exemplar set must hold {EXEMPLAR_COUNT} transcripts, 2 per class; got {depressed} depressed / {not_depressed} not depressed")]
    UnbalancedExemplars { depressed: usize, not_depressed: usize },
    #[error("target dialogue is empty")]
    EmptyDialogue,
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("response stayed malformed after {retries} retries: {last}")]
    MalformedAfterRetries { retries: u32, last: String },
    #[error("cache io error on {path}: {source}")]
    CacheIo { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage { role: role.to_string(), content: content.into() }
    }
}

/// A schema-forced chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    /// Function/tool declaration the backend must answer through.
    pub schema: serde_json::Value,
    pub temperature: f64,
}

impl ChatRequest {
    /// Content hash of the canonical JSON serialization; the cache key.
    pub fn payload_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn tool_name(&self) -> Option<&str> {
        self.schema.get("name").and_then(|v| v.as_str())
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == "user").map(|m| m.content.as_str())
    }
}

fn diagnosis_schema() -> serde_json::Value {
    json!({
        "name": DIAGNOSIS_TOOL,
        "description": "Submit the binary depression diagnosis for the transcript.",
        "parameters": {
            "type": "object",
            "properties": {
                "diagnosis": { "type": "string", "enum": ["depressed", "not depressed"] }
            },
            "required": ["diagnosis"]
        }
    })
}

fn report_schema() -> serde_json::Value {
    json!({
        "name": REPORT_TOOL,
        "description": "Write the clinical report for the interview.",
        "parameters": {
            "type": "object",
            "properties": {
                "summary": { "type": "string" },
                "justification": { "type": "string" }
            },
            "required": ["summary", "justification"]
        }
    })
}

/// One few-shot exemplar: a rendered dialogue with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub interview_id: u32,
    pub dialogue: String,
    pub label: Label,
}

/// The four exemplars replayed before the target transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub exemplars: Vec<Exemplar>,
}

impl ExemplarSet {
    pub fn new(exemplars: Vec<Exemplar>) -> Result<Self, LlmError> {
        let depressed = exemplars.iter().filter(|e| e.label == Label::Depressed).count();
        let not_depressed = exemplars.len() - depressed;
        if depressed != EXEMPLAR_COUNT / 2 || not_depressed != EXEMPLAR_COUNT / 2 {
            return Err(LlmError::UnbalancedExemplars { depressed, not_depressed });
        }
        Ok(ExemplarSet { exemplars })
    }

    pub fn interview_ids(&self) -> Vec<u32> {
        self.exemplars.iter().map(|e| e.interview_id).collect()
    }
}

/// A fully assembled few-shot prompt for one target dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub interview_id: u32,
    pub system_instruction: String,
    pub exemplars: ExemplarSet,
    pub target_dialogue: String,
    pub output_schema: serde_json::Value,
}

/// Assembles the prompt: system instruction, exemplars as prior turns
/// (dialogue followed by a schema-conformant answer), target dialogue last.
pub fn build_prompt(
    interview_id: u32,
    dialogue: &str,
    exemplars: &ExemplarSet,
) -> Result<PromptBundle, LlmError> {
    if dialogue.trim().is_empty() {
        return Err(LlmError::EmptyDialogue);
    }
    // Re-validate balance; the set may have been constructed directly.
    let exemplars = ExemplarSet::new(exemplars.exemplars.clone())?;
    Ok(PromptBundle {
        interview_id,
        system_instruction: DIAGNOSIS_PROMPT.to_string(),
        exemplars,
        target_dialogue: dialogue.to_string(),
        output_schema: diagnosis_schema(),
    })
}

impl PromptBundle {
    pub fn to_request(&self) -> ChatRequest {
        let mut messages = vec![ChatMessage::new("system", &self.system_instruction)];
        for e in &self.exemplars.exemplars {
            messages.push(ChatMessage::new("user", &e.dialogue));
            let answer = json!({ "diagnosis": e.label.to_string() });
            messages.push(ChatMessage::new("assistant", answer.to_string()));
        }
        messages.push(ChatMessage::new("user", &self.target_dialogue));
        ChatRequest { messages, schema: self.output_schema.clone(), temperature: 0.0 }
    }

    pub fn payload_hash(&self) -> String {
        self.to_request().payload_hash()
    }
}

/// The text-modality decision with raw response provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmVerdict {
    pub interview_id: u32,
    pub diagnosis: Label,
    pub raw_response: String,
    pub backend_id: String,
    pub cached: bool,
    pub malformed_retries: u32,
}

/// A chat-completion backend able to answer schema-forced requests with a
/// raw JSON payload.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

/// Parses a schema-conformant diagnosis payload; anything else is rejected
/// so free-text answers never silently become verdicts.
pub fn parse_diagnosis(raw: &str) -> Option<Label> {
    let value: serde_json::Value = serde_json::from_str(raw).ok()?;
    match value.get("diagnosis")?.as_str()? {
        "depressed" => Some(Label::Depressed),
        "not depressed" => Some(Label::NotDepressed),
        _ => None,
    }
}

/// Deterministic offline backend: diagnosis is depressed iff the target
/// dialogue contains any configured marker phrase; reports are templated.
#[derive(Debug, Clone)]
pub struct StubBackend {
    pub markers: Vec<String>,
}

impl Default for StubBackend {
    fn default() -> Self {
        StubBackend { markers: DEPRESSION_MARKERS.iter().map(|s| s.to_string()).collect() }
    }
}

impl ChatBackend for StubBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let target = request.last_user_message().unwrap_or("").to_lowercase();
        match request.tool_name() {
            Some(REPORT_TOOL) => {
                let diagnosis = if target.contains("diagnosis: depressed") {
                    "depressed"
                } else {
                    "not depressed"
                };
                let lines = target.lines().filter(|l| l.contains(':')).count();
                Ok(json!({
                    "summary": format!(
                        "Structured screening of a {lines}-line clinical dialogue. \
                         The model classified the patient as {diagnosis}."
                    ),
                    "justification": format!(
                        "The {diagnosis} classification follows from the fused acoustic, \
                         facial-action, and language evidence; the transcript wording was \
                         weighted by the text branch."
                    ),
                })
                .to_string())
            }
            _ => {
                let hit = self.markers.iter().any(|m| target.contains(&m.to_lowercase()));
                let diagnosis = if hit { "depressed" } else { "not depressed" };
                Ok(json!({ "diagnosis": diagnosis }).to_string())
            }
        }
    }
}

/// File cache of raw responses keyed by (backend id, payload hash).
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    request_hash: String,
    backend_id: String,
    raw_response: String,
    diagnosis: Option<Label>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|source| LlmError::CacheIo { path: dir.clone(), source })?;
        Ok(ResponseCache { dir, write_lock: Mutex::new(()) })
    }

    fn entry_path(&self, backend_id: &str, hash: &str) -> PathBuf {
        self.dir.join(format!("{backend_id}-{hash}.json"))
    }

    fn get(&self, backend_id: &str, hash: &str) -> Option<CacheEntry> {
        let path = self.entry_path(backend_id, hash);
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn put(&self, entry: &CacheEntry) -> Result<(), LlmError> {
        let _guard = self.write_lock.lock().expect("cache lock");
        let path = self.entry_path(&entry.backend_id, &entry.request_hash);
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string_pretty(entry).expect("entry serializes");
        std::fs::write(&tmp, text)
            .map_err(|source| LlmError::CacheIo { path: tmp.clone(), source })?;
        std::fs::rename(&tmp, &path)
            .map_err(|source| LlmError::CacheIo { path, source })
    }
}

/// Classifier client: retries malformed or transiently failing calls with
/// exponential backoff and consults the response cache before the network.
pub struct LlmClient {
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    max_retries: u32,
    initial_backoff: Duration,
}

impl LlmClient {
    pub fn new(backend: Box<dyn ChatBackend>) -> Self {
        LlmClient {
            backend,
            cache: None,
            max_retries: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_backoff(mut self, initial: Duration) -> Self {
        self.initial_backoff = initial;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Classifies one prompt bundle. Cache hits skip the backend entirely.
    pub fn classify(&self, bundle: &PromptBundle) -> Result<LlmVerdict, LlmError> {
        let request = bundle.to_request();
        let hash = request.payload_hash();
        let backend_id = self.backend.id().to_string();

        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(&backend_id, &hash) {
                if let Some(diagnosis) = entry.diagnosis.or_else(|| parse_diagnosis(&entry.raw_response)) {
                    return Ok(LlmVerdict {
                        interview_id: bundle.interview_id,
                        diagnosis,
                        raw_response: entry.raw_response,
                        backend_id,
                        cached: true,
                        malformed_retries: 0,
                    });
                }
            }
        }

        let (raw, diagnosis, retries) = self.call_with_retries(&request, parse_diagnosis)?;
        if let Some(cache) = &self.cache {
            cache.put(&CacheEntry {
                request_hash: hash,
                backend_id: backend_id.clone(),
                raw_response: raw.clone(),
                diagnosis: Some(diagnosis),
            })?;
        }
        Ok(LlmVerdict {
            interview_id: bundle.interview_id,
            diagnosis,
            raw_response: raw,
            backend_id,
            cached: false,
            malformed_retries: retries,
        })
    }

    /// Generates the clinical report through a second schema-forced
    /// completion. `confidence` is the fused sigmoid output and passes
    /// through untouched.
    pub fn generate_report(
        &self,
        dialogue: &str,
        verdict: &LlmVerdict,
        confidence: f64,
    ) -> Result<ClinicalReport, LlmError> {
        if !(0.0..=1.0).contains(&confidence) || !confidence.is_finite() {
            return Err(LlmError::InvalidConfidence(confidence));
        }
        let request = ChatRequest {
            messages: vec![
                ChatMessage::new(
                    "system",
                    "You are a clinical scribe. Summarize the interview, detail all key \
                     points, and justify why the stated diagnosis was drawn.",
                ),
                ChatMessage::new(
                    "user",
                    format!(
                        "Diagnosis: {}\nConfidence: {confidence:.4}\n\n{dialogue}",
                        verdict.diagnosis
                    ),
                ),
            ],
            schema: report_schema(),
            temperature: 0.0,
        };
        let (_, body, _) = self.call_with_retries(&request, |raw| {
            let v: serde_json::Value = serde_json::from_str(raw).ok()?;
            let summary = v.get("summary")?.as_str()?.to_string();
            let justification = v.get("justification")?.as_str()?.to_string();
            if summary.is_empty() {
                return None;
            }
            Some((summary, justification))
        })?;
        Ok(ClinicalReport {
            interview_id: verdict.interview_id,
            diagnosis: verdict.diagnosis,
            confidence,
            summary: body.0,
            justification: body.1,
            created_at: Utc::now(),
        })
    }

    fn call_with_retries<T>(
        &self,
        request: &ChatRequest,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<(String, T, u32), LlmError> {
        let mut backoff = self.initial_backoff;
        let mut attempt = 0u32;
        loop {
            let last_raw = match self.backend.complete(request) {
                Ok(raw) => {
                    if let Some(parsed) = parse(&raw) {
                        return Ok((raw, parsed, attempt));
                    }
                    raw
                }
                Err(LlmError::AuthFailure(m)) => return Err(LlmError::AuthFailure(m)),
                Err(LlmError::BackendUnavailable(m)) => {
                    if attempt >= self.max_retries {
                        return Err(LlmError::BackendUnavailable(m));
                    }
                    m
                }
                Err(other) => return Err(other),
            };
            if attempt >= self.max_retries {
                return Err(LlmError::MalformedAfterRetries {
                    retries: self.max_retries,
                    last: last_raw,
                });
            }
            attempt += 1;
            if !backoff.is_zero() {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
    }
}

/// Free-function form of classification without a cache or backoff sleeps;
/// batch callers use [`LlmClient`] directly.
pub fn classify_transcript(
    bundle: &PromptBundle,
    backend: &dyn ChatBackend,
) -> Result<LlmVerdict, LlmError> {
    let request = bundle.to_request();
    let backend_id = backend.id().to_string();
    let mut last_raw = String::new();
    for attempt in 0..=3u32 {
        match backend.complete(&request) {
            Ok(raw) => {
                if let Some(diagnosis) = parse_diagnosis(&raw) {
                    return Ok(LlmVerdict {
                        interview_id: bundle.interview_id,
                        diagnosis,
                        raw_response: raw,
                        backend_id,
                        cached: false,
                        malformed_retries: attempt,
                    });
                }
                last_raw = raw;
            }
            Err(e) => return Err(e),
        }
    }
    Err(LlmError::MalformedAfterRetries { retries: 3, last: last_raw })
}

/// Generated clinical report; the wire schema is this struct serialized as
/// JSON with RFC 3339 timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalReport {
    pub interview_id: u32,
    pub diagnosis: Label,
    pub confidence: f64,
    pub summary: String,
    pub justification: String,
    pub created_at: DateTime<Utc>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn exemplars() -> ExemplarSet {
        ExemplarSet::new(vec![
            Exemplar { interview_id: 9001, dialogue: "Patient: I feel empty.".into(), label: Label::Depressed },
            Exemplar { interview_id: 9002, dialogue: "Patient: I can't sleep at all.".into(), label: Label::Depressed },
            Exemplar { interview_id: 9003, dialogue: "Patient: Life is good.".into(), label: Label::NotDepressed },
            Exemplar { interview_id: 9004, dialogue: "Patient: Work is fun.".into(), label: Label::NotDepressed },
        ])
        .unwrap()
    }

    #[test]
    fn prompt_uses_exact_system_instruction() {
        let bundle = build_prompt(42, "Patient: Hello.", &exemplars()).unwrap();
        assert_eq!(
            bundle.system_instruction,
            "Take on the role of an expert in psychiatric diagnosis using the DSM 5. \
             Read the following transcript and determine if the patient has depression."
        );
        let request = bundle.to_request();
        assert_eq!(request.messages.len(), 1 + 2 * EXEMPLAR_COUNT + 1);
        assert_eq!(request.messages[0].role, "system");
        assert_eq!(request.messages.last().unwrap().content, "Patient: Hello.");
        assert_eq!(request.messages[2].role, "assistant");
        assert!(parse_diagnosis(&request.messages[2].content).is_some());
    }

    #[test]
    fn empty_dialogue_rejected_before_any_call() {
        assert!(matches!(build_prompt(1, "  ", &exemplars()), Err(LlmError::EmptyDialogue)));
    }

    #[test]
    fn unbalanced_exemplars_rejected() {
        let mut e = exemplars().exemplars;
        e[2].label = Label::Depressed;
        assert!(matches!(
            ExemplarSet::new(e),
            Err(LlmError::UnbalancedExemplars { depressed: 3, not_depressed: 1 })
        ));
    }

    #[test]
    fn payload_hash_is_stable_and_content_addressed() {
        let a = build_prompt(1, "Patient: Hi.", &exemplars()).unwrap();
        let b = build_prompt(1, "Patient: Hi.", &exemplars()).unwrap();
        let c = build_prompt(1, "Patient: Hi there.", &exemplars()).unwrap();
        assert_eq!(a.payload_hash(), b.payload_hash());
        assert_ne!(a.payload_hash(), c.payload_hash());
    }

    #[test]
    fn stub_keys_on_marker_phrases() {
        let backend = StubBackend::default();
        let dep = build_prompt(7, "Patient: I've been feeling hopeless lately.", &exemplars()).unwrap();
        let verdict = classify_transcript(&dep, &backend).unwrap();
        assert_eq!(verdict.diagnosis, Label::Depressed);
        assert_eq!(verdict.malformed_retries, 0);

        let ok = build_prompt(8, "Patient: I had a great week.", &exemplars()).unwrap();
        let verdict = classify_transcript(&ok, &backend).unwrap();
        assert_eq!(verdict.diagnosis, Label::NotDepressed);
    }

    struct CountingBackend {
        inner: StubBackend,
        calls: std::sync::Arc<AtomicU32>,
    }

    impl ChatBackend for CountingBackend {
        fn id(&self) -> &str {
            "counting-stub"
        }
        fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.complete(request)
        }
    }

    #[test]
    fn second_identical_call_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let calls = std::sync::Arc::new(AtomicU32::new(0));
        let backend =
            Box::new(CountingBackend { inner: StubBackend::default(), calls: calls.clone() });
        let client = LlmClient::new(backend)
            .with_cache(ResponseCache::new(dir.path()).unwrap())
            .with_backoff(Duration::ZERO);
        let bundle = build_prompt(5, "Patient: nothing interests me anymore.", &exemplars()).unwrap();

        let first = client.classify(&bundle).unwrap();
        assert!(!first.cached);
        let second = client.classify(&bundle).unwrap();
        assert!(second.cached);
        assert_eq!(second.diagnosis, Label::Depressed);
        // One network call total.
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    struct FreeTextBackend;
    impl ChatBackend for FreeTextBackend {
        fn id(&self) -> &str {
            "free-text"
        }
        fn complete(&self, _request: &ChatRequest) -> Result<String, LlmError> {
            Ok("The patient seems sad".to_string())
        }
    }

    #[test]
    fn malformed_payload_errors_after_three_retries() {
        let client = LlmClient::new(Box::new(FreeTextBackend)).with_backoff(Duration::ZERO);
        let bundle = build_prompt(6, "Patient: Hi.", &exemplars()).unwrap();
        match client.classify(&bundle) {
            Err(LlmError::MalformedAfterRetries { retries: 3, last }) => {
                assert_eq!(last, "The patient seems sad");
            }
            other => panic!("expected MalformedAfterRetries, got {other:?}"),
        }
    }

    #[test]
    fn report_is_templated_and_passes_confidence_through() {
        let client = LlmClient::new(Box::new(StubBackend::default())).with_backoff(Duration::ZERO);
        let verdict = LlmVerdict {
            interview_id: 12,
            diagnosis: Label::Depressed,
            raw_response: r#"{"diagnosis":"depressed"}"#.into(),
            backend_id: "stub".into(),
            cached: false,
            malformed_retries: 0,
        };
        let report = client.generate_report("Therapist: Hi.\nPatient: I feel empty.", &verdict, 0.97).unwrap();
        assert_eq!(report.confidence, 0.97);
        assert!(!report.summary.is_empty());
        assert!(report.summary.contains("depressed"));

        let json = serde_json::to_string(&report).unwrap();
        let back: ClinicalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        assert!(matches!(
            client.generate_report("d", &verdict, 1.5),
            Err(LlmError::InvalidConfidence(_))
        ));
    }
}
