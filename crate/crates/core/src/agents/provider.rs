use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AgentError;
use crate::wgs::{AgentRole, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_images: bool,
    pub supports_temperature: bool,
    /// Requests leave the local machine.
    pub remote: bool,
    pub max_images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageOrigin {
    Frame {
        view: View,
        source_index: usize,
        anonymized: bool,
    },
    Plot {
        id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePart {
    pub media_type: &'static str,
    pub bytes: Vec<u8>,
    pub origin: ImageOrigin,
}

impl ImagePart {
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(&self.bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    Image(ImagePart),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: ChatRole, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![ContentPart::Text(text.into())],
        }
    }
}

/// Where a request came from; carried for audit and fault injection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RequestMeta {
    pub case_id: String,
    pub trial_id: String,
    pub run_index: usize,
    pub agent: Option<AgentRole>,
    pub attempt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: Option<f64>,
    pub meta: RequestMeta,
}

impl ChatRequest {
    pub fn images(&self) -> impl Iterator<Item = &ImagePart> {
        self.messages.iter().flat_map(|m| {
            m.parts.iter().filter_map(|p| match p {
                ContentPart::Image(img) => Some(img),
                ContentPart::Text(_) => None,
            })
        })
    }

    pub fn image_count(&self) -> usize {
        self.images().count()
    }

    /// All text parts, in order, one message per block.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            for p in &m.parts {
                if let ContentPart::Text(t) = p {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }

    /// Text of the most recent user message.
    pub fn last_user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| {
                m.parts
                    .iter()
                    .filter_map(|p| match p {
                        ContentPart::Text(t) => Some(t.as_str()),
                        ContentPart::Image(_) => None,
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("unexpected response shape: {0}")]
    InvalidResponse(String),
    #[error("injected fault: {0}")]
    Injected(String),
}

/// A chat-completion backend. Implementations return the whole reply or an
/// error, never a partial reply, and must tolerate concurrent calls.
pub trait LlmProvider: Send + Sync {
    fn id(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

/// One outbound request as recorded for post-hoc review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAuditEntry {
    pub provider_id: String,
    pub model: String,
    pub meta: RequestMeta,
    pub temperature: Option<f64>,
    pub messages: Vec<AuditMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditMessage {
    pub role: ChatRole,
    pub text: String,
    pub image_sha256: Vec<String>,
}

pub trait PromptSink: Send + Sync {
    fn record(&self, entry: &PromptAuditEntry);
}

/// Applies the provider-independent request policy before any call:
/// the anonymization gate, image support and limits, and temperature
/// omission for providers that reject it.
#[derive(Clone, Copy)]
pub struct Dispatcher<'a> {
    pub provider: &'a dyn LlmProvider,
    pub audit: Option<&'a dyn PromptSink>,
}

impl<'a> Dispatcher<'a> {
    pub fn new(provider: &'a dyn LlmProvider) -> Self {
        Self {
            provider,
            audit: None,
        }
    }

    pub fn with_audit(mut self, audit: &'a dyn PromptSink) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn prepare(&self, request: &ChatRequest) -> Result<ChatRequest, AgentError> {
        let caps = self.provider.capabilities();
        if caps.remote {
            for img in request.images() {
                if let ImageOrigin::Frame {
                    view,
                    anonymized: false,
                    ..
                } = img.origin
                {
                    return Err(AgentError::PrivacyGateViolation { view });
                }
            }
        }
        let count = request.image_count();
        if count > 0 && !caps.supports_images {
            return Err(AgentError::ImagesUnsupported(self.provider.id().to_string()));
        }
        if count > caps.max_images {
            return Err(AgentError::TooManyImages {
                count,
                limit: caps.max_images,
            });
        }
        let mut out = request.clone();
        if !caps.supports_temperature {
            out.temperature = None;
        }
        Ok(out)
    }

    pub fn send(&self, request: &ChatRequest) -> Result<String, AgentError> {
        let request = self.prepare(request)?;
        if let Some(sink) = self.audit {
            sink.record(&audit_entry(self.provider.id(), &request));
        }
        self.provider.complete(&request).map_err(AgentError::Provider)
    }
}

pub fn audit_entry(provider_id: &str, request: &ChatRequest) -> PromptAuditEntry {
    PromptAuditEntry {
        provider_id: provider_id.to_string(),
        model: request.model.clone(),
        meta: request.meta.clone(),
        temperature: request.temperature,
        messages: request
            .messages
            .iter()
            .map(|m| AuditMessage {
                role: m.role,
                text: m
                    .parts
                    .iter()
                    .filter_map(|p| match p {
                        ContentPart::Text(t) => Some(t.as_str()),
                        ContentPart::Image(_) => None,
                    })
                    .collect::<Vec<_>>()
                    .join("\n"),
                image_sha256: m
                    .parts
                    .iter()
                    .filter_map(|p| match p {
                        ContentPart::Image(img) => Some(img.sha256()),
                        ContentPart::Text(_) => None,
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Pulls the JSON object out of a reply that may wrap it in a code fence or
/// surrounding prose.
pub fn extract_json(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

pub const DEFAULT_RETRY_BUDGET: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Validated<T> {
    pub value: T,
    pub raw_text: String,
    pub attempts: usize,
}

/// Sends `request` and parses the reply with `parse`. A reply that fails to
/// parse is answered with a repair message quoting the error, up to
/// `retry_budget` extra attempts. Provider failures are not retried.
pub fn complete_with_validation<T>(
    dispatcher: &Dispatcher<'_>,
    request: &ChatRequest,
    parse: impl Fn(&str) -> Result<T, String>,
    retry_budget: usize,
) -> Result<Validated<T>, AgentError> {
    let mut req = request.clone();
    let mut last_error = String::new();
    for attempt in 1..=retry_budget + 1 {
        req.meta.attempt = attempt;
        let raw = dispatcher.send(&req)?;
        match parse(&raw) {
            Ok(value) => {
                return Ok(Validated {
                    value,
                    raw_text: raw,
                    attempts: attempt,
                })
            }
            Err(e) => {
                tracing::debug!(attempt, error = %e, "agent output failed validation");
                req.messages.push(ChatMessage::text(ChatRole::Assistant, raw));
                req.messages.push(ChatMessage::text(ChatRole::User, repair_instruction(&e)));
                last_error = e;
            }
        }
    }
    Err(AgentError::AgentOutputInvalid {
        attempts: retry_budget + 1,
        last_error,
    })
}

pub const REPAIR_MARKER: &str = "REPAIR REQUEST";

fn repair_instruction(error: &str) -> String {
    format!(
        "{REPAIR_MARKER}\nYour previous reply could not be used: {error}\n\
         Reply again with only the JSON document described above, with no other text."
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Scripted {
        caps: Capabilities,
        replies: Mutex<Vec<Result<String, ProviderError>>>,
        seen: Mutex<Vec<ChatRequest>>,
    }

    impl Scripted {
        fn new(remote: bool, replies: Vec<Result<String, ProviderError>>) -> Self {
            Self {
                caps: Capabilities {
                    supports_images: true,
                    supports_temperature: true,
                    remote,
                    max_images: 4,
                },
                replies: Mutex::new(replies.into_iter().rev().collect()),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl LlmProvider for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        fn capabilities(&self) -> Capabilities {
            self.caps
        }
        fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
            self.seen.lock().unwrap().push(request.clone());
            self.replies.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn request(images: Vec<ImagePart>) -> ChatRequest {
        let mut parts = vec![ContentPart::Text("rate".into())];
        parts.extend(images.into_iter().map(ContentPart::Image));
        ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage {
                role: ChatRole::User,
                parts,
            }],
            temperature: Some(0.0),
            meta: RequestMeta::default(),
        }
    }

    fn frame(anonymized: bool) -> ImagePart {
        ImagePart {
            media_type: "image/png",
            bytes: vec![1, 2, 3],
            origin: ImageOrigin::Frame {
                view: View::Frontal,
                source_index: 0,
                anonymized,
            },
        }
    }

    fn parse_number(s: &str) -> Result<u32, String> {
        s.trim().parse().map_err(|_| format!("not a number: {s:?}"))
    }

    #[test]
    fn valid_reply_parses_on_first_attempt() {
        let p = Scripted::new(false, vec![Ok("7".into())]);
        let v = complete_with_validation(&Dispatcher::new(&p), &request(vec![]), parse_number, 2).unwrap();
        assert_eq!((v.value, v.attempts), (7, 1));
    }

    #[test]
    fn garbage_then_valid_takes_two_attempts() {
        let p = Scripted::new(false, vec![Ok("nope".into()), Ok("9".into())]);
        let v = complete_with_validation(&Dispatcher::new(&p), &request(vec![]), parse_number, 2).unwrap();
        assert_eq!((v.value, v.attempts), (9, 2));
        let seen = p.seen.lock().unwrap();
        let repair = seen[1].last_user_text();
        assert!(repair.contains(REPAIR_MARKER) && repair.contains("not a number"));
        assert_eq!(seen[1].meta.attempt, 2);
    }

    #[test]
    fn budget_exhaustion_reports_three_attempts() {
        let p = Scripted::new(false, vec![Ok("a".into()), Ok("b".into()), Ok("c".into())]);
        let err = complete_with_validation(&Dispatcher::new(&p), &request(vec![]), parse_number, 2).unwrap_err();
        assert!(matches!(err, AgentError::AgentOutputInvalid { attempts: 3, .. }));
        assert_eq!(p.seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn provider_errors_are_not_retried() {
        let p = Scripted::new(false, vec![Err(ProviderError::Timeout)]);
        let err = complete_with_validation(&Dispatcher::new(&p), &request(vec![]), parse_number, 2).unwrap_err();
        assert_eq!(err, AgentError::Provider(ProviderError::Timeout));
    }

    #[test]
    fn remote_provider_never_sees_raw_frames() {
        let p = Scripted::new(true, vec![Ok("1".into())]);
        let err = Dispatcher::new(&p).send(&request(vec![frame(false)])).unwrap_err();
        assert_eq!(err, AgentError::PrivacyGateViolation { view: View::Frontal });
        assert!(p.seen.lock().unwrap().is_empty());
        assert!(Dispatcher::new(&p).send(&request(vec![frame(true)])).is_ok());
    }

    #[test]
    fn temperature_is_omitted_when_unsupported() {
        let mut p = Scripted::new(false, vec![Ok("1".into())]);
        p.caps.supports_temperature = false;
        Dispatcher::new(&p).send(&request(vec![])).unwrap();
        assert_eq!(p.seen.lock().unwrap()[0].temperature, None);
    }

    #[test]
    fn image_limit_is_enforced() {
        let p = Scripted::new(false, vec![]);
        let err = Dispatcher::new(&p).send(&request(vec![frame(true); 5])).unwrap_err();
        assert_eq!(err, AgentError::TooManyImages { count: 5, limit: 4 });
    }

    #[test]
    fn json_is_extracted_from_fences() {
        assert_eq!(extract_json("```json\n{\"a\":1}\n```"), Some("{\"a\":1}"));
        assert_eq!(extract_json("no json"), None);
    }
}
