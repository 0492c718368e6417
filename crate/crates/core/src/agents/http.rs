use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::provider::{Capabilities, ChatRequest, ContentPart, LlmProvider, ProviderError};

fn default_timeout_s() -> u64 {
    120
}

fn default_in_flight() -> usize {
    4
}

/// Connection settings for an OpenAI-style `chat/completions` endpoint.
/// The credential is read from `api_key_env` on every call and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub id: String,
    pub endpoint: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub capabilities: Capabilities,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

struct Slots {
    free: Mutex<usize>,
    released: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.released.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.released.notify_one();
    }
}

pub struct OpenAiCompatibleProvider {
    config: HttpProviderConfig,
    agent: ureq::Agent,
    slots: Slots,
}

impl OpenAiCompatibleProvider {
    pub fn new(config: HttpProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        let slots = Slots {
            free: Mutex::new(config.max_in_flight.max(1)),
            released: Condvar::new(),
        };
        Self { config, agent, slots }
    }

    pub fn config(&self) -> &HttpProviderConfig {
        &self.config
    }

    pub fn request_body(request: &ChatRequest) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let content: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text(t) => json!({"type": "text", "text": t}),
                        ContentPart::Image(img) => json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{};base64,{}", img.media_type, b64.encode(&img.bytes))}
                        }),
                    })
                    .collect();
                json!({"role": m.role.as_str(), "content": content})
            })
            .collect();
        let mut body = json!({"model": request.model, "messages": messages});
        if let Some(t) = request.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

impl LlmProvider for OpenAiCompatibleProvider {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn capabilities(&self) -> Capabilities {
        self.config.capabilities
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let key = match &self.config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ProviderError::MissingCredential(var.clone()))?),
            None => None,
        };
        let body = Self::request_body(request);
        let _slot = self.slots.acquire();
        let mut call = self.agent.post(&self.config.endpoint);
        if let Some(key) = key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout,
            other => ProviderError::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Http { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::InvalidResponse("no choices[0].message.content".into()))
    }
}
