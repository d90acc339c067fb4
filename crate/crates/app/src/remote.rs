//! Remote chat-completion backend: a tools/function-calling endpoint
//! compatible with the common chat-completions wire format. Endpoint,
//! model, and credentials come from configuration and the environment,
//! never code.

use depscreen_core::config::{LlmSettings, ENV_API_KEY};
use depscreen_core::llm::{ChatBackend, ChatRequest, LlmError};
use serde_json::json;
use std::time::Duration;

pub struct RemoteBackend {
    id: String,
    base_url: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn from_settings(settings: &LlmSettings) -> Result<Self, LlmError> {
        let api_key = std::env::var(ENV_API_KEY)
            .map_err(|_| LlmError::AuthFailure(format!("{ENV_API_KEY} is not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        Ok(RemoteBackend {
            id: format!("remote:{}", settings.model),
            base_url: settings.base_url.trim_end_matches('/').to_string(),
            model: settings.model.clone(),
            api_key,
            client,
        })
    }
}

impl ChatBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let tool_name = request.tool_name().unwrap_or("respond");
        let body = json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": request.messages,
            "tools": [{ "type": "function", "function": request.schema }],
            "tool_choice": { "type": "function", "function": { "name": tool_name } },
        });
        let response = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;

        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(LlmError::AuthFailure(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            return Err(LlmError::BackendUnavailable(format!("endpoint returned {status}")));
        }
        let payload: serde_json::Value = response
            .json()
            .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        // The forced tool call's arguments are the schema-conformant answer;
        // fall back to message content so malformed responses surface as
        // parse retries rather than transport errors.
        let answer = payload["choices"][0]["message"]["tool_calls"][0]["function"]["arguments"]
            .as_str()
            .map(str::to_string)
            .or_else(|| {
                payload["choices"][0]["message"]["content"].as_str().map(str::to_string)
            })
            .unwrap_or_default();
        Ok(answer)
    }
}
