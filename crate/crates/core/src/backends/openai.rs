//! Chat-completions client for OpenAI-compatible HTTP endpoints.

use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::LlmBackend;

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug)]
pub struct ChatCompletionsLlm {
    id: String,
    endpoint: String,
    model: String,
    api_key: String,
    max_concurrency: usize,
    agent: ureq::Agent,
}

impl ChatCompletionsLlm {
    /// `base_url` is the API root, e.g. `https://api.openai.com/v1`. The key
    /// is read from `api_key_env` now so that a missing key fails at startup.
    pub fn new(
        base_url: &str,
        model: &str,
        api_key_env: &str,
        timeout: Duration,
        max_concurrency: usize,
    ) -> Result<Self> {
        let api_key = std::env::var(api_key_env)
            .map_err(|_| Error::Config(format!("environment variable {api_key_env} is not set")))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(ChatCompletionsLlm {
            id: format!("openai:{model}"),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_owned(),
            api_key,
            max_concurrency: max_concurrency.max(1),
            agent,
        })
    }
}

impl LlmBackend for ChatCompletionsLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn complete(&self, system: &str, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": prompt},
            ],
        });
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| Error::backend(&self.id, e.to_string()))?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::backend(&self.id, e.to_string()))?;
        if !status.is_success() {
            return Err(Error::backend(&self.id, format!("HTTP {status}: {text}")));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::backend(&self.id, format!("invalid response JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::backend(&self.id, "response has no choices[0].message.content"))
    }
}
