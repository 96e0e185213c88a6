//! Live backend for OpenAI-compatible chat-completion servers.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, GatewayError, TRANSPORT_RETRIES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// e.g. `http://localhost:8000/v1`
    pub base_url: String,
    pub model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub retry_backoff_ms: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".to_string(),
            model: "qwen2-72b-instruct".to_string(),
            embedding_model: "text-embedding".to_string(),
            api_key_env: "VEIL_API_KEY".to_string(),
            timeout_secs: 120,
            retries: TRANSPORT_RETRIES,
            retry_backoff_ms: 500,
        }
    }
}

pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Must not be called from inside an async runtime.
    pub fn new(config: HttpBackendConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport { attempts: 0, message: e.to_string() })?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { id: format!("http:{}", config.model), config, api_key, client })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
        let attempts = self.config.retries + 1;
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 && self.config.retry_backoff_ms > 0 {
                let backoff = self.config.retry_backoff_ms << (attempt - 2).min(6);
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<Value>().map_err(|e| GatewayError::Transport {
                        attempts: attempt,
                        message: format!("undecodable response body: {e}"),
                    });
                }
                Ok(resp) => {
                    let status = resp.status();
                    last_error = format!("{status}: {}", resp.text().unwrap_or_default());
                    // Client errors other than rate limiting will not heal on retry.
                    if status.is_client_error() && status.as_u16() != 429 {
                        return Err(GatewayError::Transport { attempts: attempt, message: last_error });
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
            log::warn!("{url} attempt {attempt}/{attempts} failed: {last_error}");
        }
        Err(GatewayError::Transport { attempts, message: last_error })
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "seed": request.seed,
        });
        if request.schema.is_some() {
            body["response_format"] = json!({"type": "json_object"});
        }
        let value = self.post("chat/completions", &body)?;
        value["choices"][0]["message"]["content"].as_str().map(str::to_string).ok_or_else(|| GatewayError::Transport {
            attempts: 1,
            message: "response has no choices[0].message.content".to_string(),
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let body = json!({"model": self.config.embedding_model, "input": text});
        let value = self.post("embeddings", &body)?;
        value["data"][0]["embedding"].as_array().map(|xs| xs.iter().filter_map(Value::as_f64).collect()).ok_or_else(
            || GatewayError::Transport { attempts: 1, message: "response has no data[0].embedding".to_string() },
        )
    }
}
