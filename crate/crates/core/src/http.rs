//! JSON-over-HTTP transport shared by the chat-completion and embeddings
//! clients: bearer auth from an environment variable, timeouts, and
//! exponential backoff on transient failures.

use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::{StatusCode, Url};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("server error {status} after {attempts} attempt(s)")]
    Server { status: u16, attempts: u32 },
    #[error("unexpected status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_tokens() -> u32 {
    512
}
fn default_backoff_ms() -> u64 {
    500
}

/// Where and how to reach a hosted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token. Empty
    /// means no authentication.
    #[serde(default)]
    pub auth_env_var: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        ModelEndpoint {
            base_url: base_url.into(),
            model_name: model_name.into(),
            auth_env_var: String::new(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<Url, HttpError> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(HttpError::InvalidEndpoint("timeout must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(HttpError::InvalidEndpoint("temperature must be non-negative".into()));
        }
        if self.max_tokens == 0 {
            return Err(HttpError::InvalidEndpoint("max_tokens must be positive".into()));
        }
        Url::parse(&self.base_url).map_err(|e| HttpError::InvalidEndpoint(format!("{}: {e}", self.base_url)))
    }

    /// Loopback endpoints may run without credentials.
    pub fn is_remote(&self) -> bool {
        match Url::parse(&self.base_url).ok().and_then(|u| u.host_str().map(str::to_owned)) {
            Some(host) => !matches!(host.as_str(), "localhost" | "127.0.0.1" | "[::1]" | "::1"),
            None => true,
        }
    }
}

pub struct HttpClient {
    endpoint: ModelEndpoint,
    base: Url,
    token: Option<String>,
    client: Client,
}

/// Successful JSON response plus how many attempts it took.
#[derive(Debug)]
pub struct JsonResponse {
    pub body: Value,
    pub attempts: u32,
    pub latency: Duration,
}

impl HttpClient {
    /// Fails with `AuthFailure` before any request when a remote endpoint's
    /// token variable is unset.
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, HttpError> {
        let base = endpoint.validate()?;
        let token = if endpoint.auth_env_var.is_empty() {
            None
        } else {
            std::env::var(&endpoint.auth_env_var).ok().filter(|t| !t.is_empty())
        };
        if token.is_none() && endpoint.is_remote() {
            return Err(HttpError::AuthFailure(if endpoint.auth_env_var.is_empty() {
                "remote endpoint configured without auth_env_var".into()
            } else {
                format!("environment variable {} is not set", endpoint.auth_env_var)
            }));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| HttpError::InvalidEndpoint(e.to_string()))?;
        Ok(HttpClient {
            endpoint,
            base,
            token,
            client,
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    fn url_for(&self, route: &str) -> String {
        format!("{}/{}", self.base.as_str().trim_end_matches('/'), route.trim_start_matches('/'))
    }

    /// POST `body` to `<base_url>/<route>`. Makes at most `max_retries + 1`
    /// attempts; 429, 5xx, timeouts and connection errors are retried.
    pub fn post_json(&self, route: &str, body: &Value) -> Result<JsonResponse, HttpError> {
        let url = self.url_for(route);
        let max_attempts = self.endpoint.max_retries + 1;
        let started = Instant::now();
        let mut last_err = None;

        for attempt in 1..=max_attempts {
            let mut req = self.client.post(&url).json(body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            let (err, retry_after) = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let text = resp.text().map_err(|e| HttpError::MalformedResponse(e.to_string()))?;
                        let body = serde_json::from_str(&text)
                            .map_err(|e| HttpError::MalformedResponse(format!("{e}: {}", truncate(&text, 200))))?;
                        return Ok(JsonResponse {
                            body,
                            attempts: attempt,
                            latency: started.elapsed(),
                        });
                    }
                    let retry_after = resp
                        .headers()
                        .get(reqwest::header::RETRY_AFTER)
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<u64>().ok())
                        .map(Duration::from_secs);
                    match status {
                        StatusCode::TOO_MANY_REQUESTS => (HttpError::RateLimited { attempts: attempt }, retry_after),
                        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                            return Err(HttpError::AuthFailure(format!("server answered {status}")));
                        }
                        s if s.is_server_error() => (
                            HttpError::Server {
                                status: s.as_u16(),
                                attempts: attempt,
                            },
                            retry_after,
                        ),
                        s => {
                            let body = resp.text().unwrap_or_default();
                            return Err(HttpError::Status {
                                status: s.as_u16(),
                                body: truncate(&body, 500),
                            });
                        }
                    }
                }
                Err(e) if e.is_timeout() => (HttpError::Timeout { attempts: attempt }, None),
                Err(e) if e.is_connect() || e.is_request() => (
                    HttpError::Transport {
                        message: e.to_string(),
                        attempts: attempt,
                    },
                    None,
                ),
                Err(e) => {
                    return Err(HttpError::Transport {
                        message: e.to_string(),
                        attempts: attempt,
                    })
                }
            };

            if attempt < max_attempts {
                let backoff = Duration::from_millis(self.endpoint.backoff_ms.saturating_mul(1 << (attempt - 1).min(16)));
                let delay = retry_after.map_or(backoff, |ra| ra.max(backoff));
                warn!(%url, attempt, ?delay, error = %err, "transient failure, retrying");
                std::thread::sleep(delay);
            }
            last_err = Some(err);
        }
        Err(last_err.expect("at least one attempt is always made"))
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loopback_is_not_remote() {
        assert!(!ModelEndpoint::new("http://127.0.0.1:8080/v1", "m").is_remote());
        assert!(!ModelEndpoint::new("http://localhost/v1", "m").is_remote());
        assert!(ModelEndpoint::new("https://api.example.com/v1", "m").is_remote());
    }

    #[test]
    fn missing_token_fails_before_request() {
        let mut ep = ModelEndpoint::new("https://api.example.invalid/v1", "m");
        ep.auth_env_var = "EQUIRAG_TEST_TOKEN_THAT_IS_NEVER_SET".into();
        assert!(matches!(HttpClient::new(ep), Err(HttpError::AuthFailure(_))));
    }

    #[test]
    fn rejects_bad_endpoint_values() {
        let mut ep = ModelEndpoint::new("http://127.0.0.1:1", "m");
        ep.timeout_secs = 0.0;
        assert!(matches!(HttpClient::new(ep), Err(HttpError::InvalidEndpoint(_))));
        assert!(HttpClient::new(ModelEndpoint::new("not a url", "m")).is_err());
    }

    #[test]
    fn url_join() {
        let c = HttpClient::new(ModelEndpoint::new("http://127.0.0.1:9/v1/", "m")).unwrap();
        assert_eq!(c.url_for("/chat/completions"), "http://127.0.0.1:9/v1/chat/completions");
    }
}
