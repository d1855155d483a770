//! HTTP chat backend speaking the common `/v1/chat/completions` shape.

use std::time::Duration;

use serde::Deserialize;

use super::{ChatBackend, ChatRequest, GatewayError};

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: String,
}

pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

/// Accept either a bare base URL or a full chat-completions path.
fn chat_completions_url(endpoint: &str) -> String {
    let trimmed = endpoint.trim_end_matches('/');
    if trimmed.ends_with("/chat/completions") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/v1/chat/completions")
    }
}

impl HttpBackend {
    pub fn new(endpoint: &str, api_key: Option<String>) -> Result<Self, GatewayError> {
        Self::with_timeout(endpoint, api_key, Duration::from_secs(60))
    }

    pub fn with_timeout(
        endpoint: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|err| GatewayError::Unavailable(format!("http client: {err}")))?;
        Ok(Self {
            url: chat_completions_url(endpoint),
            api_key,
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|err| {
            if err.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Unavailable(err.to_string())
            }
        })?;

        let status = response.status();
        if status.as_u16() == 429 {
            return Err(GatewayError::RateLimited);
        }
        if status.is_server_error() {
            return Err(GatewayError::Unavailable(format!(
                "server returned {status}"
            )));
        }
        if !status.is_success() {
            return Err(GatewayError::Protocol(format!("server returned {status}")));
        }

        let parsed: CompletionResponse = response
            .json()
            .map_err(|err| GatewayError::Protocol(format!("bad completion body: {err}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Protocol("completion had no choices".into()))?;
        Ok(choice.message.content)
    }

    fn name(&self) -> String {
        format!("http:{}", self.url)
    }
}
