//! Async client for the e2t HTTP service.

pub use e2t_core::pipeline::api::{ErrorBody, RunRequest};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service ran the command and it failed.
    #[error("{}", .0.message)]
    Remote(ErrorBody),
    #[error("request to {url} failed: {source}")]
    Http {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("unexpected response from {url}: status {status}: {body}")]
    Protocol { url: String, status: u16, body: String },
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub async fn health(&self) -> Result<Value, ClientError> {
        let url = format!("{}/health", self.base);
        let resp = self.http.get(&url).send().await.map_err(|source| ClientError::Http { url: url.clone(), source })?;
        Self::decode(url, resp).await
    }

    /// Runs one pipeline command and returns its JSON output.
    pub async fn run(&self, command: &str, req: &RunRequest) -> Result<Value, ClientError> {
        let url = format!("{}/v1/{command}", self.base);
        let resp = self
            .http
            .post(&url)
            .json(req)
            .send()
            .await
            .map_err(|source| ClientError::Http { url: url.clone(), source })?;
        Self::decode(url, resp).await
    }

    async fn decode(url: String, resp: reqwest::Response) -> Result<Value, ClientError> {
        let status = resp.status();
        let text = resp.text().await.map_err(|source| ClientError::Http { url: url.clone(), source })?;
        if status.is_success() {
            return serde_json::from_str(&text).map_err(|_| ClientError::Protocol {
                url,
                status: status.as_u16(),
                body: text,
            });
        }
        match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => Err(ClientError::Remote(body)),
            Err(_) => Err(ClientError::Protocol {
                url,
                status: status.as_u16(),
                body: text,
            }),
        }
    }
}
