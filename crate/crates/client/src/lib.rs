//! Thin async client for the ingestion service.

use gridsight_core::api::{ErrorBody, Health};
use gridsight_core::report::{AcceptanceRecord, SignedEnvelope};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("rejected ({status}): {code}: {reason}")]
    Rejected {
        status: u16,
        code: String,
        reason: String,
    },
    #[error("unexpected response {status}: {body}")]
    Unexpected { status: u16, body: String },
    #[error(transparent)]
    Http(#[from] reqwest::Error),
}

impl ClientError {
    /// Server reason code, for rejections.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Rejected { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        Client {
            base: base.trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body = resp.text().await?;
        match serde_json::from_str::<ErrorBody>(&body) {
            Ok(e) => Err(ClientError::Rejected {
                status: status.as_u16(),
                code: e.code,
                reason: e.reason,
            }),
            Err(_) => Err(ClientError::Unexpected {
                status: status.as_u16(),
                body,
            }),
        }
    }

    pub async fn submit_report(
        &self,
        envelope: &SignedEnvelope,
    ) -> Result<AcceptanceRecord, ClientError> {
        let resp = self
            .http
            .post(format!("{}/reports", self.base))
            .json(envelope)
            .send()
            .await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        let resp = self
            .http
            .get(format!("{}/health", self.base))
            .send()
            .await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    /// Risk raster CSV at `res` x `res` cells.
    pub async fn risk_csv(&self, res: usize) -> Result<String, ClientError> {
        let resp = self
            .http
            .get(format!("{}/risk?res={res}", self.base))
            .send()
            .await?;
        Ok(Self::check(resp).await?.text().await?)
    }

    pub async fn contingencies_csv(&self) -> Result<String, ClientError> {
        let resp = self
            .http
            .get(format!("{}/contingencies", self.base))
            .send()
            .await?;
        Ok(Self::check(resp).await?.text().await?)
    }
}
