use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

use super::server::{ErrorBody, PredictRequest, PredictResponse, MAX_BATCH};
use super::{OracleInfo, PredictionService};

/// Bounded retries for transport failures. HTTP error responses are never
/// retried.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff_ms: 100,
        }
    }
}

/// Client for the prediction service. Safe for sequential use; give each
/// thread its own instance.
pub struct HttpOracle {
    base_url: String,
    agent: Agent,
    retry: RetryPolicy,
    max_batch: usize,
}

impl HttpOracle {
    pub fn new(base_url: impl Into<String>, retry: RetryPolicy) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            agent,
            retry,
            max_batch: MAX_BATCH,
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn with_retry<T>(&self, mut call: impl FnMut() -> std::result::Result<T, ureq::Error>) -> Result<T> {
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    last = e.to_string();
                    log::warn!("request to {} failed (attempt {}): {last}", self.base_url, attempt + 1);
                    if attempt + 1 < attempts {
                        let wait = self.retry.backoff_ms.saturating_mul(1 << attempt.min(10));
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }

    fn predict_chunk(&self, rows: Vec<Vec<f32>>) -> Result<Vec<Vec<f32>>> {
        let url = format!("{}/v1/predict", self.base_url);
        let req = PredictRequest { features: rows };
        let mut resp = self.with_retry(|| self.agent.post(&url).send_json(&req))?;
        let status = resp.status();
        if status.is_success() {
            let body: PredictResponse = resp
                .body_mut()
                .read_json()
                .map_err(|e| Error::Remote(format!("bad response body: {e}")))?;
            Ok(body.scores)
        } else {
            let code = resp
                .body_mut()
                .read_json::<ErrorBody>()
                .map(|b| b.error)
                .unwrap_or_else(|_| format!("http {}", status.as_u16()));
            Err(Error::Remote(code))
        }
    }
}

impl PredictionService for HttpOracle {
    fn info(&self) -> Result<OracleInfo> {
        let url = format!("{}/v1/info", self.base_url);
        let mut resp = self.with_retry(|| self.agent.get(&url).call())?;
        if !resp.status().is_success() {
            return Err(Error::Remote(format!("http {}", resp.status().as_u16())));
        }
        resp.body_mut()
            .read_json()
            .map_err(|e| Error::Remote(format!("bad info body: {e}")))
    }

    /// Splits the batch into requests of at most `max_batch` rows and
    /// reassembles the scores in order.
    fn predict(&self, features: &Tensor) -> Result<Tensor> {
        if features.is_empty() {
            return Err(Error::Remote("empty_batch".into()));
        }
        let n = features.rows();
        let mut out = Vec::new();
        let mut classes = 0;
        let mut start = 0;
        while start < n {
            let end = (start + self.max_batch).min(n);
            let rows = (start..end)
                .map(|r| features.row_slice(r).iter().map(|&x| x as f32).collect())
                .collect();
            let scores = self.predict_chunk(rows)?;
            if scores.len() != end - start {
                return Err(Error::Remote(format!(
                    "expected {} score rows, got {}",
                    end - start,
                    scores.len()
                )));
            }
            for row in scores {
                if classes == 0 {
                    classes = row.len();
                } else if row.len() != classes {
                    return Err(Error::Remote("ragged score matrix".into()));
                }
                out.extend(row.into_iter().map(f64::from));
            }
            start = end;
        }
        Tensor::matrix(n, classes, out)
    }
}
