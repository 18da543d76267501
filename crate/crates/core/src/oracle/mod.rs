//! The protected base classifier and the ways of querying it.
//!
//! [`ServerClassifier`] holds the weights and is only ever evaluated
//! locally or behind the HTTP service in [`server`]. Recovery code talks to
//! it through [`PredictionService`], implemented both by the classifier
//! itself (in-process) and by the HTTP client in [`client`].

pub mod client;
pub mod server;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffmath::{log_sum_exp, Tensor};
use crate::error::{Error, Result};
use crate::vmf::ClassPrototypes;

pub use client::{HttpOracle, RetryPolicy};
pub use server::{serve, spawn_server, ServerHandle, MAX_BATCH};

/// Temperature applied in softmax score mode.
pub const SOFTMAX_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Cosine,
    Softmax,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Cosine => "cosine",
            ScoreMode::Softmax => "softmax",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScoreMode::Cosine),
            "softmax" => Ok(ScoreMode::Softmax),
            other => Err(Error::Config(format!("unknown score mode {other:?}"))),
        }
    }
}

/// What `/v1/info` reveals: shapes and scoring, never names or weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub dim: usize,
    pub num_classes: usize,
    pub score_mode: ScoreMode,
}

/// Anything that returns per-class scores for a batch of feature rows.
pub trait PredictionService {
    fn info(&self) -> Result<OracleInfo>;

    /// `features` is `batch × dim`; the result is `batch × num_classes`,
    /// rows in request order.
    fn predict(&self, features: &Tensor) -> Result<Tensor>;
}

/// Base classifier with cosine logits over unit weight rows.
pub struct ServerClassifier {
    weights: ClassPrototypes,
    score_mode: ScoreMode,
}

// Weight values must not leak through logs either.
impl fmt::Debug for ServerClassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerClassifier")
            .field("dim", &self.weights.dim())
            .field("num_classes", &self.weights.len())
            .field("score_mode", &self.score_mode)
            .finish()
    }
}

impl ServerClassifier {
    pub fn new(weights: ClassPrototypes, score_mode: ScoreMode) -> Self {
        Self {
            weights,
            score_mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn score_mode(&self) -> ScoreMode {
        self.score_mode
    }

    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: features.cols(),
            });
        }
        let x = features.normalized_rows()?;
        let mut s = x.matmul_t(self.weights.directions())?;
        s.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        if self.score_mode == ScoreMode::Softmax {
            for r in 0..s.rows() {
                let row = s.row_slice_mut(r);
                let z: Vec<f64> = row.iter().map(|v| v / SOFTMAX_TEMPERATURE).collect();
                let lse = log_sum_exp(&z);
                for (v, zi) in row.iter_mut().zip(z) {
                    *v = (zi - lse).exp();
                }
            }
        }
        Ok(s)
    }
}

impl PredictionService for ServerClassifier {
    fn info(&self) -> Result<OracleInfo> {
        Ok(OracleInfo {
            dim: self.dim(),
            num_classes: self.num_classes(),
            score_mode: self.score_mode,
        })
    }

    fn predict(&self, features: &Tensor) -> Result<Tensor> {
        self.scores(features)
    }
}

impl<T: PredictionService + ?Sized> PredictionService for &T {
    fn info(&self) -> Result<OracleInfo> {
        (**self).info()
    }

    fn predict(&self, features: &Tensor) -> Result<Tensor> {
        (**self).predict(features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights() -> ClassPrototypes {
        ClassPrototypes::new(
            vec!["a".into(), "b".into(), "c".into()],
            Tensor::from_rows(&[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 3.0, 4.0],
                vec![-1.0, 1.0, 0.0],
            ])
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn self_similarity_is_maximal() {
        let w = weights();
        let clf = ServerClassifier::new(w.clone(), ScoreMode::Cosine);
        for k in 0..3 {
            let s = clf.scores(&Tensor::row(w.direction(k).to_vec())).unwrap();
            let (arg, max) = s
                .data()
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            assert_eq!(arg, k);
            assert!((max - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let clf = ServerClassifier::new(weights(), ScoreMode::Softmax);
        let s = clf
            .scores(&Tensor::from_rows(&[vec![0.2, 0.1, 0.9], vec![-1.0, 0.0, 0.1]]).unwrap())
            .unwrap();
        for r in 0..2 {
            assert!((s.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_dim_rejected_and_debug_hides_weights() {
        let clf = ServerClassifier::new(weights(), ScoreMode::Cosine);
        assert!(matches!(
            clf.scores(&Tensor::row(vec![1.0, 0.0])),
            Err(Error::DimMismatch { .. })
        ));
        let dbg = format!("{clf:?}");
        assert!(!dbg.contains("0.6") && !dbg.contains("0.8"));
    }
}
