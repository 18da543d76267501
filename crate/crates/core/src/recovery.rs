//! Base-class feature recovery from a protected classifier.
//!
//! White-box: the classifier weights are the vMF mean directions.
//! Black-box: mean directions start at the class text features and are
//! tuned so that their cosine scores on sampled virtual features match the
//! scores the prediction service returns for the same features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffmath::{eval, eval_with_grad, Adam, AdamConfig, Bindings, Graph, NodeId, Params, Tensor};
use crate::emb::EmbeddingSet;
use crate::error::{Error, Result};
use crate::oracle::PredictionService;
use crate::seed::{derive_seed, rng_for};
use crate::vmf::{derive_kappa, sample_all_classes, ClassPrototypes, VmfParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryMode {
    #[serde(rename = "white-box", alias = "white")]
    WhiteBox,
    #[serde(rename = "black-box", alias = "black")]
    BlackBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub samples_per_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    /// Reuse one virtual pool for every black-box epoch instead of
    /// resampling around the current prototypes.
    pub freeze_pool: bool,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 300,
            epochs: 100,
            learning_rate: 3e-4,
            batch_size: 64,
            lambda: 1.0,
            freeze_pool: false,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("recovery epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda > 0.0) {
            return Err(Error::Config("recovery learning_rate and lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Samples `samples_per_class` virtual features per class around the
/// classifier weights.
pub fn recover_whitebox(
    weights: &ClassPrototypes,
    config: &RecoveryConfig,
    seed: u64,
) -> Result<(EmbeddingSet, VmfParams)> {
    config.validate()?;
    let params = VmfParams::from_prototypes(weights.clone(), config.lambda)?;
    let set = sample_all_classes(&params, config.samples_per_class, seed)?;
    Ok((set, params))
}

#[derive(Debug, Clone)]
pub struct BlackBoxOutcome {
    pub virtual_base: EmbeddingSet,
    pub prototypes: ClassPrototypes,
    pub params: VmfParams,
    /// Mean prototype-matching loss of each epoch.
    pub loss_history: Vec<f64>,
    /// Loss of the initial prototypes on the first virtual pool.
    pub initial_loss: f64,
    /// Loss of the final prototypes on the returned virtual set.
    pub final_loss: f64,
    pub converged: bool,
}

/// Mean over samples and classes of `(score − cos(x, M_c))²`.
pub fn proto_loss_graph(
    graph: &mut Graph,
    prototypes: NodeId,
    features: &Tensor,
    scores: &Tensor,
) -> Result<NodeId> {
    let x = graph.constant(features.clone());
    let s = graph.constant(scores.clone());
    let cos = graph.cosine_similarity(x, prototypes)?;
    graph.mse(cos, s)
}

fn proto_loss(prototypes: &Tensor, features: &Tensor, scores: &Tensor) -> Result<f64> {
    let mut p = Params::new();
    p.insert("m".into(), prototypes.clone());
    eval(&p, |g: &mut Graph, b: &Bindings| proto_loss_graph(g, b["m"], features, scores))
}

fn query_all(server: &impl PredictionService, set: &EmbeddingSet, classes: usize) -> Result<(Tensor, Tensor)> {
    let x = Tensor::matrix(set.len(), set.dim(), set.to_f64_rows())?;
    let s = server.predict(&x)?;
    if s.rows() != x.rows() || s.cols() != classes {
        return Err(Error::Remote(format!(
            "expected {}x{} scores, got {}x{}",
            x.rows(),
            classes,
            s.rows(),
            s.cols()
        )));
    }
    Ok((x, s))
}

/// Tunes the prototypes against the prediction service and returns them
/// with a fresh virtual set sampled around them.
pub fn recover_blackbox(
    text_prototypes: &ClassPrototypes,
    server: &impl PredictionService,
    config: &RecoveryConfig,
    seed: u64,
) -> Result<BlackBoxOutcome> {
    config.validate()?;
    let info = server.info()?;
    if info.dim != text_prototypes.dim() {
        return Err(Error::DimMismatch {
            expected: text_prototypes.dim(),
            got: info.dim,
        });
    }
    if info.num_classes != text_prototypes.len() {
        return Err(Error::Remote(format!(
            "service scores {} classes but {} text prototypes were given",
            info.num_classes,
            text_prototypes.len()
        )));
    }
    let classes = text_prototypes.len();
    let names = text_prototypes.class_names().to_vec();
    // fixed at the text geometry for the whole run
    let kappa_text = derive_kappa(text_prototypes)?;

    let mut params = Params::new();
    params.insert("m".into(), text_prototypes.directions().clone());
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut history = Vec::with_capacity(config.epochs);
    let mut initial_loss = f64::NAN;
    let mut frozen: Option<(Tensor, Tensor)> = None;

    for epoch in 0..config.epochs {
        let (x, s) = match &frozen {
            Some(pool) => pool.clone(),
            None => {
                let current = ClassPrototypes::new(names.clone(), params["m"].clone())?;
                let vmf = VmfParams::new(current, kappa_text, config.lambda)?;
                let pool = sample_all_classes(&vmf, config.samples_per_class, derive_seed(seed, epoch as u64))?;
                let q = query_all(server, &pool, classes)?;
                if config.freeze_pool {
                    frozen = Some(q.clone());
                }
                q
            }
        };
        if epoch == 0 {
            initial_loss = proto_loss(&params["m"], &x, &s)?;
        }
        if x.rows() == 0 {
            history.push(0.0);
            continue;
        }

        let mut order: Vec<usize> = (0..x.rows()).collect();
        order.shuffle(&mut rng_for(seed, 0x5348_5546 ^ epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select_rows(batch);
            let sb = s.select_rows(batch);
            let (loss, grads) = eval_with_grad(&params, |g, b| proto_loss_graph(g, b["m"], &xb, &sb))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("prototype loss at epoch {epoch}")));
            }
            adam.step(&mut params, &grads)?;
            let m = params.get_mut("m").unwrap();
            *m = m.normalized_rows()?;
            total += loss * batch.len() as f64;
        }
        history.push(total / x.rows() as f64);
    }

    let prototypes = ClassPrototypes::new(names, params["m"].clone())?;
    let vmf = VmfParams::new(prototypes.clone(), kappa_text, config.lambda)?;
    let virtual_base = sample_all_classes(&vmf, config.samples_per_class, derive_seed(seed, u64::MAX))?;
    let final_loss = if virtual_base.is_empty() {
        0.0
    } else {
        let (x, s) = query_all(server, &virtual_base, classes)?;
        proto_loss(prototypes.directions(), &x, &s)?
    };
    let converged = final_loss < 1e-8 || final_loss <= 0.1 * initial_loss;
    if !converged {
        log::warn!(
            "prototype recovery did not converge: loss {initial_loss:.3e} -> {final_loss:.3e}"
        );
    }
    Ok(BlackBoxOutcome {
        virtual_base,
        prototypes,
        params: vmf,
        loss_history: history,
        initial_loss,
        final_loss,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleInfo, ScoreMode, ServerClassifier};

    fn protos(rows: &[Vec<f64>]) -> ClassPrototypes {
        let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
        ClassPrototypes::new(names, Tensor::from_rows(rows).unwrap().normalized_rows().unwrap()).unwrap()
    }

    fn small() -> RecoveryConfig {
        RecoveryConfig {
            samples_per_class: 40,
            epochs: 5,
            ..Default::default()
        }
    }

    /// Answers every query with the same score.
    struct Constant(OracleInfo);

    impl PredictionService for Constant {
        fn info(&self) -> Result<OracleInfo> {
            Ok(self.0)
        }

        fn predict(&self, features: &Tensor) -> Result<Tensor> {
            Ok(Tensor::matrix(features.rows(), self.0.num_classes, vec![0.3; features.rows() * self.0.num_classes])?)
        }
    }

    #[test]
    fn white_box_examples() {
        let anti = protos(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]);
        let cfg = RecoveryConfig {
            samples_per_class: 10,
            ..Default::default()
        };
        let (set, params) = recover_whitebox(&anti, &cfg, 2).unwrap();
        assert_eq!(set.class_counts(), vec![10, 10]);
        for c in 0..2 {
            let mut mean = [0.0f64; 3];
            for (_, v) in set.iter().filter(|(l, _)| *l as usize == c) {
                mean.iter_mut().zip(v).for_each(|(m, x)| *m += *x as f64);
            }
            let n = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
            let cos: f64 = mean.iter().zip(anti.direction(c)).map(|(m, d)| m * d).sum::<f64>() / n;
            assert!(cos > 0.5);
        }
        assert_eq!(set, recover_whitebox(&anti, &cfg, 2).unwrap().0);
        assert!((params.kappa_text - 36.0 / (std::f64::consts::PI.powi(2))).abs() < 1e-9);

        let none = RecoveryConfig {
            samples_per_class: 0,
            ..Default::default()
        };
        assert!(recover_whitebox(&anti, &none, 2).unwrap().0.is_empty());
    }

    #[test]
    fn true_weights_are_a_fixed_point() {
        let w = protos(&[vec![1.0, 0.2, 0.0, 0.1], vec![0.0, 1.0, 0.3, 0.0], vec![0.2, 0.0, 0.1, 1.0]]);
        let server = ServerClassifier::new(w.clone(), ScoreMode::Cosine);
        let out = recover_blackbox(&w, &server, &small(), 1).unwrap();
        assert!(out.initial_loss < 1e-10);
        assert!(out.converged);
    }

    #[test]
    fn constant_service_reports_non_convergence() {
        let text = protos(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let server = Constant(OracleInfo {
            dim: 3,
            num_classes: 2,
            score_mode: ScoreMode::Cosine,
        });
        let out = recover_blackbox(&text, &server, &small(), 1).unwrap();
        assert!(!out.converged);
        assert_eq!(out.loss_history.len(), 5);
    }

    #[test]
    fn deterministic_and_checks_service_shape() {
        let w = protos(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let text = protos(&[vec![1.0, 0.3, 0.0], vec![0.0, 1.0, 0.3], vec![0.3, 0.0, 1.0]]);
        let server = ServerClassifier::new(w, ScoreMode::Cosine);
        let a = recover_blackbox(&text, &server, &small(), 8).unwrap();
        let b = recover_blackbox(&text, &server, &small(), 8).unwrap();
        assert_eq!(a.prototypes, b.prototypes);
        assert_eq!(a.virtual_base, b.virtual_base);
        assert_eq!(a.loss_history, b.loss_history);

        let wrong = protos(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(recover_blackbox(&wrong, &server, &small(), 8), Err(Error::DimMismatch { .. })));
    }
}
