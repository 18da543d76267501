//! Feature-language prompt tuning.
//!
//! Four learnable prompt vectors replace the class-agnostic prefix of the
//! text prompt. A light mapping network turns the same prompts into a
//! shift that is added to every image feature:
//!
//! ```text
//! shift = ¼ Σᵢ F(pᵢ)               F: Linear → GELU → Linear
//! x̂     = normalize(x + α·shift)
//! t̂_c   = Encoder(p₁ p₂ p₃ p₄ cls_c)
//! loss  = −log softmax_c(cos(x̂, t̂_c) / τ)[y]
//! ```
//!
//! When only fixed text features are available (exported from a real
//! vision-language model) the text side is frozen and only the shift path
//! is trained.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{eval_with_grad, Adam, AdamConfig, Axis, Bindings, Graph, NodeId, Params, Tensor};
use crate::emb::EmbeddingSet;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::vmf::ClassPrototypes;

pub const NUM_PROMPTS: usize = 4;
pub const CLIP_TEMPERATURE: f64 = 0.01;
const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub tau: f64,
    /// Token embedding width used when no token table is supplied.
    pub token_dim: usize,
}

impl Default for FlptConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 3e-4,
            alpha: 1.0,
            tau: CLIP_TEMPERATURE,
            token_dim: 32,
        }
    }
}

impl FlptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.token_dim == 0 {
            return Err(Error::Config("flpt batch_size and token_dim must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.tau > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config(
                "flpt learning_rate and tau must be positive, alpha non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// `F_Θ`: token embedding (width e) → hidden (2e, GELU) → feature (d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingNetwork {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MappingNetwork {
    /// Output layer starts at zero so the initial shift is the zero vector.
    pub fn new(token_dim: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let hidden = 2 * token_dim;
        Self {
            w1: gaussian(token_dim, hidden, 1.0 / (token_dim as f64).sqrt(), rng),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, feature_dim),
            b2: Tensor::zeros(1, feature_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    /// `4 × e`.
    pub prompts: Tensor,
    pub mapping: MappingNetwork,
    pub alpha: f64,
    pub tau: f64,
}

const P_PROMPTS: &str = "prompts";
const P_W1: &str = "map.w1";
const P_B1: &str = "map.b1";
const P_W2: &str = "map.w2";
const P_B2: &str = "map.b2";

impl PromptState {
    pub fn init(
        token_dim: usize,
        feature_dim: usize,
        prefix: Option<&Tensor>,
        config: &FlptConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, 0x464C_5054);
        let prompts = match prefix {
            Some(p) if p.rows() == NUM_PROMPTS && p.cols() == token_dim => p.clone(),
            Some(p) => {
                return Err(Error::Shape(format!(
                    "prefix prompts must be {NUM_PROMPTS}x{token_dim}, got {}x{}",
                    p.rows(),
                    p.cols()
                )))
            }
            None => gaussian(NUM_PROMPTS, token_dim, PROMPT_INIT_STD, &mut rng),
        };
        Ok(Self {
            prompts,
            mapping: MappingNetwork::new(token_dim, feature_dim, &mut rng),
            alpha: config.alpha,
            tau: config.tau,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.prompts.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.mapping.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.rows() != NUM_PROMPTS {
            return Err(Error::Shape(format!(
                "expected {NUM_PROMPTS} prompt vectors, got {}",
                self.prompts.rows()
            )));
        }
        let e = self.token_dim();
        let m = &self.mapping;
        if m.w1.rows() != e || m.b1.cols() != m.w1.cols() || m.w2.rows() != m.w1.cols() || m.b2.cols() != m.w2.cols() {
            return Err(Error::Shape("mapping network shapes are inconsistent".into()));
        }
        Ok(())
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert(P_PROMPTS.into(), self.prompts.clone());
        p.insert(P_W1.into(), self.mapping.w1.clone());
        p.insert(P_B1.into(), self.mapping.b1.clone());
        p.insert(P_W2.into(), self.mapping.w2.clone());
        p.insert(P_B2.into(), self.mapping.b2.clone());
        p
    }

    fn load_params(&mut self, p: &Params) {
        self.prompts = p[P_PROMPTS].clone();
        self.mapping.w1 = p[P_W1].clone();
        self.mapping.b1 = p[P_B1].clone();
        self.mapping.w2 = p[P_W2].clone();
        self.mapping.b2 = p[P_B2].clone();
    }

    /// `¼ Σᵢ F(pᵢ)`; identical for every sample and class.
    pub fn compute_shift(&self) -> Vec<f64> {
        let mut g = Graph::new();
        let b = bind_constants(&mut g, &self.to_params());
        let s = shift_graph(&mut g, &b).expect("validated shapes");
        g.value(s).data().to_vec()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: PromptState = serde_json::from_str(&text)?;
        state.validate()?;
        Ok(state)
    }
}

fn bind_constants(g: &mut Graph, params: &Params) -> Bindings {
    params
        .iter()
        .map(|(k, v)| (k.clone(), g.constant(v.clone())))
        .collect()
}

/// `1 × d` shift node built from the prompt and mapping bindings.
pub fn shift_graph(g: &mut Graph, b: &Bindings) -> Result<NodeId> {
    let h = g.matmul(b[P_PROMPTS], b[P_W1])?;
    let h = g.add_row(h, b[P_B1])?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, b[P_W2])?;
    let o = g.add_row(o, b[P_B2])?;
    g.mean(o, Axis::Rows)
}

/// Frozen text encoder: mean-pool the five tokens, two-layer GELU network
/// (hidden width 4d), L2-normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TextEncoder {
    pub fn random(token_dim: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x5445_5854);
        let hidden = 4 * feature_dim;
        Self {
            w1: gaussian(token_dim, hidden, 1.0 / (token_dim as f64).sqrt(), &mut rng),
            b1: gaussian(1, hidden, 0.1, &mut rng),
            w2: gaussian(hidden, feature_dim, 1.0 / (hidden as f64).sqrt(), &mut rng),
            b2: Tensor::zeros(1, feature_dim),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.cols()
    }

    /// `C × d` unit text features for the `C × e` class-token matrix.
    pub fn encode_graph(&self, g: &mut Graph, prompts: NodeId, class_tokens: &Tensor) -> Result<NodeId> {
        let tokens = 1.0 + NUM_PROMPTS as f64;
        let cls = g.constant(class_tokens.clone());
        let cls = g.scale(cls, 1.0 / tokens)?;
        let pm = g.mean(prompts, Axis::Rows)?;
        let pm = g.scale(pm, NUM_PROMPTS as f64 / tokens)?;
        let pooled = g.add_row(cls, pm)?;
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let h = g.matmul(pooled, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, w2)?;
        let o = g.add_row(o, b2)?;
        g.normalize_rows(o)
    }
}

/// Class-name token embeddings, JSON `{"dim": e, "classes": {"name": [..]}}`
/// with an optional `"prefix"` of four vectors for prompt initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTokenTable {
    pub dim: usize,
    pub classes: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<Vec<Vec<f64>>>,
}

impl TextTokenTable {
    /// Hash-seeded standard Gaussian embedding per class name.
    pub fn synthetic(names: &[String], dim: usize) -> Self {
        let classes = names
            .iter()
            .map(|n| {
                let digest = Sha256::digest(n.as_bytes());
                let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
                let mut rng = rng_for(seed, 0);
                let v = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                (n.clone(), v)
            })
            .collect();
        Self {
            dim,
            classes,
            prefix: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("token table dim must be positive".into()));
        }
        for (name, v) in &self.classes {
            if v.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("token embedding of {name:?}")));
            }
        }
        if let Some(p) = &self.prefix {
            if p.len() != NUM_PROMPTS || p.iter().any(|v| v.len() != self.dim) {
                return Err(Error::Config(format!(
                    "prefix must hold {NUM_PROMPTS} vectors of width {}",
                    self.dim
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: TextTokenTable = serde_json::from_str(&text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn prefix_tensor(&self) -> Option<Tensor> {
        self.prefix.as_ref().map(|p| Tensor::from_rows(p).expect("validated"))
    }

    pub fn matrix(&self, names: &[String]) -> Result<Tensor> {
        let rows = names
            .iter()
            .map(|n| {
                self.classes
                    .get(n)
                    .cloned()
                    .ok_or_else(|| Error::UnknownClass(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Where class text features come from during prompt tuning.
#[derive(Debug, Clone)]
pub enum TextSource {
    /// Prompts flow through a frozen encoder over class-name tokens.
    Prompted {
        encoder: TextEncoder,
        tokens: TextTokenTable,
    },
    /// Fixed exported text features; only the visual shift is trained.
    Frozen(ClassPrototypes),
}

impl TextSource {
    pub fn token_dim(&self, config: &FlptConfig) -> usize {
        match self {
            TextSource::Prompted { tokens, .. } => tokens.dim,
            TextSource::Frozen(_) => config.token_dim,
        }
    }

    /// Prefix-token embeddings that seed the prompts, if the table has them.
    pub fn prefix(&self) -> Option<Tensor> {
        match self {
            TextSource::Prompted { tokens, .. } => tokens.prefix_tensor(),
            TextSource::Frozen(_) => None,
        }
    }

    /// `C × d` text-feature node for `names`.
    fn text_graph(&self, g: &mut Graph, prompts: NodeId, names: &[String]) -> Result<NodeId> {
        match self {
            TextSource::Prompted { encoder, tokens } => {
                encoder.encode_graph(g, prompts, &tokens.matrix(names)?)
            }
            TextSource::Frozen(protos) => {
                let t = protos.select(names)?;
                Ok(g.constant(t.directions().clone()))
            }
        }
    }

    /// Enhanced text features for `names` under the given prompt state.
    pub fn encode(&self, state: &PromptState, names: &[String]) -> Result<ClassPrototypes> {
        let mut g = Graph::new();
        let p = g.constant(state.prompts.clone());
        let t = self.text_graph(&mut g, p, names)?;
        ClassPrototypes::new(names.to_vec(), g.value(t).clone())
    }
}

/// Enhanced text feature for a single class.
pub fn encode_class_text(
    encoder: &TextEncoder,
    tokens: &TextTokenTable,
    state: &PromptState,
    class: &str,
) -> Result<Vec<f64>> {
    let source = TextSource::Prompted {
        encoder: encoder.clone(),
        tokens: tokens.clone(),
    };
    let t = source.encode(state, &[class.to_owned()])?;
    Ok(t.direction(0).to_vec())
}

/// `normalize(x + α·shift)` for every record; labels unchanged.
pub fn enhance_features(features: &EmbeddingSet, state: &PromptState) -> Result<EmbeddingSet> {
    let shift = state.compute_shift();
    if shift.len() != features.dim() {
        return Err(Error::DimMismatch {
            expected: shift.len(),
            got: features.dim(),
        });
    }
    let mut out = EmbeddingSet::new(features.dim(), features.class_names().to_vec())?;
    for (label, v) in features.iter() {
        let x: Vec<f64> = v
            .iter()
            .zip(&shift)
            .map(|(&x, s)| x as f64 + state.alpha * s)
            .collect();
        let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector(out.len()));
        }
        let x: Vec<f64> = x.into_iter().map(|a| a / n).collect();
        out.push_f64(label, &x)?;
    }
    Ok(out)
}

/// `−log softmax(cos(x̂, t̂)/τ)[label]` for one feature, with a stable
/// log-sum-exp.
pub fn flpt_loss(enhanced: &[f64], label: usize, text: &[Vec<f64>], tau: f64) -> Result<f64> {
    if label >= text.len() {
        return Err(Error::UnknownClass(format!("label {label}")));
    }
    if !(tau > 0.0) || enhanced.iter().chain(text.iter().flatten()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("flpt loss inputs".into()));
    }
    let logits = text
        .iter()
        .map(|t| crate::diffmath::cosine_similarity(enhanced, t).map(|c| c / tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::diffmath::log_sum_exp(&logits) - logits[label])
}

/// Graph of the mean prompt-tuning loss over a batch.
pub fn flpt_loss_graph(
    g: &mut Graph,
    b: &Bindings,
    source: &TextSource,
    features: &Tensor,
    labels: &[usize],
    names: &[String],
    alpha: f64,
    tau: f64,
) -> Result<NodeId> {
    let shift = shift_graph(g, b)?;
    let shift = g.scale(shift, alpha)?;
    let x = g.constant(features.clone());
    let xhat = g.add_row(x, shift)?;
    let t = source.text_graph(g, b[P_PROMPTS], names)?;
    let logits = g.cosine_similarity(xhat, t)?;
    g.softmax_cross_entropy(logits, labels, tau)
}

#[derive(Debug, Clone)]
pub struct FlptOutcome {
    pub state: PromptState,
    pub enhanced_base: EmbeddingSet,
    /// Mean loss of each epoch.
    pub loss_history: Vec<f64>,
    /// Loss of the initial state over the whole training set.
    pub initial_loss: f64,
}

/// Mean loss of `state` over the whole set.
pub fn mean_flpt_loss(set: &EmbeddingSet, source: &TextSource, state: &PromptState) -> Result<f64> {
    let x = Tensor::matrix(set.len(), set.dim(), set.to_f64_rows())?;
    let labels: Vec<usize> = set.labels().iter().map(|&l| l as usize).collect();
    let names = set.class_names().to_vec();
    crate::diffmath::eval(&state.to_params(), |g, b| {
        flpt_loss_graph(g, b, source, &x, &labels, &names, state.alpha, state.tau)
    })
}

/// Adam on prompts and mapping network over the virtual base set.
pub fn train_flpt(
    virtual_base: &EmbeddingSet,
    source: &TextSource,
    config: &FlptConfig,
    seed: u64,
) -> Result<FlptOutcome> {
    config.validate()?;
    if virtual_base.is_empty() {
        return Err(Error::InvalidSet("prompt tuning needs a non-empty training set".into()));
    }
    let covered = virtual_base.class_counts().iter().filter(|&&n| n > 0).count();
    if covered < 2 {
        return Err(Error::InvalidSet("prompt tuning needs at least two classes".into()));
    }
    let d = virtual_base.dim();
    if let TextSource::Prompted { encoder, tokens } = source {
        if encoder.feature_dim() != d || encoder.token_dim() != tokens.dim {
            return Err(Error::DimMismatch {
                expected: d,
                got: encoder.feature_dim(),
            });
        }
    }
    let mut state = PromptState::init(source.token_dim(config), d, source.prefix().as_ref(), config, seed)?;
    let names = virtual_base.class_names().to_vec();
    let x = Tensor::matrix(virtual_base.len(), d, virtual_base.to_f64_rows())?;
    let labels: Vec<usize> = virtual_base.labels().iter().map(|&l| l as usize).collect();

    let initial_loss = mean_flpt_loss(virtual_base, source, &state)?;
    let mut params = state.to_params();
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(seed, 0x4550_4F43 ^ epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = eval_with_grad(&params, |g, b| {
                flpt_loss_graph(g, b, source, &xb, &yb, &names, config.alpha, config.tau)
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "prompt tuning loss at epoch {epoch} (batch of {})",
                    batch.len()
                )));
            }
            adam.step(&mut params, &grads)?;
            total += loss * batch.len() as f64;
        }
        history.push(total / x.rows() as f64);
        log::debug!("flpt epoch {epoch}: loss {:.5}", history.last().unwrap());
    }
    state.load_params(&params);
    let enhanced_base = enhance_features(virtual_base, &state)?;
    Ok(FlptOutcome {
        state,
        enhanced_base,
        loss_history: history,
        initial_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_diff_check;
    use proptest::prelude::*;

    fn state(e: usize, d: usize, seed: u64) -> PromptState {
        let mut s = PromptState::init(e, d, None, &FlptConfig::default(), seed).unwrap();
        let mut rng = rng_for(seed, 99);
        s.prompts = gaussian(NUM_PROMPTS, e, 0.5, &mut rng);
        s.mapping.w2 = gaussian(2 * e, d, 0.3, &mut rng);
        s.mapping.b1 = gaussian(1, 2 * e, 0.3, &mut rng);
        s
    }

    #[test]
    fn zero_output_layer_gives_zero_shift() {
        let s = PromptState::init(6, 4, None, &FlptConfig::default(), 1).unwrap();
        assert!(s.compute_shift().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_map_gives_that_constant() {
        let mut s = PromptState::init(3, 2, None, &FlptConfig::default(), 1).unwrap();
        s.mapping.b2 = Tensor::row(vec![0.25, -1.5]);
        assert_eq!(s.compute_shift(), vec![0.25, -1.5]);
    }

    #[test]
    fn shift_gradient_matches_finite_differences() {
        let s = state(5, 3, 4);
        let err = finite_diff_check(
            &s.to_params(),
            |g, b| {
                let sh = shift_graph(g, b)?;
                let sq = g.square(sh)?;
                g.sum_all(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn enhance_examples() {
        let mut set = EmbeddingSet::new(2, vec!["a".into(), "b".into()]).unwrap();
        set.push(0, &[1.0, 0.0]).unwrap();
        set.push(1, &[0.6, 0.8]).unwrap();
        let mut s = PromptState::init(3, 2, None, &FlptConfig::default(), 1).unwrap();
        s.alpha = 0.0;
        s.mapping.b2 = Tensor::row(vec![3.0, 3.0]);
        assert_eq!(enhance_features(&set, &s).unwrap(), set);

        s.alpha = 1.0;
        s.mapping.b2 = Tensor::row(vec![0.0, 0.0]);
        assert_eq!(enhance_features(&set, &s).unwrap(), set);

        s.mapping.b2 = Tensor::row(vec![0.0, 1.0]);
        let out = enhance_features(&set, &s).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((out.vector(0)[0] - h).abs() < 1e-6 && (out.vector(0)[1] - h).abs() < 1e-6);

        let wrong = EmbeddingSet::new(3, vec!["a".into()]).unwrap();
        assert!(enhance_features(&wrong, &s).is_err());
    }

    #[test]
    fn loss_examples() {
        let same = vec![vec![0.3, 0.4]; 4];
        let l = flpt_loss(&[1.0, 2.0], 2, &same, 0.01).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);

        // cos = (1, 0, −1): ln(1 + e^-100 + e^-200)
        let text = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let l = flpt_loss(&[1.0, 0.0], 0, &text, 0.01).unwrap();
        assert!(l < 1e-40);

        let l = flpt_loss(&[1.0, 0.0], 0, &[vec![1.0, 0.0], vec![-1.0, 0.0]], 0.01).unwrap();
        assert!(l.abs() < 1e-80);

        // cosines 0.6 and 0.4 at τ = 1
        let t = vec![vec![0.6, 0.8], vec![0.4, (1.0f64 - 0.16).sqrt()]];
        let l = flpt_loss(&[1.0, 0.0], 0, &t, 1.0).unwrap();
        assert!((l - (1.0 + (-0.2f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.598139).abs() < 1e-6);

        assert!(flpt_loss(&[1.0, 0.0], 5, &t, 1.0).is_err());
        assert!(flpt_loss(&[f64::NAN, 0.0], 0, &t, 1.0).is_err());
    }

    #[test]
    fn text_encoder_output_and_gradient() {
        let names: Vec<String> = (0..100).map(|i| format!("class {i}")).collect();
        let tokens = TextTokenTable::synthetic(&names, 8);
        let enc = TextEncoder::random(8, 5, 3);
        let s = state(8, 5, 2);
        let a = encode_class_text(&enc, &tokens, &s, "class 0").unwrap();
        let b = encode_class_text(&enc, &tokens, &s, "class 1").unwrap();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos < 1.0 - 1e-6);
        let src = TextSource::Prompted { encoder: enc.clone(), tokens: tokens.clone() };
        let all = src.encode(&s, &names).unwrap();
        for c in 0..100 {
            let n: f64 = all.direction(c).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(encode_class_text(&enc, &tokens, &s, "missing").is_err());

        let x = Tensor::row(vec![0.3, -0.2, 0.5, 0.1, 0.9]);
        let tok = tokens.matrix(&names[..1]).unwrap();
        let mut p = Params::new();
        p.insert("prompts".into(), s.prompts.clone());
        let err = finite_diff_check(
            &p,
            |g, b| {
                let t = enc.encode_graph(g, b["prompts"], &tok)?;
                let xn = g.constant(x.clone());
                let c = g.cosine_similarity(xn, t)?;
                g.sum_all(c)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn token_table_json() {
        let t: TextTokenTable =
            serde_json::from_str(r#"{"dim": 2, "classes": {"cat": [0.1, 0.2], "dog": [1, 2]}}"#)
                .unwrap();
        t.validate().unwrap();
        assert_eq!(t.matrix(&["dog".into()]).unwrap().data(), &[1.0, 2.0]);
        let bad: TextTokenTable =
            serde_json::from_str(r#"{"dim": 3, "classes": {"cat": [0.1, 0.2]}}"#).unwrap();
        assert!(bad.validate().is_err());
        let synthetic = TextTokenTable::synthetic(&["cat".into()], 4);
        assert_eq!(synthetic, TextTokenTable::synthetic(&["cat".into()], 4));
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    proptest! {
        #[test]
        fn loss_ignores_feature_scale(
            x in prop::collection::vec(-1.0..1.0f64, 4),
            text in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 2..5),
            tau in 0.01..1.0f64,
        ) {
            prop_assume!(x.iter().any(|v| v.abs() > 1e-2));
            prop_assume!(text.iter().all(|t| t.iter().any(|v| v.abs() > 1e-2)));
            let text: Vec<Vec<f64>> = text.iter().map(|t| unit(t)).collect();
            let base = flpt_loss(&x, 0, &text, tau).unwrap();
            for k in [0.5, 2.0] {
                let scaled: Vec<f64> = x.iter().map(|v| v * k).collect();
                prop_assert!((flpt_loss(&scaled, 0, &text, tau).unwrap() - base).abs() < 1e-9);
            }
        }

        #[test]
        fn shift_is_class_agnostic(v in prop::collection::vec(-1.0f32..1.0, 5), seed in any::<u64>()) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-2));
            let s = state(3, 5, seed);
            let mut set = EmbeddingSet::new(5, vec!["a".into(), "b".into()]).unwrap();
            set.push(0, &v).unwrap();
            set.push(1, &v).unwrap();
            let out = enhance_features(&set, &s).unwrap();
            let rows: Vec<Vec<f32>> = out.iter().map(|(_, r)| r.to_vec()).collect();
            prop_assert_eq!(&rows[0], &rows[1]);
            prop_assert_eq!(out.labels(), set.labels());
        }
    }
}
