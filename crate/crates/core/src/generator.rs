//! Conditional feature generator: trained on enhanced base features given
//! their class text features, then asked for features of new classes from
//! new-class text features alone.
//!
//! The default backend is a conditional VAE. The decoder adds its output to
//! the conditioning text feature, so an untrained or collapsed decoder
//! still lands next to the right class.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{eval_with_grad, Adam, AdamConfig, Bindings, Graph, NodeId, Params, Tensor};
use crate::emb::EmbeddingSet;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::vmf::ClassPrototypes;

const MAGIC: &[u8; 4] = b"GEN1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Cvae,
    Cgan,
}

impl Backend {
    fn tag(self) -> u8 {
        match self {
            Backend::Cvae => 0,
            Backend::Cgan => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Backend::Cvae),
            1 => Ok(Backend::Cgan),
            t => Err(Error::InvalidSet(format!("unknown generator backend tag {t}"))),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Cvae => "cvae",
            Backend::Cgan => "cgan",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cvae" => Ok(Backend::Cvae),
            "cgan" => Ok(Backend::Cgan),
            other => Err(Error::Config(format!("unknown generator backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub backend: Backend,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// β on the KL term (CVAE only).
    pub kl_weight: f64,
    /// Features synthesized per new class.
    pub per_class: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Cvae,
            latent_dim: 32,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            kl_weight: 0.1,
            per_class: 300,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("generator latent_dim and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::Config(
                "generator learning_rate must be positive and kl_weight non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    pub backend: Backend,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub feature_dim: usize,
    /// `enc.*` (CVAE recognition network), `dec.*` (generator) and
    /// `critic.*` (CGAN).
    pub params: Params,
}

fn init_dense(params: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
    let w = (0..fan_in * fan_out).map(|_| rng.sample(normal)).collect();
    params.insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w).expect("positive dims"));
    params.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
}

fn dense(g: &mut Graph, b: &Bindings, name: &str, x: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, b[&format!("{name}.w")])?;
    g.add_row(h, b[&format!("{name}.b")])
}

impl GeneratorState {
    pub fn init(backend: Backend, latent_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x4745_4E49);
        let hidden = 2 * dim;
        let mut p = Params::new();
        if backend == Backend::Cvae {
            init_dense(&mut p, "enc.h", 2 * dim, hidden, &mut rng);
            init_dense(&mut p, "enc.mu", hidden, latent_dim, &mut rng);
            init_dense(&mut p, "enc.lv", hidden, latent_dim, &mut rng);
        } else {
            init_dense(&mut p, "critic.h", 2 * dim, hidden, &mut rng);
            init_dense(&mut p, "critic.out", hidden, 1, &mut rng);
        }
        init_dense(&mut p, "dec.h", latent_dim + dim, hidden, &mut rng);
        init_dense(&mut p, "dec.out", hidden, dim, &mut rng);
        Self {
            backend,
            latent_dim,
            cond_dim: dim,
            feature_dim: dim,
            params: p,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.backend.tag());
        for v in [self.latent_dim, self.cond_dim, self.feature_dim, self.params.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        }
        for t in self.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: *MAGIC,
                found: magic.try_into().unwrap(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let backend = Backend::from_tag(r.take(1)?[0])?;
        let latent_dim = r.u32()? as usize;
        let cond_dim = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::InvalidSet("parameter name is not UTF-8".into()))?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            table.push((name, rows, cols));
        }
        let mut params = Params::new();
        for (name, rows, cols) in table {
            let bytes = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::InvalidSet(format!("{name}: shape {rows}x{cols} overflows")))?;
            let raw = r.take(bytes)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::matrix(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidSet(format!(
                "{} trailing bytes after generator payload",
                bytes.len() - r.pos
            )));
        }
        let state = Self {
            backend,
            latent_dim,
            cond_dim,
            feature_dim,
            params,
        };
        state.validate()?;
        Ok(state)
    }

    fn validate(&self) -> Result<()> {
        let need = |name: &str, rows: usize, cols: usize| -> Result<()> {
            match self.params.get(name) {
                Some(t) if t.rows() == rows && t.cols() == cols => Ok(()),
                Some(t) => Err(Error::Shape(format!(
                    "{name}: expected {rows}x{cols}, got {}x{}",
                    t.rows(),
                    t.cols()
                ))),
                None => Err(Error::Shape(format!("missing generator parameter {name}"))),
            }
        };
        if self.latent_dim == 0 || self.feature_dim == 0 || self.cond_dim != self.feature_dim {
            return Err(Error::Shape("generator dimensions are inconsistent".into()));
        }
        let h = self.params.get("dec.h.w").map_or(0, |t| t.cols());
        need("dec.h.w", self.latent_dim + self.cond_dim, h)?;
        need("dec.out.w", h, self.feature_dim)?;
        need("dec.out.b", 1, self.feature_dim)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// `t + MLP([z, t])`.
pub fn decoder_graph(g: &mut Graph, b: &Bindings, z: NodeId, t: NodeId) -> Result<NodeId> {
    let zt = g.concat_cols(z, t)?;
    let h = dense(g, b, "dec.h", zt)?;
    let h = g.gelu(h)?;
    let o = dense(g, b, "dec.out", h)?;
    g.add(o, t)
}

/// Reconstruction and KL nodes of the CVAE for one batch; `eps` is the
/// reparameterization noise.
pub fn cvae_terms(
    g: &mut Graph,
    b: &Bindings,
    x: &Tensor,
    t: &Tensor,
    eps: &Tensor,
) -> Result<(NodeId, NodeId)> {
    let xn = g.constant(x.clone());
    let tn = g.constant(t.clone());
    let xt = g.concat_cols(xn, tn)?;
    let h = dense(g, b, "enc.h", xt)?;
    let h = g.gelu(h)?;
    let mu = dense(g, b, "enc.mu", h)?;
    let lv = dense(g, b, "enc.lv", h)?;
    let half = g.scale(lv, 0.5)?;
    let std = g.exp(half)?;
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e)?;
    let z = g.add(mu, noise)?;
    let recon = decoder_graph(g, b, z, tn)?;
    // per-sample squared error summed over features, averaged over the batch
    let mse = g.mse(recon, xn)?;
    let recon_loss = g.scale(mse, x.cols() as f64)?;
    // KL(N(mu, e^lv) ‖ N(0, I)) summed over latents, averaged over the batch
    let mu2 = g.square(mu)?;
    let var = g.exp(lv)?;
    let a = g.add_const(lv, 1.0)?;
    let a = g.sub(a, mu2)?;
    let a = g.sub(a, var)?;
    let a = g.mean_all(a)?;
    let kl = g.scale(a, -0.5 * eps.cols() as f64)?;
    Ok((recon_loss, kl))
}

pub fn cvae_loss_graph(
    g: &mut Graph,
    b: &Bindings,
    x: &Tensor,
    t: &Tensor,
    eps: &Tensor,
    kl_weight: f64,
) -> Result<NodeId> {
    let (recon, kl) = cvae_terms(g, b, x, t, eps)?;
    let kl = g.scale(kl, kl_weight)?;
    g.add(recon, kl)
}

fn critic_graph(g: &mut Graph, b: &Bindings, x: NodeId, t: NodeId) -> Result<NodeId> {
    let xt = g.concat_cols(x, t)?;
    let h = dense(g, b, "critic.h", xt)?;
    let h = g.gelu(h)?;
    dense(g, b, "critic.out", h)
}

/// Hinge losses: critic `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`,
/// generator `−mean(D(fake))`.
fn cgan_graph(g: &mut Graph, b: &Bindings, x: &Tensor, t: &Tensor, z: &Tensor, critic_step: bool) -> Result<NodeId> {
    let tn = g.constant(t.clone());
    let zn = g.constant(z.clone());
    let fake = decoder_graph(g, b, zn, tn)?;
    let fake = g.normalize_rows(fake)?;
    let d_fake = critic_graph(g, b, fake, tn)?;
    if critic_step {
        let xn = g.constant(x.clone());
        let d_real = critic_graph(g, b, xn, tn)?;
        let r = g.scale(d_real, -1.0)?;
        let r = g.add_const(r, 1.0)?;
        let r = g.relu(r)?;
        let r = g.mean_all(r)?;
        let f = g.add_const(d_fake, 1.0)?;
        let f = g.relu(f)?;
        let f = g.mean_all(f)?;
        g.add(r, f)
    } else {
        let m = g.mean_all(d_fake)?;
        g.scale(m, -1.0)
    }
}

fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("valid dims")
}

#[derive(Debug, Clone)]
pub struct GeneratorOutcome {
    pub state: GeneratorState,
    /// Mean training loss of each epoch (CVAE: reconstruction + β·KL;
    /// CGAN: generator hinge loss).
    pub loss_history: Vec<f64>,
    /// Smallest batch KL seen during CVAE training.
    pub min_kl: f64,
    /// CVAE loss over the whole set before and after training, evaluated
    /// with the same noise draw.
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn conditioning(set: &EmbeddingSet, text: &ClassPrototypes) -> Result<Tensor> {
    if text.dim() != set.dim() {
        return Err(Error::DimMismatch {
            expected: set.dim(),
            got: text.dim(),
        });
    }
    let rows = set
        .class_names()
        .iter()
        .map(|n| {
            text.class_names()
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::UnknownClass(format!("no text feature for class {n:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_record: Vec<usize> = set.labels().iter().map(|&l| rows[l as usize]).collect();
    Ok(text.directions().select_rows(&per_record))
}

fn full_cvae_loss(params: &Params, x: &Tensor, t: &Tensor, eps: &Tensor, beta: f64) -> Result<f64> {
    crate::diffmath::eval(params, |g, b| cvae_loss_graph(g, b, x, t, eps, beta))
}

pub fn train_generator(
    enhanced_base: &EmbeddingSet,
    base_text: &ClassPrototypes,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<GeneratorOutcome> {
    config.validate()?;
    if enhanced_base.is_empty() {
        return Err(Error::InvalidSet("generator needs training features".into()));
    }
    let t = conditioning(enhanced_base, base_text)?;
    let x = Tensor::matrix(enhanced_base.len(), enhanced_base.dim(), enhanced_base.to_f64_rows())?;
    let d = x.cols();
    let l = config.latent_dim;
    let mut state = GeneratorState::init(config.backend, l, d, seed);
    let mut params = std::mem::take(&mut state.params);
    let probe = standard_normal(x.rows(), l, &mut rng_for(seed, 0x5052_4F42));
    let initial_loss = match config.backend {
        Backend::Cvae => full_cvae_loss(&params, &x, &t, &probe, config.kl_weight)?,
        Backend::Cgan => f64::NAN,
    };

    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut critic_adam = Adam::new(AdamConfig {
        beta1: 0.5,
        ..AdamConfig::with_lr(config.learning_rate)
    });
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut min_kl = f64::INFINITY;
    let mut noise_rng = rng_for(seed, 0x4E4F_4953);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(seed, 0x4745_4E00 ^ epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select_rows(batch);
            let tb = t.select_rows(batch);
            let eps = standard_normal(batch.len(), l, &mut noise_rng);
            let loss = match config.backend {
                Backend::Cvae => {
                    let kl_value = std::cell::Cell::new(0.0);
                    let (loss, grads) = eval_with_grad(&params, |g, b| {
                        let (recon, kl) = cvae_terms(g, b, &xb, &tb, &eps)?;
                        kl_value.set(g.value(kl).item());
                        let kl = g.scale(kl, config.kl_weight)?;
                        g.add(recon, kl)
                    })?;
                    min_kl = min_kl.min(kl_value.get());
                    adam.step(&mut params, &grads)?;
                    loss
                }
                Backend::Cgan => {
                    let (_, grads) = eval_with_grad(&params, |g, b| cgan_graph(g, b, &xb, &tb, &eps, true))?;
                    let critic: Params = grads.into_iter().filter(|(k, _)| k.starts_with("critic.")).collect();
                    critic_adam.step(&mut params, &critic)?;
                    let (loss, grads) = eval_with_grad(&params, |g, b| cgan_graph(g, b, &xb, &tb, &eps, false))?;
                    let gen: Params = grads.into_iter().filter(|(k, _)| k.starts_with("dec.")).collect();
                    adam.step(&mut params, &gen)?;
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("generator loss at epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
        }
        history.push(total / x.rows() as f64);
        log::debug!("generator epoch {epoch}: loss {:.5}", history.last().unwrap());
    }
    let final_loss = match config.backend {
        Backend::Cvae => full_cvae_loss(&params, &x, &t, &probe, config.kl_weight)?,
        Backend::Cgan => f64::NAN,
    };
    state.params = params;
    Ok(GeneratorOutcome {
        state,
        loss_history: history,
        min_kl,
        initial_loss,
        final_loss,
    })
}

/// `per_class` L2-normalized decodes of `z ~ N(0, I)` for each class text
/// feature. Class `c` draws from its own noise stream, so the result does
/// not depend on how classes are scheduled.
pub fn synthesize(
    state: &GeneratorState,
    class_text: &ClassPrototypes,
    per_class: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    if class_text.dim() != state.cond_dim {
        return Err(Error::DimMismatch {
            expected: state.cond_dim,
            got: class_text.dim(),
        });
    }
    let decoder: Params = state
        .params
        .iter()
        .filter(|(k, _)| k.starts_with("dec."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let parts = (0..class_text.len())
        .into_par_iter()
        .map(|c| -> Result<Tensor> {
            if per_class == 0 {
                return Ok(Tensor::zeros(0, state.feature_dim));
            }
            let z = standard_normal(per_class, state.latent_dim, &mut rng_for(derive_seed(seed, c as u64), 0x5359_4E54));
            let t = Tensor::from_rows(&vec![class_text.direction(c).to_vec(); per_class])?;
            let mut g = Graph::new();
            let b: Bindings = decoder.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect();
            let zn = g.constant(z);
            let tn = g.constant(t);
            let out = decoder_graph(&mut g, &b, zn, tn)?;
            g.value(out).normalized_rows()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = EmbeddingSet::new(state.feature_dim, class_text.class_names().to_vec())?;
    for (c, part) in parts.iter().enumerate() {
        for r in 0..part.rows() {
            set.push_f64(c, part.row_slice(r))?;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_diff_check;

    fn text(rows: &[Vec<f64>]) -> ClassPrototypes {
        let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
        ClassPrototypes::new(names, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn cvae_gradient_matches_finite_differences() {
        let state = GeneratorState::init(Backend::Cvae, 2, 3, 5);
        let mut rng = rng_for(1, 2);
        let x = standard_normal(4, 3, &mut rng);
        let t = standard_normal(4, 3, &mut rng);
        let eps = standard_normal(4, 2, &mut rng);
        let err = finite_diff_check(&state.params, |g, b| cvae_loss_graph(g, b, &x, &t, &eps, 0.1), 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn memorizes_a_single_point() {
        let p = vec![0.6, 0.0, 0.8];
        let mut set = EmbeddingSet::new(3, vec!["c0".into()]).unwrap();
        for _ in 0..16 {
            set.push_f64(0, &p).unwrap();
        }
        let cfg = GeneratorConfig {
            kl_weight: 0.0,
            latent_dim: 2,
            epochs: 300,
            batch_size: 16,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let out = train_generator(&set, &text(&[vec![0.0, 1.0, 0.0]]), &cfg, 3).unwrap();
        assert!(out.min_kl >= 0.0);
        assert!(out.final_loss / 3.0 < 1e-3, "per-element mse {}", out.final_loss / 3.0);
    }

    #[test]
    fn synthesis_contract() {
        let state = GeneratorState::init(Backend::Cvae, 4, 3, 1);
        let t = text(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert!(synthesize(&state, &t, 0, 1).unwrap().is_empty());
        let a = synthesize(&state, &t, 50, 9).unwrap();
        assert_eq!(a, synthesize(&state, &t, 50, 9).unwrap());
        assert_eq!(a.class_counts(), vec![50, 50]);
        for i in 0..a.len() {
            let n: f64 = a.vector_f64(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // same noise stream, different condition
        let one = synthesize(&state, &text(&[vec![1.0, 0.0, 0.0]]), 20, 4).unwrap();
        let two = synthesize(&state, &text(&[vec![0.0, 0.0, 1.0]]), 20, 4).unwrap();
        let mean_cos: f64 = (0..20)
            .map(|i| one.vector_f64(i).iter().zip(two.vector_f64(i)).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / 20.0;
        assert!(mean_cos < 1.0 - 1e-4);
        let wide = text(&[vec![1.0, 0.0, 0.0, 0.0]]);
        assert!(matches!(synthesize(&state, &wide, 1, 0), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn missing_text_feature_is_rejected() {
        let mut set = EmbeddingSet::new(2, vec!["zebra".into()]).unwrap();
        set.push(0, &[1.0, 0.0]).unwrap();
        let err = train_generator(&set, &text(&[vec![1.0, 0.0]]), &GeneratorConfig::default(), 0);
        assert!(matches!(err, Err(Error::UnknownClass(_))));
    }

    #[test]
    fn blob_round_trip_and_errors() {
        let state = GeneratorState::init(Backend::Cgan, 3, 4, 2);
        let bytes = state.to_bytes();
        assert_eq!(&bytes[..4], b"GEN1");
        assert_eq!(GeneratorState::from_bytes(&bytes).unwrap(), state);
        assert!(matches!(GeneratorState::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(GeneratorState::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(GeneratorState::from_bytes(&v2), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn cgan_trains_and_separates_conditions() {
        let t = text(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let mut set = EmbeddingSet::new(3, t.class_names().to_vec()).unwrap();
        for i in 0..32 {
            let j = 0.1 * (i % 4) as f64;
            set.push_f64(0, &[1.0, 0.0, j]).unwrap();
            set.push_f64(1, &[0.0, 1.0, j]).unwrap();
        }
        let set = set.normalize().unwrap();
        let cfg = GeneratorConfig {
            backend: Backend::Cgan,
            latent_dim: 2,
            epochs: 5,
            ..Default::default()
        };
        let out = train_generator(&set, &t, &cfg, 1).unwrap();
        assert_eq!(out.loss_history.len(), 5);
        let s = synthesize(&out.state, &t, 10, 2).unwrap();
        let v0 = s.vector_f64(0);
        let v1 = s.vector_f64(10);
        assert!(v0.iter().zip(&v1).map(|(a, b)| a * b).sum::<f64>() < 1.0 - 1e-4);
    }
}
