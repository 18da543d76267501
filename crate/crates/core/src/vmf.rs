//! Class prototypes, the concentration rule, and a von Mises-Fisher sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::emb::EmbeddingSet;
use crate::error::{Error, Result};

/// Pairs of prototypes closer than this (radians) are treated as coincident.
pub const MIN_PROTOTYPE_ANGLE: f64 = 1e-6;

/// Below this concentration the sampler draws uniformly on the sphere.
pub const UNIFORM_KAPPA: f64 = 1e-12;

/// Per-class unit mean directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    class_names: Vec<String>,
    directions: Tensor,
}

impl ClassPrototypes {
    /// Normalizes every row of `directions`.
    pub fn new(class_names: Vec<String>, directions: Tensor) -> Result<Self> {
        if class_names.len() != directions.rows() {
            return Err(Error::Shape(format!(
                "{} class names for {} prototype rows",
                class_names.len(),
                directions.rows()
            )));
        }
        let directions = directions.normalized_rows()?;
        Ok(Self {
            class_names,
            directions,
        })
    }

    /// One prototype per class: the normalized mean of that class's records.
    pub fn from_class_means(set: &EmbeddingSet) -> Result<Self> {
        let (c, d) = (set.num_classes(), set.dim());
        let mut sums = Tensor::zeros(c, d);
        for (label, v) in set.iter() {
            for (s, &x) in sums.row_slice_mut(label).iter_mut().zip(v) {
                *s += x as f64;
            }
        }
        if let Some(empty) = set.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::InvalidSet(format!(
                "class {:?} has no records",
                set.class_names()[empty]
            )));
        }
        Self::new(set.class_names().to_vec(), sums)
    }

    /// Reads prototypes from a set holding exactly one record per class.
    pub fn from_embedding_set(set: &EmbeddingSet) -> Result<Self> {
        if set.class_counts().iter().any(|&n| n != 1) {
            return Err(Error::InvalidSet(
                "prototype file needs exactly one record per class".into(),
            ));
        }
        Self::from_class_means(set)
    }

    pub fn to_embedding_set(&self) -> Result<EmbeddingSet> {
        let mut set = EmbeddingSet::new(self.dim(), self.class_names.clone())?;
        for c in 0..self.len() {
            set.push_f64(c, self.direction(c))?;
        }
        Ok(set)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn directions(&self) -> &Tensor {
        &self.directions
    }

    pub fn direction(&self, class: usize) -> &[f64] {
        self.directions.row_slice(class)
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.directions.cols()
    }

    pub fn select(&self, names: &[String]) -> Result<ClassPrototypes> {
        let idx = names
            .iter()
            .map(|n| {
                self.class_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::UnknownClass(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassPrototypes {
            class_names: names.to_vec(),
            directions: self.directions.select_rows(&idx),
        })
    }
}

/// Concentration that puts six standard deviations of arc between the
/// closest pair of prototypes: `max over pairs of (arccos(μ·μ') / 6)^-2`.
pub fn derive_kappa(prototypes: &ClassPrototypes) -> Result<f64> {
    let c = prototypes.len();
    if c < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "concentration needs at least 2 prototypes, got {c}"
        )));
    }
    let mut kappa = 0.0f64;
    for i in 0..c {
        for j in i + 1..c {
            let a = prototypes.direction(i);
            let b = prototypes.direction(j);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let angle = dot.clamp(-1.0, 1.0).acos();
            if angle < MIN_PROTOTYPE_ANGLE {
                return Err(Error::DegenerateGeometry(format!(
                    "prototypes {:?} and {:?} coincide",
                    prototypes.class_names[i], prototypes.class_names[j]
                )));
            }
            let sigma = angle / 6.0;
            kappa = kappa.max(sigma.powi(-2));
        }
    }
    Ok(kappa)
}

/// Sampling distribution over all classes: `vMF(μ_c, λ·κ_text)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    pub prototypes: ClassPrototypes,
    pub kappa_text: f64,
    pub lambda: f64,
}

impl VmfParams {
    pub fn new(prototypes: ClassPrototypes, kappa_text: f64, lambda: f64) -> Result<Self> {
        if !(kappa_text > 0.0) || !(lambda > 0.0) {
            return Err(Error::Config(format!(
                "kappa_text ({kappa_text}) and lambda ({lambda}) must be positive"
            )));
        }
        Ok(Self {
            prototypes,
            kappa_text,
            lambda,
        })
    }

    pub fn from_prototypes(prototypes: ClassPrototypes, lambda: f64) -> Result<Self> {
        let kappa = derive_kappa(&prototypes)?;
        Self::new(prototypes, kappa, lambda)
    }

    pub fn effective_kappa(&self) -> f64 {
        self.lambda * self.kappa_text
    }
}

/// von Mises-Fisher distribution on the unit sphere in `d ≥ 2` dimensions.
///
/// Uses Wood's rejection sampler for the component along the mean
/// direction, a uniform direction in the orthogonal complement, and a
/// Householder reflection taking the first basis vector to `μ`.
#[derive(Debug, Clone)]
pub struct VonMisesFisher {
    mean: Vec<f64>,
    kappa: f64,
    // envelope constants; unused on the uniform branch
    b: f64,
    x0: f64,
    c: f64,
    beta: Beta<f64>,
    householder: Option<Vec<f64>>,
}

impl VonMisesFisher {
    pub fn new(mean: &[f64], kappa: f64) -> Result<Self> {
        let d = mean.len();
        if d < 2 {
            return Err(Error::DimMismatch {
                expected: 2,
                got: d,
            });
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::Config(format!("invalid concentration {kappa}")));
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateGeometry("zero mean direction".into()));
        }
        let mean: Vec<f64> = mean.iter().map(|x| x / norm).collect();

        let dm1 = (d - 1) as f64;
        // b = (−2κ + √(4κ² + (d−1)²)) / (d−1), rewritten to avoid cancellation
        let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
        let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).map_err(|e| Error::Config(e.to_string()))?;

        // u = e₁ − μ; reflecting through u maps e₁ to μ
        let mut u = mean.clone();
        u.iter_mut().for_each(|x| *x = -*x);
        u[0] += 1.0;
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let householder = if un > 1e-12 {
            Some(u.into_iter().map(|x| x / un).collect())
        } else {
            None
        };

        Ok(Self {
            mean,
            kappa,
            b,
            x0,
            c,
            beta,
            householder,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    fn sample_w<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let dm1 = (self.mean.len() - 1) as f64;
        loop {
            let z = self.beta.sample(rng);
            let w = (1.0 - (1.0 + self.b) * z) / (1.0 - (1.0 - self.b) * z);
            let u: f64 = rng.random();
            if self.kappa * w + dm1 * (1.0 - self.x0 * w).ln() - self.c >= u.ln() {
                return w;
            }
        }
    }
}

fn uniform_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-30 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl Distribution<Vec<f64>> for VonMisesFisher {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.mean.len();
        if self.kappa < UNIFORM_KAPPA {
            return uniform_direction(rng, d);
        }
        let w = self.sample_w(rng);
        let v = uniform_direction(rng, d - 1);
        let r = (1.0 - w * w).max(0.0).sqrt();
        let mut x = Vec::with_capacity(d);
        x.push(w);
        x.extend(v.iter().map(|vi| r * vi));
        if let Some(u) = &self.householder {
            let proj: f64 = u.iter().zip(&x).map(|(a, b)| a * b).sum();
            for (xi, ui) in x.iter_mut().zip(u) {
                *xi -= 2.0 * proj * ui;
            }
        }
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= n);
        x
    }
}

/// Deterministic per-class random stream: the seed picks the key and the
/// class index picks the ChaCha stream, so classes can be sampled in any
/// order or in parallel without changing results.
pub fn class_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `n` samples of one class from `vMF(μ_class, λ·κ_text)`.
pub fn sample_vmf(
    params: &VmfParams,
    class_index: usize,
    n: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    let protos = &params.prototypes;
    if class_index >= protos.len() {
        return Err(Error::UnknownClass(format!("class index {class_index}")));
    }
    let dist = VonMisesFisher::new(protos.direction(class_index), params.effective_kappa())?;
    let mut rng = class_rng(seed, class_index as u64);
    let mut set = EmbeddingSet::new(protos.dim(), protos.class_names().to_vec())?;
    for _ in 0..n {
        set.push_f64(class_index, &dist.sample(&mut rng))?;
    }
    Ok(set)
}

/// `per_class` samples for every class, classes in prototype order.
pub fn sample_all_classes(params: &VmfParams, per_class: usize, seed: u64) -> Result<EmbeddingSet> {
    let parts = (0..params.prototypes.len())
        .into_par_iter()
        .map(|c| sample_vmf(params, c, per_class, seed))
        .collect::<Result<Vec<_>>>()?;
    let protos = &params.prototypes;
    let mut set = EmbeddingSet::new(protos.dim(), protos.class_names().to_vec())?;
    for part in &parts {
        set.extend_from(part)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use std::f64::consts::PI;

    fn protos(rows: &[Vec<f64>]) -> ClassPrototypes {
        let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
        ClassPrototypes::new(names, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn kappa_closed_forms() {
        let anti = protos(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]);
        assert!((derive_kappa(&anti).unwrap() - 36.0 / (PI * PI)).abs() < 1e-9);
        let orth = protos(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert!((derive_kappa(&orth).unwrap() - 144.0 / (PI * PI)).abs() < 1e-9);
        // a–b and a–c orthogonal, b–c at 60°
        let s = 3f64.sqrt() / 2.0;
        let three = protos(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.5, s],
        ]);
        assert!((derive_kappa(&three).unwrap() - 324.0 / (PI * PI)).abs() < 1e-9);
    }

    #[test]
    fn kappa_errors() {
        assert!(derive_kappa(&protos(&[vec![1.0, 0.0]])).is_err());
        let dup = protos(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert!(matches!(derive_kappa(&dup), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn kappa_ignores_scale() {
        let a = protos(&[vec![1.0, 2.0, 0.5], vec![-0.3, 1.0, 2.0], vec![0.0, -1.0, 1.0]]);
        let b = protos(&[vec![3.0, 6.0, 1.5], vec![-0.03, 0.1, 0.2], vec![0.0, -7.0, 7.0]]);
        assert!((derive_kappa(&a).unwrap() - derive_kappa(&b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn huge_kappa_collapses_to_mean() {
        let mu = [0.2, -0.4, 0.1, 0.87];
        let dist = VonMisesFisher::new(&mu, 1e8).unwrap();
        let mut rng = class_rng(3, 0);
        for _ in 0..1000 {
            let x = dist.sample(&mut rng);
            let cos: f64 = x.iter().zip(dist.mean()).map(|(a, b)| a * b).sum();
            assert!(cos.clamp(-1.0, 1.0).acos() < 1e-3);
        }
    }

    #[test]
    fn samples_are_unit_norm_and_seeded() {
        let p = VmfParams::new(protos(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]), 5.0, 1.0)
            .unwrap();
        let a = sample_vmf(&p, 1, 200, 9).unwrap();
        let b = sample_vmf(&p, 1, 200, 9).unwrap();
        assert_eq!(a, b);
        for (label, v) in a.iter() {
            assert_eq!(label, 1);
            let n: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(sample_vmf(&p, 2, 1, 0).is_err());
        assert!(VonMisesFisher::new(&[1.0], 1.0).is_err());
    }

    #[test]
    fn parallel_sampling_matches_sequential() {
        let p = VmfParams::new(
            protos(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]),
            4.0,
            2.0,
        )
        .unwrap();
        let all = sample_all_classes(&p, 17, 5).unwrap();
        let mut seq = EmbeddingSet::new(3, p.prototypes.class_names().to_vec()).unwrap();
        for c in 0..3 {
            seq.extend_from(&sample_vmf(&p, c, 17, 5).unwrap()).unwrap();
        }
        assert_eq!(all, seq);
    }

    #[test]
    fn d3_mean_resultant_length() {
        // A_3(κ) = coth κ − 1/κ
        let dist = VonMisesFisher::new(&[0.0, 0.0, 1.0], 2.0).unwrap();
        let mut rng = class_rng(11, 0);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| dist.sample(&mut rng)[2]).sum::<f64>() / n as f64;
        let expected = 1.0 / 2f64.tanh() - 0.5;
        assert!((mean - expected).abs() < 0.005, "{mean} vs {expected}");
    }

    #[test]
    fn larger_lambda_concentrates() {
        let p = |lambda| VmfParams::new(protos(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]), 3.0, lambda).unwrap();
        let mean_cos = |lambda| {
            let set = sample_vmf(&p(lambda), 0, 20_000, 4).unwrap();
            set.iter().map(|(_, v)| v[0] as f64).sum::<f64>() / set.len() as f64
        };
        assert!(mean_cos(4.0) > mean_cos(1.0));
    }

    fn arb_protos() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..5, 2usize..6).prop_flat_map(|(c, d)| {
            proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, d), c)
        })
    }

    fn well_posed(rows: &[Vec<f64>]) -> bool {
        rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2)
    }

    proptest! {
        #[test]
        fn kappa_ignores_order_and_rotation(rows in arb_protos(), angle in 0.0..6.28f64, perm_seed in 0u64..100) {
            prop_assume!(well_posed(&rows));
            let Ok(k) = derive_kappa(&protos(&rows)) else { return Ok(()) };
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut class_rng(perm_seed, 0));
            prop_assert!((derive_kappa(&protos(&shuffled)).unwrap() - k).abs() <= 1e-9 * k.max(1.0));
            // Givens rotation in the first two coordinates
            let (s, c) = angle.sin_cos();
            let rotated: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    let (a, b) = (r[0], r[1]);
                    r[0] = c * a - s * b;
                    r[1] = s * a + c * b;
                    r
                })
                .collect();
            let kr = derive_kappa(&protos(&rotated)).unwrap();
            prop_assert!((kr - k).abs() <= 1e-9 * k.max(1.0), "{} vs {}", kr, k);
        }

        #[test]
        fn samples_stay_on_the_sphere(rows in arb_protos(), kappa in 0.0..1e4f64, seed in any::<u64>()) {
            prop_assume!(well_posed(&rows));
            let p = VmfParams::new(protos(&rows), kappa.max(1e-3), 1.0).unwrap();
            for (_, v) in sample_vmf(&p, 0, 32, seed).unwrap().iter() {
                let n: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }
}
