//! Synthetic benchmark with known ground truth: well-separated class mean
//! directions, vMF features around them, and "text features" that are the
//! means rotated by a fixed angle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::emb::{write_emb1, EmbeddingSet, SplitSpec};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::vmf::{sample_all_classes, ClassPrototypes, VmfParams};

const PLACEMENT_ATTEMPTS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub dim: usize,
    pub base_classes: usize,
    pub new_classes: usize,
    pub kappa: f64,
    pub samples_per_class: usize,
    pub noise_deg: f64,
    pub min_angle_deg: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            base_classes: 10,
            new_classes: 5,
            kappa: 50.0,
            samples_per_class: 200,
            noise_deg: 10.0,
            min_angle_deg: 25.0,
            seed: 7,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.base_classes < 2 || self.new_classes < 1 {
            return Err(Error::Config(
                "benchmark needs dim ≥ 1, at least 2 base classes and 1 new class".into(),
            ));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::Config("benchmark kappa must be positive".into()));
        }
        if !(0.0..=180.0).contains(&self.noise_deg) || !(0.0..=180.0).contains(&self.min_angle_deg) {
            return Err(Error::Config("benchmark angles must lie in [0, 180] degrees".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.base_classes + self.new_classes
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes()).map(|i| format!("class_{i:02}")).collect()
    }
}

fn random_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `c` unit vectors in `d` dimensions with pairwise angles of at least
/// `min_angle_deg`.
pub fn place_means(c: usize, d: usize, min_angle_deg: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let infeasible = || {
        Error::DegenerateGeometry(format!(
            "cannot place {c} unit vectors at least {min_angle_deg}° apart in {d} dimensions"
        ))
    };
    match d {
        1 => {
            if c > 2 || (c == 2 && min_angle_deg > 180.0) {
                return Err(infeasible());
            }
            return Ok([vec![1.0], vec![-1.0]].into_iter().take(c).collect());
        }
        2 => {
            // evenly spaced on the circle, randomly rotated
            let spacing = 360.0 / c as f64;
            if spacing < min_angle_deg {
                return Err(infeasible());
            }
            let offset: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            return Ok((0..c)
                .map(|i| {
                    let a = offset + (i as f64 * spacing).to_radians();
                    vec![a.cos(), a.sin()]
                })
                .collect());
        }
        _ => {}
    }
    let max_cos = min_angle_deg.to_radians().cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0;
    while means.len() < c {
        if attempts == PLACEMENT_ATTEMPTS {
            return Err(infeasible());
        }
        attempts += 1;
        let v = random_unit(d, rng);
        let ok = means
            .iter()
            .all(|m| m.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
        if ok {
            means.push(v);
        }
    }
    Ok(means)
}

/// `cos θ·μ + sin θ·u` for a random unit `u` orthogonal to `μ`; exactly
/// `μ` when `θ = 0`.
pub fn rotate_by(mean: &[f64], angle_deg: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if angle_deg == 0.0 {
        return Ok(mean.to_vec());
    }
    if mean.len() < 2 {
        return Err(Error::DegenerateGeometry("rotation needs at least 2 dimensions".into()));
    }
    let u = loop {
        let v = random_unit(mean.len(), rng);
        let dot: f64 = v.iter().zip(mean).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = v.iter().zip(mean).map(|(a, m)| a - dot * m).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            break w.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let (s, c) = angle_deg.to_radians().sin_cos();
    Ok(mean.iter().zip(&u).map(|(m, u)| c * m + s * u).collect())
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub split: SplitSpec,
    /// True class mean directions, all classes.
    pub means: ClassPrototypes,
    /// Text features, all classes.
    pub text: ClassPrototypes,
    /// Real training features of every class. Only the skyline run reads
    /// these; the data-free pipeline never does.
    pub train: EmbeddingSet,
    pub test: EmbeddingSet,
    /// Server classifier: normalized empirical means of the base-class
    /// training features.
    pub weights: ClassPrototypes,
}

pub fn generate(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let names = spec.class_names();
    let split = SplitSpec {
        base: names[..spec.base_classes].to_vec(),
        new: names[spec.base_classes..].to_vec(),
    };
    let mut rng = rng_for(spec.seed, 0x4D45_414E);
    let means = place_means(names.len(), spec.dim, spec.min_angle_deg, &mut rng)?;
    let mut text_rng = rng_for(spec.seed, 0x5445_5854);
    let text = means
        .iter()
        .map(|m| rotate_by(m, spec.noise_deg, &mut text_rng))
        .collect::<Result<Vec<_>>>()?;
    let means = ClassPrototypes::new(names.clone(), Tensor::from_rows(&means)?)?;
    let text = ClassPrototypes::new(names, Tensor::from_rows(&text)?)?;

    let vmf = VmfParams::new(means.clone(), spec.kappa, 1.0)?;
    let train = sample_all_classes(&vmf, spec.samples_per_class, derive_seed(spec.seed, 1))?;
    let test = sample_all_classes(&vmf, spec.samples_per_class, derive_seed(spec.seed, 2))?;
    let weights = if spec.samples_per_class == 0 {
        means.select(&split.base)?
    } else {
        ClassPrototypes::from_class_means(&train.select_classes(&split.base)?)?
    };
    Ok(Benchmark {
        spec: spec.clone(),
        split,
        means,
        text,
        train,
        test,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPaths {
    pub spec: PathBuf,
    pub split: PathBuf,
    pub text_features: PathBuf,
    pub weights: PathBuf,
    pub train_features: PathBuf,
    pub test_features: PathBuf,
}

impl BenchmarkPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            spec: dir.join("benchmark.json"),
            split: dir.join("split.json"),
            text_features: dir.join("text.emb1"),
            weights: dir.join("weights.emb1"),
            train_features: dir.join("train.emb1"),
            test_features: dir.join("test.emb1"),
        }
    }
}

impl Benchmark {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<BenchmarkPaths> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = BenchmarkPaths::in_dir(dir);
        fs::write(&paths.spec, serde_json::to_string_pretty(&self.spec)? + "\n")
            .map_err(|e| Error::io(&paths.spec, e))?;
        self.split.save(&paths.split)?;
        write_emb1(&self.text.to_embedding_set()?, &paths.text_features)?;
        write_emb1(&self.weights.to_embedding_set()?, &paths.weights)?;
        write_emb1(&self.train, &paths.train_features)?;
        write_emb1(&self.test, &paths.test_features)?;
        Ok(paths)
    }
}

/// Generates the benchmark and writes it to `dir`.
pub fn make_benchmark(spec: &BenchmarkSpec, dir: impl AsRef<Path>) -> Result<(Benchmark, BenchmarkPaths)> {
    let b = generate(spec)?;
    let paths = b.write(dir)?;
    Ok((b, paths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emb::read_emb1;

    fn min_angle_deg(p: &ClassPrototypes) -> f64 {
        let mut min = 180.0f64;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let c: f64 = p.direction(i).iter().zip(p.direction(j)).map(|(a, b)| a * b).sum();
                min = min.min(c.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        min
    }

    #[test]
    fn default_benchmark_files() {
        let dir = tempfile::tempdir().unwrap();
        let (b, paths) = make_benchmark(&BenchmarkSpec::default(), dir.path()).unwrap();
        assert!(min_angle_deg(&b.means) >= 25.0);
        for p in [&paths.text_features, &paths.weights, &paths.train_features, &paths.test_features] {
            let set = read_emb1(p).unwrap();
            for i in 0..set.len() {
                let n: f64 = set.vector_f64(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(read_emb1(&paths.train_features).unwrap().class_counts(), vec![200; 15]);
        assert_eq!(read_emb1(&paths.weights).unwrap().num_classes(), 10);
        let split = SplitSpec::load(&paths.split).unwrap();
        assert_eq!((split.base.len(), split.new.len()), (10, 5));
        for c in 0..15 {
            let cos: f64 = b.means.direction(c).iter().zip(b.text.direction(c)).map(|(a, t)| a * t).sum();
            assert!((cos.acos().to_degrees() - 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_noise_gives_means() {
        let spec = BenchmarkSpec {
            noise_deg: 0.0,
            samples_per_class: 3,
            ..Default::default()
        };
        let b = generate(&spec).unwrap();
        assert_eq!(b.means, b.text);
    }

    #[test]
    fn circle_packing_bound() {
        let mut rng = rng_for(0, 0);
        let two = place_means(2, 2, 25.0, &mut rng).unwrap();
        let c: f64 = two[0].iter().zip(&two[1]).map(|(a, b)| a * b).sum();
        assert!(c.acos().to_degrees() >= 25.0);
        assert!(matches!(place_means(100, 2, 25.0, &mut rng), Err(Error::DegenerateGeometry(_))));
        assert!(place_means(14, 2, 25.0, &mut rng).is_ok());
        assert!(place_means(15, 2, 25.0, &mut rng).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = BenchmarkSpec {
            samples_per_class: 5,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.text, b.text);
    }
}
