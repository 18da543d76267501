//! Text-initialized cosine classifier and the GZSL / base-to-new evaluation
//! protocols. Accuracies are mean per-class top-1 in percent.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffmath::{eval_with_grad, Adam, AdamConfig, Params, Tensor};
use crate::emb::EmbeddingSet;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::vmf::ClassPrototypes;

pub const LOGIT_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            tau: LOGIT_TEMPERATURE,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config(
                "classifier batch_size, learning_rate and tau must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Softmax over `cos(x, w_c) / τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    class_names: Vec<String>,
    weights: Tensor,
    tau: f64,
}

impl LinearClassifier {
    /// Weight rows are the text features, so an untrained classifier is a
    /// nearest-text-feature classifier.
    pub fn from_text(text: &ClassPrototypes, tau: f64) -> Self {
        Self {
            class_names: text.class_names().to_vec(),
            weights: text.directions().clone(),
            tau,
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Same weights over a subset of the label space, in the given order.
    pub fn restrict(&self, names: &[String]) -> Result<LinearClassifier> {
        let rows = names
            .iter()
            .map(|n| self.index_of(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_names: names.to_vec(),
            weights: self.weights.select_rows(&rows),
            tau: self.tau,
        })
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_owned()))
    }

    /// Maps each record label of `set` onto this classifier's classes.
    fn join_labels(&self, set: &EmbeddingSet) -> Result<Vec<usize>> {
        let map = set
            .class_names()
            .iter()
            .map(|n| self.index_of(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(set.labels().iter().map(|&l| map[l as usize]).collect())
    }

    /// Adam on the cross-entropy of cosine logits. Returns the mean loss of
    /// each epoch.
    pub fn train(&mut self, train: &EmbeddingSet, config: &ClassifierConfig, seed: u64) -> Result<Vec<f64>> {
        config.validate()?;
        if train.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: train.dim(),
            });
        }
        let labels = self.join_labels(train)?;
        let mut counts = vec![0usize; self.class_names.len()];
        for &l in &labels {
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidSet(format!(
                "class {:?} has no training samples",
                self.class_names[c]
            )));
        }
        self.tau = config.tau;
        let x = Tensor::matrix(train.len(), train.dim(), train.to_f64_rows())?;
        let mut params = Params::new();
        params.insert("w".into(), self.weights.clone());
        let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
        let mut order: Vec<usize> = (0..x.rows()).collect();
        let mut history = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng_for(seed, 0x434C_4600 ^ epoch as u64));
            let mut total = 0.0;
            for batch in order.chunks(config.batch_size) {
                let xb = x.select_rows(batch);
                let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let (loss, grads) = eval_with_grad(&params, |g, b| {
                    let xn = g.constant(xb.clone());
                    let logits = g.cosine_similarity(xn, b["w"])?;
                    g.softmax_cross_entropy(logits, &yb, config.tau)
                })?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
                }
                adam.step(&mut params, &grads)?;
                total += loss * batch.len() as f64;
            }
            history.push(total / x.rows() as f64);
        }
        self.weights = params.remove("w").expect("bound above");
        Ok(history)
    }

    /// Index of the highest cosine; ties go to the lowest index.
    pub fn predict_one(&self, x: &[f32]) -> usize {
        let xn = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..self.weights.rows() {
            let w = self.weights.row_slice(c);
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = w.iter().zip(x).map(|(a, &b)| a * b as f64).sum();
            let cos = dot / (wn * xn).max(f64::MIN_POSITIVE);
            if cos > best.1 {
                best = (c, cos);
            }
        }
        best.0
    }

    pub fn predict(&self, set: &EmbeddingSet) -> Vec<usize> {
        set.iter().map(|(_, v)| self.predict_one(v)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `2bn / (b + n)`, or 0 when both are 0.
pub fn harmonic_mean(base: f64, new: f64) -> f64 {
    if base + new == 0.0 {
        0.0
    } else {
        2.0 * base * new / (base + new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Protocol {
    #[default]
    #[serde(rename = "gzsl")]
    Gzsl,
    #[serde(rename = "base-to-new", alias = "base-new")]
    BaseToNew,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Gzsl => "gzsl",
            Protocol::BaseToNew => "base-to-new",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gzsl" => Ok(Protocol::Gzsl),
            "base-new" | "base-to-new" => Ok(Protocol::BaseToNew),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub base_acc: f64,
    pub new_acc: f64,
    pub harmonic_mean: f64,
    pub per_class: BTreeMap<String, f64>,
}

impl EvalReport {
    fn from_parts(protocol: Protocol, base: Vec<(String, f64)>, new: Vec<(String, f64)>) -> Self {
        let mean = |v: &[(String, f64)]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().map(|(_, a)| a).sum::<f64>() / v.len() as f64
            }
        };
        let base_acc = mean(&base);
        let new_acc = mean(&new);
        Self {
            protocol,
            base_acc,
            new_acc,
            harmonic_mean: harmonic_mean(base_acc, new_acc),
            per_class: base.into_iter().chain(new).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// `class,accuracy` rows in class-name order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["class", "accuracy"]).map_err(|e| csv_error(path, e))?;
        for (name, acc) in &self.per_class {
            w.write_record([name.as_str(), &acc.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: base {:.2}  new {:.2}  H {:.2}",
            self.protocol, self.base_acc, self.new_acc, self.harmonic_mean
        )
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Per-class top-1 accuracy of `predicted` against `truth` for the classes
/// of `set` that have at least one test sample.
fn per_class_accuracy(set: &EmbeddingSet, truth: &[usize], predicted: &[usize]) -> Vec<(String, f64)> {
    let mut correct = vec![0usize; set.num_classes()];
    let mut total = vec![0usize; set.num_classes()];
    for ((&l, &t), &p) in set.labels().iter().zip(truth).zip(predicted) {
        total[l as usize] += 1;
        if t == p {
            correct[l as usize] += 1;
        }
    }
    set.class_names()
        .iter()
        .enumerate()
        .filter(|&(c, _)| total[c] > 0)
        .map(|(c, n)| (n.clone(), 100.0 * correct[c] as f64 / total[c] as f64))
        .collect()
}

fn accuracies(clf: &LinearClassifier, set: &EmbeddingSet) -> Result<Vec<(String, f64)>> {
    let truth = clf.join_labels(set)?;
    Ok(per_class_accuracy(set, &truth, &clf.predict(set)))
}

/// Predictions over the union label space of `clf`.
pub fn evaluate_gzsl(clf: &LinearClassifier, test_base: &EmbeddingSet, test_new: &EmbeddingSet) -> Result<EvalReport> {
    Ok(EvalReport::from_parts(
        Protocol::Gzsl,
        accuracies(clf, test_base)?,
        accuracies(clf, test_new)?,
    ))
}

/// Base and new test sets are each scored within their own label space.
pub fn evaluate_base_to_new(
    clf_base: &LinearClassifier,
    clf_new: &LinearClassifier,
    test_base: &EmbeddingSet,
    test_new: &EmbeddingSet,
) -> Result<EvalReport> {
    Ok(EvalReport::from_parts(
        Protocol::BaseToNew,
        accuracies(clf_base, test_base)?,
        accuracies(clf_new, test_new)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn axis_classifier(classes: &[&str]) -> LinearClassifier {
        let d = classes.len();
        let mut w = Tensor::zeros(d, d);
        for c in 0..d {
            w.data_mut()[c * d + c] = 1.0;
        }
        LinearClassifier::from_text(&ClassPrototypes::new(names(classes), w).unwrap(), LOGIT_TEMPERATURE)
    }

    fn set(classes: &[&str], dim: usize, rows: &[(usize, Vec<f32>)]) -> EmbeddingSet {
        let mut s = EmbeddingSet::new(dim, names(classes)).unwrap();
        for (l, v) in rows {
            s.push(*l, v).unwrap();
        }
        s
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(93.9, 93.2) - 93.5).abs() < 0.06);
        assert!((harmonic_mean(93.04, 88.21) - 90.57).abs() < 0.05);
        assert_eq!(harmonic_mean(100.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(42.5, 42.5), 42.5);
    }

    proptest! {
        #[test]
        fn harmonic_mean_bounded_by_arithmetic(a in 0.0..100.0f64, b in 0.0..100.0f64) {
            let h = harmonic_mean(a, b);
            prop_assert!(h <= (a + b) / 2.0 + 1e-12);
            prop_assert!(h >= a.min(b) - 1e-12);
            prop_assert!((harmonic_mean(a, a) - a).abs() < 1e-12);
        }

        #[test]
        fn prediction_is_scale_invariant(v in prop::collection::vec(-1.0f32..1.0, 3), k in 0.01f32..100.0) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let clf = axis_classifier(&["a", "b", "c"]);
            let scaled: Vec<f32> = v.iter().map(|x| x * k).collect();
            prop_assert_eq!(clf.predict_one(&v), clf.predict_one(&scaled));
        }
    }

    #[test]
    fn constant_predictor_gzsl() {
        // every vector points at base class "a"
        let clf = axis_classifier(&["a", "b", "n"]);
        let base = set(&["a", "b"], 3, &[(0, vec![1.0, 0.0, 0.0]), (1, vec![1.0, 0.1, 0.0])]);
        let new = set(&["n"], 3, &[(0, vec![1.0, 0.0, 0.1])]);
        let r = evaluate_gzsl(&clf, &base, &new).unwrap();
        assert_eq!(r.base_acc, 50.0);
        assert_eq!(r.new_acc, 0.0);
        assert_eq!(r.harmonic_mean, 0.0);
    }

    #[test]
    fn macro_average_and_duplication() {
        let clf = axis_classifier(&["a", "b", "n"]);
        let rows = vec![
            (0, vec![1.0, 0.0, 0.0]),
            (0, vec![1.0, 0.0, 0.0]),
            (0, vec![1.0, 0.0, 0.0]),
            (0, vec![0.0, 1.0, 0.0]),
            (1, vec![0.0, 1.0, 0.0]),
            (1, vec![1.0, 0.0, 0.0]),
        ];
        let base = set(&["a", "b"], 3, &rows);
        let new = set(&["n"], 3, &[(0, vec![0.0, 0.0, 1.0])]);
        let r = evaluate_gzsl(&clf, &base, &new).unwrap();
        assert_eq!(r.per_class["a"], 75.0);
        assert_eq!(r.per_class["b"], 50.0);
        assert_eq!(r.base_acc, 62.5);
        assert_eq!(r.new_acc, 100.0);

        let mut doubled = rows.clone();
        doubled.extend(rows.iter().filter(|(l, _)| *l == 0).cloned());
        let r2 = evaluate_gzsl(&clf, &set(&["a", "b"], 3, &doubled), &new).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn restricted_space_dominates() {
        let clf = axis_classifier(&["a", "b", "n", "m"]);
        let base = set(&["a", "b"], 4, &[(0, vec![0.5, 0.1, 0.9, 0.0]), (1, vec![0.1, 0.5, 0.0, 0.2])]);
        let new = set(&["n", "m"], 4, &[(0, vec![0.9, 0.0, 0.5, 0.0]), (1, vec![0.0, 0.0, 0.1, 0.3])]);
        let g = evaluate_gzsl(&clf, &base, &new).unwrap();
        let b2n = evaluate_base_to_new(
            &clf.restrict(&names(&["a", "b"])).unwrap(),
            &clf.restrict(&names(&["n", "m"])).unwrap(),
            &base,
            &new,
        )
        .unwrap();
        assert_eq!(b2n.protocol, Protocol::BaseToNew);
        assert!(b2n.base_acc >= g.base_acc && b2n.new_acc >= g.new_acc);
        assert_eq!(b2n.base_acc, 100.0);
        assert_eq!(g.base_acc, 50.0);

        let single = clf.restrict(&names(&["n"])).unwrap();
        let one = set(&["n"], 4, &[(0, vec![1.0, 0.0, 0.0, 0.0])]);
        let r = evaluate_base_to_new(&single, &single, &one, &one).unwrap();
        assert_eq!(r.new_acc, 100.0);
    }

    #[test]
    fn unknown_class_is_rejected() {
        let clf = axis_classifier(&["a", "b"]);
        let s = set(&["zebra"], 2, &[(0, vec![1.0, 0.0])]);
        assert!(matches!(evaluate_gzsl(&clf, &s, &s), Err(Error::UnknownClass(_))));
        assert!(clf.restrict(&names(&["zebra"])).is_err());
    }

    #[test]
    fn zero_epochs_keeps_text_weights() {
        let mut clf = axis_classifier(&["a", "b"]);
        let before = clf.clone();
        let train = set(&["a", "b"], 2, &[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let cfg = ClassifierConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(clf.train(&train, &cfg, 1).unwrap().is_empty());
        assert_eq!(clf, before);
    }

    #[test]
    fn separable_two_class_training() {
        // text weights point the wrong way; training has to swap them
        let text = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let mut clf =
            LinearClassifier::from_text(&ClassPrototypes::new(names(&["a", "b"]), text).unwrap(), 0.01);
        let mut rows = Vec::new();
        for i in 0..20 {
            let t = 0.05 * i as f32 / 20.0;
            rows.push((0, vec![1.0, t]));
            rows.push((1, vec![t, 1.0]));
        }
        let train = set(&["a", "b"], 2, &rows).normalize().unwrap();
        let cfg = ClassifierConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let hist = clf.train(&train, &cfg, 3).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let r = evaluate_gzsl(&clf, &train.select_classes(&names(&["a"])).unwrap(), &train.select_classes(&names(&["b"])).unwrap()).unwrap();
        assert_eq!((r.base_acc, r.new_acc), (100.0, 100.0));
    }

    #[test]
    fn missing_training_class_is_rejected() {
        let mut clf = axis_classifier(&["a", "b"]);
        let train = set(&["a"], 2, &[(0, vec![1.0, 0.0])]);
        assert!(matches!(
            clf.train(&train, &ClassifierConfig::default(), 0),
            Err(Error::InvalidSet(_))
        ));
    }

    #[test]
    fn report_json_and_csv() {
        let r = EvalReport::from_parts(
            Protocol::Gzsl,
            vec![("a,b".into(), 50.0)],
            vec![("c".into(), 100.0 / 3.0)],
        );
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["protocol"], "gzsl");
        assert!((v["harmonic_mean"].as_f64().unwrap() - harmonic_mean(50.0, 100.0 / 3.0)).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("class,accuracy\n\"a,b\",50\n"));
        assert_eq!("base-new".parse::<Protocol>().unwrap(), Protocol::BaseToNew);
    }
}
