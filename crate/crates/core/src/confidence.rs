//! Per-demonstration label confidence.
//!
//! The trainable estimator is multinomial logistic regression over embedded
//! label-free renders, fit by full-batch gradient descent on mean
//! cross-entropy from zero weights. Strategies only consume the resulting
//! probability vectors, so any [`ConfidenceEstimator`] can replace it.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, TaskTemplate};
use crate::error::{Error, Result};
use crate::retrieval::EmbeddingProvider;

const SIMPLEX_TOLERANCE: f64 = 1e-8;

/// A probability vector over the label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEstimate {
    probs: Vec<f64>,
}

impl ConfidenceEstimate {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Shape(format!("not a probability vector: {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Shape(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            probs: vec![1.0 / m as f64; m],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Probability the estimate assigns to `label_index`.
pub fn label_confidence(estimate: &ConfidenceEstimate, label_index: usize) -> f64 {
    estimate.probs[label_index]
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|z| (z - max).exp());
    let total = exp.sum();
    exp / total
}

pub trait ConfidenceEstimator: Send + Sync {
    fn estimate(&self, example: &Example) -> Result<ConfidenceEstimate>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Reserved for minibatch shuffling; full-batch training ignores it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub provider_tag: String,
    pub labels: Vec<String>,
    /// `m x dim`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearClassifier {
    pub fn zeros(provider_tag: String, labels: Vec<String>, dim: usize) -> Self {
        let m = labels.len();
        Self {
            provider_tag,
            labels,
            weights: Array2::zeros((m, dim)),
            bias: Array1::zeros(m),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn num_labels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn logits(&self, features: ArrayView1<f64>) -> Result<Array1<f64>> {
        if features.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: features.len(),
            });
        }
        Ok(self.weights.dot(&features) + &self.bias)
    }

    pub fn predict_features(&self, features: ArrayView1<f64>) -> Result<ConfidenceEstimate> {
        Ok(ConfidenceEstimate {
            probs: softmax(self.logits(features)?.view()).to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string(self).map_err(|e| Error::json("serializing classifier", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let clf: Self = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if clf.bias.len() != clf.num_labels() || clf.labels.len() != clf.num_labels() {
            return Err(Error::Shape("classifier file has inconsistent shapes".into()));
        }
        if clf.weights.iter().chain(clf.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("classifier file has non-finite parameters".into()));
        }
        Ok(clf)
    }
}

/// Embeds the label-free render of every example: `N x dim` plus labels.
pub fn featurize(dataset: &Dataset, provider: &dyn EmbeddingProvider) -> Result<(Array2<f64>, Vec<usize>)> {
    let dim = provider.dim();
    let mut features = Array2::zeros((dataset.len(), dim));
    let mut labels = Vec::with_capacity(dataset.len());
    for (mut row, ex) in features.rows_mut().into_iter().zip(dataset.examples()) {
        let v = provider.embed(&dataset.template().render_label_free(ex))?;
        row.assign(&ArrayView1::from(v.values()));
        labels.push(ex.label_index);
    }
    Ok((features, labels))
}

/// Mean cross-entropy of `softmax(W x + b)` and its gradient in `(W, b)`.
pub fn loss_and_gradient(
    features: ArrayView2<f64>,
    labels: &[usize],
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = features.nrows();
    let mut grad_w = Array2::zeros(weights.raw_dim());
    let mut grad_b = Array1::zeros(bias.len());
    if n == 0 {
        return (0.0, grad_w, grad_b);
    }
    let logits = features.dot(&weights.t()) + &bias;
    let mut loss = 0.0;
    let mut residual = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_norm = max + row.mapv(|z| (z - max).exp()).sum().ln();
        loss += log_norm - row[labels[i]];
        let mut r = residual.row_mut(i);
        r.assign(&row.mapv(|z| (z - log_norm).exp()));
        r[labels[i]] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    grad_w.assign(&(residual.t().dot(&features) * scale));
    grad_b.assign(&(residual.sum_axis(Axis(0)) * scale));
    (loss * scale, grad_w, grad_b)
}

/// Full-batch gradient descent from zero weights. Returns the fitted
/// parameters and the loss before each update plus the final loss.
pub fn fit(
    features: ArrayView2<f64>,
    labels: &[usize],
    num_labels: usize,
    config: &TrainConfig,
) -> Result<(Array2<f64>, Array1<f64>, Vec<f64>)> {
    if labels.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_labels) {
        return Err(Error::OutOfRange {
            name: "label_index",
            value: bad as f64,
            range: "the label space",
        });
    }
    let mut weights = Array2::zeros((num_labels, features.ncols()));
    let mut bias = Array1::zeros(num_labels);
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for iteration in 0..=config.epochs {
        let (loss, grad_w, grad_b) = loss_and_gradient(features, labels, weights.view(), bias.view());
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        losses.push(loss);
        if iteration == config.epochs {
            break;
        }
        weights.scaled_add(-config.learning_rate, &grad_w);
        bias.scaled_add(-config.learning_rate, &grad_b);
    }
    Ok((weights, bias, losses))
}

pub fn train_classifier_with_history(
    clean: &Dataset,
    provider: &dyn EmbeddingProvider,
    config: &TrainConfig,
) -> Result<(LinearClassifier, Vec<f64>)> {
    if clean.is_empty() {
        return Err(Error::Config("cannot train a classifier on an empty dataset".into()));
    }
    let labels = clean.template().label_space().labels().to_vec();
    let missing: Vec<&str> = clean
        .label_histogram()
        .iter()
        .zip(&labels)
        .filter(|(count, _)| **count == 0)
        .map(|(_, l)| l.as_str())
        .collect();
    if !missing.is_empty() {
        log::warn!("clean subset has no examples of {missing:?}");
    }
    let (features, targets) = featurize(clean, provider)?;
    let (weights, bias, losses) = fit(features.view(), &targets, labels.len(), config)?;
    Ok((
        LinearClassifier {
            provider_tag: provider.tag(),
            labels,
            weights,
            bias,
        },
        losses,
    ))
}

pub fn train_classifier(
    clean: &Dataset,
    provider: &dyn EmbeddingProvider,
    config: &TrainConfig,
) -> Result<LinearClassifier> {
    train_classifier_with_history(clean, provider, config).map(|(c, _)| c)
}

pub fn predict_confidence(
    classifier: &LinearClassifier,
    template: &TaskTemplate,
    example: &Example,
    provider: &dyn EmbeddingProvider,
) -> Result<ConfidenceEstimate> {
    if classifier.dim() != provider.dim() {
        return Err(Error::DimMismatch {
            expected: classifier.dim(),
            actual: provider.dim(),
        });
    }
    if classifier.provider_tag != provider.tag() {
        return Err(Error::ProviderMismatch {
            index: classifier.provider_tag.clone(),
            provider: provider.tag(),
        });
    }
    let v = provider.embed(&template.render_label_free(example))?;
    classifier.predict_features(ArrayView1::from(v.values()))
}

/// A trained classifier bound to its embedding provider and template.
pub struct ClassifierEstimator {
    classifier: Arc<LinearClassifier>,
    template: Arc<TaskTemplate>,
    provider: Arc<dyn EmbeddingProvider>,
}

impl ClassifierEstimator {
    pub fn new(
        classifier: Arc<LinearClassifier>,
        template: Arc<TaskTemplate>,
        provider: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self> {
        if classifier.labels != template.label_space().labels() {
            return Err(Error::Config(format!(
                "classifier labels {:?} do not match template labels {:?}",
                classifier.labels,
                template.label_space().labels()
            )));
        }
        Ok(Self {
            classifier,
            template,
            provider,
        })
    }
}

impl ConfidenceEstimator for ClassifierEstimator {
    fn estimate(&self, example: &Example) -> Result<ConfidenceEstimate> {
        predict_confidence(&self.classifier, &self.template, example, self.provider.as_ref())
    }
}

/// Test double that knows every example's true label.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    truth: Arc<HashMap<String, usize>>,
    num_labels: usize,
    p_correct: f64,
}

/// Puts `p_correct` on the true label and spreads the rest evenly, so a
/// wrong label gets `(1 - p_correct) / (m - 1)`; that share must not exceed
/// `p_wrong`.
pub fn oracle_estimator(
    truth: Arc<HashMap<String, usize>>,
    num_labels: usize,
    p_correct: f64,
    p_wrong: f64,
) -> Result<OracleEstimator> {
    if num_labels < 2 {
        return Err(Error::Config("oracle estimator needs at least 2 labels".into()));
    }
    if !(0.0 <= p_wrong && p_wrong < p_correct && p_correct <= 1.0) {
        return Err(Error::Config(format!(
            "oracle estimator needs 0 <= p_wrong < p_correct <= 1, got p_wrong={p_wrong}, p_correct={p_correct}"
        )));
    }
    let wrong_share = (1.0 - p_correct) / (num_labels - 1) as f64;
    if wrong_share > p_wrong + 1e-12 {
        return Err(Error::Config(format!(
            "wrong-label share {wrong_share} exceeds p_wrong={p_wrong}"
        )));
    }
    Ok(OracleEstimator {
        truth,
        num_labels,
        p_correct,
    })
}

impl ConfidenceEstimator for OracleEstimator {
    fn estimate(&self, example: &Example) -> Result<ConfidenceEstimate> {
        let truth = *self
            .truth
            .get(&example.id)
            .ok_or_else(|| Error::UnknownId(example.id.clone()))?;
        let wrong = (1.0 - self.p_correct) / (self.num_labels - 1) as f64;
        let mut probs = vec![wrong; self.num_labels];
        probs[truth] = self.p_correct;
        Ok(ConfidenceEstimate { probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::HashingProvider;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn toy_separable() -> Dataset {
        let left = ["apple", "banana", "cherry", "grape", "melon"];
        let right = ["rocket", "planet", "comet", "orbit", "galaxy"];
        let mut examples = Vec::new();
        for i in 0..10 {
            let l = format!("{} {}", left[i % 5], left[(i + 2) % 5]);
            let r = format!("{} {}", right[i % 5], right[(i + 3) % 5]);
            examples.push(Example::new(format!("a{i}"), [("question", l)], 0));
            examples.push(Example::new(format!("b{i}"), [("question", r)], 1));
        }
        Dataset::new(Arc::new(TaskTemplate::tweet()), examples).unwrap()
    }

    #[test]
    fn zero_epochs_is_uniform() {
        let ds = toy_separable();
        let p = HashingProvider::default();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let clf = train_classifier(&ds, &p, &cfg).unwrap();
        assert!(clf.weights.iter().all(|w| *w == 0.0));
        for ex in ds.examples() {
            let est = predict_confidence(&clf, ds.template(), ex, &p).unwrap();
            assert_eq!(est.probs(), &[0.5, 0.5]);
        }
        let five = LinearClassifier::zeros("x".into(), vec!["a".into(); 5], 3);
        let est = five.predict_features(ArrayView1::from(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(est.probs(), &[0.2; 5]);
    }

    #[test]
    fn separable_fixture_is_learned() {
        let ds = toy_separable();
        let p = HashingProvider::default();
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.5,
            seed: 0,
        };
        let clf = train_classifier(&ds, &p, &cfg).unwrap();
        for ex in ds.examples() {
            let est = predict_confidence(&clf, ds.template(), ex, &p).unwrap();
            assert_eq!(est.argmax(), ex.label_index, "{}", ex.id);
        }
    }

    #[test]
    fn small_step_loss_never_increases() {
        let ds = toy_separable();
        let cfg = TrainConfig {
            epochs: 100,
            learning_rate: 0.01,
            seed: 0,
        };
        let (_, losses) = train_classifier_with_history(&ds, &HashingProvider::default(), &cfg).unwrap();
        assert_eq!(losses.len(), 101);
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    }

    #[test]
    fn divergence_reports_iteration() {
        let features = Array2::from_shape_vec((2, 1), vec![1e200, -1e200]).unwrap();
        let err = fit(
            features.view(),
            &[0, 1],
            2,
            &TrainConfig {
                epochs: 10,
                learning_rate: 1e200,
                seed: 0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut clf = LinearClassifier::zeros("t".into(), vec!["a".into(), "b".into(), "c".into()], 2);
        clf.weights = Array2::from_shape_vec((3, 2), vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1]).unwrap();
        let x = ArrayView1::from(&[0.6, 0.8]);
        let before = clf.predict_features(x).unwrap();
        clf.bias += 17.25;
        let after = clf.predict_features(x).unwrap();
        for (a, b) in before.probs().iter().zip(after.probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (n, dim, m) = (10, 6, 3);
        let x = Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
        let w = Array2::from_shape_fn((m, dim), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(m, |_| rng.gen_range(-1.0..1.0));
        let (_, gw, gb) = loss_and_gradient(x.view(), &y, w.view(), b.view());
        let h = 1e-5;
        for i in 0..m {
            for j in 0..dim {
                let mut wp = w.clone();
                wp[[i, j]] += h;
                let mut wm = w.clone();
                wm[[i, j]] -= h;
                let fd = (loss_and_gradient(x.view(), &y, wp.view(), b.view()).0
                    - loss_and_gradient(x.view(), &y, wm.view(), b.view()).0)
                    / (2.0 * h);
                assert_abs_diff_eq!(fd, gw[[i, j]], epsilon = 1e-8);
            }
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (loss_and_gradient(x.view(), &y, w.view(), bp.view()).0
                - loss_and_gradient(x.view(), &y, w.view(), bm.view()).0)
                / (2.0 * h);
            assert_abs_diff_eq!(fd, gb[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn training_order_does_not_matter() {
        let ds = toy_separable();
        let mut reversed: Vec<Example> = ds.examples().to_vec();
        reversed.reverse();
        let ds_rev = ds.derive(reversed).unwrap();
        let p = HashingProvider::default();
        let cfg = TrainConfig::default();
        let a = train_classifier(&ds, &p, &cfg).unwrap();
        let b = train_classifier(&ds_rev, &p, &cfg).unwrap();
        for ex in ds.examples() {
            let pa = predict_confidence(&a, ds.template(), ex, &p).unwrap();
            let pb = predict_confidence(&b, ds.template(), ex, &p).unwrap();
            assert_eq!(pa.argmax(), pb.argmax());
            for (x, y) in pa.probs().iter().zip(pb.probs()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let ds = toy_separable();
        let clf = train_classifier(&ds, &HashingProvider::default(), &TrainConfig::default()).unwrap();
        let err = predict_confidence(&clf, ds.template(), &ds.examples()[0], &HashingProvider::new(8).unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::DimMismatch { .. }));
    }

    #[test]
    fn label_confidence_cases() {
        let uniform = ConfidenceEstimate::uniform(4);
        assert_eq!(label_confidence(&uniform, 3), 0.25);
        let one_hot = ConfidenceEstimate::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(label_confidence(&one_hot, 1), 1.0);
        assert_eq!(label_confidence(&one_hot, 2), 0.0);
        assert!(ConfidenceEstimate::new(vec![0.5, 0.6]).is_err());
        assert_eq!(ConfidenceEstimate::uniform(3).argmax(), 0);
    }

    #[test]
    fn oracle_estimator_values() {
        let truth: HashMap<String, usize> = [("x".to_string(), 1)].into();
        let truth = Arc::new(truth);
        let ex_right = Example::new("x", [("question", "q")], 1);
        let ex_wrong = ex_right.with_label(0);

        let binary = oracle_estimator(truth.clone(), 2, 0.9, 0.1).unwrap();
        let est = binary.estimate(&ex_right).unwrap();
        assert_eq!(label_confidence(&est, ex_right.label_index), 0.9);
        assert_abs_diff_eq!(label_confidence(&est, ex_wrong.label_index), 0.1, epsilon = 1e-15);

        let five = oracle_estimator(truth.clone(), 5, 0.9, 0.1).unwrap();
        let est = five.estimate(&ex_wrong).unwrap();
        assert_abs_diff_eq!(label_confidence(&est, 0), 0.025, epsilon = 1e-15);
        assert_abs_diff_eq!(est.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        let unknown = Example::new("nope", [("question", "q")], 0);
        assert!(matches!(five.estimate(&unknown), Err(Error::UnknownId(_))));
        assert!(oracle_estimator(truth.clone(), 2, 0.5, 0.6).is_err());
        assert!(oracle_estimator(truth, 2, 0.9, 0.05).is_err());
    }

    #[test]
    fn classifier_file_round_trip() {
        let ds = toy_separable();
        let clf = train_classifier(&ds, &HashingProvider::default(), &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        clf.save(&path).unwrap();
        assert_eq!(LinearClassifier::load(&path).unwrap(), clf);
    }
}
