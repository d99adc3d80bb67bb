//! Flat parameter vectors and the two small differentiable models used as
//! stand-ins for a large model: multinomial logistic regression and a
//! one-hidden-layer tanh MLP.
//!
//! Parameters are stored as a single flat `f64` vector so that every
//! aggregation rule can treat them as opaque. Layouts (row-major):
//!
//! * logistic: `W[classes][features]`, then `b[classes]`
//! * mlp: `W1[hidden][features]`, `b1[hidden]`, `W2[classes][hidden]`, `b2[classes]`

use std::ops::Deref;

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const INIT_SCALE: f64 = 0.05;

/// Model parameters (`w`, `w_i`, `w^t`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

/// Gradient of the mean loss with respect to a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(Vec<f64>);

macro_rules! flat_vector {
    ($ty:ident) => {
        impl $ty {
            pub fn zeros(dim: usize) -> Self {
                $ty(vec![0.0; dim])
            }

            /// Wraps `values`, rejecting NaN and infinities.
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if values.iter().all(|v| v.is_finite()) {
                    Ok($ty(values))
                } else {
                    Err(Error::NonFinite(stringify!($ty)))
                }
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn l2_norm(&self) -> f64 {
                self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
        }

        impl From<Vec<f64>> for $ty {
            fn from(values: Vec<f64>) -> Self {
                $ty(values)
            }
        }

        impl Deref for $ty {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl AsRef<[f64]> for $ty {
            fn as_ref(&self) -> &[f64] {
                &self.0
            }
        }
    };
}

flat_vector!(ParamVector);
flat_vector!(Gradient);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Mlp { hidden: usize },
}

/// Shape of a model. Construct through [`ModelSpec::logistic`] or
/// [`ModelSpec::mlp`] so the dimensions are validated once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecRepr", into = "ModelSpecRepr")]
pub struct ModelSpec {
    kind: ModelKind,
    features: usize,
    classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpecRepr {
    kind: String,
    features: usize,
    classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
}

impl TryFrom<ModelSpecRepr> for ModelSpec {
    type Error = Error;

    fn try_from(repr: ModelSpecRepr) -> Result<Self> {
        match (repr.kind.as_str(), repr.hidden) {
            ("logistic", None) => ModelSpec::logistic(repr.features, repr.classes),
            ("logistic", Some(_)) => Err(Error::invalid(
                "model.hidden",
                "only valid for kind \"mlp\"",
            )),
            ("mlp", Some(hidden)) => ModelSpec::mlp(repr.features, hidden, repr.classes),
            ("mlp", None) => Err(Error::invalid("model.hidden", "required for kind \"mlp\"")),
            (other, _) => Err(Error::invalid(
                "model.kind",
                format!("unknown kind {other:?}, expected \"logistic\" or \"mlp\""),
            )),
        }
    }
}

impl From<ModelSpec> for ModelSpecRepr {
    fn from(spec: ModelSpec) -> Self {
        let (kind, hidden) = match spec.kind {
            ModelKind::Logistic => ("logistic", None),
            ModelKind::Mlp { hidden } => ("mlp", Some(hidden)),
        };
        ModelSpecRepr {
            kind: kind.to_string(),
            features: spec.features,
            classes: spec.classes,
            hidden,
        }
    }
}

impl ModelSpec {
    pub fn logistic(features: usize, classes: usize) -> Result<Self> {
        Self::validate_io(features, classes)?;
        Ok(ModelSpec {
            kind: ModelKind::Logistic,
            features,
            classes,
        })
    }

    pub fn mlp(features: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::validate_io(features, classes)?;
        if hidden == 0 {
            return Err(Error::invalid("model.hidden", "must be positive"));
        }
        Ok(ModelSpec {
            kind: ModelKind::Mlp { hidden },
            features,
            classes,
        })
    }

    fn validate_io(features: usize, classes: usize) -> Result<()> {
        if features == 0 {
            return Err(Error::invalid("model.features", "must be positive"));
        }
        if classes < 2 {
            return Err(Error::invalid("model.classes", "must be at least 2"));
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        let (f, c) = (self.features, self.classes);
        match self.kind {
            ModelKind::Logistic => f * c + c,
            ModelKind::Mlp { hidden: h } => f * h + h + h * c + c,
        }
    }
}

/// A set of labelled samples, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    cols: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, cols: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        if cols == 0 || features.len() != cols * labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} rows of width {}",
                features.len(),
                labels.len(),
                cols
            )));
        }
        Ok(Batch {
            features,
            cols,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.cols..(i + 1) * self.cols]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the rows at `indices` (in that order) into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} out of range for batch of {}",
                    self.rows()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, self.cols, labels)
    }
}

/// Entries drawn uniformly from `[-0.05, 0.05]`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::seeded(seed);
    let dist = Uniform::new_inclusive(-INIT_SCALE, INIT_SCALE).expect("static bounds");
    ParamVector((0..spec.param_count()).map(|_| rng.sample(dist)).collect())
}

fn check_shapes(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            actual: params.len(),
        });
    }
    if batch.cols() != spec.features {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            spec.features
        )));
    }
    if let Some(&bad) = batch.labels().iter().find(|&&l| l >= spec.classes) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} out of range for {} classes",
            spec.classes
        )));
    }
    Ok(())
}

/// Writes `bias + weights · input` into `out`; `weights` is `out.len() x input.len()`.
fn affine(weights: &[f64], bias: &[f64], input: &[f64], out: &mut [f64]) {
    let width = input.len();
    for (o, (row, b)) in out
        .iter_mut()
        .zip(weights.chunks_exact(width).zip(bias))
    {
        *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

/// In-place softmax; returns `logsumexp` of the original logits.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
    max + sum.ln()
}

/// Per-sample forward state reused by the backward pass.
struct Forward {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    loss: f64,
    predicted: usize,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn forward_sample(spec: &ModelSpec, params: &[f64], x: &[f64], label: usize) -> Forward {
    let (f, c) = (spec.features, spec.classes);
    let mut logits = vec![0.0; c];
    let hidden = match spec.kind {
        ModelKind::Logistic => {
            affine(&params[..c * f], &params[c * f..], x, &mut logits);
            Vec::new()
        }
        ModelKind::Mlp { hidden: h } => {
            let (w1, rest) = params.split_at(h * f);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let mut act = vec![0.0; h];
            affine(w1, b1, x, &mut act);
            act.iter_mut().for_each(|a| *a = a.tanh());
            affine(w2, b2, &act, &mut logits);
            act
        }
    };
    // ties resolve to the lowest class index
    let predicted = argmax(&logits);
    let label_logit = logits[label];
    let lse = softmax_in_place(&mut logits);
    Forward {
        hidden,
        probs: logits,
        loss: (lse - label_logit).max(0.0),
        predicted,
    }
}

/// Mean cross-entropy over `batch`.
pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    check_shapes(spec, params, batch)?;
    let total: f64 = (0..batch.rows())
        .map(|i| forward_sample(spec, params, batch.row(i), batch.labels[i]).loss)
        .sum();
    Ok(total / batch.rows() as f64)
}

/// Mean loss and classification accuracy over `batch`.
pub fn loss_and_accuracy(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, f64)> {
    check_shapes(spec, params, batch)?;
    let mut total = 0.0;
    let mut correct = 0usize;
    for i in 0..batch.rows() {
        let fwd = forward_sample(spec, params, batch.row(i), batch.labels[i]);
        total += fwd.loss;
        correct += usize::from(fwd.predicted == batch.labels[i]);
    }
    let n = batch.rows() as f64;
    Ok((total / n, correct as f64 / n))
}

/// Predicted class per row (argmax of the logits, lowest index on ties).
pub fn predict(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<usize>> {
    check_shapes(spec, params, batch)?;
    Ok((0..batch.rows())
        .map(|i| forward_sample(spec, params, batch.row(i), batch.labels[i]).predicted)
        .collect())
}

/// Mean loss and its exact gradient in one pass.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, Gradient)> {
    check_shapes(spec, params, batch)?;
    let (f, c) = (spec.features, spec.classes);
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;

    for i in 0..batch.rows() {
        let x = batch.row(i);
        let label = batch.labels[i];
        let fwd = forward_sample(spec, params, x, label);
        total += fwd.loss;
        let mut delta = fwd.probs;
        delta[label] -= 1.0;

        match spec.kind {
            ModelKind::Logistic => {
                let (gw, gb) = grad.split_at_mut(c * f);
                for (k, &d) in delta.iter().enumerate() {
                    for (g, &xj) in gw[k * f..(k + 1) * f].iter_mut().zip(x) {
                        *g += d * xj;
                    }
                    gb[k] += d;
                }
            }
            ModelKind::Mlp { hidden: h } => {
                let w2 = &params[h * f + h..h * f + h + c * h];
                let (gw1, rest) = grad.split_at_mut(h * f);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                let mut dz = vec![0.0; h];
                for (k, &d) in delta.iter().enumerate() {
                    let row = &w2[k * h..(k + 1) * h];
                    for (j, g) in gw2[k * h..(k + 1) * h].iter_mut().enumerate() {
                        *g += d * fwd.hidden[j];
                        dz[j] += d * row[j];
                    }
                    gb2[k] += d;
                }
                for (j, dzj) in dz.iter_mut().enumerate() {
                    let a = fwd.hidden[j];
                    *dzj *= 1.0 - a * a;
                    for (g, &xm) in gw1[j * f..(j + 1) * f].iter_mut().zip(x) {
                        *g += *dzj * xm;
                    }
                    gb1[j] += *dzj;
                }
            }
        }
    }

    let n = batch.rows() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, Gradient::new(grad)?))
}

/// Exact gradient of [`forward_loss`] (mean over the batch).
pub fn backward(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Gradient> {
    loss_and_gradient(spec, params, batch).map(|(_, g)| g)
}

/// `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &Gradient, lr: f64) -> Result<ParamVector> {
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: grad.len(),
        });
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::invalid("lr", "must be finite and nonnegative"));
    }
    ParamVector::new(
        params
            .iter()
            .zip(grad.iter())
            .map(|(w, g)| w - lr * g)
            .collect(),
    )
}

/// `Σ weights[i] · vectors[i]`, accumulated in input order.
pub fn linear_combination<V: AsRef<[f64]>>(weights: &[f64], vectors: &[V]) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput("combine"));
    }
    if weights.len() != vectors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} vectors",
            weights.len(),
            vectors.len()
        )));
    }
    let dim = vectors[0].as_ref().len();
    let mut out = vec![0.0; dim];
    for (w, v) in weights.iter().zip(vectors) {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("combine"))
    }
}

pub fn combine(weights: &[f64], vectors: &[&ParamVector]) -> Result<ParamVector> {
    linear_combination(weights, vectors).map(ParamVector)
}
