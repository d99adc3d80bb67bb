//! Aggregation rules for combining platform results into the global model.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{linear_combination, sgd_step, Gradient, ParamVector};
use crate::rng;

/// One platform's contribution at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub platform_id: usize,
    pub params: ParamVector,
    pub sample_count: usize,
    pub local_loss: f64,
}

/// Loss-softmax weights, one per platform.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicWeights {
    pub alphas: Vec<f64>,
    pub source_losses: Vec<f64>,
}

/// Which rule produces the next global model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AggregationStrategy {
    Fedavg,
    DynamicWeighted,
    /// Global step size applied to the aggregated gradient.
    Gradient { lr: f64 },
    Async {
        alpha0: f64,
        #[serde(default)]
        staleness_exponent: f64,
    },
}

impl AggregationStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationStrategy::Fedavg => "fedavg",
            AggregationStrategy::DynamicWeighted => "dynamic-weighted",
            AggregationStrategy::Gradient { .. } => "gradient",
            AggregationStrategy::Async { .. } => "async",
        }
    }

    pub fn is_async(&self) -> bool {
        matches!(self, AggregationStrategy::Async { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregationStrategy::Gradient { lr } if !(lr.is_finite() && lr > 0.0) => {
                Err(Error::invalid("strategy.lr", "must be finite and positive"))
            }
            AggregationStrategy::Async { alpha0, .. } if !(alpha0 > 0.0 && alpha0 <= 1.0) => {
                Err(Error::invalid("strategy.alpha0", "must lie in (0, 1]"))
            }
            AggregationStrategy::Async { staleness_exponent, .. }
                if !(staleness_exponent.is_finite() && staleness_exponent >= 0.0) =>
            {
                Err(Error::invalid("strategy.staleness_exponent", "must be finite and nonnegative"))
            }
            _ => Ok(()),
        }
    }
}

fn sorted_by_platform(locals: &[LocalResult]) -> Result<Vec<&LocalResult>> {
    if locals.is_empty() {
        return Err(Error::EmptyInput("local results"));
    }
    let mut sorted: Vec<&LocalResult> = locals.iter().collect();
    sorted.sort_by_key(|l| l.platform_id);
    Ok(sorted)
}

/// Sample-count weighted average `Σ (n_i / n) w_i`, summed in platform-id order.
pub fn fedavg(locals: &[LocalResult]) -> Result<ParamVector> {
    let sorted = sorted_by_platform(locals)?;
    if let Some(bad) = sorted.iter().find(|l| l.sample_count == 0) {
        return Err(Error::invalid(
            "sample_count",
            format!("platform {} reported zero samples", bad.platform_id),
        ));
    }
    let total: usize = sorted.iter().map(|l| l.sample_count).sum();
    let weights: Vec<f64> = sorted
        .iter()
        .map(|l| l.sample_count as f64 / total as f64)
        .collect();
    let vectors: Vec<&ParamVector> = sorted.iter().map(|l| &l.params).collect();
    linear_combination(&weights, &vectors).map(ParamVector::from)
}

/// `α_i = exp(-L_i) / Σ_j exp(-L_j)`, evaluated after shifting by `min L`.
pub fn dynamic_weights(losses: &[f64]) -> Result<DynamicWeights> {
    if losses.is_empty() {
        return Err(Error::EmptyInput("losses"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("losses", "must be finite"));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = losses.iter().map(|l| (min - l).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(DynamicWeights {
        alphas: exps.iter().map(|e| e / sum).collect(),
        source_losses: losses.to_vec(),
    })
}

/// `Σ α_i w_i` with `α` from [`dynamic_weights`] over the reported losses.
pub fn dynamic_aggregate(locals: &[LocalResult]) -> Result<ParamVector> {
    let sorted = sorted_by_platform(locals)?;
    let losses: Vec<f64> = sorted.iter().map(|l| l.local_loss).collect();
    let weights = dynamic_weights(&losses)?;
    let vectors: Vec<&ParamVector> = sorted.iter().map(|l| &l.params).collect();
    linear_combination(&weights.alphas, &vectors).map(ParamVector::from)
}

/// `w - lr · Σ (n_i / n) ∇w_i`.
pub fn gradient_aggregate(global: &ParamVector, grads: &[(Gradient, usize)], lr: f64) -> Result<ParamVector> {
    if grads.is_empty() {
        return Err(Error::EmptyInput("gradients"));
    }
    if grads.iter().any(|(_, n)| *n == 0) {
        return Err(Error::invalid("sample_count", "must be positive"));
    }
    let total: usize = grads.iter().map(|(_, n)| n).sum();
    let weights: Vec<f64> = grads.iter().map(|(_, n)| *n as f64 / total as f64).collect();
    let vectors: Vec<&Gradient> = grads.iter().map(|(g, _)| g).collect();
    let mean = Gradient::from(linear_combination(&weights, &vectors)?);
    sgd_step(global, &mean, lr)
}

/// `w + alpha (w_local - w)`, evaluated as the convex combination
/// `(1 - alpha) w + alpha w_local` so the endpoints are reproduced exactly.
pub fn async_merge(global: &ParamVector, local: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", "must lie in [0, 1]"));
    }
    if global.len() != local.len() {
        return Err(Error::DimensionMismatch {
            expected: global.len(),
            actual: local.len(),
        });
    }
    let keep = 1.0 - alpha;
    ParamVector::new(
        global
            .iter()
            .zip(local.iter())
            .map(|(&g, &l)| (keep * g + alpha * l).clamp(g.min(l), g.max(l)))
            .collect(),
    )
}

/// `alpha0 / (staleness + 1)^p`.
pub fn staleness_weight(alpha0: f64, staleness: u64, exponent: f64) -> f64 {
    alpha0 / ((staleness + 1) as f64).powf(exponent)
}

/// Gaussian mechanism parameters: clip to `clip_norm`, then add noise with
/// standard deviation `sigma * clip_norm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSpec {
    /// `null` in JSON means no clipping.
    #[serde(with = "optional_infinite")]
    pub clip_norm: f64,
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

mod optional_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl DpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::invalid("dp.clip_norm", "must be positive"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid("dp.sigma", "must be finite and nonnegative"));
        }
        if self.sigma > 0.0 && self.clip_norm.is_infinite() {
            return Err(Error::invalid("dp.clip_norm", "must be finite when sigma > 0"));
        }
        Ok(())
    }
}

/// Clips `update` to `spec.clip_norm` and adds seeded Gaussian noise. The
/// noise stream is keyed by `(spec.seed, call_index)`, so the caller decides
/// the sequencing.
pub fn dp_privatize(update: &[f64], spec: &DpSpec, call_index: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    if update.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dp_privatize input"));
    }
    let norm = update.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if norm > spec.clip_norm { spec.clip_norm / norm } else { 1.0 };
    let mut out: Vec<f64> = update.iter().map(|v| v * scale).collect();
    if spec.sigma > 0.0 {
        let noise = Normal::new(0.0, spec.sigma * spec.clip_norm)
            .map_err(|e| Error::invalid("dp.sigma", e.to_string()))?;
        let mut r = rng::seeded(rng::derive_seed(spec.seed, call_index));
        out.iter_mut().for_each(|v| *v += noise.sample(&mut r));
    }
    Ok(out)
}

/// Stateful wrapper that numbers successive [`dp_privatize`] calls.
#[derive(Debug, Clone)]
pub struct DpMechanism {
    spec: DpSpec,
    calls: u64,
}

impl DpMechanism {
    pub fn new(spec: DpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(DpMechanism { spec, calls: 0 })
    }

    pub fn privatize(&mut self, update: &[f64]) -> Result<Vec<f64>> {
        let out = dp_privatize(update, &self.spec, self.calls)?;
        self.calls += 1;
        Ok(out)
    }
}
