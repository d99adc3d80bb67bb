//! Communication layer: top-k sparsification with error feedback, wire-size
//! accounting, abstract protocol profiles and link transfer time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Gradient;

/// Bytes per transmitted value.
pub const VALUE_BYTES: u64 = 8;
/// Bytes per transmitted sparse index.
pub const INDEX_BYTES: u64 = 4;

/// Point-to-point link between a platform and the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkProfile {
    pub latency_ms: f64,
    pub bandwidth_bytes_per_ms: f64,
}

impl LinkProfile {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.latency_ms.is_finite() && self.latency_ms >= 0.0) {
            return Err(Error::invalid(format!("{field}.latency_ms"), "must be finite and nonnegative"));
        }
        if !(self.bandwidth_bytes_per_ms.is_finite() && self.bandwidth_bytes_per_ms > 0.0) {
            return Err(Error::invalid(
                format!("{field}.bandwidth_bytes_per_ms"),
                "must be finite and positive",
            ));
        }
        Ok(())
    }
}

/// Transport modelled as fixed per-message overhead, a handshake delay and a
/// multiplicative framing cost on the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolProfile {
    pub name: String,
    pub per_message_overhead_bytes: u64,
    pub handshake_ms: f64,
    pub per_byte_factor: f64,
}

impl ProtocolProfile {
    pub fn grpc_like() -> Self {
        ProtocolProfile {
            name: "grpc-like".into(),
            per_message_overhead_bytes: 128,
            handshake_ms: 2.0,
            per_byte_factor: 1.02,
        }
    }

    pub fn quic_like() -> Self {
        ProtocolProfile {
            name: "quic-like".into(),
            per_message_overhead_bytes: 64,
            handshake_ms: 0.5,
            per_byte_factor: 1.01,
        }
    }

    /// No overhead at all; handy for exact arithmetic in tests.
    pub fn ideal() -> Self {
        ProtocolProfile {
            name: "ideal".into(),
            per_message_overhead_bytes: 0,
            handshake_ms: 0.0,
            per_byte_factor: 1.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "grpc-like" => Some(Self::grpc_like()),
            "quic-like" => Some(Self::quic_like()),
            "ideal" => Some(Self::ideal()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.handshake_ms.is_finite() && self.handshake_ms >= 0.0) {
            return Err(Error::invalid("protocol.handshake_ms", "must be finite and nonnegative"));
        }
        if !(self.per_byte_factor.is_finite() && self.per_byte_factor >= 1.0) {
            return Err(Error::invalid("protocol.per_byte_factor", "must be finite and at least 1"));
        }
        Ok(())
    }
}

/// Coordinates selected by top-k, in ascending index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    indices: Vec<u32>,
    values: Vec<f64>,
    dim: usize,
}

impl SparseUpdate {
    pub fn new(indices: Vec<u32>, values: Vec<f64>, dim: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} indices for {} values",
                indices.len(),
                values.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("indices", "must be strictly ascending"));
        }
        if indices.last().is_some_and(|&i| i as usize >= dim) {
            return Err(Error::invalid("indices", format!("must be below dim {dim}")));
        }
        Ok(SparseUpdate { indices, values, dim })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Number of coordinates top-k keeps for `dim` entries.
pub fn topk_count(dim: usize, k_fraction: f64) -> usize {
    ((k_fraction * dim as f64).ceil() as usize).min(dim)
}

pub fn validate_k_fraction(k_fraction: f64) -> Result<()> {
    if k_fraction > 0.0 && k_fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("k_fraction", "must lie in (0, 1]"))
    }
}

/// Top-k sparsification with error feedback.
///
/// The corrected update `a = grad + residual` is formed first; the `k`
/// largest `|a[j]|` are transmitted (lowest index wins ties) and the rest of
/// `a` becomes the new residual. Densified output plus new residual equals
/// `a` exactly.
pub fn compress_topk(grad: &Gradient, k_fraction: f64, residual: &Gradient) -> Result<(SparseUpdate, Gradient)> {
    validate_k_fraction(k_fraction)?;
    if grad.len() != residual.len() {
        return Err(Error::DimensionMismatch {
            expected: grad.len(),
            actual: residual.len(),
        });
    }
    if grad.len() > u32::MAX as usize {
        return Err(Error::invalid("grad", "dimension exceeds 32-bit index space"));
    }
    let mut corrected: Vec<f64> = grad.iter().zip(residual.iter()).map(|(g, r)| g + r).collect();
    let k = topk_count(corrected.len(), k_fraction);

    let mut order: Vec<usize> = (0..corrected.len()).collect();
    order.sort_by(|&a, &b| corrected[b].abs().total_cmp(&corrected[a].abs()).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();

    let values = selected.iter().map(|&i| corrected[i]).collect();
    for &i in &selected {
        corrected[i] = 0.0;
    }
    let indices = selected.into_iter().map(|i| i as u32).collect();
    let dim = grad.len();
    Ok((SparseUpdate { indices, values, dim }, Gradient::from(corrected)))
}

pub fn decompress(update: &SparseUpdate) -> Gradient {
    let mut dense = vec![0.0; update.dim];
    for (&i, &v) in update.indices.iter().zip(&update.values) {
        dense[i as usize] = v;
    }
    Gradient::from(dense)
}

/// Shape of a message body as seen by the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Dense { dim: usize },
    Sparse { nnz: usize },
}

/// `ceil(raw * factor)`, ignoring floating-point noise just above an integer.
fn inflate(raw: u64, factor: f64) -> u64 {
    let scaled = raw as f64 * factor;
    let nearest = scaled.round();
    if (scaled - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as u64
    } else {
        scaled.ceil() as u64
    }
}

/// Bytes on the wire for one message.
pub fn wire_bytes(payload: Payload, protocol: &ProtocolProfile) -> u64 {
    let raw = match payload {
        Payload::Dense { dim } => VALUE_BYTES * dim as u64,
        Payload::Sparse { nnz } => (VALUE_BYTES + INDEX_BYTES) * nnz as u64,
    };
    inflate(raw, protocol.per_byte_factor) + protocol.per_message_overhead_bytes
}

/// Milliseconds to move `bytes` over `link`.
pub fn transfer_time(bytes: u64, link: &LinkProfile, protocol: &ProtocolProfile) -> f64 {
    protocol.handshake_ms + link.latency_ms + bytes as f64 / link.bandwidth_bytes_per_ms
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Download,
    Upload,
}

/// Cumulative communication accounting for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CommLedger {
    cumulative_bytes: u64,
    per_round_bytes: Vec<u64>,
    messages: u64,
    upload_bytes: u64,
    download_bytes: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a new round; later messages are charged to it.
    pub fn begin_round(&mut self) {
        self.per_round_bytes.push(0);
    }

    /// Charges one message to the current round and returns its size.
    pub fn record(&mut self, direction: Direction, payload: Payload, protocol: &ProtocolProfile) -> u64 {
        let bytes = wire_bytes(payload, protocol);
        if self.per_round_bytes.is_empty() {
            self.per_round_bytes.push(0);
        }
        *self.per_round_bytes.last_mut().expect("round opened") += bytes;
        self.cumulative_bytes += bytes;
        self.messages += 1;
        match direction {
            Direction::Upload => self.upload_bytes += bytes,
            Direction::Download => self.download_bytes += bytes,
        }
        bytes
    }

    pub fn cumulative_bytes(&self) -> u64 {
        self.cumulative_bytes
    }

    pub fn per_round_bytes(&self) -> &[u64] {
        &self.per_round_bytes
    }

    pub fn current_round_bytes(&self) -> u64 {
        self.per_round_bytes.last().copied().unwrap_or(0)
    }

    pub fn messages(&self) -> u64 {
        self.messages
    }

    pub fn upload_bytes(&self) -> u64 {
        self.upload_bytes
    }

    pub fn download_bytes(&self) -> u64 {
        self.download_bytes
    }
}
