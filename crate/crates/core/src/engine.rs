//! Training-run orchestration over a simulated fleet of platforms.
//!
//! [`run_sync`] executes barrier rounds: broadcast, local training, upload,
//! aggregate, evaluate. [`run_async`] runs an event loop over a simulated
//! clock in which every platform cycles independently and each upload is
//! merged into the global model as soon as it arrives.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    async_merge, dynamic_aggregate, fedavg, gradient_aggregate, staleness_weight, AggregationStrategy, DpMechanism,
    DpSpec, LocalResult,
};
use crate::datagen::{generate_synthetic, rebalance_dynamic, Dataset, PartitionPlan, PartitionStrategy, SyntheticSpec};
use crate::error::{Error, Result};
use crate::netsim::{
    compress_topk, decompress, topk_count, transfer_time, validate_k_fraction, wire_bytes, CommLedger, Direction,
    LinkProfile, Payload, ProtocolProfile,
};
use crate::params::{
    backward, init_params, loss_and_accuracy, loss_and_gradient, sgd_step, Batch, Gradient, ModelSpec, ParamVector,
};
use crate::rng::{self, derive_seed};

const TAG_PARTITION: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_DP: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSpec {
    pub id: usize,
    /// Samples processed per simulated millisecond.
    pub compute_rate: f64,
    pub uplink: LinkProfile,
    pub downlink: LinkProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub platforms: Vec<PlatformSpec>,
    pub partition: PartitionStrategy,
    /// Either a preset name (`"grpc-like"`, `"quic-like"`, `"ideal"`) or a
    /// full profile object.
    #[serde(deserialize_with = "protocol_from_name_or_profile")]
    pub protocol: ProtocolProfile,
}

fn protocol_from_name_or_profile<'de, D>(d: D) -> std::result::Result<ProtocolProfile, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NameOrProfile {
        Name(String),
        Profile(ProtocolProfile),
    }
    match NameOrProfile::deserialize(d)? {
        NameOrProfile::Name(name) => ProtocolProfile::preset(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown protocol preset {name:?}"))),
        NameOrProfile::Profile(p) => Ok(p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSpec {
    pub k_fraction: f64,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: SyntheticSpec,
    pub fleet: FleetConfig,
    pub strategy: AggregationStrategy,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub compression: Option<CompressionSpec>,
    #[serde(default)]
    pub dp: Option<DpSpec>,
    pub eval_fraction: f64,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr", "must be finite and positive"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::invalid("eval_fraction", "must lie in (0, 1)"));
        }
        self.data.validate()?;
        if self.data.features != self.model.features() {
            return Err(Error::invalid("data.features", "must match model.features"));
        }
        if self.data.classes != self.model.classes() {
            return Err(Error::invalid("data.classes", "must match model.classes"));
        }
        let n = self.fleet.platforms.len();
        if n == 0 {
            return Err(Error::invalid("fleet.platforms", "needs at least one platform"));
        }
        for (i, p) in self.fleet.platforms.iter().enumerate() {
            if p.id != i {
                return Err(Error::invalid(
                    format!("fleet.platforms[{i}].id"),
                    "ids must be 0..N-1 in order",
                ));
            }
            if !(p.compute_rate.is_finite() && p.compute_rate > 0.0) {
                return Err(Error::invalid(
                    format!("fleet.platforms[{i}].compute_rate"),
                    "must be finite and positive",
                ));
            }
            p.uplink.validate(&format!("fleet.platforms[{i}].uplink"))?;
            p.downlink.validate(&format!("fleet.platforms[{i}].downlink"))?;
        }
        self.fleet.partition.validate(n)?;
        self.fleet.protocol.validate()?;
        self.strategy.validate()?;
        if let Some(c) = self.compression {
            validate_k_fraction(c.k_fraction)
                .map_err(|_| Error::invalid("compression.k_fraction", "must lie in (0, 1]"))?;
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }
}

/// Metrics recorded after each round (sync) or merge event (async).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub round_bytes: u64,
    pub cumulative_bytes: u64,
    pub simulated_ms: f64,
    /// Latest final-epoch training loss per platform; NaN until a platform
    /// has reported (async only).
    pub per_platform_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub ledger: CommLedger,
    pub final_params: ParamVector,
    pub final_partition: PartitionPlan,
    /// Staleness of every merge, in merge order. Empty for sync runs.
    pub merge_staleness: Vec<u64>,
}

/// Data, partition and initial model derived from a config.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub train: Dataset,
    pub eval: Batch,
    pub partition: PartitionPlan,
    pub initial: ParamVector,
}

/// Generates the dataset, holds out the eval tail, partitions the rest and
/// initialises the global model.
pub fn prepare_run(config: &RunConfig) -> Result<RunSetup> {
    config.validate()?;
    let dataset = generate_synthetic(&config.data)?;
    let (train, eval) = dataset.split_tail(config.eval_fraction)?;
    let partition = config.fleet.partition.initial_plan(
        &train,
        config.fleet.platforms.len(),
        derive_seed(config.seed, TAG_PARTITION),
    )?;
    let initial = init_params(&config.model, derive_seed(config.seed, TAG_INIT));
    Ok(RunSetup {
        train,
        eval,
        partition,
        initial,
    })
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ParamVector,
    /// Mean minibatch loss over the final epoch.
    pub mean_epoch_loss: f64,
    /// Full-shard gradient at the parameters training started from.
    pub gradient: Gradient,
}

/// `epochs` passes of minibatch SGD over `shard`, reshuffled each epoch.
pub fn local_train(
    spec: &ModelSpec,
    params: &ParamVector,
    shard: &Batch,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<LocalOutcome> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    if epochs == 0 {
        return Err(Error::invalid("local_epochs", "must be positive"));
    }
    let gradient = backward(spec, params, shard)?;
    let n = shard.rows();
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut current = params.clone();
    let mut epoch_loss = 0.0;

    for _ in 0..epochs {
        epoch_loss = 0.0;
        if batch_size >= n {
            let (loss, g) = loss_and_gradient(spec, &current, shard)?;
            epoch_loss = loss * n as f64;
            current = sgd_step(&current, &g, lr)?;
            continue;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let mini = shard.select(chunk)?;
            let (loss, g) = loss_and_gradient(spec, &current, &mini)?;
            epoch_loss += loss * chunk.len() as f64;
            current = sgd_step(&current, &g, lr)?;
        }
    }

    Ok(LocalOutcome {
        params: current,
        mean_epoch_loss: epoch_loss / n as f64,
        gradient,
    })
}

/// Mean cross-entropy and argmax accuracy on `eval_set`.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, eval_set: &Batch) -> Result<(f64, f64)> {
    loss_and_accuracy(spec, params, eval_set)
}

/// Per-platform upload pipeline: optional DP, then optional top-k with a
/// persistent residual.
struct UploadChannel {
    dp: Option<DpMechanism>,
    k_fraction: Option<f64>,
    residuals: Vec<Gradient>,
}

impl UploadChannel {
    fn new(config: &RunConfig, dim: usize) -> Result<Self> {
        let dp = match config.dp {
            Some(spec) => Some(DpMechanism::new(DpSpec {
                seed: derive_seed(config.seed ^ spec.seed, TAG_DP),
                ..spec
            })?),
            None => None,
        };
        Ok(UploadChannel {
            dp,
            k_fraction: config.compression.map(|c| c.k_fraction),
            residuals: vec![Gradient::zeros(dim); config.fleet.platforms.len()],
        })
    }

    fn is_lossless(&self) -> bool {
        self.dp.is_none() && self.k_fraction.is_none()
    }

    fn payload(&self, dim: usize) -> Payload {
        match self.k_fraction {
            Some(k) => Payload::Sparse { nnz: topk_count(dim, k) },
            None => Payload::Dense { dim },
        }
    }

    /// Returns what the coordinator reconstructs from `update`.
    fn transmit(&mut self, platform: usize, update: Vec<f64>) -> Result<Vec<f64>> {
        let update = match self.dp.as_mut() {
            Some(dp) => dp.privatize(&update)?,
            None => update,
        };
        match self.k_fraction {
            Some(k) => {
                let (sparse, residual) = compress_topk(&update.into(), k, &self.residuals[platform])?;
                self.residuals[platform] = residual;
                Ok(decompress(&sparse).into_inner())
            }
            None => Ok(update),
        }
    }

    /// Sends local parameters as a delta against `base` when the channel is
    /// lossy; returns the coordinator's view of the local model.
    fn transmit_params(&mut self, platform: usize, base: &ParamVector, local: ParamVector) -> Result<ParamVector> {
        if self.is_lossless() {
            return Ok(local);
        }
        let delta = local.iter().zip(base.iter()).map(|(l, b)| l - b).collect();
        let received = self.transmit(platform, delta)?;
        ParamVector::new(base.iter().zip(&received).map(|(b, d)| b + d).collect())
    }
}

fn materialize_shards(train: &Dataset, plan: &PartitionPlan) -> Result<Vec<Batch>> {
    plan.shards().iter().map(|s| train.select(s)).collect()
}

fn platform_rngs(config: &RunConfig) -> Vec<rng::SimRng> {
    config
        .fleet
        .platforms
        .iter()
        .map(|p| rng::seeded(config.seed ^ p.id as u64))
        .collect()
}

/// Synchronous barrier rounds.
pub fn run_sync(config: &RunConfig) -> Result<RunOutput> {
    run_sync_observed(config, |_, _| {})
}

/// [`run_sync`], calling `observer` with each round's metrics and the new
/// global parameters.
pub fn run_sync_observed<F>(config: &RunConfig, mut observer: F) -> Result<RunOutput>
where
    F: FnMut(&RoundMetrics, &ParamVector),
{
    if config.strategy.is_async() {
        return Err(Error::UnsupportedStrategy {
            strategy: config.strategy.name(),
            runner: "run_sync",
        });
    }
    let setup = prepare_run(config)?;
    let spec = config.model;
    let dim = spec.param_count();
    let protocol = &config.fleet.protocol;
    let platforms = &config.fleet.platforms;
    let mut plan = setup.partition;
    let mut shards = materialize_shards(&setup.train, &plan)?;
    let mut rngs = platform_rngs(config);
    let mut channel = UploadChannel::new(config, dim)?;
    let mut ledger = CommLedger::new();
    let mut global = setup.initial;
    let mut clock = 0.0;
    let mut metrics = Vec::with_capacity(config.rounds);
    let rebalance_every = config.fleet.partition.rebalance_every();

    for round in 1..=config.rounds {
        ledger.begin_round();
        let down_bytes = wire_bytes(Payload::Dense { dim }, protocol);
        for _ in platforms {
            ledger.record(Direction::Download, Payload::Dense { dim }, protocol);
        }

        let seeds: Vec<u64> = rngs.iter_mut().map(|r| r.next_u64()).collect();
        let outcomes: Vec<LocalOutcome> = shards
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(shard, &seed)| {
                local_train(&spec, &global, shard, config.local_epochs, config.batch_size, config.lr, seed)
            })
            .collect::<Result<_>>()?;

        let up_payload = channel.payload(dim);
        let losses: Vec<f64> = outcomes.iter().map(|o| o.mean_epoch_loss).collect();
        let mut platform_ms = Vec::with_capacity(platforms.len());
        let mut locals = Vec::with_capacity(platforms.len());
        let mut grads = Vec::with_capacity(platforms.len());
        for ((p, outcome), shard) in platforms.iter().zip(outcomes).zip(&shards) {
            let up_bytes = ledger.record(Direction::Upload, up_payload, protocol);
            let compute_ms = (config.local_epochs * shard.rows()) as f64 / p.compute_rate;
            platform_ms.push(
                transfer_time(down_bytes, &p.downlink, protocol)
                    + compute_ms
                    + transfer_time(up_bytes, &p.uplink, protocol),
            );
            match config.strategy {
                AggregationStrategy::Gradient { .. } => {
                    let received = channel.transmit(p.id, outcome.gradient.into_inner())?;
                    grads.push((Gradient::new(received)?, shard.rows()));
                }
                _ => locals.push(LocalResult {
                    platform_id: p.id,
                    params: channel.transmit_params(p.id, &global, outcome.params)?,
                    sample_count: shard.rows(),
                    local_loss: outcome.mean_epoch_loss,
                }),
            }
        }

        global = match config.strategy {
            AggregationStrategy::Fedavg => fedavg(&locals)?,
            AggregationStrategy::DynamicWeighted => dynamic_aggregate(&locals)?,
            AggregationStrategy::Gradient { lr } => gradient_aggregate(&global, &grads, lr)?,
            AggregationStrategy::Async { .. } => unreachable!("rejected above"),
        };

        clock += platform_ms.iter().copied().fold(0.0, f64::max);
        let (eval_loss, eval_accuracy) = evaluate(&spec, &global, &setup.eval)?;
        let record = RoundMetrics {
            round,
            eval_loss,
            eval_accuracy,
            round_bytes: ledger.current_round_bytes(),
            cumulative_bytes: ledger.cumulative_bytes(),
            simulated_ms: clock,
            per_platform_losses: losses,
        };
        observer(&record, &global);
        metrics.push(record);

        if let Some(every) = rebalance_every {
            if round % every == 0 && round < config.rounds {
                plan = rebalance_dynamic(&plan, &platform_ms)?;
                shards = materialize_shards(&setup.train, &plan)?;
            }
        }
    }

    Ok(RunOutput {
        metrics,
        ledger,
        final_params: global,
        final_partition: plan,
        merge_staleness: Vec::new(),
    })
}

/// Work a platform has started but whose upload has not yet arrived.
struct InFlight {
    base_version: u64,
    base: ParamVector,
    outcome: LocalOutcome,
    started_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Arrival {
    at_ms: f64,
    platform: usize,
}

impl Eq for Arrival {}

impl Ord for Arrival {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at_ms
            .total_cmp(&other.at_ms)
            .then(self.platform.cmp(&other.platform))
    }
}

impl PartialOrd for Arrival {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct AsyncFleet<'a> {
    config: &'a RunConfig,
    train: &'a Dataset,
    plan: PartitionPlan,
    shards: Vec<Batch>,
    rngs: Vec<rng::SimRng>,
    pending: Vec<Option<InFlight>>,
    queue: BinaryHeap<Reverse<Arrival>>,
    up_bytes: u64,
}

impl AsyncFleet<'_> {
    /// Platform `id` downloads the current global model at `now_ms`, trains,
    /// and schedules its upload arrival.
    fn launch(
        &mut self,
        id: usize,
        now_ms: f64,
        global: &ParamVector,
        version: u64,
        ledger: &mut CommLedger,
    ) -> Result<()> {
        let config = self.config;
        let platform = &config.fleet.platforms[id];
        let protocol = &config.fleet.protocol;
        let dim = config.model.param_count();
        let down_bytes = ledger.record(Direction::Download, Payload::Dense { dim }, protocol);
        let seed = self.rngs[id].next_u64();
        let shard = &self.shards[id];
        let outcome = local_train(
            &config.model,
            global,
            shard,
            config.local_epochs,
            config.batch_size,
            config.lr,
            seed,
        )?;
        let compute_ms = (config.local_epochs * shard.rows()) as f64 / platform.compute_rate;
        let at_ms = now_ms
            + transfer_time(down_bytes, &platform.downlink, protocol)
            + compute_ms
            + transfer_time(self.up_bytes, &platform.uplink, protocol);
        self.pending[id] = Some(InFlight {
            base_version: version,
            base: global.clone(),
            outcome,
            started_ms: now_ms,
        });
        self.queue.push(Reverse(Arrival { at_ms, platform: id }));
        Ok(())
    }
}

/// Event-driven asynchronous training; one metrics record per merge.
pub fn run_async(config: &RunConfig) -> Result<RunOutput> {
    run_async_observed(config, |_, _| {})
}

/// [`run_async`], calling `observer` after every merge.
pub fn run_async_observed<F>(config: &RunConfig, mut observer: F) -> Result<RunOutput>
where
    F: FnMut(&RoundMetrics, &ParamVector),
{
    let (alpha0, exponent) = match config.strategy {
        AggregationStrategy::Async {
            alpha0,
            staleness_exponent,
        } => (alpha0, staleness_exponent),
        other => {
            return Err(Error::UnsupportedStrategy {
                strategy: other.name(),
                runner: "run_async",
            })
        }
    };
    let setup = prepare_run(config)?;
    let spec = config.model;
    let dim = spec.param_count();
    let n = config.fleet.platforms.len();
    let mut channel = UploadChannel::new(config, dim)?;
    let up_payload = channel.payload(dim);
    let mut fleet = AsyncFleet {
        config,
        train: &setup.train,
        shards: materialize_shards(&setup.train, &setup.partition)?,
        plan: setup.partition.clone(),
        rngs: platform_rngs(config),
        pending: (0..n).map(|_| None).collect(),
        queue: BinaryHeap::with_capacity(n),
        up_bytes: wire_bytes(up_payload, &config.fleet.protocol),
    };
    let mut ledger = CommLedger::new();
    let mut global = setup.initial;
    let mut version = 0u64;
    let mut losses = vec![f64::NAN; n];
    let mut cycle_ms: Vec<Option<f64>> = vec![None; n];
    let mut metrics = Vec::with_capacity(config.rounds);
    let mut staleness_log = Vec::with_capacity(config.rounds);
    let rebalance_every = config.fleet.partition.rebalance_every();

    ledger.begin_round();
    for id in 0..n {
        fleet.launch(id, 0.0, &global, version, &mut ledger)?;
    }

    for merge in 1..=config.rounds {
        let Reverse(arrival) = fleet.queue.pop().expect("every platform keeps one cycle in flight");
        let id = arrival.platform;
        let job = fleet.pending[id].take().expect("arrival matches a pending cycle");
        ledger.record(Direction::Upload, up_payload, &config.fleet.protocol);
        let local = channel.transmit_params(id, &job.base, job.outcome.params)?;
        let staleness = version - job.base_version;
        global = async_merge(&global, &local, staleness_weight(alpha0, staleness, exponent))?;
        version += 1;
        staleness_log.push(staleness);
        losses[id] = job.outcome.mean_epoch_loss;
        cycle_ms[id] = Some(arrival.at_ms - job.started_ms);

        if let Some(every) = rebalance_every {
            if merge % every == 0 && merge < config.rounds {
                if let Some(times) = cycle_ms.iter().copied().collect::<Option<Vec<f64>>>() {
                    fleet.plan = rebalance_dynamic(&fleet.plan, &times)?;
                    fleet.shards = materialize_shards(fleet.train, &fleet.plan)?;
                }
            }
        }
        if merge < config.rounds {
            fleet.launch(id, arrival.at_ms, &global, version, &mut ledger)?;
        }

        let (eval_loss, eval_accuracy) = evaluate(&spec, &global, &setup.eval)?;
        let record = RoundMetrics {
            round: merge,
            eval_loss,
            eval_accuracy,
            round_bytes: ledger.current_round_bytes(),
            cumulative_bytes: ledger.cumulative_bytes(),
            simulated_ms: arrival.at_ms,
            per_platform_losses: losses.clone(),
        };
        observer(&record, &global);
        metrics.push(record);
        if merge < config.rounds {
            ledger.begin_round();
        }
    }

    Ok(RunOutput {
        metrics,
        ledger,
        final_params: global,
        final_partition: fleet.plan,
        merge_staleness: staleness_log,
    })
}

/// Dispatches to [`run_sync`] or [`run_async`] by strategy.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    if config.strategy.is_async() {
        run_async(config)
    } else {
        run_sync(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::forward_loss;

    fn link() -> LinkProfile {
        LinkProfile {
            latency_ms: 20.0,
            bandwidth_bytes_per_ms: 500.0,
        }
    }

    fn platform(id: usize, rate: f64) -> PlatformSpec {
        PlatformSpec {
            id,
            compute_rate: rate,
            uplink: link(),
            downlink: link(),
        }
    }

    fn small_config(strategy: AggregationStrategy, rates: &[f64]) -> RunConfig {
        let n = rates.len();
        RunConfig {
            model: ModelSpec::logistic(6, 3).unwrap(),
            data: SyntheticSpec {
                samples: 300,
                features: 6,
                classes: 3,
                separation: 3.0,
                seed: 5,
            },
            fleet: FleetConfig {
                platforms: rates.iter().enumerate().map(|(i, &r)| platform(i, r)).collect(),
                partition: PartitionStrategy::Fixed {
                    proportions: vec![1.0 / n as f64; n],
                },
                protocol: ProtocolProfile::grpc_like(),
            },
            strategy,
            rounds: 6,
            local_epochs: 2,
            batch_size: 16,
            lr: 0.1,
            compression: None,
            dp: None,
            eval_fraction: 0.2,
            seed: 9,
        }
    }

    fn shard(rows: usize, seed: u64) -> Batch {
        let data = generate_synthetic(&SyntheticSpec {
            samples: rows.max(2),
            features: 3,
            classes: 2,
            separation: 4.0,
            seed,
        })
        .unwrap();
        data.select(&(0..rows).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_rounds_rejected() {
        let mut c = small_config(AggregationStrategy::Fedavg, &[1.0]);
        c.rounds = 0;
        assert!(matches!(run_sync(&c), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn runners_reject_wrong_strategy() {
        let sync = small_config(AggregationStrategy::Fedavg, &[1.0]);
        assert!(matches!(run_async(&sync), Err(Error::UnsupportedStrategy { .. })));
        let asy = small_config(
            AggregationStrategy::Async {
                alpha0: 0.5,
                staleness_exponent: 0.0,
            },
            &[1.0],
        );
        assert!(matches!(run_sync(&asy), Err(Error::UnsupportedStrategy { .. })));
    }

    #[test]
    fn single_sample_full_batch_is_one_step() {
        let spec = ModelSpec::logistic(3, 2).unwrap();
        let b = shard(1, 3);
        let p = init_params(&spec, 4);
        let out = local_train(&spec, &p, &b, 1, 8, 0.3, 0).unwrap();
        let expected = sgd_step(&p, &backward(&spec, &p, &b).unwrap(), 0.3).unwrap();
        assert_eq!(out.params, expected);
    }

    #[test]
    fn zero_lr_freezes_model() {
        let spec = ModelSpec::logistic(3, 2).unwrap();
        let b = shard(37, 1);
        let p = init_params(&spec, 2);
        let out = local_train(&spec, &p, &b, 3, 5, 0.0, 11).unwrap();
        assert_eq!(out.params, p);
        let full = forward_loss(&spec, &p, &b).unwrap();
        assert!((out.mean_epoch_loss - full).abs() < 1e-12);
        assert!(local_train(&spec, &p, &b, 1, 0, 0.1, 0).is_err());
    }

    #[test]
    fn local_loss_decreases_on_separable_shard() {
        let spec = ModelSpec::logistic(3, 2).unwrap();
        let b = shard(64, 8);
        let mut p = ParamVector::zeros(spec.param_count());
        let mut trace = Vec::new();
        for epoch in 0..5 {
            let out = local_train(&spec, &p, &b, 1, 8, 0.1, epoch).unwrap();
            trace.push(out.mean_epoch_loss);
            p = out.params;
        }
        assert!(trace.windows(2).all(|w| w[1] < w[0]), "{trace:?}");
    }

    #[test]
    fn evaluate_at_zero_params() {
        let spec = ModelSpec::logistic(3, 10).unwrap();
        let data = generate_synthetic(&SyntheticSpec {
            samples: 57,
            features: 3,
            classes: 10,
            separation: 1.0,
            seed: 2,
        })
        .unwrap();
        let (loss, acc) = evaluate(&spec, &ParamVector::zeros(spec.param_count()), data.as_batch()).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let zeros = data.labels().iter().filter(|&&l| l == 0).count();
        assert_eq!(acc, zeros as f64 / 57.0);
    }

    #[test]
    fn sync_metrics_are_monotone_and_audited() {
        for strategy in [
            AggregationStrategy::Fedavg,
            AggregationStrategy::DynamicWeighted,
            AggregationStrategy::Gradient { lr: 0.5 },
        ] {
            let c = small_config(strategy, &[1.0, 2.0, 0.5]);
            let out = run_sync(&c).unwrap();
            assert_eq!(out.metrics.len(), c.rounds);
            assert!(out.metrics.windows(2).all(|w| w[1].simulated_ms >= w[0].simulated_ms
                && w[1].cumulative_bytes >= w[0].cumulative_bytes));
            let last = out.metrics.last().unwrap();
            assert_eq!(last.cumulative_bytes, out.ledger.cumulative_bytes());
            assert_eq!(out.metrics.iter().map(|m| m.round_bytes).sum::<u64>(), last.cumulative_bytes);
            assert_eq!(out.ledger.messages(), 2 * 3 * c.rounds as u64);
        }
    }

    #[test]
    fn param_strategies_send_same_bytes() {
        let a = run_sync(&small_config(AggregationStrategy::Fedavg, &[1.0, 1.0])).unwrap();
        let b = run_sync(&small_config(AggregationStrategy::DynamicWeighted, &[1.0, 1.0])).unwrap();
        assert_eq!(a.ledger.per_round_bytes(), b.ledger.per_round_bytes());
    }

    #[test]
    fn compressed_gradient_upload_size() {
        let mut c = small_config(AggregationStrategy::Gradient { lr: 0.5 }, &[1.0, 1.0]);
        c.compression = Some(CompressionSpec { k_fraction: 0.25 });
        let out = run_sync(&c).unwrap();
        let dim = c.model.param_count();
        let k = (0.25 * dim as f64).ceil();
        let per_upload = (12.0 * k * 1.02).ceil() as u64 + 128;
        assert_eq!(out.ledger.upload_bytes(), per_upload * 2 * c.rounds as u64);
    }

    #[test]
    fn sync_is_deterministic_with_dp_and_compression() {
        let mut c = small_config(AggregationStrategy::DynamicWeighted, &[1.0, 3.0, 2.0]);
        c.compression = Some(CompressionSpec { k_fraction: 0.3 });
        c.dp = Some(DpSpec {
            clip_norm: 1.0,
            sigma: 0.1,
            seed: 4,
        });
        let a = run_sync(&c).unwrap();
        let b = run_sync(&c).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn dynamic_partition_rebalances_toward_fast_platforms() {
        let mut c = small_config(AggregationStrategy::Fedavg, &[4.0, 1.0]);
        c.fleet.partition = PartitionStrategy::Dynamic { rebalance_every: 2 };
        let out = run_sync(&c).unwrap();
        let sizes = out.final_partition.sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 240);
        assert!(sizes[0] > sizes[1], "{sizes:?}");
    }

    #[test]
    fn async_single_platform_matches_sync_fedavg() {
        let sync_cfg = small_config(AggregationStrategy::Fedavg, &[1.0]);
        let mut async_cfg = sync_cfg.clone();
        async_cfg.strategy = AggregationStrategy::Async {
            alpha0: 1.0,
            staleness_exponent: 0.0,
        };
        let mut sync_traj = Vec::new();
        run_sync_observed(&sync_cfg, |_, p| sync_traj.push(p.clone())).unwrap();
        let mut async_traj = Vec::new();
        let out = run_async_observed(&async_cfg, |_, p| async_traj.push(p.clone())).unwrap();
        assert_eq!(sync_traj, async_traj);
        assert!(out.merge_staleness.iter().all(|&s| s == 0));
    }

    #[test]
    fn async_identical_platforms_bound_staleness() {
        let mut c = small_config(
            AggregationStrategy::Async {
                alpha0: 0.5,
                staleness_exponent: 0.5,
            },
            &[1.0, 1.0, 1.0],
        );
        c.rounds = 30;
        let out = run_async(&c).unwrap();
        assert_eq!(out.metrics.len(), 30);
        assert!(out.merge_staleness.iter().all(|&s| s <= 2));
        assert!(out.merge_staleness.contains(&2));
        assert_eq!(out.ledger.cumulative_bytes(), out.metrics.last().unwrap().cumulative_bytes);
        assert_eq!(out.metrics.iter().map(|m| m.round_bytes).sum::<u64>(), out.ledger.cumulative_bytes());
        let again = run_async(&c).unwrap();
        assert_eq!(out.metrics.len(), again.metrics.len());
        for (a, b) in out.metrics.iter().zip(&again.metrics) {
            assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
    }

    #[test]
    fn async_fast_platform_merges_more_often() {
        let mut c = small_config(
            AggregationStrategy::Async {
                alpha0: 0.5,
                staleness_exponent: 0.0,
            },
            &[4.0, 1.0],
        );
        c.rounds = 20;
        let out = run_async(&c).unwrap();
        assert!(out.metrics.windows(2).all(|w| w[1].simulated_ms >= w[0].simulated_ms));
        assert!(out.merge_staleness.iter().any(|&s| s > 0));
    }
}
