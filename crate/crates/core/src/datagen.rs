//! Synthetic data and the partition strategies that spread it across
//! platforms.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Batch;
use crate::rng;

const PROPORTION_TOLERANCE: f64 = 1e-9;

/// A labelled dataset with a known number of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    batch: Batch,
    classes: usize,
}

impl Dataset {
    pub fn new(batch: Batch, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("classes", "must be at least 2"));
        }
        if batch.labels().iter().any(|&l| l >= classes) {
            return Err(Error::invalid("labels", format!("must be below {classes}")));
        }
        Ok(Dataset { batch, classes })
    }

    pub fn len(&self) -> usize {
        self.batch.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.batch.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        self.batch.labels()
    }

    pub fn as_batch(&self) -> &Batch {
        &self.batch
    }

    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        self.batch.select(indices)
    }

    /// Splits off the last `eval_fraction` of the rows (at least one row)
    /// as a held-out set; the remaining prefix is returned as the training set.
    pub fn split_tail(&self, eval_fraction: f64) -> Result<(Dataset, Batch)> {
        if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
            return Err(Error::invalid("eval_fraction", "must lie in (0, 1)"));
        }
        let n = self.len();
        let eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n.saturating_sub(1));
        if eval == 0 || eval >= n {
            return Err(Error::invalid("eval_fraction", "leaves no training rows"));
        }
        let train_idx: Vec<usize> = (0..n - eval).collect();
        let eval_idx: Vec<usize> = (n - eval..n).collect();
        Ok((
            Dataset::new(self.select(&train_idx)?, self.classes)?,
            self.select(&eval_idx)?,
        ))
    }

    /// Per-class sample counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in self.labels() {
            counts[l] += 1;
        }
        counts
    }

    /// Writes a header row (`x0..x{f-1},label`) followed by one row per sample.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header: Vec<String> = (0..self.features()).map(|j| format!("x{j}")).collect();
        header.push("label".to_string());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.batch.row(i).iter().map(|v| v.to_string()).collect();
            record.push(self.labels()[i].to_string());
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Dataset::write_csv`]. The class count is
    /// taken as `max(label) + 1` (at least 2).
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let headers = input.headers()?.clone();
        if headers.iter().next_back() != Some("label") || headers.len() < 2 {
            return Err(Error::invalid("csv header", "expected feature columns then `label`"));
        }
        let cols = headers.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in input.records().enumerate() {
            let record = record?;
            let parse_err = |what: &str| Error::invalid(format!("csv row {}", line + 1), what.to_string());
            for field in record.iter().take(cols) {
                features.push(field.parse::<f64>().map_err(|_| parse_err("bad feature value"))?);
            }
            let label = record.get(cols).ok_or_else(|| parse_err("missing label"))?;
            labels.push(label.parse::<usize>().map_err(|_| parse_err("bad label"))?);
        }
        let classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
        Dataset::new(Batch::new(features, cols, labels)?, classes)
    }
}

/// Parameters of the class-conditional Gaussian generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::invalid("data.features", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("data.classes", "must be at least 2"));
        }
        if self.samples < self.classes {
            return Err(Error::invalid("data.samples", "must be at least the class count"));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::invalid("data.separation", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

fn class_means<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<Vec<f64>> {
    let orthogonalize = spec.features >= spec.classes;
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while units.len() < spec.classes {
        let mut v: Vec<f64> = (0..spec.features).map(|_| StandardNormal.sample(rng)).collect();
        if orthogonalize {
            for u in &units {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        units.push(v);
    }
    units
        .into_iter()
        .map(|u| u.into_iter().map(|a| a * spec.separation).collect())
        .collect()
}

/// Unit-covariance Gaussian clusters, one per class, with labels assigned
/// round-robin and then shuffled.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let means = class_means(spec, &mut rng);
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(spec.samples * spec.features);
    for &label in &labels {
        for &m in &means[label] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(m + noise);
        }
    }
    Dataset::new(Batch::new(features, spec.features, labels)?, spec.classes)
}

/// Disjoint shard assignment of dataset indices to platforms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Checks that the shards are nonempty, pairwise disjoint and cover
    /// `0..total` exactly.
    pub fn from_shards(shards: Vec<Vec<usize>>, total: usize) -> Result<Self> {
        let plan = PartitionPlan { shards };
        plan.validate(total)?;
        Ok(plan)
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if self.shards.is_empty() {
            return Err(Error::Partition("no shards".into()));
        }
        let mut seen = vec![false; total];
        for (p, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Partition(format!("shard {p} is empty")));
            }
            for &i in shard {
                match seen.get_mut(i) {
                    None => return Err(Error::Partition(format!("index {i} out of range"))),
                    Some(true) => return Err(Error::Partition(format!("index {i} assigned twice"))),
                    Some(s) => *s = true,
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("index {missing} unassigned")));
        }
        Ok(())
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn platforms(&self) -> usize {
        self.shards.len()
    }

    pub fn total(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }
}

/// How training data is distributed over platforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionStrategy {
    Fixed {
        proportions: Vec<f64>,
    },
    Dirichlet {
        beta: f64,
        /// Defaults to an even split.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        proportions: Option<Vec<f64>>,
    },
    /// Starts from an even split and is rebalanced by measured throughput
    /// every `rebalance_every` rounds.
    Dynamic { rebalance_every: usize },
}

impl PartitionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionStrategy::Fixed { .. } => "fixed",
            PartitionStrategy::Dirichlet { .. } => "dirichlet",
            PartitionStrategy::Dynamic { .. } => "dynamic",
        }
    }

    pub fn validate(&self, platforms: usize) -> Result<()> {
        match self {
            PartitionStrategy::Fixed { proportions } => {
                validate_proportions(proportions, platforms, "partition.proportions")
            }
            PartitionStrategy::Dirichlet { beta, proportions } => {
                if !(beta.is_finite() && *beta > 0.0) {
                    return Err(Error::invalid("partition.beta", "must be finite and positive"));
                }
                match proportions {
                    Some(p) => validate_proportions(p, platforms, "partition.proportions"),
                    None => Ok(()),
                }
            }
            PartitionStrategy::Dynamic { rebalance_every } => {
                if *rebalance_every == 0 {
                    Err(Error::invalid("partition.rebalance_every", "must be positive"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Builds the initial plan for `platforms` shards.
    pub fn initial_plan(&self, dataset: &Dataset, platforms: usize, seed: u64) -> Result<PartitionPlan> {
        self.validate(platforms)?;
        match self {
            PartitionStrategy::Fixed { proportions } => partition_fixed(dataset, proportions, seed),
            PartitionStrategy::Dirichlet { beta, proportions } => {
                let even = vec![1.0 / platforms as f64; platforms];
                partition_dirichlet_weighted(dataset, proportions.as_deref().unwrap_or(&even), *beta, seed)
            }
            PartitionStrategy::Dynamic { .. } => {
                partition_fixed(dataset, &vec![1.0 / platforms as f64; platforms], seed)
            }
        }
    }

    pub fn rebalance_every(&self) -> Option<usize> {
        match self {
            PartitionStrategy::Dynamic { rebalance_every } => Some(*rebalance_every),
            _ => None,
        }
    }
}

fn validate_proportions(proportions: &[f64], platforms: usize, field: &str) -> Result<()> {
    if proportions.len() != platforms {
        return Err(Error::invalid(
            field,
            format!("expected {platforms} entries, got {}", proportions.len()),
        ));
    }
    if proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid(field, "entries must be finite and nonnegative"));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > PROPORTION_TOLERANCE {
        return Err(Error::invalid(field, format!("must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Splits `total` into integer parts proportional to `weights` (need not be
/// normalised): floors first, then the leftover units go to the largest
/// fractional remainders, lowest index first on ties.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum.is_nan() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut parts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

/// Shuffles all indices by `seed` and cuts them into shards sized by
/// largest-remainder rounding of `proportions`.
pub fn partition_fixed(dataset: &Dataset, proportions: &[f64], seed: u64) -> Result<PartitionPlan> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    validate_proportions(proportions, proportions.len(), "proportions")?;
    if proportions.is_empty() {
        return Err(Error::EmptyInput("proportions"));
    }
    let sizes = largest_remainder(dataset.len(), proportions);
    if let Some(p) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Partition(format!("platform {p} would receive no samples")));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut rng::seeded(seed));
    let mut shards = Vec::with_capacity(sizes.len());
    let mut rest = indices.as_slice();
    for size in sizes {
        let (head, tail) = rest.split_at(size);
        shards.push(head.to_vec());
        rest = tail;
    }
    PartitionPlan::from_shards(shards, dataset.len())
}

/// Label-skewed split: each class is divided over `platforms` by a
/// Dirichlet(beta, ..., beta) draw.
pub fn partition_dirichlet(dataset: &Dataset, platforms: usize, beta: f64, seed: u64) -> Result<PartitionPlan> {
    if platforms == 0 {
        return Err(Error::invalid("platforms", "must be positive"));
    }
    partition_dirichlet_weighted(dataset, &vec![1.0 / platforms as f64; platforms], beta, seed)
}

/// Dirichlet split whose concentration for platform `i` is
/// `beta * N * proportions[i]`; even proportions reduce to
/// [`partition_dirichlet`].
pub fn partition_dirichlet_weighted(
    dataset: &Dataset,
    proportions: &[f64],
    beta: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    let platforms = proportions.len();
    if platforms == 0 {
        return Err(Error::invalid("platforms", "must be positive"));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::invalid("beta", "must be finite and positive"));
    }
    validate_proportions(proportions, platforms, "proportions")?;
    if dataset.len() < platforms {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {platforms} shards",
            dataset.len()
        )));
    }

    let mut rng = rng::seeded(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let concentrations: Vec<Option<Gamma<f64>>> = proportions
        .iter()
        .map(|&p| {
            let shape = beta * platforms as f64 * p;
            (shape > 0.0).then(|| Gamma::new(shape, 1.0).expect("positive shape"))
        })
        .collect();

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); platforms];
    for mut members in by_class {
        members.shuffle(&mut rng);
        let mut draws: Vec<f64> = concentrations
            .iter()
            .map(|g| g.as_ref().map_or(0.0, |g| g.sample(&mut rng)))
            .collect();
        if draws.iter().sum::<f64>().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            // every gamma draw underflowed: put the class on one eligible platform
            let eligible: Vec<usize> = (0..platforms).filter(|&i| concentrations[i].is_some()).collect();
            let pick = eligible[rng.random_range(0..eligible.len())];
            draws.iter_mut().enumerate().for_each(|(i, d)| *d = f64::from(u8::from(i == pick)));
        }
        let counts = largest_remainder(members.len(), &draws);
        let mut rest = members.as_slice();
        for (shard, count) in shards.iter_mut().zip(counts) {
            let (head, tail) = rest.split_at(count);
            shard.extend_from_slice(head);
            rest = tail;
        }
    }

    repair_empty(&mut shards);
    PartitionPlan::from_shards(shards, dataset.len())
}

/// Moves one sample from the largest shard (lowest index on ties) into each
/// empty shard.
fn repair_empty(shards: &mut [Vec<usize>]) {
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("nonempty shard list");
        let moved = shards[donor].pop().expect("donor has samples");
        shards[empty].push(moved);
    }
}

/// Reassigns samples so shard sizes follow measured throughput
/// (`size_i / round_ms_i`). Donors give up the tail of their shard; the
/// pooled samples are handed out to growing platforms in id order.
pub fn rebalance_dynamic(plan: &PartitionPlan, measured_round_ms: &[f64]) -> Result<PartitionPlan> {
    if measured_round_ms.len() != plan.platforms() {
        return Err(Error::ShapeMismatch(format!(
            "{} measurements for {} platforms",
            measured_round_ms.len(),
            plan.platforms()
        )));
    }
    if measured_round_ms.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::invalid("measured_round_ms", "must be finite and positive"));
    }
    let total = plan.total();
    if total < plan.platforms() {
        return Err(Error::Partition("fewer samples than platforms".into()));
    }
    let throughput: Vec<f64> = plan
        .shards
        .iter()
        .zip(measured_round_ms)
        .map(|(s, t)| s.len() as f64 / t)
        .collect();
    let mut sizes = largest_remainder(total, &throughput);
    while let Some(zero) = sizes.iter().position(|&s| s == 0) {
        let donor = (0..sizes.len())
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .expect("nonempty");
        sizes[donor] -= 1;
        sizes[zero] = 1;
    }

    let mut shards = plan.shards.clone();
    let mut pool = Vec::new();
    for (shard, &target) in shards.iter_mut().zip(&sizes) {
        if shard.len() > target {
            pool.extend(shard.drain(target..));
        }
    }
    let mut pool = pool.into_iter();
    for (shard, &target) in shards.iter_mut().zip(&sizes) {
        while shard.len() < target {
            shard.push(pool.next().expect("pool sized by construction"));
        }
    }
    PartitionPlan::from_shards(shards, total)
}
