//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::HashSet;
use std::process::ExitCode;

use fedsim::aggregate::{dynamic_weights, AggregationStrategy};
use fedsim::cli::{parse_experiment, write_metrics_csv, NamedRun};
use fedsim::datagen::{generate_synthetic, rebalance_dynamic, PartitionPlan, PartitionStrategy, SyntheticSpec};
use fedsim::engine::{self, prepare_run, CompressionSpec, RoundMetrics, RunConfig, RunOutput};
use fedsim::netsim::{compress_topk, decompress};
use fedsim::params::{backward, forward_loss, sgd_step, Gradient, ModelSpec, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BENCHMARK: &str = include_str!("../../../configs/benchmark.json");
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TARGET_ACCURACY: f64 = 0.8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn benchmark_entry(name: &str, seed: u64) -> RunConfig {
    parse_experiment(BENCHMARK, Some(seed))
        .expect("benchmark config parses")
        .into_iter()
        .find(|r| r.name == name)
        .unwrap_or_else(|| panic!("benchmark has no entry {name}"))
        .config
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// First record reaching the target accuracy, if any.
fn first_at_target(metrics: &[RoundMetrics]) -> Option<&RoundMetrics> {
    metrics.iter().find(|m| m.eval_accuracy >= TARGET_ACCURACY)
}

fn small_spec(samples: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        samples,
        features: 4,
        classes: 3,
        separation: 2.0,
        seed,
    }
}

/// Three platforms with 20 training rows each and full-batch local steps.
fn oracle_config(strategy: AggregationStrategy, platforms: usize) -> RunConfig {
    let mut config = benchmark_entry("fedavg", 7);
    config.model = ModelSpec::logistic(4, 3).unwrap();
    config.data = small_spec(20 * platforms * 4 / 3, 7);
    config.fleet.platforms.truncate(platforms);
    config.fleet.partition = PartitionStrategy::Fixed {
        proportions: vec![1.0 / platforms as f64; platforms],
    };
    config.eval_fraction = 0.25;
    config.batch_size = 1000;
    config.strategy = strategy;
    config
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let eta = 0.5;
    let mut config = oracle_config(AggregationStrategy::Gradient { lr: eta }, 3);
    config.rounds = 10;
    config.local_epochs = 1;
    let setup = prepare_run(&config).unwrap();
    if setup.partition.sizes() != vec![20, 20, 20] {
        return outcome(false, format!("shard sizes {:?}", setup.partition.sizes()));
    }
    let union = setup.train.as_batch().clone();
    let mut reference = setup.initial.clone();
    let mut worst = 0.0f64;
    let mut rounds = 0;
    engine::run_sync_observed(&config, |_, global| {
        reference = sgd_step(&reference, &backward(&config.model, &reference, &union).unwrap(), eta).unwrap();
        worst = worst.max(max_abs_diff(global, &reference));
        rounds += 1;
    })
    .unwrap();
    outcome(
        rounds == 10 && worst <= 1e-10,
        format!("{rounds} rounds, max |diff| = {worst:.3e} (limit 1e-10)"),
    )
}

fn criterion_2() -> Outcome {
    let mut config = oracle_config(AggregationStrategy::Fedavg, 1);
    config.rounds = 20;
    config.local_epochs = 2;
    config.lr = 0.3;
    let setup = prepare_run(&config).unwrap();
    let shard = setup.train.select(&setup.partition.shards()[0]).unwrap();
    let mut reference = setup.initial.clone();
    let mut worst = 0.0f64;
    engine::run_sync_observed(&config, |_, global| {
        for _ in 0..config.local_epochs {
            reference = sgd_step(&reference, &backward(&config.model, &reference, &shard).unwrap(), config.lr).unwrap();
        }
        worst = worst.max(max_abs_diff(global, &reference));
    })
    .unwrap();
    outcome(worst <= 1e-12, format!("20 rounds, max |diff| = {worst:.3e} (limit 1e-12)"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for trial in 0..100 {
        let n = rng.random_range(1..12);
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        let shift = rng.random_range(-200.0..200.0);
        let a = dynamic_weights(&losses).unwrap().alphas;
        let shifted: Vec<f64> = losses.iter().map(|l| l + shift).collect();
        let b = dynamic_weights(&shifted).unwrap().alphas;
        let argmax = (0..n).max_by(|&i, &j| a[i].total_cmp(&a[j]).then(j.cmp(&i))).unwrap();
        let argmin = (0..n).min_by(|&i, &j| losses[i].total_cmp(&losses[j])).unwrap();
        let ok = (a.iter().sum::<f64>() - 1.0).abs() <= 1e-12
            && a.iter().all(|&x| x > 0.0)
            && argmax == argmin
            && max_abs_diff(&a, &b) <= 1e-12;
        if !ok {
            failures.push(trial);
        }
    }
    outcome(failures.is_empty(), format!("100 loss vectors, failing trials {failures:?}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..100 {
        let dim = rng.random_range(1..300);
        let k = rng.random_range(0.001..=1.0);
        let scale = 10f64.powi(rng.random_range(-6..6));
        let grad: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..scale)).collect();
        let residual: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..scale)).collect();
        let (sparse, new_residual) =
            compress_topk(&Gradient::new(grad.clone()).unwrap(), k, &Gradient::new(residual.clone()).unwrap()).unwrap();
        let sent = decompress(&sparse);
        violations += (0..dim)
            .filter(|&i| sent[i] + new_residual[i] != grad[i] + residual[i])
            .count();
    }
    outcome(violations == 0, format!("100 triples, {violations} inexact coordinates"))
}

struct SeedRuns {
    fedavg: RunOutput,
    dynamic: RunOutput,
    gradient: RunOutput,
}

fn benchmark_runs() -> Vec<SeedRuns> {
    SEEDS
        .iter()
        .map(|&s| SeedRuns {
            fedavg: engine::run(&benchmark_entry("fedavg", s)).unwrap(),
            dynamic: engine::run(&benchmark_entry("dynamic", s)).unwrap(),
            gradient: engine::run(&benchmark_entry("gradient-topk", s)).unwrap(),
        })
        .collect()
}

fn rounds_to_target(out: &RunOutput) -> f64 {
    first_at_target(&out.metrics).map_or(f64::INFINITY, |m| m.round as f64)
}

fn criterion_5(runs: &[SeedRuns]) -> Outcome {
    let final_acc = |f: fn(&SeedRuns) -> &RunOutput| median(runs.iter().map(|r| f(r).metrics.last().unwrap().eval_accuracy).collect());
    let to_target = |f: fn(&SeedRuns) -> &RunOutput| median(runs.iter().map(|r| rounds_to_target(f(r))).collect());
    let (acc_f, acc_d) = (final_acc(|r| &r.fedavg), final_acc(|r| &r.dynamic));
    let (rt_f, rt_d) = (to_target(|r| &r.fedavg), to_target(|r| &r.dynamic));
    outcome(
        acc_d >= acc_f && rt_d <= rt_f,
        format!(
            "median final accuracy dynamic {:.4} vs fedavg {:.4}; median rounds to 80% dynamic {rt_d} vs fedavg {rt_f}",
            acc_d, acc_f
        ),
    )
}

fn criterion_6(runs: &[SeedRuns]) -> Outcome {
    let ratios: Vec<f64> = runs
        .iter()
        .map(|r| r.gradient.ledger.upload_bytes() as f64 / r.fedavg.ledger.upload_bytes() as f64)
        .collect();
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= 0.2,
        format!("upload bytes gradient(k=0.1)/fedavg = {worst:.4} worst over seeds (limit 0.2)"),
    )
}

fn heterogeneous(mut config: RunConfig) -> RunConfig {
    for (p, rate) in config.fleet.platforms.iter_mut().zip([4.0, 2.0, 1.0]) {
        p.compute_rate = rate;
    }
    config
}

fn criterion_7() -> Outcome {
    let mut async_losses = Vec::new();
    let mut sync_losses = Vec::new();
    let mut async_times = Vec::new();
    let mut sync_times = Vec::new();
    for &seed in &SEEDS {
        let mut a = heterogeneous(benchmark_entry("fedavg", seed));
        a.strategy = AggregationStrategy::Async {
            alpha0: 0.5,
            staleness_exponent: 0.5,
        };
        a.rounds = 300;
        let async_out = engine::run(&a).unwrap();
        let end = async_out.metrics.last().unwrap().simulated_ms;

        // Enough synchronous rounds to cover the asynchronous run's clock.
        let mut s = heterogeneous(benchmark_entry("fedavg", seed));
        s.rounds = 300;
        let sync_out = engine::run(&s).unwrap();
        if sync_out.metrics.last().unwrap().simulated_ms < end {
            return outcome(false, format!("seed {seed}: sync run too short to match {end} ms"));
        }
        let matched = sync_out
            .metrics
            .iter()
            .take_while(|m| m.simulated_ms <= end)
            .last()
            .unwrap_or(&sync_out.metrics[0]);
        async_losses.push(async_out.metrics.last().unwrap().eval_loss);
        sync_losses.push(matched.eval_loss);
        async_times.push(first_at_target(&async_out.metrics).map_or(f64::INFINITY, |m| m.simulated_ms));
        sync_times.push(first_at_target(&sync_out.metrics).map_or(f64::INFINITY, |m| m.simulated_ms));
    }
    let (la, ls) = (median(async_losses), median(sync_losses));
    let (ta, ts) = (median(async_times), median(sync_times));
    let rel = (la - ls).abs() / ls;
    outcome(
        rel <= 0.1 && ta <= ts,
        format!(
            "median loss async {la:.5} vs sync {ls:.5} (rel diff {rel:.3}, limit 0.1); \
             median ms to 80% async {ta:.0} vs sync {ts:.0}"
        ),
    )
}

fn fd_relative_error(spec: &ModelSpec, params: &ParamVector, batch: &fedsim::params::Batch) -> f64 {
    let h = 1e-6;
    let analytic = backward(spec, params, batch).unwrap();
    let mut worst = 0.0f64;
    for j in 0..params.len() {
        let mut plus = params.to_vec();
        let mut minus = params.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let numeric = (forward_loss(spec, &plus.into(), batch).unwrap()
            - forward_loss(spec, &minus.into(), batch).unwrap())
            / (2.0 * h);
        // Central differences carry ~1e-9 rounding noise, so the ratio is
        // floored to avoid dividing by near-zero partials.
        let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = [0.0f64; 2];
    for trial in 0..100 {
        let features = rng.random_range(1..6);
        let classes = rng.random_range(2..5);
        let kind = trial % 2;
        let spec = if kind == 0 {
            ModelSpec::logistic(features, classes).unwrap()
        } else {
            ModelSpec::mlp(features, rng.random_range(1..6), classes).unwrap()
        };
        let rows = rng.random_range(1..10);
        let x: Vec<f64> = (0..rows * features).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let batch = fedsim::params::Batch::new(x, features, y).unwrap();
        let params: ParamVector = (0..spec.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
            .into();
        worst[kind] = worst[kind].max(fd_relative_error(&spec, &params, &batch));
    }
    outcome(
        worst.iter().all(|&w| w <= 1e-5),
        format!(
            "50 trials per model kind, worst relative error logistic {:.2e}, mlp {:.2e} (limit 1e-5)",
            worst[0], worst[1]
        ),
    )
}

fn csv_bytes(run: &NamedRun) -> Vec<u8> {
    let out = engine::run(&run.config).unwrap();
    let mut bytes = Vec::new();
    write_metrics_csv(&out.metrics, run.config.fleet.platforms.len(), &mut bytes).unwrap();
    bytes
}

fn criterion_9() -> Outcome {
    let mut runs = parse_experiment(BENCHMARK, Some(1)).unwrap();
    let mut extra = |name: &str, config: RunConfig| runs.push(NamedRun { name: name.into(), config });
    extra("gradient-oracle", oracle_config(AggregationStrategy::Gradient { lr: 0.5 }, 3));
    extra("single-platform", oracle_config(AggregationStrategy::Fedavg, 1));
    let mut a = heterogeneous(benchmark_entry("fedavg", 1));
    a.strategy = AggregationStrategy::Async {
        alpha0: 0.5,
        staleness_exponent: 0.5,
    };
    a.rounds = 300;
    extra("async", a);
    let mut private = benchmark_entry("dynamic", 1);
    private.rounds = 20;
    private.compression = Some(CompressionSpec { k_fraction: 0.2 });
    private.dp = Some(serde_json::from_str(r#"{"clip_norm": 1.0, "sigma": 0.5, "seed": 9}"#).unwrap());
    private.fleet.partition = PartitionStrategy::Dynamic { rebalance_every: 3 };
    extra("private-dynamic", heterogeneous(private));

    let differing: Vec<String> = runs
        .iter()
        .filter(|r| csv_bytes(r) != csv_bytes(r))
        .map(|r| r.name.clone())
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} configs run twice, differing: {differing:?}", runs.len()),
    )
}

fn plan_violations(plan: &PartitionPlan, total: usize, platforms: usize) -> usize {
    let mut violations = 0;
    if plan.shards().len() != platforms {
        violations += 1;
    }
    violations += plan.shards().iter().filter(|s| s.is_empty()).count();
    let mut seen = HashSet::new();
    for &i in plan.shards().iter().flatten() {
        if i >= total || !seen.insert(i) {
            violations += 1;
        }
    }
    violations + (total - seen.len().min(total))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut violations = 0;
    let mut counts = [0usize; 3];
    for trial in 0..1000u64 {
        let platforms = rng.random_range(1..9);
        let classes = rng.random_range(2..8);
        let kind = (trial % 3) as usize;
        counts[kind] += 1;
        let weights: Vec<f64> = (0..platforms).map(|_| rng.random_range(0.05..1.0)).collect();
        let proportions: Vec<f64> = weights.iter().map(|w| w / weights.iter().sum::<f64>()).collect();
        // Fixed splits refuse to leave a platform empty, so keep every
        // expected share at one sample or more.
        let smallest = proportions.iter().copied().fold(1.0, f64::min);
        let floor = platforms.max(classes).max((1.0 / smallest).ceil() as usize);
        let total = rng.random_range(floor..floor.max(300) + 1);
        let data = generate_synthetic(&SyntheticSpec {
            samples: total,
            features: 2,
            classes,
            separation: 1.0,
            seed: trial,
        })
        .unwrap();
        let strategy = match kind {
            0 => PartitionStrategy::Fixed { proportions },
            1 => PartitionStrategy::Dirichlet {
                beta: 10f64.powf(rng.random_range(-2.0..2.0)),
                proportions: None,
            },
            _ => PartitionStrategy::Dynamic {
                rebalance_every: rng.random_range(1..5),
            },
        };
        let plan = match strategy.initial_plan(&data, platforms, trial) {
            Ok(p) => p,
            Err(_) => {
                violations += 1;
                continue;
            }
        };
        violations += plan_violations(&plan, total, platforms);
        if kind == 2 {
            let mut current = plan;
            for _ in 0..3 {
                let ms: Vec<f64> = (0..platforms).map(|_| rng.random_range(1.0..1000.0)).collect();
                current = rebalance_dynamic(&current, &ms).unwrap();
                violations += plan_violations(&current, total, platforms);
            }
        }
    }
    outcome(
        violations == 0,
        format!(
            "1000 plans (fixed {}, dirichlet {}, dynamic {} with 3 rebalances each), {violations} violations",
            counts[0], counts[1], counts[2]
        ),
    )
}

fn main() -> ExitCode {
    let report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        o.pass
    };
    let mut all = true;
    all &= report(1, "gradient strategy equals centralized GD", criterion_1());
    all &= report(2, "single-platform fedavg equals plain SGD", criterion_2());
    all &= report(3, "dynamic weight properties", criterion_3());
    all &= report(4, "error-feedback conservation", criterion_4());
    let runs = benchmark_runs();
    all &= report(5, "dynamic-weighted accuracy ordering", criterion_5(&runs));
    all &= report(6, "compressed gradient upload volume", criterion_6(&runs));
    drop(runs);
    all &= report(7, "async vs sync at matched simulated time", criterion_7());
    all &= report(8, "finite-difference gradient check", criterion_8());
    all &= report(9, "determinism of metrics CSV", criterion_9());
    all &= report(10, "partition integrity", criterion_10());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
