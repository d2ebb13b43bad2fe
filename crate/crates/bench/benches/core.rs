use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nfq_core::batch::{BatchMeta, DataSource, StackedTransitions};
use nfq_core::config::ExperimentConfig;
use nfq_core::env::{run_episode, EpisodeSpec, FnPolicy};
use nfq_core::net::{fit, Dataset, OptimizerState};
use nfq_core::nfq::{generate_pattern_set, Learner};
use nfq_core::{CartPole, Environment, GrowingBatch, Network, StartMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exploration_batch(config: &ExperimentConfig, episodes: usize) -> GrowingBatch {
    let actions = config.action_set().unwrap();
    let meta = BatchMeta {
        lookback: config.agent.lookback,
        action_set: actions.clone(),
        action_bound: config.agent.action_bound,
        cost: config.cost,
        source: DataSource::Sim,
    };
    let mut batch = GrowingBatch::new(meta).unwrap();
    let mut env = CartPole::new(config.env.sim, config.env.latency).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut env_rng = ChaCha8Rng::seed_from_u64(2);
    let policy = FnPolicy(|_: &[f64]| 1usize);
    let spec = EpisodeSpec {
        actions: &actions,
        action_bound: config.agent.action_bound,
        lookback: config.agent.lookback,
        cost: &config.cost,
        start: StartMode::CenterHanging,
        max_steps: config.schedule.steps_per_episode,
        epsilon: 1.0,
        mask: None,
    };
    for _ in 0..episodes {
        let ep = run_episode(&mut env, &policy, &spec, &mut rng, &mut env_rng).unwrap();
        batch.append_episode(ep).unwrap();
    }
    batch
}

fn random_dataset(net: &Network, rows: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = net.input_dim();
    Dataset {
        input_dim: d,
        inputs: (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        targets: (0..rows).map(|_| rng.gen_range(0.0..1.0)).collect(),
        heads: None,
    }
}

fn network(c: &mut Criterion) {
    let config = ExperimentConfig::nfq2_default();
    let qf = config.build_qfunction(0).unwrap();
    let data = random_dataset(&qf.net, 2048);
    c.bench_function("forward 2048 rows", |b| b.iter(|| qf.net.forward(&data.inputs).unwrap()));
    c.bench_function("fit one epoch of 2048", |b| {
        b.iter_batched(
            || (qf.net.clone(), OptimizerState::adam(qf.net.param_count(), 1e-3), ChaCha8Rng::seed_from_u64(4)),
            |(mut net, mut opt, mut rng)| fit(&mut net, &data, 1, 2048, &mut opt, &mut rng).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn patterns(c: &mut Criterion) {
    let config = ExperimentConfig::nfq2_default();
    let batch = exploration_batch(&config, 10);
    let data: StackedTransitions = batch.stacked().unwrap();
    let learner = Learner::new(&config).unwrap();
    c.bench_function("pattern set for 4000 transitions", |b| {
        b.iter(|| generate_pattern_set(&data, &learner.qf, config.schedule.train.gamma).unwrap())
    });
}

fn simulator(c: &mut Criterion) {
    let config = ExperimentConfig::nfq2_default();
    let mut env = CartPole::new(config.env.sim, config.env.latency).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    c.bench_function("cart-pole 400 steps", |b| {
        b.iter(|| {
            env.reset(StartMode::CenterHanging, &mut rng).unwrap();
            for i in 0..400 {
                let u = if (i / 25) % 2 == 0 { 10.0 } else { -10.0 };
                if env.step(u).unwrap().1 {
                    break;
                }
            }
        })
    });
}

criterion_group!(benches, network, patterns, simulator);
criterion_main!(benches);
