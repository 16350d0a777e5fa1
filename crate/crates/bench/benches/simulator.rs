use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use starris_core::agents::{AgentBundle, Batch};
use starris_core::mdp::{project_action, Transition};
use starris_core::physics::rate_report;
use starris_core::channel::sample_channels_from;
use starris_core::ExperimentConfig;

fn raw_action(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()
}

fn physics(c: &mut Criterion) {
    let cfg = ExperimentConfig::desk();
    let topo = cfg.topology().unwrap();
    let env = cfg.environment(1).unwrap();
    let layout = env.layout().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let channels = sample_channels_from(&topo, &mut rng).unwrap();
    let raw = raw_action(&mut rng, layout.dim());
    let action = project_action(&layout, &raw, cfg.p_max, cfg.delta_max()).unwrap();

    c.bench_function("channels/sample_desk", |b| {
        b.iter(|| sample_channels_from(black_box(&topo), &mut rng).unwrap())
    });
    c.bench_function("mdp/project_action_desk", |b| {
        b.iter(|| project_action(&layout, black_box(&raw), 20.0, 316.0).unwrap())
    });
    c.bench_function("physics/rate_report_desk", |b| {
        b.iter(|| {
            rate_report(
                &topo,
                black_box(&channels),
                black_box(&action),
                cfg.noise_power(),
                1.0,
                cfg.numerator,
            )
            .unwrap()
        })
    });
}

fn environment(c: &mut Criterion) {
    let cfg = ExperimentConfig::desk();
    let mut env = cfg.environment(2).unwrap();
    env.reset().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw = raw_action(&mut rng, env.action_dim());
    c.bench_function("mdp/step_desk", |b| {
        b.iter(|| {
            if env.step_index() >= cfg.t_max {
                env.reset().unwrap();
            }
            env.step(black_box(&raw)).unwrap()
        })
    });
}

fn agent(c: &mut Criterion) {
    let cfg = ExperimentConfig::desk();
    let env = cfg.environment(3).unwrap();
    let (sd, ad) = (env.state_dim(), env.action_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bundle = AgentBundle::new(sd, ad, cfg.agent_config(), &mut rng).unwrap();
    let items: Vec<Transition> = (0..cfg.agent.batch_size)
        .map(|_| Transition {
            state: (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: raw_action(&mut rng, ad),
            reward: rng.random_range(-4.0..25.0),
            next_state: (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect(),
            terminal: false,
        })
        .collect();
    let batch = Batch::from_transitions(&items).unwrap();
    let states = Array2::from_shape_fn((cfg.agent.batch_size, sd), |_| rng.random_range(-1.0..1.0));

    c.bench_function("neural/actor_forward_backward_b100", |b| {
        b.iter(|| {
            let (out, cache) = bundle.actor.forward(black_box(states.view())).unwrap();
            bundle.actor.backward(&cache, &out).unwrap()
        })
    });
    c.bench_function("agents/select_action", |b| {
        b.iter(|| bundle.select_action(black_box(&items[0].state), true, &mut rng).unwrap())
    });
    c.bench_function("agents/ddpg_update_b100", |b| {
        b.iter_batched(
            || bundle.clone(),
            |mut agent| {
                agent.critic_update(&batch).unwrap();
                agent.actor_update_ddpg(&batch).unwrap();
                agent.soft_update_targets().unwrap();
                agent
            },
            BatchSize::LargeInput,
        )
    });
    let mut meta_cfg = cfg.clone();
    meta_cfg.scenario.algorithm = starris_core::AgentKind::MetaDdpg;
    let meta_bundle = AgentBundle::new(sd, ad, meta_cfg.agent_config(), &mut rng).unwrap();
    c.bench_function("agents/meta_ddpg_update_b100", |b| {
        b.iter_batched(
            || (meta_bundle.clone(), starris_core::MetaState::new(0.5, 1e-3)),
            |(mut agent, mut meta)| {
                agent.critic_update(&batch).unwrap();
                let step = agent.actor_update_ddpg(&batch).unwrap();
                let ms = agent.actor_update_meta(&meta, &batch, step).unwrap();
                agent.meta_update(&mut meta, &ms, &batch).unwrap();
                agent.soft_update_targets().unwrap();
                agent
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, physics, environment, agent);
criterion_main!(benches);
