use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scar_bench::{contended_state, scenario};
use scar_core::{random_schedule, rollout_deterministic, rollout_monte_carlo, rollout_stochastic};

fn bench_rollouts(c: &mut Criterion) {
    let config = scenario("six_users.toml");
    let state = contended_state(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let schedule = random_schedule(&config, &state, 7, &mut rng).unwrap();

    let mut group = c.benchmark_group("rollout_h7_n6");
    group.bench_function("deterministic", |b| {
        b.iter(|| rollout_deterministic(black_box(&config), black_box(&state), &schedule).unwrap())
    });
    group.bench_function("stochastic", |b| {
        b.iter(|| rollout_stochastic(black_box(&config), black_box(&state), &schedule).unwrap())
    });
    group.bench_function("monte_carlo_1k", |b| {
        b.iter(|| {
            rollout_monte_carlo(black_box(&config), black_box(&state), &schedule, 1000, 7).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_rollouts);
criterion_main!(benches);
