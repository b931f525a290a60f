use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use conspolicy::consistency::Which;
use conspolicy::policy::Head;
use conspolicy::trainers::{build_policy, TrainConfig};

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("inference_per_sample");
    for head in [Head::Consistency, Head::Diffusion] {
        for n in [1usize, 2, 5, 10, 20, 50] {
            let cfg = TrainConfig {
                head,
                n_inference: n,
                policy_hidden: vec![64, 64, 64],
                ..TrainConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let policy = build_policy(&cfg, 4, 2, &mut rng).unwrap();
            let grid = policy.grid(n).unwrap();
            let state = [0.1, -0.2, 0.3, 0.4];
            group.bench_with_input(BenchmarkId::new(head.name(), n), &n, |b, _| {
                b.iter(|| policy.sample(Which::Online, &state, grid.as_ref(), &mut rng).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
