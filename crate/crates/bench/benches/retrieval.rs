//! Phoneme retrieval at pool sizes the filter actually sees.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctxbias_core::phonology::{edit_distance, top_k_similar, PhonemeSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pool(n: usize, rng: &mut ChaCha8Rng) -> Vec<PhonemeSequence> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(4..=9);
            PhonemeSequence::new((0..len).map(|_| rng.gen_range(0..40)).collect())
        })
        .collect()
}

fn bench_edit_distance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = PhonemeSequence::new((0..8).map(|_| rng.gen_range(0..40)).collect());
    let b = PhonemeSequence::new((0..8).map(|_| rng.gen_range(0..40)).collect());
    c.bench_function("edit_distance_len8", |bencher| {
        bencher.iter(|| edit_distance(std::hint::black_box(&a), std::hint::black_box(&b)))
    });
}

fn bench_top_k(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let query = PhonemeSequence::new((0..7).map(|_| rng.gen_range(0..40)).collect());
    let mut group = c.benchmark_group("top_k_similar");
    for pool_size in [100usize, 1000, 5000] {
        let pool_seqs = random_pool(pool_size, &mut rng);
        let pool: Vec<(usize, &PhonemeSequence)> =
            pool_seqs.iter().enumerate().map(|(i, s)| (i, s)).collect();
        group.bench_with_input(
            BenchmarkId::from_parameter(pool_size),
            &pool,
            |bencher, pool| bencher.iter(|| top_k_similar(&query, pool, 20)),
        );
    }
    group.finish();
}

criterion_group!(retrieval, bench_edit_distance, bench_top_k);
criterion_main!(retrieval);
