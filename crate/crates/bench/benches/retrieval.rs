use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use starc_core::{
    build_page_index, count_fetches, generate, layout_clustered, layout_sequential,
    select_page_quest, select_sparq, select_starc, select_token_oracle, ClusterStore,
    ClusteringConfig, PimGeometry, RetrievalBudget, SyntheticConfig,
};

fn selection(c: &mut Criterion) {
    let trace = generate(&SyntheticConfig {
        decode_len: 1,
        prefill_len: 4096,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cache = trace.prefill_cache().unwrap();
    let q = trace.query(0);
    let mut store = ClusterStore::new(ClusteringConfig::default()).unwrap();
    store.initial_cluster(&cache, 0).unwrap();
    let pages = build_page_index(&cache, 16).unwrap();

    let mut group = c.benchmark_group("select");
    for b in [256, 1024] {
        let budget = RetrievalBudget::new(b).unwrap();
        group.bench_with_input(
            BenchmarkId::new("token_oracle", b),
            &budget,
            |bench, &budget| bench.iter(|| select_token_oracle(q, &cache, budget).unwrap()),
        );
        group.bench_with_input(BenchmarkId::new("sparq16", b), &budget, |bench, &budget| {
            bench.iter(|| select_sparq(q, &cache, 16, budget).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("page16", b), &budget, |bench, &budget| {
            bench.iter(|| select_page_quest(q, &pages, budget).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("starc", b), &budget, |bench, &budget| {
            bench.iter(|| select_starc(q, &store, budget).unwrap())
        });
    }
    group.finish();

    let geom = PimGeometry::default();
    let sequential = layout_sequential(cache.len(), &geom).unwrap();
    let clustered = layout_clustered(&store, &geom).unwrap();
    let mask = select_starc(q, &store, RetrievalBudget::new(1024).unwrap())
        .unwrap()
        .attended();
    c.bench_function("layout_clustered/4096", |bench| {
        bench.iter(|| layout_clustered(&store, &geom).unwrap())
    });
    c.bench_function("count_fetches/sequential", |bench| {
        bench.iter(|| count_fetches(&mask, &sequential, &geom).unwrap())
    });
    c.bench_function("count_fetches/clustered", |bench| {
        bench.iter(|| count_fetches(&mask, &clustered, &geom).unwrap())
    });
}

criterion_group!(benches, selection);
criterion_main!(benches);
