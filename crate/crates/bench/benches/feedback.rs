use criterion::{criterion_group, criterion_main, Criterion};
use refrank_bench::{model, query, store};
use refrank_core::eval::{evaluate, EvalConfig};
use refrank_core::ranker::rank;
use refrank_core::rocchio::{refine_extended, RocchioParams};
use refrank_core::session::{SessionContext, Strategy};
use std::hint::black_box;

fn ranking(c: &mut Criterion) {
    let s = store(500);
    let q = query(&s, 0);
    c.bench_function("rank_500", |b| b.iter(|| rank(black_box(&q), &s, 10, "q").unwrap()));
}

fn refinement(c: &mut Criterion) {
    let s = store(500);
    let q = query(&s, 0);
    let top = rank(&q, &s, 5, "q").unwrap();
    let rows: Vec<&[f32]> = top.indices().iter().map(|&i| s.image_embedding(i)).collect();
    let sims = top.scores();
    let p = RocchioParams::default();
    c.bench_function("refine_extended_k5", |b| b.iter(|| refine_extended(black_box(&q), &rows, &sims, &p).unwrap()));
}

fn summarizer(c: &mut Criterion) {
    let s = store(500);
    let m = model(&s);
    let q = query(&s, 0);
    let top = rank(&q, &s, 5, "q").unwrap().indices();
    let row = s.items[0].caption_start;
    c.bench_function("afs_infer_k5", |b| b.iter(|| m.infer(&s, row, black_box(&top), true, None).unwrap()));
}

fn evaluation(c: &mut Criterion) {
    let s = store(500);
    let ctx = SessionContext::new(&s, None);
    let mut g = c.benchmark_group("evaluate_500");
    g.sample_size(10);
    for strategy in [Strategy::None, Strategy::PrfExtended, Strategy::Grf] {
        let config = EvalConfig::new(strategy, 2);
        g.bench_function(strategy.name(), |b| b.iter(|| evaluate(&ctx, &config).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, ranking, refinement, summarizer, evaluation);
criterion_main!(benches);
