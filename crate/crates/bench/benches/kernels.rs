use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mkgr_core::data::build_reason_template;
use mkgr_core::eval::{rank_entities, FilterIndex};
use mkgr_core::experiment::{build_model, build_structure, RunConfig, Workspace};
use mkgr_core::fusion::train_step;
use mkgr_core::tensor::{attend, AdamState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = random(n, n, &mut rng);
        let b = random(n, n, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("attention");
    for (len, d) in [(9, 16), (32, 64)] {
        let q = random(len, d, &mut rng);
        let k = random(len, d, &mut rng);
        let v = random(len, d, &mut rng);
        group.bench_function(format!("len{len}_d{d}"), |bench| {
            bench.iter(|| black_box(attend(&q, &k, &v, None).unwrap()))
        });
    }
    group.finish();
}

fn train_step_bench(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let ws = Workspace::load(&cfg).unwrap();
    let mut structure_cfg = cfg.clone();
    structure_cfg.structure.epochs = 1;
    let table = build_structure(&structure_cfg, &ws).unwrap().table;
    let batch: Vec<_> = ws.mkg.train[..cfg.train.batch_size]
        .iter()
        .map(|t| build_reason_template(t.head, t.relation, Some(t.tail), &ws.mkg, &ws.vocab).unwrap())
        .collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (label, flags) in [("fused", [true; 4]), ("backbone", [false; 4])] {
        let run_cfg = cfg.with_fusion(cfg.fusion.with_flags(flags));
        let (model, mut store) = build_model(&run_cfg, &ws, Some(&table)).unwrap();
        let mut adam = AdamState::new(&store, run_cfg.train.adam());
        group.bench_function(label, |bench| {
            bench.iter(|| black_box(train_step(&model, &mut store, &mut adam, &batch, &ws.mkg).unwrap()))
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let ws = Workspace::load(&cfg).unwrap();
    let filter = FilterIndex::from_mkg(&ws.mkg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = ws.mkg.num_entities();
    let scores: Vec<Vec<f64>> = ws.mkg.test.iter().map(|_| (0..n).map(|_| rng.random()).collect()).collect();
    c.bench_function("rank_test_split", |bench| {
        bench.iter(|| {
            let mut total = 0;
            for (t, s) in ws.mkg.test.iter().zip(&scores) {
                total += rank_entities(s, t.tail, filter.known_tails(t.head, t.relation));
            }
            black_box(total)
        })
    });
}

criterion_group!(benches, matmul, attention, train_step_bench, ranking);
criterion_main!(benches);
