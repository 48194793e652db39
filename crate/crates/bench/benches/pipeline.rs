use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperevent_core::autodiff::Tape;
use hyperevent_core::event::stack_events;
use hyperevent_core::hypergraph::{build_dynamic_graph, build_hyperedges, AffinityTensor};
use hyperevent_core::model::{batch_loss, ModelParams, ModelSpec, SampleView};
use hyperevent_core::propagation::{stage1_self_completion, stage2_cross_modal, Propagation};
use hyperevent_core::training::{generate_synthetic, prepare, SyntheticDatasetSpec, TrainConfig};
use hyperevent_core::{ActivityMask, Mat};

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn propagation(c: &mut Criterion) {
    let mut group = c.benchmark_group("propagation");
    for d in [4usize, 8, 16] {
        let (steps, s, width, latent, heads) = (4, 8, 16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let params = Propagation {
            w_q: random_mat(&mut rng, latent, width),
            w_k: random_mat(&mut rng, latent, width),
            r_v: random_mat(&mut rng, width, width),
        };
        let dynamic = random_mat(&mut rng, steps * d, width);
        let statics = random_mat(&mut rng, s, width);
        let raw = random_mat(&mut rng, d, s);
        let hg = build_hyperedges(&AffinityTensor::from_raw(raw.clone()), 4).unwrap();
        let graph = build_dynamic_graph(d).unwrap();
        let mask = ActivityMask::all_active(steps, d);
        group.bench_with_input(BenchmarkId::new("stage1", d), &d, |b, _| {
            b.iter(|| stage1_self_completion(black_box(&dynamic), steps, &graph, &params, heads, &mask).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("stage2", d), &d, |b, _| {
            b.iter(|| {
                stage2_cross_modal(black_box(&dynamic), &statics, steps, &hg, &params, heads, &mask, Some(&raw)).unwrap()
            })
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let spec = SyntheticDatasetSpec::new(4, 2, 11);
    let dataset = generate_synthetic(&spec).unwrap();
    let cfg = TrainConfig::with_seed(11);
    let data = prepare(&dataset, cfg.event_bins).unwrap();
    let batch = cfg.batch_size.min(data.len());
    let params = ModelParams::init(ModelSpec::new(cfg, dataset.geometry).unwrap());
    let views: Vec<SampleView<'_>> = data[..batch].iter().map(|s| s.view()).collect();
    let labels: Vec<&[usize]> = data[..batch].iter().map(|s| s.labels.as_slice()).collect();

    c.bench_function("batch_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = params.leaves(&mut tape);
            let (loss, _) = batch_loss(&mut tape, &params, &vars, &views, &labels, None).unwrap();
            black_box(tape.backward(loss))
        })
    });

    let stream = &dataset.samples[0].events;
    c.bench_function("stack_events", |b| {
        b.iter(|| stack_events(black_box(stream), 8, 0, spec.duration_us).unwrap())
    });
}

criterion_group!(benches, propagation, forward_backward);
criterion_main!(benches);
