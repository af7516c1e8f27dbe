use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mtrl::data::{gen_dataset, SynthConfig};
use mtrl::joint::{forward_sequence, sequence_gradient};
use mtrl::trainer::{clip_global_norm, sgd_step, ModelSpec};
use mtrl::{FeedbackConfig, Sink, Source};

fn configs() -> [(&'static str, FeedbackConfig); 3] {
    [
        ("none", FeedbackConfig::baseline()),
        ("r-g", FeedbackConfig::new(&[Source::R], &[Sink::G]).unwrap()),
        ("rp-ifog", FeedbackConfig::new(&[Source::R, Source::P], &Sink::ALL).unwrap()),
    ]
}

fn sequence(c: &mut Criterion) {
    let ds = gen_dataset(&SynthConfig::default()).unwrap();
    let utt = &ds.train[0];
    let spec = ModelSpec::default();

    let mut group = c.benchmark_group("forward");
    for (name, cfg) in configs() {
        let model = spec.build(&ds, cfg, 0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| forward_sequence(&model, black_box(&utt.frames)).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("gradient");
    for (name, cfg) in configs() {
        let model = spec.build(&ds, cfg, 0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sequence_gradient(&model, black_box(&utt.frames), &utt.phone_labels, utt.speaker).unwrap())
        });
    }
    group.finish();

    let (_, cfg) = configs()[2].clone();
    let mut model = spec.build(&ds, cfg, 0).unwrap();
    let mut velocity = mtrl::JointParams::zeros_like(&model.params);
    c.bench_function("sgd_step/rp-ifog", |b| {
        b.iter(|| {
            let (_, mut g) = sequence_gradient(&model, &utt.frames, &utt.phone_labels, utt.speaker).unwrap();
            clip_global_norm(&mut g, 5.0);
            sgd_step(&mut model.params, &mut velocity, &g, 0.05, 0.9).unwrap();
        })
    });
}

criterion_group!(benches, sequence);
criterion_main!(benches);
