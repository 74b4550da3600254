use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use ciaosr_core::data::resize::bicubic_resize;
use ciaosr_core::model::{ModelConfig, SrModel};
use ciaosr_core::rng::SeedRng;
use ciaosr_core::tensor::{Tape, Tensor};

fn rand_tensor(rng: &mut SeedRng, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = SeedRng::from_seed(1);
    let a = rand_tensor(&mut rng, &[256, 148]);
    let b = rand_tensor(&mut rng, &[148, 64]);
    c.bench_function("matmul_256x148x64", |bch| {
        bch.iter_batched(
            || (a.clone(), b.clone()),
            |(a, b)| {
                let mut tape: Tape<f32> = Tape::new();
                let av = tape.leaf(a, false);
                let bv = tape.leaf(b, false);
                let out = tape.matmul(av, bv);
                black_box(tape.value(out).data()[0])
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = SeedRng::from_seed(2);
    let x = rand_tensor(&mut rng, &[1, 16, 48, 48]);
    let w = rand_tensor(&mut rng, &[16, 16, 3, 3]);
    let b = rand_tensor(&mut rng, &[16]);
    c.bench_function("conv3x3_16c_48px", |bch| {
        bch.iter_batched(
            || (x.clone(), w.clone(), b.clone()),
            |(x, w, b)| {
                let mut tape: Tape<f32> = Tape::new();
                let xv = tape.leaf(x, false);
                let wv = tape.leaf(w, false);
                let bv = tape.leaf(b, false);
                let out = tape.conv2d(xv, wv, bv, 1);
                black_box(tape.value(out).data()[0])
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_bicubic(c: &mut Criterion) {
    let mut rng = SeedRng::from_seed(3);
    let img = rand_tensor(&mut rng, &[3, 96, 96]);
    c.bench_function("bicubic_96_to_48", |bch| {
        bch.iter(|| black_box(bicubic_resize(black_box(&img), 48, 48)))
    });
}

fn micro_model() -> SrModel<f32> {
    let mut cfg = ModelConfig::desk();
    cfg.encoder.n_feats = 8;
    cfg.encoder.n_resblocks = 2;
    cfg.nonlocal.c_g = 8;
    cfg.head.d_v = 32;
    cfg.head.hidden_q = vec![32; 2];
    cfg.head.hidden_k = vec![32];
    cfg.head.hidden_v = vec![32];
    cfg.head.hidden_w = vec![32];
    SrModel::build(cfg, 7)
}

fn bench_render(c: &mut Criterion) {
    let model = micro_model();
    let mut rng = SeedRng::from_seed(4);
    let lr = rand_tensor(&mut rng, &[3, 24, 24]).map(|v| 0.5 + 0.4 * v);
    c.bench_function("render_24_to_48", |bch| {
        bch.iter(|| black_box(model.render_image(black_box(&lr), 48, 48)))
    });
}

fn bench_nonlocal(c: &mut Criterion) {
    let model = micro_model();
    let mut rng = SeedRng::from_seed(5);
    let lr = rand_tensor(&mut rng, &[1, 3, 32, 32]).map(|v| 0.5 + 0.4 * v);
    c.bench_function("freeze_features_32px", |bch| {
        bch.iter(|| {
            let f = model.freeze_features(black_box(&lr));
            black_box(f.feat_rows.data()[0])
        })
    });
}

criterion_group!(benches, bench_matmul, bench_conv, bench_bicubic, bench_render, bench_nonlocal);
criterion_main!(benches);
