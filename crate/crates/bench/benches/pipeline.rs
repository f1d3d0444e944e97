use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use xgait::gait::GaitParams;
use xgait::harness::pipeline::{bench_log, Pipeline};
use xgait::harness::train::inference_mask;
use xgait::harness::PipelineConfig;
use xgait::numerics::Tape;
use xgait::synth::{gen_image, gen_timeseries, Terrain, TerrainSpec};
use xgait::ts::{assemble_window, TsEncoder};
use xgait::vision::{crop_bottom_center, patchify, MaskedAutoencoder};

fn desk_loop(c: &mut Criterion) {
    let cfg = PipelineConfig::desk();
    let mut p = Pipeline::untrained(&cfg, 1).unwrap();
    let log = bench_log(&cfg, 1).unwrap();
    let t = log.start_time() + 0.5;
    let imu: Vec<_> = log.imu.iter().filter(|s| s.t <= t).cloned().collect();
    let joints: Vec<_> = log.joints.iter().filter(|s| s.t <= t).cloned().collect();
    let frame = log
        .frames
        .iter()
        .rev()
        .find(|f| f.t <= t)
        .unwrap()
        .image
        .clone();

    c.bench_function("desk/window_assembly", |b| {
        b.iter(|| assemble_window(black_box(&imu), black_box(&joints), t).unwrap())
    });
    let window = assemble_window(&imu, &joints, t).unwrap();
    c.bench_function("desk/full_tick", |b| {
        b.iter(|| p.tick(black_box(&frame), black_box(&window)).unwrap())
    });
}

fn desk_encoders(c: &mut Criterion) {
    let cfg = PipelineConfig::desk();
    let mae = MaskedAutoencoder::new(&cfg.vision, 1, false).unwrap();
    let ts = TsEncoder::new(&cfg.ts, 1).unwrap();
    let mask = inference_mask(&cfg).unwrap();
    let spec = TerrainSpec::default_for(Terrain::Grass);
    let n = cfg.vision.n_i;
    let img = gen_image(&spec, n + n / 4, n + n / 2, 3);
    let patches = patchify(&crop_bottom_center(&img, n, &Default::default()).unwrap());
    let window = gen_timeseries(&spec.signal, GaitParams::new(0.12, 0.13), 3);

    c.bench_function("desk/vision_encoder", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::inference();
            let x = tape.constant(patches.clone());
            mae.encode_visible(&mut tape, x, &mask).unwrap()
        })
    });
    c.bench_function("desk/ts_encoder", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::inference();
            let x = tape.constant(window.data().clone());
            ts.forward(&mut tape, x).unwrap()
        })
    });
}

fn paper_tick(c: &mut Criterion) {
    let cfg = PipelineConfig::paper();
    let mut p = Pipeline::untrained(&cfg, 1).unwrap();
    let log = bench_log(&cfg, 1).unwrap();
    let t = log.start_time();
    let imu: Vec<_> = log.imu.iter().filter(|s| s.t <= t).cloned().collect();
    let joints: Vec<_> = log.joints.iter().filter(|s| s.t <= t).cloned().collect();
    let window = assemble_window(&imu, &joints, t).unwrap();
    let frame = log.frames[0].image.clone();
    let mut g = c.benchmark_group("paper");
    g.sample_size(10);
    g.bench_function("full_tick", |b| {
        b.iter(|| p.tick(black_box(&frame), black_box(&window)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, desk_loop, desk_encoders, paper_tick);
criterion_main!(benches);
