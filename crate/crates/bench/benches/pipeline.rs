//! Criterion benchmarks for the hot paths: nearest-neighbour quantization,
//! cross-attention fusion, the MS-SSIM metric and the stub codec round
//! trip. Run with `cargo bench -p code-rsic-bench`.

use candle_core::{DType, Device, Tensor};
use code_rsic::codec::{Compressor, StubCodec};
use code_rsic::data::procedural_texture;
use code_rsic::fusion::Mcm;
use code_rsic::metrics::ms_ssim;
use code_rsic::nn::VarStore;
use code_rsic::vq::quantize_nearest;
use criterion::{criterion_group, criterion_main, Criterion};

fn det_tensor(shape: (usize, usize, usize, usize), scale: f32) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let vals: Vec<f32> = (0..n)
        .map(|i| ((i as f32 * 0.7391 + 0.31).sin()) * scale)
        .collect();
    Tensor::from_vec(vals, shape, &Device::Cpu).unwrap()
}

fn bench_quantize(c: &mut Criterion) {
    let latent = det_tensor((1, 32, 16, 16), 1.0);
    let codebook = det_tensor((1, 1, 64, 32), 1.0).reshape((64, 32)).unwrap();
    c.bench_function("quantize_nearest 256 tokens, n=64 d=32", |b| {
        b.iter(|| quantize_nearest(&latent, &codebook).unwrap())
    });
}

fn bench_fusion(c: &mut Criterion) {
    let mut vs = VarStore::new(1, DType::F32, Device::Cpu);
    let mcm = Mcm::new(&mut vs, "mcm", 32, 16, 4).unwrap();
    let m = det_tensor((1, 32, 16, 16), 0.5);
    let p = det_tensor((1, 16, 16, 16), 0.5);
    c.bench_function("mcm fuse 16x16 grid, 4 heads", |b| {
        b.iter(|| mcm.fuse(&m, &p).unwrap())
    });
}

fn bench_ms_ssim(c: &mut Criterion) {
    let a = procedural_texture(256, 1);
    let codec = StubCodec::new(2, 4).unwrap();
    let b_img = codec.decompress(&codec.compress(&a).unwrap()).unwrap();
    c.bench_function("ms_ssim 256x256", |b| {
        b.iter(|| ms_ssim(&a, &b_img).unwrap())
    });
}

fn bench_stub_round_trip(c: &mut Criterion) {
    let img = procedural_texture(256, 2);
    let codec = StubCodec::new(2, 4).unwrap();
    c.bench_function("stub codec round trip 256x256", |b| {
        b.iter(|| {
            let bits = codec.compress(&img).unwrap();
            codec.decompress(&bits).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_quantize,
    bench_fusion,
    bench_ms_ssim,
    bench_stub_round_trip
);
criterion_main!(benches);
