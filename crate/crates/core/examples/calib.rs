use candle_core::Device;
use code_rsic::codec::{Compressor, StubCodec};
use code_rsic::data::{build_pairs, procedural_texture};
use code_rsic::train::*;
use code_rsic::vq::usage_stats;
use std::io::Write;
use std::time::Instant;

fn main() {
    let env = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let s1 = env("S1", 50);
    let s2 = env("S2", 50);
    let s3 = env("S3", 10);
    let n = env("N", 64);
    let dev = Device::Cpu;
    let mut cfg = RunConfig::toy(7);
    cfg.stage1 = StageSchedule { steps: s1, batch: 4, lr: 2e-3, adv_warmup: env("A1", s1 * 4 / 5) };
    cfg.stage2 = StageSchedule { steps: s2, batch: 4, lr: 1e-3, adv_warmup: 0 };
    cfg.stage3 = StageSchedule { steps: s3, batch: 2, lr: 1e-3, adv_warmup: env("A3", s3 * 3 / 4) };
    cfg.eval_interval = env("EVAL", 25);
    cfg.patience = 0;
    cfg.reinit_interval = 100;
    let p = Pipeline::new(&cfg, &dev).unwrap();
    let corpus: Vec<_> = (0..n).map(|i| procedural_texture(64, 9000 + i as u64)).collect();
    let held: Vec<_> = (0..8).map(|i| procedural_texture(64, 999_000 + i as u64)).collect();

    let t = Instant::now();
    let r1 = train_stage1(&p, &corpus, &held).unwrap();
    println!("stage1 {} steps in {:.1?}", r1.steps_run, t.elapsed());
    for (i, l) in r1.losses.iter().enumerate() {
        if i % 25 == 0 || i + 1 == r1.losses.len() { println!("  step {i} loss {l:.4}"); }
    }
    for (st, v) in &r1.val_history { println!("  val@{st} {v:.4}"); }
    let l1 = validate_stage1(&p, &held).unwrap();
    let us = usage_stats(&corpus, &p.vq).unwrap();
    println!("val L1 {:.4} usage {:.3}", l1, us.counts.iter().filter(|&&c| c>0).count() as f64 / 64.0);
    std::io::stdout().flush().unwrap();

    {
        use code_rsic::metrics::perceptual_proxy;
        use code_rsic::ImageTensor;
        use candle_core::DType;
        for img in &held[..4] {
            let x = img.to_tensor(DType::F32, &dev).unwrap().unsqueeze(0).unwrap();
            let f = p.vq.encode_hq(&x).unwrap();
            let (fc, _) = p.vq.quantize(&f).unwrap();
            let xb = p.vq.decode_hq(&fc).unwrap();
            let xb = ImageTensor::from_tensor(&xb.squeeze(0).unwrap()).unwrap();
            let s24 = StubCodec::new(2, 4).unwrap();
            let s43 = StubCodec::new(4, 3).unwrap();
            let lq24 = s24.decompress(&s24.compress(img).unwrap()).unwrap();
            let lq43 = s43.decompress(&s43.compress(img).unwrap()).unwrap();
            println!("ceiling: s1-roundtrip proxy {:.5} stub24 {:.5} stub43 {:.5}",
                perceptual_proxy(img, &xb).unwrap(),
                perceptual_proxy(img, &lq24).unwrap(),
                perceptual_proxy(img, &lq43).unwrap());
        }
    }
    p.predictor.init_from_stage1(&p.vs).unwrap();
    let codec = StubCodec::new(2, 4).unwrap();
    let pairs = build_pairs(&corpus, &codec, 4.0).unwrap();
    let vpairs = build_pairs(&held, &codec, 4.0).unwrap();
    println!("acc after init {:.4}", -validate_stage2(&p, &pairs[..16].to_vec()).unwrap());
    let t = Instant::now();
    let r2 = train_stage2(&p, &pairs, &vpairs).unwrap();
    println!("stage2 {} steps in {:.1?}", r2.steps_run, t.elapsed());
    for (st, v) in &r2.val_history { println!("  val-acc@{st} {:.4}", -v); }
    println!("train acc {:.4}", -validate_stage2(&p, &pairs[..32.min(pairs.len())].to_vec()).unwrap());
    std::io::stdout().flush().unwrap();

    let codec = StubCodec::new(4, 3).unwrap();
    let pairs = build_pairs(&corpus, &codec, 4.0).unwrap();
    let vpairs = build_pairs(&held, &codec, 4.0).unwrap();
    let t = Instant::now();
    let r3 = train_stage3(&p, &pairs, &vpairs).unwrap();
    println!("stage3 {} steps in {:.1?} last loss {:.4}", r3.steps_run, t.elapsed(), r3.losses.last().unwrap());
    use code_rsic::fusion::hpin_decode;
    use code_rsic::metrics::perceptual_proxy;
    let mut wins = 0;
    for img in &held {
        let lq = codec.decompress(&codec.compress(img).unwrap()).unwrap();
        let enh = hpin_decode(&lq, &p.predictor, &p.vq, &p.hpin).unwrap();
        let p_lq = perceptual_proxy(img, &lq).unwrap();
        let p_enh = perceptual_proxy(img, &enh).unwrap();
        if p_enh < p_lq { wins += 1; }
        println!("proxy lq {:.5} enh {:.5}", p_lq, p_enh);
    }
    for (st, v) in &r3.val_history { println!("  val-l1@{st} {v:.4}"); }
    println!("wins {}/8", wins);
}
