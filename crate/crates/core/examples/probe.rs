use candle_core::{DType, Device};
use code_rsic::data::procedural_texture;
use code_rsic::train::*;
use code_rsic::losses::reconstruction_l1;
use code_rsic::vq::{code_level_loss, straight_through_combine};
use std::io::Write;

fn main() {
    let env = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let steps = env("STEPS", 300);
    let n = env("N", 8);
    let vq_on = env("VQ", 0) == 1;
    let lr = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-3);
    let dev = Device::Cpu;
    let cfg = RunConfig::toy(7);
    let p = Pipeline::new(&cfg, &dev).unwrap();
    let imgs: Vec<_> = (0..n).map(|i| procedural_texture(64, 9000 + i as u64)).collect();
    let xs: Vec<_> = imgs.iter().map(|im| im.to_tensor(DType::F32, &dev).unwrap().unsqueeze(0).unwrap()).collect();
    let x = candle_core::Tensor::cat(&xs, 0).unwrap();
    let mut opt = Adam::new(vars_with_prefixes(&p.vs, &STAGE1_PREFIXES), lr, 0.9, 0.999, 1e-8);
    for step in 0..steps {
        let f = p.vq.encode_hq(&x).unwrap();
        let (dec_in, l_cl) = if vq_on {
            let (fc, _) = p.vq.quantize(&f).unwrap();
            let cl = code_level_loss(&f, &fc, 0.25).unwrap();
            (straight_through_combine(&f, &fc).unwrap(), Some(cl))
        } else { (f.clone(), None) };
        let xb = p.vq.decode_hq(&dec_in).unwrap();
        let l_rec = reconstruction_l1(&x, &xb).unwrap();
        let total = match &l_cl { Some(cl) => (&l_rec + cl).unwrap(), None => l_rec.clone() };
        let grads = total.backward().unwrap();
        opt.step(&grads).unwrap();
        if step % 20 == 0 || step + 1 == steps {
            println!("step {step} rec {:.4} total {:.4}",
                l_rec.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap(),
                total.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap());
            std::io::stdout().flush().unwrap();
        }
    }
}
