// Scratch experiment for training calibration; not part of the test suite.

use aifc::codec::{clamp01, Codec};
use aifc::config::CodecConfig;
use aifc::metrics::psnr;
use aifc::tensor::Tensor;
use aifc::train::{eval_loss, eval_loss_mean, synthetic_patches, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);

    let t0 = std::time::Instant::now();
    let mut codec = Codec::new(CodecConfig::tiny().with_lambda(0.01), 1).unwrap();
    let patches = synthetic_patches(100, 64, 123);
    let eval_set = &patches[..8];
    let before = eval_loss_mean(&codec, eval_set).unwrap();
    println!(
        "[dataset] initial: loss {:.4} rate {:.4} bpp, mse {:.6}, psnr {:.2}",
        before.loss, before.rate_bpp, before.mse, before.psnr_db
    );
    let tc = TrainConfig {
        steps,
        lr,
        seed: 7,
        log_every: 20,
        ..TrainConfig::default()
    };
    let (trace, _) = train(&mut codec, &patches, &tc).unwrap();
    for p in &trace {
        println!("  step {:4}  loss {:10.4}  rate {:8.4}  mse {:.6}", p.step, p.loss, p.rate_bpp, p.mse);
    }
    let after = eval_loss_mean(&codec, eval_set).unwrap();
    println!(
        "[dataset] final: loss {:.4} ({:.3}x), rate {:.4}, mse {:.6}, psnr {:.2}  [{:.1}s]",
        after.loss,
        after.loss / before.loss,
        after.rate_bpp,
        after.mse,
        after.psnr_db,
        t0.elapsed().as_secs_f64()
    );

    // single-patch overfit
    let t1 = std::time::Instant::now();
    let mut codec = Codec::new(CodecConfig::tiny().with_lambda(0.01), 2).unwrap();
    let patch = synthetic_patches(1, 64, 321);
    let before = eval_loss(&codec, &patch[0]).unwrap();
    let tc = TrainConfig {
        steps: 500,
        lr,
        seed: 9,
        log_every: 100,
        ..TrainConfig::default()
    };
    let (trace, _) = train(&mut codec, &patch, &tc).unwrap();
    for p in &trace {
        println!("  step {:4}  loss {:10.4}  rate {:8.4}  mse {:.6}", p.step, p.loss, p.rate_bpp, p.mse);
    }
    let after = eval_loss(&codec, &patch[0]).unwrap();
    let mid = Tensor::full(patch[0].shape(), 0.5);
    let mid_psnr = psnr(&patch[0], &mid).unwrap();
    // psnr from the eval reconstruction
    println!(
        "[overfit] loss {:.4} -> {:.4} ({:.3}x), psnr {:.2} vs midgray {:.2} (+{:.2} dB needed 6)  [{:.1}s]",
        before.loss,
        after.loss,
        after.loss / before.loss,
        after.psnr_db,
        mid_psnr,
        after.psnr_db - mid_psnr,
        t1.elapsed().as_secs_f64()
    );
    let _ = clamp01(&patch[0]);
}
