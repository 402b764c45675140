//! Rate-distortion training on small patches: the relaxed forward graph,
//! an Adam optimizer with gradient-norm clipping, the training loop, a
//! deterministic eval-mode loss, checkpoints and synthetic data.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::bytes::{put_f64, put_u16, put_u32, put_u64, Reader};
use crate::codec::{clamp01, Codec};
use crate::config::CodecConfig;
use crate::entropy::{
    gaussian_bits, noise_quantize_smooth_with, noise_quantize_with, quantize, rate_bits_gaussian,
    NoiseQuantize,
};
use crate::entropy::LatentOrigin;
use crate::error::{CodecError, Result, TensorError};
use crate::metrics::psnr;
use crate::tensor::graph::{EvalGraph, Graph, TrainGraph, VarId};
use crate::tensor::{ops, Tensor};

/// How quantization is relaxed inside the training graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Rate terms see additive uniform noise; everything downstream sees
    /// the straight-through-rounded reconstruction. The training default.
    NoiseRateSteRecon,
    /// Both paths see the noisy values. Rounding-free, so the whole loss
    /// graph is finite-difference checkable.
    NoiseEverywhere,
    /// No relaxation: both paths see the hard-rounded residual. Evaluates
    /// the training rate expression at inference values (diagnostics; the
    /// noise source is ignored).
    HardRound,
}

/// Handles into the recorded loss graph.
pub struct RdGraph<V> {
    pub loss: V,
    pub rate_bpp: V,
    pub mse: V,
    pub x_hat: V,
}

/// Supplies quantization noise tensors by shape. Training uses
/// [`uniform_noise`]; deterministic checks can supply zeros.
pub trait NoiseSource {
    fn draw(&mut self, shape: &[usize]) -> Tensor;
}

pub struct UniformNoise<'a, R: Rng>(pub &'a mut R);

impl<R: Rng> NoiseSource for UniformNoise<'_, R> {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        Tensor::rand_uniform(self.0, shape, -0.5, 0.5)
    }
}

pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

/// Build the full rate-distortion loss graph on `g`:
/// `L = R_total / pixels + lambda * 255^2 * MSE(x, x_hat)`.
///
/// `x` must already be padded to the configured multiple. Noise draws are
/// taken from `noise` in a fixed order, so the same source reproduces the
/// graph exactly.
pub fn rd_forward<G: Graph>(
    g: &mut G,
    codec: &Codec,
    x: &G::V,
    relaxation: Relaxation,
    noise: &mut dyn NoiseSource,
) -> Result<RdGraph<G::V>> {
    let shape = g.shape(x);
    let pixels = (shape[2] * shape[3]) as f64;

    let relax = |g: &mut G,
                 y: &G::V,
                 mu: &G::V,
                 noise: &mut dyn NoiseSource|
     -> Result<NoiseQuantize<G::V>> {
        match relaxation {
            Relaxation::NoiseRateSteRecon => {
                let u = noise.draw(&g.shape(y));
                noise_quantize_with(g, y, mu, u)
            }
            Relaxation::NoiseEverywhere => {
                let u = noise.draw(&g.shape(y));
                noise_quantize_smooth_with(g, y, mu, u)
            }
            Relaxation::HardRound => {
                let r = g.sub(y, mu)?;
                let rounded = g.ste_round(&r);
                let recon = g.add(mu, &rounded)?;
                Ok(NoiseQuantize {
                    rate_residual: rounded,
                    ste_recon: recon,
                })
            }
        }
    };

    // auxiliary path
    let y_aux = codec.aux.encode(g, x)?;
    let z_aux = codec.aux.hyper_encode(g, &y_aux)?;
    let zero = {
        let sh = g.shape(&z_aux);
        g.constant(Tensor::zeros(&sh))
    };
    let nq_z = relax(g, &z_aux, &zero, noise)?;
    let mut total_bits = codec.aux_prior.bits(g, &nq_z.rate_residual)?;
    let z_apm = codec.aux.hyper_decode(g, &nq_z.ste_recon)?;

    let mut prev: Vec<G::V> = Vec::new();
    for (i, seg) in codec.aux.segments().iter().enumerate() {
        let (mu, sigma) = codec.aux.predict_segment(g, i, &prev, &z_apm)?;
        let y_i = g.slice_axis(&y_aux, 1, seg.start, seg.end)?;
        let nq = relax(g, &y_i, &mu, noise)?;
        let bits = gaussian_bits(g, &nq.rate_residual, &sigma)?;
        total_bits = g.add(&total_bits, &bits)?;
        prev.push(nq.ste_recon);
    }
    let y_aux_hat = g.concat(&prev, 1)?;
    let feats = codec.aux.decode(g, &y_aux_hat)?;

    // main path
    let y = codec.main.encode(g, x, &feats)?;
    let z = codec.main.hyper_encode(g, &y)?;
    let zero = {
        let sh = g.shape(&z);
        g.constant(Tensor::zeros(&sh))
    };
    let nq_z = relax(g, &z, &zero, noise)?;
    let bits = codec.main_prior.bits(g, &nq_z.rate_residual)?;
    total_bits = g.add(&total_bits, &bits)?;
    let z_pm = codec.main.hyper_decode(g, &nq_z.ste_recon)?;

    let mut prev: Vec<G::V> = Vec::new();
    for (i, seg) in codec.main.segments().iter().enumerate() {
        let (mu, sigma) = codec.main.predict_segment(g, i, &prev, &z_pm, &feats.f16)?;
        let y_i = g.slice_axis(&y, 1, seg.start, seg.end)?;
        let nq = relax(g, &y_i, &mu, noise)?;
        let bits = gaussian_bits(g, &nq.rate_residual, &sigma)?;
        total_bits = g.add(&total_bits, &bits)?;
        prev.push(nq.ste_recon);
    }
    let y_hat = g.concat(&prev, 1)?;
    let x_hat = codec.main.decode(g, &y_hat, &feats)?;

    let diff = g.sub(x, &x_hat)?;
    let sq = g.mul(&diff, &diff)?;
    let mse = g.mean(&sq);
    let rate_bpp = g.scale(&total_bits, 1.0 / pixels);
    let dist = g.scale(&mse, codec.config.lambda * 255.0 * 255.0);
    let loss = g.add(&rate_bpp, &dist)?;
    Ok(RdGraph {
        loss,
        rate_bpp,
        mse,
        x_hat,
    })
}

/// Deterministic rate-distortion numbers at true (rounded) quantization.
#[derive(Clone, Copy, Debug)]
pub struct EvalPoint {
    pub loss: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    pub psnr_db: f64,
}

/// Evaluate the same loss expression at inference values: hard rounding,
/// exact pmf rates, no noise. Deterministic given weights and input.
pub fn eval_loss(codec: &Codec, x_padded: &Tensor) -> Result<EvalPoint, CodecError> {
    let g = &mut EvalGraph::new();
    let (_, _, ph, pw) = x_padded.dims4()?;
    let pixels = (ph * pw) as f64;

    let y_aux = codec.aux.encode(g, x_padded)?;
    let z_aux = codec.aux.hyper_encode(g, &y_aux)?;
    let z_code = quantize(&z_aux, &Tensor::zeros(z_aux.shape()), LatentOrigin::Aux)?;
    let mut bits = codec.aux_prior.rate_bits(&z_code)?.bits;
    let z_apm = codec.aux.hyper_decode(g, &z_code.to_tensor())?;

    let mut prev: Vec<Tensor> = Vec::new();
    for (i, seg) in codec.aux.segments().iter().enumerate() {
        let (mu, sigma) = codec.aux.predict_segment(g, i, &prev, &z_apm)?;
        let y_i = ops::slice_axis(&y_aux, 1, seg.start, seg.end)?;
        let code = quantize(&y_i, &mu, LatentOrigin::Aux)?;
        bits += rate_bits_gaussian(&code, &sigma)?.bits;
        prev.push(ops::add(&code.to_tensor(), &mu)?);
    }
    let y_aux_hat = ops::concat(&prev.iter().collect::<Vec<_>>(), 1)?;
    let feats = codec.aux.decode(g, &y_aux_hat)?;

    let y = codec.main.encode(g, x_padded, &feats)?;
    let z = codec.main.hyper_encode(g, &y)?;
    let z_code = quantize(&z, &Tensor::zeros(z.shape()), LatentOrigin::Main)?;
    bits += codec.main_prior.rate_bits(&z_code)?.bits;
    let z_pm = codec.main.hyper_decode(g, &z_code.to_tensor())?;

    let mut prev: Vec<Tensor> = Vec::new();
    for (i, seg) in codec.main.segments().iter().enumerate() {
        let (mu, sigma) = codec.main.predict_segment(g, i, &prev, &z_pm, &feats.f16)?;
        let y_i = ops::slice_axis(&y, 1, seg.start, seg.end)?;
        let code = quantize(&y_i, &mu, LatentOrigin::Main)?;
        bits += rate_bits_gaussian(&code, &sigma)?.bits;
        prev.push(ops::add(&code.to_tensor(), &mu)?);
    }
    let y_hat = ops::concat(&prev.iter().collect::<Vec<_>>(), 1)?;
    let x_hat = codec.main.decode(g, &y_hat, &feats)?;

    let mse = ops::sub(x_padded, &x_hat)?
        .data()
        .iter()
        .map(|d| d * d)
        .sum::<f64>()
        / x_padded.numel() as f64;
    let rate_bpp = bits / pixels;
    let loss = rate_bpp + codec.config.lambda * 255.0 * 255.0 * mse;
    let psnr_db = psnr(x_padded, &clamp01(&x_hat))?;
    Ok(EvalPoint {
        loss,
        rate_bpp,
        mse,
        psnr_db,
    })
}

/// Mean eval-mode loss over a patch set.
pub fn eval_loss_mean(codec: &Codec, patches: &[Tensor]) -> Result<EvalPoint, CodecError> {
    assert!(!patches.is_empty());
    let mut acc = EvalPoint {
        loss: 0.0,
        rate_bpp: 0.0,
        mse: 0.0,
        psnr_db: 0.0,
    };
    for p in patches {
        let e = eval_loss(codec, p)?;
        acc.loss += e.loss;
        acc.rate_bpp += e.rate_bpp;
        acc.mse += e.mse;
        acc.psnr_db += e.psnr_db;
    }
    let n = patches.len() as f64;
    Ok(EvalPoint {
        loss: acc.loss / n,
        rate_bpp: acc.rate_bpp / n,
        mse: acc.mse / n,
        psnr_db: acc.psnr_db / n,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Record a trace point every `log_every` steps (and at the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            log_every: 10,
        }
    }
}

/// Adam moments keyed by parameter name.
#[derive(Default)]
pub struct AdamState {
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from per-parameter gradients (already clipped).
    fn apply(&mut self, codec: &mut Codec, grads: &HashMap<String, Tensor>, tc: &TrainConfig) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - tc.beta1.powf(t);
        let bc2 = 1.0 - tc.beta2.powf(t);
        for p in codec.params_mut() {
            let Some(gr) = grads.get(p.name()) else {
                continue;
            };
            let m = self
                .m
                .entry(p.name().to_string())
                .or_insert_with(|| Tensor::zeros(gr.shape()));
            let v = self
                .v
                .entry(p.name().to_string())
                .or_insert_with(|| Tensor::zeros(gr.shape()));
            let mut new_m = Vec::with_capacity(gr.numel());
            let mut new_v = Vec::with_capacity(gr.numel());
            let mut new_p = Vec::with_capacity(gr.numel());
            for i in 0..gr.numel() {
                let gi = gr.data()[i];
                let mi = tc.beta1 * m.data()[i] + (1.0 - tc.beta1) * gi;
                let vi = tc.beta2 * v.data()[i] + (1.0 - tc.beta2) * gi * gi;
                let mh = mi / bc1;
                let vh = vi / bc2;
                new_m.push(mi);
                new_v.push(vi);
                new_p.push(p.value().data()[i] - tc.lr * mh / (vh.sqrt() + tc.eps));
            }
            *m = Tensor::from_vec(gr.shape(), new_m);
            *v = Tensor::from_vec(gr.shape(), new_v);
            p.set_value(Tensor::from_vec(gr.shape(), new_p));
        }
    }
}


#[derive(Clone, Copy, Debug)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub rate_bpp: f64,
    pub mse: f64,
}

pub fn write_trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("step,loss,rate_bpp,mse\n");
    for p in trace {
        out.push_str(&format!("{},{},{},{}\n", p.step, p.loss, p.rate_bpp, p.mse));
    }
    out
}

/// A single optimization step on one patch. Returns the training loss seen.
pub fn train_step(
    codec: &mut Codec,
    x_padded: &Tensor,
    adam: &mut AdamState,
    tc: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<TracePoint, CodecError> {
    let mut g = TrainGraph::new();
    let x = g.constant(x_padded.clone());
    let rd = rd_forward(
        &mut g,
        codec,
        &x,
        Relaxation::NoiseRateSteRecon,
        &mut UniformNoise(rng),
    )?;
    let loss_t = g.value(&rd.loss);
    if !loss_t.is_finite() {
        return Err(CodecError::Internal(
            "non-finite training loss; aborting with diagnostics: check weight scales and learning rate".into(),
        ));
    }
    let point = TracePoint {
        step: 0,
        loss: loss_t.item(),
        rate_bpp: g.value(&rd.rate_bpp).item(),
        mse: g.value(&rd.mse).item(),
    };
    g.backward(rd.loss).map_err(CodecError::Tensor)?;

    // gather gradients, clip by global norm
    let mut grads: HashMap<String, Tensor> = HashMap::new();
    let mut sq_norm = 0.0;
    for p in codec.params() {
        if let Some(gr) = g.param_grad(p.name()) {
            sq_norm += gr.sq_norm();
            grads.insert(p.name().to_string(), gr.clone());
        }
    }
    let norm = sq_norm.sqrt();
    if !norm.is_finite() {
        return Err(CodecError::Internal("non-finite gradients".into()));
    }
    if norm > tc.clip_norm {
        let scale = tc.clip_norm / norm;
        for gr in grads.values_mut() {
            *gr = ops::scale(gr, scale);
        }
    }
    adam.apply(codec, &grads, tc);
    Ok(point)
}

/// Training loop over a patch set. Patches must be sized to the padding
/// multiple. Fixed seed implies a reproducible loss trace. Halts with a
/// report if the loss diverges beyond 10x its initial value.
pub fn train(
    codec: &mut Codec,
    patches: &[Tensor],
    tc: &TrainConfig,
) -> Result<(Vec<TracePoint>, AdamState), CodecError> {
    if patches.is_empty() {
        return Err(CodecError::InvalidInput("empty patch set".into()));
    }
    let m = codec.config.padding_multiple;
    for p in patches {
        let (_, _, h, w) = p.dims4()?;
        if h % m != 0 || w % m != 0 {
            return Err(CodecError::InvalidInput(format!(
                "patch {h}x{w} is not sized to the padding multiple {m}"
            )));
        }
    }
    let mut adam = AdamState::new();
    let mut rng = ChaCha12Rng::seed_from_u64(tc.seed);
    let mut trace = Vec::new();
    let mut initial_loss = None;
    for step in 0..tc.steps {
        let x = &patches[step % patches.len()];
        let mut point = train_step(codec, x, &mut adam, tc, &mut rng)?;
        point.step = step;
        let init = *initial_loss.get_or_insert(point.loss);
        if point.loss > 10.0 * init.max(1.0) {
            return Err(CodecError::Internal(format!(
                "training diverged at step {step}: loss {} vs initial {init}",
                point.loss
            )));
        }
        if step % tc.log_every == 0 || step + 1 == tc.steps {
            trace.push(point);
        }
    }
    Ok((trace, adam))
}

/// Smooth random patches: a few low-frequency waves per channel, clamped to
/// [0,1]. Deterministic in `seed`.
pub fn synthetic_patches(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut data = vec![0.0f64; 3 * size * size];
            for c in 0..3 {
                let base: f64 = rng.random_range(0.25..0.75);
                let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                    .map(|_| {
                        (
                            rng.random_range(0.2..0.35), // amplitude
                            rng.random_range(0.5..2.5),  // fx (cycles per patch)
                            rng.random_range(0.5..2.5),  // fy
                            rng.random_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect();
                for y in 0..size {
                    for x in 0..size {
                        let mut v = base;
                        for &(a, fx, fy, ph) in &waves {
                            v += a
                                * (std::f64::consts::TAU
                                    * (fx * x as f64 + fy * y as f64)
                                    / size as f64
                                    + ph)
                                    .sin()
                                / waves.len() as f64;
                        }
                        data[(c * size + y) * size + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
            Tensor::from_vec(&[1, 3, size, size], data)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"AIFT";
const CKPT_VERSION: u8 = 1;

/// Weights, optimizer moments, step count and seed: everything needed to
/// resume training bit-exactly.
pub struct TrainState {
    pub codec: Codec,
    pub adam: AdamState,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.push(CKPT_VERSION);
        let cfg = self.codec.config.to_key_values();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.seed);
        put_u64(&mut out, self.adam.t);
        let params = self.codec.params();
        put_u32(&mut out, params.len() as u32);
        for p in params {
            let name = p.name().as_bytes();
            put_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name);
            let t = p.value();
            put_u16(&mut out, t.shape().len() as u16);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                put_f64(&mut out, v);
            }
            for map in [&self.adam.m, &self.adam.v] {
                match map.get(p.name()) {
                    Some(mt) => {
                        out.push(1);
                        for &v in mt.data() {
                            put_f64(&mut out, v);
                        }
                    }
                    None => out.push(0),
                }
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<TrainState, CodecError> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CKPT_MAGIC {
            return Err(CodecError::InvalidInput("not an AIFT checkpoint".into()));
        }
        if r.u8()? != CKPT_VERSION {
            return Err(CodecError::InvalidInput("unsupported checkpoint version".into()));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| CodecError::InvalidInput("checkpoint config is not utf-8".into()))?;
        let config = CodecConfig::from_key_values(cfg_text)?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let t = r.u64()?;
        let n_params = r.u32()? as usize;
        let mut codec = Codec::new(config, 0)?;
        let mut adam = AdamState::new();
        adam.t = t;
        for _ in 0..n_params {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CodecError::InvalidInput("bad parameter name".into()))?
                .to_string();
            let rank = r.u16()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut read_tensor = |r: &mut Reader| -> Result<Tensor, CodecError> {
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(r.f64()?);
                }
                Ok(Tensor::from_vec(&shape, data))
            };
            let value = read_tensor(&mut r)?;
            let mut found = false;
            for p in codec.params_mut() {
                if p.name() == name {
                    if p.value().shape() != value.shape() {
                        return Err(CodecError::InvalidInput(format!(
                            "checkpoint parameter {name} has unexpected shape"
                        )));
                    }
                    p.set_value(value.clone());
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(CodecError::InvalidInput(format!(
                    "checkpoint has unknown parameter {name}"
                )));
            }
            if r.u8()? == 1 {
                adam.m.insert(name.clone(), read_tensor(&mut r)?);
            }
            if r.u8()? == 1 {
                adam.v.insert(name.clone(), read_tensor(&mut r)?);
            }
        }
        Ok(TrainState {
            codec,
            adam,
            step,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainState, CodecError> {
        TrainState::deserialize(&std::fs::read(path)?)
    }
}
