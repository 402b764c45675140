//! Probability models and quantization: the learned factorized prior for
//! hyper-latents, the zero-mean Gaussian conditional for latent residuals,
//! rate estimation, and quantized-CDF export for the range coder.

use std::ops::Range;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::range_coder::{RangeDecoder, RangeEncoder, TOTAL_FREQ};
use crate::tensor::graph::{EvalGraph, Graph, Param};
use crate::tensor::{ops, Tensor};

/// Scale floor for the Gaussian conditional.
pub const SIGMA_MIN: f64 = 0.04;
/// Mass reserved per tail side; anything outside the retained support is
/// routed to the escape symbol.
pub const TAIL_MASS_PER_SIDE: f64 = 1.0 / 512.0; // 2^-9
/// Gaussian support half-width in standard deviations. Phi(-3.3) ~ 4.8e-4,
/// comfortably below the 2^-9 per-side budget.
const GAUSSIAN_TAIL_Z: f64 = 3.3;
/// Retained-support tail threshold for the factorized prior (its pmf must
/// sum to 1 within 1e-6 over the retained symbols).
const FACTORIZED_TAIL: f64 = 5e-7;
/// Probabilities are clamped here before taking logs.
pub const PMF_FLOOR: f64 = 9.094947017729282e-13; // 2^-40
const LOG2_E: f64 = std::f64::consts::LOG2_E;

// ---------------------------------------------------------------------------
// Quantized CDF tables
// ---------------------------------------------------------------------------

/// Integer CDF over a contiguous run of symbol values plus a final escape
/// slot. Total frequency is exactly 2^16 and every slot has count >= 1, so
/// the cumulative sequence is strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cum: Vec<u32>,
    offset: i32,
}

impl CdfTable {
    /// Quantize `pmf` (for values `offset..offset + pmf.len()`) to integer
    /// counts summing to 2^16. The escape slot absorbs the rounding
    /// remainder on top of `escape_mass`.
    pub fn from_pmf(pmf: &[f64], offset: i32, escape_mass: f64) -> Result<CdfTable> {
        if pmf.is_empty() || pmf.len() + 1 >= TOTAL_FREQ as usize {
            return Err(TensorError::Invalid(format!(
                "cdf table with {} symbols is not representable",
                pmf.len()
            )));
        }
        let mut counts: Vec<u64> = pmf
            .iter()
            .map(|&p| ((p.max(0.0) * TOTAL_FREQ as f64).round() as u64).max(1))
            .collect();
        counts.push(((escape_mass.max(0.0) * TOTAL_FREQ as f64).round() as u64).max(1));
        let mut sum: u64 = counts.iter().sum();
        if sum < TOTAL_FREQ as u64 {
            *counts.last_mut().unwrap() += TOTAL_FREQ as u64 - sum;
        } else {
            while sum > TOTAL_FREQ as u64 {
                // take from the largest slot, keeping every count >= 1
                let (i, &mx) = counts
                    .iter()
                    .enumerate()
                    .max_by_key(|&(i, &c)| (c, usize::MAX - i))
                    .unwrap();
                let take = (sum - TOTAL_FREQ as u64).min(mx - 1);
                if take == 0 {
                    return Err(TensorError::Invalid(
                        "cdf quantization cannot reach the required total".into(),
                    ));
                }
                counts[i] -= take;
                sum -= take;
            }
        }
        let mut cum = Vec::with_capacity(counts.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &c in &counts {
            acc += c;
            cum.push(acc as u32);
        }
        debug_assert_eq!(*cum.last().unwrap(), TOTAL_FREQ);
        Ok(CdfTable { cum, offset })
    }

    /// Number of regular (non-escape) symbols.
    pub fn regular_symbols(&self) -> usize {
        self.cum.len() - 2
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    /// Cumulative bounds `[lo, hi)` of slot `idx`.
    pub fn slot(&self, idx: usize) -> (u32, u32) {
        (self.cum[idx], self.cum[idx + 1])
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    fn index_of(&self, value: i32) -> Option<usize> {
        let rel = value as i64 - self.offset as i64;
        (0..self.regular_symbols() as i64)
            .contains(&rel)
            .then_some(rel as usize)
    }

    /// The coded probability of `value` (from the integer counts).
    pub fn coded_probability(&self, value: i32) -> f64 {
        let idx = match self.index_of(value) {
            Some(i) => i,
            None => self.regular_symbols(), // escape
        };
        let (lo, hi) = self.slot(idx);
        (hi - lo) as f64 / TOTAL_FREQ as f64
    }

    pub fn encode_value(&self, enc: &mut RangeEncoder, value: i32) {
        match self.index_of(value) {
            Some(idx) => {
                let (lo, hi) = self.slot(idx);
                enc.encode(lo, hi);
            }
            None => {
                let esc = self.regular_symbols();
                let (lo, hi) = self.slot(esc);
                enc.encode(lo, hi);
                enc.encode_raw(zigzag(value), 32);
            }
        }
    }

    pub fn decode_value(&self, dec: &mut RangeDecoder) -> i32 {
        let off = dec.peek();
        let idx = self.cum.partition_point(|&c| c <= off) - 1;
        let (lo, hi) = self.slot(idx);
        dec.consume(lo, hi);
        if idx == self.regular_symbols() {
            unzigzag(dec.decode_raw(32))
        } else {
            self.offset + idx as i32
        }
    }
}

fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

fn unzigzag(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}

// ---------------------------------------------------------------------------
// Quantization and latent codes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentOrigin {
    Aux,
    Main,
}

/// Quantized integer latent grid plus its channel segmentation.
#[derive(Clone, Debug)]
pub struct LatentCode {
    pub values: Vec<i32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub segments: Vec<Range<usize>>,
    pub origin: LatentOrigin,
}

impl LatentCode {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Values of one channel range, in channel-major raster order.
    pub fn segment_values(&self, seg: &Range<usize>) -> &[i32] {
        let hw = self.height * self.width;
        &self.values[seg.start * hw..seg.end * hw]
    }

    /// Back to a float tensor `[1, C, h, w]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.channels, self.height, self.width],
            self.values.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Round-half-away-from-zero residual quantizer: `r = round(y - mu)`.
///
/// The reconstruction `r + mu` is within 1/2 of `y` elementwise, and
/// re-quantizing the reconstruction returns the identical residual.
pub fn quantize(y: &Tensor, mu: &Tensor, origin: LatentOrigin) -> Result<LatentCode> {
    if y.shape() != mu.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "quantize: y {:?} vs mu {:?}",
            y.shape(),
            mu.shape()
        )));
    }
    if !y.is_finite() || !mu.is_finite() {
        return Err(TensorError::NonFinite("quantize input".into()));
    }
    let (b, c, h, w) = y.dims4()?;
    if b != 1 {
        return Err(TensorError::ShapeMismatch(
            "quantize expects a single-image batch".into(),
        ));
    }
    let values = y
        .data()
        .iter()
        .zip(mu.data().iter())
        .map(|(&yv, &mv)| (yv - mv).round() as i32)
        .collect();
    Ok(LatentCode {
        values,
        channels: c,
        height: h,
        width: w,
        segments: vec![0..c],
        origin,
    })
}

/// `r + mu`, the dequantized reconstruction.
pub fn reconstruct(code: &LatentCode, mu: &Tensor) -> Result<Tensor> {
    ops::add(&code.to_tensor(), mu)
}

/// Training-time relaxation of the quantizer.
pub struct NoiseQuantize<V> {
    /// `(y - mu) + u` with `u ~ U(-1/2, 1/2)`: what the rate term sees.
    pub rate_residual: V,
    /// `mu + round_ste(y - mu)`: what downstream layers see; gradients pass
    /// straight through the rounding to `y`.
    pub ste_recon: V,
}

/// Draw noise and build both relaxation paths on the graph.
pub fn noise_quantize<G: Graph, R: Rng>(
    g: &mut G,
    y: &G::V,
    mu: &G::V,
    rng: &mut R,
) -> Result<NoiseQuantize<G::V>> {
    let shape = g.shape(y);
    let noise = Tensor::rand_uniform(rng, &shape, -0.5, 0.5);
    noise_quantize_with(g, y, mu, noise)
}

/// As [`noise_quantize`] with an explicit noise draw (for deterministic
/// replay in checks).
pub fn noise_quantize_with<G: Graph>(
    g: &mut G,
    y: &G::V,
    mu: &G::V,
    noise: Tensor,
) -> Result<NoiseQuantize<G::V>> {
    let r = g.sub(y, mu)?;
    let u = g.constant(noise);
    let rate_residual = g.add(&r, &u)?;
    let rounded = g.ste_round(&r);
    let ste_recon = g.add(mu, &rounded)?;
    Ok(NoiseQuantize {
        rate_residual,
        ste_recon,
    })
}

/// Smooth stand-in used where finite-difference checks need a rounding-free
/// graph: both paths see the noisy residual.
pub fn noise_quantize_smooth_with<G: Graph>(
    g: &mut G,
    y: &G::V,
    mu: &G::V,
    noise: Tensor,
) -> Result<NoiseQuantize<G::V>> {
    let r = g.sub(y, mu)?;
    let u = g.constant(noise);
    let rate_residual = g.add(&r, &u)?;
    let ste_recon = g.add(mu, &rate_residual)?;
    Ok(NoiseQuantize {
        rate_residual,
        ste_recon,
    })
}

// ---------------------------------------------------------------------------
// Gaussian conditional
// ---------------------------------------------------------------------------

/// `Phi((r + 1/2)/sigma) - Phi((r - 1/2)/sigma)`: the probability of integer
/// residual `r` under N(0, sigma^2) convolved with U(-1/2, 1/2).
///
/// The scale floor is the caller's job (the parameter predictors clamp at
/// `sigma_min` before anything reaches coding).
///
/// Written as an erf difference so that `pmf(r) == pmf(-r)` holds bitwise
/// (erf is odd-exact; the `1 + erf` form of Phi would round asymmetrically).
pub fn gaussian_pmf(r: i32, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    let hi = (r as f64 + 0.5) / sigma / std::f64::consts::SQRT_2;
    let lo = (r as f64 - 0.5) / sigma / std::f64::consts::SQRT_2;
    0.5 * (libm::erf(hi) - libm::erf(lo))
}

/// Retained support half-width for a given sigma.
pub fn gaussian_support(sigma: f64) -> i32 {
    (GAUSSIAN_TAIL_Z * sigma).ceil().max(1.0) as i32
}

/// Build the quantized CDF for one element's sigma. Deterministic given
/// sigma, so encoder and decoder rebuild identical tables.
pub fn gaussian_cdf_table(sigma: f64) -> Result<CdfTable> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(TensorError::NonFinite("gaussian sigma".into()));
    }
    let mut half = gaussian_support(sigma);
    for attempt in 0..2 {
        let side_tail = ops::std_normal_cdf_scalar(-(half as f64 + 0.5) / sigma);
        if side_tail < TAIL_MASS_PER_SIDE {
            let pmf: Vec<f64> = (-half..=half).map(|r| gaussian_pmf(r, sigma)).collect();
            let escape = 2.0 * side_tail;
            return CdfTable::from_pmf(&pmf, -half, escape);
        }
        if attempt == 0 {
            half *= 2;
        }
    }
    Err(TensorError::Invalid(format!(
        "gaussian support overflow at sigma {sigma}"
    )))
}

/// Estimated rate of a code under per-element sigmas, using the exact pmf.
pub struct RateBits {
    pub bits: f64,
    /// How many symbols hit the probability floor.
    pub clamped: usize,
}

pub fn rate_bits_gaussian(code: &LatentCode, sigma: &Tensor) -> Result<RateBits> {
    if sigma.numel() != code.numel() {
        return Err(TensorError::ShapeMismatch(format!(
            "rate_bits: {} sigmas for {} symbols",
            sigma.numel(),
            code.numel()
        )));
    }
    let mut bits = 0.0;
    let mut clamped = 0;
    for (&v, &s) in code.values.iter().zip(sigma.data().iter()) {
        let p = gaussian_pmf(v, s);
        let p = if p < PMF_FLOOR {
            clamped += 1;
            PMF_FLOOR
        } else {
            p
        };
        bits -= p.log2();
    }
    Ok(RateBits { bits, clamped })
}

/// Differentiable rate of noisy residuals under per-element sigmas, in bits.
pub fn gaussian_bits<G: Graph>(g: &mut G, residual: &G::V, sigma: &G::V) -> Result<G::V> {
    let inv = g.recip(sigma);
    let hi_arg = g.add_scalar(residual, 0.5);
    let hi_arg = g.mul(&hi_arg, &inv)?;
    let lo_arg = g.add_scalar(residual, -0.5);
    let lo_arg = g.mul(&lo_arg, &inv)?;
    let hi = g.std_normal_cdf(&hi_arg);
    let lo = g.std_normal_cdf(&lo_arg);
    let p = g.sub(&hi, &lo)?;
    let p = g.clamp_min(&p, PMF_FLOOR);
    let lnp = g.ln(&p);
    let total = g.sum(&lnp);
    Ok(g.scale(&total, -LOG2_E))
}

// ---------------------------------------------------------------------------
// Factorized prior
// ---------------------------------------------------------------------------

const FACTORIZED_WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];

struct ChannelCdf {
    /// Raw weights, softplus-mapped before use: positivity keeps the CDF
    /// monotone. Stored as 1x1 conv kernels `[w_out, w_in, 1, 1]`.
    weights: Vec<Param>,
    biases: Vec<Param>,
    /// Raw gate coefficients, tanh-bounded to (-1, 1).
    gates: Vec<Param>,
}

/// Per-channel learned monotone CDF: K = 4 composed scalar layers with
/// hidden widths [3, 3, 3]; positive weights and bounded tanh couplings
/// keep it non-decreasing, the final sigmoid pins the limits to 0 and 1.
pub struct FactorizedPrior {
    channels: usize,
    chains: Vec<ChannelCdf>,
}

impl FactorizedPrior {
    pub fn new<R: Rng>(name: &str, channels: usize, rng: &mut R) -> FactorizedPrior {
        let chains = (0..channels)
            .map(|c| {
                let mut weights = Vec::new();
                let mut biases = Vec::new();
                let mut gates = Vec::new();
                for k in 0..4 {
                    let (win, wout) = (FACTORIZED_WIDTHS[k], FACTORIZED_WIDTHS[k + 1]);
                    let base = crate::nn::softplus_inv(1.0 / win as f64);
                    let jitter = Tensor::rand_uniform(rng, &[wout, win, 1, 1], -0.1, 0.1);
                    let raw = jitter.map(|v| v + base);
                    weights.push(Param::new(format!("{name}.ch{c}.w{k}"), raw));
                    biases.push(Param::new(
                        format!("{name}.ch{c}.b{k}"),
                        Tensor::rand_uniform(rng, &[wout], -0.5, 0.5),
                    ));
                    if k < 3 {
                        gates.push(Param::new(
                            format!("{name}.ch{c}.a{k}"),
                            Tensor::zeros(&[wout]),
                        ));
                    }
                }
                ChannelCdf {
                    weights,
                    biases,
                    gates,
                }
            })
            .collect();
        FactorizedPrior { channels, chains }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// CDF of channel `ch` at the points in `x` (any `[1, 1, n, 1]` value).
    pub fn cdf<G: Graph>(&self, g: &mut G, ch: usize, x: &G::V) -> Result<G::V> {
        let chain = &self.chains[ch];
        let mut t = x.clone();
        for k in 0..4 {
            let raw_w = g.param(&chain.weights[k]);
            let w = g.softplus(&raw_w);
            let b = g.param(&chain.biases[k]);
            t = g.conv2d(&t, &w, Some(&b), 1, 0)?;
            if k < 3 {
                let raw_a = g.param(&chain.gates[k]);
                let a = g.tanh(&raw_a);
                let th = g.tanh(&t);
                let gated = g.mul(&th, &a)?;
                t = g.add(&t, &gated)?;
            } else {
                t = g.sigmoid(&t);
            }
        }
        Ok(t)
    }

    /// Tape-free CDF evaluation at arbitrary points.
    pub fn cdf_values(&self, ch: usize, xs: &[f64]) -> Vec<f64> {
        let mut g = EvalGraph::new();
        let x = Tensor::from_vec(&[1, 1, xs.len(), 1], xs.to_vec());
        let out = self.cdf(&mut g, ch, &x).expect("factorized cdf shapes");
        out.data().to_vec()
    }

    /// pmf over the integer grid `lo..=hi`: adjacent differences of the CDF
    /// at half-integer edges (telescoping, so the sum equals the edge CDF
    /// difference exactly).
    pub fn pmf_grid(&self, ch: usize, lo: i32, hi: i32) -> Vec<f64> {
        let edges: Vec<f64> = (lo..=hi + 1).map(|n| n as f64 - 0.5).collect();
        let cdf = self.cdf_values(ch, &edges);
        cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect()
    }

    /// Retained integer support of channel `ch`: tails below
    /// `FACTORIZED_TAIL` per side. Widens the scan window once before
    /// giving up.
    pub fn support(&self, ch: usize) -> Result<(i32, i32)> {
        let mut cap = 64i32;
        for attempt in 0..2 {
            let edges: Vec<f64> = vec![-(cap as f64) - 0.5, cap as f64 + 0.5];
            let c = self.cdf_values(ch, &edges);
            if c[0] <= FACTORIZED_TAIL && 1.0 - c[1] <= FACTORIZED_TAIL {
                // shrink to the minimal window
                let all_edges: Vec<f64> = (-cap..=cap + 1).map(|n| n as f64 - 0.5).collect();
                let cdf = self.cdf_values(ch, &all_edges);
                let mut lo = -cap;
                while ((lo - (-cap)) as usize) < cdf.len() - 1
                    && cdf[(lo - (-cap)) as usize + 1] <= FACTORIZED_TAIL
                {
                    lo += 1;
                }
                let mut hi = cap;
                while hi > lo && 1.0 - cdf[(hi - (-cap)) as usize] <= FACTORIZED_TAIL {
                    hi -= 1;
                }
                return Ok((lo, hi));
            }
            if attempt == 0 {
                cap = 1024;
            }
        }
        Err(TensorError::Invalid(format!(
            "factorized support overflow on channel {ch}"
        )))
    }

    /// Quantized CDF table for a channel; byte-identical on encoder and
    /// decoder because it is a pure function of the weights.
    pub fn export_cdf(&self, ch: usize) -> Result<CdfTable> {
        let (lo, hi) = self.support(ch)?;
        let pmf = self.pmf_grid(ch, lo, hi);
        let escape = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
        CdfTable::from_pmf(&pmf, lo, escape)
    }

    pub fn export_all(&self) -> Result<Vec<CdfTable>> {
        (0..self.channels).map(|c| self.export_cdf(c)).collect()
    }

    /// Estimated rate of an integer grid under the exact pmf.
    pub fn rate_bits(&self, code: &LatentCode) -> Result<RateBits> {
        if code.channels != self.channels {
            return Err(TensorError::ShapeMismatch(format!(
                "rate_bits: code has {} channels, prior {}",
                code.channels, self.channels
            )));
        }
        let hw = code.height * code.width;
        let mut bits = 0.0;
        let mut clamped = 0;
        for c in 0..self.channels {
            let vals = &code.values[c * hw..(c + 1) * hw];
            let (lo, hi) = match (vals.iter().min(), vals.iter().max()) {
                (Some(&lo), Some(&hi)) => (lo, hi),
                _ => continue,
            };
            let pmf = self.pmf_grid(c, lo, hi);
            for &v in vals {
                let p = pmf[(v - lo) as usize];
                let p = if p < PMF_FLOOR {
                    clamped += 1;
                    PMF_FLOOR
                } else {
                    p
                };
                bits -= p.log2();
            }
        }
        Ok(RateBits { bits, clamped })
    }

    /// Differentiable rate of the noisy hyper-latent `[1, C, h, w]`, in bits.
    pub fn bits<G: Graph>(&self, g: &mut G, z_noisy: &G::V) -> Result<G::V> {
        let shape = g.shape(z_noisy);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(TensorError::ShapeMismatch(format!(
                "factorized bits over {} channels got {shape:?}",
                self.channels
            )));
        }
        let n = shape[0] * shape[2] * shape[3];
        let mut total: Option<G::V> = None;
        for c in 0..self.channels {
            let zc = g.slice_axis(z_noisy, 1, c, c + 1)?;
            let flat = g.reshape(&zc, &[1, 1, n, 1])?;
            let hi_in = g.add_scalar(&flat, 0.5);
            let lo_in = g.add_scalar(&flat, -0.5);
            let hi = self.cdf(g, c, &hi_in)?;
            let lo = self.cdf(g, c, &lo_in)?;
            let p = g.sub(&hi, &lo)?;
            let p = g.clamp_min(&p, PMF_FLOOR);
            let lnp = g.ln(&p);
            let s = g.sum(&lnp);
            total = Some(match total {
                None => s,
                Some(t) => g.add(&t, &s)?,
            });
        }
        Ok(g.scale(&total.expect("at least one channel"), -LOG2_E))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.chains
            .iter()
            .flat_map(|c| {
                c.weights
                    .iter()
                    .chain(c.biases.iter())
                    .chain(c.gates.iter())
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.chains
            .iter_mut()
            .flat_map(|c| {
                c.weights
                    .iter_mut()
                    .chain(c.biases.iter_mut())
                    .chain(c.gates.iter_mut())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Independent oracle, no erf calls: the alternating Maclaurin series
    /// for erf where it is numerically sound (|z| <= 3), Simpson quadrature
    /// of the normal density elsewhere.
    fn normal_cdf_series(x: f64) -> f64 {
        let z = x / std::f64::consts::SQRT_2;
        assert!(z.abs() <= 3.0, "series oracle only sound for small z");
        let mut term = z;
        let mut sum = z;
        let mut n = 0usize;
        while term.abs() > 1e-18 && n < 200 {
            n += 1;
            term *= -z * z / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        let erf = 2.0 / std::f64::consts::PI.sqrt() * sum;
        0.5 * (1.0 + erf)
    }

    fn gaussian_pmf_oracle(r: i32, sigma: f64) -> f64 {
        let lo = (r as f64 - 0.5) / sigma;
        let hi = (r as f64 + 0.5) / sigma;
        if lo.abs() <= 3.0 * std::f64::consts::SQRT_2 && hi.abs() <= 3.0 * std::f64::consts::SQRT_2
        {
            return normal_cdf_series(hi) - normal_cdf_series(lo);
        }
        // Simpson's rule over the standard normal density on [lo, hi]
        let n = 4000usize; // even
        let h = (hi - lo) / n as f64;
        let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = phi(lo) + phi(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * phi(lo + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn pmf_matches_erf_series_oracle() {
        let p = gaussian_pmf(0, 1.0);
        assert!((p - gaussian_pmf_oracle(0, 1.0)).abs() < 1e-9);
        assert!((p - 0.382925).abs() < 1e-6, "pmf(0,1) = {p}");
        for r in -6..=6 {
            for &s in &[0.04, 0.3, 1.0, 2.5, 11.0] {
                assert!((gaussian_pmf(r, s) - gaussian_pmf_oracle(r, s)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pmf_symmetry_and_total_mass() {
        for &s in &[0.04, 0.5, 1.0, 3.0] {
            for r in 1..=10 {
                assert_eq!(gaussian_pmf(r, s), gaussian_pmf(-r, s));
            }
            let span = (40.0 * s).ceil() as i32;
            let total: f64 = (-span..=span).map(|r| gaussian_pmf(r, s)).sum();
            assert!((total - 1.0).abs() < 1e-9, "sigma {s}: total {total}");
        }
    }

    #[test]
    fn single_symbol_rate() {
        // -log2(0.382925) = 1.384866...
        let bits = -gaussian_pmf(0, 1.0).log2();
        let oracle = -gaussian_pmf_oracle(0, 1.0).log2();
        assert!((bits - oracle).abs() < 1e-9);
        assert!((bits - 1.384866).abs() < 1e-4);
    }

    #[test]
    fn rate_grows_with_sigma() {
        // all-zero residuals: rate is monotone in sigma (entropy ~ log2 sigma)
        let mut last = 0.0;
        for i in 1..40 {
            let s = 0.05 * i as f64;
            let bits = -gaussian_pmf(0, s.max(SIGMA_MIN)).log2();
            assert!(bits >= last - 1e-12, "sigma {s}");
            last = bits;
        }
    }

    #[test]
    fn quantize_reconstruction_bounds_and_idempotence() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let y = Tensor::rand_uniform(&mut rng, &[1, 4, 10, 10], -10.0, 10.0);
        let mu = Tensor::rand_uniform(&mut rng, &[1, 4, 10, 10], -10.0, 10.0);
        let code = quantize(&y, &mu, LatentOrigin::Aux).unwrap();
        let rec = reconstruct(&code, &mu).unwrap();
        let max_err = rec.max_abs_diff(&y);
        assert!(max_err <= 0.5 + 1e-12, "|y_hat - y| = {max_err}");
        let again = quantize(&rec, &mu, LatentOrigin::Aux).unwrap();
        assert_eq!(code.values, again.values);
    }

    #[test]
    fn quantize_simple_values() {
        let y = Tensor::from_vec(&[1, 1, 1, 2], vec![1.4, 2.0]);
        let mu = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 2.0]);
        let code = quantize(&y, &mu, LatentOrigin::Main).unwrap();
        assert_eq!(code.values, vec![1, 0]);
        let rec = reconstruct(&code, &mu).unwrap();
        assert_eq!(rec.data(), &[1.0, 2.0]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let y = Tensor::from_vec(&[1, 1, 1, 1], vec![f64::NAN]);
        let mu = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(quantize(&y, &mu, LatentOrigin::Aux).is_err());
    }

    #[test]
    fn gaussian_table_tiny_sigma_concentrates_at_zero() {
        let t = gaussian_cdf_table(SIGMA_MIN).unwrap();
        let idx = t.index_of(0).unwrap();
        let (lo, hi) = t.slot(idx);
        assert!(
            (hi - lo) as f64 >= TOTAL_FREQ as f64 * (1.0 - 1.0 / 256.0),
            "jump at zero is only {}",
            hi - lo
        );
    }

    #[test]
    fn cdf_tables_strictly_increase() {
        for &s in &[SIGMA_MIN, 0.3, 1.0, 7.0, 40.0] {
            let t = gaussian_cdf_table(s).unwrap();
            for w in t.cumulative().windows(2) {
                assert!(w[1] > w[0]);
            }
            assert_eq!(*t.cumulative().last().unwrap(), TOTAL_FREQ);
        }
    }

    #[test]
    fn quantized_pmf_close_to_real_pmf() {
        for &s in &[0.2, 1.0, 4.0] {
            let t = gaussian_cdf_table(s).unwrap();
            let half = gaussian_support(s);
            for r in -half..=half {
                let real = gaussian_pmf(r, s);
                let coded = t.coded_probability(r);
                assert!(
                    (real - coded).abs() <= 1.5 / TOTAL_FREQ as f64 + 2.0 * TAIL_MASS_PER_SIDE / half as f64,
                    "sigma {s}, r {r}: real {real} coded {coded}"
                );
            }
        }
    }

    #[test]
    fn escape_roundtrips_out_of_range_values() {
        let t = gaussian_cdf_table(0.5).unwrap();
        let mut enc = RangeEncoder::new();
        let values = [0, 1, -900_000, 2, 1_000_000, -1];
        for &v in &values {
            t.encode_value(&mut enc, v);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &v in &values {
            assert_eq!(t.decode_value(&mut dec), v);
        }
    }

    #[test]
    fn noise_quantize_zero_noise_is_exact_residual() {
        let mut g = EvalGraph::new();
        let y = Tensor::from_vec(&[1, 1, 1, 3], vec![1.2, -0.4, 3.0]);
        let mu = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 0.0, 1.0]);
        let nq = noise_quantize_with(&mut g, &y, &mu, Tensor::zeros(&[1, 1, 1, 3])).unwrap();
        let r = nq.rate_residual;
        for (a, b) in r.data().iter().zip([0.2, -0.4, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_quantize_is_mean_zero() {
        // Monte Carlo over 1e5 draws: mean of the noisy residual equals the
        // true residual within 3 standard errors (se = 1/sqrt(12 n))
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let n = 100_000usize;
        let y = Tensor::full(&[1, 1, n, 1], 0.73);
        let mu = Tensor::full(&[1, 1, n, 1], 0.3);
        let mut g = EvalGraph::new();
        let nq = noise_quantize(&mut g, &y, &mu, &mut rng).unwrap();
        let mean = nq.rate_residual.data().iter().sum::<f64>() / n as f64;
        let se = 1.0 / (12.0 * n as f64).sqrt();
        assert!(
            (mean - 0.43).abs() < 3.0 * se,
            "mean {mean} vs 0.43 +- {}",
            3.0 * se
        );
    }

    #[test]
    fn noise_path_gradient_is_unit() {
        use crate::tensor::graph::TrainGraph;
        let mut g = TrainGraph::new();
        let y = g.leaf(Tensor::scalar(1.7), true);
        let mu = g.leaf(Tensor::scalar(0.4), true);
        let nq = noise_quantize_with(&mut g, &y, &mu, Tensor::scalar(0.2)).unwrap();
        let out = g.sum(&nq.rate_residual);
        g.backward(out).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[1.0]);
        assert_eq!(g.grad(mu).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn factorized_prior_is_a_valid_distribution() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let prior = FactorizedPrior::new("p", 4, &mut rng);
        for c in 0..4 {
            let (lo, hi) = prior.support(c).unwrap();
            let pmf = prior.pmf_grid(c, lo, hi);
            assert!(pmf.iter().all(|&p| p >= 0.0));
            let total: f64 = pmf.iter().sum();
            assert!(
                (total - 1.0).abs() < 1e-6,
                "channel {c}: retained mass {total}"
            );
            // saturation at the extremes
            let far = prior.cdf_values(c, &[-1e4, 1e4]);
            assert!(far[0] < 1e-6 && far[1] > 1.0 - 1e-6);
        }
    }

    #[test]
    fn factorized_export_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let prior = FactorizedPrior::new("p", 3, &mut rng);
        let tables = prior.export_all().unwrap();
        let mut enc = RangeEncoder::new();
        let values: Vec<i32> = (-6..=6).collect();
        for &v in &values {
            tables[1].encode_value(&mut enc, v);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &v in &values {
            assert_eq!(tables[1].decode_value(&mut dec), v);
        }
        // decoder-side export is byte-identical (same pure function)
        let again = prior.export_cdf(1).unwrap();
        assert_eq!(tables[1], again);
    }

    #[test]
    fn factorized_training_bits_match_eval_rate_at_integers() {
        // the training-rate expression evaluated at u = 0 on integer values
        // equals the eval-mode rate over the same grid
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        let prior = FactorizedPrior::new("p", 2, &mut rng);
        let z = Tensor::from_vec(&[1, 2, 2, 1], vec![0.0, 1.0, -2.0, 3.0]);
        let mut g = EvalGraph::new();
        let bits_graph = prior.bits(&mut g, &z).unwrap().item();
        let code = quantize(&z, &Tensor::zeros(&[1, 2, 2, 1]), LatentOrigin::Aux).unwrap();
        let bits_eval = prior.rate_bits(&code).unwrap().bits;
        assert!(
            (bits_graph - bits_eval).abs() < 1e-9,
            "{bits_graph} vs {bits_eval}"
        );
    }

    #[test]
    fn uniform_toy_model_rate() {
        // a 4-symbol uniform pmf costs exactly 2 bits per symbol
        let pmf = [0.25f64; 4];
        let bits: f64 = pmf.iter().map(|p| -p.log2()).sum::<f64>() / 4.0;
        assert_eq!(bits, 2.0);
        let t = CdfTable::from_pmf(&[0.25; 4], 0, 0.0).unwrap();
        // quantized slots shed one count each to the mandatory escape slot
        for i in 0..4 {
            let (lo, hi) = t.slot(i);
            assert!((hi - lo) as i64 >= 16383);
        }
    }

    #[test]
    fn zigzag_roundtrip() {
        for v in [-5i32, -1, 0, 1, 7, i32::MIN, i32::MAX] {
            assert_eq!(unzigzag(zigzag(v)), v);
        }
    }
}
