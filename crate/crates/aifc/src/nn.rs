//! Codec building blocks: convolutions, the adaptive gated activation, the
//! residual block, pooled-token attention, and the per-segment (mu, sigma)
//! predictor shared by both entropy paths.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::graph::{Graph, Param};
use crate::tensor::{he_uniform, Tensor};

pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Conv2d {
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                he_uniform(rng, &[cout, cin, k, k], cin * k * k),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    /// Same geometry, weights drawn from a reduced-scale distribution; for
    /// prediction heads that should start near zero.
    pub fn new_head<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias_init: f64,
        rng: &mut R,
    ) -> Conv2d {
        let mut c = Conv2d::new(name, cin, cout, k, 1, k / 2, rng);
        let w = c.weight.value().map(|v| v * 0.1);
        c.weight.set_value(w);
        c.bias.set_value(Tensor::full(&[cout], bias_init));
        c
    }

    pub fn zero_init(mut self) -> Conv2d {
        let shape = self.weight.value().shape().to_vec();
        self.weight.set_value(Tensor::zeros(&shape));
        self
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<G::V> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv2d(x, &w, Some(&b), self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> ConvTranspose2d {
        ConvTranspose2d {
            weight: Param::new(
                format!("{name}.weight"),
                he_uniform(rng, &[cin, cout, k, k], cin * k * k),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<G::V> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv_transpose2d(x, &w, Some(&b), self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel learnable gated swish: `y = x * sigmoid(a_c * x + b_c)`.
///
/// With a=1, b=0 (the initialization) this reduces to plain swish gating;
/// a=0, b=0 halves the input.
pub struct AdaptiveActivation {
    pub gain: Param,
    pub shift: Param,
}

impl AdaptiveActivation {
    pub fn new(name: &str, channels: usize) -> AdaptiveActivation {
        AdaptiveActivation {
            gain: Param::new(format!("{name}.gain"), Tensor::ones(&[channels])),
            shift: Param::new(format!("{name}.shift"), Tensor::zeros(&[channels])),
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.value().numel()
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<G::V> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(TensorError::ShapeMismatch(format!(
                "adaptive activation over {} channels applied to shape {shape:?}",
                self.channels()
            )));
        }
        let a = g.param(&self.gain);
        let b = g.param(&self.shift);
        let ax = g.mul(x, &a)?;
        let axb = g.add(&ax, &b)?;
        let gate = g.sigmoid(&axb);
        g.mul(x, &gate)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.shift]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.shift]
    }
}

/// Two 3x3 convolutions with an adaptive activation between and a skip
/// connection. The final convolution is zero-initialized, so the block is
/// the identity at initialization.
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub act: AdaptiveActivation,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new<R: Rng>(name: &str, channels: usize, rng: &mut R) -> ResidualBlock {
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            act: AdaptiveActivation::new(&format!("{name}.act"), channels),
            conv2: Conv2d::new(&format!("{name}.conv2"), channels, channels, 3, 1, 1, rng)
                .zero_init(),
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<G::V> {
        let h = self.conv1.forward(g, x)?;
        let h = self.act.forward(g, &h)?;
        let h = self.conv2.forward(g, &h)?;
        g.add(x, &h)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.act.params());
        p.extend(self.conv2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.act.params_mut());
        p.extend(self.conv2.params_mut());
        p
    }
}

/// Single-head attention over pooled key/value tokens, added residually to
/// the query feature map.
///
/// Keys and values are the `d x d`-average-pooled positions of `kv_feat`;
/// queries stay at full resolution. The output projection is
/// zero-initialized, making the block the identity at initialization.
pub struct AttentionBlock {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub downsample: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng>(name: &str, channels: usize, downsample: usize, rng: &mut R) -> AttentionBlock {
        AttentionBlock {
            wq: Param::new(format!("{name}.wq"), he_uniform(rng, &[channels, channels], channels)),
            wk: Param::new(format!("{name}.wk"), he_uniform(rng, &[channels, channels], channels)),
            wv: Param::new(format!("{name}.wv"), he_uniform(rng, &[channels, channels], channels)),
            wo: Param::new(format!("{name}.wo"), Tensor::zeros(&[channels, channels])),
            downsample,
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.value().shape()[0]
    }

    pub fn forward<G: Graph>(&self, g: &mut G, q_feat: &G::V, kv_feat: &G::V) -> Result<G::V> {
        Ok(self.forward_with_weights(g, q_feat, kv_feat)?.0)
    }

    /// Returns the block output and the `[HW, T]` attention weights (each
    /// row a convex combination over the pooled tokens).
    pub fn forward_with_weights<G: Graph>(
        &self,
        g: &mut G,
        q_feat: &G::V,
        kv_feat: &G::V,
    ) -> Result<(G::V, G::V)> {
        let c = self.channels();
        let q_shape = g.shape(q_feat);
        let kv_shape = g.shape(kv_feat);
        if q_shape.len() != 4 || kv_shape.len() != 4 || q_shape[0] != 1 || kv_shape[0] != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "attention expects [1,C,H,W] inputs, got {q_shape:?} and {kv_shape:?}"
            )));
        }
        if q_shape[1] != c || kv_shape[1] != c {
            return Err(TensorError::ShapeMismatch(format!(
                "attention over {c} channels applied to {q_shape:?} / {kv_shape:?}"
            )));
        }
        let (h, w) = (q_shape[2], q_shape[3]);
        let pooled = g.avg_pool2d(kv_feat, self.downsample)?;
        let q_tokens = to_tokens(g, q_feat, c, h * w)?;
        let t = g.shape(&pooled)[2] * g.shape(&pooled)[3];
        let kv_tokens = to_tokens(g, &pooled, c, t)?;

        let wq = g.param(&self.wq);
        let wk = g.param(&self.wk);
        let wv = g.param(&self.wv);
        let wo = g.param(&self.wo);
        let q = g.matmul(&q_tokens, &wq)?;
        let k = g.matmul(&kv_tokens, &wk)?;
        let v = g.matmul(&kv_tokens, &wv)?;
        let kt = g.permute(&k, &[1, 0])?;
        let scores = g.matmul(&q, &kt)?;
        let scores = g.scale(&scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax(&scores, 1)?;
        let mixed = g.matmul(&attn, &v)?;
        let projected = g.matmul(&mixed, &wo)?;
        let map = from_tokens(g, &projected, c, h, w)?;
        let out = g.add(q_feat, &map)?;
        Ok((out, attn))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

/// `[1, C, H, W]` -> `[H*W, C]` token matrix.
fn to_tokens<G: Graph>(g: &mut G, x: &G::V, c: usize, n: usize) -> Result<G::V> {
    let flat = g.reshape(x, &[c, n])?;
    g.permute(&flat, &[1, 0])
}

/// `[H*W, C]` -> `[1, C, H, W]`.
fn from_tokens<G: Graph>(g: &mut G, tokens: &G::V, c: usize, h: usize, w: usize) -> Result<G::V> {
    let t = g.permute(tokens, &[1, 0])?;
    g.reshape(&t, &[1, c, h, w])
}

/// Inverse of softplus, for bias initialization of scale heads.
pub fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Predicts a segment's (mu, sigma) from its conditioning tensor: two 3x3
/// conv layers with adaptive activations, then separate mu and raw-sigma
/// heads. Sigma is softplus-mapped and floored at `sigma_min`.
pub struct SegmentPredictor {
    pub conv1: Conv2d,
    pub act1: AdaptiveActivation,
    pub conv2: Conv2d,
    pub act2: AdaptiveActivation,
    pub mu_head: Conv2d,
    pub sigma_head: Conv2d,
    pub sigma_min: f64,
}

impl SegmentPredictor {
    pub fn new<R: Rng>(
        name: &str,
        cond_channels: usize,
        hidden: usize,
        out_channels: usize,
        sigma_min: f64,
        rng: &mut R,
    ) -> SegmentPredictor {
        SegmentPredictor {
            conv1: Conv2d::new(&format!("{name}.conv1"), cond_channels, hidden, 3, 1, 1, rng),
            act1: AdaptiveActivation::new(&format!("{name}.act1"), hidden),
            conv2: Conv2d::new(&format!("{name}.conv2"), hidden, hidden, 3, 1, 1, rng),
            act2: AdaptiveActivation::new(&format!("{name}.act2"), hidden),
            mu_head: Conv2d::new_head(&format!("{name}.mu"), hidden, out_channels, 3, 0.0, rng),
            sigma_head: Conv2d::new_head(
                &format!("{name}.sigma"),
                hidden,
                out_channels,
                3,
                softplus_inv(1.0),
                rng,
            ),
            sigma_min,
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, cond: &G::V) -> Result<(G::V, G::V)> {
        let h = self.conv1.forward(g, cond)?;
        let h = self.act1.forward(g, &h)?;
        let h = self.conv2.forward(g, &h)?;
        let h = self.act2.forward(g, &h)?;
        let mu = self.mu_head.forward(g, &h)?;
        let raw = self.sigma_head.forward(g, &h)?;
        let sp = g.softplus(&raw);
        let sigma = g.clamp_min(&sp, self.sigma_min);
        Ok((mu, sigma))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.act1.params());
        p.extend(self.conv2.params());
        p.extend(self.act2.params());
        p.extend(self.mu_head.params());
        p.extend(self.sigma_head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.act1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.act2.params_mut());
        p.extend(self.mu_head.params_mut());
        p.extend(self.sigma_head.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::EvalGraph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(11)
    }

    #[test]
    fn adaptive_activation_zero_gain_halves() {
        let mut act = AdaptiveActivation::new("t", 2);
        act.gain.set_value(Tensor::zeros(&[2]));
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![2.0, -4.0, 6.0, 0.0]);
        let mut g = EvalGraph::new();
        let y = act.forward(&mut g, &x).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0, 3.0, 0.0]);
    }

    #[test]
    fn adaptive_activation_zero_at_zero() {
        let act = AdaptiveActivation::new("t", 3);
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let mut g = EvalGraph::new();
        let y = act.forward(&mut g, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adaptive_activation_monotone_where_gating_allows() {
        // x * sigmoid(a*x + b) is monotone everywhere for a = 0 and, like
        // plain swish, monotone on x >= 0 for any a >= 0 (the a > 0 gate
        // introduces a small dip on the negative side).
        let mut g = EvalGraph::new();
        let check = |act: &AdaptiveActivation, lo: f64, g: &mut EvalGraph| {
            let xs: Vec<f64> = (0..=800).map(|i| lo + i as f64 * 0.01).collect();
            let n = xs.len();
            let x = Tensor::from_vec(&[1, 1, 1, n], xs);
            let y = act.forward(g, &x).unwrap();
            for w in y.data().windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "not monotone: {} then {}", w[0], w[1]);
            }
        };
        let mut flat = AdaptiveActivation::new("t", 1);
        flat.gain.set_value(Tensor::zeros(&[1]));
        flat.shift.set_value(Tensor::from_vec(&[1], vec![0.3]));
        check(&flat, -4.0, &mut g); // a = 0: monotone on all of [-4, 4]
        let swish = AdaptiveActivation::new("t", 1); // a = 1
        check(&swish, 0.0, &mut g); // monotone on [0, 8]
    }

    #[test]
    fn residual_block_is_identity_at_init() {
        let mut r = rng();
        let block = ResidualBlock::new("t", 4, &mut r);
        let x = Tensor::rand_uniform(&mut r, &[1, 4, 6, 6], -1.0, 1.0);
        let mut g = EvalGraph::new();
        let y = block.forward(&mut g, &x).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn attention_with_zero_output_projection_is_identity() {
        let mut r = rng();
        let attn = AttentionBlock::new("t", 4, 2, &mut r); // wo zero-init
        let q = Tensor::rand_uniform(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
        let kv = Tensor::rand_uniform(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
        let mut g = EvalGraph::new();
        let y = attn.forward(&mut g, &q, &kv).unwrap();
        assert!(y.bit_eq(&q));
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let mut r = rng();
        let attn = AttentionBlock::new("t", 4, 2, &mut r);
        let q = Tensor::rand_uniform(&mut r, &[1, 4, 8, 8], -1.0, 1.0);
        let kv = Tensor::rand_uniform(&mut r, &[1, 4, 8, 8], -1.0, 1.0);
        let mut g = EvalGraph::new();
        let (_, w) = attn.forward_with_weights(&mut g, &q, &kv).unwrap();
        assert_eq!(w.shape(), &[64, 16]);
        for row in w.data().chunks(16) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn attention_constant_kv_gives_position_independent_update() {
        let mut r = rng();
        let mut attn = AttentionBlock::new("t", 3, 2, &mut r);
        attn.wo
            .set_value(he_uniform(&mut r, &[3, 3], 3));
        let q = Tensor::rand_uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0);
        let kv = Tensor::full(&[1, 3, 4, 4], 0.7);
        let mut g = EvalGraph::new();
        let y = attn.forward(&mut g, &q, &kv).unwrap();
        // update = y - q must be the same at every position per channel
        let diff = crate::tensor::ops::sub(&y, &q).unwrap();
        for c in 0..3 {
            let plane = &diff.data()[c * 16..(c + 1) * 16];
            for &v in plane {
                assert!((v - plane[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_invariant_to_token_permutation() {
        // permuting pooled kv positions (here: whole pooling blocks of the
        // kv map) must leave the output unchanged
        let mut r = rng();
        let mut attn = AttentionBlock::new("t", 2, 2, &mut r);
        attn.wo.set_value(he_uniform(&mut r, &[2, 2], 2));
        let q = Tensor::rand_uniform(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
        let kv = Tensor::rand_uniform(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
        // swap the top-left and bottom-right 2x2 blocks in every channel
        let mut swapped = kv.data().to_vec();
        for c in 0..2 {
            let base = c * 16;
            for dy in 0..2 {
                for dx in 0..2 {
                    let a = base + dy * 4 + dx;
                    let b = base + (dy + 2) * 4 + (dx + 2);
                    swapped.swap(a, b);
                }
            }
        }
        let kv2 = Tensor::from_vec(&[1, 2, 4, 4], swapped);
        let mut g = EvalGraph::new();
        let y1 = attn.forward(&mut g, &q, &kv).unwrap();
        let y2 = attn.forward(&mut g, &q, &kv2).unwrap();
        assert!(y1.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn segment_predictor_shapes_and_sigma_floor() {
        let mut r = rng();
        let sp = SegmentPredictor::new("t", 6, 8, 3, 0.04, &mut r);
        let cond = Tensor::rand_uniform(&mut r, &[1, 6, 4, 4], -1.0, 1.0);
        let mut g = EvalGraph::new();
        let (mu, sigma) = sp.forward(&mut g, &cond).unwrap();
        assert_eq!(mu.shape(), &[1, 3, 4, 4]);
        assert_eq!(sigma.shape(), &[1, 3, 4, 4]);
        assert!(sigma.data().iter().all(|&s| s >= 0.04));
    }

    #[test]
    fn softplus_inv_is_inverse() {
        for y in [0.1, 1.0, 3.0] {
            let x = softplus_inv(y);
            assert!((crate::tensor::ops::softplus_scalar(x) - y).abs() < 1e-12);
        }
    }
}
