//! The auxiliary coarse network: image encoder, hyper path, segment-wise
//! parameter estimation for its own latent, and a decoder that emits the
//! multi-scale predicted features consumed by the main network.

use std::ops::Range;

use rand::Rng;

use crate::config::CodecConfig;
use crate::error::{Result, TensorError};
use crate::nn::{AdaptiveActivation, AttentionBlock, Conv2d, ConvTranspose2d, SegmentPredictor};
use crate::tensor::graph::{Graph, Param};

/// Predicted approximations of the image at scales 1/1, 1/2, 1/4, 1/16.
pub struct MultiScaleFeatures<V> {
    pub f1: V,
    pub f2: V,
    pub f4: V,
    pub f16: V,
}

pub struct AuxCoarseNet {
    enc_conv1: Conv2d,
    enc_act1: AdaptiveActivation,
    enc_conv2: Conv2d,
    enc_act2: AdaptiveActivation,
    enc_afp: AttentionBlock,
    enc_conv3: Conv2d,
    enc_act3: AdaptiveActivation,
    enc_conv4: Conv2d,

    hyper_enc_conv1: Conv2d,
    hyper_enc_act: AdaptiveActivation,
    hyper_enc_conv2: Conv2d,

    hyper_dec_up1: ConvTranspose2d,
    hyper_dec_act: AdaptiveActivation,
    hyper_dec_up2: ConvTranspose2d,

    pe: Vec<SegmentPredictor>,
    segments: Vec<Range<usize>>,

    dec_f16: Conv2d,
    dec_up1: ConvTranspose2d,
    dec_act1: AdaptiveActivation,
    dec_up2: ConvTranspose2d,
    dec_act2: AdaptiveActivation,
    dec_afp: AttentionBlock,
    dec_up3: ConvTranspose2d,
    dec_act3: AdaptiveActivation,
    dec_up4: ConvTranspose2d,
    dec_act4: AdaptiveActivation,

    padding_multiple: usize,
}

impl AuxCoarseNet {
    pub fn new<R: Rng>(cfg: &CodecConfig, rng: &mut R) -> AuxCoarseNet {
        let [e1, e2, e3] = cfg.aux_enc_channels;
        let m = cfg.aux_latent_channels;
        let h = cfg.aux_hyper_channels;
        let [c1, c2, c4, c16] = cfg.feature_channels;
        let d = cfg.attn_downsample;
        let segments = cfg.aux_segments();
        let pe = segments
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                let prev: usize = segments[..i].iter().map(|s| s.len()).sum();
                SegmentPredictor::new(
                    &format!("aux.pe{i}"),
                    h + prev,
                    cfg.pe_hidden_channels,
                    seg.len(),
                    cfg.sigma_min,
                    rng,
                )
            })
            .collect();
        AuxCoarseNet {
            enc_conv1: Conv2d::new("aux.enc.conv1", 3, e1, 4, 2, 1, rng),
            enc_act1: AdaptiveActivation::new("aux.enc.act1", e1),
            enc_conv2: Conv2d::new("aux.enc.conv2", e1, e2, 4, 2, 1, rng),
            enc_act2: AdaptiveActivation::new("aux.enc.act2", e2),
            enc_afp: AttentionBlock::new("aux.enc.afp", e2, d, rng),
            enc_conv3: Conv2d::new("aux.enc.conv3", e2, e3, 4, 2, 1, rng),
            enc_act3: AdaptiveActivation::new("aux.enc.act3", e3),
            enc_conv4: Conv2d::new("aux.enc.conv4", e3, m, 4, 2, 1, rng),
            hyper_enc_conv1: Conv2d::new("aux.henc.conv1", m, h, 4, 2, 1, rng),
            hyper_enc_act: AdaptiveActivation::new("aux.henc.act", h),
            hyper_enc_conv2: Conv2d::new("aux.henc.conv2", h, h, 4, 2, 1, rng),
            hyper_dec_up1: ConvTranspose2d::new("aux.hdec.up1", h, h, 4, 2, 1, rng),
            hyper_dec_act: AdaptiveActivation::new("aux.hdec.act", h),
            hyper_dec_up2: ConvTranspose2d::new("aux.hdec.up2", h, h, 4, 2, 1, rng),
            pe,
            segments,
            dec_f16: Conv2d::new("aux.dec.f16", m, c16, 3, 1, 1, rng),
            dec_up1: ConvTranspose2d::new("aux.dec.up1", m, e3, 4, 2, 1, rng),
            dec_act1: AdaptiveActivation::new("aux.dec.act1", e3),
            dec_up2: ConvTranspose2d::new("aux.dec.up2", e3, c4, 4, 2, 1, rng),
            dec_act2: AdaptiveActivation::new("aux.dec.act2", c4),
            dec_afp: AttentionBlock::new("aux.dec.afp", c4, d, rng),
            dec_up3: ConvTranspose2d::new("aux.dec.up3", c4, c2, 4, 2, 1, rng),
            dec_act3: AdaptiveActivation::new("aux.dec.act3", c2),
            dec_up4: ConvTranspose2d::new("aux.dec.up4", c2, c1, 4, 2, 1, rng),
            dec_act4: AdaptiveActivation::new("aux.dec.act4", c1),
            padding_multiple: cfg.padding_multiple,
        }
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    fn check_padded<G: Graph>(&self, g: &G, x: &G::V) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "expected [1,3,H,W] image tensor, got {s:?}"
            )));
        }
        if s[2] % self.padding_multiple != 0 || s[3] % self.padding_multiple != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "unpadded input: {}x{} is not a multiple of {}",
                s[2], s[3], self.padding_multiple
            )));
        }
        Ok(())
    }

    /// Image to auxiliary latent at 1/16 scale.
    pub fn encode<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<G::V> {
        self.check_padded(g, x)?;
        let t = self.enc_conv1.forward(g, x)?;
        let t = self.enc_act1.forward(g, &t)?;
        let t = self.enc_conv2.forward(g, &t)?;
        let t = self.enc_act2.forward(g, &t)?;
        let t = self.enc_afp.forward(g, &t, &t)?;
        let t = self.enc_conv3.forward(g, &t)?;
        let t = self.enc_act3.forward(g, &t)?;
        self.enc_conv4.forward(g, &t)
    }

    /// Latent to hyper-latent at 1/64 scale.
    pub fn hyper_encode<G: Graph>(&self, g: &mut G, y: &G::V) -> Result<G::V> {
        let t = self.hyper_enc_conv1.forward(g, y)?;
        let t = self.hyper_enc_act.forward(g, &t)?;
        self.hyper_enc_conv2.forward(g, &t)
    }

    /// Quantized hyper-latent back to the latent grid (the parameter
    /// estimators' conditioning input).
    pub fn hyper_decode<G: Graph>(&self, g: &mut G, z_hat: &G::V) -> Result<G::V> {
        let t = self.hyper_dec_up1.forward(g, z_hat)?;
        let t = self.hyper_dec_act.forward(g, &t)?;
        self.hyper_dec_up2.forward(g, &t)
    }

    /// (mu_i, sigma_i) for segment `i`, conditioned on the hyper output and
    /// the already-reconstructed segments `< i` only. Future segments are
    /// not inputs at all, which enforces the coding causality contract
    /// structurally.
    pub fn predict_segment<G: Graph>(
        &self,
        g: &mut G,
        i: usize,
        prev: &[G::V],
        z_apm: &G::V,
    ) -> Result<(G::V, G::V)> {
        if i >= self.segments.len() {
            return Err(TensorError::Invalid(format!(
                "segment index {i} out of range ({} segments)",
                self.segments.len()
            )));
        }
        if prev.len() != i {
            return Err(TensorError::Invalid(format!(
                "out-of-order segment invocation: predicting {i} with {} prior segments",
                prev.len()
            )));
        }
        let mut parts = vec![z_apm.clone()];
        parts.extend(prev.iter().cloned());
        let cond = g.concat(&parts, 1)?;
        self.pe[i].forward(g, &cond)
    }

    /// Reconstructed latent to the four predicted feature maps.
    pub fn decode<G: Graph>(&self, g: &mut G, y_hat: &G::V) -> Result<MultiScaleFeatures<G::V>> {
        let f16 = self.dec_f16.forward(g, y_hat)?;
        let t = self.dec_up1.forward(g, y_hat)?;
        let t = self.dec_act1.forward(g, &t)?;
        let t = self.dec_up2.forward(g, &t)?;
        let t = self.dec_act2.forward(g, &t)?;
        let f4 = self.dec_afp.forward(g, &t, &t)?;
        let t = self.dec_up3.forward(g, &f4)?;
        let f2 = self.dec_act3.forward(g, &t)?;
        let t = self.dec_up4.forward(g, &f2)?;
        let f1 = self.dec_act4.forward(g, &t)?;
        Ok(MultiScaleFeatures { f1, f2, f4, f16 })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        p.extend(self.enc_conv1.params());
        p.extend(self.enc_act1.params());
        p.extend(self.enc_conv2.params());
        p.extend(self.enc_act2.params());
        p.extend(self.enc_afp.params());
        p.extend(self.enc_conv3.params());
        p.extend(self.enc_act3.params());
        p.extend(self.enc_conv4.params());
        p.extend(self.hyper_enc_conv1.params());
        p.extend(self.hyper_enc_act.params());
        p.extend(self.hyper_enc_conv2.params());
        p.extend(self.hyper_dec_up1.params());
        p.extend(self.hyper_dec_act.params());
        p.extend(self.hyper_dec_up2.params());
        for sp in &self.pe {
            p.extend(sp.params());
        }
        p.extend(self.dec_f16.params());
        p.extend(self.dec_up1.params());
        p.extend(self.dec_act1.params());
        p.extend(self.dec_up2.params());
        p.extend(self.dec_act2.params());
        p.extend(self.dec_afp.params());
        p.extend(self.dec_up3.params());
        p.extend(self.dec_act3.params());
        p.extend(self.dec_up4.params());
        p.extend(self.dec_act4.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        p.extend(self.enc_conv1.params_mut());
        p.extend(self.enc_act1.params_mut());
        p.extend(self.enc_conv2.params_mut());
        p.extend(self.enc_act2.params_mut());
        p.extend(self.enc_afp.params_mut());
        p.extend(self.enc_conv3.params_mut());
        p.extend(self.enc_act3.params_mut());
        p.extend(self.enc_conv4.params_mut());
        p.extend(self.hyper_enc_conv1.params_mut());
        p.extend(self.hyper_enc_act.params_mut());
        p.extend(self.hyper_enc_conv2.params_mut());
        p.extend(self.hyper_dec_up1.params_mut());
        p.extend(self.hyper_dec_act.params_mut());
        p.extend(self.hyper_dec_up2.params_mut());
        for sp in &mut self.pe {
            p.extend(sp.params_mut());
        }
        p.extend(self.dec_f16.params_mut());
        p.extend(self.dec_up1.params_mut());
        p.extend(self.dec_act1.params_mut());
        p.extend(self.dec_up2.params_mut());
        p.extend(self.dec_act2.params_mut());
        p.extend(self.dec_afp.params_mut());
        p.extend(self.dec_up3.params_mut());
        p.extend(self.dec_act3.params_mut());
        p.extend(self.dec_up4.params_mut());
        p.extend(self.dec_act4.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::EvalGraph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn net() -> AuxCoarseNet {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        AuxCoarseNet::new(&CodecConfig::default(), &mut rng)
    }

    #[test]
    fn latent_shapes_for_64() {
        let net = net();
        let mut g = EvalGraph::new();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let x = Tensor::rand_uniform(&mut rng, &[1, 3, 64, 64], 0.0, 1.0);
        let y = net.encode(&mut g, &x).unwrap();
        assert_eq!(y.shape(), &[1, 32, 4, 4]);
        let z = net.hyper_encode(&mut g, &y).unwrap();
        assert_eq!(z.shape(), &[1, 32, 1, 1]);
        let apm = net.hyper_decode(&mut g, &z).unwrap();
        assert_eq!(apm.shape(), &[1, 32, 4, 4]);
    }

    #[test]
    fn rejects_unpadded_input() {
        let net = net();
        let mut g = EvalGraph::new();
        let x = Tensor::zeros(&[1, 3, 60, 64]);
        assert!(net.encode(&mut g, &x).is_err());
    }

    #[test]
    fn zero_image_zero_biases_zero_latents() {
        let mut net = net();
        for p in net.params_mut() {
            if p.name().ends_with(".bias") || p.name().ends_with(".shift") {
                let sh = p.value().shape().to_vec();
                p.set_value(Tensor::zeros(&sh));
            }
        }
        let mut g = EvalGraph::new();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let y = net.encode(&mut g, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let z = net.hyper_encode(&mut g, &y).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let feats = net.decode(&mut g, &y).unwrap();
        for f in [&feats.f1, &feats.f2, &feats.f4, &feats.f16] {
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = net();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let x = Tensor::rand_uniform(&mut rng, &[1, 3, 64, 64], 0.0, 1.0);
        let mut g = EvalGraph::new();
        let y1 = net.encode(&mut g, &x).unwrap();
        let y2 = net.encode(&mut g, &x).unwrap();
        assert!(y1.bit_eq(&y2));
        let f1 = net.decode(&mut g, &y1).unwrap();
        let f2 = net.decode(&mut g, &y1).unwrap();
        assert!(f1.f1.bit_eq(&f2.f1) && f1.f16.bit_eq(&f2.f16));
    }

    #[test]
    fn feature_shape_contract_for_64() {
        let net = net();
        let mut g = EvalGraph::new();
        let y_hat = Tensor::zeros(&[1, 32, 4, 4]);
        let f = net.decode(&mut g, &y_hat).unwrap();
        assert_eq!(f.f1.shape(), &[1, 16, 64, 64]);
        assert_eq!(f.f2.shape(), &[1, 32, 32, 32]);
        assert_eq!(f.f4.shape(), &[1, 48, 16, 16]);
        assert_eq!(f.f16.shape(), &[1, 32, 4, 4]);
    }

    #[test]
    fn first_segment_ignores_latent_perturbations() {
        let net = net();
        let mut g = EvalGraph::new();
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let z_apm = Tensor::rand_uniform(&mut rng, &[1, 32, 4, 4], -1.0, 1.0);
        let (mu0, s0) = net.predict_segment(&mut g, 0, &[], &z_apm).unwrap();
        // i = 0 is a function of z_apm alone; there are no latent inputs to
        // perturb, so a repeat call is bit-identical
        let (mu0b, s0b) = net.predict_segment(&mut g, 0, &[], &z_apm).unwrap();
        assert!(mu0.bit_eq(&mu0b) && s0.bit_eq(&s0b));
        assert_eq!(mu0.shape(), &[1, 4, 4, 4]); // 32 channels / 8 segments
    }

    #[test]
    fn out_of_order_segment_invocation_rejected() {
        let net = net();
        let mut g = EvalGraph::new();
        let z_apm = Tensor::zeros(&[1, 32, 4, 4]);
        assert!(net.predict_segment(&mut g, 1, &[], &z_apm).is_err());
        assert!(net.predict_segment(&mut g, 99, &[], &z_apm).is_err());
    }

    #[test]
    fn segment_count_follows_n_p() {
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let cfg = CodecConfig::default();
        assert_eq!(cfg.n_p, 4);
        let net = AuxCoarseNet::new(&cfg, &mut rng);
        assert_eq!(net.segments().len(), 8);
        let total: usize = net.segments().iter().map(|s| s.len()).sum();
        assert_eq!(total, cfg.aux_latent_channels);
    }
}
