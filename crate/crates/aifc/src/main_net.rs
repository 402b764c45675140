//! The main network: a residual encoder conditioned on the multi-scale
//! predictions, the Context Junction feature mixer, segment-wise parameter
//! estimation that also sees the 1/16-scale prediction, and the image
//! reconstruction decoder.

use std::ops::Range;

use rand::Rng;

use crate::aux_net::MultiScaleFeatures;
use crate::config::CodecConfig;
use crate::error::{Result, TensorError};
use crate::nn::{
    AdaptiveActivation, AttentionBlock, Conv2d, ConvTranspose2d, ResidualBlock, SegmentPredictor,
};
use crate::tensor::graph::{Graph, Param};

/// Two-stage feature mixer used at the 1/4 scale.
///
/// Refiner: `combined = conv(concat(main, aux))`, then the auxiliary
/// feature is refined by cross-attention with `combined` as the query.
/// Mixer: `conv(concat(main, refined))` plus a residual self-attention
/// branch for global correlation. Whether the mix subtracts (encoder) or
/// combines (decoder) is learned, not literal; encoder and decoder each own
/// an instance with separate weights.
pub struct ContextJunction {
    pub refine_conv: Conv2d,
    pub refine_attn: AttentionBlock,
    pub mix_conv: Conv2d,
    pub mix_attn: AttentionBlock,
}

impl ContextJunction {
    pub fn new<R: Rng>(
        name: &str,
        main_channels: usize,
        aux_channels: usize,
        out_channels: usize,
        downsample: usize,
        rng: &mut R,
    ) -> ContextJunction {
        ContextJunction {
            refine_conv: Conv2d::new(
                &format!("{name}.refine_conv"),
                main_channels + aux_channels,
                aux_channels,
                3,
                1,
                1,
                rng,
            ),
            refine_attn: AttentionBlock::new(
                &format!("{name}.refine_attn"),
                aux_channels,
                downsample,
                rng,
            ),
            mix_conv: Conv2d::new(
                &format!("{name}.mix_conv"),
                main_channels + aux_channels,
                out_channels,
                3,
                1,
                1,
                rng,
            ),
            mix_attn: AttentionBlock::new(&format!("{name}.mix_attn"), out_channels, downsample, rng),
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, main_feat: &G::V, aux_feat: &G::V) -> Result<G::V> {
        let (ms, as_) = (g.shape(main_feat), g.shape(aux_feat));
        if ms.len() != 4 || as_.len() != 4 || ms[2..] != as_[2..] {
            return Err(TensorError::ShapeMismatch(format!(
                "context junction needs equal spatial scale, got {ms:?} and {as_:?}"
            )));
        }
        let stacked = g.concat(&[main_feat.clone(), aux_feat.clone()], 1)?;
        let combined = self.refine_conv.forward(g, &stacked)?;
        let refined = self.refine_attn.forward(g, &combined, aux_feat)?;
        let mixed_in = g.concat(&[main_feat.clone(), refined], 1)?;
        let local = self.mix_conv.forward(g, &mixed_in)?;
        self.mix_attn.forward(g, &local, &local)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.refine_conv.params();
        p.extend(self.refine_attn.params());
        p.extend(self.mix_conv.params());
        p.extend(self.mix_attn.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.refine_conv.params_mut();
        p.extend(self.refine_attn.params_mut());
        p.extend(self.mix_conv.params_mut());
        p.extend(self.mix_attn.params_mut());
        p
    }
}

pub struct MainNet {
    enc_conv0: Conv2d,
    enc_act0: AdaptiveActivation,
    enc_conv1: Conv2d,
    enc_act1: AdaptiveActivation,
    enc_conv2: Conv2d,
    enc_cj: ContextJunction,
    enc_conv3: Conv2d,
    enc_act3: AdaptiveActivation,
    enc_conv4: Conv2d,

    hyper_enc_conv1: Conv2d,
    hyper_enc_act: AdaptiveActivation,
    hyper_enc_conv2: Conv2d,

    hyper_dec_up1: ConvTranspose2d,
    hyper_dec_act: AdaptiveActivation,
    hyper_dec_up2: ConvTranspose2d,

    ape: Vec<SegmentPredictor>,
    segments: Vec<Range<usize>>,

    dec_up1: ConvTranspose2d,
    dec_act1: AdaptiveActivation,
    dec_up2: ConvTranspose2d,
    dec_cj: ContextJunction,
    dec_up3: ConvTranspose2d,
    dec_act3: AdaptiveActivation,
    dec_up4: ConvTranspose2d,
    dec_res: ResidualBlock,
    dec_out: Conv2d,
}

impl MainNet {
    pub fn new<R: Rng>(cfg: &CodecConfig, rng: &mut R) -> MainNet {
        let [e1, e2, e3] = cfg.main_enc_channels;
        let head = cfg.main_head_channels;
        let m = cfg.main_latent_channels;
        let h = cfg.main_hyper_channels;
        let [c1, c2, c4, c16] = cfg.feature_channels;
        let d = cfg.attn_downsample;
        let segments = cfg.main_segments();
        let ape = segments
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                let prev: usize = segments[..i].iter().map(|s| s.len()).sum();
                SegmentPredictor::new(
                    &format!("main.ape{i}"),
                    h + c16 + prev,
                    cfg.pe_hidden_channels,
                    seg.len(),
                    cfg.sigma_min,
                    rng,
                )
            })
            .collect();
        MainNet {
            enc_conv0: Conv2d::new("main.enc.conv0", 3, head, 3, 1, 1, rng),
            enc_act0: AdaptiveActivation::new("main.enc.act0", head + c1),
            enc_conv1: Conv2d::new("main.enc.conv1", head + c1, e1, 4, 2, 1, rng),
            enc_act1: AdaptiveActivation::new("main.enc.act1", e1 + c2),
            enc_conv2: Conv2d::new("main.enc.conv2", e1 + c2, e2, 4, 2, 1, rng),
            enc_cj: ContextJunction::new("main.enc.cj", e2, c4, e2, d, rng),
            enc_conv3: Conv2d::new("main.enc.conv3", e2, e3, 4, 2, 1, rng),
            enc_act3: AdaptiveActivation::new("main.enc.act3", e3),
            enc_conv4: Conv2d::new("main.enc.conv4", e3, m, 4, 2, 1, rng),
            hyper_enc_conv1: Conv2d::new("main.henc.conv1", m, h, 4, 2, 1, rng),
            hyper_enc_act: AdaptiveActivation::new("main.henc.act", h),
            hyper_enc_conv2: Conv2d::new("main.henc.conv2", h, h, 4, 2, 1, rng),
            hyper_dec_up1: ConvTranspose2d::new("main.hdec.up1", h, h, 4, 2, 1, rng),
            hyper_dec_act: AdaptiveActivation::new("main.hdec.act", h),
            hyper_dec_up2: ConvTranspose2d::new("main.hdec.up2", h, h, 4, 2, 1, rng),
            ape,
            segments,
            dec_up1: ConvTranspose2d::new("main.dec.up1", m, e3, 4, 2, 1, rng),
            dec_act1: AdaptiveActivation::new("main.dec.act1", e3),
            dec_up2: ConvTranspose2d::new("main.dec.up2", e3, e2, 4, 2, 1, rng),
            dec_cj: ContextJunction::new("main.dec.cj", e2, c4, e2, d, rng),
            dec_up3: ConvTranspose2d::new("main.dec.up3", e2, e1, 4, 2, 1, rng),
            dec_act3: AdaptiveActivation::new("main.dec.act3", e1 + c2),
            dec_up4: ConvTranspose2d::new("main.dec.up4", e1 + c2, head, 4, 2, 1, rng),
            dec_res: ResidualBlock::new("main.dec.res", head + c1, rng),
            dec_out: Conv2d::new("main.dec.out", head + c1, 3, 3, 1, 1, rng),
        }
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    /// Image plus predicted features to the main latent at 1/16 scale.
    ///
    /// At full and half resolution the prediction is concatenated after a
    /// convolution and gated by the adaptive activation; at 1/4 the Context
    /// Junction extracts the feature residual.
    pub fn encode<G: Graph>(
        &self,
        g: &mut G,
        x: &G::V,
        feats: &MultiScaleFeatures<G::V>,
    ) -> Result<G::V> {
        let t = self.enc_conv0.forward(g, x)?;
        let t = g.concat(&[t, feats.f1.clone()], 1)?;
        let t = self.enc_act0.forward(g, &t)?;
        let t = self.enc_conv1.forward(g, &t)?;
        let t = g.concat(&[t, feats.f2.clone()], 1)?;
        let t = self.enc_act1.forward(g, &t)?;
        let t = self.enc_conv2.forward(g, &t)?;
        let t = self.enc_cj.forward(g, &t, &feats.f4)?;
        let t = self.enc_conv3.forward(g, &t)?;
        let t = self.enc_act3.forward(g, &t)?;
        self.enc_conv4.forward(g, &t)
    }

    pub fn hyper_encode<G: Graph>(&self, g: &mut G, y: &G::V) -> Result<G::V> {
        let t = self.hyper_enc_conv1.forward(g, y)?;
        let t = self.hyper_enc_act.forward(g, &t)?;
        self.hyper_enc_conv2.forward(g, &t)
    }

    pub fn hyper_decode<G: Graph>(&self, g: &mut G, z_hat: &G::V) -> Result<G::V> {
        let t = self.hyper_dec_up1.forward(g, z_hat)?;
        let t = self.hyper_dec_act.forward(g, &t)?;
        self.hyper_dec_up2.forward(g, &t)
    }

    /// (mu_i, sigma_i) for main segment `i`: conditioned on the hyper
    /// output, the 1/16-scale predicted feature, and reconstructed segments
    /// `< i`.
    pub fn predict_segment<G: Graph>(
        &self,
        g: &mut G,
        i: usize,
        prev: &[G::V],
        z_pm: &G::V,
        f16: &G::V,
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
        let zs = g.shape(z_pm);
        let fs = g.shape(f16);
        if zs[2..] != fs[2..] {
            return Err(TensorError::ShapeMismatch(format!(
                "prediction feature misaligned with latent grid: {fs:?} vs {zs:?}"
            )));
        }
        let mut parts = vec![z_pm.clone(), f16.clone()];
        parts.extend(prev.iter().cloned());
        let cond = g.concat(&parts, 1)?;
        self.ape[i].forward(g, &cond)
    }

    /// Reconstructed latent plus predicted features to the image, not yet
    /// clamped (the container clamps to [0,1] before byte conversion so the
    /// training graph keeps gradients).
    pub fn decode<G: Graph>(
        &self,
        g: &mut G,
        y_hat: &G::V,
        feats: &MultiScaleFeatures<G::V>,
    ) -> Result<G::V> {
        let t = self.dec_up1.forward(g, y_hat)?;
        let t = self.dec_act1.forward(g, &t)?;
        let t = self.dec_up2.forward(g, &t)?;
        let t = self.dec_cj.forward(g, &t, &feats.f4)?;
        let t = self.dec_up3.forward(g, &t)?;
        let t = g.concat(&[t, feats.f2.clone()], 1)?;
        let t = self.dec_act3.forward(g, &t)?;
        let t = self.dec_up4.forward(g, &t)?;
        let t = g.concat(&[t, feats.f1.clone()], 1)?;
        let t = self.dec_res.forward(g, &t)?;
        self.dec_out.forward(g, &t)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        p.extend(self.enc_conv0.params());
        p.extend(self.enc_act0.params());
        p.extend(self.enc_conv1.params());
        p.extend(self.enc_act1.params());
        p.extend(self.enc_conv2.params());
        p.extend(self.enc_cj.params());
        p.extend(self.enc_conv3.params());
        p.extend(self.enc_act3.params());
        p.extend(self.enc_conv4.params());
        p.extend(self.hyper_enc_conv1.params());
        p.extend(self.hyper_enc_act.params());
        p.extend(self.hyper_enc_conv2.params());
        p.extend(self.hyper_dec_up1.params());
        p.extend(self.hyper_dec_act.params());
        p.extend(self.hyper_dec_up2.params());
        for sp in &self.ape {
            p.extend(sp.params());
        }
        p.extend(self.dec_up1.params());
        p.extend(self.dec_act1.params());
        p.extend(self.dec_up2.params());
        p.extend(self.dec_cj.params());
        p.extend(self.dec_up3.params());
        p.extend(self.dec_act3.params());
        p.extend(self.dec_up4.params());
        p.extend(self.dec_res.params());
        p.extend(self.dec_out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        p.extend(self.enc_conv0.params_mut());
        p.extend(self.enc_act0.params_mut());
        p.extend(self.enc_conv1.params_mut());
        p.extend(self.enc_act1.params_mut());
        p.extend(self.enc_conv2.params_mut());
        p.extend(self.enc_cj.params_mut());
        p.extend(self.enc_conv3.params_mut());
        p.extend(self.enc_act3.params_mut());
        p.extend(self.enc_conv4.params_mut());
        p.extend(self.hyper_enc_conv1.params_mut());
        p.extend(self.hyper_enc_act.params_mut());
        p.extend(self.hyper_enc_conv2.params_mut());
        p.extend(self.hyper_dec_up1.params_mut());
        p.extend(self.hyper_dec_act.params_mut());
        p.extend(self.hyper_dec_up2.params_mut());
        for sp in &mut self.ape {
            p.extend(sp.params_mut());
        }
        p.extend(self.dec_up1.params_mut());
        p.extend(self.dec_act1.params_mut());
        p.extend(self.dec_up2.params_mut());
        p.extend(self.dec_cj.params_mut());
        p.extend(self.dec_up3.params_mut());
        p.extend(self.dec_act3.params_mut());
        p.extend(self.dec_up4.params_mut());
        p.extend(self.dec_res.params_mut());
        p.extend(self.dec_out.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aux_net::AuxCoarseNet;
    use crate::tensor::graph::EvalGraph;
    use crate::tensor::{ops, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn nets() -> (AuxCoarseNet, MainNet, CodecConfig) {
        let cfg = CodecConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(50);
        let aux = AuxCoarseNet::new(&cfg, &mut rng);
        let main = MainNet::new(&cfg, &mut rng);
        (aux, main, cfg)
    }

    fn random_feats(rng: &mut ChaCha12Rng, cfg: &CodecConfig) -> MultiScaleFeatures<Tensor> {
        let [c1, c2, c4, c16] = cfg.feature_channels;
        MultiScaleFeatures {
            f1: Tensor::rand_uniform(rng, &[1, c1, 64, 64], -1.0, 1.0),
            f2: Tensor::rand_uniform(rng, &[1, c2, 32, 32], -1.0, 1.0),
            f4: Tensor::rand_uniform(rng, &[1, c4, 16, 16], -1.0, 1.0),
            f16: Tensor::rand_uniform(rng, &[1, c16, 4, 4], -1.0, 1.0),
        }
    }

    #[test]
    fn shape_contract_for_64() {
        let (_, main, cfg) = nets();
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let feats = random_feats(&mut rng, &cfg);
        let x = Tensor::rand_uniform(&mut rng, &[1, 3, 64, 64], 0.0, 1.0);
        let mut g = EvalGraph::new();
        let y = main.encode(&mut g, &x, &feats).unwrap();
        assert_eq!(y.shape(), &[1, 48, 4, 4]);
        let z = main.hyper_encode(&mut g, &y).unwrap();
        assert_eq!(z.shape(), &[1, 32, 1, 1]);
        let x_hat = main.decode(&mut g, &y, &feats).unwrap();
        assert_eq!(x_hat.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn determinism() {
        let (_, main, cfg) = nets();
        let mut rng = ChaCha12Rng::seed_from_u64(52);
        let feats = random_feats(&mut rng, &cfg);
        let x = Tensor::rand_uniform(&mut rng, &[1, 3, 64, 64], 0.0, 1.0);
        let mut g = EvalGraph::new();
        let y1 = main.encode(&mut g, &x, &feats).unwrap();
        let y2 = main.encode(&mut g, &x, &feats).unwrap();
        assert!(y1.bit_eq(&y2));
    }

    #[test]
    fn context_junction_output_shape_matches_main() {
        let (_, main, cfg) = nets();
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let m = Tensor::rand_uniform(&mut rng, &[1, cfg.main_enc_channels[1], 16, 16], -1.0, 1.0);
        let a = Tensor::rand_uniform(&mut rng, &[1, cfg.feature_channels[2], 16, 16], -1.0, 1.0);
        let mut g = EvalGraph::new();
        let out = main.enc_cj.forward(&mut g, &m, &a).unwrap();
        assert_eq!(out.shape(), m.shape());
    }

    #[test]
    fn context_junction_rejects_scale_mismatch() {
        let (_, main, cfg) = nets();
        let m = Tensor::zeros(&[1, cfg.main_enc_channels[1], 16, 16]);
        let a = Tensor::zeros(&[1, cfg.feature_channels[2], 8, 8]);
        let mut g = EvalGraph::new();
        assert!(main.enc_cj.forward(&mut g, &m, &a).is_err());
    }

    #[test]
    fn context_junction_zero_aux_reduces_to_conv_path() {
        // with aux features zero and both attention outputs zero-initialized
        // (the default), the junction is exactly the local conv path applied
        // to (main, refined-from-main-alone)
        let cfg = CodecConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(54);
        let cj = ContextJunction::new("t", 8, 6, 8, 2, &mut rng);
        let m = Tensor::rand_uniform(&mut rng, &[1, 8, 8, 8], -1.0, 1.0);
        let zero_aux = Tensor::zeros(&[1, 6, 8, 8]);
        let mut g = EvalGraph::new();
        let out = cj.forward(&mut g, &m, &zero_aux).unwrap();
        // reproduce the conv path by hand
        let stacked = ops::concat(&[&m, &zero_aux], 1).unwrap();
        let combined = cj.refine_conv.forward(&mut g, &stacked).unwrap();
        let mixed_in = ops::concat(&[&m, &combined], 1).unwrap();
        let local = cj.mix_conv.forward(&mut g, &mixed_in).unwrap();
        assert!(out.bit_eq(&local));
        let _ = cfg;
    }

    #[test]
    fn exact_subtraction_junction_cancels_matching_features() {
        // build a junction wired for literal subtraction: refiner passes the
        // aux block through, mixer computes main - refined; with aux equal
        // to the main feature the output vanishes, against a zero-aux
        // baseline with the same weights
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let c = 5usize;
        let mut cj = ContextJunction::new("t", c, c, c, 2, &mut rng);
        // refine_conv: select the aux half of concat(main, aux)
        let mut w = vec![0.0; c * (2 * c) * 9];
        for o in 0..c {
            let ci = c + o; // aux channel
            w[(o * 2 * c + ci) * 9 + 4] = 1.0; // center tap
        }
        cj.refine_conv
            .weight
            .set_value(Tensor::from_vec(&[c, 2 * c, 3, 3], w));
        cj.refine_conv.bias.set_value(Tensor::zeros(&[c]));
        // mix_conv: main - refined
        let mut w = vec![0.0; c * (2 * c) * 9];
        for o in 0..c {
            w[(o * 2 * c + o) * 9 + 4] = 1.0; // + main
            w[(o * 2 * c + c + o) * 9 + 4] = -1.0; // - refined aux
        }
        cj.mix_conv
            .weight
            .set_value(Tensor::from_vec(&[c, 2 * c, 3, 3], w));
        cj.mix_conv.bias.set_value(Tensor::zeros(&[c]));

        let m = Tensor::rand_uniform(&mut rng, &[1, c, 8, 8], -1.0, 1.0);
        let mut g = EvalGraph::new();
        let matched = cj.forward(&mut g, &m, &m).unwrap();
        let baseline = cj.forward(&mut g, &m, &Tensor::zeros(&[1, c, 8, 8])).unwrap();
        let ratio = matched.sq_norm() / baseline.sq_norm();
        assert!(ratio < 1e-20, "energy ratio {ratio}");
    }

    #[test]
    fn ape_segment_count_and_causality_shape() {
        let (_, main, cfg) = nets();
        assert_eq!(main.segments().len(), cfg.n_p);
        let total: usize = main.segments().iter().map(|s| s.len()).sum();
        assert_eq!(total, cfg.main_latent_channels);
        let mut g = EvalGraph::new();
        let mut rng = ChaCha12Rng::seed_from_u64(56);
        let z_pm = Tensor::rand_uniform(&mut rng, &[1, 32, 4, 4], -1.0, 1.0);
        let f16 = Tensor::rand_uniform(&mut rng, &[1, 32, 4, 4], -1.0, 1.0);
        let (mu, sigma) = main.predict_segment(&mut g, 0, &[], &z_pm, &f16).unwrap();
        assert_eq!(mu.shape(), &[1, 12, 4, 4]);
        assert_eq!(sigma.shape(), &[1, 12, 4, 4]);
    }

    #[test]
    fn ape_conditions_on_prediction_feature() {
        // perturbing f16 must change (mu, sigma) for every segment
        let (_, main, _) = nets();
        let mut g = EvalGraph::new();
        let mut rng = ChaCha12Rng::seed_from_u64(57);
        let z_pm = Tensor::rand_uniform(&mut rng, &[1, 32, 4, 4], -1.0, 1.0);
        let f16 = Tensor::rand_uniform(&mut rng, &[1, 32, 4, 4], -1.0, 1.0);
        let f16b = ops::add_scalar(&f16, 0.25);
        let mut prev: Vec<Tensor> = Vec::new();
        for i in 0..main.segments().len() {
            let (mu_a, s_a) = main.predict_segment(&mut g, i, &prev, &z_pm, &f16).unwrap();
            let (mu_b, s_b) = main.predict_segment(&mut g, i, &prev, &z_pm, &f16b).unwrap();
            assert!(!mu_a.bit_eq(&mu_b), "segment {i} mu ignores f16");
            assert!(!s_a.bit_eq(&s_b), "segment {i} sigma ignores f16");
            let seg = &main.segments()[i];
            prev.push(Tensor::rand_uniform(
                &mut rng,
                &[1, seg.len(), 4, 4],
                -1.0,
                1.0,
            ));
        }
    }

    #[test]
    fn ape_rejects_misaligned_f16() {
        let (_, main, _) = nets();
        let mut g = EvalGraph::new();
        let z_pm = Tensor::zeros(&[1, 32, 4, 4]);
        let f16 = Tensor::zeros(&[1, 32, 8, 8]);
        assert!(main.predict_segment(&mut g, 0, &[], &z_pm, &f16).is_err());
    }
}
