//! End-to-end encode/decode pipeline tying the networks, entropy models,
//! range coder and container together.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::aux_net::{AuxCoarseNet, MultiScaleFeatures};
use crate::config::CodecConfig;
use crate::container::{self, ContainerHeader};
use crate::entropy::{
    gaussian_cdf_table, quantize, rate_bits_gaussian, reconstruct, CdfTable, FactorizedPrior,
    LatentCode, LatentOrigin,
};
use crate::error::{CodecError, TensorError};
use crate::main_net::MainNet;
use crate::ppm::{pad_replicate, PpmImage};
use crate::range_coder::{RangeDecoder, RangeEncoder};
use crate::tensor::graph::{EvalGraph, Param};
use crate::tensor::{io as weight_io, ops, Tensor};

/// A full model: configuration, both networks, and the two factorized
/// priors for the hyper-latents.
pub struct Codec {
    pub config: CodecConfig,
    pub aux: AuxCoarseNet,
    pub main: MainNet,
    pub aux_prior: FactorizedPrior,
    pub main_prior: FactorizedPrior,
}

/// Per-image byte accounting, mirroring the report surfaced by the CLI.
#[derive(Clone, Debug)]
pub struct ByteReport {
    pub total_bytes: usize,
    pub header_bytes: usize,
    pub aux_hyper_bytes: usize,
    pub aux_residual_bytes: usize,
    pub main_hyper_bytes: usize,
    pub main_residual_bytes: usize,
    /// Bits per pixel over the original (uncropped) pixel count, counting
    /// the whole file.
    pub bpp: f64,
    /// Model-estimated total bits (sum of -log2 pmf at the coded values).
    pub estimated_bits: f64,
    /// Symbols whose pmf hit the numeric floor during estimation.
    pub clamped_symbols: usize,
}

impl ByteReport {
    pub fn aux_bytes(&self) -> usize {
        self.aux_hyper_bytes + self.aux_residual_bytes
    }

    pub fn main_bytes(&self) -> usize {
        self.main_hyper_bytes + self.main_residual_bytes
    }

    /// Auxiliary share of the coded payload.
    pub fn aux_ratio(&self) -> f64 {
        let total = self.aux_bytes() + self.main_bytes();
        if total == 0 {
            0.0
        } else {
            self.aux_bytes() as f64 / total as f64
        }
    }
}

pub struct EncodeResult {
    pub container: Vec<u8>,
    pub report: ByteReport,
    /// Encoder-side reconstruction in the padded domain, clamped to [0,1].
    pub reconstruction: Tensor,
    pub y_aux_hat: Tensor,
    pub y_main_hat: Tensor,
}

pub struct DecodeResult {
    pub image: PpmImage,
    /// Decoder-side reconstruction in the padded domain, clamped to [0,1].
    pub reconstruction: Tensor,
    pub y_aux_hat: Tensor,
    pub y_main_hat: Tensor,
    pub header: ContainerHeader,
}

impl Codec {
    /// Fresh model with seeded random initialization.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Codec, CodecError> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Ok(Codec {
            aux: AuxCoarseNet::new(&config, &mut rng),
            main: MainNet::new(&config, &mut rng),
            aux_prior: FactorizedPrior::new("aux.prior", config.aux_hyper_channels, &mut rng),
            main_prior: FactorizedPrior::new("main.prior", config.main_hyper_channels, &mut rng),
            config,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.aux.params();
        p.extend(self.main.params());
        p.extend(self.aux_prior.params());
        p.extend(self.main_prior.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.aux.params_mut();
        p.extend(self.main.params_mut());
        p.extend(self.aux_prior.params_mut());
        p.extend(self.main_prior.params_mut());
        p
    }

    pub fn config_hash(&self) -> u64 {
        self.config.hash()
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), CodecError> {
        weight_io::save_weights(path, &self.config, &self.params())
    }

    pub fn serialize_weights(&self) -> Vec<u8> {
        weight_io::serialize_weights(&self.config, &self.params())
    }

    /// Rebuild a codec from a weight file (the manifest carries the config).
    pub fn from_weight_file(path: &Path) -> Result<Codec, CodecError> {
        let (config, tensors) = weight_io::load_weights(path)?;
        Codec::from_parts(config, tensors)
    }

    pub fn from_weight_bytes(bytes: &[u8]) -> Result<Codec, CodecError> {
        let (config, tensors) = weight_io::deserialize_weights(bytes)?;
        Codec::from_parts(config, tensors)
    }

    fn from_parts(
        config: CodecConfig,
        mut tensors: HashMap<String, Tensor>,
    ) -> Result<Codec, CodecError> {
        let mut codec = Codec::new(config, 0)?;
        for p in codec.params_mut() {
            let t = tensors.remove(p.name()).ok_or_else(|| {
                CodecError::InvalidInput(format!("weight file missing parameter {}", p.name()))
            })?;
            if t.shape() != p.value().shape() {
                return Err(CodecError::InvalidInput(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name(),
                    t.shape(),
                    p.value().shape()
                )));
            }
            p.set_value(t);
        }
        if let Some(name) = tensors.keys().next() {
            return Err(CodecError::InvalidInput(format!(
                "weight file has unknown parameter {name}"
            )));
        }
        Ok(codec)
    }

    fn padded_dims(&self, width: usize, height: usize) -> (usize, usize) {
        let m = self.config.padding_multiple;
        (width.div_ceil(m) * m, height.div_ceil(m) * m)
    }

    /// Encode an image into a self-contained container.
    pub fn encode_image(&self, img: &PpmImage) -> Result<EncodeResult, CodecError> {
        if img.width > u16::MAX as usize || img.height > u16::MAX as usize {
            return Err(CodecError::InvalidInput(format!(
                "image {}x{} exceeds the container's u16 dimensions",
                img.width, img.height
            )));
        }
        let (pw, ph) = self.padded_dims(img.width, img.height);
        let x = pad_replicate(&img.to_tensor(), ph, pw);
        let g = &mut EvalGraph::new();

        // auxiliary path
        let y_aux = self.aux.encode(g, &x)?;
        let z_aux = self.aux.hyper_encode(g, &y_aux)?;
        let z_aux_code = quantize(&z_aux, &Tensor::zeros(z_aux.shape()), LatentOrigin::Aux)?;
        let aux_tables = self.aux_prior.export_all()?;
        let mut est_bits = self.aux_prior.rate_bits(&z_aux_code)?;
        let stream_z_aux = encode_hyper(&aux_tables, &z_aux_code);
        let z_apm = self.aux.hyper_decode(g, &z_aux_code.to_tensor())?;

        let mut enc_aux = RangeEncoder::new();
        let seg = transport_segments(
            g,
            self.aux.segments(),
            |g, i, prev| self.aux.predict_segment(g, i, prev, &z_apm),
            Transport::Encode {
                y: &y_aux,
                enc: &mut enc_aux,
            },
        )?;
        let y_aux_hat = seg.y_hat;
        est_bits.bits += seg.estimated_bits;
        est_bits.clamped += seg.clamped;
        let stream_y_aux = enc_aux.finish();

        let feats = self.aux.decode(g, &y_aux_hat)?;

        // main path
        let y = self.main.encode(g, &x, &feats)?;
        let z = self.main.hyper_encode(g, &y)?;
        let z_code = quantize(&z, &Tensor::zeros(z.shape()), LatentOrigin::Main)?;
        let main_tables = self.main_prior.export_all()?;
        let z_rate = self.main_prior.rate_bits(&z_code)?;
        est_bits.bits += z_rate.bits;
        est_bits.clamped += z_rate.clamped;
        let stream_z_main = encode_hyper(&main_tables, &z_code);
        let z_pm = self.main.hyper_decode(g, &z_code.to_tensor())?;

        let mut enc_main = RangeEncoder::new();
        let seg = transport_segments(
            g,
            self.main.segments(),
            |g, i, prev| self.main.predict_segment(g, i, prev, &z_pm, &feats.f16),
            Transport::Encode {
                y: &y,
                enc: &mut enc_main,
            },
        )?;
        let y_main_hat = seg.y_hat;
        est_bits.bits += seg.estimated_bits;
        est_bits.clamped += seg.clamped;
        let stream_y_main = enc_main.finish();

        let x_hat = self.main.decode(g, &y_main_hat, &feats)?;
        let reconstruction = clamp01(&x_hat);

        let header = ContainerHeader {
            config_hash: self.config_hash(),
            width: img.width as u16,
            height: img.height as u16,
            lambda_index: self.config.lambda_index(),
            stream_lengths: [
                stream_z_aux.len() as u32,
                stream_y_aux.len() as u32,
                stream_z_main.len() as u32,
                stream_y_main.len() as u32,
            ],
        };
        let container = container::build(
            &header,
            [&stream_z_aux, &stream_y_aux, &stream_z_main, &stream_y_main],
        );
        let report = ByteReport {
            total_bytes: container.len(),
            header_bytes: container::HEADER_LEN,
            aux_hyper_bytes: stream_z_aux.len(),
            aux_residual_bytes: stream_y_aux.len(),
            main_hyper_bytes: stream_z_main.len(),
            main_residual_bytes: stream_y_main.len(),
            bpp: 8.0 * container.len() as f64 / (img.width * img.height) as f64,
            estimated_bits: est_bits.bits,
            clamped_symbols: est_bits.clamped,
        };
        Ok(EncodeResult {
            container,
            report,
            reconstruction,
            y_aux_hat,
            y_main_hat,
        })
    }

    /// Decode a container back to an image.
    pub fn decode_image(&self, bytes: &[u8]) -> Result<DecodeResult, CodecError> {
        let (header, streams) = container::parse(bytes)?;
        if header.config_hash != self.config_hash() {
            return Err(CodecError::ConfigMismatch {
                expected: header.config_hash,
                actual: self.config_hash(),
            });
        }
        let (width, height) = (header.width as usize, header.height as usize);
        let (pw, ph) = self.padded_dims(width, height);
        let g = &mut EvalGraph::new();

        // auxiliary path
        let aux_tables = self.aux_prior.export_all()?;
        let z_aux_code = decode_hyper(
            &aux_tables,
            streams[container::STREAM_AUX_HYPER],
            ph / 64,
            pw / 64,
            LatentOrigin::Aux,
        );
        let z_apm = self.aux.hyper_decode(g, &z_aux_code.to_tensor())?;
        let mut dec_aux = RangeDecoder::new(streams[container::STREAM_AUX_RESIDUAL]);
        let seg = transport_segments(
            g,
            self.aux.segments(),
            |g, i, prev| self.aux.predict_segment(g, i, prev, &z_apm),
            Transport::Decode {
                dec: &mut dec_aux,
                grid_h: ph / 16,
                grid_w: pw / 16,
            },
        )?;
        let y_aux_hat = seg.y_hat;
        let feats = self.aux.decode(g, &y_aux_hat)?;

        // main path
        let main_tables = self.main_prior.export_all()?;
        let z_code = decode_hyper(
            &main_tables,
            streams[container::STREAM_MAIN_HYPER],
            ph / 64,
            pw / 64,
            LatentOrigin::Main,
        );
        let z_pm = self.main.hyper_decode(g, &z_code.to_tensor())?;
        let mut dec_main = RangeDecoder::new(streams[container::STREAM_MAIN_RESIDUAL]);
        let seg = transport_segments(
            g,
            self.main.segments(),
            |g, i, prev| self.main.predict_segment(g, i, prev, &z_pm, &feats.f16),
            Transport::Decode {
                dec: &mut dec_main,
                grid_h: ph / 16,
                grid_w: pw / 16,
            },
        )?;
        let y_main_hat = seg.y_hat;

        let x_hat = self.main.decode(g, &y_main_hat, &feats)?;
        let reconstruction = clamp01(&x_hat);
        let image = PpmImage::from_tensor(&reconstruction, width, height)?;
        Ok(DecodeResult {
            image,
            reconstruction,
            y_aux_hat,
            y_main_hat,
            header,
        })
    }

    /// Pad an image tensor the way `encode_image` does (for training and
    /// diagnostics).
    pub fn pad_image(&self, t: &Tensor) -> Tensor {
        let (_, _, h, w) = t.dims4().expect("image tensor");
        let (pw, ph) = self.padded_dims(w, h);
        pad_replicate(t, ph, pw)
    }
}

pub fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn encode_hyper(tables: &[CdfTable], code: &LatentCode) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    let hw = code.height * code.width;
    for c in 0..code.channels {
        let table = &tables[c];
        for &v in &code.values[c * hw..(c + 1) * hw] {
            table.encode_value(&mut enc, v);
        }
    }
    enc.finish()
}

fn decode_hyper(
    tables: &[CdfTable],
    stream: &[u8],
    h: usize,
    w: usize,
    origin: LatentOrigin,
) -> LatentCode {
    let mut dec = RangeDecoder::new(stream);
    let channels = tables.len();
    let mut values = Vec::with_capacity(channels * h * w);
    for table in tables.iter() {
        for _ in 0..h * w {
            values.push(table.decode_value(&mut dec));
        }
    }
    LatentCode {
        values,
        channels,
        height: h,
        width: w,
        segments: vec![0..channels],
        origin,
    }
}

enum Transport<'a, 'b> {
    Encode {
        y: &'a Tensor,
        enc: &'a mut RangeEncoder,
    },
    Decode {
        dec: &'a mut RangeDecoder<'b>,
        grid_h: usize,
        grid_w: usize,
    },
}

struct SegmentOutcome {
    y_hat: Tensor,
    estimated_bits: f64,
    clamped: usize,
}

/// The sequential segment loop shared by encoder and decoder: identical
/// float operations on both sides keep the reconstructed latent bit-exact.
fn transport_segments(
    g: &mut EvalGraph,
    segments: &[Range<usize>],
    mut predict: impl FnMut(
        &mut EvalGraph,
        usize,
        &[Tensor],
    ) -> Result<(Tensor, Tensor), TensorError>,
    mut transport: Transport,
) -> Result<SegmentOutcome, CodecError> {
    let mut prev: Vec<Tensor> = Vec::with_capacity(segments.len());
    let mut estimated_bits = 0.0;
    let mut clamped = 0;
    for (i, seg) in segments.iter().enumerate() {
        let (mu, sigma) = predict(g, i, &prev)?;
        if !sigma.is_finite() || !mu.is_finite() {
            return Err(CodecError::Internal(format!(
                "non-finite (mu, sigma) at segment {i}"
            )));
        }
        let code = match &mut transport {
            Transport::Encode { y, enc } => {
                let y_i = ops::slice_axis(y, 1, seg.start, seg.end)?;
                let code = quantize(&y_i, &mu, LatentOrigin::Aux)?;
                for (&v, &s) in code.values.iter().zip(sigma.data().iter()) {
                    gaussian_cdf_table(s)?.encode_value(enc, v);
                }
                code
            }
            Transport::Decode { dec, grid_h, grid_w } => {
                let values: Result<Vec<i32>, TensorError> = sigma
                    .data()
                    .iter()
                    .map(|&s| Ok(gaussian_cdf_table(s)?.decode_value(dec)))
                    .collect();
                LatentCode {
                    values: values?,
                    channels: seg.len(),
                    height: *grid_h,
                    width: *grid_w,
                    segments: vec![0..seg.len()],
                    origin: LatentOrigin::Aux,
                }
            }
        };
        let rate = rate_bits_gaussian(&code, &sigma)?;
        estimated_bits += rate.bits;
        clamped += rate.clamped;
        let y_hat_i = reconstruct(&code, &mu)?;
        prev.push(y_hat_i);
    }
    let refs: Vec<&Tensor> = prev.iter().collect();
    let y_hat = ops::concat(&refs, 1)?;
    Ok(SegmentOutcome {
        y_hat,
        estimated_bits,
        clamped,
    })
}
