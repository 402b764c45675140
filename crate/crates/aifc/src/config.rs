//! Codec configuration: architecture hyperparameters pinning a reproducible
//! model. The config hash binds bitstreams and weight files together.

use serde::{Deserialize, Serialize};

use crate::error::CodecError;

/// The lambda sweep used for rate-distortion curves.
pub const LAMBDA_GRID: [f64; 7] = [0.0025, 0.005, 0.01, 0.02, 0.04, 0.08, 0.16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Rate-distortion trade-off weight.
    pub lambda: f64,
    /// Segment count knob: the main latent is coded in `n_p` segments, the
    /// auxiliary latent in `2 * n_p`.
    pub n_p: usize,
    /// Scale floor for the Gaussian conditional.
    pub sigma_min: f64,
    /// Images are replicate-padded to a multiple of this before coding.
    pub padding_multiple: usize,
    /// Total frequency of quantized CDF tables is `2^cdf_precision`.
    pub cdf_precision: u32,
    /// Auxiliary encoder widths at scales 1/2, 1/4, 1/8.
    pub aux_enc_channels: [usize; 3],
    /// Auxiliary latent channels (1/16 scale).
    pub aux_latent_channels: usize,
    pub aux_hyper_channels: usize,
    /// Predicted-feature channels at scales 1/1, 1/2, 1/4, 1/16.
    pub feature_channels: [usize; 4],
    /// Main encoder head width at full resolution.
    pub main_head_channels: usize,
    /// Main encoder widths at scales 1/2, 1/4, 1/8.
    pub main_enc_channels: [usize; 3],
    /// Main latent channels (1/16 scale).
    pub main_latent_channels: usize,
    pub main_hyper_channels: usize,
    /// Hidden width of the segment parameter predictors.
    pub pe_hidden_channels: usize,
    /// Key/value token pooling factor in attention blocks.
    pub attn_downsample: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            lambda: 0.01,
            n_p: 4,
            sigma_min: 0.04,
            padding_multiple: 64,
            cdf_precision: 16,
            aux_enc_channels: [32, 48, 48],
            aux_latent_channels: 32,
            aux_hyper_channels: 32,
            feature_channels: [16, 32, 48, 32],
            main_head_channels: 24,
            main_enc_channels: [48, 64, 64],
            main_latent_channels: 48,
            main_hyper_channels: 32,
            pe_hidden_channels: 32,
            attn_downsample: 2,
        }
    }
}

impl CodecConfig {
    /// Reduced widths for fast tests and experiments.
    pub fn tiny() -> Self {
        CodecConfig {
            lambda: 0.01,
            aux_enc_channels: [12, 16, 16],
            aux_latent_channels: 16,
            aux_hyper_channels: 12,
            feature_channels: [8, 12, 16, 12],
            main_head_channels: 10,
            main_enc_channels: [16, 24, 24],
            main_latent_channels: 16,
            main_hyper_channels: 12,
            pe_hidden_channels: 12,
            ..CodecConfig::default()
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |msg: String| Err(CodecError::InvalidInput(msg));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.n_p == 0 {
            return bad("n_p must be >= 1".into());
        }
        if !(self.sigma_min.is_finite() && self.sigma_min > 0.0) {
            return bad(format!("sigma_min must be positive, got {}", self.sigma_min));
        }
        if self.padding_multiple == 0 || self.padding_multiple % 64 != 0 {
            return bad(format!(
                "padding_multiple must be a positive multiple of 64, got {}",
                self.padding_multiple
            ));
        }
        if self.cdf_precision != 16 {
            return bad(format!(
                "cdf_precision must be 16, got {}",
                self.cdf_precision
            ));
        }
        if self.attn_downsample == 0 || 16 % self.attn_downsample != 0 {
            return bad(format!(
                "attn_downsample must divide 16, got {}",
                self.attn_downsample
            ));
        }
        let widths = self
            .aux_enc_channels
            .iter()
            .chain(self.main_enc_channels.iter())
            .chain(self.feature_channels.iter())
            .chain([
                &self.aux_latent_channels,
                &self.aux_hyper_channels,
                &self.main_head_channels,
                &self.main_latent_channels,
                &self.main_hyper_channels,
                &self.pe_hidden_channels,
            ]);
        for &w in widths {
            if w == 0 {
                return bad("all channel widths must be >= 1".into());
            }
        }
        if self.aux_latent_channels < 2 * self.n_p {
            return bad(format!(
                "aux latent needs at least {} channels for {} segments",
                2 * self.n_p,
                2 * self.n_p
            ));
        }
        if self.main_latent_channels < self.n_p {
            return bad(format!(
                "main latent needs at least {} channels for {} segments",
                self.n_p, self.n_p
            ));
        }
        Ok(())
    }

    /// Index of `lambda` in [`LAMBDA_GRID`], or 255 for a custom value.
    pub fn lambda_index(&self) -> u8 {
        LAMBDA_GRID
            .iter()
            .position(|&l| l == self.lambda)
            .map_or(255, |i| i as u8)
    }

    /// FNV-1a over the canonical key-value serialization.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.to_key_values().bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Serialize as the flat `key = value` config-file format.
    pub fn to_key_values(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "lambda = {}\n\
             n_p = {}\n\
             sigma_min = {}\n\
             padding_multiple = {}\n\
             cdf_precision = {}\n\
             aux_enc_channels = {}\n\
             aux_latent_channels = {}\n\
             aux_hyper_channels = {}\n\
             feature_channels = {}\n\
             main_head_channels = {}\n\
             main_enc_channels = {}\n\
             main_latent_channels = {}\n\
             main_hyper_channels = {}\n\
             pe_hidden_channels = {}\n\
             attn_downsample = {}\n",
            self.lambda,
            self.n_p,
            self.sigma_min,
            self.padding_multiple,
            self.cdf_precision,
            list(&self.aux_enc_channels),
            self.aux_latent_channels,
            self.aux_hyper_channels,
            list(&self.feature_channels),
            self.main_head_channels,
            list(&self.main_enc_channels),
            self.main_latent_channels,
            self.main_hyper_channels,
            self.pe_hidden_channels,
            self.attn_downsample,
        )
    }

    /// Parse the flat `key = value` format. Unknown keys are errors; missing
    /// keys keep their defaults. `#` starts a comment.
    pub fn from_key_values(text: &str) -> Result<CodecConfig, CodecError> {
        let mut cfg = CodecConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CodecError::InvalidInput(format!(
                    "config line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let ctx = |e: String| {
                CodecError::InvalidInput(format!("config line {}: {e}", lineno + 1))
            };
            match key {
                "lambda" => cfg.lambda = parse_num(value).map_err(ctx)?,
                "n_p" => cfg.n_p = parse_num(value).map_err(ctx)?,
                "sigma_min" => cfg.sigma_min = parse_num(value).map_err(ctx)?,
                "padding_multiple" => cfg.padding_multiple = parse_num(value).map_err(ctx)?,
                "cdf_precision" => cfg.cdf_precision = parse_num(value).map_err(ctx)?,
                "aux_enc_channels" => cfg.aux_enc_channels = parse_list(value).map_err(ctx)?,
                "aux_latent_channels" => {
                    cfg.aux_latent_channels = parse_num(value).map_err(ctx)?
                }
                "aux_hyper_channels" => cfg.aux_hyper_channels = parse_num(value).map_err(ctx)?,
                "feature_channels" => cfg.feature_channels = parse_list(value).map_err(ctx)?,
                "main_head_channels" => cfg.main_head_channels = parse_num(value).map_err(ctx)?,
                "main_enc_channels" => cfg.main_enc_channels = parse_list(value).map_err(ctx)?,
                "main_latent_channels" => {
                    cfg.main_latent_channels = parse_num(value).map_err(ctx)?
                }
                "main_hyper_channels" => {
                    cfg.main_hyper_channels = parse_num(value).map_err(ctx)?
                }
                "pe_hidden_channels" => cfg.pe_hidden_channels = parse_num(value).map_err(ctx)?,
                "attn_downsample" => cfg.attn_downsample = parse_num(value).map_err(ctx)?,
                other => {
                    return Err(CodecError::InvalidInput(format!(
                        "config line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Channel ranges of the auxiliary latent's segments (`2 * n_p` of them,
    /// as equal as possible, partitioning the channel axis exactly).
    pub fn aux_segments(&self) -> Vec<std::ops::Range<usize>> {
        split_channels(self.aux_latent_channels, 2 * self.n_p)
    }

    /// Channel ranges of the main latent's segments (`n_p` of them).
    pub fn main_segments(&self) -> Vec<std::ops::Range<usize>> {
        split_channels(self.main_latent_channels, self.n_p)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse()
        .map_err(|_| format!("cannot parse {s:?} as a number"))
}

fn parse_list<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| parse_num(p.trim()))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected {N} comma-separated values, got {}", v.len()))
}

/// Split `channels` into `count` contiguous ranges, earlier ranges taking
/// the remainder.
pub fn split_channels(channels: usize, count: usize) -> Vec<std::ops::Range<usize>> {
    let base = channels / count;
    let extra = channels % count;
    let mut out = Vec::with_capacity(count);
    let mut at = 0;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        out.push(at..at + len);
        at += len;
    }
    debug_assert_eq!(at, channels);
    out
}
