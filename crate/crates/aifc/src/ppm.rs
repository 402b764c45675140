//! Binary PPM (P6, 8-bit) reading and writing, plus conversion between
//! byte images and [0,1] float tensors with replicate padding.

use std::path::Path;

use crate::error::CodecError;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, `3 * width * height` bytes.
    pub rgb: Vec<u8>,
}

impl PpmImage {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<PpmImage, CodecError> {
        if width == 0 || height == 0 {
            return Err(CodecError::InvalidInput("zero-size image".into()));
        }
        if rgb.len() != 3 * width * height {
            return Err(CodecError::InvalidInput(format!(
                "pixel buffer has {} bytes, expected {}",
                rgb.len(),
                3 * width * height
            )));
        }
        Ok(PpmImage { width, height, rgb })
    }

    pub fn decode(bytes: &[u8]) -> Result<PpmImage, CodecError> {
        let mut p = HeaderParser { bytes, pos: 0 };
        if p.token()? != b"P6" {
            return Err(CodecError::InvalidInput("not a P6 ppm file".into()));
        }
        let width: usize = p.number()?;
        let height: usize = p.number()?;
        let maxval: usize = p.number()?;
        if maxval != 255 {
            return Err(CodecError::InvalidInput(format!(
                "only 8-bit ppm supported (maxval {maxval})"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        p.pos += 1;
        let need = 3usize
            .checked_mul(width)
            .and_then(|v| v.checked_mul(height))
            .ok_or_else(|| CodecError::InvalidInput("ppm dimensions overflow".into()))?;
        let raster = bytes
            .get(p.pos..p.pos + need)
            .ok_or_else(|| CodecError::Truncated("ppm raster".into()))?;
        PpmImage::new(width, height, raster.to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn read(path: &Path) -> Result<PpmImage, CodecError> {
        PpmImage::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), CodecError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    /// `[1, 3, H, W]` tensor with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0f64; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(c * h + y) * w + x] = self.rgb[(y * w + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Tensor::from_vec(&[1, 3, h, w], data)
    }

    /// Clamp to [0,1], scale to bytes, crop to `width x height`.
    pub fn from_tensor(t: &Tensor, width: usize, height: usize) -> Result<PpmImage, CodecError> {
        let (b, c, th, tw) = t.dims4().map_err(CodecError::Tensor)?;
        if b != 1 || c != 3 || th < height || tw < width {
            return Err(CodecError::Internal(format!(
                "reconstruction shape {:?} cannot produce {width}x{height}",
                t.shape()
            )));
        }
        let data = t.data();
        let mut rgb = vec![0u8; 3 * width * height];
        for y in 0..height {
            for x in 0..width {
                for ch in 0..3 {
                    let v = data[(ch * th + y) * tw + x].clamp(0.0, 1.0);
                    rgb[(y * width + x) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        PpmImage::new(width, height, rgb)
    }
}

/// Extend `t` to `(target_h, target_w)` by replicating the last row/column.
pub fn pad_replicate(t: &Tensor, target_h: usize, target_w: usize) -> Tensor {
    let (b, c, h, w) = t.dims4().expect("pad_replicate needs BCHW");
    assert!(target_h >= h && target_w >= w);
    if target_h == h && target_w == w {
        return t.clone();
    }
    let src = t.data();
    let mut out = vec![0.0; b * c * target_h * target_w];
    for bc in 0..b * c {
        let plane = &src[bc * h * w..(bc + 1) * h * w];
        let oplane = &mut out[bc * target_h * target_w..(bc + 1) * target_h * target_w];
        for y in 0..target_h {
            let sy = y.min(h - 1);
            for x in 0..target_w {
                let sx = x.min(w - 1);
                oplane[y * target_w + x] = plane[sy * w + sx];
            }
        }
    }
    Tensor::from_vec(&[b, c, target_h, target_w], out)
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_space_and_comments(&mut self) -> Result<(), CodecError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(CodecError::Truncated("ppm header".into())),
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8], CodecError> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize, CodecError> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CodecError::InvalidInput("bad number in ppm header".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let img = PpmImage::new(3, 2, (0..18).map(|i| (i * 13) as u8).collect()).unwrap();
        let bytes = img.encode();
        let back = PpmImage::decode(&bytes).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6\n# a comment line\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = PpmImage::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.rgb, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn tensor_roundtrip_is_exact_for_bytes() {
        let img = PpmImage::new(4, 3, (0..36).map(|i| (i * 7) as u8).collect()).unwrap();
        let t = img.to_tensor();
        let back = PpmImage::from_tensor(&t, 4, 3).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pad_replicate_extends_edges() {
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = pad_replicate(&t, 3, 4);
        assert_eq!(p.shape(), &[1, 1, 3, 4]);
        // last column replicates 2.0 / 4.0; last row replicates [3,4,4,4]
        assert_eq!(p.data(), &[1.0, 2.0, 2.0, 2.0, 3.0, 4.0, 4.0, 4.0, 3.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn truncated_raster_rejected() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(
            PpmImage::decode(&bytes),
            Err(CodecError::Truncated(_))
        ));
    }

    #[test]
    fn zero_size_rejected() {
        assert!(PpmImage::new(0, 4, vec![]).is_err());
    }
}
