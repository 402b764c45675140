//! On-disk bitstream container: a fixed little-endian header framing the
//! four entropy-coded sub-streams.
//!
//! Layout: magic "AIFC" | version u8 | config hash u64 | width u16 |
//! height u16 | lambda index u8 | four sub-stream lengths u32 | checksum
//! u32 | payload. The checksum is CRC-32 over the header (with the checksum
//! field zeroed) and the payload, so corruption anywhere in the file is a
//! typed error.

use crate::bytes::{crc32, put_u16, put_u32, put_u64, Reader};
use crate::error::CodecError;

pub const MAGIC: &[u8; 4] = b"AIFC";
pub const VERSION: u8 = 1;
/// Fixed header size in bytes.
pub const HEADER_LEN: usize = 38;

/// Indices of the sub-streams in header order.
pub const STREAM_AUX_HYPER: usize = 0;
pub const STREAM_AUX_RESIDUAL: usize = 1;
pub const STREAM_MAIN_HYPER: usize = 2;
pub const STREAM_MAIN_RESIDUAL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub config_hash: u64,
    pub width: u16,
    pub height: u16,
    pub lambda_index: u8,
    pub stream_lengths: [u32; 4],
}

impl ContainerHeader {
    pub fn payload_len(&self) -> usize {
        self.stream_lengths.iter().map(|&l| l as usize).sum()
    }
}

/// Assemble the container from a header and the four payloads.
pub fn build(header: &ContainerHeader, streams: [&[u8]; 4]) -> Vec<u8> {
    for (i, s) in streams.iter().enumerate() {
        debug_assert_eq!(header.stream_lengths[i] as usize, s.len());
    }
    let payload_len: usize = streams.iter().map(|s| s.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u64(&mut out, header.config_hash);
    put_u16(&mut out, header.width);
    put_u16(&mut out, header.height);
    out.push(header.lambda_index);
    for s in &streams {
        put_u32(&mut out, s.len() as u32);
    }
    put_u32(&mut out, 0); // checksum placeholder
    for s in &streams {
        out.extend_from_slice(s);
    }
    let crc = crc32(&out);
    out[HEADER_LEN - 4..HEADER_LEN].copy_from_slice(&crc.to_le_bytes());
    out
}

/// Parse and validate; returns the header and the four payload slices.
pub fn parse(bytes: &[u8]) -> Result<(ContainerHeader, [&[u8]; 4]), CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated(format!(
            "container is {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    let mut r = Reader::new(bytes, "container header");
    if r.take(4)? != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CodecError::Version(version));
    }
    let config_hash = r.u64()?;
    let width = r.u16()?;
    let height = r.u16()?;
    let lambda_index = r.u8()?;
    let mut stream_lengths = [0u32; 4];
    for l in &mut stream_lengths {
        *l = r.u32()?;
    }
    let stated_crc = r.u32()?;
    debug_assert_eq!(r.pos(), HEADER_LEN);

    let header = ContainerHeader {
        config_hash,
        width,
        height,
        lambda_index,
        stream_lengths,
    };
    let expect_len = HEADER_LEN
        .checked_add(header.payload_len())
        .ok_or_else(|| CodecError::Truncated("stream lengths overflow".into()))?;
    if bytes.len() != expect_len {
        return Err(CodecError::Truncated(format!(
            "file is {} bytes but header demands {expect_len}",
            bytes.len()
        )));
    }
    let mut check = bytes.to_vec();
    check[HEADER_LEN - 4..HEADER_LEN].copy_from_slice(&[0; 4]);
    if crc32(&check) != stated_crc {
        return Err(CodecError::ChecksumMismatch);
    }
    if width == 0 || height == 0 {
        return Err(CodecError::InvalidInput("zero-size image in header".into()));
    }

    let mut at = HEADER_LEN;
    let mut streams: [&[u8]; 4] = [&[]; 4];
    for (i, s) in streams.iter_mut().enumerate() {
        let len = header.stream_lengths[i] as usize;
        *s = &bytes[at..at + len];
        at += len;
    }
    Ok((header, streams))
}
