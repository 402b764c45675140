//! Bit-exact integer range coder over quantized CDF tables.
//!
//! A 32-bit-range, byte-renormalizing coder with carry handling (the
//! classic cache/pending-0xFF scheme). All CDF tables share a fixed total
//! frequency of 2^16. Streams are self-contained per call site: encoders
//! finalize independently and decoders never read past their input slice
//! (reads beyond the end produce zero bytes).

/// Total frequency of every CDF table: 2^16.
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;

const RENORM_LIMIT: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    /// Number of buffered bytes awaiting carry resolution (the cache byte
    /// plus a run of 0xFF).
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Narrow the interval to `[cum_lo, cum_hi) / 2^16`. The final slot of a
    /// table (`cum_hi == 2^16`) absorbs the division remainder.
    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= TOTAL_FREQ);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cum_lo as u64;
        if cum_hi == TOTAL_FREQ {
            self.range -= r * cum_lo;
        } else {
            self.range = r * (cum_hi - cum_lo);
        }
        while self.range < RENORM_LIMIT {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Encode `bits` raw bits (uniform probability), high chunk first.
    pub fn encode_raw(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 32);
        let mut remaining = bits;
        while remaining > 0 {
            let chunk = remaining.min(PRECISION_BITS);
            let v = (value >> (remaining - chunk)) & ((1u32 << chunk) - 1);
            // uniform interval of width 2^(16-chunk)
            let lo = v << (PRECISION_BITS - chunk);
            let hi = lo + (1 << (PRECISION_BITS - chunk));
            self.encode(lo, hi);
            remaining -= chunk;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.cache_size > 0 {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        // keep only the low 24 bits: the top byte is now owned by the
        // cache/pending run, and any future carry is detected via bit 32
        self.low = ((self.low as u32) << 8) as u64;
    }

    /// Flush pending state and return the byte stream.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }

    /// Bytes emitted so far (the final stream adds up to 5 flush bytes).
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> RangeDecoder<'a> {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            buf,
            pos: 0,
        };
        d.next_byte(); // leading cache byte, always zero for a valid stream
        for _ in 0..4 {
            let b = d.next_byte();
            d.code = (d.code << 8) | b as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Current cumulative-frequency offset in `[0, 2^16)`; look up the
    /// symbol whose `[cum_lo, cum_hi)` contains it, then call [`Self::consume`].
    pub fn peek(&self) -> u32 {
        let r = self.range >> PRECISION_BITS;
        ((self.code / r).min(TOTAL_FREQ - 1)) as u32
    }

    /// Mirror of [`RangeEncoder::encode`] for the symbol found via `peek`.
    pub fn consume(&mut self, cum_lo: u32, cum_hi: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= TOTAL_FREQ);
        let r = self.range >> PRECISION_BITS;
        self.code -= r * cum_lo;
        if cum_hi == TOTAL_FREQ {
            self.range -= r * cum_lo;
        } else {
            self.range = r * (cum_hi - cum_lo);
        }
        while self.range < RENORM_LIMIT {
            let b = self.next_byte();
            self.code = (self.code << 8) | b as u32;
            self.range <<= 8;
        }
    }

    pub fn decode_raw(&mut self, bits: u32) -> u32 {
        debug_assert!(bits <= 32);
        let mut value: u32 = 0;
        let mut remaining = bits;
        while remaining > 0 {
            let chunk = remaining.min(PRECISION_BITS);
            let width = PRECISION_BITS - chunk;
            let v = self.peek() >> width;
            let lo = v << width;
            self.consume(lo, lo + (1 << width));
            value = (value << chunk) | v;
            remaining -= chunk;
        }
        value
    }
}
