//! Range coder over fixed-point Gaussian PMFs.
//!
//! The coder is the carry-propagating LZMA-style design: a 64-bit `low`
//! holding a possible carry, a 32-bit `range`, and a cached output byte with
//! a run of pending `0xFF`s. Probabilities are 16-bit fixed point.
//!
//! Symbols are integers `j` standing for the latent value `j * delta`. A
//! table covers `k0 - L ..= k0 + L` around `k0 = round(mu / delta)`; values
//! outside that window go through one of two escape symbols followed by an
//! Exp-Golomb coded overshoot in equiprobable bits.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io::{read_bytes, read_u32};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
/// Half-width of the table window in standard deviations.
pub const TAIL_SIGMAS: f64 = 16.0;
/// Cap on the half-width in bins, bounding table size for tiny bin widths.
pub const MAX_HALF_WIDTH: i64 = 1024;

const TOP: u32 = 1 << 24;
const MAX_ESCAPE_BITS: u32 = 62;

/// `erfc(x)` for `x >= 0`, Abramowitz & Stegun 7.1.26 (absolute error below
/// 1.5e-7). Only `libm::exp` is used so every host computes identical bits.
fn erfc_poly(x: f64) -> f64 {
    const P: f64 = 0.327_591_1;
    const A: [f64; 5] = [0.254_829_592, -0.284_496_736, 1.421_413_741, -1.453_152_027, 1.061_405_429];
    let t = 1.0 / (1.0 + P * x);
    let poly = t * (A[0] + t * (A[1] + t * (A[2] + t * (A[3] + t * A[4]))));
    poly * libm::exp(-x * x)
}

/// Odd-symmetric `erf` built on [`erfc_poly`].
fn erf_poly(x: f64) -> f64 {
    let v = 1.0 - erfc_poly(x.abs());
    if x < 0.0 {
        -v
    } else {
        v
    }
}

/// Integer PMF over a window of symbols plus two escape tails.
///
/// Table index 0 is the low escape, `1..=2L+1` are symbols
/// `first ..= first + 2L`, and `2L+2` is the high escape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPmf {
    first: i64,
    cdf: Vec<u32>,
}

impl FixedPmf {
    /// Quantized Gaussian `N(mu, sigma)` on the grid of width `delta`.
    pub fn gaussian(mu: f64, sigma: f64, delta: f64) -> Result<Self> {
        if !(sigma > 0.0 && delta > 0.0 && mu.is_finite() && sigma.is_finite() && delta.is_finite()) {
            return Err(Error::invalid(format!("cannot build a PMF for mu={mu} sigma={sigma} delta={delta}")));
        }
        let k0 = (mu / delta).round_ties_even();
        if k0.abs() > (1i64 << 50) as f64 {
            return Err(Error::invalid(format!("mean {mu} is too far off the grid of width {delta}")));
        }
        let k0 = k0 as i64;
        let half = ((TAIL_SIGMAS * sigma / delta).ceil() as i64).clamp(1, MAX_HALF_WIDTH);
        let first = k0 - half;
        let bins = (2 * half + 1) as usize;
        let scale = sigma * std::f64::consts::SQRT_2;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| ((first + i as i64) as f64 - 0.5) * delta - mu)
            .map(|e| e / scale)
            .collect();
        let mut mass = Vec::with_capacity(bins + 2);
        mass.push(if edges[0] < 0.0 {
            0.5 * erfc_poly(-edges[0])
        } else {
            0.5 * (1.0 + erf_poly(edges[0]))
        });
        for w in edges.windows(2) {
            mass.push((0.5 * (erf_poly(w[1]) - erf_poly(w[0]))).max(0.0));
        }
        let last = edges[bins];
        mass.push(if last > 0.0 {
            0.5 * erfc_poly(last)
        } else {
            0.5 * (1.0 - erf_poly(last))
        });
        Ok(FixedPmf {
            first,
            cdf: quantize_masses(&mass),
        })
    }

    /// Table from explicit nonnegative weights for symbols starting at `first`.
    pub fn from_weights(first: i64, weights: &[f64]) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("weights must be finite, nonnegative, and nonempty"));
        }
        if weights.len() + 2 > (PROB_TOTAL / 2) as usize {
            return Err(Error::invalid("alphabet too large for 16-bit probabilities"));
        }
        let mut mass = Vec::with_capacity(weights.len() + 2);
        mass.push(0.0);
        mass.extend_from_slice(weights);
        mass.push(0.0);
        Ok(FixedPmf {
            first,
            cdf: quantize_masses(&mass),
        })
    }

    /// Cumulative counts, `cdf[0] = 0` to `cdf[n] = 2^16`.
    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn frequency(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    /// Inclusive range of symbols coded without escape.
    pub fn window(&self) -> (i64, i64) {
        (self.first, self.first + self.cdf.len() as i64 - 4)
    }

    fn index_of(&self, symbol: i64) -> (usize, Option<u64>) {
        let (lo, hi) = self.window();
        if symbol < lo {
            (0, Some((lo - symbol - 1) as u64))
        } else if symbol > hi {
            (self.cdf.len() - 2, Some((symbol - hi - 1) as u64))
        } else {
            ((symbol - lo) as usize + 1, None)
        }
    }

    /// Exact number of bits the coder spends on `symbol`, ignoring the
    /// rounding of `range` to a multiple of 2^16.
    pub fn cost_bits(&self, symbol: i64) -> f64 {
        let (idx, escape) = self.index_of(symbol);
        let base = -(self.frequency(idx) as f64 / PROB_TOTAL as f64).log2();
        base + escape.map_or(0.0, |e| exp_golomb_len(e) as f64)
    }
}

fn exp_golomb_len(e: u64) -> u32 {
    let n = 63 - (e + 1).leading_zeros();
    2 * n + 1
}

/// Counts with a floor of one, the rest shared in proportion to `mass`.
///
/// Leftover counts go by largest remainder, but a group of equal remainders
/// is only served whole; what cannot be shared evenly goes to the middle
/// entry of the table, which holds the symbol nearest the mean. Mirror-image
/// inputs therefore produce mirror-image tables.
fn quantize_masses(mass: &[f64]) -> Vec<u32> {
    let n = mass.len();
    let centre = n / 2;
    let budget = (PROB_TOTAL as usize - n) as f64;
    let total: f64 = mass.iter().sum();
    let (scaled, mut counts): (Vec<f64>, Vec<u64>) = if total > 0.0 {
        let scaled: Vec<f64> = mass.iter().map(|m| m / total * budget).collect();
        let counts = scaled.iter().map(|s| 1 + s.floor() as u64).collect();
        (scaled, counts)
    } else {
        (vec![0.0; n], vec![1; n])
    };
    let mut sum: u64 = counts.iter().sum();
    while sum > PROB_TOTAL as u64 {
        // only reachable through rounding in the scaled masses
        let m = if counts[centre] > 1 {
            centre
        } else {
            (0..n).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).expect("nonempty")
        };
        counts[m] -= 1;
        sum -= 1;
    }
    let mut left = PROB_TOTAL as u64 - sum;
    let rem: Vec<f64> = scaled.iter().map(|s| s - s.floor()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
    let mut i = 0;
    while i < n && left > 0 {
        let mut j = i;
        while j < n && rem[order[j]] == rem[order[i]] {
            j += 1;
        }
        let group = (j - i) as u64;
        if group > left || rem[order[i]] == 0.0 {
            break;
        }
        for &k in &order[i..j] {
            counts[k] += 1;
        }
        left -= group;
        i = j;
    }
    counts[centre] += left;
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for c in counts {
        acc += c as u32;
        cdf.push(acc);
    }
    debug_assert_eq!(acc, PROB_TOTAL);
    cdf
}

// ---- coder ------------------------------------------------------------------

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > u32::MAX as u64 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn encode_index(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        self.normalize();
    }

    fn encode_bit(&mut self, bit: bool) {
        self.range >>= 1;
        if bit {
            self.low += self.range as u64;
        }
        self.normalize();
    }

    fn encode_escape(&mut self, e: u64) {
        let v = e + 1;
        let n = 63 - v.leading_zeros();
        for _ in 0..n {
            self.encode_bit(false);
        }
        for i in (0..=n).rev() {
            self.encode_bit((v >> i) & 1 == 1);
        }
    }

    pub fn encode(&mut self, symbol: i64, pmf: &FixedPmf) -> Result<()> {
        let (idx, escape) = pmf.index_of(symbol);
        if escape.is_some_and(|e| e >= (1u64 << MAX_ESCAPE_BITS) - 1) {
            return Err(Error::Unencodable {
                symbol,
                reason: format!("beyond the escape range of window {:?}", pmf.window()),
            });
        }
        self.encode_index(pmf.cdf[idx], pmf.frequency(idx));
        if let Some(e) = escape {
            self.encode_escape(e);
        }
        Ok(())
    }

    /// Flushes the coder. The first byte a carry-less coder emits is always
    /// zero and is not stored.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        debug_assert_eq!(self.out[0], 0);
        self.out.remove(0);
        self.out
    }
}

pub struct Decoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Decoder {
            code: 0,
            range: u32::MAX,
            data,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or(Error::StreamExhausted)?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }

    fn decode_bit(&mut self) -> Result<bool> {
        self.range >>= 1;
        let bit = self.code >= self.range;
        if bit {
            self.code -= self.range;
        }
        self.normalize()?;
        Ok(bit)
    }

    fn decode_escape(&mut self) -> Result<u64> {
        let mut n = 0;
        while !self.decode_bit()? {
            n += 1;
            if n > MAX_ESCAPE_BITS {
                return Err(Error::StreamCorrupt("escape prefix too long".into()));
            }
        }
        let mut v = 1u64;
        for _ in 0..n {
            v = (v << 1) | self.decode_bit()? as u64;
        }
        Ok(v - 1)
    }

    pub fn decode(&mut self, pmf: &FixedPmf) -> Result<i64> {
        let r = self.range >> PROB_BITS;
        let v = self.code / r;
        if v >= PROB_TOTAL {
            return Err(Error::StreamCorrupt("code value outside the probability range".into()));
        }
        let idx = pmf.cdf.partition_point(|&c| c <= v) - 1;
        self.code -= r * pmf.cdf[idx];
        self.range = r * pmf.frequency(idx);
        self.normalize()?;
        let (lo, hi) = pmf.window();
        Ok(if idx == 0 {
            let e = self.decode_escape()?;
            lo.checked_sub(1 + e as i64)
                .ok_or_else(|| Error::StreamCorrupt("escaped symbol overflows".into()))?
        } else if idx == pmf.cdf.len() - 2 {
            let e = self.decode_escape()?;
            hi.checked_add(1 + e as i64)
                .ok_or_else(|| Error::StreamCorrupt("escaped symbol overflows".into()))?
        } else {
            lo + idx as i64 - 1
        })
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

// ---- framed streams ---------------------------------------------------------

/// A coded payload with its CRC-32.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub payload: Vec<u8>,
    pub checksum: u32,
}

impl Bitstream {
    pub fn new(payload: Vec<u8>) -> Self {
        let checksum = crc32fast::hash(&payload);
        Bitstream { payload, checksum }
    }

    pub fn bit_len(&self) -> u64 {
        self.payload.len() as u64 * 8
    }

    pub fn verify(&self) -> Result<()> {
        let computed = crc32fast::hash(&self.payload);
        if computed != self.checksum {
            return Err(Error::Checksum {
                stored: self.checksum,
                computed,
            });
        }
        Ok(())
    }

    /// `u32` payload length, `u32` checksum, payload.
    pub fn write_framed(&self, mut w: impl Write) -> Result<()> {
        let len = u32::try_from(self.payload.len()).map_err(|_| Error::invalid("stream longer than 4 GiB"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&self.checksum.to_le_bytes())?;
        w.write_all(&self.payload)?;
        Ok(())
    }

    pub fn read_framed(mut r: impl Read) -> Result<Self> {
        let len = read_u32(&mut r)? as usize;
        let checksum = read_u32(&mut r)?;
        let payload = read_bytes(&mut r, len)?;
        let s = Bitstream { payload, checksum };
        s.verify()?;
        Ok(s)
    }
}

pub fn encode_symbols(symbols: &[i64], pmfs: &[FixedPmf]) -> Result<Bitstream> {
    if symbols.len() != pmfs.len() {
        return Err(Error::invalid(format!("{} symbols but {} tables", symbols.len(), pmfs.len())));
    }
    let mut enc = Encoder::new();
    for (&s, pmf) in symbols.iter().zip(pmfs) {
        enc.encode(s, pmf)?;
    }
    Ok(Bitstream::new(enc.finish()))
}

/// Decodes one symbol per table. The stream must be consumed exactly.
pub fn decode_symbols(stream: &Bitstream, pmfs: &[FixedPmf]) -> Result<Vec<i64>> {
    stream.verify()?;
    let mut dec = Decoder::new(&stream.payload)?;
    let out = pmfs.iter().map(|p| dec.decode(p)).collect::<Result<Vec<_>>>()?;
    if dec.remaining() != 0 {
        return Err(Error::StreamCorrupt(format!("{} trailing bytes", dec.remaining())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_polynomial_accuracy() {
        for i in (-400..=400).filter(|&i| i != 0) {
            let x = i as f64 * 0.01;
            assert!((erf_poly(x) - libm::erf(x)).abs() < 2e-7, "x={x}");
            assert_eq!(erf_poly(-x), -erf_poly(x));
        }
    }

    #[test]
    fn gaussian_table_is_symmetric_and_normalized() {
        for &(sigma, delta) in &[(1.0, 1.0), (0.37, 0.05), (3.0, 0.25), (1e-3, 2.0), (900.0, 1.0)] {
            let p = FixedPmf::gaussian(0.0, sigma, delta).unwrap();
            let n = p.cdf().len() - 1;
            assert_eq!(*p.cdf().last().unwrap(), PROB_TOTAL);
            for i in 0..n {
                assert!(p.frequency(i) >= 1);
                assert_eq!(p.frequency(i), p.frequency(n - 1 - i), "sigma={sigma} delta={delta} i={i}");
            }
        }
    }

    #[test]
    fn central_bin_probability() {
        let p = FixedPmf::gaussian(0.0, 1.0, 1.0).unwrap();
        let (lo, _) = p.window();
        let f = p.frequency((0 - lo) as usize + 1) as f64 / PROB_TOTAL as f64;
        assert!((f - 0.382_925).abs() < 1.0 / 4096.0);
    }

    #[test]
    fn window_follows_the_mean() {
        let p = FixedPmf::gaussian(10.3, 0.5, 1.0).unwrap();
        assert_eq!(p.window(), (2, 18));
        let p = FixedPmf::gaussian(0.0, 1e3, 1.0 / 4096.0).unwrap();
        assert_eq!(p.window(), (-MAX_HALF_WIDTH, MAX_HALF_WIDTH));
    }

    #[test]
    fn empty_stream_round_trips() {
        let s = encode_symbols(&[], &[]).unwrap();
        assert!(s.payload.len() <= 5);
        assert!(decode_symbols(&s, &[]).unwrap().is_empty());
    }

    #[test]
    fn escapes_round_trip() {
        let p = FixedPmf::gaussian(0.0, 1.0, 1.0).unwrap();
        let syms = [0, 17, -17, 1 << 40, -(1 << 40), 3];
        let pmfs = vec![p; syms.len()];
        let s = encode_symbols(&syms, &pmfs).unwrap();
        assert_eq!(decode_symbols(&s, &pmfs).unwrap(), syms);
    }

    #[test]
    fn truncated_stream_errors() {
        let p = FixedPmf::gaussian(0.0, 4.0, 1.0).unwrap();
        let syms: Vec<i64> = (0..200).map(|i| (i * 7 % 13) - 6).collect();
        let pmfs = vec![p; syms.len()];
        let s = encode_symbols(&syms, &pmfs).unwrap();
        let cut = &s.payload[..s.payload.len() - 3];
        let mut dec = Decoder::new(cut).unwrap();
        let res: Result<Vec<i64>> = pmfs.iter().map(|p| dec.decode(p)).collect();
        assert!(matches!(res, Err(Error::StreamExhausted)));
    }

    #[test]
    fn checksum_catches_flipped_byte() {
        let p = FixedPmf::gaussian(0.0, 4.0, 1.0).unwrap();
        let pmfs = vec![p; 50];
        let mut s = encode_symbols(&[1; 50], &pmfs).unwrap();
        s.payload[2] ^= 0x10;
        assert!(matches!(decode_symbols(&s, &pmfs), Err(Error::Checksum { .. })));
    }

    #[test]
    fn framing_round_trip() {
        let s = Bitstream::new(vec![1, 2, 3, 250]);
        let mut buf = Vec::new();
        s.write_framed(&mut buf).unwrap();
        assert_eq!(buf.len(), 12);
        assert_eq!(Bitstream::read_framed(buf.as_slice()).unwrap(), s);
    }
}
