//! 4-bit power-of-two weight quantization and nibble packing.
//!
//! All weights of a layer share one scale `2^s`: a stored 4-bit integer
//! `q` in `[-8, 7]` dequantizes to `q * 2^s`. The scale exponent is the
//! smallest integer with `max|w| / 2^s <= 7.5`, which keeps the rounding
//! error of every weight within `2^(s-1)`.

use super::NetError;

/// Packed 4-bit signed weights with their shape and shared scale exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTensor {
    pub packed: Vec<u8>,
    pub len: usize,
    pub scale_exp: i8,
    pub shape: Vec<usize>,
}

impl QuantTensor {
    pub fn values(&self) -> Vec<i8> {
        unpack_nibbles(&self.packed, self.len).expect("self-consistent quant tensor")
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let scale = (self.scale_exp as f64).exp2();
        self.values().iter().map(|&q| q as f64 * scale).collect()
    }
}

/// Smallest scale exponent such that `max|w| <= 7.5 * 2^s`. All-zero
/// input defaults to `s = 0`.
pub fn auto_scale_exp(weights: &[f64]) -> i8 {
    let max_abs = weights.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
    if max_abs == 0.0 {
        return 0;
    }
    let mut s = (max_abs.log2() - 7.5f64.log2()).ceil() as i32;
    // Guard against log rounding at the boundary.
    while max_abs <= 7.5 * ((s - 1) as f64).exp2() {
        s -= 1;
    }
    while max_abs > 7.5 * (s as f64).exp2() {
        s += 1;
    }
    s.clamp(i8::MIN as i32, i8::MAX as i32) as i8
}

/// Quantizes with a forced scale exponent:
/// `clamp(round_ties_even(w / 2^s), -8, 7)`.
pub fn quantize_with_scale(weights: &[f64], scale_exp: i8) -> Vec<i8> {
    let inv = (-(scale_exp as f64)).exp2();
    weights
        .iter()
        .map(|&w| (w * inv).round_ties_even().clamp(-8.0, 7.0) as i8)
        .collect()
}

/// Quantizes a layer's weights with the automatic power-of-two scale.
pub fn quantize_layer(weights: &[f64], shape: &[usize]) -> QuantTensor {
    debug_assert_eq!(shape.iter().product::<usize>(), weights.len());
    let scale_exp = auto_scale_exp(weights);
    let q = quantize_with_scale(weights, scale_exp);
    QuantTensor {
        packed: pack_nibbles(&q).expect("quantized values are in range"),
        len: weights.len(),
        scale_exp,
        shape: shape.to_vec(),
    }
}

/// Packs two's-complement 4-bit values, little nibble first; an odd tail
/// is padded with a zero nibble.
pub fn pack_nibbles(values: &[i8]) -> Result<Vec<u8>, NetError> {
    for &v in values {
        if !(-8..=7).contains(&v) {
            return Err(NetError::ValueOutOfRange(v as i32));
        }
    }
    let mut out = Vec::with_capacity(values.len().div_ceil(2));
    for pair in values.chunks(2) {
        let lo = (pair[0] as u8) & 0x0F;
        let hi = if pair.len() == 2 {
            (pair[1] as u8) & 0x0F
        } else {
            0
        };
        out.push(lo | (hi << 4));
    }
    Ok(out)
}

/// Unpacks `count` two's-complement 4-bit values, little nibble first.
pub fn unpack_nibbles(bytes: &[u8], count: usize) -> Result<Vec<i8>, NetError> {
    if bytes.len() != count.div_ceil(2) {
        return Err(NetError::TruncatedFile);
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let b = bytes[i / 2];
        let nib = if i % 2 == 0 { b & 0x0F } else { b >> 4 };
        // Sign-extend the low 4 bits.
        out.push(((nib << 4) as i8) >> 4);
    }
    Ok(out)
}
