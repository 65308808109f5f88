//! Weight and activation quantizers, the packed storage layouts, the
//! XNOR-popcount primitive and convolutional-parameter footprint accounting.
//!
//! Packed layouts (bit-exact, shared with the `SQTZ1` container):
//!
//! * `BINARY`: one bit per code, `1` means `+1`, LSB-first within each byte.
//! * `TERNARY`: two bits per code, LSB-first; `00 -> 0`, `01 -> +1`,
//!   `11 -> -1`, `10` is reserved.
//! * `UNIFORM_INT(b)`: each code as two's complement, little-endian, in
//!   `ceil(b / 8)` bytes.
//! * `FLOAT32`: IEEE-754 single precision, little-endian.
//!
//! Pad bits at the end of a packed payload are always zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number format of one weight or activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QuantScheme {
    Float32,
    /// Symmetric uniform integer codes with `bits` bits (2..=32).
    UniformInt(u8),
    Ternary,
    Binary,
}

impl QuantScheme {
    pub fn bits_per_weight(self) -> u32 {
        match self {
            QuantScheme::Float32 => 32,
            QuantScheme::UniformInt(b) => b as u32,
            QuantScheme::Ternary => 2,
            QuantScheme::Binary => 1,
        }
    }

    pub fn is_float(self) -> bool {
        self == QuantScheme::Float32
    }

    pub fn validate(self) -> Result<()> {
        match self {
            QuantScheme::UniformInt(b) if !(2..=32).contains(&b) => {
                Err(Error::Config(format!("uniform integer width {b} outside 2..=32")))
            }
            _ => Ok(()),
        }
    }

    /// Inclusive code range `(min, max)`.
    pub fn code_range(self) -> (i64, i64) {
        match self {
            QuantScheme::Float32 => (i64::MIN, i64::MAX),
            QuantScheme::UniformInt(b) => {
                let m = uniform_qmax(b as u32);
                (-m, m)
            }
            QuantScheme::Ternary | QuantScheme::Binary => (-1, 1),
        }
    }

    /// Bytes a packed payload of `count` values occupies on disk.
    pub fn payload_len(self, count: usize) -> usize {
        match self {
            QuantScheme::Float32 => 4 * count,
            QuantScheme::UniformInt(b) => count * (b as usize).div_ceil(8),
            QuantScheme::Ternary => (2 * count).div_ceil(8),
            QuantScheme::Binary => count.div_ceil(8),
        }
    }

    /// Short name used in manifests and on the command line.
    pub fn kind_name(self) -> &'static str {
        match self {
            QuantScheme::Float32 => "fp32",
            QuantScheme::UniformInt(_) => "int",
            QuantScheme::Ternary => "ternary",
            QuantScheme::Binary => "binary",
        }
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantScheme::UniformInt(b) => write!(f, "int{b}"),
            other => f.write_str(other.kind_name()),
        }
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let scheme = match lower.as_str() {
            "fp32" | "float32" | "fp" => QuantScheme::Float32,
            "ternary" => QuantScheme::Ternary,
            "binary" => QuantScheme::Binary,
            other => {
                let bits = other
                    .strip_prefix("int")
                    .and_then(|b| b.parse::<u8>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown quantization scheme '{s}'")))?;
                QuantScheme::UniformInt(bits)
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl TryFrom<String> for QuantScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QuantScheme> for String {
    fn from(s: QuantScheme) -> String {
        s.to_string()
    }
}

fn uniform_qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Packed low-precision weights with a per-tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub scheme: QuantScheme,
    pub count: usize,
    pub payload: Vec<u8>,
    pub scale: f32,
}

impl QuantizedBlock {
    /// Build a block from integer codes, validating their range.
    pub fn from_codes(scheme: QuantScheme, codes: &[i64], scale: f32) -> Result<Self> {
        if scheme.is_float() {
            return Err(Error::Contract("FLOAT32 blocks carry values, not codes".into()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Domain(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(Self {
            scheme,
            count: codes.len(),
            payload: pack_codes(codes, scheme)?,
            scale,
        })
    }

    /// Unquantized storage of real values.
    pub fn float(values: &[f32]) -> Self {
        Self {
            scheme: QuantScheme::Float32,
            count: values.len(),
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            scale: 1.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let want = self.scheme.payload_len(self.count);
        if self.payload.len() != want {
            return Err(Error::Format(format!(
                "{} payload of {} values must be {want} bytes, found {}",
                self.scheme,
                self.count,
                self.payload.len()
            )));
        }
        Ok(())
    }

    /// Decoded integer codes. Errors for FLOAT32 blocks.
    pub fn codes(&self) -> Result<Vec<i64>> {
        self.check()?;
        unpack_codes(&self.payload, self.count, self.scheme)
    }
}

/// Per-tensor symmetric uniform quantization.
pub fn quantize_uniform(x: &[f32], bits: u32) -> Result<QuantizedBlock> {
    let (codes, scale) = uniform_codes(x, bits)?;
    QuantizedBlock::from_codes(QuantScheme::UniformInt(bits as u8), &codes, scale)
}

/// Codes and scale of [`quantize_uniform`] without packing.
pub fn uniform_codes(x: &[f32], bits: u32) -> Result<(Vec<i64>, f32)> {
    QuantScheme::UniformInt(bits.min(255) as u8).validate()?;
    check_finite(x)?;
    let qmax = uniform_qmax(bits);
    let max_abs = x.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    if max_abs == 0.0 {
        return Ok((vec![0; x.len()], 1.0));
    }
    let ratio = qmax as f64 / max_abs;
    let codes = x
        .iter()
        .map(|&v| ((v as f64 * ratio).round() as i64).clamp(-qmax, qmax))
        .collect();
    Ok((codes, (max_abs / qmax as f64) as f32))
}

/// Re-quantize with a fixed scale (no range estimation).
pub fn uniform_codes_with_scale(x: &[f32], bits: u32, scale: f32) -> Result<Vec<i64>> {
    QuantScheme::UniformInt(bits.min(255) as u8).validate()?;
    check_finite(x)?;
    let qmax = uniform_qmax(bits);
    Ok(x.iter()
        .map(|&v| ((v as f64 / scale as f64).round() as i64).clamp(-qmax, qmax))
        .collect())
}

/// Ternary quantization with threshold `0.7 * mean|x|`.
pub fn quantize_ternary(x: &[f32]) -> Result<QuantizedBlock> {
    let (codes, scale) = ternary_codes(x)?;
    QuantizedBlock::from_codes(QuantScheme::Ternary, &codes, scale)
}

pub fn ternary_codes(x: &[f32]) -> Result<(Vec<i64>, f32)> {
    check_nonempty(x)?;
    check_finite(x)?;
    let mean = x.iter().map(|v| v.abs() as f64).sum::<f64>() / x.len() as f64;
    let delta = 0.7 * mean;
    let mut kept = 0.0f64;
    let mut n_kept = 0usize;
    let codes = x
        .iter()
        .map(|&v| {
            let a = v.abs() as f64;
            if a <= delta {
                0
            } else {
                kept += a;
                n_kept += 1;
                if v > 0.0 {
                    1
                } else {
                    -1
                }
            }
        })
        .collect();
    let scale = if n_kept == 0 { 1.0 } else { (kept / n_kept as f64) as f32 };
    Ok((codes, scale))
}

/// Sign binarization; zero maps to `+1`; scale is `mean|x|`.
pub fn quantize_binary(x: &[f32]) -> Result<QuantizedBlock> {
    let (codes, scale) = binary_codes(x)?;
    QuantizedBlock::from_codes(QuantScheme::Binary, &codes, scale)
}

pub fn binary_codes(x: &[f32]) -> Result<(Vec<i64>, f32)> {
    check_nonempty(x)?;
    check_finite(x)?;
    let mean = x.iter().map(|v| v.abs() as f64).sum::<f64>() / x.len() as f64;
    let codes = x.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    let scale = if mean == 0.0 { 1.0 } else { mean as f32 };
    Ok((codes, scale))
}

/// Quantize real weights under `scheme`.
pub fn quantize(x: &[f32], scheme: QuantScheme) -> Result<QuantizedBlock> {
    match scheme {
        QuantScheme::Float32 => {
            check_finite(x)?;
            Ok(QuantizedBlock::float(x))
        }
        QuantScheme::UniformInt(b) => quantize_uniform(x, b as u32),
        QuantScheme::Ternary => quantize_ternary(x),
        QuantScheme::Binary => quantize_binary(x),
    }
}

/// Codes and scale for a non-float scheme, without packing.
pub fn scheme_codes(x: &[f32], scheme: QuantScheme) -> Result<(Vec<i64>, f32)> {
    match scheme {
        QuantScheme::Float32 => Err(Error::Contract("FLOAT32 has no integer codes".into())),
        QuantScheme::UniformInt(b) => uniform_codes(x, b as u32),
        QuantScheme::Ternary => ternary_codes(x),
        QuantScheme::Binary => binary_codes(x),
    }
}

/// `code * scale` elementwise; FLOAT32 blocks decode their stored values.
pub fn dequantize(q: &QuantizedBlock) -> Result<Vec<f32>> {
    q.check()?;
    if q.scheme.is_float() {
        return Ok(q
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect());
    }
    let s = q.scale as f64;
    Ok(q.codes()?.into_iter().map(|c| (c as f64 * s) as f32).collect())
}

fn check_finite(x: &[f32]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Domain(format!("non-finite value {} at index {i}", x[i]))),
        None => Ok(()),
    }
}

fn check_nonempty(x: &[f32]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Domain("cannot quantize an empty tensor".into()));
    }
    Ok(())
}

/// Pack integer codes per the layout of `scheme`.
pub fn pack_codes(codes: &[i64], scheme: QuantScheme) -> Result<Vec<u8>> {
    scheme.validate()?;
    let (lo, hi) = scheme.code_range();
    if let Some(i) = codes.iter().position(|&c| c < lo || c > hi || (scheme == QuantScheme::Binary && c == 0)) {
        return Err(Error::Domain(format!("code {} at index {i} is not valid {scheme}", codes[i])));
    }
    let mut out = vec![0u8; scheme.payload_len(codes.len())];
    match scheme {
        QuantScheme::Float32 => return Err(Error::Contract("FLOAT32 values are not packed as codes".into())),
        QuantScheme::Binary => {
            for (i, &c) in codes.iter().enumerate() {
                if c > 0 {
                    out[i / 8] |= 1 << (i % 8);
                }
            }
        }
        QuantScheme::Ternary => {
            for (i, &c) in codes.iter().enumerate() {
                let field: u8 = match c {
                    0 => 0b00,
                    1 => 0b01,
                    _ => 0b11,
                };
                out[i / 4] |= field << (2 * (i % 4));
            }
        }
        QuantScheme::UniformInt(b) => {
            let width = (b as usize).div_ceil(8);
            for (dst, &c) in out.chunks_exact_mut(width).zip(codes) {
                dst.copy_from_slice(&c.to_le_bytes()[..width]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(payload: &[u8], count: usize, scheme: QuantScheme) -> Result<Vec<i64>> {
    scheme.validate()?;
    let want = scheme.payload_len(count);
    if payload.len() != want {
        return Err(Error::Format(format!("{scheme} payload for {count} codes must be {want} bytes, got {}", payload.len())));
    }
    let codes: Vec<i64> = match scheme {
        QuantScheme::Float32 => return Err(Error::Contract("FLOAT32 payloads hold values, not codes".into())),
        QuantScheme::Binary => {
            let used = count % 8;
            if used != 0 && payload[payload.len() - 1] >> used != 0 {
                return Err(Error::Format("non-zero pad bits in binary payload".into()));
            }
            (0..count)
                .map(|i| if payload[i / 8] >> (i % 8) & 1 == 1 { 1 } else { -1 })
                .collect()
        }
        QuantScheme::Ternary => {
            let used = (2 * count) % 8;
            if used != 0 && payload[payload.len() - 1] >> used != 0 {
                return Err(Error::Format("non-zero pad bits in ternary payload".into()));
            }
            let mut v = Vec::with_capacity(count);
            for i in 0..count {
                v.push(match payload[i / 4] >> (2 * (i % 4)) & 0b11 {
                    0b00 => 0,
                    0b01 => 1,
                    0b11 => -1,
                    _ => return Err(Error::Format(format!("reserved ternary pattern 10 at code {i}"))),
                });
            }
            v
        }
        QuantScheme::UniformInt(b) => {
            let width = (b as usize).div_ceil(8);
            let (lo, hi) = scheme.code_range();
            let mut v = Vec::with_capacity(count);
            for (i, chunk) in payload.chunks_exact(width).enumerate() {
                let mut raw = [0u8; 8];
                raw[..width].copy_from_slice(chunk);
                let shift = 64 - 8 * width as u32;
                let c = (i64::from_le_bytes(raw) << shift) >> shift;
                if c < lo || c > hi {
                    return Err(Error::Format(format!("code {c} at {i} outside int{b} range")));
                }
                v.push(c);
            }
            v
        }
    };
    Ok(codes)
}

/// `sum(a_i * b_i)` over bit-packed ±1 vectors, as
/// `2 * popcount(xnor(a, b)) - n`.
pub fn binary_dot_popcount(a_packed: &[u8], b_packed: &[u8], n: usize) -> Result<i64> {
    let bytes = n.div_ceil(8);
    if a_packed.len() != bytes || b_packed.len() != bytes {
        return Err(Error::shape(
            "length",
            format!("{n} codes need {bytes} bytes, got {} and {}", a_packed.len(), b_packed.len()),
        ));
    }
    let full = n / 64;
    let (a_words, a_tail) = a_packed.split_at(full * 8);
    let (b_words, b_tail) = b_packed.split_at(full * 8);
    let mut differ = 0u32;
    for (a, b) in a_words.chunks_exact(8).zip(b_words.chunks_exact(8)) {
        let wa = u64::from_le_bytes(a.try_into().expect("8-byte chunk"));
        let wb = u64::from_le_bytes(b.try_into().expect("8-byte chunk"));
        differ += (wa ^ wb).count_ones();
    }
    let rest = n - full * 64;
    if rest > 0 {
        // Assemble the partial word; bits past `n` may hold anything.
        let word = |t: &[u8]| t.iter().rev().fold(0u64, |w, &byte| w << 8 | byte as u64);
        differ += ((word(a_tail) ^ word(b_tail)) & ((1u64 << rest) - 1)).count_ones();
    }
    Ok(n as i64 - 2 * differ as i64)
}

/// Same as [`binary_dot_popcount`] on pre-assembled 64-bit words; bits past
/// `n` must be zero in both operands.
#[inline]
pub fn binary_dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    let mut diff = 0u32;
    for (x, y) in a.iter().zip(b) {
        diff += (x ^ y).count_ones();
    }
    n as i64 - 2 * diff as i64
}

/// Role of a convolution inside the backbone, which selects its scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    First,
    Hidden,
    Last,
    None,
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerGroup::First => "first",
            LayerGroup::Hidden => "hidden",
            LayerGroup::Last => "last",
            LayerGroup::None => "none",
        })
    }
}

/// One row of the precision table: schemes per layer group plus activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub first_layer: QuantScheme,
    pub hidden_layers: QuantScheme,
    pub last_layer: QuantScheme,
    pub activations: QuantScheme,
}

impl QuantConfig {
    pub const FP32: Self = Self {
        first_layer: QuantScheme::Float32,
        hidden_layers: QuantScheme::Float32,
        last_layer: QuantScheme::Float32,
        activations: QuantScheme::Float32,
    };
    pub const INT16: Self = Self {
        first_layer: QuantScheme::UniformInt(16),
        hidden_layers: QuantScheme::UniformInt(16),
        last_layer: QuantScheme::UniformInt(16),
        activations: QuantScheme::UniformInt(32),
    };
    pub const INT4: Self = Self {
        first_layer: QuantScheme::UniformInt(16),
        hidden_layers: QuantScheme::UniformInt(4),
        last_layer: QuantScheme::UniformInt(8),
        activations: QuantScheme::UniformInt(32),
    };
    pub const TERNARY: Self = Self {
        first_layer: QuantScheme::UniformInt(16),
        hidden_layers: QuantScheme::Ternary,
        last_layer: QuantScheme::UniformInt(8),
        activations: QuantScheme::UniformInt(32),
    };
    pub const BINARY: Self = Self {
        first_layer: QuantScheme::UniformInt(16),
        hidden_layers: QuantScheme::Binary,
        last_layer: QuantScheme::UniformInt(8),
        activations: QuantScheme::UniformInt(32),
    };

    /// The five precision rows, in table order.
    pub fn table_rows() -> [(&'static str, QuantConfig); 5] {
        [
            ("fp32", Self::FP32),
            ("int16", Self::INT16),
            ("int4", Self::INT4),
            ("ternary", Self::TERNARY),
            ("binary", Self::BINARY),
        ]
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::table_rows()
            .into_iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name.trim()))
            .map(|(_, c)| c)
            .ok_or_else(|| Error::Config(format!("unknown precision preset '{name}'")))
    }

    pub fn scheme_for(&self, group: LayerGroup) -> Result<QuantScheme> {
        match group {
            LayerGroup::First => Ok(self.first_layer),
            LayerGroup::Hidden => Ok(self.hidden_layers),
            LayerGroup::Last => Ok(self.last_layer),
            LayerGroup::None => Err(Error::Config("convolution without a layer group".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in [self.first_layer, self.hidden_layers, self.last_layer, self.activations] {
            s.validate()?;
        }
        if matches!(self.activations, QuantScheme::Ternary | QuantScheme::Binary) {
            return Err(Error::Config(format!(
                "activations must be fp32 or uniform integer, got {}",
                self.activations
            )));
        }
        Ok(())
    }
}

/// Activation tensor held as integer codes with one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Tensor,
    pub scale: f32,
    pub bits: u32,
}

impl QuantizedTensor {
    pub fn quantize(x: &Tensor, bits: u32) -> Result<Self> {
        let (codes, scale) = uniform_codes(x.real()?, bits)?;
        Ok(Self {
            codes: Tensor::from_int(x.dims(), codes)?,
            scale,
            bits,
        })
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        self.codes.scaled_to_real(self.scale)
    }
}

/// Parameter count of one convolution for footprint accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFootprint {
    pub name: String,
    pub group: LayerGroup,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupFootprint {
    pub group: LayerGroup,
    pub scheme: QuantScheme,
    pub params: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootprintReport {
    pub groups: Vec<GroupFootprint>,
    pub total_bytes: u64,
}

impl FootprintReport {
    pub fn group(&self, g: LayerGroup) -> Option<&GroupFootprint> {
        self.groups.iter().find(|r| r.group == g)
    }

    /// Decimal megabytes, as reported in the precision table.
    pub fn total_mb(&self) -> f64 {
        self.total_bytes as f64 / 1e6
    }
}

impl fmt::Display for FootprintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:<8} {:>12} {:>14} {:>10}", "group", "scheme", "params", "bytes", "MB")?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<8} {:<8} {:>12} {:>14} {:>10.3}",
                g.group.to_string(),
                g.scheme.to_string(),
                g.params,
                g.bytes,
                g.bytes as f64 / 1e6
            )?;
        }
        write!(f, "{:<8} {:<8} {:>12} {:>14} {:>10.3}", "total", "", "", self.total_bytes, self.total_mb())
    }
}

/// Bytes needed for convolution weights only (no scales, no biases).
pub fn footprint(layers: &[LayerFootprint], config: &QuantConfig) -> Result<FootprintReport> {
    let mut groups: Vec<GroupFootprint> = Vec::new();
    for layer in layers {
        let scheme = config
            .scheme_for(layer.group)
            .map_err(|_| Error::Config(format!("layer '{}' has no group assignment", layer.name)))?;
        let bytes = (layer.params * scheme.bits_per_weight() as u64).div_ceil(8);
        match groups.iter_mut().find(|g| g.group == layer.group) {
            Some(g) => {
                g.params += layer.params;
                g.bytes += bytes;
            }
            None => groups.push(GroupFootprint {
                group: layer.group,
                scheme,
                params: layer.params,
                bytes,
            }),
        }
    }
    let total_bytes = groups.iter().map(|g| g.bytes).sum();
    Ok(FootprintReport { groups, total_bytes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_example() {
        let q = quantize_uniform(&[0.5, -1.0, 0.26], 4).unwrap();
        assert!((q.scale - 1.0 / 7.0).abs() < 1e-7);
        assert_eq!(q.codes().unwrap(), vec![4, -7, 2]);
        let d = dequantize(&q).unwrap();
        for (a, b) in d.iter().zip([0.5714, -1.0, 0.2857]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn uniform_zero_input() {
        let q = quantize_uniform(&[0.0; 5], 8).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.codes().unwrap(), vec![0; 5]);
    }

    #[test]
    fn uniform_32_bit_is_exact_on_integers() {
        let mut x: Vec<f32> = (-100..=100).map(|v| v as f32).collect();
        x.push(2147483647.0);
        let q = quantize_uniform(&x, 32).unwrap();
        let codes = q.codes().unwrap();
        for (i, v) in (-100..=100).enumerate() {
            assert_eq!(codes[i], v as i64);
        }
        assert_eq!(*codes.last().unwrap(), (1i64 << 31) - 1);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(quantize_uniform(&[1.0, f32::NAN], 8), Err(Error::Domain(_))));
        assert!(matches!(quantize_ternary(&[f32::INFINITY]), Err(Error::Domain(_))));
        assert!(matches!(quantize_binary(&[f32::NEG_INFINITY]), Err(Error::Domain(_))));
        assert!(matches!(quantize_uniform(&[1.0], 1), Err(Error::Config(_))));
        assert!(matches!(quantize_uniform(&[1.0], 33), Err(Error::Config(_))));
    }

    #[test]
    fn ternary_examples() {
        let (codes, scale) = ternary_codes(&[0.8, -0.05, 0.3, -0.6]).unwrap();
        assert_eq!(codes, vec![1, 0, 0, -1]);
        assert!((scale - 0.7).abs() < 1e-6);

        let q = quantize_ternary(&[0.0; 4]).unwrap();
        assert_eq!(q.codes().unwrap(), vec![0; 4]);
        assert_eq!(q.scale, 1.0);

        for c in [0.01f32, 1.0, 37.5] {
            let (codes, scale) = ternary_codes(&[c, -c]).unwrap();
            assert_eq!(codes, vec![1, -1]);
            assert_eq!(scale, c);
        }
    }

    #[test]
    fn binary_examples() {
        let q = quantize_binary(&[0.5, -0.25]).unwrap();
        assert_eq!(q.codes().unwrap(), vec![1, -1]);
        assert_eq!(q.scale, 0.375);
        assert_eq!(dequantize(&q).unwrap(), vec![0.375, -0.375]);

        let q = quantize_binary(&[0.0]).unwrap();
        assert_eq!(q.codes().unwrap(), vec![1]);
        assert_eq!(q.scale, 1.0);
    }

    #[test]
    fn unit_scale_dequantizes_to_codes() {
        let codes = [3, -2, 0, 7, -7];
        let q = QuantizedBlock::from_codes(QuantScheme::UniformInt(4), &codes, 1.0).unwrap();
        assert_eq!(dequantize(&q).unwrap(), vec![3.0, -2.0, 0.0, 7.0, -7.0]);
    }

    #[test]
    fn float_blocks_pass_through() {
        let v = [1.5f32, -0.0, f32::MIN_POSITIVE, 12345.678];
        let q = quantize(&v, QuantScheme::Float32).unwrap();
        assert_eq!(dequantize(&q).unwrap(), v.to_vec());
    }

    #[test]
    fn corrupt_payload_length() {
        let mut q = quantize_binary(&[1.0; 9]).unwrap();
        q.payload.pop();
        assert!(matches!(dequantize(&q), Err(Error::Format(_))));
    }

    #[test]
    fn packing_examples() {
        assert_eq!(pack_codes(&[1, -1, 1, 1, -1, -1, -1, 1], QuantScheme::Binary).unwrap(), vec![0x8D]);
        assert_eq!(pack_codes(&[0, 1, -1, 0], QuantScheme::Ternary).unwrap(), vec![0x34]);
        assert_eq!(pack_codes(&[-2, 300], QuantScheme::UniformInt(16)).unwrap(), vec![0xFE, 0xFF, 0x2C, 0x01]);
        assert_eq!(pack_codes(&[-7, 7], QuantScheme::UniformInt(4)).unwrap(), vec![0xF9, 0x07]);
    }

    #[test]
    fn packing_errors() {
        assert!(matches!(pack_codes(&[0], QuantScheme::Binary), Err(Error::Domain(_))));
        assert!(matches!(pack_codes(&[2], QuantScheme::Ternary), Err(Error::Domain(_))));
        assert!(matches!(pack_codes(&[8], QuantScheme::UniformInt(4)), Err(Error::Domain(_))));
        assert!(matches!(pack_codes(&[-8], QuantScheme::UniformInt(4)), Err(Error::Domain(_))));
        assert!(matches!(unpack_codes(&[0b10], 1, QuantScheme::Ternary), Err(Error::Format(_))));
        assert!(matches!(unpack_codes(&[0b0100], 1, QuantScheme::Ternary), Err(Error::Format(_))));
        assert!(matches!(unpack_codes(&[0x08], 1, QuantScheme::UniformInt(4)), Err(Error::Format(_))));
    }

    #[test]
    fn popcount_examples() {
        let a = pack_codes(&[1, -1, 1], QuantScheme::Binary).unwrap();
        let b = pack_codes(&[1, 1, -1], QuantScheme::Binary).unwrap();
        assert_eq!(binary_dot_popcount(&a, &b, 3).unwrap(), -1);
        assert_eq!(binary_dot_popcount(&a, &a, 3).unwrap(), 3);
        assert!(matches!(binary_dot_popcount(&a, &[0, 0], 3), Err(Error::Shape { .. })));
    }

    #[test]
    fn popcount_exhaustive_small() {
        for n in 1..=10usize {
            let decode = |v: u32| -> Vec<i64> { (0..n).map(|i| if v >> i & 1 == 1 { 1 } else { -1 }).collect() };
            for a in 0..1u32 << n {
                let av = decode(a);
                let ap = pack_codes(&av, QuantScheme::Binary).unwrap();
                for b in 0..1u32 << n {
                    let bv = decode(b);
                    let naive: i64 = av.iter().zip(&bv).map(|(x, y)| x * y).sum();
                    let bp = pack_codes(&bv, QuantScheme::Binary).unwrap();
                    assert_eq!(binary_dot_popcount(&ap, &bp, n).unwrap(), naive);
                }
            }
        }
    }

    #[test]
    fn footprint_examples() {
        let layers = vec![LayerFootprint { name: "all".into(), group: LayerGroup::Hidden, params: 21_375_000 }];
        assert_eq!(footprint(&layers, &QuantConfig::FP32).unwrap().total_bytes, 85_500_000);
        assert_eq!(footprint(&[], &QuantConfig::FP32).unwrap().total_bytes, 0);

        let hidden = vec![LayerFootprint { name: "h".into(), group: LayerGroup::Hidden, params: 1000 }];
        let bytes = |s: QuantScheme| {
            let cfg = QuantConfig { hidden_layers: s, ..QuantConfig::FP32 };
            footprint(&hidden, &cfg).unwrap().total_bytes
        };
        assert_eq!(bytes(QuantScheme::Binary), 125);
        assert_eq!(bytes(QuantScheme::Ternary), 250);
        assert_eq!(bytes(QuantScheme::Float32), 32 * 125);
        assert_eq!(bytes(QuantScheme::Float32), 16 * 250);

        let bad = vec![LayerFootprint { name: "orphan".into(), group: LayerGroup::None, params: 1 }];
        assert!(matches!(footprint(&bad, &QuantConfig::FP32), Err(Error::Config(_))));
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [QuantScheme::Float32, QuantScheme::UniformInt(4), QuantScheme::UniformInt(32), QuantScheme::Ternary, QuantScheme::Binary] {
            assert_eq!(s.to_string().parse::<QuantScheme>().unwrap(), s);
        }
        assert!("int40".parse::<QuantScheme>().is_err());
        assert!("int1".parse::<QuantScheme>().is_err());
        assert!(QuantConfig { activations: QuantScheme::Binary, ..QuantConfig::FP32 }.validate().is_err());
    }

    fn scheme_strategy() -> impl Strategy<Value = QuantScheme> {
        prop_oneof![
            (2u8..=32).prop_map(QuantScheme::UniformInt),
            Just(QuantScheme::Ternary),
            Just(QuantScheme::Binary),
        ]
    }

    proptest! {
        #[test]
        fn rounding_error_bounded(x in prop::collection::vec(-100.0f32..100.0, 1..200), bits in 2u32..=24) {
            let q = quantize_uniform(&x, bits).unwrap();
            let d = dequantize(&q).unwrap();
            for (a, b) in x.iter().zip(&d) {
                prop_assert!(((a - b).abs() as f64) <= q.scale as f64 / 2.0 + 2.0 * f32::EPSILON as f64 * a.abs() as f64 + 1e-9);
            }
        }

        #[test]
        fn requantization_is_idempotent(x in prop::collection::vec(-10.0f32..10.0, 1..100), bits in 2u32..=16) {
            let q = quantize_uniform(&x, bits).unwrap();
            let d = dequantize(&q).unwrap();
            prop_assert_eq!(uniform_codes_with_scale(&d, bits, q.scale).unwrap(), q.codes().unwrap());
        }

        #[test]
        fn binary_codes_ignore_positive_rescale(x in prop::collection::vec(-5.0f32..5.0, 1..100), a in 0.001f32..1000.0) {
            let scaled: Vec<f32> = x.iter().map(|v| v * a).collect();
            prop_assert_eq!(binary_codes(&x).unwrap().0, binary_codes(&scaled).unwrap().0);
        }

        #[test]
        fn pack_unpack_bijection(scheme in scheme_strategy(), raw in prop::collection::vec(any::<i64>(), 0..100)) {
            let (lo, hi) = scheme.code_range();
            let codes: Vec<i64> = raw.iter().map(|r| {
                let span = (hi - lo + 1) as i128;
                let c = (lo as i128 + (*r as i128).rem_euclid(span)) as i64;
                if scheme == QuantScheme::Binary && c == 0 { 1 } else { c }
            }).collect();
            let packed = pack_codes(&codes, scheme).unwrap();
            prop_assert_eq!(packed.len(), scheme.payload_len(codes.len()));
            prop_assert_eq!(unpack_codes(&packed, codes.len(), scheme).unwrap(), codes);
        }

        #[test]
        fn popcount_matches_naive(bits in prop::collection::vec(any::<(bool, bool)>(), 1..4096)) {
            let a: Vec<i64> = bits.iter().map(|p| if p.0 { 1 } else { -1 }).collect();
            let b: Vec<i64> = bits.iter().map(|p| if p.1 { 1 } else { -1 }).collect();
            let naive: i64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let pa = pack_codes(&a, QuantScheme::Binary).unwrap();
            let pb = pack_codes(&b, QuantScheme::Binary).unwrap();
            prop_assert_eq!(binary_dot_popcount(&pa, &pb, a.len()).unwrap(), naive);
        }

        #[test]
        fn footprint_additive_and_monotone(params in prop::collection::vec(1u64..1_000_000, 1..8)) {
            let layers: Vec<LayerFootprint> = params.iter().enumerate()
                .map(|(i, &p)| LayerFootprint { name: format!("l{i}"), group: LayerGroup::Hidden, params: p * 8 })
                .collect();
            let mut prev = 0u64;
            for scheme in [QuantScheme::Binary, QuantScheme::Ternary, QuantScheme::UniformInt(4), QuantScheme::UniformInt(8), QuantScheme::UniformInt(16), QuantScheme::Float32] {
                let cfg = QuantConfig { hidden_layers: scheme, ..QuantConfig::FP32 };
                let total = footprint(&layers, &cfg).unwrap().total_bytes;
                let parts: u64 = layers.iter().map(|l| footprint(std::slice::from_ref(l), &cfg).unwrap().total_bytes).sum();
                prop_assert_eq!(total, parts);
                prop_assert!(total > prev);
                prev = total;
            }
        }
    }
}
