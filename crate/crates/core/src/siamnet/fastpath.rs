//! Integer-domain convolution for quantized weights.
//!
//! Inputs arrive as integer activation codes with one scale. Binary weights
//! accumulate with add/subtract only, ternary weights additionally skip
//! zeros, uniform weights use integer MACs. Accumulators are 64-bit; a layer
//! whose worst-case sum could overflow is rejected up front.

use crate::error::{Error, Result};
use crate::quantize::{QuantScheme, QuantizedBlock, QuantizedTensor};
use crate::tensor::{check_conv_shapes, ConvParams, Tensor};

#[derive(Debug, Clone)]
enum Codes {
    /// `out x fan_in` signed codes.
    Int(Vec<i32>),
    /// Per filter: indices of `+1` and `-1` weights.
    Ternary { plus: Vec<Vec<u32>>, minus: Vec<Vec<u32>> },
    /// `out x fan_in` sign masks: `0` for `+1`, `-1` for `-1`.
    Binary(Vec<i32>),
}

/// Decoded weights of one quantized convolution, ready to execute.
#[derive(Debug, Clone)]
pub struct FastKernel {
    params: ConvParams,
    scheme: QuantScheme,
    scale: f32,
    codes: Codes,
}

impl FastKernel {
    pub fn new(block: &QuantizedBlock, params: &ConvParams) -> Result<Self> {
        if block.scheme.is_float() {
            return Err(Error::Contract("FLOAT32 weights cannot run on the integer fast path".into()));
        }
        if block.count != params.weight_count() {
            return Err(Error::shape(
                "weights",
                format!("block holds {} weights, layer needs {}", block.count, params.weight_count()),
            ));
        }
        let raw = block.codes()?;
        let k = params.fan_in();
        let codes = match block.scheme {
            QuantScheme::UniformInt(_) => Codes::Int(raw.iter().map(|&c| c as i32).collect()),
            QuantScheme::Binary => Codes::Binary(raw.iter().map(|&c| if c > 0 { 0 } else { -1 }).collect()),
            QuantScheme::Ternary => {
                let mut plus = Vec::with_capacity(params.out_channels);
                let mut minus = Vec::with_capacity(params.out_channels);
                for filter in raw.chunks(k) {
                    let idx = |s: i64| filter.iter().enumerate().filter(|(_, &c)| c == s).map(|(i, _)| i as u32).collect();
                    plus.push(idx(1));
                    minus.push(idx(-1));
                }
                Codes::Ternary { plus, minus }
            }
            QuantScheme::Float32 => unreachable!(),
        };
        Ok(Self {
            params: *params,
            scheme: block.scheme,
            scale: block.scale,
            codes,
        })
    }

    pub fn params(&self) -> &ConvParams {
        &self.params
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Raw integer accumulators (before rescaling), `skip` filters left at 0.
    pub fn accumulate(&self, input: &QuantizedTensor, skip: &[bool]) -> Result<Tensor> {
        let (oh, ow) = check_conv_shapes(&input.codes, self.params.weight_dims(), &self.params)?;
        let (_, w_max) = self.scheme.code_range();
        let in_max = (1i128 << (input.bits.min(63) - 1)) - 1;
        let bound = in_max * w_max as i128 * self.params.fan_in() as i128;
        if bound > i64::MAX as i128 {
            return Err(Error::Contract(format!(
                "int{} activations x {} weights over fan-in {} may overflow a 64-bit accumulator",
                input.bits,
                self.scheme,
                self.params.fan_in()
            )));
        }
        let x = input.codes.int()?;
        let [nb, c, h, w] = input.codes.dims();
        let p = &self.params;
        let k = p.fan_in();
        let positions = oh * ow;
        let mut rows = vec![0i32; positions * k];
        let mut out = vec![0i64; nb * p.out_channels * positions];
        for n in 0..nb {
            patch_rows(&x[n * c * h * w..(n + 1) * c * h * w], [c, h, w], p, &mut rows);
            let dst = &mut out[n * p.out_channels * positions..(n + 1) * p.out_channels * positions];
            match &self.codes {
                Codes::Int(wts) => dispatch::int_mac(&rows, wts, k, positions, skip, dst),
                Codes::Binary(masks) => dispatch::binary_addsub(&rows, masks, k, positions, skip, dst),
                Codes::Ternary { plus, minus } => ternary_addsub(&rows, plus, minus, k, positions, skip, dst),
            }
        }
        Tensor::from_int([nb, p.out_channels, oh, ow], out)
    }

    /// Real-domain output: `acc * input_scale * weight_scale + bias`.
    pub fn conv(&self, input: &QuantizedTensor, bias: Option<&[f32]>, skip: &[bool]) -> Result<Tensor> {
        let acc = self.accumulate(input, skip)?;
        let dims = acc.dims();
        let plane = dims[2] * dims[3];
        let gain = input.scale as f64 * self.scale as f64;
        let data = acc
            .int()?
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let o = (i / plane) % dims[1];
                if skip.get(o).copied().unwrap_or(false) {
                    0.0
                } else {
                    (a as f64 * gain + bias.map_or(0.0, |b| b[o] as f64)) as f32
                }
            })
            .collect();
        Tensor::from_real(dims, data)
    }
}

/// Quantized convolution: `weights` must be a non-float block and `input`
/// integer activation codes.
pub fn conv_fastpath(input: &QuantizedTensor, weights: &QuantizedBlock, params: &ConvParams) -> Result<Tensor> {
    FastKernel::new(weights, params)?.conv(input, None, &[])
}

/// Pre-rescale integer accumulators of [`conv_fastpath`].
pub fn conv_fastpath_accumulate(input: &QuantizedTensor, weights: &QuantizedBlock, params: &ConvParams) -> Result<Tensor> {
    FastKernel::new(weights, params)?.accumulate(input, &[])
}

/// One row per output position holding its receptive field, in weight order.
fn patch_rows(plane: &[i64], [c, h, w]: [usize; 3], p: &ConvParams, rows: &mut [i32]) {
    let oh = (h - p.kh) / p.stride + 1;
    let ow = (w - p.kw) / p.stride + 1;
    let k = c * p.kh * p.kw;
    for y in 0..oh {
        for x in 0..ow {
            let row = &mut rows[(y * ow + x) * k..(y * ow + x + 1) * k];
            let mut at = 0;
            for ch in 0..c {
                for i in 0..p.kh {
                    let src = (ch * h + y * p.stride + i) * w + x * p.stride;
                    for (d, s) in row[at..at + p.kw].iter_mut().zip(&plane[src..src + p.kw]) {
                        *d = *s as i32;
                    }
                    at += p.kw;
                }
            }
        }
    }
}

#[inline(always)]
fn int_mac_body(rows: &[i32], wts: &[i32], k: usize, positions: usize, skip: &[bool], out: &mut [i64]) {
    for (pos, row) in rows.chunks_exact(k).enumerate().take(positions) {
        for (o, filt) in wts.chunks_exact(k).enumerate() {
            if skip.get(o).copied().unwrap_or(false) {
                continue;
            }
            let mut acc = 0i64;
            for (a, b) in row.iter().zip(filt) {
                acc += *a as i64 * *b as i64;
            }
            out[o * positions + pos] = acc;
        }
    }
}

#[inline(always)]
fn binary_addsub_body(rows: &[i32], masks: &[i32], k: usize, positions: usize, skip: &[bool], out: &mut [i64]) {
    for (pos, row) in rows.chunks_exact(k).enumerate().take(positions) {
        for (o, filt) in masks.chunks_exact(k).enumerate() {
            if skip.get(o).copied().unwrap_or(false) {
                continue;
            }
            let mut acc = 0i64;
            // (x ^ m) - m is x for m == 0 and -x for m == -1.
            for (x, m) in row.iter().zip(filt) {
                acc += ((x ^ m) - m) as i64;
            }
            out[o * positions + pos] = acc;
        }
    }
}

fn ternary_addsub(rows: &[i32], plus: &[Vec<u32>], minus: &[Vec<u32>], k: usize, positions: usize, skip: &[bool], out: &mut [i64]) {
    for (pos, row) in rows.chunks_exact(k).enumerate().take(positions) {
        for (o, (pl, mi)) in plus.iter().zip(minus).enumerate() {
            if skip.get(o).copied().unwrap_or(false) {
                continue;
            }
            let mut acc = 0i64;
            for &i in pl {
                acc += row[i as usize] as i64;
            }
            for &i in mi {
                acc -= row[i as usize] as i64;
            }
            out[o * positions + pos] = acc;
        }
    }
}

/// Runtime selection of wider vector units for the dense integer loops.
mod dispatch {
    use super::{binary_addsub_body, int_mac_body};

    macro_rules! multiversion {
        ($name:ident, $body:ident) => {
            pub fn $name(rows: &[i32], w: &[i32], k: usize, positions: usize, skip: &[bool], out: &mut [i64]) {
                #[cfg(target_arch = "x86_64")]
                {
                    if std::arch::is_x86_feature_detected!("avx2") {
                        #[target_feature(enable = "avx2")]
                        unsafe fn wide(rows: &[i32], w: &[i32], k: usize, positions: usize, skip: &[bool], out: &mut [i64]) {
                            $body(rows, w, k, positions, skip, out)
                        }
                        // SAFETY: avx2 support checked just above.
                        return unsafe { wide(rows, w, k, positions, skip, out) };
                    }
                }
                $body(rows, w, k, positions, skip, out)
            }
        };
    }

    multiversion!(int_mac, int_mac_body);
    multiversion!(binary_addsub, binary_addsub_body);
}
