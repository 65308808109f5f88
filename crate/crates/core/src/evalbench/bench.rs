//! Throughput of the float and quantized convolution kernels.
//!
//! Every kernel is checked against the reference convolution before it is
//! timed; a mismatch aborts the run. Timings are single-threaded.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quantize::{binary_dot_popcount, pack_codes, quantize, QuantScheme, QuantizedTensor};
use crate::siamnet::FastKernel;
use crate::tensor::{conv2d, conv2d_im2col, ConvParams, Tensor};

pub const BENCH_CSV_HEADER: &str = "kernel,size,ns_per_call,effective_gops";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Fp32Reference,
    IntMac,
    TernaryAddSub,
    BinaryAddSub,
    BinaryPopcount,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 5] = [
        KernelFamily::Fp32Reference,
        KernelFamily::IntMac,
        KernelFamily::TernaryAddSub,
        KernelFamily::BinaryAddSub,
        KernelFamily::BinaryPopcount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Fp32Reference => "fp32_reference",
            KernelFamily::IntMac => "int_mac",
            KernelFamily::TernaryAddSub => "ternary_addsub",
            KernelFamily::BinaryAddSub => "binary_addsub",
            KernelFamily::BinaryPopcount => "binary_popcount",
        }
    }

    /// Weight format the family streams.
    pub fn weight_scheme(self) -> QuantScheme {
        match self {
            KernelFamily::Fp32Reference => QuantScheme::Float32,
            KernelFamily::IntMac => QuantScheme::UniformInt(8),
            KernelFamily::TernaryAddSub => QuantScheme::Ternary,
            KernelFamily::BinaryAddSub | KernelFamily::BinaryPopcount => QuantScheme::Binary,
        }
    }

    /// Bits per activation operand in the inner loop.
    pub fn activation_bits(self) -> usize {
        match self {
            KernelFamily::Fp32Reference => 32,
            KernelFamily::BinaryPopcount => 1,
            // Activation codes are widened to i32 lanes.
            _ => 32,
        }
    }
}

/// Operand bytes read to produce one output value, from the storage
/// formats alone: `(weight_bytes, activation_bytes)`.
pub fn bytes_touched_per_output(family: KernelFamily, fan_in: usize) -> (usize, usize) {
    let w = family.weight_scheme().payload_len(fan_in);
    let a = (fan_in * family.activation_bits()).div_ceil(8);
    (w, a)
}

/// One convolution shape: input `c x h x w`, square kernel, `o` filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSize {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub out_channels: usize,
}

impl BenchSize {
    pub fn params(&self) -> ConvParams {
        ConvParams { has_bias: false, ..ConvParams::square(self.kernel, 1, self.channels, self.out_channels) }
    }

    pub fn outputs(&self) -> usize {
        (self.height - self.kernel + 1) * (self.width - self.kernel + 1) * self.out_channels
    }

    pub fn macs(&self) -> usize {
        self.outputs() * self.params().fan_in()
    }

    /// Hidden-layer shapes of the default backbone on the exemplar branch.
    pub fn backbone_hidden() -> Vec<BenchSize> {
        vec![
            BenchSize { channels: 32, height: 29, width: 29, kernel: 5, out_channels: 64 },
            BenchSize { channels: 64, height: 25, width: 25, kernel: 3, out_channels: 64 },
            BenchSize { channels: 64, height: 23, width: 23, kernel: 3, out_channels: 64 },
            BenchSize { channels: 64, height: 21, width: 21, kernel: 3, out_channels: 48 },
        ]
    }
}

impl fmt::Display for BenchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}-k{}-o{}", self.channels, self.height, self.width, self.kernel, self.out_channels)
    }
}

impl FromStr for BenchSize {
    type Err = Error;

    /// `CxHxW-kK-oO`, e.g. `64x25x25-k3-o64`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bench size '{s}' is not of the form CxHxW-kK-oO"));
        let mut parts = s.trim().split('-');
        let dims: Vec<usize> = parts
            .next()
            .ok_or_else(bad)?
            .split('x')
            .map(|v| v.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let kernel = parts.next().and_then(|p| p.strip_prefix('k')).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let out_channels = parts.next().and_then(|p| p.strip_prefix('o')).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() || dims.len() != 3 {
            return Err(bad());
        }
        let size = BenchSize { channels: dims[0], height: dims[1], width: dims[2], kernel, out_channels };
        if kernel == 0 || out_channels == 0 || size.channels == 0 || kernel > size.height || kernel > size.width {
            return Err(bad());
        }
        Ok(size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: KernelFamily,
    pub size: BenchSize,
    /// Median over repetitions.
    pub ns_per_call: f64,
    pub effective_gops: f64,
    /// Spread across repetitions exceeded half the median.
    pub noisy: bool,
}

fn median_and_spread(mut ns: Vec<f64>) -> (f64, bool) {
    ns.sort_by(f64::total_cmp);
    let m = ns[ns.len() / 2];
    let spread = ns[ns.len() - 1] - ns[0];
    (m, spread > 0.5 * m)
}

fn time<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<(f64, bool)> {
    f()?;
    let mut ns = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        ns.push(t.elapsed().as_nanos() as f64);
    }
    Ok(median_and_spread(ns))
}

struct Case {
    weights: Vec<f32>,
    input: Tensor,
    codes: QuantizedTensor,
}

fn make_case(size: &BenchSize, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = size.params();
    let weights = (0..p.weight_count()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let input = Tensor::from_fn([1, size.channels, size.height, size.width], |_| rng.gen_range(0.0f32..1.0));
    let codes = QuantizedTensor::quantize(&input, 8)?;
    Ok(Case { weights, input, codes })
}

fn check_float(size: &BenchSize, case: &Case) -> Result<()> {
    let p = size.params();
    let fast = conv2d_im2col(&case.input, &case.weights, None, &p)?;
    let w = Tensor::from_real(p.weight_dims(), case.weights.clone())?;
    let reference = conv2d(&case.input, &w, None, &p)?;
    let (a, b) = (fast.real()?, reference.real()?);
    let max = b.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
    if a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-5 * max) {
        return Err(Error::Contract(format!("fp32_reference disagrees with the reference convolution on {size}")));
    }
    Ok(())
}

fn check_quantized(family: KernelFamily, size: &BenchSize, case: &Case, kernel: &FastKernel, block: &crate::quantize::QuantizedBlock) -> Result<()> {
    let p = size.params();
    let acc = kernel.accumulate(&case.codes, &[])?;
    let w = Tensor::from_int(p.weight_dims(), block.codes()?)?;
    let reference = conv2d(&case.codes.codes, &w, None, &p)?;
    if acc.int()? != reference.int()? {
        return Err(Error::Contract(format!("{} disagrees with the reference convolution on {size}", family.name())));
    }
    Ok(())
}

/// Packed random ±1 operands of length `n`, checked against the naive dot.
fn popcount_operands(n: usize, seed: u64) -> Result<(Vec<u8>, Vec<u8>, i64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<i64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
    let b: Vec<i64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
    let dot = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let (pa, pb) = (pack_codes(&a, QuantScheme::Binary)?, pack_codes(&b, QuantScheme::Binary)?);
    if binary_dot_popcount(&pa, &pb, n)? != dot {
        return Err(Error::Contract(format!("binary_popcount disagrees with the naive dot product at n = {n}")));
    }
    Ok((pa, pb, dot))
}

/// Gate, then time, every kernel family on every size.
pub fn bench_kernels(sizes: &[BenchSize], repetitions: usize) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || repetitions == 0 {
        return Err(Error::Config("benchmark needs at least one size and one repetition".into()));
    }
    let mut rows = Vec::new();
    for (si, size) in sizes.iter().enumerate() {
        let case = make_case(size, si as u64)?;
        let p = size.params();
        for family in KernelFamily::ALL {
            let ops;
            let (ns, noisy) = match family {
                KernelFamily::Fp32Reference => {
                    check_float(size, &case)?;
                    ops = 2 * size.macs();
                    time(repetitions, || conv2d_im2col(&case.input, &case.weights, None, &p).map(drop))?
                }
                KernelFamily::BinaryPopcount => {
                    let n = p.fan_in();
                    let (pa, pb, dot) = popcount_operands(n, si as u64)?;
                    ops = 2 * n;
                    // Batch calls so the timer resolves them.
                    let batch = 4096;
                    let (ns, noisy) = time(repetitions, || {
                        let mut s = 0i64;
                        for _ in 0..batch {
                            s = s.wrapping_add(binary_dot_popcount(std::hint::black_box(&pa), &pb, n)?);
                        }
                        if s != dot.wrapping_mul(batch) {
                            return Err(Error::Contract("popcount result drifted during timing".into()));
                        }
                        Ok(())
                    })?;
                    (ns / batch as f64, noisy)
                }
                _ => {
                    let block = quantize(&case.weights, family.weight_scheme())?;
                    let kernel = FastKernel::new(&block, &p)?;
                    check_quantized(family, size, &case, &kernel, &block)?;
                    ops = 2 * size.macs();
                    time(repetitions, || kernel.accumulate(&case.codes, &[]).map(drop))?
                }
            };
            if noisy {
                log::warn!("{} on {size}: timing spread above 50% of the median", family.name());
            }
            let ns = ns.max(1e-3);
            rows.push(BenchRow {
                kernel: family,
                size: *size,
                ns_per_call: ns,
                effective_gops: ops as f64 / ns,
                noisy,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(BENCH_CSV_HEADER.split(',')).map_err(fmt_err)?;
    for r in rows {
        w.write_record([
            r.kernel.name().to_string(),
            r.size.to_string(),
            format!("{:.1}", r.ns_per_call),
            format!("{:.4}", r.effective_gops),
        ])
        .map_err(fmt_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        let s: BenchSize = "64x25x25-k3-o64".parse().unwrap();
        assert_eq!(s, BenchSize::backbone_hidden()[1]);
        assert_eq!(s.to_string(), "64x25x25-k3-o64");
        for bad in ["64x25-k3-o64", "64x25x25-k3", "64x25x25-k30-o4", "ax1x1-k1-o1", "1x1x1-k1-o1-z"] {
            assert!(bad.parse::<BenchSize>().is_err(), "{bad}");
        }
    }

    #[test]
    fn bytes_model() {
        for k in [576, 800] {
            let (fw, fa) = bytes_touched_per_output(KernelFamily::Fp32Reference, k);
            let (bw, _) = bytes_touched_per_output(KernelFamily::BinaryAddSub, k);
            let (pw, pa) = bytes_touched_per_output(KernelFamily::BinaryPopcount, k);
            assert_eq!((fw, fa), (4 * k, 4 * k));
            assert_eq!(bw * 32, fw);
            assert_eq!((pw + pa) * 32, fw + fa);
        }
    }

    #[test]
    fn small_run() {
        let sizes = [BenchSize { channels: 3, height: 9, width: 9, kernel: 3, out_channels: 4 }];
        let rows = bench_kernels(&sizes, 3).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.ns_per_call.is_finite() && r.ns_per_call > 0.0));
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), BENCH_CSV_HEADER);
        assert_eq!(text.lines().count(), 6);
    }
}
