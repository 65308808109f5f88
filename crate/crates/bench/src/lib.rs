//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siamq_core::evalbench::bench::BenchSize;
use siamq_core::quantize::{pack_codes, QuantScheme, QuantizedTensor};
use siamq_core::siamnet::FastKernel;
use siamq_core::tracker::BBox;
use siamq_core::{quantize, Result, Tensor};

/// Random weights and a random activation map for one convolution size.
pub struct ConvCase {
    pub size: BenchSize,
    pub weights: Vec<f32>,
    pub input: Tensor,
    pub codes: QuantizedTensor,
}

impl ConvCase {
    pub fn new(size: BenchSize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..size.params().weight_count()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let input = Tensor::from_fn([1, size.channels, size.height, size.width], |_| rng.gen_range(0.0f32..1.0));
        let codes = QuantizedTensor::quantize(&input, 8)?;
        Ok(Self { size, weights, input, codes })
    }

    pub fn kernel(&self, scheme: QuantScheme) -> Result<FastKernel> {
        FastKernel::new(&quantize::quantize(&self.weights, scheme)?, &self.size.params())
    }
}

/// Two packed ±1 vectors of length `n`.
pub fn popcount_pair(n: usize, seed: u64) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect::<Vec<i64>>();
    let (a, b) = (draw(), draw());
    Ok((pack_codes(&a, QuantScheme::Binary)?, pack_codes(&b, QuantScheme::Binary)?))
}

/// A textured frame with a bright square at `(cx, cy)`.
pub fn scene(cx: f64, cy: f64, side: f64) -> (Tensor, BBox) {
    let frame = Tensor::from_fn([1, 3, 240, 320], |[_, c, y, x]| {
        let inside = (x as f64 - cx).abs() < side / 2.0 && (y as f64 - cy).abs() < side / 2.0;
        if inside {
            0.9 - 0.2 * c as f32
        } else {
            0.3 + 0.1 * (((x / 7) + (y / 5) + c) % 3) as f32
        }
    });
    (frame, BBox::new(cx, cy, side, side))
}
