//! Dense rank-4 tensors and the reference numeric kernels.
//!
//! Everything here is deliberately straightforward: these kernels are the
//! oracles the quantized fast paths and the training engine are checked
//! against. The one exception is [`conv2d_im2col`], the production float
//! convolution, which lowers to a GEMM.

use crate::error::{Error, Result};
use crate::kernels::{im2col, Gemm};

/// Scalar storage of a [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(Vec<f32>),
    Int(Vec<i64>),
}

/// Numeric domain tag, used in error messages and dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Real,
    Int,
}

/// Dense `(batch, channels, height, width)` array, row-major, width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: TensorData,
}

impl Tensor {
    pub fn from_real(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self {
            dims,
            data: TensorData::Real(data),
        })
    }

    pub fn from_int(dims: [usize; 4], data: Vec<i64>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self {
            dims,
            data: TensorData::Int(data),
        })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: TensorData::Real(vec![0.0; dims.iter().product()]),
        }
    }

    pub fn filled(dims: [usize; 4], value: f32) -> Self {
        Self {
            dims,
            data: TensorData::Real(vec![value; dims.iter().product()]),
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self {
            dims,
            data: TensorData::Real(data),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain(&self) -> Domain {
        match self.data {
            TensorData::Real(_) => Domain::Real,
            TensorData::Int(_) => Domain::Int,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn real(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::Real(v) => Ok(v),
            TensorData::Int(_) => Err(Error::Domain("expected a real tensor, got integer".into())),
        }
    }

    pub fn real_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::Real(v) => Ok(v),
            TensorData::Int(_) => Err(Error::Domain("expected a real tensor, got integer".into())),
        }
    }

    pub fn int(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::Int(v) => Ok(v),
            TensorData::Real(_) => Err(Error::Domain("expected an integer tensor, got real".into())),
        }
    }

    pub fn into_real(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::Real(v) => Ok(v),
            TensorData::Int(_) => Err(Error::Domain("expected a real tensor, got integer".into())),
        }
    }

    /// Flat index of `(n, c, h, w)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    /// Real value at `(n, c, h, w)`; panics on integer tensors.
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let i = self.index(n, c, h, w);
        match &self.data {
            TensorData::Real(v) => v[i],
            TensorData::Int(_) => panic!("Tensor::at on an integer tensor"),
        }
    }

    /// Integer tensor converted to reals and multiplied by `scale`.
    pub fn scaled_to_real(&self, scale: f32) -> Result<Tensor> {
        let v = self.int()?;
        let data = v.iter().map(|&x| (x as f64 * scale as f64) as f32).collect();
        Tensor::from_real(self.dims, data)
    }

    /// Channel `c` of batch item `n` as a contiguous slice.
    pub fn plane(&self, n: usize, c: usize) -> Result<&[f32]> {
        let hw = self.dims[2] * self.dims[3];
        let start = self.index(n, c, 0, 0);
        Ok(&self.real()?[start..start + hw])
    }
}

fn check_len(dims: [usize; 4], len: usize) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != len {
        return Err(Error::shape(
            "data",
            format!("dims {dims:?} need {expected} elements, got {len}"),
        ));
    }
    Ok(())
}

/// Geometry of one convolution layer. Convolutions are always valid
/// (unpadded) and never flip the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvParams {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvParams {
    pub fn square(k: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            stride,
            in_channels,
            out_channels,
            has_bias: true,
        }
    }

    /// Weights per output filter.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kh, self.kw]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 {
            return Err(Error::Config("kernel dims must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Output spatial dims for an `h` x `w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            out_dim(h, self.kh, self.stride, "height")?,
            out_dim(w, self.kw, self.stride, "width")?,
        ))
    }
}

/// `floor((input - k) / stride) + 1`, or a shape error if the window does
/// not fit.
pub fn out_dim(input: usize, k: usize, stride: usize, axis: &'static str) -> Result<usize> {
    if k > input {
        return Err(Error::shape(axis, format!("window {k} exceeds input {input}")));
    }
    Ok((input - k) / stride + 1)
}

pub(crate) fn check_conv_shapes(input: &Tensor, weight_dims: [usize; 4], params: &ConvParams) -> Result<(usize, usize)> {
    params.validate()?;
    if input.channels() != params.in_channels {
        return Err(Error::shape(
            "channels",
            format!("input has {} channels, layer expects {}", input.channels(), params.in_channels),
        ));
    }
    if weight_dims != params.weight_dims() {
        return Err(Error::shape(
            "weights",
            format!("weights are {weight_dims:?}, layer expects {:?}", params.weight_dims()),
        ));
    }
    params.output_hw(input.height(), input.width())
}

/// Reference valid convolution.
///
/// Real inputs accumulate in `f64`; integer inputs in `i64`. Both operands
/// must share a domain, and a bias is only accepted for real tensors.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: Option<&[f32]>, params: &ConvParams) -> Result<Tensor> {
    let (oh, ow) = check_conv_shapes(input, weights.dims(), params)?;
    if let Some(b) = bias {
        if b.len() != params.out_channels {
            return Err(Error::shape("bias", format!("{} values for {} filters", b.len(), params.out_channels)));
        }
    }
    let out_dims = [input.batch(), params.out_channels, oh, ow];
    match (input.data(), weights.data()) {
        (TensorData::Real(x), TensorData::Real(k)) => {
            let out = conv_ref(input.dims(), x, k, params, oh, ow, 0.0f64, |a, b| a as f64 * b as f64);
            let out = out
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    let o = (i / (oh * ow)) % params.out_channels;
                    (v + bias.map_or(0.0, |b| b[o] as f64)) as f32
                })
                .collect();
            Tensor::from_real(out_dims, out)
        }
        (TensorData::Int(x), TensorData::Int(k)) => {
            if bias.is_some() {
                return Err(Error::Domain("real bias passed to an integer convolution".into()));
            }
            let out = conv_ref(input.dims(), x, k, params, oh, ow, 0i64, |a, b| a * b);
            Tensor::from_int(out_dims, out)
        }
        _ => Err(Error::Domain(format!(
            "conv2d mixes {:?} input with {:?} weights",
            input.domain(),
            weights.domain()
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_ref<T: Copy, A: Copy + std::ops::Add<Output = A>>(
    dims: [usize; 4],
    x: &[T],
    k: &[T],
    p: &ConvParams,
    oh: usize,
    ow: usize,
    zero: A,
    mul: impl Fn(T, T) -> A,
) -> Vec<A> {
    let [n_batch, cin, h, w] = dims;
    let mut out = Vec::with_capacity(n_batch * p.out_channels * oh * ow);
    for n in 0..n_batch {
        for o in 0..p.out_channels {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = zero;
                    for c in 0..cin {
                        for i in 0..p.kh {
                            let row = ((n * cin + c) * h + y * p.stride + i) * w + xo * p.stride;
                            let krow = ((o * cin + c) * p.kh + i) * p.kw;
                            for j in 0..p.kw {
                                acc = acc + mul(x[row + j], k[krow + j]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Production float convolution: im2col lowering followed by a GEMM.
///
/// Agrees with [`conv2d`] up to `f32` summation order.
pub fn conv2d_im2col(input: &Tensor, weights: &[f32], bias: Option<&[f32]>, params: &ConvParams) -> Result<Tensor> {
    let (oh, ow) = check_conv_shapes(input, params.weight_dims(), params)?;
    if weights.len() != params.weight_count() {
        return Err(Error::shape("weights", format!("{} values for {:?}", weights.len(), params.weight_dims())));
    }
    let x = input.real()?;
    let [n_batch, c, h, w] = input.dims();
    let k = params.fan_in();
    let positions = oh * ow;
    let mut out = vec![0.0f32; n_batch * params.out_channels * positions];
    let mut cols = vec![0.0f32; k * positions];
    for n in 0..n_batch {
        let plane = &x[n * c * h * w..(n + 1) * c * h * w];
        im2col(plane, [c, h, w], params, &mut cols);
        let dst = &mut out[n * params.out_channels * positions..(n + 1) * params.out_channels * positions];
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(positions).enumerate() {
                row.fill(b[o]);
            }
        }
        f32::gemm_nn(params.out_channels, k, positions, weights, &cols, dst, bias.is_some());
    }
    Tensor::from_real([n_batch, params.out_channels, oh, ow], out)
}

/// Max pooling with a square `k` x `k` window.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    if k == 0 || stride == 0 {
        return Err(Error::Config("pool window and stride must be >= 1".into()));
    }
    let oh = out_dim(input.height(), k, stride, "height")?;
    let ow = out_dim(input.width(), k, stride, "width")?;
    let [nb, c, h, w] = input.dims();
    let out_dims = [nb, c, oh, ow];
    #[allow(clippy::too_many_arguments)]
    fn pool<T: Copy + PartialOrd>(x: &[T], nc: usize, h: usize, w: usize, k: usize, s: usize, oh: usize, ow: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(nc * oh * ow);
        for plane in x.chunks(h * w).take(nc) {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = plane[y * s * w + xo * s];
                    for i in 0..k {
                        for j in 0..k {
                            let v = plane[(y * s + i) * w + xo * s + j];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
        out
    }
    match input.data() {
        TensorData::Real(x) => Tensor::from_real(out_dims, pool(x, nb * c, h, w, k, stride, oh, ow)),
        TensorData::Int(x) => Tensor::from_int(out_dims, pool(x, nb * c, h, w, k, stride, oh, ow)),
    }
}

/// Dense cross-correlation of a search block with an exemplar block.
///
/// The exemplar acts as one multi-channel kernel slid with stride 1; the
/// output is `1 x 1 x (Hs - Hz + 1) x (Ws - Wz + 1)` per batch item.
pub fn xcorr(search: &Tensor, exemplar: &Tensor) -> Result<Tensor> {
    if search.channels() != exemplar.channels() {
        return Err(Error::shape(
            "channels",
            format!("search has {} channels, exemplar {}", search.channels(), exemplar.channels()),
        ));
    }
    if exemplar.batch() != 1 {
        return Err(Error::shape("batch", "exemplar batch must be 1"));
    }
    let oh = out_dim(search.height(), exemplar.height(), 1, "height")?;
    let ow = out_dim(search.width(), exemplar.width(), 1, "width")?;
    let s = search.real()?;
    let z = exemplar.real()?;
    let [nb, c, hs, ws] = search.dims();
    let (hz, wz) = (exemplar.height(), exemplar.width());
    let mut out = vec![0.0f64; nb * oh * ow];
    for n in 0..nb {
        let acc = &mut out[n * oh * ow..(n + 1) * oh * ow];
        // Channel-outer order: each output accumulates channel by channel.
        for ch in 0..c {
            let splane = &s[(n * c + ch) * hs * ws..(n * c + ch + 1) * hs * ws];
            let zplane = &z[ch * hz * wz..(ch + 1) * hz * wz];
            for y in 0..oh {
                for x in 0..ow {
                    let mut sum = 0.0f64;
                    for i in 0..hz {
                        let srow = &splane[(y + i) * ws + x..(y + i) * ws + x + wz];
                        let zrow = &zplane[i * wz..(i + 1) * wz];
                        for (a, b) in srow.iter().zip(zrow) {
                            sum += *a as f64 * *b as f64;
                        }
                    }
                    acc[y * ow + x] += sum;
                }
            }
        }
    }
    Tensor::from_real([nb, 1, oh, ow], out.into_iter().map(|v| v as f32).collect())
}

/// Bilinear resampling with half-pixel centres (align-corners off).
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("height", format!("target size {out_h}x{out_w} is empty")));
    }
    if image.is_empty() {
        return Err(Error::shape("height", "cannot resize an empty image"));
    }
    let x = image.real()?;
    let [nb, c, h, w] = image.dims();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut out = Vec::with_capacity(nb * c * out_h * out_w);
    for plane in x.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_real([nb, c, out_h, out_w], out)
}
