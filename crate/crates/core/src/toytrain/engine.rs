//! Explicit reverse-mode training engine.
//!
//! The forward pass mirrors [`SiamNetwork::embed_any`] on fake-quantized
//! operands: weights are quantized and dequantized once per step, activations
//! after every ReLU (and the input patch) whenever the config quantizes
//! activations. Gradients flow back through xcorr, the convolutions, pooling
//! and ReLU; quantizers use the straight-through estimator, clipped to
//! `|w| <= 1` for quantized weights and unclipped for activations.

use num_traits::NumCast;

use super::labels::{loss_slice, LabelMap};
use crate::error::{Error, Result};
use crate::kernels::{col2im, im2col, Gemm};
use crate::quantize::{dequantize, quantize, QuantConfig, QuantScheme};
use crate::siamnet::{Layer, NetworkManifest, ScoreHead, SiamNetwork};
use crate::tensor::{ConvParams, Tensor};

fn cast<T: Gemm>(v: f64) -> T {
    <T as NumCast>::from(v).expect("finite cast")
}

fn f64_of<T: Gemm>(v: T) -> f64 {
    v.to_f64().expect("finite cast")
}

#[derive(Debug, Clone)]
struct ConvState<T> {
    params: ConvParams,
    scheme: QuantScheme,
    weights: Vec<T>,
    bias: Option<Vec<T>>,
    pruned: Vec<usize>,
}

/// Trainable copy of a network's real-valued parameters.
#[derive(Debug, Clone)]
pub struct TrainModel<T: Gemm> {
    manifest: NetworkManifest,
    config: QuantConfig,
    convs: Vec<ConvState<T>>,
    gain: T,
    head_bias: T,
}

/// Parameter gradients, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Option<Vec<T>>>,
    pub gain: T,
    pub head_bias: T,
}

impl<T: Gemm> Gradients<T> {
    pub fn scale(&mut self, f: T) {
        for w in self.weights.iter_mut().chain(self.biases.iter_mut().flatten()) {
            w.iter_mut().for_each(|v| *v = *v * f);
        }
        self.gain = self.gain * f;
        self.head_bias = self.head_bias * f;
    }

    pub fn is_zero(&self) -> bool {
        let zero = T::zero();
        self.weights.iter().chain(self.biases.iter().flatten()).all(|w| w.iter().all(|&v| v == zero))
            && self.gain == zero
            && self.head_bias == zero
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter().flatten()).all(|w| w.iter().all(|v| v.is_finite()))
            && self.gain.is_finite()
            && self.head_bias.is_finite()
    }
}

/// Per-step forward operands: fake-quantized weights and STE pass masks.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    weights: Vec<Vec<T>>,
    ste: Vec<Option<Vec<bool>>>,
}

enum Cache<T> {
    Conv { cols: Vec<T>, in_dims: [usize; 3] },
    Pool { argmax: Vec<u32>, in_dims: [usize; 3] },
    Act { mask: Vec<bool> },
}

struct Branch<T> {
    out: Vec<T>,
    dims: [usize; 3],
    caches: Vec<Cache<T>>,
}

/// Scores of one pair plus what the backward pass needs.
pub struct PairTrace<T> {
    z: Branch<T>,
    x: Branch<T>,
    raw: Vec<T>,
    map: usize,
    pub scores: Vec<T>,
}

impl<T> PairTrace<T> {
    pub fn map_size(&self) -> usize {
        self.map
    }
}

fn activation_bits(config: &QuantConfig) -> Option<u32> {
    match config.activations {
        QuantScheme::UniformInt(b) => Some(b as u32),
        _ => None,
    }
}

/// Round to the `bits`-bit symmetric grid of the tensor's own range.
fn fake_quant<T: Gemm>(x: &mut [T], bits: u32) {
    let max = x.iter().fold(0.0f64, |m, &v| m.max(f64_of(v).abs()));
    if max == 0.0 {
        return;
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let ratio = qmax / max;
    let scale = (max / qmax) as f32 as f64;
    for v in x {
        *v = cast((f64_of(*v) * ratio).round().clamp(-qmax, qmax) * scale);
    }
}

fn to_vec<T: Gemm>(t: &Tensor) -> Result<Vec<T>> {
    Ok(t.real()?.iter().map(|&v| T::from_f32(v)).collect())
}

impl<T: Gemm> TrainModel<T> {
    /// Requires the network's shadow weights.
    pub fn from_network(net: &SiamNetwork) -> Result<Self> {
        if !net.has_shadow() {
            return Err(Error::Contract("network was loaded for inference only and has no shadow weights".into()));
        }
        let groups: Vec<(ConvParams, _)> = net.manifest().convs().map(|(p, g)| (*p, g)).collect();
        let mut convs = Vec::with_capacity(groups.len());
        for ((params, group), (cw, (w, b))) in groups.into_iter().zip(net.conv_weights().iter().zip(net.real_weights()?)) {
            convs.push(ConvState {
                params,
                scheme: net.config().scheme_for(group)?,
                weights: w.into_iter().map(T::from_f32).collect(),
                bias: b.map(|b| b.into_iter().map(T::from_f32).collect()),
                pruned: cw.pruned().to_vec(),
            });
        }
        let head = net.head();
        Ok(Self {
            manifest: net.manifest().clone(),
            config: *net.config(),
            convs,
            gain: T::from_f32(head.gain),
            head_bias: T::from_f32(head.bias),
        })
    }

    /// Back to an inference network, quantizing the current real weights.
    pub fn to_network(&self) -> Result<SiamNetwork> {
        let weights = self
            .convs
            .iter()
            .map(|c| {
                (
                    c.weights.iter().map(|&v| Gemm::to_f32(v)).collect(),
                    c.bias.as_ref().map(|b| b.iter().map(|&v| Gemm::to_f32(v)).collect()),
                )
            })
            .collect();
        let head = ScoreHead {
            gain: Gemm::to_f32(self.gain),
            bias: Gemm::to_f32(self.head_bias),
        };
        let mut net = SiamNetwork::from_shadow(self.manifest.clone(), self.config, weights, head)?;
        for (i, c) in self.convs.iter().enumerate() {
            net.set_pruned(i, c.pruned.clone())?;
        }
        Ok(net)
    }

    pub fn manifest(&self) -> &NetworkManifest {
        &self.manifest
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.convs[layer].weights
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        &mut self.convs[layer].weights
    }

    pub fn bias(&self, layer: usize) -> Option<&[T]> {
        self.convs[layer].bias.as_deref()
    }

    pub fn bias_mut(&mut self, layer: usize) -> Option<&mut [T]> {
        self.convs[layer].bias.as_deref_mut()
    }

    pub fn head(&self) -> (T, T) {
        (self.gain, self.head_bias)
    }

    pub fn set_head(&mut self, gain: T, bias: T) {
        self.gain = gain;
        self.head_bias = bias;
    }

    pub fn pruned(&self, layer: usize) -> &[usize] {
        &self.convs[layer].pruned
    }

    /// Mask filters of `layer`, zeroing their weights and biases.
    pub fn prune(&mut self, layer: usize, filters: &[usize]) -> Result<()> {
        let c = &mut self.convs[layer];
        let fan_in = c.params.fan_in();
        for &o in filters {
            if o >= c.params.out_channels {
                return Err(Error::Config(format!("filter {o} out of range")));
            }
            c.weights[o * fan_in..(o + 1) * fan_in].fill(T::zero());
            if let Some(b) = &mut c.bias {
                b[o] = T::zero();
            }
            c.pruned.push(o);
        }
        c.pruned.sort_unstable();
        c.pruned.dedup();
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            weights: self.convs.iter().map(|c| vec![T::zero(); c.weights.len()]).collect(),
            biases: self.convs.iter().map(|c| c.bias.as_ref().map(|b| vec![T::zero(); b.len()])).collect(),
            gain: T::zero(),
            head_bias: T::zero(),
        }
    }

    /// Quantize-dequantize every layer's weights for the coming forward.
    pub fn prepare(&self) -> Result<Prepared<T>> {
        let mut weights = Vec::with_capacity(self.convs.len());
        let mut ste = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            if c.scheme.is_float() {
                weights.push(c.weights.clone());
                ste.push(None);
            } else {
                let real: Vec<f32> = c.weights.iter().map(|&v| Gemm::to_f32(v)).collect();
                let deq = dequantize(&quantize(&real, c.scheme)?)?;
                weights.push(deq.into_iter().map(T::from_f32).collect());
                ste.push(Some(c.weights.iter().map(|v| f64_of(*v).abs() <= 1.0).collect()));
            }
        }
        Ok(Prepared { weights, ste })
    }

    fn branch(&self, prep: &Prepared<T>, patch: &Tensor, keep: bool) -> Result<Branch<T>> {
        self.branch_until(prep, patch, keep, usize::MAX)
    }

    /// Output of conv layer `conv` (before its activation) for one patch.
    pub fn conv_output(&self, prep: &Prepared<T>, patch: &Tensor, conv: usize) -> Result<(Vec<T>, [usize; 3])> {
        let b = self.branch_until(prep, patch, false, conv)?;
        Ok((b.out, b.dims))
    }

    fn branch_until(&self, prep: &Prepared<T>, patch: &Tensor, keep: bool, stop: usize) -> Result<Branch<T>> {
        let [n, c, h, w] = patch.dims();
        if n != 1 || c != self.manifest.input_channels() {
            return Err(Error::shape("patch", format!("expected one {}-channel patch, got {:?}", self.manifest.input_channels(), patch.dims())));
        }
        let bits = activation_bits(&self.config);
        let mut x = to_vec::<T>(patch)?;
        if let Some(b) = bits {
            fake_quant(&mut x, b);
        }
        let mut dims = [c, h, w];
        let mut caches = Vec::new();
        let mut conv_idx = 0;
        for layer in self.manifest.layers() {
            match layer {
                Layer::Conv { params, .. } => {
                    let state = &self.convs[conv_idx];
                    let wts = &prep.weights[conv_idx];
                    conv_idx += 1;
                    let (oh, ow) = params.output_hw(dims[1], dims[2])?;
                    if dims[0] != params.in_channels {
                        return Err(Error::shape("channels", "activation does not match the convolution"));
                    }
                    let k = params.fan_in();
                    let p = oh * ow;
                    let mut cols = vec![T::zero(); k * p];
                    im2col(&x, dims, params, &mut cols);
                    let mut out = vec![T::zero(); params.out_channels * p];
                    T::gemm_nn(params.out_channels, k, p, wts, &cols, &mut out, false);
                    if let Some(b) = &state.bias {
                        for (row, &bv) in out.chunks_mut(p).zip(b) {
                            row.iter_mut().for_each(|v| *v += bv);
                        }
                    }
                    for &o in &state.pruned {
                        out[o * p..(o + 1) * p].fill(T::zero());
                    }
                    if keep {
                        caches.push(Cache::Conv { cols, in_dims: dims });
                    }
                    x = out;
                    dims = [params.out_channels, oh, ow];
                    if conv_idx > stop {
                        break;
                    }
                }
                Layer::MaxPool { k, stride, .. } => {
                    let (k, s) = (*k, *stride);
                    let [c, h, w] = dims;
                    let oh = crate::tensor::out_dim(h, k, s, "height")?;
                    let ow = crate::tensor::out_dim(w, k, s, "width")?;
                    let mut out = Vec::with_capacity(c * oh * ow);
                    let mut argmax = Vec::with_capacity(c * oh * ow);
                    for ch in 0..c {
                        let plane = &x[ch * h * w..(ch + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = y * s * w + xx * s;
                                for i in 0..k {
                                    for j in 0..k {
                                        let idx = (y * s + i) * w + xx * s + j;
                                        if plane[idx] > plane[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                out.push(plane[best]);
                                argmax.push((ch * h * w + best) as u32);
                            }
                        }
                    }
                    if keep {
                        caches.push(Cache::Pool { argmax, in_dims: dims });
                    }
                    x = out;
                    dims = [c, oh, ow];
                }
                Layer::Activation { .. } => {
                    let mask: Vec<bool> = x.iter().map(|&v| v > T::zero()).collect();
                    for (v, &m) in x.iter_mut().zip(&mask) {
                        if !m {
                            *v = T::zero();
                        }
                    }
                    if let Some(b) = bits {
                        fake_quant(&mut x, b);
                    }
                    if keep {
                        caches.push(Cache::Act { mask });
                    }
                }
            }
        }
        Ok(Branch { out: x, dims, caches })
    }

    fn branch_backward(&self, prep: &Prepared<T>, branch: &Branch<T>, upstream: Vec<T>, grads: &mut Gradients<T>) {
        let mut g = upstream;
        let mut conv_idx = self.convs.len();
        let mut caches = branch.caches.iter().rev();
        for layer in self.manifest.layers().iter().rev() {
            let cache = caches.next().expect("one cache per layer");
            match (layer, cache) {
                (Layer::Conv { params, .. }, Cache::Conv { cols, in_dims }) => {
                    conv_idx -= 1;
                    let state = &self.convs[conv_idx];
                    let k = params.fan_in();
                    let p = cols.len() / k;
                    let o = params.out_channels;
                    for &f in &state.pruned {
                        g[f * p..(f + 1) * p].fill(T::zero());
                    }
                    T::gemm(o, p, k, &g, false, cols, true, &mut grads.weights[conv_idx], true);
                    if let Some(gb) = &mut grads.biases[conv_idx] {
                        for (acc, row) in gb.iter_mut().zip(g.chunks(p)) {
                            *acc += row.iter().fold(T::zero(), |s, &v| s + v);
                        }
                    }
                    if conv_idx == 0 {
                        return;
                    }
                    let mut dcols = vec![T::zero(); k * p];
                    T::gemm(k, o, p, &prep.weights[conv_idx], true, &g, false, &mut dcols, false);
                    let mut dx = vec![T::zero(); in_dims.iter().product()];
                    col2im(&dcols, *in_dims, params, &mut dx);
                    g = dx;
                }
                (Layer::MaxPool { .. }, Cache::Pool { argmax, in_dims }) => {
                    let mut dx = vec![T::zero(); in_dims.iter().product()];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        dx[idx as usize] += gv;
                    }
                    g = dx;
                }
                (Layer::Activation { .. }, Cache::Act { mask }) => {
                    for (v, &m) in g.iter_mut().zip(mask) {
                        if !m {
                            *v = T::zero();
                        }
                    }
                }
                _ => unreachable!("cache order follows the manifest"),
            }
        }
    }

    /// Forward both branches and the affine head. `keep` retains caches.
    pub fn forward(&self, prep: &Prepared<T>, z: &Tensor, x: &Tensor, keep: bool) -> Result<PairTrace<T>> {
        let zb = self.branch(prep, z, keep)?;
        let xb = self.branch(prep, x, keep)?;
        let [c, hz, wz] = zb.dims;
        let [cx, hx, wx] = xb.dims;
        if c != cx || hz > hx || wz > wx || hz != wz || hx != wx {
            return Err(Error::shape("embedding", format!("exemplar {:?} vs search {:?}", zb.dims, xb.dims)));
        }
        let map = hx - hz + 1;
        let mut raw = vec![T::zero(); map * map];
        for ch in 0..c {
            for u in 0..hz {
                for v in 0..wz {
                    let zv = zb.out[(ch * hz + u) * wz + v];
                    for i in 0..map {
                        let row = &xb.out[(ch * hx + i + u) * wx + v..][..map];
                        for (o, &xv) in raw[i * map..(i + 1) * map].iter_mut().zip(row) {
                            *o += zv * xv;
                        }
                    }
                }
            }
        }
        let scores = raw.iter().map(|&r| self.gain * r + self.head_bias).collect();
        Ok(PairTrace { z: zb, x: xb, raw, map, scores })
    }

    /// Accumulate parameter gradients for upstream `d loss / d scores`.
    pub fn backward(&self, prep: &Prepared<T>, trace: &PairTrace<T>, upstream: &[T], grads: &mut Gradients<T>) -> Result<()> {
        if upstream.len() != trace.scores.len() {
            return Err(Error::shape("score map", "upstream gradient does not match the scores"));
        }
        if trace.z.caches.is_empty() && !self.manifest.layers().is_empty() {
            return Err(Error::Contract("forward ran without caches".into()));
        }
        let map = trace.map;
        let [c, hz, wz] = trace.z.dims;
        let [_, hx, wx] = trace.x.dims;
        let mut draw = vec![T::zero(); map * map];
        for ((d, &u), &r) in draw.iter_mut().zip(upstream).zip(&trace.raw) {
            grads.gain += u * r;
            grads.head_bias += u;
            *d = u * self.gain;
        }
        let mut dz = vec![T::zero(); trace.z.out.len()];
        let mut dx = vec![T::zero(); trace.x.out.len()];
        for ch in 0..c {
            for u in 0..hz {
                for v in 0..wz {
                    let zi = (ch * hz + u) * wz + v;
                    let zv = trace.z.out[zi];
                    let mut acc = T::zero();
                    for i in 0..map {
                        let base = (ch * hx + i + u) * wx + v;
                        let grow = &draw[i * map..(i + 1) * map];
                        let xrow = &trace.x.out[base..base + map];
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            acc += gv * xv;
                        }
                        for (d, &gv) in dx[base..base + map].iter_mut().zip(grow) {
                            *d += gv * zv;
                        }
                    }
                    dz[zi] = acc;
                }
            }
        }
        let mut local = self.zero_gradients();
        self.branch_backward(prep, &trace.z, dz, &mut local);
        self.branch_backward(prep, &trace.x, dx, &mut local);
        for (i, ste) in prep.ste.iter().enumerate() {
            if let Some(mask) = ste {
                for (gv, &pass) in local.weights[i].iter_mut().zip(mask) {
                    if !pass {
                        *gv = T::zero();
                    }
                }
            }
        }
        for (acc, l) in grads.weights.iter_mut().zip(&local.weights) {
            acc.iter_mut().zip(l).for_each(|(a, &b)| *a += b);
        }
        for (acc, l) in grads.biases.iter_mut().zip(&local.biases) {
            if let (Some(a), Some(b)) = (acc, l) {
                a.iter_mut().zip(b).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(())
    }

    /// Loss of one pair, accumulating its gradient into `grads`.
    pub fn loss_grad(&self, prep: &Prepared<T>, z: &Tensor, x: &Tensor, labels: &LabelMap, grads: &mut Gradients<T>) -> Result<(f64, PairTrace<T>)> {
        let trace = self.forward(prep, z, x, true)?;
        let (loss, g) = self.loss_of(&trace, labels)?;
        let upstream: Vec<T> = g.into_iter().map(cast).collect();
        self.backward(prep, &trace, &upstream, grads)?;
        Ok((loss, trace))
    }

    fn loss_of(&self, trace: &PairTrace<T>, labels: &LabelMap) -> Result<(f64, Vec<f64>)> {
        if labels.size != trace.map {
            return Err(Error::shape("score map", format!("labels are {0}x{0}, map is {1}x{1}", labels.size, trace.map)));
        }
        let scores: Vec<f64> = trace.scores.iter().map(|&v| f64_of(v)).collect();
        Ok(loss_slice(&scores, labels))
    }

    /// Loss without gradients.
    pub fn loss(&self, prep: &Prepared<T>, z: &Tensor, x: &Tensor, labels: &LabelMap) -> Result<(f64, PairTrace<T>)> {
        let trace = self.forward(prep, z, x, false)?;
        Ok((self.loss_of(&trace, labels)?.0, trace))
    }

    /// `v = momentum * v + g + decay * w; w -= lr * v`, pruned filters frozen;
    /// the head gain is stepped as `gain = gain_unit * theta` in `theta`, or
    /// frozen when `gain_unit` is zero.
    #[allow(clippy::too_many_arguments)]
    pub fn sgd_step(&mut self, grads: &Gradients<T>, velocity: &mut Gradients<T>, lr: T, momentum: T, decay: T, gain_unit: T) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            let fan_in = c.params.fan_in();
            for (j, (w, (v, &g))) in c.weights.iter_mut().zip(velocity.weights[i].iter_mut().zip(&grads.weights[i])).enumerate() {
                if c.pruned.binary_search(&(j / fan_in)).is_ok() {
                    continue;
                }
                *v = momentum * *v + g + decay * *w;
                *w = *w - lr * *v;
            }
            if let (Some(b), Some(vb), Some(gb)) = (&mut c.bias, &mut velocity.biases[i], &grads.biases[i]) {
                for (o, (w, (v, &g))) in b.iter_mut().zip(vb.iter_mut().zip(gb)).enumerate() {
                    if c.pruned.binary_search(&o).is_ok() {
                        continue;
                    }
                    *v = momentum * *v + g;
                    *w = *w - lr * *v;
                }
            }
        }
        if gain_unit != T::zero() {
            velocity.gain = momentum * velocity.gain + grads.gain * gain_unit;
            self.gain = self.gain - lr * velocity.gain * gain_unit;
        }
        velocity.head_bias = momentum * velocity.head_bias + grads.head_bias;
        self.head_bias = self.head_bias - lr * velocity.head_bias;
    }
}

/// Loss and gradients of one labelled pair for a training-mode network.
pub fn backward_pass(net: &SiamNetwork, z: &Tensor, x: &Tensor, labels: &LabelMap) -> Result<(f64, Gradients<f32>)> {
    let model = TrainModel::<f32>::from_network(net)?;
    let prep = model.prepare()?;
    let mut grads = model.zero_gradients();
    let (loss, _) = model.loss_grad(&prep, z, x, labels, &mut grads)?;
    Ok((loss, grads))
}
