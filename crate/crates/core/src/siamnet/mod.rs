//! The fully-convolutional Siamese backbone and its score head.
//!
//! A [`NetworkManifest`] lists the layers; a [`SiamNetwork`] binds weights
//! quantized under a [`QuantConfig`] to it. Quantized convolutions execute on
//! the integer fast paths in [`fastpath`]; float layers lower to a GEMM.

pub mod container;
pub mod fastpath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quantize::{dequantize, quantize, LayerFootprint, LayerGroup, QuantConfig, QuantScheme, QuantizedBlock, QuantizedTensor};
use crate::tensor::{conv2d_im2col, maxpool2d, out_dim, xcorr, ConvParams, Tensor};

pub use fastpath::{conv_fastpath, conv_fastpath_accumulate, FastKernel};

/// Canonical exemplar patch side.
pub const EXEMPLAR_SIZE: usize = 127;
/// Canonical search patch side.
pub const SEARCH_SIZE: usize = 255;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { name: String, params: ConvParams, group: LayerGroup },
    MaxPool { name: String, k: usize, stride: usize },
    /// ReLU followed by the configured activation quantizer.
    Activation { name: String },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv { name, .. } | Layer::MaxPool { name, .. } | Layer::Activation { name } => name,
        }
    }
}

/// Real weights and optional bias of one convolution.
pub type RealConv = (Vec<f32>, Option<Vec<f32>>);

/// Stored block, bias, shadow weights and pruned filters of one convolution.
pub type StoredConv = (QuantizedBlock, Option<Vec<f32>>, Option<Vec<f32>>, Vec<usize>);

/// Ordered layer list plus the patch sizes it is meant to consume.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkManifest {
    layers: Vec<Layer>,
    exemplar_size: usize,
    search_size: usize,
}

impl NetworkManifest {
    /// Validates grouping, channel continuity and that both patch sizes
    /// survive the shape chain.
    pub fn new(layers: Vec<Layer>, exemplar_size: usize, search_size: usize) -> Result<Self> {
        let m = Self {
            layers,
            exemplar_size,
            search_size,
        };
        let convs: Vec<(&ConvParams, LayerGroup)> = m.convs().collect();
        if convs.is_empty() {
            return Err(Error::Config("manifest has no convolutions".into()));
        }
        let count = |g| convs.iter().filter(|(_, gg)| *gg == g).count();
        if count(LayerGroup::First) != 1 || count(LayerGroup::Last) != 1 {
            return Err(Error::Config("manifest needs exactly one first and one last convolution".into()));
        }
        if convs.first().map(|c| c.1) != Some(LayerGroup::First) || convs.last().map(|c| c.1) != Some(LayerGroup::Last) {
            return Err(Error::Config("first/last groups must be the outermost convolutions".into()));
        }
        if count(LayerGroup::None) != 0 {
            return Err(Error::Config("every convolution needs a group".into()));
        }
        let mut channels = convs[0].0.in_channels;
        for (p, _) in &convs {
            p.validate()?;
            if p.in_channels != channels {
                return Err(Error::Config(format!("channel chain broken: {} feeds a {}-channel conv", channels, p.in_channels)));
            }
            channels = p.out_channels;
        }
        m.spatial_chain(exemplar_size)?;
        m.spatial_chain(search_size)?;
        if m.score_size()? == 0 {
            return Err(Error::Config("search embedding smaller than exemplar embedding".into()));
        }
        Ok(m)
    }

    /// conv1 11x11/2 (3->32) -> pool 3x3/2 -> conv2 5x5 (32->64) ->
    /// conv3..4 3x3 (64->64) -> conv5 3x3 (64->48) -> conv6 3x3 (48->32).
    pub fn default_backbone() -> Self {
        let conv = |name: &str, k, s, i, o, group| Layer::Conv {
            name: name.into(),
            params: ConvParams::square(k, s, i, o),
            group,
        };
        let act = |name: &str| Layer::Activation { name: name.into() };
        let layers = vec![
            conv("conv1", 11, 2, 3, 32, LayerGroup::First),
            act("act1"),
            Layer::MaxPool { name: "pool1".into(), k: 3, stride: 2 },
            conv("conv2", 5, 1, 32, 64, LayerGroup::Hidden),
            act("act2"),
            conv("conv3", 3, 1, 64, 64, LayerGroup::Hidden),
            act("act3"),
            conv("conv4", 3, 1, 64, 64, LayerGroup::Hidden),
            act("act4"),
            conv("conv5", 3, 1, 64, 48, LayerGroup::Hidden),
            act("act5"),
            conv("conv6", 3, 1, 48, 32, LayerGroup::Last),
        ];
        let m = Self::new(layers, EXEMPLAR_SIZE, SEARCH_SIZE).expect("default backbone is valid");
        debug_assert!(m.check_canonical().is_ok());
        m
    }

    /// The default geometry: 127 -> 17x17x32, 255 -> 49x49x32, 33x33 map.
    pub fn check_canonical(&self) -> Result<()> {
        let z = self.embedding_dims(EXEMPLAR_SIZE)?;
        let x = self.embedding_dims(SEARCH_SIZE)?;
        if z != [1, 32, 17, 17] || x != [1, 32, 49, 49] {
            return Err(Error::Config(format!("embeddings {z:?} / {x:?} do not match the canonical 17x17x32 / 49x49x32")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn exemplar_size(&self) -> usize {
        self.exemplar_size
    }

    pub fn search_size(&self) -> usize {
        self.search_size
    }

    pub fn convs(&self) -> impl Iterator<Item = (&ConvParams, LayerGroup)> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv { params, group, .. } => Some((params, *group)),
            _ => None,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.convs().next().map(|c| c.0.in_channels).unwrap_or(0)
    }

    pub fn output_channels(&self) -> usize {
        self.convs().last().map(|c| c.0.out_channels).unwrap_or(0)
    }

    /// Spatial side after every conv/pool layer for a square input.
    pub fn spatial_chain(&self, input: usize) -> Result<Vec<usize>> {
        let mut side = input;
        let mut chain = vec![side];
        for layer in &self.layers {
            match layer {
                Layer::Conv { params, .. } => {
                    side = out_dim(side, params.kh, params.stride, "height")?;
                    chain.push(side);
                }
                Layer::MaxPool { k, stride, .. } => {
                    side = out_dim(side, *k, *stride, "height")?;
                    chain.push(side);
                }
                Layer::Activation { .. } => {}
            }
        }
        Ok(chain)
    }

    pub fn embedding_dims(&self, input: usize) -> Result<[usize; 4]> {
        let side = *self.spatial_chain(input)?.last().expect("chain has the input");
        Ok([1, self.output_channels(), side, side])
    }

    /// Side of the score map.
    pub fn score_size(&self) -> Result<usize> {
        let z = self.embedding_dims(self.exemplar_size)?[2];
        let x = self.embedding_dims(self.search_size)?[2];
        Ok(x.saturating_sub(z) + usize::from(x >= z))
    }

    /// Product of all strides: pixels of search patch per score-map cell.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { params, .. } => params.stride,
                Layer::MaxPool { stride, .. } => *stride,
                Layer::Activation { .. } => 1,
            })
            .product()
    }
}

/// Affine map from raw cross-correlation to scores: `gain * xcorr + bias`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreHead {
    pub gain: f32,
    pub bias: f32,
}

impl Default for ScoreHead {
    fn default() -> Self {
        Self { gain: 1.0, bias: 0.0 }
    }
}

#[derive(Debug, Clone)]
enum Exec {
    Float(Vec<f32>),
    Fast(FastKernel),
}

/// Weights and bookkeeping of one convolution.
#[derive(Debug, Clone)]
pub struct ConvWeights {
    block: QuantizedBlock,
    bias: Option<Vec<f32>>,
    shadow: Option<Vec<f32>>,
    pruned: Vec<usize>,
    exec: Exec,
}

impl ConvWeights {
    fn new(
        block: QuantizedBlock,
        bias: Option<Vec<f32>>,
        shadow: Option<Vec<f32>>,
        pruned: Vec<usize>,
        params: &ConvParams,
        activations: QuantScheme,
    ) -> Result<Self> {
        block.check()?;
        if block.count != params.weight_count() {
            return Err(Error::shape("weights", format!("{} weights for {:?}", block.count, params.weight_dims())));
        }
        if params.has_bias != bias.is_some() || bias.as_ref().is_some_and(|b| b.len() != params.out_channels) {
            return Err(Error::shape("bias", format!("bias does not match {} filters", params.out_channels)));
        }
        if let Some(s) = &shadow {
            if s.len() != block.count {
                return Err(Error::shape("weights", "shadow weights do not match the block"));
            }
        }
        if pruned.iter().any(|&o| o >= params.out_channels) {
            return Err(Error::Config("pruned filter index out of range".into()));
        }
        let exec = if block.scheme.is_float() || activations.is_float() {
            Exec::Float(dequantize(&block)?)
        } else {
            Exec::Fast(FastKernel::new(&block, params)?)
        };
        Ok(Self {
            block,
            bias,
            shadow,
            pruned,
            exec,
        })
    }

    pub fn block(&self) -> &QuantizedBlock {
        &self.block
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn shadow(&self) -> Option<&[f32]> {
        self.shadow.as_deref()
    }

    /// Sorted indices of masked output filters.
    pub fn pruned(&self) -> &[usize] {
        &self.pruned
    }

    /// Weights as the forward pass sees them.
    pub fn effective_weights(&self) -> Result<Vec<f32>> {
        dequantize(&self.block)
    }

    fn skip_mask(&self, out_channels: usize) -> Vec<bool> {
        let mut m = vec![false; out_channels];
        for &o in &self.pruned {
            m[o] = true;
        }
        m
    }
}

/// Activation flowing between layers.
enum Act {
    Real(Tensor),
    Codes(QuantizedTensor),
}

impl Act {
    fn into_real(self) -> Result<Tensor> {
        match self {
            Act::Real(t) => Ok(t),
            Act::Codes(q) => q.dequantize(),
        }
    }
}

/// Immutable Siamese network: shared backbone plus score head.
#[derive(Debug, Clone)]
pub struct SiamNetwork {
    manifest: NetworkManifest,
    config: QuantConfig,
    convs: Vec<ConvWeights>,
    head: ScoreHead,
}

/// Builds the default backbone, randomly initialised and quantized.
pub fn build_backbone(config: QuantConfig, seed: u64) -> Result<SiamNetwork> {
    SiamNetwork::random(NetworkManifest::default_backbone(), config, seed)
}

impl SiamNetwork {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases,
    /// shadow weights retained for training.
    pub fn random(manifest: NetworkManifest, config: QuantConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shadows = Vec::new();
        for (p, _) in manifest.convs() {
            let bound = 1.0 / (p.fan_in() as f32).sqrt();
            let w: Vec<f32> = (0..p.weight_count()).map(|_| rng.gen_range(-bound..=bound)).collect();
            let b = p.has_bias.then(|| vec![0.0; p.out_channels]);
            shadows.push((w, b));
        }
        Self::from_shadow(manifest, config, shadows, ScoreHead::default())
    }

    /// Quantizes real weights per the config and keeps them as shadows.
    pub fn from_shadow(
        manifest: NetworkManifest,
        config: QuantConfig,
        weights: Vec<RealConv>,
        head: ScoreHead,
    ) -> Result<Self> {
        config.validate()?;
        let specs: Vec<(ConvParams, LayerGroup)> = manifest.convs().map(|(p, g)| (*p, g)).collect();
        if specs.len() != weights.len() {
            return Err(Error::shape("layers", format!("{} weight sets for {} convolutions", weights.len(), specs.len())));
        }
        let mut convs = Vec::with_capacity(specs.len());
        for ((p, g), (w, b)) in specs.iter().zip(weights) {
            let scheme = config.scheme_for(*g)?;
            let block = quantize(&w, scheme)?;
            convs.push(ConvWeights::new(block, b, Some(w), Vec::new(), p, config.activations)?);
        }
        Ok(Self {
            manifest,
            config,
            convs,
            head,
        })
    }

    /// Assembles a network from stored blocks (as read from a container).
    pub fn from_blocks(
        manifest: NetworkManifest,
        config: QuantConfig,
        layers: Vec<StoredConv>,
        head: ScoreHead,
    ) -> Result<Self> {
        config.validate()?;
        let specs: Vec<(ConvParams, LayerGroup)> = manifest.convs().map(|(p, g)| (*p, g)).collect();
        if specs.len() != layers.len() {
            return Err(Error::shape("layers", format!("{} weight sets for {} convolutions", layers.len(), specs.len())));
        }
        let mut convs = Vec::with_capacity(specs.len());
        for ((p, g), (block, bias, shadow, mut pruned)) in specs.iter().zip(layers) {
            let scheme = config.scheme_for(*g)?;
            if block.scheme != scheme {
                return Err(Error::Config(format!("{g} layer stored as {} but config says {scheme}", block.scheme)));
            }
            pruned.sort_unstable();
            pruned.dedup();
            convs.push(ConvWeights::new(block, bias, shadow, pruned, p, config.activations)?);
        }
        Ok(Self {
            manifest,
            config,
            convs,
            head,
        })
    }

    pub fn manifest(&self) -> &NetworkManifest {
        &self.manifest
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn head(&self) -> ScoreHead {
        self.head
    }

    pub fn conv_weights(&self) -> &[ConvWeights] {
        &self.convs
    }

    pub fn has_shadow(&self) -> bool {
        self.convs.iter().all(|c| c.shadow.is_some())
    }

    /// Drops shadow weights; the result can run but not train.
    pub fn into_inference(mut self) -> Self {
        for c in &mut self.convs {
            c.shadow = None;
        }
        self
    }

    /// Real weights (shadow, or dequantized if there is none) with biases.
    pub fn real_weights(&self) -> Result<Vec<RealConv>> {
        self.convs
            .iter()
            .map(|c| {
                let w = match &c.shadow {
                    Some(s) => s.clone(),
                    None => dequantize(&c.block)?,
                };
                Ok((w, c.bias.clone()))
            })
            .collect()
    }

    /// Same network with new real weights and head, pruning masks kept.
    pub fn with_weights(&self, weights: Vec<RealConv>, head: ScoreHead) -> Result<Self> {
        let mut net = Self::from_shadow(self.manifest.clone(), self.config, weights, head)?;
        for (dst, src) in net.convs.iter_mut().zip(&self.convs) {
            dst.pruned = src.pruned.clone();
        }
        Ok(net)
    }

    /// Re-quantize under another config, starting from the real weights.
    pub fn requantize(&self, config: QuantConfig) -> Result<Self> {
        let mut net = Self::from_shadow(self.manifest.clone(), config, self.real_weights()?, self.head)?;
        for (dst, src) in net.convs.iter_mut().zip(&self.convs) {
            dst.pruned = src.pruned.clone();
        }
        Ok(net)
    }

    /// Replace the pruning mask of conv layer `index`.
    pub fn set_pruned(&mut self, index: usize, mut filters: Vec<usize>) -> Result<()> {
        let out = self
            .manifest
            .convs()
            .nth(index)
            .map(|c| c.0.out_channels)
            .ok_or_else(|| Error::Config(format!("no conv layer {index}")))?;
        if filters.iter().any(|&o| o >= out) {
            return Err(Error::Config("pruned filter index out of range".into()));
        }
        filters.sort_unstable();
        filters.dedup();
        self.convs[index].pruned = filters;
        Ok(())
    }

    /// Parameter counts per conv, excluding pruned filters.
    pub fn footprint_entries(&self) -> Vec<LayerFootprint> {
        self.manifest
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { name, params, group } => Some((name, params, *group)),
                _ => None,
            })
            .zip(&self.convs)
            .map(|((name, p, group), w)| LayerFootprint {
                name: name.clone(),
                group,
                params: ((p.out_channels - w.pruned.len()) * p.fan_in()) as u64,
            })
            .collect()
    }

    /// Backbone features of one patch (real domain).
    pub fn embed(&self, patch: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = patch.dims();
        let ok_size = h == w && (h == self.manifest.exemplar_size || h == self.manifest.search_size);
        if n != 1 || c != self.manifest.input_channels() || !ok_size {
            return Err(Error::shape(
                "patch",
                format!(
                    "expected 1x{}x{e}x{e} or 1x{}x{s}x{s}, got {:?}",
                    self.manifest.input_channels(),
                    self.manifest.input_channels(),
                    patch.dims(),
                    e = self.manifest.exemplar_size,
                    s = self.manifest.search_size
                ),
            ));
        }
        self.embed_any(patch)
    }

    /// Feature extraction without the canonical-size check.
    pub fn embed_any(&self, patch: &Tensor) -> Result<Tensor> {
        let act_bits = match self.config.activations {
            QuantScheme::UniformInt(b) => Some(b as u32),
            _ => None,
        };
        let mut x = match act_bits {
            Some(b) => Act::Codes(QuantizedTensor::quantize(patch, b)?),
            None => Act::Real(patch.clone()),
        };
        let mut conv_idx = 0;
        for layer in self.manifest.layers() {
            x = match layer {
                Layer::Conv { params, .. } => {
                    let w = &self.convs[conv_idx];
                    conv_idx += 1;
                    let skip = w.skip_mask(params.out_channels);
                    match (&w.exec, x) {
                        (Exec::Fast(k), Act::Codes(q)) => Act::Real(k.conv(&q, w.bias(), &skip)?),
                        (Exec::Fast(k), Act::Real(t)) => {
                            let q = QuantizedTensor::quantize(&t, act_bits.unwrap_or(32))?;
                            Act::Real(k.conv(&q, w.bias(), &skip)?)
                        }
                        (Exec::Float(wts), a) => {
                            let mut out = conv2d_im2col(&a.into_real()?, wts, w.bias(), params)?;
                            zero_channels(&mut out, &w.pruned)?;
                            Act::Real(out)
                        }
                    }
                }
                Layer::MaxPool { k, stride, .. } => match x {
                    Act::Real(t) => Act::Real(maxpool2d(&t, *k, *stride)?),
                    Act::Codes(q) => Act::Codes(QuantizedTensor {
                        codes: maxpool2d(&q.codes, *k, *stride)?,
                        ..q
                    }),
                },
                Layer::Activation { .. } => {
                    let mut t = x.into_real()?;
                    for v in t.real_mut()? {
                        *v = v.max(0.0);
                    }
                    match act_bits {
                        Some(b) => Act::Codes(QuantizedTensor::quantize(&t, b)?),
                        None => Act::Real(t),
                    }
                }
            };
        }
        x.into_real()
    }

    /// `gain * xcorr(search, exemplar) + bias`.
    pub fn score(&self, search_emb: &Tensor, exemplar_emb: &Tensor) -> Result<Tensor> {
        let mut map = xcorr(search_emb, exemplar_emb)?;
        let ScoreHead { gain, bias } = self.head;
        for v in map.real_mut()? {
            *v = gain * *v + bias;
        }
        Ok(map)
    }

    /// Score map of search patch `x` against exemplar patch `z`.
    pub fn forward_pair(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let ez = self.embed(z)?;
        let ex = self.embed(x)?;
        self.score(&ex, &ez)
    }
}

fn zero_channels(t: &mut Tensor, channels: &[usize]) -> Result<()> {
    if channels.is_empty() {
        return Ok(());
    }
    let [n, c, h, w] = t.dims();
    let data = t.real_mut()?;
    for b in 0..n {
        for &o in channels {
            let start = (b * c + o) * h * w;
            data[start..start + h * w].fill(0.0);
        }
    }
    Ok(())
}
