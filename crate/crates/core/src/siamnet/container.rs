//! `SQTZ1` weight container.
//!
//! Layout (little-endian): the 5-byte magic `SQTZ1`, `u32` version, `u32`
//! manifest length, the UTF-8 JSON manifest, then for each convolution in
//! manifest order its `f32` scale, its `f32` biases (when the layer has
//! them) and its packed payload. When the manifest sets `shadow_weights`,
//! the real shadow weights of every convolution follow as `f32` arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, NetworkManifest, ScoreHead, SiamNetwork};
use crate::error::{Error, Result};
use crate::quantize::{LayerGroup, QuantConfig, QuantScheme, QuantizedBlock};
use crate::tensor::ConvParams;

pub const MAGIC: &[u8; 5] = b"SQTZ1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    has_bias: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<LayerGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scheme: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pruned: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRecord {
    exemplar_size: usize,
    search_size: usize,
    config: QuantConfig,
    head_gain: f32,
    head_bias: f32,
    shadow_weights: bool,
    layers: Vec<LayerRecord>,
}

fn scheme_fields(s: QuantScheme) -> (Option<String>, Option<u32>) {
    (Some(s.kind_name().to_string()), Some(s.bits_per_weight()))
}

fn parse_scheme(kind: Option<&str>, bits: Option<u32>, layer: &str) -> Result<QuantScheme> {
    let s = match (kind, bits) {
        (Some("fp32"), Some(32)) => QuantScheme::Float32,
        (Some("ternary"), Some(2)) => QuantScheme::Ternary,
        (Some("binary"), Some(1)) => QuantScheme::Binary,
        (Some("int"), Some(b)) if (2..=32).contains(&b) => QuantScheme::UniformInt(b as u8),
        _ => return Err(Error::Format(format!("layer '{layer}' has an invalid scheme/bits pair"))),
    };
    Ok(s)
}

fn manifest_record(net: &SiamNetwork) -> ManifestRecord {
    let cfg = *net.config();
    let mut conv = net.conv_weights().iter();
    let layers = net
        .manifest()
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv { name, params, group } => {
                let w = conv.next().expect("one weight set per conv");
                let (scheme, bits) = scheme_fields(w.block().scheme);
                LayerRecord {
                    name: name.clone(),
                    kind: "conv".into(),
                    kernel: Some([params.kh, params.kw]),
                    stride: Some(params.stride),
                    in_channels: Some(params.in_channels),
                    out_channels: Some(params.out_channels),
                    has_bias: Some(params.has_bias),
                    group: Some(*group),
                    scheme,
                    bits,
                    pruned: w.pruned().to_vec(),
                }
            }
            Layer::MaxPool { name, k, stride } => LayerRecord {
                name: name.clone(),
                kind: "maxpool".into(),
                kernel: Some([*k, *k]),
                stride: Some(*stride),
                in_channels: None,
                out_channels: None,
                has_bias: None,
                group: None,
                scheme: None,
                bits: None,
                pruned: Vec::new(),
            },
            Layer::Activation { name } => {
                let (scheme, bits) = scheme_fields(cfg.activations);
                LayerRecord {
                    name: name.clone(),
                    kind: "activation".into(),
                    kernel: None,
                    stride: None,
                    in_channels: None,
                    out_channels: None,
                    has_bias: None,
                    group: None,
                    scheme,
                    bits,
                    pruned: Vec::new(),
                }
            }
        })
        .collect();
    ManifestRecord {
        exemplar_size: net.manifest().exemplar_size(),
        search_size: net.manifest().search_size(),
        config: cfg,
        head_gain: net.head().gain,
        head_bias: net.head().bias,
        shadow_weights: net.has_shadow(),
        layers,
    }
}

/// Serialize a network into container bytes.
pub fn to_bytes(net: &SiamNetwork) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&manifest_record(net)).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for w in net.conv_weights() {
        out.extend_from_slice(&w.block().scale.to_le_bytes());
        if let Some(b) = w.bias() {
            b.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out.extend_from_slice(&w.block().payload);
    }
    if net.has_shadow() {
        for w in net.conv_weights() {
            w.shadow().expect("checked").iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Format(format!("container truncated while reading {what}")));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Parse container bytes.
pub fn from_bytes(buf: &[u8]) -> Result<SiamNetwork> {
    let mut r = Reader { buf, at: 0 };
    if r.take(5, "magic")? != MAGIC {
        return Err(Error::Format("not an SQTZ1 container".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let len = r.u32("manifest length")? as usize;
    let json = r.take(len, "manifest")?;
    let rec: ManifestRecord = serde_json::from_slice(json).map_err(|e| Error::Format(format!("manifest: {e}")))?;

    let mut layers = Vec::new();
    let mut schemes = Vec::new();
    let mut masks = Vec::new();
    for l in &rec.layers {
        let missing = |f: &str| Error::Format(format!("layer '{}' lacks '{f}'", l.name));
        match l.kind.as_str() {
            "conv" => {
                let [kh, kw] = l.kernel.ok_or_else(|| missing("kernel"))?;
                let params = ConvParams {
                    kh,
                    kw,
                    stride: l.stride.ok_or_else(|| missing("stride"))?,
                    in_channels: l.in_channels.ok_or_else(|| missing("in_channels"))?,
                    out_channels: l.out_channels.ok_or_else(|| missing("out_channels"))?,
                    has_bias: l.has_bias.ok_or_else(|| missing("has_bias"))?,
                };
                schemes.push(parse_scheme(l.scheme.as_deref(), l.bits, &l.name)?);
                masks.push(l.pruned.clone());
                layers.push(Layer::Conv {
                    name: l.name.clone(),
                    params,
                    group: l.group.ok_or_else(|| missing("group"))?,
                });
            }
            "maxpool" => {
                let [k, k2] = l.kernel.ok_or_else(|| missing("kernel"))?;
                if k != k2 {
                    return Err(Error::Format(format!("pool '{}' must be square", l.name)));
                }
                layers.push(Layer::MaxPool {
                    name: l.name.clone(),
                    k,
                    stride: l.stride.ok_or_else(|| missing("stride"))?,
                });
            }
            "activation" => layers.push(Layer::Activation { name: l.name.clone() }),
            other => return Err(Error::Format(format!("unknown layer kind '{other}'"))),
        }
    }
    let manifest = NetworkManifest::new(layers, rec.exemplar_size, rec.search_size)?;

    let specs: Vec<ConvParams> = manifest.convs().map(|(p, _)| *p).collect();
    let mut stored = Vec::with_capacity(specs.len());
    for ((p, scheme), pruned) in specs.iter().zip(&schemes).zip(masks) {
        let scale = f32::from_le_bytes(r.take(4, "scale")?.try_into().expect("4 bytes"));
        let bias = if p.has_bias { Some(r.f32s(p.out_channels, "bias")?) } else { None };
        let count = p.weight_count();
        let payload = r.take(scheme.payload_len(count), "payload")?.to_vec();
        let block = QuantizedBlock {
            scheme: *scheme,
            count,
            payload,
            scale,
        };
        if !scheme.is_float() {
            block.codes()?;
        }
        stored.push((block, bias, None, pruned));
    }
    if rec.shadow_weights {
        for (p, entry) in specs.iter().zip(stored.iter_mut()) {
            entry.2 = Some(r.f32s(p.weight_count(), "shadow weights")?);
        }
    }
    if r.at != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after container", buf.len() - r.at)));
    }
    SiamNetwork::from_blocks(
        manifest,
        rec.config,
        stored,
        ScoreHead {
            gain: rec.head_gain,
            bias: rec.head_bias,
        },
    )
}

pub fn save(net: &SiamNetwork, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SiamNetwork> {
    from_bytes(&fs::read(path)?)
}
