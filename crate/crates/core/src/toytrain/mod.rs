//! Desk-scale quantization-aware training on synthetic sequences.
//!
//! Training pairs are an exemplar crop from one frame and a search crop
//! centred on the target in a nearby frame; the label map is therefore
//! always centred. SGD with momentum updates real-valued shadow weights
//! while the forward pass sees their quantized values.

pub mod engine;
pub mod labels;
pub mod synth;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::quantize::{LayerGroup, QuantConfig};
use crate::siamnet::{build_backbone, SiamNetwork};
use crate::tensor::Tensor;
use crate::tracker::{network_patch, TrackerHyper};

pub use engine::{backward_pass, Gradients, PairTrace, Prepared, TrainModel};
pub use labels::{logistic_loss, make_labels, LabelMap};
pub use synth::{synth_sequence, Shape, SynthParams, SynthSequence};

/// Which disjoint family of synthetic sequences a seed belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Seed of sequence `index` in `split` for a run seeded with `seed`.
pub fn split_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Validation => 0x7661_6c00_0000_0000,
        Split::Test => 0x7465_7374_0000_0000,
    };
    // splitmix64 finaliser
    let mut z = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn quant_from_preset_or_table<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<QuantConfig, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Spec {
        Preset(String),
        Table(QuantConfig),
    }
    match Spec::deserialize(d)? {
        Spec::Preset(name) => QuantConfig::preset(&name).map_err(serde::de::Error::custom),
        Spec::Table(t) => Ok(t),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Size of the fixed training pair pool, visited once per epoch.
    pub pairs_per_epoch: usize,
    pub val_pairs: usize,
    pub batch_size: usize,
    /// Learning rate of the first epoch, decayed geometrically to `lr_end`.
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Train the head gain, in units of its value at the start of the run.
    pub learn_gain: bool,
    pub seed: u64,
    /// A preset name (`"binary"`) or an explicit per-group table.
    #[serde(deserialize_with = "quant_from_preset_or_table")]
    pub quant: QuantConfig,
    /// Positive label radius in score-map cells.
    pub label_radius: f64,
    pub train_sequences: usize,
    pub val_sequences: usize,
    /// Largest frame distance between the two crops of a pair.
    pub max_frame_gap: usize,
    pub synth: SynthParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            pairs_per_epoch: 64,
            val_pairs: 16,
            batch_size: 8,
            lr_start: 1e-2,
            lr_end: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            learn_gain: true,
            seed: 1,
            quant: QuantConfig::FP32,
            label_radius: 2.0,
            train_sequences: 32,
            val_sequences: 8,
            max_frame_gap: 12,
            synth: SynthParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.pairs_per_epoch == 0 || self.val_pairs == 0 || self.batch_size == 0 {
            return bad("pair counts and batch size must be positive");
        }
        if self.train_sequences == 0 || self.val_sequences == 0 {
            return bad("need at least one training and one validation sequence");
        }
        let rates = [self.lr_start, self.lr_end, self.momentum, self.weight_decay];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) || self.momentum >= 1.0 {
            return bad("learning rates and decay must be finite and non-negative, momentum below 1");
        }
        self.quant.validate()?;
        self.synth.validate()
    }

    /// Geometric interpolation from `lr_start` (epoch 1) to `lr_end`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let t = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
        if self.lr_start <= 0.0 || self.lr_end <= 0.0 {
            self.lr_start + (self.lr_end - self.lr_start) * t
        } else {
            self.lr_start * (self.lr_end / self.lr_start).powf(t)
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(rename = "train_cerr")]
    pub train_center_err_px: f64,
    #[serde(rename = "val_cerr")]
    pub val_center_err_px: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,val_loss,train_cerr,val_cerr";

pub fn write_epoch_csv<W: Write>(logs: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if logs.is_empty() {
        w.write_record(EPOCH_CSV_HEADER.split(','))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    for row in logs {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Exemplar/search crops; the target sits at the centre of every search crop.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub exemplars: Vec<Tensor>,
    pub searches: Vec<Tensor>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }
}

/// Draw `count` pairs from `sequences` synthetic sequences of `split`.
pub fn make_pairs(config: &TrainConfig, split: Split, sequences: usize, count: usize) -> Result<PairSet> {
    let hyper = TrackerHyper::default();
    let seqs = (0..sequences)
        .map(|i| synth_sequence(split_seed(config.seed, split, i), &config.synth))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, split, usize::MAX));
    let mut pairs = PairSet { exemplars: Vec::with_capacity(count), searches: Vec::with_capacity(count) };
    for k in 0..count {
        let seq = &seqs[k % seqs.len()];
        let n = seq.frames.len();
        let i = rng.gen_range(0..n);
        let lo = i.saturating_sub(config.max_frame_gap);
        let hi = (i + config.max_frame_gap).min(n - 1);
        let j = rng.gen_range(lo..=hi);
        pairs.exemplars.push(network_patch(&seq.frames[i], &seq.boxes[i], hyper.exemplar_context, crate::siamnet::EXEMPLAR_SIZE)?);
        pairs.searches.push(network_patch(&seq.frames[j], &seq.boxes[j], hyper.search_context, crate::siamnet::SEARCH_SIZE)?);
    }
    Ok(pairs)
}

/// Distance in pixels between the arg-max cell and the map centre.
pub fn center_error_px(scores: &[f32], map: usize, stride: usize) -> f64 {
    let best = scores
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0;
    let c = (map as f64 - 1.0) / 2.0;
    let (r, q) = ((best / map) as f64, (best % map) as f64);
    ((r - c).powi(2) + (q - c).powi(2)).sqrt() * stride as f64
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the lowest validation loss.
    pub network: SiamNetwork,
    pub logs: Vec<EpochLog>,
    pub initial_val_loss: f64,
    pub best_epoch: usize,
}

/// Training data plus schedule, reusable for fine-tuning.
pub struct Trainer {
    config: TrainConfig,
    train: PairSet,
    val: PairSet,
    labels: LabelMap,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let map = crate::siamnet::NetworkManifest::default_backbone().score_size()?;
        let labels = make_labels(config.label_radius, map)?;
        let train = make_pairs(&config, Split::Train, config.train_sequences, config.pairs_per_epoch)?;
        let val = make_pairs(&config, Split::Validation, config.val_sequences, config.val_pairs)?;
        Ok(Self { config, train, val, labels })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Mean validation loss and centre error.
    pub fn validate(&self, model: &TrainModel<f32>) -> Result<(f64, f64)> {
        let prep = model.prepare()?;
        let stride = model.manifest().total_stride();
        let (mut loss, mut cerr) = (0.0, 0.0);
        for (z, x) in self.val.exemplars.iter().zip(&self.val.searches) {
            let (l, trace) = model.loss(&prep, z, x, &self.labels)?;
            loss += l;
            cerr += center_error_px(&trace.scores, trace.map_size(), stride);
        }
        let n = self.val.len() as f64;
        Ok((loss / n, cerr / n))
    }

    /// Data-dependent start: every conv is rescaled to unit output spread on
    /// a calibration batch, the last conv's biases centre each embedding
    /// channel, and the head maps raw correlations to zero-mean, unit-spread
    /// scores.
    pub fn calibrate(&self, model: &mut TrainModel<f32>) -> Result<()> {
        let take = self.config.batch_size.min(self.train.len());
        let patches: Vec<&Tensor> = self.train.exemplars.iter().take(take).chain(self.train.searches.iter().take(take)).collect();
        let last = model.conv_count() - 1;
        for layer in 0..model.conv_count() {
            let prep = model.prepare()?;
            let mut sums = Vec::new();
            let (mut n, mut sq, mut total) = (0usize, 0.0f64, 0.0f64);
            for p in &patches {
                let (out, [c, h, w]) = model.conv_output(&prep, p, layer)?;
                sums.resize(c, (0.0f64, 0usize));
                for (ch, plane) in out.chunks(h * w).enumerate() {
                    for &v in plane {
                        sums[ch].0 += v as f64;
                        sums[ch].1 += 1;
                        total += v as f64;
                        sq += (v as f64).powi(2);
                        n += 1;
                    }
                }
            }
            let mean = total / n as f64;
            let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
            if std > 0.0 {
                let f = (1.0 / std) as f32;
                model.weights_mut(layer).iter_mut().for_each(|v| *v *= f);
                if let Some(b) = model.bias_mut(layer) {
                    b.iter_mut().for_each(|v| *v *= f);
                }
                if layer == last {
                    if let Some(b) = model.bias_mut(layer) {
                        for (bv, (s, k)) in b.iter_mut().zip(&sums) {
                            *bv -= (s / *k as f64) as f32 * f;
                        }
                    }
                }
            }
        }
        model.set_head(1.0, 0.0);
        let prep = model.prepare()?;
        let mut raw = Vec::new();
        for (z, x) in self.train.exemplars.iter().zip(&self.train.searches).take(take) {
            raw.extend(model.forward(&prep, z, x, false)?.scores.iter().map(|&v| v as f64));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64;
        if var > 0.0 {
            let gain = 1.0 / var.sqrt();
            model.set_head(gain as f32, (-gain * mean) as f32);
        }
        Ok(())
    }

    /// `epochs` passes over the pair pool; returns the best-validation model.
    pub fn run(&self, mut model: TrainModel<f32>, epochs: usize) -> Result<(TrainModel<f32>, Vec<EpochLog>, usize)> {
        let cfg = &self.config;
        let schedule = TrainConfig { epochs, ..cfg.clone() };
        let stride = model.manifest().total_stride();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut velocity = model.zero_gradients();
        let gain_unit = if cfg.learn_gain { model.head().0.abs() } else { 0.0 };
        let mut best: Option<(f64, usize, TrainModel<f32>)> = None;
        let mut logs = Vec::with_capacity(epochs);
        let n = self.train.len();
        for epoch in 1..=epochs {
            let lr = schedule.learning_rate(epoch) as f32;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut losses = vec![0.0; n];
            let mut cerrs = vec![0.0; n];
            for batch in order.chunks(cfg.batch_size) {
                let prep = model.prepare()?;
                let mut grads = model.zero_gradients();
                for &i in batch {
                    let (l, trace) = model.loss_grad(&prep, &self.train.exemplars[i], &self.train.searches[i], &self.labels, &mut grads)?;
                    losses[i] = l;
                    cerrs[i] = center_error_px(&trace.scores, trace.map_size(), stride);
                }
                grads.scale(1.0 / batch.len() as f32);
                if batch.iter().any(|&i| !losses[i].is_finite()) || !grads.is_finite() {
                    return Err(Error::Training { epoch, detail: "loss or gradient is not finite".into() });
                }
                model.sgd_step(&grads, &mut velocity, lr, cfg.momentum as f32, cfg.weight_decay as f32, gain_unit);
            }
            let (val_loss, val_cerr) = self.validate(&model)?;
            if !val_loss.is_finite() {
                return Err(Error::Training { epoch, detail: "validation loss is not finite".into() });
            }
            let row = EpochLog {
                epoch,
                train_loss: losses.iter().sum::<f64>() / n as f64,
                val_loss,
                train_center_err_px: cerrs.iter().sum::<f64>() / n as f64,
                val_center_err_px: val_cerr,
            };
            log::info!(
                "epoch {epoch}: lr {lr:.2e} train {:.4} val {:.4} cerr {:.1}/{:.1} px",
                row.train_loss,
                row.val_loss,
                row.train_center_err_px,
                row.val_center_err_px
            );
            logs.push(row);
            if best.as_ref().is_none_or(|b| val_loss < b.0) {
                best = Some((val_loss, epoch, model.clone()));
            }
        }
        let (_, best_epoch, best_model) = best.expect("at least one epoch");
        Ok((best_model, logs, best_epoch))
    }
}

/// Train the default backbone from a seeded random start.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config.clone())?;
    let init = build_backbone(config.quant, config.seed)?;
    let mut model = TrainModel::<f32>::from_network(&init)?;
    trainer.calibrate(&mut model)?;
    let (initial_val_loss, _) = trainer.validate(&model)?;
    let (best, logs, best_epoch) = trainer.run(model, config.epochs)?;
    Ok(TrainOutcome {
        network: best.to_network()?,
        logs,
        initial_val_loss,
        best_epoch,
    })
}

/// Continue training an existing network under `config`'s data and schedule.
pub fn train_network(net: &SiamNetwork, config: &TrainConfig) -> Result<TrainOutcome> {
    let trainer = Trainer::new(TrainConfig { quant: *net.config(), ..config.clone() })?;
    let model = TrainModel::<f32>::from_network(net)?;
    let (initial_val_loss, _) = trainer.validate(&model)?;
    let (best, logs, best_epoch) = trainer.run(model, config.epochs)?;
    Ok(TrainOutcome {
        network: best.to_network()?,
        logs,
        initial_val_loss,
        best_epoch,
    })
}

/// Sum of absolute shadow weights per output filter.
pub fn filter_l1(weights: &[f32], fan_in: usize) -> Vec<f64> {
    weights.chunks(fan_in).map(|f| f.iter().map(|v| v.abs() as f64).sum()).collect()
}

/// Iteratively mask the lowest-L1 share of every hidden layer's filters.
///
/// After iteration `t` of `iterations`, each hidden layer has
/// `ceil(out * fraction * t / iterations)` filters masked. Ties in L1 norm
/// break towards the lower filter index. Fine-tuning between iterations
/// uses `config`'s data and schedule.
pub fn prune_filters(net: &SiamNetwork, fraction: f64, iterations: usize, finetune_epochs: usize, config: &TrainConfig) -> Result<SiamNetwork> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("pruning fraction {fraction} must lie in (0, 1)")));
    }
    if iterations == 0 {
        return Err(Error::Config("pruning needs at least one iteration".into()));
    }
    let hidden: Vec<(usize, usize, usize)> = net
        .manifest()
        .convs()
        .enumerate()
        .filter(|(_, (_, g))| *g == LayerGroup::Hidden)
        .map(|(i, (p, _))| (i, p.out_channels, p.fan_in()))
        .collect();
    for &(i, out, _) in &hidden {
        if (out as f64 * fraction).ceil() as usize >= out {
            return Err(Error::Config(format!("pruning {fraction} of conv {i} would remove all {out} filters")));
        }
    }
    let trainer = if finetune_epochs > 0 {
        Some(Trainer::new(TrainConfig { quant: *net.config(), ..config.clone() })?)
    } else {
        None
    };
    let mut model = TrainModel::<f32>::from_network(net)?;
    for t in 1..=iterations {
        for &(i, out, fan_in) in &hidden {
            let target = (out as f64 * fraction * t as f64 / iterations as f64).ceil() as usize;
            let already = model.pruned(i).to_vec();
            if target <= already.len() {
                continue;
            }
            let norms = filter_l1(model.weights(i), fan_in);
            let mut ranked: Vec<usize> = (0..out).filter(|o| already.binary_search(o).is_err()).collect();
            ranked.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
            ranked.truncate(target - already.len());
            model.prune(i, &ranked)?;
        }
        if let Some(tr) = &trainer {
            model = tr.run(model, finetune_epochs)?.0;
        }
    }
    model.to_network()
}
