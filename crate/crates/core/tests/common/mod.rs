#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamq_core::quantize::LayerGroup;
use siamq_core::siamnet::{Layer, NetworkManifest, SiamNetwork};
use siamq_core::toytrain::{make_labels, TrainModel};
use siamq_core::{ConvParams, QuantConfig, Tensor};

pub fn mini_manifest() -> NetworkManifest {
    let conv = |name: &str, i, o, group| Layer::Conv { name: name.into(), params: ConvParams::square(3, 1, i, o), group };
    NetworkManifest::new(
        vec![
            conv("c1", 3, 4, LayerGroup::First),
            Layer::Activation { name: "a1".into() },
            Layer::MaxPool { name: "p1".into(), k: 2, stride: 2 },
            conv("c2", 4, 5, LayerGroup::Hidden),
            Layer::Activation { name: "a2".into() },
            conv("c3", 5, 3, LayerGroup::Last),
        ],
        14,
        22,
    )
    .unwrap()
}

pub fn patch(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
    Tensor::from_fn([1, 3, side, side], |_| rng.gen_range(0.0f32..1.0))
}

pub fn mini_model(config: QuantConfig, seed: u64) -> (TrainModel<f64>, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = SiamNetwork::random(mini_manifest(), config, seed).unwrap();
    let mut model = TrainModel::<f64>::from_network(&net).unwrap();
    for l in 0..model.conv_count() {
        for b in model.bias_mut(l).unwrap() {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    model.set_head(0.7, -0.2);
    (model, patch(&mut rng, 14), patch(&mut rng, 22))
}

#[derive(Clone, Copy, Debug)]
enum Probe {
    Weight(usize, usize),
    Bias(usize, usize),
    Gain,
    HeadBias,
}

fn param(m: &mut TrainModel<f64>, p: Probe) -> &mut f64 {
    match p {
        Probe::Weight(l, i) => &mut m.weights_mut(l)[i],
        Probe::Bias(l, i) => &mut m.bias_mut(l).unwrap()[i],
        Probe::Gain | Probe::HeadBias => unreachable!(),
    }
}

fn perturb(m: &mut TrainModel<f64>, p: Probe, d: f64) {
    match p {
        Probe::Gain => {
            let (g, b) = m.head();
            m.set_head(g + d, b);
        }
        Probe::HeadBias => {
            let (g, b) = m.head();
            m.set_head(g, b + d);
        }
        _ => *param(m, p) += d,
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug)]
pub struct GradCheck {
    pub probes: usize,
    /// Probes whose gradient is not numerically zero.
    pub live: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// `count` random probes over weights and biases, plus both head parameters.
pub fn fp32_gradient_check(seed: u64, count: usize) -> GradCheck {
    let (model, z, x) = mini_model(QuantConfig::FP32, seed);
    let labels = make_labels(1.0, 5).unwrap();
    let prep = model.prepare().unwrap();
    let mut grads = model.zero_gradients();
    model.loss_grad(&prep, &z, &x, &labels, &mut grads).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut probes = vec![Probe::Gain, Probe::HeadBias];
    while probes.len() < count {
        let l = rng.gen_range(0..model.conv_count());
        if rng.gen_bool(0.2) {
            probes.push(Probe::Bias(l, rng.gen_range(0..grads.biases[l].as_ref().unwrap().len())));
        } else {
            probes.push(Probe::Weight(l, rng.gen_range(0..grads.weights[l].len())));
        }
    }
    let h = 1e-6;
    let mut out = GradCheck { probes: probes.len(), live: 0, worst: 0.0, failures: Vec::new() };
    for &p in &probes {
        let analytic = match p {
            Probe::Weight(l, i) => grads.weights[l][i],
            Probe::Bias(l, i) => grads.biases[l].as_ref().unwrap()[i],
            Probe::Gain => grads.gain,
            Probe::HeadBias => grads.head_bias,
        };
        let mut up = model.clone();
        perturb(&mut up, p, h);
        let mut down = model.clone();
        perturb(&mut down, p, -h);
        let lu = up.loss(&up.prepare().unwrap(), &z, &x, &labels).unwrap().0;
        let ld = down.loss(&down.prepare().unwrap(), &z, &x, &labels).unwrap().0;
        let numeric = (lu - ld) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-9 {
            continue;
        }
        out.live += 1;
        let rel = (analytic - numeric).abs() / scale;
        out.worst = out.worst.max(rel);
        if rel >= 1e-4 {
            out.failures.push(format!("{p:?}: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
    out
}
