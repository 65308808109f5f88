//! Balanced ±1 label maps and the elementwise logistic loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `values` are ±1; `weights` put half the mass on each class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub size: usize,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LabelMap {
    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Positive inside radius `r` (in cells) of the map centre.
pub fn make_labels(r: f64, size: usize) -> Result<LabelMap> {
    if !(r.is_finite() && r > 0.0 && r < size as f64 / 2.0) {
        return Err(Error::Config(format!("label radius {r} must lie in (0, {})", size as f64 / 2.0)));
    }
    let centre = (size as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let d = ((i as f64 - centre).powi(2) + (j as f64 - centre).powi(2)).sqrt();
            values.push(if d <= r { 1.0 } else { -1.0 });
        }
    }
    let pos = values.iter().filter(|&&v| v > 0.0).count();
    let neg = values.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Config(format!("radius {r} leaves one class empty on a {size}x{size} map")));
    }
    let weights = values
        .iter()
        .map(|&v| if v > 0.0 { 0.5 / pos as f64 } else { 0.5 / neg as f64 })
        .collect();
    Ok(LabelMap { size, values, weights })
}

/// `log(1 + exp(t))` without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Loss and its gradient with respect to each score.
pub(crate) fn loss_slice(scores: &[f64], labels: &LabelMap) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for ((&s, &y), &w) in scores.iter().zip(&labels.values).zip(&labels.weights) {
        loss += w * softplus(-y * s);
        grad.push(-w * y * sigmoid(-y * s));
    }
    (loss, grad)
}

/// `Σ w·log(1 + exp(-y·s))` over a `1x1xSxS` score map.
pub fn logistic_loss(score_map: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
    let n = labels.size;
    if score_map.dims() != [1, 1, n, n] {
        return Err(Error::shape("score map", format!("labels are {n}x{n}, scores {:?}", score_map.dims())));
    }
    let scores: Vec<f64> = score_map.real()?.iter().map(|&v| v as f64).collect();
    let (loss, grad) = loss_slice(&scores, labels);
    Ok((loss, Tensor::from_real([1, 1, n, n], grad.into_iter().map(|g| g as f32).collect())?))
}
