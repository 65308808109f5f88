//! Five-scale tracking loop around a fixed exemplar embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::siamnet::SiamNetwork;
use crate::tensor::{resize_bilinear, Tensor};

/// Axis-aligned box in centre-size form, frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From top-left corner form `x, y, w, h`.
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    pub fn to_corner(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Domain(format!("invalid box {self:?}: sizes must be positive and finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerHyper {
    pub scale_step: f64,
    pub scale_penalty: f64,
    pub window_influence: f64,
    pub size_lr: f64,
    /// Exemplar crop side as a multiple of `sqrt(w * h)`.
    pub exemplar_context: f64,
    /// Search crop side as a multiple of `sqrt(w * h)`.
    pub search_context: f64,
}

impl Default for TrackerHyper {
    fn default() -> Self {
        Self {
            scale_step: 1.025,
            scale_penalty: 0.975,
            window_influence: 0.176,
            size_lr: 0.59,
            exemplar_context: 2.0,
            search_context: 4.0,
        }
    }
}

/// Side length of the square crop around `bbox`.
pub fn crop_side(bbox: &BBox, context: f64) -> f64 {
    context * (bbox.w * bbox.h).sqrt()
}

/// Square crop of side `context * sqrt(w * h)` centred on the box, padded
/// with the per-channel frame mean and resized to `out_size`.
pub fn crop_patch(frame: &Tensor, bbox: &BBox, context: f64, out_size: usize) -> Result<Tensor> {
    bbox.validate()?;
    if frame.is_empty() || frame.batch() != 1 {
        return Err(Error::shape("frame", format!("expected one non-empty frame, got {:?}", frame.dims())));
    }
    let side = crop_side(bbox, context).round().max(1.0) as usize;
    let [_, c, h, w] = frame.dims();
    let x0 = (bbox.cx - side as f64 / 2.0).round() as i64;
    let y0 = (bbox.cy - side as f64 / 2.0).round() as i64;
    let src = frame.real()?;
    let mut crop = Vec::with_capacity(c * side * side);
    for plane in src.chunks(h * w) {
        let mean = (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32;
        for y in 0..side as i64 {
            let fy = y0 + y;
            for x in 0..side as i64 {
                let fx = x0 + x;
                let inside = fy >= 0 && fx >= 0 && (fy as usize) < h && (fx as usize) < w;
                crop.push(if inside { plane[fy as usize * w + fx as usize] } else { mean });
            }
        }
    }
    let crop = Tensor::from_real([1, c, side, side], crop)?;
    if side == out_size {
        return Ok(crop);
    }
    resize_bilinear(&crop, out_size, out_size)
}

/// Offset subtracted from every pixel before the network sees it.
pub const INPUT_MEAN: f32 = 0.5;

/// `crop_patch` shifted by `INPUT_MEAN`; what `embed` is fed.
pub fn network_patch(frame: &Tensor, bbox: &BBox, context: f64, out_size: usize) -> Result<Tensor> {
    let mut patch = crop_patch(frame, bbox, context, out_size)?;
    patch.real_mut()?.iter_mut().for_each(|v| *v -= INPUT_MEAN);
    Ok(patch)
}

/// Hann window, outer product, peak 1 at the centre.
pub fn cosine_window(size: usize) -> Vec<f32> {
    let hann: Vec<f64> = (0..size)
        .map(|i| {
            if size == 1 {
                1.0
            } else {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (size - 1) as f64).cos())
            }
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for a in &hann {
        for b in &hann {
            out.push((a * b) as f32);
        }
    }
    out
}

/// Three-point parabolic refinement around `cell` of an `h x w` map.
/// Border cells on an axis get zero offset on that axis.
pub fn peak_subpixel(map: &[f32], h: usize, w: usize, cell: (usize, usize)) -> (f64, f64) {
    let (r, c) = cell;
    let at = |y: usize, x: usize| map[y * w + x] as f64;
    let refine = |left: f64, centre: f64, right: f64| {
        let den = 2.0 * (2.0 * centre - left - right);
        if den.abs() <= 1e-12 {
            0.0
        } else {
            ((right - left) / den).clamp(-0.5, 0.5)
        }
    };
    let dr = if r == 0 || r + 1 >= h { 0.0 } else { refine(at(r - 1, c), at(r, c), at(r + 1, c)) };
    let dc = if c == 0 || c + 1 >= w { 0.0 } else { refine(at(r, c - 1), at(r, c), at(r, c + 1)) };
    (dr, dc)
}

/// Per-target state: the exemplar embedding is computed once at init.
#[derive(Debug, Clone)]
pub struct TrackerState {
    exemplar: Tensor,
    bbox: BBox,
    scale_factors: [f64; 5],
    window: Vec<f32>,
    map_size: usize,
    hyper: TrackerHyper,
}

/// Embed the first-frame exemplar and seed the state.
pub fn init(net: &SiamNetwork, frame: &Tensor, bbox: BBox, hyper: TrackerHyper) -> Result<TrackerState> {
    let m = net.manifest();
    let patch = network_patch(frame, &bbox, hyper.exemplar_context, m.exemplar_size())?;
    let exemplar = net.embed(&patch)?;
    let map_size = m.score_size()?;
    let scale_factors = [-2, -1, 0, 1, 2].map(|e| hyper.scale_step.powi(e));
    Ok(TrackerState {
        exemplar,
        bbox,
        scale_factors,
        window: cosine_window(map_size),
        map_size,
        hyper,
    })
}

fn sigmoid(x: f32) -> f64 {
    1.0 / (1.0 + (-(x as f64)).exp())
}

impl TrackerState {
    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn exemplar(&self) -> &Tensor {
        &self.exemplar
    }

    pub fn scale_factors(&self) -> [f64; 5] {
        self.scale_factors
    }

    pub fn hyper(&self) -> &TrackerHyper {
        &self.hyper
    }

    /// Locate the target in `frame` and update the box in place.
    pub fn step(&mut self, net: &SiamNetwork, frame: &Tensor) -> Result<BBox> {
        let m = net.manifest();
        let want = m.embedding_dims(m.exemplar_size())?;
        if self.exemplar.dims() != want || m.score_size()? != self.map_size {
            return Err(Error::Contract(format!(
                "tracker state holds a {:?} exemplar; this network produces {want:?}",
                self.exemplar.dims()
            )));
        }
        let n = self.map_size;
        let wi = self.hyper.window_influence;
        let mut best: Option<(f64, usize, usize, Vec<f32>)> = None;
        // Central scale first, so ties keep the current size.
        for si in [2usize, 0, 1, 3, 4] {
            let s = self.scale_factors[si];
            let side = crop_side(&self.bbox, self.hyper.search_context) * s;
            let probe = BBox { w: self.bbox.w * s, h: self.bbox.h * s, ..self.bbox };
            let patch = network_patch(frame, &probe, self.hyper.search_context, m.search_size())?;
            debug_assert!((crop_side(&probe, self.hyper.search_context) - side).abs() < 1e-6 * side.max(1.0));
            let emb = net.embed(&patch)?;
            let scores = net.score(&emb, &self.exemplar)?;
            let penalty = if si == 2 { 1.0 } else { self.hyper.scale_penalty };
            let blended: Vec<f32> = scores
                .real()?
                .iter()
                .zip(&self.window)
                .map(|(&v, &win)| ((1.0 - wi) * sigmoid(v) * penalty + wi * win as f64) as f32)
                .collect();
            let (cell, peak) = blended
                .iter()
                .enumerate()
                .fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            if best.as_ref().is_none_or(|b| peak as f64 > b.0) {
                best = Some((peak as f64, si, cell, blended));
            }
        }
        let (_, si, cell, map) = best.expect("five scales evaluated");
        let (r, c) = (cell / n, cell % n);
        let (dr, dc) = peak_subpixel(&map, n, n, (r, c));
        let s = self.scale_factors[si];
        let side = crop_side(&self.bbox, self.hyper.search_context) * s;
        let px_per_cell = m.total_stride() as f64 * side / m.search_size() as f64;
        let centre = (n / 2) as f64;
        let grow = 1.0 - self.hyper.size_lr + self.hyper.size_lr * s;
        self.bbox = BBox {
            cx: self.bbox.cx + (c as f64 + dc - centre) * px_per_cell,
            cy: self.bbox.cy + (r as f64 + dr - centre) * px_per_cell,
            w: self.bbox.w * grow,
            h: self.bbox.h * grow,
        };
        Ok(self.bbox)
    }
}
