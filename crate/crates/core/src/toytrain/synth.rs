//! Synthetic tracking sequences: a textured rectangle or ellipse moving
//! over a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tracker::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub frame_width: usize,
    pub frame_height: usize,
    pub frames: usize,
    /// Object side range in pixels, sampled independently for w and h.
    pub object_min: f64,
    pub object_max: f64,
    /// Fixed velocity in px/frame; random direction with speed up to
    /// `speed_max` when absent.
    pub velocity: Option<(f64, f64)>,
    pub speed_max: f64,
    /// Per-frame positional jitter, uniform in `[-jitter, jitter]` px.
    pub jitter: f64,
    /// Amplitude of the background noise.
    pub noise: f64,
    /// `None` picks a shape per sequence.
    pub shape: Option<Shape>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            frame_width: 192,
            frame_height: 160,
            frames: 24,
            object_min: 24.0,
            object_max: 40.0,
            velocity: None,
            speed_max: 2.5,
            jitter: 0.5,
            noise: 0.15,
            shape: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub frames: Vec<Tensor>,
    pub boxes: Vec<BBox>,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let side = self.frame_width.min(self.frame_height) as f64;
        if self.frames < 2 {
            return Err(Error::Config("a sequence needs at least two frames".into()));
        }
        if !(self.object_min > 0.0 && self.object_min <= self.object_max) {
            return Err(Error::Config(format!("bad object size range {}..{}", self.object_min, self.object_max)));
        }
        if self.object_max >= side {
            return Err(Error::Config(format!(
                "object up to {} px does not fit a {}x{} frame",
                self.object_max, self.frame_width, self.frame_height
            )));
        }
        let finite = [self.speed_max, self.jitter, self.noise].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.velocity.is_some_and(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Config("motion and noise parameters must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Fold `p` into `[lo, hi]` by mirror reflection at the ends.
fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let t = (p - lo).rem_euclid(2.0 * span);
    lo + if t > span { 2.0 * span - t } else { t }
}

/// Deterministic sequence for `seed`.
pub fn synth_sequence(seed: u64, params: &SynthParams) -> Result<SynthSequence> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fw, fh) = (params.frame_width, params.frame_height);
    let ow = rng.gen_range(params.object_min..=params.object_max);
    let oh = rng.gen_range(params.object_min..=params.object_max);
    let shape = params
        .shape
        .unwrap_or(if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse });
    let (lo_x, hi_x) = (ow / 2.0, fw as f64 - ow / 2.0);
    let (lo_y, hi_y) = (oh / 2.0, fh as f64 - oh / 2.0);
    let x0 = rng.gen_range(lo_x..=hi_x);
    let y0 = rng.gen_range(lo_y..=hi_y);
    let (vx, vy) = params.velocity.unwrap_or_else(|| {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = rng.gen_range(0.0..=params.speed_max);
        (speed * angle.cos(), speed * angle.sin())
    });

    let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let background: Vec<f32> = (0..3 * fw * fh)
        .map(|i| (bg[i / (fw * fh)] + params.noise as f32 * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0))
        .collect();
    let colour_a: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let colour_b: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let stripe_angle = rng.gen_range(0.0..std::f64::consts::PI);
    let period = rng.gen_range(5.0..12.0);
    let (sa, ca) = stripe_angle.sin_cos();

    let mut frames = Vec::with_capacity(params.frames);
    let mut boxes = Vec::with_capacity(params.frames);
    for t in 0..params.frames {
        let mut jit = || if params.jitter > 0.0 { rng.gen_range(-params.jitter..=params.jitter) } else { 0.0 };
        let (jx, jy) = (jit(), jit());
        let cx = reflect(x0 + vx * t as f64 + jx, lo_x, hi_x);
        let cy = reflect(y0 + vy * t as f64 + jy, lo_y, hi_y);
        let mut img = background.clone();
        if params.noise > 0.0 {
            let amp = params.noise as f32 * 0.25;
            for v in &mut img {
                *v = (*v + amp * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0);
            }
        }
        let x_start = ((cx - ow / 2.0).floor().max(0.0)) as usize;
        let x_end = ((cx + ow / 2.0).ceil() as usize).min(fw);
        let y_start = ((cy - oh / 2.0).floor().max(0.0)) as usize;
        let y_end = ((cy + oh / 2.0).ceil() as usize).min(fh);
        for y in y_start..y_end {
            for x in x_start..x_end {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let inside = match shape {
                    Shape::Rect => dx.abs() <= ow / 2.0 && dy.abs() <= oh / 2.0,
                    Shape::Ellipse => (dx / (ow / 2.0)).powi(2) + (dy / (oh / 2.0)).powi(2) <= 1.0,
                };
                if !inside {
                    continue;
                }
                let phase = (dx * ca + dy * sa) / period;
                let stripe = phase.rem_euclid(1.0) < 0.5;
                let colour = if stripe { &colour_a } else { &colour_b };
                for c in 0..3 {
                    img[c * fw * fh + y * fw + x] = colour[c];
                }
            }
        }
        frames.push(Tensor::from_real([1, 3, fh, fw], img)?);
        boxes.push(BBox::new(cx, cy, ow, oh));
    }
    Ok(SynthSequence { frames, boxes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still(p: SynthParams) -> SynthParams {
        SynthParams { jitter: 0.0, ..p }
    }

    #[test]
    fn zero_velocity_constant_centre() {
        let p = still(SynthParams { velocity: Some((0.0, 0.0)), frames: 6, ..Default::default() });
        let s = synth_sequence(3, &p).unwrap();
        assert!(s.boxes.iter().all(|b| b == &s.boxes[0]));
    }

    #[test]
    fn linear_motion() {
        let p = still(SynthParams {
            velocity: Some((2.0, 0.0)),
            frames: 10,
            frame_width: 400,
            ..Default::default()
        });
        // Seeds whose start leaves room for 18 px without a bounce.
        let s = (0..50)
            .map(|seed| synth_sequence(seed, &p).unwrap())
            .find(|s| s.boxes[0].cx + 18.0 < 400.0 - s.boxes[0].w / 2.0)
            .unwrap();
        assert!((s.boxes[9].cx - s.boxes[0].cx - 18.0).abs() < 1e-9);
        assert_eq!(s.boxes[9].cy, s.boxes[0].cy);
    }

    #[test]
    fn deterministic() {
        let p = SynthParams { frames: 3, ..Default::default() };
        let a = synth_sequence(11, &p).unwrap();
        let b = synth_sequence(11, &p).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.real().unwrap(), y.real().unwrap());
        }
        assert_eq!(a.boxes, b.boxes);
        let c = synth_sequence(12, &p).unwrap();
        assert_ne!(a.frames[0].real().unwrap(), c.frames[0].real().unwrap());
    }

    #[test]
    fn object_too_large() {
        let p = SynthParams { object_min: 50.0, object_max: 200.0, ..Default::default() };
        assert!(matches!(synth_sequence(0, &p), Err(Error::Config(_))));
    }

    #[test]
    fn boxes_stay_inside() {
        let p = SynthParams { speed_max: 9.0, frames: 60, ..Default::default() };
        for seed in 0..5 {
            let s = synth_sequence(seed, &p).unwrap();
            for b in &s.boxes {
                assert!(b.cx - b.w / 2.0 >= -1e-9 && b.cx + b.w / 2.0 <= 192.0 + 1e-9);
                assert!(b.cy - b.h / 2.0 >= -1e-9 && b.cy + b.h / 2.0 <= 160.0 + 1e-9);
            }
        }
    }

    #[test]
    fn reflection() {
        assert_eq!(reflect(5.0, 0.0, 10.0), 5.0);
        assert_eq!(reflect(12.0, 0.0, 10.0), 8.0);
        assert_eq!(reflect(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(reflect(23.0, 0.0, 10.0), 3.0);
    }
}
