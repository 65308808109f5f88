//! Sequence ingestion, tracking metrics, evaluation reports and the kernel
//! micro-benchmark.

pub mod bench;

use std::borrow::Cow;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::siamnet::SiamNetwork;
use crate::tensor::Tensor;
use crate::tracker::{self, BBox, TrackerHyper};

pub use bench::{bench_kernels, bytes_touched_per_output, write_bench_csv, BenchRow, KernelFamily, BENCH_CSV_HEADER};

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
pub const REPORT_CSV_HEADER: &str = "sequence,frames,precision,iou";

/// A sequence on disk: ordered frame files plus one box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceAnnotation {
    pub name: String,
    pub frame_paths: Vec<PathBuf>,
    pub ground_truth: Vec<BBox>,
}

/// A sequence held in memory.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub ground_truth: Vec<BBox>,
}

/// Anything [`evaluate`] can turn into frames on demand.
pub trait SequenceSource: Sync {
    fn name(&self) -> &str;
    fn materialize(&self) -> Result<Cow<'_, Sequence>>;
}

impl SequenceSource for Sequence {
    fn name(&self) -> &str {
        &self.name
    }

    fn materialize(&self) -> Result<Cow<'_, Sequence>> {
        Ok(Cow::Borrowed(self))
    }
}

impl SequenceSource for SequenceAnnotation {
    fn name(&self) -> &str {
        &self.name
    }

    fn materialize(&self) -> Result<Cow<'_, Sequence>> {
        let frames = self.frame_paths.iter().map(|p| decode_image(p)).collect::<Result<Vec<_>>>()?;
        Ok(Cow::Owned(Sequence {
            name: self.name.clone(),
            frames,
            ground_truth: self.ground_truth.clone(),
        }))
    }
}

/// One ground-truth line: `x,y,w,h` or an 8-number polygon.
pub fn parse_groundtruth_line(line: &str, line_no: usize, one_based: bool) -> Result<BBox> {
    let values = line
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{GROUNDTRUTH_FILE} line {line_no}: {e}")))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("{GROUNDTRUTH_FILE} line {line_no}: non-finite coordinate")));
    }
    let shift = if one_based { 1.0 } else { 0.0 };
    let bbox = match values.as_slice() {
        &[x, y, w, h] => BBox::from_corner(x - shift, y - shift, w, h),
        poly if poly.len() == 8 => {
            let xs = poly.iter().step_by(2);
            let ys = poly.iter().skip(1).step_by(2);
            let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            BBox::from_corner(x0 - shift, y0 - shift, x1 - x0, y1 - y0)
        }
        other => {
            return Err(Error::Format(format!(
                "{GROUNDTRUTH_FILE} line {line_no}: expected 4 or 8 numbers, found {}",
                other.len()
            )))
        }
    };
    bbox.validate()
        .map_err(|e| Error::Format(format!("{GROUNDTRUTH_FILE} line {line_no}: {e}")))?;
    Ok(bbox)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Read `dir/groundtruth.txt` and the image files beside it, sorted by name.
pub fn load_sequence(dir: impl AsRef<Path>, one_based: bool) -> Result<SequenceAnnotation> {
    let dir = dir.as_ref();
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::Format(format!("{}: {e}", gt_path.display())))?;
    let mut frame_paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    frame_paths.sort();
    let mut ground_truth = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        ground_truth.push(parse_groundtruth_line(line, i + 1, one_based)?);
        if ground_truth.len() > frame_paths.len() {
            return Err(Error::Format(format!(
                "{GROUNDTRUTH_FILE} line {}: no frame for this entry ({} images)",
                i + 1,
                frame_paths.len()
            )));
        }
    }
    if ground_truth.len() < frame_paths.len() {
        return Err(Error::Format(format!(
            "{GROUNDTRUTH_FILE} line {}: missing entry for frame {} ({} images)",
            text.lines().count() + 1,
            frame_paths[ground_truth.len()].display(),
            frame_paths.len()
        )));
    }
    if frame_paths.len() < 2 {
        return Err(Error::Format(format!("{}: a sequence needs at least two frames", dir.display())));
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(SequenceAnnotation { name, frame_paths, ground_truth })
}

/// `root` itself if it holds a sequence, else every sequence directory
/// directly below it, sorted by name.
pub fn load_dataset(root: impl AsRef<Path>, one_based: bool) -> Result<Vec<SequenceAnnotation>> {
    let root = root.as_ref();
    if root.join(GROUNDTRUTH_FILE).is_file() {
        return Ok(vec![load_sequence(root, one_based)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.join(GROUNDTRUTH_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("{}: no sequence directories with {GROUNDTRUTH_FILE}", root.display())));
    }
    dirs.iter().map(|d| load_sequence(d, one_based)).collect()
}

/// 8-bit PNG/JPEG to a `1x3xHxW` tensor in `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_real([1, 3, h, w], data)
}

fn encode_image(frame: &Tensor, path: &Path) -> Result<()> {
    let [n, c, h, w] = frame.dims();
    if n != 1 || c != 3 {
        return Err(Error::shape("frame", format!("expected a 1x3xHxW frame, got {:?}", frame.dims())));
    }
    let data = frame.real()?;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = (data[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Write frames as PNG plus a 0-based corner-form `groundtruth.txt`.
pub fn save_sequence(dir: impl AsRef<Path>, seq: &Sequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        encode_image(f, &dir.join(format!("{:08}.png", i + 1)))?;
    }
    let mut gt = fs::File::create(dir.join(GROUNDTRUTH_FILE))?;
    for b in &seq.ground_truth {
        let [x, y, w, h] = b.to_corner();
        writeln!(gt, "{x},{y},{w},{h}")?;
    }
    Ok(())
}

/// Euclidean distance between box centres.
pub fn center_error(pred: &BBox, gt: &BBox) -> f64 {
    (pred.cx - gt.cx).hypot(pred.cy - gt.cy)
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou(pred: &BBox, gt: &BBox) -> f64 {
    let ix = ((pred.cx + pred.w / 2.0).min(gt.cx + gt.w / 2.0) - (pred.cx - pred.w / 2.0).max(gt.cx - gt.w / 2.0)).max(0.0);
    let iy = ((pred.cy + pred.h / 2.0).min(gt.cy + gt.h / 2.0) - (pred.cy - pred.h / 2.0).max(gt.cy - gt.h / 2.0)).max(0.0);
    let inter = ix * iy;
    let union = pred.w * pred.h + gt.w * gt.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Percentage of errors strictly below `threshold`.
pub fn precision_at(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Domain("precision of an empty error list".into()));
    }
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    /// Frames scored (every frame after the initialisation frame).
    pub frames: usize,
    pub precision_pct: f64,
    pub iou_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub threshold: f64,
}

impl EvalReport {
    /// Unweighted mean over sequences.
    pub fn average_precision(&self) -> f64 {
        self.rows.iter().map(|r| r.precision_pct).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn average_iou(&self) -> f64 {
        self.rows.iter().map(|r| r.iou_pct).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fmt_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(REPORT_CSV_HEADER.split(',')).map_err(fmt_err)?;
        for r in &self.rows {
            w.write_record([r.name.clone(), r.frames.to_string(), format!("{:.4}", r.precision_pct), format!("{:.4}", r.iou_pct)])
                .map_err(fmt_err)?;
        }
        let frames: usize = self.rows.iter().map(|r| r.frames).sum();
        w.write_record([
            "average".to_string(),
            frames.to_string(),
            format!("{:.4}", self.average_precision()),
            format!("{:.4}", self.average_iou()),
        ])
        .map_err(fmt_err)?;
        w.flush()?;
        Ok(())
    }
}

/// Score predictions for frames `1..`; frame 0 is the initialisation.
pub fn score_sequence(name: &str, predictions: &[BBox], ground_truth: &[BBox], threshold: f64) -> Result<EvalRow> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape("frames", format!("{} predictions for {} frames", predictions.len(), ground_truth.len())));
    }
    let pairs = || predictions.iter().zip(ground_truth).skip(1);
    let errors: Vec<f64> = pairs().map(|(p, g)| center_error(p, g)).collect();
    let precision_pct = precision_at(&errors, threshold)?;
    let iou_pct = 100.0 * pairs().map(|(p, g)| iou(p, g)).sum::<f64>() / errors.len() as f64;
    Ok(EvalRow {
        name: name.to_string(),
        frames: errors.len(),
        precision_pct,
        iou_pct,
    })
}

/// Boxes for every frame: the ground truth at frame 0, then tracker output.
pub fn track_sequence(net: &SiamNetwork, seq: &Sequence, hyper: TrackerHyper) -> Result<Vec<BBox>> {
    if seq.frames.len() != seq.ground_truth.len() || seq.frames.is_empty() {
        return Err(Error::shape("frames", "every frame needs a ground-truth box"));
    }
    let mut state = tracker::init(net, &seq.frames[0], seq.ground_truth[0], hyper)?;
    let mut boxes = vec![seq.ground_truth[0]];
    for f in &seq.frames[1..] {
        boxes.push(state.step(net, f)?);
    }
    Ok(boxes)
}

fn evaluate_one<S: SequenceSource>(net: &SiamNetwork, src: &S, hyper: TrackerHyper, threshold: f64) -> Result<EvalRow> {
    let run = || -> Result<EvalRow> {
        let seq = src.materialize()?;
        let boxes = track_sequence(net, &seq, hyper)?;
        score_sequence(&seq.name, &boxes, &seq.ground_truth, threshold)
    };
    run().map_err(|e| Error::Sequence { name: src.name().to_string(), source: Box::new(e) })
}

/// Track every sequence (in parallel) and report per-sequence metrics in
/// input order.
pub fn evaluate<S: SequenceSource>(net: &SiamNetwork, sequences: &[S], hyper: TrackerHyper, threshold: f64) -> Result<EvalReport> {
    let rows = sequences
        .par_iter()
        .map(|s| evaluate_one(net, s, hyper, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows, threshold })
}

/// [`evaluate`] on the calling thread only.
pub fn evaluate_serial<S: SequenceSource>(net: &SiamNetwork, sequences: &[S], hyper: TrackerHyper, threshold: f64) -> Result<EvalReport> {
    let rows = sequences
        .iter()
        .map(|s| evaluate_one(net, s, hyper, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_line() {
        let b = parse_groundtruth_line("10,20,30,40", 1, false).unwrap();
        assert_eq!((b.cx, b.cy, b.w, b.h), (25.0, 40.0, 30.0, 40.0));
        let b = parse_groundtruth_line("11, 21, 30, 40", 1, true).unwrap();
        assert_eq!((b.cx, b.cy), (25.0, 40.0));
    }

    #[test]
    fn polygon_lines() {
        let b = parse_groundtruth_line("0,0,10,0,10,10,0,10", 1, false).unwrap();
        assert_eq!((b.cx, b.cy, b.w, b.h), (5.0, 5.0, 10.0, 10.0));
        // A square of side sqrt(2)*5 rotated by 45 degrees about (10, 10).
        let b = parse_groundtruth_line("10,5,15,10,10,15,5,10", 1, false).unwrap();
        assert_eq!((b.cx, b.cy, b.w, b.h), (10.0, 10.0, 10.0, 10.0));
    }

    #[test]
    fn bad_lines() {
        for (line, n) in [("1,2,3", 4), ("a,b,c,d", 7), ("1,2,3,4,5,6,7,8,9", 2), ("0,0,-1,5", 3)] {
            match parse_groundtruth_line(line, n, false) {
                Err(Error::Format(m)) => assert!(m.contains(&format!("line {n}")), "{m}"),
                other => panic!("{line}: {other:?}"),
            }
        }
    }

    #[test]
    fn centre_error_examples() {
        let a = BBox::new(0.0, 0.0, 4.0, 4.0);
        let b = BBox::new(3.0, 4.0, 2.0, 2.0);
        assert_eq!(center_error(&a, &a), 0.0);
        assert_eq!(center_error(&a, &b), 5.0);
        assert_eq!(center_error(&b, &a), center_error(&a, &b));
    }

    #[test]
    fn iou_examples() {
        let a = BBox::from_corner(0.0, 0.0, 10.0, 10.0);
        let b = BBox::from_corner(5.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        assert_eq!(iou(&a, &BBox::from_corner(20.0, 20.0, 3.0, 3.0)), 0.0);
        assert_eq!(iou(&a, &BBox::from_corner(10.0, 0.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at(&[5.0, 25.0, 10.0, 30.0], 20.0).unwrap(), 50.0);
        assert_eq!(precision_at(&[0.0; 7], 20.0).unwrap(), 100.0);
        assert_eq!(precision_at(&[0.5, 3.0], 0.0).unwrap(), 0.0);
        assert_eq!(precision_at(&[20.0], 20.0).unwrap(), 0.0);
        assert!(matches!(precision_at(&[], 20.0), Err(Error::Domain(_))));
    }

    #[test]
    fn oracle_scores_perfectly() {
        let gt: Vec<BBox> = (0..6).map(|i| BBox::new(10.0 + i as f64, 20.0, 8.0, 6.0)).collect();
        let row = score_sequence("s", &gt, &gt, 20.0).unwrap();
        assert_eq!((row.frames, row.precision_pct, row.iou_pct), (5, 100.0, 100.0));
    }

    #[test]
    fn report_csv() {
        let report = EvalReport {
            rows: vec![
                EvalRow { name: "a".into(), frames: 4, precision_pct: 100.0, iou_pct: 80.0 },
                EvalRow { name: "b".into(), frames: 2, precision_pct: 50.0, iou_pct: 40.0 },
            ],
            threshold: 20.0,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], REPORT_CSV_HEADER);
        assert_eq!(lines[1], "a,4,100.0000,80.0000");
        assert_eq!(lines[3], "average,6,75.0000,60.0000");
    }
}
