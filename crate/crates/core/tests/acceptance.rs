//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary is always printed.
//! Criterion 5 trains two full models and dominates the runtime.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siamq_core::evalbench::bench::BenchSize;
use siamq_core::evalbench::{
    bench_kernels, bytes_touched_per_output, center_error, evaluate, iou, precision_at, score_sequence, write_bench_csv, EvalReport, EvalRow,
    KernelFamily, Sequence, BENCH_CSV_HEADER, REPORT_CSV_HEADER,
};
use siamq_core::quantize::{binary_dot_popcount, dequantize, footprint, pack_codes, quantize, LayerFootprint, QuantizedTensor};
use siamq_core::siamnet::{build_backbone, container, FastKernel};
use siamq_core::tensor::conv2d;
use siamq_core::toytrain::{
    backward_pass, make_labels, prune_filters, split_seed, synth_sequence, train, write_epoch_csv, Split, TrainConfig, TrainModel, EPOCH_CSV_HEADER,
};
use siamq_core::tracker::{BBox, TrackerHyper};
use siamq_core::{ConvParams, LayerGroup, QuantConfig, QuantScheme, SiamNetwork, Tensor};

/// Regression bound on final over initial validation loss, frozen from the
/// baseline FP32 run (observed ratio 0.84 under the calibrated start).
const VAL_LOSS_RATIO_BOUND: f64 = 0.9;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn random_patch(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    Tensor::from_fn([1, 3, size, size], |_| rng.gen_range(-0.5f32..0.5))
}

fn geometry() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = build_backbone(QuantConfig::FP32, 1).unwrap().into_inference();
    let (z, x) = (random_patch(&mut rng, 127), random_patch(&mut rng, 255));
    let ez = net.embed(&z).unwrap().dims();
    let ex = net.embed(&x).unwrap().dims();
    let map = net.forward_pair(&z, &x).unwrap().dims();
    let elapsed = t.elapsed();
    let ok = ez == [1, 32, 17, 17] && ex == [1, 32, 49, 49] && map == [1, 1, 33, 33];
    Outcome::new(
        ok && within(elapsed, Duration::from_secs(1)),
        format!("z {ez:?}, x {ex:?}, map {map:?} in {:.0} ms", elapsed.as_secs_f64() * 1e3),
    )
}

fn footprint_arithmetic() -> Outcome {
    let t = Instant::now();
    let all = [LayerFootprint { name: "all".into(), group: LayerGroup::Hidden, params: 21_375_000 }];
    let hidden_bytes = |cfg: QuantConfig| footprint(&all, &cfg).unwrap().group(LayerGroup::Hidden).unwrap().bytes;
    let fp32 = footprint(&all, &QuantConfig::FP32).unwrap().total_bytes;
    let ratios = [(QuantConfig::BINARY, 32), (QuantConfig::TERNARY, 16), (QuantConfig::INT4, 8)];
    let mut ok = fp32 == 85_500_000 && ratios.iter().all(|&(c, r)| hidden_bytes(c) * r == fp32);

    // The same ratios hold group-wise on the real backbone.
    let net = build_backbone(QuantConfig::FP32, 1).unwrap().into_inference();
    let entries = net.footprint_entries();
    let group = |cfg: QuantConfig| footprint(&entries, &cfg).unwrap().group(LayerGroup::Hidden).unwrap().bytes;
    let fp32_hidden = group(QuantConfig::FP32);
    ok &= ratios.iter().all(|&(c, r)| group(c) * r == fp32_hidden);
    let int16 = footprint(&all, &QuantConfig::INT16).unwrap().total_mb();
    let elapsed = t.elapsed();
    Outcome::new(
        ok && within(elapsed, Duration::from_secs(1)),
        format!(
            "fp32 {fp32} B; hidden binary/ternary/int4 = {}/{}/{} B; int16 by bits x count gives {int16:.2} MB against the published 38.3 MB",
            hidden_bytes(QuantConfig::BINARY),
            hidden_bytes(QuantConfig::TERNARY),
            hidden_bytes(QuantConfig::INT4)
        ),
    )
}

/// Failures, cases and worst relative error for one scheme over random convolutions.
fn kernel_cases(scheme: QuantScheme, cases: usize, seed: u64) -> (usize, usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = rng.gen_range(1..=4);
        let o = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=3);
        let s = rng.gen_range(1..=2);
        let h = rng.gen_range(k..=k + 7);
        let w = rng.gen_range(k..=k + 7);
        let p = ConvParams::square(k, s, c, o);
        let weights: Vec<f32> = (0..p.weight_count()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let input = Tensor::from_fn([1, c, h, w], |_| rng.gen_range(0.0f32..2.0));
        let codes = QuantizedTensor::quantize(&input, 8).unwrap();
        let block = quantize(&weights, scheme).unwrap();
        let kernel = FastKernel::new(&block, &p).unwrap();

        let acc = kernel.accumulate(&codes, &[]).unwrap();
        let wcodes = Tensor::from_int(p.weight_dims(), block.codes().unwrap()).unwrap();
        let int_ref = conv2d(&codes.codes, &wcodes, None, &p).unwrap();
        let exact = acc.int().unwrap() == int_ref.int().unwrap();

        let real = kernel.conv(&codes, None, &[]).unwrap();
        let wd = Tensor::from_real(p.weight_dims(), dequantize(&block).unwrap()).unwrap();
        let real_ref = conv2d(&codes.dequantize().unwrap(), &wd, None, &p).unwrap();
        let (a, b) = (real.real().unwrap(), real_ref.real().unwrap());
        let max = b.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let rel = if max == 0.0 {
            a.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64
        } else {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max) as f64 / max as f64
        };
        worst = worst.max(rel);
        if !exact || rel > 1e-5 {
            failures += 1;
        }
    }
    (failures, cases, worst)
}

/// Every pair of ±1 vectors with `n ≤ 16`. `b` walks a Gray code so the
/// naive dot product updates by one term per step.
fn popcount_exhaustive() -> (bool, u64) {
    let mut pairs = 0u64;
    for n in 1..=16usize {
        let bytes = n.div_ceil(8);
        let signs = |v: u32| -> Vec<i64> { (0..n).map(|i| if v >> i & 1 == 1 { 1 } else { -1 }).collect() };
        // The packed form of code vector v is v's little-endian bytes.
        for v in 0..1u32 << n {
            if pack_codes(&signs(v), QuantScheme::Binary).unwrap() != v.to_le_bytes()[..bytes] {
                return (false, pairs);
            }
        }
        for a in 0..1u32 << n {
            let sa = signs(a);
            let pa = pack_codes(&sa, QuantScheme::Binary).unwrap();
            let mut b = 0u32;
            let mut dot: i64 = -sa.iter().sum::<i64>();
            for step in 0..1u32 << n {
                if step > 0 {
                    let j = step.trailing_zeros() as usize;
                    b ^= 1 << j;
                    let sb = if b >> j & 1 == 1 { 1 } else { -1 };
                    dot += 2 * sa[j] * sb;
                }
                let pb = b.to_le_bytes();
                if binary_dot_popcount(&pa, &pb[..bytes], n).unwrap() != dot {
                    return (false, pairs);
                }
                pairs += 1;
            }
        }
    }
    (true, pairs)
}

fn kernel_equivalence() -> Outcome {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, scheme) in [QuantScheme::UniformInt(4), QuantScheme::UniformInt(16), QuantScheme::Ternary, QuantScheme::Binary].into_iter().enumerate() {
        let (fail, cases, worst) = kernel_cases(scheme, 1000, 100 + i as u64);
        ok &= fail == 0;
        parts.push(format!("{scheme} {}/{cases} (worst rel {worst:.1e})", cases - fail));
    }
    let (pop_ok, pairs) = popcount_exhaustive();
    ok &= pop_ok;
    let elapsed = t.elapsed();
    Outcome::new(
        ok && within(elapsed, Duration::from_secs(120)),
        format!("{}; popcount {pairs} pairs n<=16 {}; {:.1} s", parts.join(", "), if pop_ok { "exact" } else { "MISMATCH" }, elapsed.as_secs_f64()),
    )
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let check = common::fp32_gradient_check(9, 252);
    let mut ok = check.failures.is_empty() && check.live >= 200;

    // Clipped STE on the binary backbone.
    let net = build_backbone(QuantConfig::BINARY, 21).unwrap();
    let mut model = TrainModel::<f32>::from_network(&net).unwrap();
    let hidden: Vec<usize> = net.manifest().convs().enumerate().filter(|(_, (_, g))| *g == LayerGroup::Hidden).map(|(i, _)| i).collect();
    let mut clipped = Vec::new();
    for &i in &hidden {
        let w = model.weights_mut(i);
        for k in (0..w.len()).step_by(101) {
            w[k] = if k % 2 == 0 { 1.25 } else { -2.0 };
            clipped.push((i, k));
        }
    }
    let net = model.to_network().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (z, x) = (random_patch(&mut rng, 127), random_patch(&mut rng, 255));
    let (_, grads) = backward_pass(&net, &z, &x, &make_labels(2.0, 33).unwrap()).unwrap();
    let blocked = clipped.iter().all(|&(i, k)| grads.weights[i][k] == 0.0);
    let live = hidden.iter().all(|&i| grads.weights[i].iter().any(|&g| g != 0.0));
    ok &= blocked && live;
    let elapsed = t.elapsed();
    Outcome::new(
        ok && within(elapsed, Duration::from_secs(120)),
        format!(
            "{} probes ({} non-zero), worst rel {:.1e}, {} failures; binary STE blocked {} clipped weights: {blocked}; {:.1} s",
            check.probes,
            check.live,
            check.worst,
            check.failures.len(),
            clipped.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn held_out(cfg: &TrainConfig) -> Vec<Sequence> {
    (0..10)
        .map(|i| {
            let s = synth_sequence(split_seed(cfg.seed, Split::Test, i), &cfg.synth).unwrap();
            Sequence { name: format!("test{i}"), frames: s.frames, ground_truth: s.boxes }
        })
        .collect()
}

fn toy_end_to_end() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, quant) in [("fp32", QuantConfig::FP32), ("binary", QuantConfig::BINARY)] {
        let cfg = TrainConfig { quant, ..Default::default() };
        let t = Instant::now();
        let out = match train(&cfg) {
            Ok(o) => o,
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: training failed: {e}"));
                continue;
            }
        };
        let trained = t.elapsed();
        let net = out.network.into_inference();
        let report = evaluate(&net, &held_out(&cfg), TrackerHyper::default(), 20.0).unwrap();
        let total = t.elapsed();
        let (p, i) = (report.average_precision(), report.average_iou());
        let ratio = out.logs.last().unwrap().val_loss / out.initial_val_loss;
        let this = p >= 90.0 && i >= 50.0 && within(total, Duration::from_secs(30 * 60));
        let ratio_ok = quant != QuantConfig::FP32 || ratio < VAL_LOSS_RATIO_BOUND;
        ok &= this && ratio_ok;
        parts.push(format!(
            "{name}: P@20 {p:.1}% IOU {i:.1}%, val loss {:.3} -> {:.3} (ratio {ratio:.3}), best epoch {}, train {:.0} s, total {:.0} s",
            out.initial_val_loss,
            out.logs.last().unwrap().val_loss,
            out.best_epoch,
            trained.as_secs_f64(),
            total.as_secs_f64()
        ));
    }
    Outcome::new(ok, parts.join("; "))
}

fn metrics() -> Outcome {
    let b = |x, y, w, h| BBox::from_corner(x, y, w, h);
    let mut ok = center_error(&b(0.0, 0.0, 2.0, 2.0), &b(0.0, 0.0, 2.0, 2.0)) == 0.0;
    ok &= center_error(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(3.0, 4.0, 1.0, 1.0)) == 5.0;
    ok &= iou(&b(0.0, 0.0, 10.0, 10.0), &b(0.0, 0.0, 10.0, 10.0)) == 1.0;
    ok &= (iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12;
    ok &= iou(&b(0.0, 0.0, 10.0, 10.0), &b(20.0, 0.0, 10.0, 10.0)) == 0.0;
    ok &= precision_at(&[5.0, 25.0, 10.0, 30.0], 20.0).unwrap() == 50.0;
    ok &= precision_at(&[0.0; 7], 20.0).unwrap() == 100.0;
    ok &= precision_at(&[0.5, 3.0], 0.0).unwrap() == 0.0;
    ok &= precision_at(&[], 20.0).is_err();
    let seqs = held_out(&TrainConfig::default());
    let oracle: Vec<EvalRow> = seqs.iter().map(|s| score_sequence(&s.name, &s.ground_truth, &s.ground_truth, 20.0).unwrap()).collect();
    let perfect = oracle.iter().all(|r| r.precision_pct == 100.0 && (r.iou_pct - 100.0).abs() < 1e-9);
    Outcome::new(ok && perfect, format!("unit examples exact: {ok}; oracle 100/100 on {} of {} sequences", oracle.iter().filter(|r| r.precision_pct == 100.0).count(), oracle.len()))
}

fn pruning() -> Outcome {
    let t = Instant::now();
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random_patch(&mut rng, 127);
    for cfg in [QuantConfig::FP32, QuantConfig::INT16] {
        let net = build_backbone(cfg, 17).unwrap();
        let mut model = TrainModel::<f32>::from_network(&net).unwrap();
        let hidden: Vec<(usize, usize, usize)> = net
            .manifest()
            .convs()
            .enumerate()
            .filter(|(_, (_, g))| *g == LayerGroup::Hidden)
            .map(|(i, (p, _))| (i, p.out_channels, p.fan_in()))
            .collect();
        let mut dead = Vec::new();
        for &(i, out, fan_in) in &hidden {
            let mut filters: Vec<usize> = (0..(out as f64 * 0.1).ceil() as usize).map(|j| (7 * j + 3) % out).collect();
            for &o in &filters {
                model.weights_mut(i)[o * fan_in..(o + 1) * fan_in].fill(0.0);
                model.bias_mut(i).unwrap()[o] = 0.0;
            }
            filters.sort_unstable();
            dead.push((i, filters));
        }
        let before = model.to_network().unwrap();
        let after = prune_filters(&before, 0.1, 1, 0, &TrainConfig::default()).unwrap();
        ok &= dead.iter().all(|(i, f)| after.conv_weights()[*i].pruned() == f.as_slice());
        ok &= before.embed(&z).unwrap() == after.embed(&z).unwrap();
        let half = prune_filters(&before, 0.5, 1, 0, &TrainConfig::default()).unwrap();
        ok &= hidden.iter().all(|&(i, out, _)| half.conv_weights()[i].pruned().len() == out.div_ceil(2));
        let bytes = |n: &SiamNetwork| footprint(&n.footprint_entries(), n.config()).unwrap().total_bytes;
        ok &= bytes(&half) < bytes(&before);
    }
    let elapsed = t.elapsed();
    Outcome::new(
        ok && within(elapsed, Duration::from_secs(60)),
        format!("dead filters pruned first with bit-identical embeddings, ceil(out/2) masked at 0.5, fp32 and int16; {:.1} s", elapsed.as_secs_f64()),
    )
}

fn persistence() -> Outcome {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = random_patch(&mut rng, 127);
    for (_, cfg) in QuantConfig::table_rows() {
        let net = build_backbone(cfg, 5).unwrap();
        let bytes = container::to_bytes(&net).unwrap();
        let back = container::from_bytes(&bytes).unwrap();
        ok &= container::to_bytes(&back).unwrap() == bytes;
        ok &= net.embed(&z).unwrap() == back.embed(&z).unwrap();
    }
    let mut buf = Vec::new();
    write_epoch_csv(&[], &mut buf).unwrap();
    let epoch_header = String::from_utf8(buf).unwrap();
    ok &= epoch_header.trim_end() == "epoch,train_loss,val_loss,train_cerr,val_cerr" && EPOCH_CSV_HEADER == epoch_header.trim_end();
    let mut buf = Vec::new();
    EvalReport { rows: vec![], threshold: 20.0 }.write_csv(&mut buf).unwrap();
    let report = String::from_utf8(buf).unwrap();
    ok &= report.lines().next() == Some(REPORT_CSV_HEADER);
    Outcome::new(ok, format!("5 presets round-trip bit-exactly; headers '{EPOCH_CSV_HEADER}' and '{REPORT_CSV_HEADER}'"))
}

fn benchmark() -> Outcome {
    let sizes = BenchSize::backbone_hidden();
    let rows = match bench_kernels(&sizes, 3) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("gating failed: {e}")),
    };
    let mut buf = Vec::new();
    write_bench_csv(&rows, &mut buf).unwrap();
    let csv = String::from_utf8(buf).unwrap();
    let mut ok = csv.lines().next() == Some(BENCH_CSV_HEADER) && csv.lines().count() == 1 + 5 * sizes.len();
    ok &= KernelFamily::ALL.iter().all(|f| rows.iter().filter(|r| r.kernel == *f).count() == sizes.len());
    ok &= rows.iter().all(|r| r.ns_per_call.is_finite() && r.ns_per_call > 0.0);
    let mut worst = 0.0f64;
    for s in &sizes {
        let fan_in = s.params().fan_in();
        let (fw, fa) = bytes_touched_per_output(KernelFamily::Fp32Reference, fan_in);
        for fam in [KernelFamily::BinaryAddSub, KernelFamily::BinaryPopcount] {
            let (bw, ba) = bytes_touched_per_output(fam, fan_in);
            let r = if fam == KernelFamily::BinaryPopcount { (bw + ba) as f64 / (fw + fa) as f64 } else { bw as f64 / fw as f64 };
            worst = worst.max(r);
        }
    }
    ok &= worst <= 1.0 / 32.0;
    Outcome::new(ok, format!("{} rows over {} sizes, gating passed; worst binary/fp32 bytes-touched ratio {worst:.4} (limit 0.03125)", rows.len(), sizes.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("geometry", geometry),
        ("footprint arithmetic", footprint_arithmetic),
        ("kernel equivalence", kernel_equivalence),
        ("gradient checks", gradient_checks),
        ("toy end-to-end", toy_end_to_end),
        ("metrics", metrics),
        ("pruning", pruning),
        ("persistence", persistence),
        ("benchmark", benchmark),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("criterion {n} ({name}): SKIP");
            continue;
        }
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!("criterion {n} ({name}): {}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
