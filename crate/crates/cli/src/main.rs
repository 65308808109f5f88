use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use siamq_core::evalbench::bench::BenchSize;
use siamq_core::evalbench::{self, bench_kernels, evaluate, load_dataset, load_sequence, save_sequence, write_bench_csv, Sequence, SequenceSource};
use siamq_core::quantize::footprint;
use siamq_core::siamnet::container;
use siamq_core::toytrain::{self, split_seed, synth_sequence, write_epoch_csv, Split, SynthParams, TrainConfig};
use siamq_core::tracker::TrackerHyper;
use siamq_core::{Error, QuantConfig, Result};

#[derive(Parser)]
#[command(name = "siamq", version, about = "Quantized Siamese tracker toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic sequences and save the best-validation model.
    TrainToy {
        /// TOML training config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Precision preset overriding the config's `quant`.
        #[arg(long)]
        quant: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rank and zero hidden filters by L1 norm, fine-tuning in between.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        finetune_epochs: usize,
        /// Training config used for fine-tuning.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic sequences as PNG frames plus groundtruth.txt.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// TOML table of generator parameters.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Track one sequence, seeded with its first ground-truth box.
    Track {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Rows `frame,x,y,w,h` in corner form.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        one_based: bool,
    },
    /// Precision and IOU over every sequence under a directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Centre-error threshold in pixels.
        #[arg(long, default_value_t = 20.0)]
        threshold: f64,
        #[arg(long)]
        one_based: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Weight bytes per layer group, and for every precision preset.
    Footprint {
        #[arg(long)]
        model: PathBuf,
    },
    /// Re-quantize a model's real weights under another precision preset.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// fp32, int16, int4, ternary or binary.
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the convolution kernels after checking they agree.
    Bench {
        /// Sizes as CxHxW-kK-oO; defaults to the backbone's hidden layers.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainToy { config, quant, out, log } => {
            let mut cfg: TrainConfig = read_toml(config.as_deref())?;
            if let Some(q) = quant {
                cfg.quant = QuantConfig::preset(&q)?;
            }
            let outcome = toytrain::train(&cfg)?;
            info!("best epoch {} of {}", outcome.best_epoch, outcome.logs.len());
            if let Some(log) = log {
                let mut w = create(&log)?;
                write_epoch_csv(&outcome.logs, &mut w)?;
                w.flush()?;
            }
            let best = &outcome.logs[outcome.best_epoch - 1];
            println!(
                "initial val loss {:.4}, best epoch {} val loss {:.4}, val centre error {:.2} px",
                outcome.initial_val_loss, outcome.best_epoch, best.val_loss, best.val_center_err_px
            );
            container::save(&outcome.network, &out)
        }
        Command::Prune { model, fraction, iterations, finetune_epochs, config, out } => {
            let cfg: TrainConfig = read_toml(config.as_deref())?;
            let net = container::load(&model)?;
            let before = footprint(&net.footprint_entries(), net.config())?.total_bytes;
            let pruned = toytrain::prune_filters(&net, fraction, iterations, finetune_epochs, &cfg)?;
            let after = footprint(&pruned.footprint_entries(), pruned.config())?.total_bytes;
            println!("weight bytes {before} -> {after}");
            container::save(&pruned, &out)
        }
        Command::Synth { out, count, seed, params } => {
            let params: SynthParams = read_toml(params.as_deref())?;
            for i in 0..count {
                let s = synth_sequence(split_seed(seed, Split::Test, i), &params)?;
                let seq = Sequence { name: format!("synth{i:03}"), frames: s.frames, ground_truth: s.boxes };
                save_sequence(out.join(&seq.name), &seq)?;
            }
            println!("wrote {count} sequences to {}", out.display());
            Ok(())
        }
        Command::Track { model, sequence, out, one_based } => {
            let net = container::load(&model)?;
            let ann = load_sequence(&sequence, one_based)?;
            let seq = ann.materialize()?;
            let boxes = evalbench::track_sequence(&net, &seq, TrackerHyper::default())
                .map_err(|e| Error::Sequence { name: ann.name.clone(), source: Box::new(e) })?;
            let mut w = create(&out)?;
            writeln!(w, "frame,x,y,w,h")?;
            for (i, b) in boxes.iter().enumerate() {
                let [x, y, bw, bh] = b.to_corner();
                writeln!(w, "{i},{x:.3},{y:.3},{bw:.3},{bh:.3}")?;
            }
            w.flush()?;
            Ok(())
        }
        Command::Eval { model, data, threshold, one_based, report } => {
            if !(threshold.is_finite() && threshold >= 0.0) {
                return Err(Error::Config(format!("threshold {threshold} must be a non-negative number")));
            }
            let net = container::load(&model)?;
            let sequences = load_dataset(&data, one_based)?;
            let rep = evaluate(&net, &sequences, TrackerHyper::default(), threshold)?;
            let mut stdout = std::io::stdout().lock();
            rep.write_csv(&mut stdout)?;
            if let Some(path) = report {
                let mut w = create(&path)?;
                rep.write_csv(&mut w)?;
                w.flush()?;
            }
            Ok(())
        }
        Command::Footprint { model } => {
            let net = container::load(&model)?;
            let entries = net.footprint_entries();
            println!("{}", footprint(&entries, net.config())?);
            println!();
            println!("{:<8} {:>14} {:>10}", "preset", "bytes", "MB");
            for (name, cfg) in QuantConfig::table_rows() {
                let r = footprint(&entries, &cfg)?;
                println!("{:<8} {:>14} {:>10.3}", name, r.total_bytes, r.total_mb());
            }
            Ok(())
        }
        Command::Quantize { model, scheme, out } => {
            let cfg = QuantConfig::preset(&scheme)?;
            let net = container::load(&model)?;
            container::save(&net.requantize(cfg)?, &out)
        }
        Command::Bench { sizes, reps, out } => {
            let sizes = if sizes.is_empty() {
                BenchSize::backbone_hidden()
            } else {
                sizes.iter().map(|s| s.parse()).collect::<Result<Vec<BenchSize>>>()?
            };
            if reps == 0 {
                return Err(Error::Config("at least one repetition is needed".into()));
            }
            let rows = bench_kernels(&sizes, reps)?;
            let mut w = create(&out)?;
            write_bench_csv(&rows, &mut w)?;
            w.flush()?;
            for r in &rows {
                println!("{:<14} {:<22} {:>14.0} ns {:>9.3} GOPS", r.kernel.name(), r.size.to_string(), r.ns_per_call, r.effective_gops);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
