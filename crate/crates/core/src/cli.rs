//! Command-line front end. Each subcommand is a thin wrapper over the
//! library; output goes to stdout or `--out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::arch_by_name;
use crate::calibrate::{materialize_rescalers, quantize_float_model};
use crate::container::{load_model, save_model};
use crate::errmodel::{analyze_model, LayerErrorReport};
use crate::error::{Error, Result};
use crate::finetune::{evaluate_accuracy, finetune, quantize_items, WeightChangeStats};
use crate::float_net::{train_float, FloatModel};
use crate::idx::{load_digit_dir, parse_images, Dataset, DigitData};
use crate::kernels::{forward_int, predict, quantize_pixels};
use crate::model::ModelGraph;
use crate::qcore::MAX_BITS;
use crate::shadow::{EmulationMode, ShadowModel};
use crate::tensor::QTensor;
use crate::trainer::{epoch_log_csv, TrainConfig, CSV_VERSION_LINE};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Format { .. } | Error::Io { .. } | Error::Shape(_) => EXIT_FORMAT,
        _ => EXIT_NUMERIC,
    }
}

/// Default accuracy drop (percentage points) that marks degradation.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: u32,
    /// `None` when some rescaler underflows at this width.
    pub accuracy: Option<f64>,
    pub underflow: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Accuracy (fraction) at `k = 32`.
    pub base_accuracy: f64,
    pub rows: Vec<SweepRow>,
    pub degradation_point: Option<u32>,
}

/// Largest `k` whose accuracy sits more than `threshold` below `base`
/// (the first failing width scanning downward). Accuracies and threshold
/// share units.
pub fn degradation_point(base: f64, per_k: &[(u32, f64)], threshold: f64) -> Option<u32> {
    let mut sorted = per_k.to_vec();
    sorted.sort_by_key(|&(k, _)| std::cmp::Reverse(k));
    sorted
        .into_iter()
        .find(|&(_, acc)| base - acc > threshold)
        .map(|(k, _)| k)
}

/// Integer-engine accuracy of `model` at every width in `k_list`.
pub fn sweep(model: &ModelGraph, data: &Dataset, k_list: &[u32], threshold: f64) -> Result<SweepResult> {
    let mut seen = k_list.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != k_list.len() || k_list.is_empty() {
        return Err(Error::Domain("k list must be non-empty without repeats".into()));
    }
    let base_accuracy = evaluate_accuracy(&materialize_rescalers(model, MAX_BITS)?, data)?;
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let row = match materialize_rescalers(model, k) {
            Ok(m) => SweepRow {
                k,
                accuracy: Some(if k == MAX_BITS {
                    base_accuracy
                } else {
                    evaluate_accuracy(&m, data)?
                }),
                underflow: None,
            },
            Err(e @ Error::RescalerUnderflow { .. }) => SweepRow {
                k,
                accuracy: None,
                underflow: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let percent: Vec<(u32, f64)> = rows
        .iter()
        .filter_map(|r| r.accuracy.map(|a| (r.k, 100.0 * a)))
        .collect();
    Ok(SweepResult {
        degradation_point: degradation_point(100.0 * base_accuracy, &percent, threshold),
        base_accuracy,
        rows,
    })
}

/// `k,accuracy,delta_vs_base` in percent; underflowing widths are marked.
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = format!("{CSV_VERSION_LINE}\nk,accuracy,delta_vs_base\n");
    for row in &result.rows {
        match row.accuracy {
            Some(acc) => writeln!(
                out,
                "{},{:.2},{:.2}",
                row.k,
                100.0 * acc,
                100.0 * (acc - result.base_accuracy)
            ),
            None => writeln!(out, "{},underflow,", row.k),
        }
        .unwrap();
    }
    out
}

pub fn analyze_csv(reports: &[LayerErrorReport]) -> String {
    let mut out = format!("{CSV_VERSION_LINE}\nlayer,channel,M,k,m,s,mismatch_bound,rounding_floor,safe\n");
    for report in reports {
        for c in &report.channels {
            writeln!(
                out,
                "{},{},{:e},{},{},{},{:e},{:e},{}",
                report.layer, c.channel, c.real, c.k, c.m, c.s, c.mismatch_bound, c.rounding_floor, c.safe
            )
            .unwrap();
        }
    }
    out
}

/// Outcome of comparing emulated and integer paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParityReport {
    pub batches: usize,
    pub items: usize,
    pub mismatched_items: usize,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.mismatched_items == 0
    }
}

/// Random int8 batch on the model's input grid.
pub fn random_input_batch<R: Rng>(model: &ModelGraph, n: usize, rng: &mut R) -> Result<QTensor> {
    let mut shape = vec![n];
    shape.extend(&model.input_shape);
    let len: usize = shape.iter().product();
    QTensor::activation((0..len).map(|_| rng.gen()).collect(), shape, model.input)
}

/// Runs `batches` random batches through the integer engine and its
/// binary64 replay at width `k` and counts items whose outputs differ.
pub fn parity_check(model: &ModelGraph, k: u32, batches: usize, batch_size: usize, seed: u64) -> Result<ParityReport> {
    let model = materialize_rescalers(model, k)?;
    let shadow = ShadowModel::from_model(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatched_items = 0;
    for _ in 0..batches {
        let x = random_input_batch(&model, batch_size, &mut rng)?;
        let engine = forward_int(&model, &x)?;
        let emulated = shadow
            .emulated_forward(&x, EmulationMode::Emulated)?
            .outputs(model.output_params())?;
        mismatched_items += (0..batch_size).filter(|&n| engine.item(n) != emulated.item(n)).count();
    }
    Ok(ParityReport {
        batches,
        items: batches * batch_size,
        mismatched_items,
    })
}

pub fn weight_change_report(stats: &WeightChangeStats) -> String {
    let mut out = format!(
        "changed_ratio {:.4}% ({} of {} weights), mean_abs_diff {:.3}, layers_affected {}, biases_changed {}\n",
        100.0 * stats.changed_ratio,
        stats.changed,
        stats.total,
        stats.mean_abs_diff,
        stats.layers_affected,
        stats.biases_changed
    );
    for (layer, hist) in &stats.histograms {
        let cells: Vec<String> = hist.iter().map(|(d, n)| format!("{d:+}:{n}")).collect();
        writeln!(out, "  layer {layer}: {}", cells.join(" ")).unwrap();
    }
    out
}

#[derive(Debug, Parser)]
#[command(
    name = "rescale-lab",
    version,
    about = "Integer-only inference with narrow dyadic rescalers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the four IDX digit files.
    #[arg(long, env = "RESCALE_LAB_DATA", default_value = "data/mnist")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output file (stdout when omitted, for text outputs).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a float baseline.
    TrainFloat {
        #[arg(long, default_value = "desk-cnn-v1")]
        arch: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = TrainConfig::float_baseline().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = TrainConfig::float_baseline().momentum)]
        momentum: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Float model JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Post-training quantization of a float model.
    Quantize {
        /// Float model JSON.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Training images used for calibration.
        #[arg(long, default_value_t = 1000)]
        calib: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify one image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Raw H·W u8 pixels, or an IDX image file.
        #[arg(long)]
        input: PathBuf,
        /// Image index within an IDX file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        k: Option<u32>,
    },
    /// Test accuracy at each rescaler width.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = (2..=32).rev().collect::<Vec<u32>>())]
        k_list: Vec<u32>,
        /// Accuracy drop in percentage points that counts as degradation.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Per-channel rescale error report.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: u32,
        /// Test images used as probes.
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Rescale-aware fine-tuning at width k.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: u32,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Freeze biases.
        #[arg(long)]
        no_bias: bool,
        /// Re-deployed model to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Emulated vs integer output parity on random batches.
    Parity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        k: u32,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_data(args: &DataArgs) -> Result<DigitData> {
    load_digit_dir(&args.data_dir)
}

fn model_at(path: &Path, k: Option<u32>) -> Result<ModelGraph> {
    let model = load_model(path)?;
    match k {
        Some(k) if k != model.k => materialize_rescalers(&model, k),
        _ => Ok(model),
    }
}

/// Reads one image: raw pixels of the model's input size, or entry `index`
/// of an IDX image file.
pub fn read_input_image(model: &ModelGraph, path: &Path, index: usize) -> Result<QTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let item: usize = model.input_shape.iter().product();
    let pixels = if bytes.len() == item {
        bytes
    } else {
        let (n, rows, cols, pixels) = parse_images(&bytes)?;
        if rows * cols != item {
            return Err(Error::Shape(format!(
                "{rows}x{cols} images do not fit input {:?}",
                model.input_shape
            )));
        }
        if index >= n {
            return Err(Error::Domain(format!("image index {index} out of {n}")));
        }
        pixels[index * item..(index + 1) * item].to_vec()
    };
    let mut shape = vec![1];
    shape.extend(&model.input_shape);
    quantize_pixels(&pixels, shape, model.input)
}

/// Executes one parsed command. Text meant for the user goes to stdout;
/// progress goes to stderr.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainFloat {
            arch,
            data,
            epochs,
            lr,
            momentum,
            seed,
            out,
            log,
        } => {
            let arch = arch_by_name(&arch)?;
            let data = load_data(&data)?;
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                momentum,
                seed,
                ..TrainConfig::float_baseline()
            };
            let (model, logs) = train_float(&arch, &data.train, Some(&data.test), &cfg)?;
            model.save(&out)?;
            let csv = epoch_log_csv(&logs, "accuracy");
            match log {
                Some(path) => emit(&csv, Some(&path))?,
                None => eprint!("{csv}"),
            }
            println!("test accuracy {:.2}%", 100.0 * model.test_accuracy.unwrap_or(f64::NAN));
        }
        Command::Quantize {
            model,
            data,
            calib,
            out,
        } => {
            let float = FloatModel::load(&model)?;
            let data = load_data(&data)?;
            let calib = data.train.take(calib);
            if calib.is_empty() {
                return Err(Error::Calibration("no calibration images".into()));
            }
            let batches: Vec<Vec<u8>> = calib
                .images
                .chunks(100 * calib.image_len())
                .map(<[u8]>::to_vec)
                .collect();
            let q = quantize_float_model(&float, &batches)?;
            save_model(&q, &out)?;
            println!(
                "integer test accuracy {:.2}%",
                100.0 * evaluate_accuracy(&q, &data.test)?
            );
        }
        Command::Infer { model, input, index, k } => {
            let model = model_at(&model, k)?;
            let x = read_input_image(&model, &input, index)?;
            println!("{}", predict(&model, &x)?[0]);
        }
        Command::Sweep {
            model,
            data,
            k_list,
            threshold,
            out,
        } => {
            let model = load_model(&model)?;
            let data = load_data(&data)?;
            let result = sweep(&model, &data.test, &k_list, threshold)?;
            emit(&sweep_csv(&result), out.out.as_deref())?;
            match result.degradation_point {
                Some(k) => eprintln!("degradation point: k = {k}"),
                None => eprintln!("degradation point: none"),
            }
        }
        Command::Analyze {
            model,
            data,
            k,
            probes,
            out,
        } => {
            let model = load_model(&model)?;
            let data = load_data(&data)?;
            let indices: Vec<usize> = (0..probes.min(data.test.len())).collect();
            let probes: Vec<QTensor> = indices
                .chunks(50)
                .map(|chunk| quantize_items(&model, &data.test, chunk).map(|(x, _)| x))
                .collect::<Result<_>>()?;
            let reports = analyze_model(&model, &probes, k)?;
            emit(&analyze_csv(&reports), out.out.as_deref())?;
        }
        Command::Finetune {
            model,
            data,
            k,
            epochs,
            lr,
            seed,
            no_bias,
            out,
            log,
        } => {
            let model = model_at(&model, Some(k))?;
            let data = load_data(&data)?;
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                seed,
                train_bias: !no_bias,
                ..TrainConfig::default()
            };
            let before = evaluate_accuracy(&model, &data.test)?;
            let outcome = finetune(&model, &data.train, &data.test, &cfg, k)?;
            save_model(&outcome.model, &out)?;
            let csv = epoch_log_csv(&outcome.logs, "int_accuracy");
            if let Some(path) = log {
                emit(&csv, Some(&path))?;
            }
            println!("k = {k}: integer accuracy before {:.2}%", 100.0 * before);
            for l in &outcome.logs {
                println!(
                    "epoch {}: loss {:.4}, integer accuracy {:.2}%",
                    l.epoch,
                    l.loss,
                    100.0 * l.accuracy
                );
            }
            print!("{}", weight_change_report(&outcome.stats));
        }
        Command::Parity {
            model,
            k,
            batches,
            batch_size,
            seed,
        } => {
            let model = load_model(&model)?;
            let report = parity_check(&model, k, batches, batch_size, seed)?;
            if report.passed() {
                println!(
                    "pass: {} items in {} batches bit-identical at k = {k}",
                    report.items, report.batches
                );
            } else {
                println!(
                    "fail: {} of {} items differ at k = {k}",
                    report.mismatched_items, report.items
                );
                return Err(Error::Domain("emulated and integer outputs differ".into()));
            }
        }
    }
    Ok(())
}
