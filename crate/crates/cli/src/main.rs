//! `aflow`: dataset generation, training, evaluation and synthesis.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aflow::checkpoint::load_checkpoint;
use aflow::dataset::{encode_transform, generate_dataset, Dataset, Split};
use aflow::eval::{confusion_matrix, evaluate, visualize_confidence, visualize_flow, Predictor};
use aflow::image::Raster;
use aflow::network::{sigmoid, OutputMode};
use aflow::trainer::{self, LossRegion, TrainMode, TrainPaths};
use aflow::{Error, Result, ViewTransform};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "loss.log";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "aflow", version, about = "View synthesis by appearance flow")]
struct Cli {
    /// Worker threads. 1 is the reference serial path; more threads give the same results.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural rotation dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        /// Image side in pixels: 32 or 64.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes checkpoint.ckpt, loss.log and config.toml under --out.
    Train(TrainArgs),
    /// Mean foreground L1 (or mask accuracy) over sampled tuples; writes report.toml.
    Eval {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 20_000)]
        tuples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Input-by-target azimuth error matrix; writes confusion.toml and confusion.png.
    Confusion {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 10)]
        samples_per_cell: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a novel view from one or more PNG inputs; writes synth.png plus overlays.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated input PNGs.
        #[arg(long, value_delimiter = ',', required = true)]
        input: Vec<PathBuf>,
        /// Comma-separated azimuth deltas in degrees, one per input.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        delta: Vec<i32>,
        /// Flow lines drawn in each overlay.
        #[arg(long, default_value_t = 40)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate decay interval in iterations.
    #[arg(long)]
    step_size: Option<u64>,
    #[arg(long)]
    loss_region: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from <out>/checkpoint.ckpt up to the requested iteration count.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PredictorArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Use the exact rotation warp instead of a trained network.
    #[arg(long)]
    oracle: bool,
}

impl PredictorArgs {
    fn load(&self) -> Result<Predictor> {
        match &self.ckpt {
            Some(p) => Ok(Predictor::Network(load_checkpoint(p)?.network())),
            None => Ok(Predictor::AnalyticOracle),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aflow: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::GenData {
            seed,
            instances,
            size,
            out,
        } => {
            let m = generate_dataset(seed, instances, size, &out)?;
            println!(
                "wrote {} instances ({} train, {} test) to {}",
                m.instance_count,
                m.instances_in(Split::Train).len(),
                m.instances_in(Split::Test).len(),
                out.display()
            );
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::Eval {
            predictor,
            data,
            split,
            tuples,
            seed,
            out,
        } => {
            if tuples == 0 {
                return Err(Error::usage("--tuples must be at least 1"));
            }
            let predictor = predictor.load()?;
            let dataset = Dataset::open(&data)?;
            let report = evaluate(&predictor, &dataset, split, tuples, seed)?;
            create_dir(&out)?;
            write(&out.join("report.toml"), report.to_toml()?.as_bytes())?;
            match (report.overall_l1, report.mask_accuracy) {
                (Some(l1), _) => println!("overall_l1 {l1:.6} over {} tuples", report.scored),
                (_, Some(acc)) => println!("mask_accuracy {acc:.6} over {} tuples", report.scored),
                _ => println!("no tuple had a foreground"),
            }
            Ok(())
        }
        Command::Confusion {
            predictor,
            data,
            split,
            samples_per_cell,
            seed,
            out,
        } => {
            if samples_per_cell == 0 {
                return Err(Error::usage("--samples-per-cell must be at least 1"));
            }
            let predictor = predictor.load()?;
            let dataset = Dataset::open(&data)?;
            let cm = confusion_matrix(&predictor, &dataset, split, samples_per_cell, seed)?;
            create_dir(&out)?;
            write(&out.join("confusion.toml"), cm.to_toml()?.as_bytes())?;
            write(&out.join("confusion.png"), &cm.heatmap().encode_png()?)?;
            if let (Some(near), Some(all)) = (cm.mean_where(|d| d.abs() <= 40), cm.mean_all()) {
                println!("mean |delta|<=40: {near:.6}  mean all: {all:.6}");
            }
            Ok(())
        }
        Command::Synth {
            ckpt,
            input,
            delta,
            samples,
            seed,
            out,
        } => synth(&ckpt, &input, &delta, samples, seed, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.mode {
        cfg.mode = v;
    }
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.adam.learning_rate = v;
    }
    if let Some(v) = args.step_size {
        cfg.adam.step_size = v;
    }
    if let Some(v) = &args.loss_region {
        cfg.loss_region = match v.as_str() {
            "full" => LossRegion::Full,
            "foreground" => LossRegion::Foreground,
            other => return Err(Error::usage(format!("unknown loss region {other:?}"))),
        };
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = &args.data {
        cfg.data = Some(v.clone());
    }
    if i64::try_from(cfg.seed).is_err() {
        return Err(Error::usage("--seed must fit in a signed 64-bit integer"));
    }
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Error::usage("no dataset given; pass --data or set `data` in the config"))?;
    let dataset = Dataset::open(&data)?;
    let network = cfg.resolve(dataset.image_size())?;
    create_dir(&args.out)?;
    let paths = TrainPaths {
        checkpoint: args.out.join(CHECKPOINT_FILE),
        log: args.out.join(LOG_FILE),
    };
    write(&args.out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    let ckpt = if args.resume {
        let ckpt = load_checkpoint(&paths.checkpoint)?;
        if ckpt.config != network || ckpt.settings != cfg.settings() {
            return Err(Error::config(
                "checkpoint was trained with a different configuration; pass the run's config.toml",
            ));
        }
        trainer::resume(ckpt, &dataset, cfg.iterations, &paths)?
    } else {
        trainer::train(&network, &dataset, cfg.settings(), cfg.iterations, &paths)?
    };
    println!(
        "trained {} to iteration {}; checkpoint {}",
        cfg.mode.name(),
        ckpt.iteration,
        paths.checkpoint.display()
    );
    Ok(())
}

fn synth(ckpt: &Path, inputs: &[PathBuf], deltas: &[i32], samples: usize, seed: u64, out: &Path) -> Result<()> {
    let network = load_checkpoint(ckpt)?.network();
    let mode = network.config.mode;
    if inputs.len() != deltas.len() {
        return Err(Error::usage(format!(
            "{} inputs but {} deltas; give one delta per input",
            inputs.len(),
            deltas.len()
        )));
    }
    if mode != OutputMode::FlowWithConfidence && inputs.len() != 1 {
        return Err(Error::usage(format!(
            "a {} checkpoint takes exactly one input",
            TrainMode::from_output_mode(mode).name()
        )));
    }
    let transforms: Vec<ViewTransform> = deltas
        .iter()
        .map(|&d| {
            encode_transform(d).map_err(|_| Error::usage(format!("--delta {d} is not one of -180, -160, ..., 180")))
        })
        .collect::<Result<_>>()?;
    let s = network.config.image_size;
    let sources = inputs
        .iter()
        .map(|p| {
            let img = Raster::load_png(p)?;
            if (img.width, img.height, img.channels) != (s, s, 3) {
                return Err(Error::config(format!(
                    "{} is {}x{} with {} channel(s); the checkpoint needs {s}x{s} RGB",
                    p.display(),
                    img.width,
                    img.height,
                    img.channels
                )));
            }
            img.to_tensor().reshape(&[1, 3, s, s])
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;

    match mode {
        OutputMode::Mask => {
            let o = network.forward_single(&sources[0], &transforms)?;
            let prob = o.prediction.map(sigmoid);
            write(&out.join("mask.png"), &Raster::from_tensor(&prob)?.encode_png()?)?;
        }
        OutputMode::Pixels => {
            let o = network.forward_single(&sources[0], &transforms)?;
            write(
                &out.join("synth.png"),
                &Raster::from_tensor(&o.prediction)?.encode_png()?,
            )?;
        }
        OutputMode::Flow => {
            let o = network.forward_single(&sources[0], &transforms)?;
            write(
                &out.join("synth.png"),
                &Raster::from_tensor(&o.prediction)?.encode_png()?,
            )?;
            let flow = o.flow.as_ref().expect("flow output");
            let (img, _) = visualize_flow(&sources[0], flow, samples, seed)?;
            write(&out.join("flow_0.png"), &img.encode_png()?)?;
        }
        OutputMode::FlowWithConfidence => {
            let per_view: Vec<Vec<ViewTransform>> = transforms.into_iter().map(|t| vec![t]).collect();
            let o = network.forward_multi(&sources, &per_view)?;
            write(&out.join("synth.png"), &Raster::from_tensor(&o.fused)?.encode_png()?)?;
            let flows = o.single.flow.as_ref().expect("flow output").offsets();
            for (i, src) in sources.iter().enumerate() {
                let flow = aflow::FlowField::new(flows.batch_slice(i, 1))?;
                let (img, _) = visualize_flow(src, &flow, samples, seed)?;
                write(&out.join(format!("flow_{i}.png")), &img.encode_png()?)?;
            }
            for (i, img) in visualize_confidence(&o.masks)?.iter().enumerate() {
                write(&out.join(format!("confidence_{i}.png")), &img.encode_png()?)?;
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
