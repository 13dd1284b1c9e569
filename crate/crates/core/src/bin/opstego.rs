use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use opstego::harness::{
    export_pairs, export_stego, load_dataset, load_image, metrics_csv, pe_spectrum, sig6, DatasetSpec, RunConfig,
    RESIDUAL_GAIN,
};
use opstego::layout::{message_rng, BitMessage};
use opstego::model::StegoModel;
use opstego::tensor::Tensor;
use opstego::train::{evaluate, MetricsReport, Trainer};
use opstego::{Result, StegoError};

/// Hide bit strings in images with a learned concealment network and read them back.
#[derive(Parser)]
#[command(name = "opstego", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a uniformly random message file.
    GenMessage {
        #[arg(long)]
        bits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Conceal a message file in a cover image and write the stego PNG.
    Embed {
        #[arg(long)]
        cover: PathBuf,
        #[arg(long)]
        message: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the residual, amplified 5x around mid-gray.
        #[arg(long)]
        residual: Option<PathBuf>,
    },
    /// Recover the message file from a stego image.
    Extract {
        #[arg(long)]
        stego: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both networks on a directory of images.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV of the periodic held-out evaluations.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Per-image accuracy, PSNR and SSIM with fresh random messages.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "*")]
        pattern: String,
    },
    /// Eigenvalue spectrum of every positional embedding in a checkpoint.
    AnalyzePe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Analyze raw rows instead of mean-centered rows.
        #[arg(long)]
        no_center: bool,
    },
    /// Write cover, stego and residual PNGs for external steganalysis.
    ExportPairs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "*")]
        pattern: String,
    },
}

fn square_side(model: &StegoModel) -> Result<usize> {
    let c = &model.config;
    if c.height != c.width {
        return Err(StegoError::Config(format!("dataset crops need a square model, got {}x{}", c.height, c.width)));
    }
    Ok(c.height)
}

fn load_cover(path: &Path, model: &StegoModel) -> Result<Tensor<f32>> {
    let img = load_image(path, None)?;
    let (h, w) = (model.config.height, model.config.width);
    if img.shape()[2] == h && img.shape()[3] == w {
        return Ok(img);
    }
    load_image(path, Some(square_side(model)?))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenMessage { bits, seed, out } => {
            BitMessage::random(bits, &mut message_rng(seed))?.write(&out)?;
        }
        Command::Embed { cover, message, checkpoint, out, residual } => {
            let model = StegoModel::load(&checkpoint)?;
            let bits = BitMessage::read(&message)?;
            if bits.len() != model.bit_len() {
                return Err(StegoError::Layout(format!(
                    "message has {} bits but the model carries {}",
                    bits.len(),
                    model.bit_len()
                )));
            }
            let c = model.conceal(&load_cover(&cover, &model)?, &bits)?;
            export_stego(&c.stego, &c.residual, &out, residual.as_deref(), RESIDUAL_GAIN)?;
        }
        Command::Extract { stego, checkpoint, out } => {
            let model = StegoModel::load(&checkpoint)?;
            model.recover(&load_cover(&stego, &model)?)?.bits.write(&out)?;
        }
        Command::Train { data, config, out, metrics } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.train.checkpoint = Some(out);
            let spec = DatasetSpec { dir: data, crop: cfg.train.image_size, pattern: cfg.data.pattern.clone() };
            let ds = load_dataset(&spec)?;
            let (train, held) = ds.split(cfg.train.holdout);
            info!("{} training and {} held-out images", train.len(), held.len());
            let model = StegoModel::new(cfg.model.clone(), cfg.train.seed)?;
            let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone())?;
            let mut evals: Vec<MetricsReport> = Vec::new();
            trainer.run(&train, &held, |s, e| {
                if (s.iteration + 1) % 100 == 0 {
                    info!("iter {} loss {:.5} image mse {:.3e} acc {:.4}", s.iteration + 1, s.loss, s.image_mse, s.acc);
                }
                if let Some(e) = e {
                    info!("eval at {}: acc {:.4} psnr {:.2} ssim {:.4}", e.iteration, e.acc, e.psnr, e.ssim);
                    evals.push(e.clone());
                    if let Some(p) = &metrics {
                        if let Err(err) = fs::write(p, metrics_csv(&evals)) {
                            log::warn!("cannot write metrics: {err}");
                        }
                    }
                }
            })?;
        }
        Command::Eval { data, checkpoint, report, seed, pattern } => {
            let model = StegoModel::load(&checkpoint)?;
            let spec = DatasetSpec { dir: data, crop: square_side(&model)?, pattern };
            let ds = load_dataset(&spec)?;
            let r = evaluate(&model, &ds.images, seed)?;
            let rows: Vec<MetricsReport> = r
                .images
                .iter()
                .map(|m| MetricsReport {
                    iteration: model.iterations,
                    acc: m.acc,
                    acc_float: m.acc_float,
                    psnr: m.psnr,
                    ssim: m.ssim,
                    ms_per_image: m.ms,
                    wall_clock_s: 0.0,
                })
                .collect();
            fs::write(&report, metrics_csv(&rows))?;
            let s = &r.summary;
            println!("images {} acc {} psnr {} ssim {} ms_per_image {}", rows.len(), sig6(s.acc), sig6(s.psnr), sig6(s.ssim), sig6(s.ms_per_image));
        }
        Command::AnalyzePe { checkpoint, out, no_center } => {
            let model = StegoModel::load(&checkpoint)?;
            let mut csv = String::from("embedding,n,eigenvalue,ratio\n");
            let mut found = 0;
            for (name, t) in model.params.iter().filter(|(n, _)| n.ends_with(".pos")) {
                let r = pe_spectrum(t, !no_center)?;
                if r.degenerate {
                    log::warn!("{name}: all rows coincide, spectrum is zero");
                }
                for (i, (e, q)) in r.eigenvalues.iter().zip(&r.ratios).enumerate() {
                    writeln!(csv, "{name},{},{},{}", i + 1, sig6(*e), sig6(*q)).expect("writing to a String");
                }
                found += 1;
            }
            if found == 0 {
                return Err(StegoError::Config("checkpoint has no positional embeddings".into()));
            }
            fs::write(&out, csv)?;
        }
        Command::ExportPairs { data, checkpoint, out, seed, pattern } => {
            let model = StegoModel::load(&checkpoint)?;
            let spec = DatasetSpec { dir: data, crop: square_side(&model)?, pattern };
            let n = export_pairs(&model, &load_dataset(&spec)?.images, &out, seed)?;
            info!("wrote {n} cover/stego pairs to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
