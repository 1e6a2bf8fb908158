use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::FilterType;
use image::{ExtendedColorType, ImageEncoder};
use serde_json::json;

use slgnet::harness::checkpoint::{load_run, save_run, RunMeta};
use slgnet::harness::{ablate, evaluate, gradcheck, train, RunConfig, TrainMode};
use slgnet::structure::structure_maps;
use slgnet::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "slg", version, about = "Structure-aware adapter tuning on a synthetic visible/thermal task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// all, or one of tensor_autodiff, frozen_backbone, structure_encoder, ff_adapter, lgm, harness
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one mode and print its report.
    Train {
        #[arg(long)]
        mode: TrainMode,
        /// JSON run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the trained parameters here.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Multi-seed ablation over modes and caption policies.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Base configuration; defaults to the built-in ablation settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the structure encoder's per-level maps for one image pair as PGM.
    DemoStructure {
        /// Directory with visible.{ppm,png} and thermal.{pgm,png}.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Use the encoder weights of a trained checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its run's validation set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn load_config(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig> {
    path.map_or(Ok(fallback), RunConfig::from_json_file)
}

fn print_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn find_image(dir: &Path, stem: &str, exts: &[&str]) -> Result<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Load(format!("no {stem}.{{{}}} in {}", exts.join(","), dir.display())))
}

fn load_image(path: &Path, channels: usize, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let img = if img.width() as usize != size || img.height() as usize != size {
        img.resize_exact(size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    let mut data = vec![0.0; channels * size * size];
    if channels == 1 {
        for (i, p) in img.to_luma8().pixels().enumerate() {
            data[i] = f64::from(p.0[0]) / 255.0;
        }
    } else {
        for (i, p) in img.to_rgb8().pixels().enumerate() {
            for c in 0..3 {
                data[c * size * size + i] = f64::from(p.0[c]) / 255.0;
            }
        }
    }
    Tensor::new(vec![1, channels, size, size], data)
}

fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = map.data().iter().map(|v| ((v - lo) / range * 255.0).round() as u8).collect();
    let file = std::fs::File::create(path)?;
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck { module, seed } => {
            let report = gradcheck(&module, seed)?;
            print_json(&report, None)?;
            Ok(report.passed)
        }
        Command::Train { mode, config, out, ckpt } => {
            let cfg = load_config(config.as_deref(), RunConfig::default())?;
            let mut model = cfg.build_model()?;
            let report = train(&mut model, mode, &cfg.optimizer_config(), &cfg.train_set()?, &cfg.val_set()?)?;
            if let Some(path) = ckpt {
                let part = slgnet::harness::partition(&model, mode)?;
                save_run(&path, &model, &part, &RunMeta { mode, config: cfg })?;
            }
            print_json(&report, out.as_deref())?;
            Ok(true)
        }
        Command::Ablate { seeds, out, config } => {
            let cfg = load_config(config.as_deref(), RunConfig::ablation())?;
            let report = ablate(&seeds, &cfg, |msg| eprintln!("{msg}"))?;
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            print_json(&report, Some(&out))?;
            Ok(report.checks.iter().all(|c| c.passed))
        }
        Command::DemoStructure { input, output, ckpt } => {
            let model = match ckpt {
                Some(path) => load_run(&path)?.0,
                None => RunConfig::default().build_model()?,
            };
            let size = model.config.backbone.image_size;
            let visible = load_image(&find_image(&input, "visible", &["ppm", "png"])?, 3, size)?;
            let thermal = load_image(&find_image(&input, "thermal", &["pgm", "png"])?, 1, size)?;
            std::fs::create_dir_all(&output)?;
            for (name, map) in structure_maps(&model.encoder, &model.store, &visible, &thermal)? {
                let path = output.join(format!("{name}.pgm"));
                write_pgm(&path, &map)?;
                eprintln!("wrote {} ({}x{})", path.display(), map.shape()[1], map.shape()[0]);
            }
            Ok(true)
        }
        Command::Eval { ckpt } => {
            let (model, part, meta) = load_run(&ckpt)?;
            let val = meta.config.val_set()?;
            let metrics = evaluate(&model, &val, meta.mode.pathways(), meta.config.batch_size)?;
            let report = json!({
                "mode": meta.mode,
                "token_ap": metrics.token_ap,
                "loss": metrics.loss,
                "params_total": part.params_total(),
                "params_trainable": part.params_trainable(),
                "condition_breakdown": metrics.condition_breakdown,
            });
            print_json(&report, None)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
