//! `vqreg`: synthetic data generation, training, registration and the
//! evaluation/experiment commands.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vqreg_cli::config::TrainConfig;
use vqreg_cli::dataset::{DatasetSpec, SplitDataset};
use vqreg_cli::evaluate::{evaluate_model, unregistered_report};
use vqreg_cli::experiments::{
    run_ablation, seg_config_for, sweep_dict_size, ArmSpec,
};
use vqreg_cli::trainer::{train, usage_histogram_csv};
use vqreg_cli::deterministic_mode;
use vqreg_core::io;
use vqreg_core::metrics::{centroid_distance, dsc, mse, neg_jacobian_fraction};
use vqreg_core::transform::{resample, resample_mask, warp_point, MaskMode, ResampleSpec};
use vqreg_net::bootstrap::{harvest_features, init_collaborative, train_segmentation, BootstrapConfig};
use vqreg_net::checkpoint::{load_reg, load_seg, save_seg};
use vqreg_net::SegConfig;
use vqreg_vq::Codebook;

#[derive(Parser)]
#[command(name = "vqreg", about = "Quantized-bottleneck deformable 3D registration", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_triplet(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split([' ', ','])
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>().map_err(|_| anyhow::anyhow!("bad integer `{p}`")))
        .collect::<Result<_>>()?;
    if v.len() != 3 {
        bail!("expected 3 components, got `{s}`");
    }
    Ok([v[0], v[1], v[2]])
}

fn parse_triplet_f64(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split([' ', ','])
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| anyhow::anyhow!("bad number `{p}`")))
        .collect::<Result<_>>()?;
    if v.len() != 3 {
        bail!("expected 3 components, got `{s}`");
    }
    Ok([v[0], v[1], v[2]])
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic registration dataset.
    SynthData(SynthArgs),
    /// Train the companion segmentation network (codebook bootstrap).
    TrainSeg(TrainSegArgs),
    /// Harvest segmentation features and K-means-initialize the
    /// collaborative codebook.
    InitCodebook(InitCodebookArgs),
    /// Train a registration model.
    Train(TrainArgs),
    /// Register one moving/fixed pair with a trained checkpoint.
    Register(RegisterArgs),
    /// Evaluate a checkpoint over a dataset split.
    Evaluate(EvaluateArgs),
    /// Train and compare quantizer subsets under shared seeds.
    Ablate(AblateArgs),
    /// Dictionary-size sweep.
    SweepDictSize(SweepArgs),
    /// Codebook usage histogram of a trained model over a split.
    UsageHist(UsageArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value = "32 32 24")]
    dims: String,
    #[arg(long, default_value = "0.7 0.7 0.7")]
    spacing: String,
    #[arg(long, default_value_t = 2.5)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainSegArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bottleneck channel count (must equal the collaborative code dimension).
    #[arg(long, default_value_t = 64)]
    bottleneck: usize,
    #[arg(long, default_value = "8 16 32")]
    channels: String,
    /// Train on this split of the dataset.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

#[derive(Args)]
struct InitCodebookArgs {
    #[arg(long)]
    seg: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 100_000)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Warm-start the collaborative dictionary from a codebook file.
    #[arg(long)]
    init_collaborative: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    out_ddf: PathBuf,
    #[arg(long)]
    out_warped: Option<PathBuf>,
    #[arg(long)]
    moving_mask: Option<PathBuf>,
    #[arg(long)]
    fixed_mask: Option<PathBuf>,
    #[arg(long)]
    moving_landmarks: Option<PathBuf>,
    #[arg(long)]
    fixed_landmarks: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "none,v,v+h,v+c,v+h+c")]
    arms: String,
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 40)]
    bootstrap_epochs: usize,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "32,64,128,256")]
    sizes: String,
    #[arg(long, default_value = "both")]
    target: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 40)]
    bootstrap_epochs: usize,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

#[derive(Args)]
struct UsageArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

fn load_split(
    data: &PathBuf,
    split: &str,
    split_seed: u64,
) -> Result<Vec<vqreg_core::RegistrationSample>> {
    let samples: Vec<_> = DatasetSpec::load_dir(data)?.into_iter().map(|(s, _)| s).collect();
    if split == "all" {
        return Ok(samples);
    }
    let split_data = SplitDataset::split(samples, split_seed);
    Ok(match split {
        "train" => split_data.train,
        "val" => split_data.val,
        "test" => split_data.test,
        other => bail!("unknown split `{other}` (use train, val, test or all)"),
    })
}

fn main() -> Result<()> {
    vqreg_cli::tune_allocator();
    let cli = Cli::parse();
    match cli.command {
        Command::SynthData(a) => {
            let spec = DatasetSpec {
                count: a.count,
                dims: parse_triplet(&a.dims)?,
                spacing: parse_triplet_f64(&a.spacing)?,
                amplitude_mm: a.amplitude,
                noise_sigma: a.noise,
                seed: a.seed,
            };
            spec.write_to(&a.out)?;
            println!("wrote {} samples to {}", a.count, a.out.display());
        }
        Command::TrainSeg(a) => {
            let samples = load_split(&a.data, &a.split, a.split_seed)?;
            let channels: Vec<usize> = a
                .channels
                .split([' ', ','])
                .filter(|p| !p.is_empty())
                .map(|p| p.parse::<usize>().context("bad channels"))
                .collect::<Result<_>>()?;
            let dims = samples
                .first()
                .map(|s| s.dims())
                .context("empty split for segmentation training")?;
            let seg_config = SegConfig {
                stage_channels: channels,
                bottleneck_channels: a.bottleneck,
                input_dims: dims,
            };
            let bcfg = BootstrapConfig {
                seg_epochs: a.epochs,
                seg_lr: a.lr,
                seed: a.seed,
                ..BootstrapConfig::default()
            };
            let pairs: Vec<_> = samples
                .iter()
                .flat_map(|s| [(&s.moving, &s.moving_mask), (&s.fixed, &s.fixed_mask)])
                .collect();
            let seg = train_segmentation::<f32>(&pairs, seg_config, &bcfg)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            save_seg(&seg, &a.out).map_err(|e| anyhow::anyhow!(e.to_string()))?;
            println!("segmentation checkpoint written to {}", a.out.display());
        }
        Command::InitCodebook(a) => {
            let seg = load_seg::<f32>(&a.seg).map_err(|e| anyhow::anyhow!(e.to_string()))?;
            let samples = load_split(&a.data, &a.split, a.split_seed)?;
            let images: Vec<_> = samples.iter().flat_map(|s| [&s.moving, &s.fixed]).collect();
            let (rows, n, c) = harvest_features(&seg, &images, a.cap, a.seed)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            let cb = init_collaborative(&rows, n, c, a.k, a.seed)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            cb.save(&a.out).map_err(|e| anyhow::anyhow!(e.to_string()))?;
            println!("collaborative codebook ({n} features, K={}) written to {}", a.k, a.out.display());
        }
        Command::Train(a) => {
            let cfg = TrainConfig::load(&a.config)?;
            let samples: Vec<_> =
                DatasetSpec::load_dir(&a.data)?.into_iter().map(|(s, _)| s).collect();
            let data = SplitDataset::split(samples, a.split_seed);
            let collab = match &a.init_collaborative {
                Some(path) => {
                    Some(Codebook::load(path).map_err(|e| anyhow::anyhow!(e.to_string()))?)
                }
                None => None,
            };
            let (tr, va, te) = data.counts();
            println!("training on {tr} pairs (val {va}, test {te})");
            let outcome = train(&cfg, &data, &a.out_dir, collab.as_ref())?;
            println!(
                "best val DSC {:.4} at epoch {}; checkpoints in {}",
                outcome.best_val_dsc,
                outcome.best_epoch,
                a.out_dir.display()
            );
        }
        Command::Register(a) => {
            let model = load_reg::<f64>(&a.checkpoint).map_err(|e| anyhow::anyhow!(e.to_string()))?;
            let moving = io::load_volume(&a.moving)?;
            let fixed = io::load_volume(&a.fixed)?;
            let (ddf, _) = model
                .predict_pair(&moving, &fixed)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            io::save_ddf(&ddf, &a.out_ddf)?;
            let spec = ResampleSpec { mask_mode: MaskMode::Soft, ..Default::default() };
            let warped = resample(&moving, &ddf, &spec)?;
            if let Some(out) = &a.out_warped {
                io::save_volume(&warped, out)?;
            }
            println!("ddf written to {}", a.out_ddf.display());
            println!("neg_jacobian_fraction={}", neg_jacobian_fraction(&ddf)?);
            println!("mse={}", mse(&warped, &fixed)?);
            if let (Some(mm), Some(fm)) = (&a.moving_mask, &a.fixed_mask) {
                let moving_mask = io::load_mask(mm)?;
                let fixed_mask = io::load_mask(fm)?;
                let hard = ResampleSpec { mask_mode: MaskMode::Threshold, ..Default::default() };
                let warped_mask = resample_mask(&moving_mask, &ddf, &hard)?;
                println!("dsc={}", dsc(&warped_mask, &fixed_mask)?);
                let soft = resample_mask(&moving_mask, &ddf, &spec)?;
                println!("cd_mm={}", centroid_distance(&soft, &fixed_mask)?);
            }
            if let (Some(ml), Some(fl)) = (&a.moving_landmarks, &a.fixed_landmarks) {
                let moving_lm = io::load_landmarks(ml)?;
                let fixed_lm = io::load_landmarks(fl)?;
                if !moving_lm.corresponds_to(&fixed_lm) {
                    bail!("landmark labels do not correspond");
                }
                let mut total = 0.0;
                for (fp, mp) in fixed_lm.points().iter().zip(moving_lm.points()) {
                    let mapped = warp_point(*fp, &ddf)?;
                    total += ((mapped[0] - mp[0]).powi(2)
                        + (mapped[1] - mp[1]).powi(2)
                        + (mapped[2] - mp[2]).powi(2))
                    .sqrt();
                }
                println!("tre_mm={}", total / fixed_lm.len().max(1) as f64);
            }
        }
        Command::Evaluate(a) => {
            let model = load_reg::<f64>(&a.checkpoint).map_err(|e| anyhow::anyhow!(e.to_string()))?;
            let samples = load_split(&a.data, &a.split, a.split_seed)?;
            let mut echo = String::new();
            let mut doc = vqreg_core::keyval::Document::new();
            model.config.to_keyval(&mut doc);
            echo.push_str(&doc.render());
            let report = evaluate_model(&model, &samples, echo, deterministic_mode())?;
            let unreg = unregistered_report(&samples)?;
            let table = report.to_table(&format!("registered ({} split)", a.split));
            let unreg_table = unreg.to_table("unregistered");
            println!("{table}");
            println!("{unreg_table}");
            if let Some(dir) = &a.out_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("report.csv"), report.to_csv())?;
                std::fs::write(dir.join("report.txt"), table)?;
                std::fs::write(dir.join("unregistered.csv"), unreg.to_csv())?;
            }
        }
        Command::Ablate(a) => {
            let cfg = TrainConfig::load(&a.config)?;
            let samples: Vec<_> =
                DatasetSpec::load_dir(&a.data)?.into_iter().map(|(s, _)| s).collect();
            let data = SplitDataset::split(samples, a.split_seed);
            let arms: Vec<ArmSpec> =
                a.arms.split(',').map(ArmSpec::parse).collect::<Result<_>>()?;
            let seeds: Vec<u64> = a
                .seeds
                .split(',')
                .map(|p| p.parse::<u64>().context("bad seed"))
                .collect::<Result<_>>()?;
            let bcfg = BootstrapConfig {
                seg_epochs: a.bootstrap_epochs,
                k_c: cfg.network.dict_sizes.collaborative,
                seed: cfg.seed,
                ..BootstrapConfig::default()
            };
            let report = run_ablation(&cfg, &data, &arms, &seeds, &bcfg, &a.out_dir)?;
            println!("{}", report.to_table());
            println!("full results in {}", a.out_dir.display());
        }
        Command::SweepDictSize(a) => {
            let cfg = TrainConfig::load(&a.config)?;
            let samples: Vec<_> =
                DatasetSpec::load_dir(&a.data)?.into_iter().map(|(s, _)| s).collect();
            let data = SplitDataset::split(samples, a.split_seed);
            let sizes: Vec<usize> = a
                .sizes
                .split(',')
                .map(|p| p.parse::<usize>().context("bad size"))
                .collect::<Result<_>>()?;
            let bcfg = BootstrapConfig {
                seg_epochs: a.bootstrap_epochs,
                seed: cfg.seed,
                ..BootstrapConfig::default()
            };
            let csv = sweep_dict_size(&cfg, &data, &sizes, &a.target, &bcfg, &a.out_dir)?;
            println!("{csv}");
        }
        Command::UsageHist(a) => {
            let model = load_reg::<f64>(&a.checkpoint).map_err(|e| anyhow::anyhow!(e.to_string()))?;
            let samples = load_split(&a.data, &a.split, a.split_seed)?;
            let csv = usage_histogram_csv(&model, &samples)?;
            std::fs::write(&a.out, csv)?;
            println!("usage histogram written to {}", a.out.display());
        }
    }
    Ok(())
}

// silence the unused warning for seg_config_for re-export used in tests
#[allow(unused_imports)]
use seg_config_for as _seg_config_for;
