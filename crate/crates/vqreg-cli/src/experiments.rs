//! Experiment orchestration: the quantizer ablation (with shared seeds
//! across arms), the train/test generalization-gap comparison, the
//! dictionary-size sweep, and the collaborative-init comparison.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use vqreg_core::rng::derive;
use vqreg_core::stats::mean_std_pop;
use vqreg_core::volume::Volume3D;
use vqreg_net::bootstrap::{
    harvest_features, init_collaborative, quantization_error, train_segmentation, BootstrapConfig,
};
use vqreg_net::checkpoint::load_reg;
use vqreg_net::{QuantizerSet, SegConfig, SegModel};
use vqreg_nn::Gemm;
use vqreg_vq::{Codebook, CodebookName};

use crate::config::{TrainConfig, TrainDtype};
use crate::dataset::SplitDataset;
use crate::evaluate::evaluate_model;
use crate::trainer::{train, TrainOutcome};
use crate::deterministic_mode;

/// One ablation arm: a quantizer subset, with the collaborative dictionary
/// either K-means-bootstrapped (default) or random ("@rand", the
/// without-pretraining variant).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArmSpec {
    pub quantizers: QuantizerSet,
    pub collab_kmeans: bool,
}

impl ArmSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let (base, rand_tag) = match s.strip_suffix("@rand") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let quantizers =
            QuantizerSet::parse(base).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        Ok(Self { quantizers, collab_kmeans: quantizers.collaborative && !rand_tag })
    }

    pub fn tag(&self) -> String {
        let base = self.quantizers.tag();
        if self.quantizers.collaborative && !self.collab_kmeans {
            format!("{base}@rand")
        } else {
            base
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub test_dsc: f64,
    pub test_cd: f64,
    pub test_mse: f64,
    pub test_tre: f64,
    pub late_gap: f64,
    pub best_val_dsc: f64,
}

#[derive(Debug, Default)]
pub struct AblationReport {
    pub arm_order: Vec<String>,
    pub runs: Vec<ArmResult>,
}

impl AblationReport {
    pub fn mean_over_seeds(&self, arm: &str, metric: impl Fn(&ArmResult) -> f64) -> f64 {
        let vals: Vec<f64> =
            self.runs.iter().filter(|r| r.arm == arm).map(&metric).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("arm,seed,test_dsc,test_cd,test_mse,test_tre,late_gap,best_val_dsc\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.arm, r.seed, r.test_dsc, r.test_cd, r.test_mse, r.test_tre, r.late_gap,
                r.best_val_dsc
            );
        }
        out
    }

    /// Comparison table in canonical row order (mean ± std over seeds).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} | {:^13} | {:^13} | {:^13} | {:^13}",
            "arm", "DSC", "CD", "MSE", "TRE"
        );
        let _ = writeln!(out, "{}", "-".repeat(14 + 4 * 16));
        for arm in &self.arm_order {
            let col = |f: &dyn Fn(&ArmResult) -> f64| -> String {
                let vals: Vec<f64> =
                    self.runs.iter().filter(|r| &r.arm == arm).map(|r| f(r)).collect();
                let (m, s) = mean_std_pop(&vals);
                format!("{m:.3}\u{b1}{s:.3}")
            };
            let _ = writeln!(
                out,
                "{:<14} | {:^13} | {:^13} | {:^13} | {:^13}",
                arm,
                col(&|r| r.test_dsc),
                col(&|r| r.test_cd),
                col(&|r| r.test_mse),
                col(&|r| r.test_tre)
            );
        }
        out
    }
}

/// Derive the companion segmentation architecture from the registration
/// network: same stage widths up to the penultimate stage, bottleneck at the
/// collaborative code dimension.
pub fn seg_config_for(cfg: &TrainConfig) -> SegConfig {
    let n = cfg.network.stage_channels.len();
    SegConfig {
        stage_channels: cfg.network.stage_channels[..n - 1].to_vec(),
        bottleneck_channels: cfg.network.dict_channels.collaborative,
        input_dims: cfg.network.input_dims,
    }
}

/// Train the segmentation net on the training split (both sides of every
/// pair) and produce the K-means collaborative codebook.
pub fn bootstrap_collaborative<T: Gemm>(
    cfg: &TrainConfig,
    data: &SplitDataset,
    bcfg: &BootstrapConfig,
) -> Result<(SegModel<T>, Codebook)> {
    let mut pairs = Vec::new();
    for s in &data.train {
        pairs.push((&s.moving, &s.moving_mask));
        pairs.push((&s.fixed, &s.fixed_mask));
    }
    let seg = train_segmentation::<T>(&pairs, seg_config_for(cfg), bcfg)
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let images: Vec<&Volume3D> = data
        .train
        .iter()
        .flat_map(|s| [&s.moving, &s.fixed])
        .collect();
    let (rows, n, c) = harvest_features(&seg, &images, bcfg.feature_cap, bcfg.seed)
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let cb = init_collaborative(&rows, n, c, bcfg.k_c, derive(bcfg.seed, 0xC0DE))
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    Ok((seg, cb))
}

fn evaluate_run(
    cfg: &TrainConfig,
    data: &SplitDataset,
    outcome: &TrainOutcome,
) -> Result<(f64, f64, f64, f64)> {
    let serial = deterministic_mode();
    let report = match cfg.dtype {
        TrainDtype::F32 => {
            let model = load_reg::<f32>(&outcome.best_checkpoint)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            evaluate_model(&model, &data.test, cfg.to_document().render(), serial)?
        }
        TrainDtype::F64 => {
            let model = load_reg::<f64>(&outcome.best_checkpoint)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            evaluate_model(&model, &data.test, cfg.to_document().render(), serial)?
        }
    };
    let agg = report.aggregates();
    Ok((agg.dsc.mean, agg.cd_mm.mean, agg.mse.mean, agg.tre_mm.mean))
}

/// Train and evaluate every (arm, seed) combination under identical data and
/// shared seeds. Per-run artifacts land in `out_dir/<arm>/seed<k>/`; partial
/// results survive an aborted run.
pub fn run_ablation(
    base: &TrainConfig,
    data: &SplitDataset,
    arms: &[ArmSpec],
    seeds: &[u64],
    bcfg: &BootstrapConfig,
    out_dir: &Path,
) -> Result<AblationReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut report = AblationReport {
        arm_order: arms.iter().map(|a| a.tag()).collect(),
        runs: Vec::new(),
    };
    let needs_kmeans = arms.iter().any(|a| a.quantizers.collaborative && a.collab_kmeans);
    for &seed in seeds {
        // one bootstrap per seed, shared by every arm that wants it
        let kmeans_cb: Option<Codebook> = if needs_kmeans {
            let bcfg_seed = BootstrapConfig { seed: derive(base.seed, seed), ..bcfg.clone() };
            Some(match base.dtype {
                TrainDtype::F32 => bootstrap_collaborative::<f32>(base, data, &bcfg_seed)?.1,
                TrainDtype::F64 => bootstrap_collaborative::<f64>(base, data, &bcfg_seed)?.1,
            })
        } else {
            None
        };
        for arm in arms {
            let mut cfg = base.clone();
            cfg.network.enabled = arm.quantizers;
            cfg.seed = derive(base.seed, 7 + seed);
            let run_dir = out_dir.join(arm.tag()).join(format!("seed{seed}"));
            let collab = if arm.quantizers.collaborative && arm.collab_kmeans {
                kmeans_cb.as_ref()
            } else {
                None
            };
            let outcome = train(&cfg, data, &run_dir, collab)
                .with_context(|| format!("arm {} seed {seed}", arm.tag()))?;
            let (test_dsc, test_cd, test_mse, test_tre) = evaluate_run(&cfg, data, &outcome)?;
            let result = ArmResult {
                arm: arm.tag(),
                seed,
                test_dsc,
                test_cd,
                test_mse,
                test_tre,
                late_gap: outcome.late_gap(),
                best_val_dsc: outcome.best_val_dsc,
            };
            report.runs.push(result);
            // keep partial results on disk as arms complete
            std::fs::write(out_dir.join("ablation.csv"), report.to_csv())?;
            std::fs::write(out_dir.join("ablation_table.txt"), report.to_table())?;
        }
    }
    Ok(report)
}

/// Dictionary-size sweep: retrain with each vocabulary size applied to the
/// selected dictionaries and report test metrics per size.
pub fn sweep_dict_size(
    base: &TrainConfig,
    data: &SplitDataset,
    sizes: &[usize],
    target: &str,
    bcfg: &BootstrapConfig,
    out_dir: &Path,
) -> Result<String> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("size,target,test_dsc,test_cd,test_mse,test_tre\n");
    for &size in sizes {
        let mut cfg = base.clone();
        match target {
            "v" => cfg.network.dict_sizes.vanilla = size,
            "c" => cfg.network.dict_sizes.collaborative = size,
            "both" => {
                cfg.network.dict_sizes.vanilla = size;
                cfg.network.dict_sizes.collaborative = size;
            }
            other => anyhow::bail!("unknown sweep target `{other}` (use v, c or both)"),
        }
        let collab = if cfg.network.enabled.collaborative {
            let bcfg_size = BootstrapConfig { k_c: cfg.network.dict_sizes.collaborative, ..bcfg.clone() };
            Some(match cfg.dtype {
                TrainDtype::F32 => bootstrap_collaborative::<f32>(&cfg, data, &bcfg_size)?.1,
                TrainDtype::F64 => bootstrap_collaborative::<f64>(&cfg, data, &bcfg_size)?.1,
            })
        } else {
            None
        };
        let run_dir = out_dir.join(format!("size{size}"));
        let outcome = train(&cfg, data, &run_dir, collab.as_ref())?;
        let (d, c, m, t) = evaluate_run(&cfg, data, &outcome)?;
        let _ = writeln!(csv, "{size},{target},{d},{c},{m},{t}");
        std::fs::write(out_dir.join("sweep.csv"), &csv)?;
    }
    Ok(csv)
}

/// Quantization error of held-out segmentation features under the
/// K-means-initialized collaborative dictionary vs a random one of equal
/// size. Returns `(kmeans_error, random_error)`.
pub fn collab_init_comparison(
    cfg: &TrainConfig,
    data: &SplitDataset,
    bcfg: &BootstrapConfig,
) -> Result<(f64, f64)> {
    let (seg, kmeans_cb) = bootstrap_collaborative::<f64>(cfg, data, bcfg)?;
    let heldout: Vec<&Volume3D> = data
        .test
        .iter()
        .chain(data.val.iter())
        .flat_map(|s| [&s.moving, &s.fixed])
        .collect();
    let (rows, n, c) = harvest_features(&seg, &heldout, bcfg.feature_cap, derive(bcfg.seed, 5))
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let random_cb =
        Codebook::random(CodebookName::Collaborative, kmeans_cb.k(), c, derive(bcfg.seed, 9))
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let err_kmeans = quantization_error(&rows, n, c, &kmeans_cb);
    let err_random = quantization_error(&rows, n, c, &random_cb);
    Ok((err_kmeans, err_random))
}
