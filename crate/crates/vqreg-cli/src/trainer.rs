//! The training loop: deterministic shuffled minibatches, per-sample graphs
//! evaluated in parallel with order-fixed accumulation, Adam updates,
//! per-step loss logging, per-epoch metric curves and best-checkpoint
//! selection by validation DSC.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use vqreg_core::metrics::dsc;
use vqreg_core::rng::{derive, rng};
use vqreg_core::transform::{resample_mask, MaskMode, ResampleSpec};
use vqreg_core::volume::RegistrationSample;
use vqreg_net::checkpoint::save_reg;
use vqreg_net::train::{training_loss, LossValues, TrainSample};
use vqreg_net::{QuantizerKind, RegModel};
use vqreg_nn::{Adam, Gemm, Graph};
use vqreg_vq::Codebook;

use crate::config::{TrainConfig, TrainDtype};
use crate::dataset::SplitDataset;
use crate::deterministic_mode;

#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_dsc: f64,
    pub val_dsc: f64,
    pub test_dsc: f64,
    /// Generalization gap: train DSC minus test DSC.
    pub gap: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub best_val_dsc: f64,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl TrainOutcome {
    /// Mean generalization gap over the final quarter of the epochs (a
    /// stable summary of where the curves settle).
    pub fn late_gap(&self) -> f64 {
        let n = self.rows.len();
        let start = n - (n / 4).max(1);
        let tail = &self.rows[start..];
        tail.iter().map(|r| r.gap).sum::<f64>() / tail.len() as f64
    }

    pub fn late_test_dsc(&self) -> f64 {
        let n = self.rows.len();
        let start = n - (n / 4).max(1);
        let tail = &self.rows[start..];
        tail.iter().map(|r| r.test_dsc).sum::<f64>() / tail.len() as f64
    }
}

/// Train a registration model; returns the curves and checkpoint paths.
pub fn train(
    cfg: &TrainConfig,
    data: &SplitDataset,
    out_dir: &Path,
    collaborative: Option<&Codebook>,
) -> Result<TrainOutcome> {
    crate::tune_allocator();
    cfg.validate()?;
    match cfg.dtype {
        TrainDtype::F32 => train_typed::<f32>(cfg, data, out_dir, collaborative),
        TrainDtype::F64 => train_typed::<f64>(cfg, data, out_dir, collaborative),
    }
}

fn train_typed<T: Gemm>(
    cfg: &TrainConfig,
    data: &SplitDataset,
    out_dir: &Path,
    collaborative: Option<&Codebook>,
) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        bail!("training split is empty");
    }
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_document().render())?;

    let mut model = RegModel::<T>::new(cfg.network.clone(), cfg.seed)
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    if let Some(cb) = collaborative {
        model.set_collaborative_codebook(cb).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    }
    let mut opt = Adam::new(cfg.lr, &model.params);

    let train_samples: Vec<TrainSample<T>> =
        data.train.iter().map(TrainSample::from_sample).collect();

    let mut loss_csv = String::from("step,L_V,L_H,L_C,L_SSD,L_Dice,L_Bend,total\n");
    let mut metrics_csv = String::from("epoch,train_loss,train_dsc,val_dsc,test_dsc,gap\n");
    let mut usage_csv = String::from("epoch,quantizer,active_rows,total_rows\n");

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let serial = deterministic_mode();

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        // cosine learning-rate decay to lr/20 across the run
        let progress = epoch as f64 / cfg.epochs.max(1) as f64;
        let lr_lo = cfg.lr / 20.0;
        opt.lr = lr_lo + 0.5 * (cfg.lr - lr_lo) * (1.0 + (std::f64::consts::PI * progress).cos());
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng(derive(cfg.seed, 1_000 + epoch as u64)));

        let mut usage: [Option<Vec<u64>>; 3] = [
            cfg.network.enabled.vanilla.then(|| vec![0u64; cfg.network.dict_sizes.vanilla]),
            cfg.network
                .enabled
                .hierarchical
                .then(|| vec![0u64; cfg.network.dict_sizes.hierarchical]),
            cfg.network
                .enabled
                .collaborative
                .then(|| vec![0u64; cfg.network.dict_sizes.collaborative]),
        ];

        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let eval_one = |&i: &usize| -> (Vec<Vec<T>>, LossValues, [Option<Vec<u32>>; 3]) {
                let sample = &train_samples[i];
                let mut g = Graph::new();
                let leaves = model.params.leaf_all(&mut g);
                let nodes = training_loss(&model, &mut g, &leaves, sample, &cfg.weights, None);
                g.backward(nodes.total);
                let grads = model.params.collect_grads(&g, &leaves);
                let values = LossValues::read(&g, &nodes);
                let indices = [
                    nodes.forward.frozen.vanilla.as_ref().map(|f| f.indices.clone()),
                    nodes.forward.frozen.hierarchical.as_ref().map(|f| f.indices.clone()),
                    nodes.forward.frozen.collaborative.as_ref().map(|f| f.indices.clone()),
                ];
                (grads, values, indices)
            };
            let results: Vec<(Vec<Vec<T>>, LossValues, [Option<Vec<u32>>; 3])> = if serial {
                batch.iter().map(eval_one).collect()
            } else {
                batch.par_iter().map(eval_one).collect()
            };

            // order-fixed accumulation across the batch
            let inv = 1.0 / results.len() as f64;
            let mut grads = results[0].0.clone();
            for (g_sample, _, _) in results.iter().skip(1) {
                for (acc, add) in grads.iter_mut().zip(g_sample) {
                    for (a, b) in acc.iter_mut().zip(add) {
                        *a += *b;
                    }
                }
            }
            let scale = T::from_f64(inv);
            for gvec in &mut grads {
                for v in gvec.iter_mut() {
                    *v *= scale;
                }
            }

            let mut mean = LossValues::default();
            let mut quant_present = [false; 3];
            for (_, values, indices) in &results {
                mean.total += values.total * inv;
                mean.ssd += values.ssd * inv;
                mean.dice += values.dice * inv;
                mean.bending += values.bending * inv;
                for q in 0..3 {
                    if let Some(v) = values.quant[q] {
                        quant_present[q] = true;
                        *mean.quant[q].get_or_insert(0.0) += v * inv;
                    }
                    if let (Some(counts), Some(idx)) = (&mut usage[q], &indices[q]) {
                        for &k in idx {
                            counts[k as usize] += 1;
                        }
                    }
                }
            }

            if !mean.is_finite() {
                let ids: Vec<&str> =
                    batch.iter().map(|&i| data.train[i].subject_id.as_str()).collect();
                let dump = format!(
                    "non-finite loss at step {step}, epoch {epoch}\nbatch samples: {ids:?}\ncomponents: {mean:?}\n"
                );
                std::fs::write(out_dir.join("failed_batch.txt"), &dump)?;
                bail!("non-finite loss at step {step} (diagnostic written to failed_batch.txt)");
            }

            let q = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "0".into());
            let _ = writeln!(
                loss_csv,
                "{step},{},{},{},{},{},{},{}",
                q(mean.quant[0]),
                q(mean.quant[1]),
                q(mean.quant[2]),
                mean.ssd,
                mean.dice,
                mean.bending,
                mean.total
            );
            epoch_loss += mean.total;
            epoch_batches += 1;
            step += 1;

            opt.step(&mut model.params, &grads);
        }

        for (q, name) in [(0, "vanilla"), (1, "hierarchical"), (2, "collaborative")] {
            if let Some(counts) = &usage[q] {
                let active = counts.iter().filter(|&&c| c > 0).count();
                let _ = writeln!(usage_csv, "{epoch},{name},{active},{}", counts.len());
            }
        }

        // per-epoch train DSC on a fixed subset (identical across arms for
        // a given dataset/split) keeps epoch evaluation affordable
        let train_eval = &data.train[..data.train.len().min(16)];
        let train_dsc = mean_hard_dsc(&model, train_eval, serial)?;
        let val_dsc = if data.val.is_empty() {
            train_dsc
        } else {
            mean_hard_dsc(&model, &data.val, serial)?
        };
        let test_dsc = if data.test.is_empty() {
            train_dsc
        } else {
            mean_hard_dsc(&model, &data.test, serial)?
        };
        let row = EpochRow {
            epoch,
            train_loss: epoch_loss / epoch_batches.max(1) as f64,
            train_dsc,
            val_dsc,
            test_dsc,
            gap: train_dsc - test_dsc,
        };
        let _ = writeln!(
            metrics_csv,
            "{},{},{},{},{},{}",
            row.epoch, row.train_loss, row.train_dsc, row.val_dsc, row.test_dsc, row.gap
        );
        rows.push(row);

        if val_dsc > best_val {
            best_val = val_dsc;
            best_epoch = epoch;
            save_reg(&model, &best_path).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        }

        // flush logs so long runs are observable and aborted runs keep
        // their partial curves
        std::fs::write(out_dir.join("losses.csv"), &loss_csv)?;
        std::fs::write(out_dir.join("epoch_metrics.csv"), &metrics_csv)?;
        std::fs::write(out_dir.join("code_usage.csv"), &usage_csv)?;
    }

    save_reg(&model, &final_path).map_err(|e| anyhow::anyhow!(e.to_string()))?;

    Ok(TrainOutcome {
        rows,
        best_val_dsc: best_val,
        best_epoch,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}

/// Mean hard DSC (0.5-thresholded warped mask vs fixed mask) over samples.
pub fn mean_hard_dsc<T: Gemm>(
    model: &RegModel<T>,
    samples: &[RegistrationSample],
    serial: bool,
) -> Result<f64> {
    if samples.is_empty() {
        bail!("no samples to evaluate");
    }
    let eval_one = |s: &RegistrationSample| -> Result<f64> {
        let (ddf, _) = model.predict(s).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let spec = ResampleSpec { mask_mode: MaskMode::Threshold, ..Default::default() };
        let warped = resample_mask(&s.moving_mask, &ddf, &spec)?;
        Ok(dsc(&warped, &s.fixed_mask)?)
    };
    let values: Result<Vec<f64>> = if serial {
        samples.iter().map(eval_one).collect()
    } else {
        samples.par_iter().map(eval_one).collect()
    };
    let values = values?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// DSC between the raw (unregistered) moving and fixed masks.
pub fn unregistered_dsc(samples: &[RegistrationSample]) -> Result<f64> {
    if samples.is_empty() {
        bail!("no samples to evaluate");
    }
    let mut total = 0.0;
    for s in samples {
        total += dsc(&s.moving_mask, &s.fixed_mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Usage histogram of every enabled quantizer over a sample set, written as
/// a CSV (`quantizer,row,count`).
pub fn usage_histogram_csv<T: Gemm>(
    model: &RegModel<T>,
    samples: &[RegistrationSample],
) -> Result<String> {
    let mut out = String::from("quantizer,row,count\n");
    for (kind, name, enabled) in [
        (QuantizerKind::Vanilla, "vanilla", model.config.enabled.vanilla),
        (QuantizerKind::Hierarchical, "hierarchical", model.config.enabled.hierarchical),
        (QuantizerKind::Collaborative, "collaborative", model.config.enabled.collaborative),
    ] {
        if !enabled {
            continue;
        }
        let refs: Vec<&RegistrationSample> = samples.iter().collect();
        let counts =
            model.code_usage(kind, &refs).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        for (row, count) in counts.iter().enumerate() {
            let _ = writeln!(out, "{name},{row},{count}");
        }
    }
    Ok(out)
}
