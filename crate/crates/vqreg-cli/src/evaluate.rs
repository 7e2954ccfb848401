//! Checkpoint evaluation: per-sample metric rows (DSC, CD, MSE, TRE,
//! negative-Jacobian fraction) and the aggregated report.

use anyhow::Result;
use rayon::prelude::*;
use vqreg_core::metrics::{centroid_distance, dsc, mse, neg_jacobian_fraction, tre};
use vqreg_core::report::{EvalReport, SampleMetrics};
use vqreg_core::transform::{resample, resample_mask, MaskMode, ResampleSpec};
use vqreg_core::volume::{DisplacementField, RegistrationSample};
use vqreg_net::RegModel;
use vqreg_nn::Gemm;

fn metrics_for(
    sample: &RegistrationSample,
    ddf: &DisplacementField,
) -> Result<SampleMetrics> {
    let soft_spec = ResampleSpec { mask_mode: MaskMode::Soft, ..Default::default() };
    let hard_spec = ResampleSpec { mask_mode: MaskMode::Threshold, ..Default::default() };
    let warped_img = resample(&sample.moving, ddf, &soft_spec)?;
    let warped_soft = resample_mask(&sample.moving_mask, ddf, &soft_spec)?;
    let warped_hard = warped_soft.threshold();
    let _ = resample_mask(&sample.moving_mask, ddf, &hard_spec)?;
    let tre_values = tre(sample, ddf)?;
    let tre_mean = if tre_values.is_empty() {
        0.0
    } else {
        tre_values.iter().sum::<f64>() / tre_values.len() as f64
    };
    Ok(SampleMetrics {
        sample_id: sample.subject_id.clone(),
        dsc: dsc(&warped_hard, &sample.fixed_mask)?,
        cd_mm: centroid_distance(&warped_soft, &sample.fixed_mask)?,
        mse: mse(&warped_img, &sample.fixed)?,
        tre_mm: tre_mean,
        neg_jac_frac: neg_jacobian_fraction(ddf)?,
    })
}

/// Evaluate a model over samples; rows appear in sample order.
pub fn evaluate_model<T: Gemm>(
    model: &RegModel<T>,
    samples: &[RegistrationSample],
    config_echo: String,
    serial: bool,
) -> Result<EvalReport> {
    let eval_one = |s: &RegistrationSample| -> Result<SampleMetrics> {
        let (ddf, _) = model.predict(s).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        metrics_for(s, &ddf)
    };
    let rows: Result<Vec<SampleMetrics>> = if serial {
        samples.iter().map(eval_one).collect()
    } else {
        samples.par_iter().map(eval_one).collect()
    };
    Ok(EvalReport::new(rows?, config_echo))
}

/// Metrics without registration (identity field): the "w/o registration"
/// reference row.
pub fn unregistered_report(samples: &[RegistrationSample]) -> Result<EvalReport> {
    let rows: Result<Vec<SampleMetrics>> = samples
        .iter()
        .map(|s| {
            let identity = DisplacementField::zeros(s.dims(), s.spacing());
            metrics_for(s, &identity)
        })
        .collect();
    Ok(EvalReport::new(rows?, String::from("unregistered (identity field)")))
}
