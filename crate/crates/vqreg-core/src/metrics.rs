//! Evaluation metric suite: Dice similarity, centroid distance, mean squared
//! error, target registration error and the negative-Jacobian fraction.

use crate::error::CoreError;
use crate::transform::{jacobian_determinants, warp_point_with_origin};
use crate::volume::{DisplacementField, MaskKind, MaskVolume, RegistrationSample, Volume3D};

/// Dice similarity coefficient of two binary masks: `2|A n B| / (|A| + |B|)`.
/// Defined as 1 when both masks are empty.
pub fn dsc(a: &MaskVolume, b: &MaskVolume) -> Result<f64, CoreError> {
    if a.kind() != MaskKind::Binary || b.kind() != MaskKind::Binary {
        return Err(CoreError::Metric("dsc requires binary masks".into()));
    }
    if a.dims() != b.dims() {
        return Err(CoreError::DimMismatch(format!("dsc: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += x * y;
        sum += x + y;
    }
    if sum == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / sum)
}

fn weighted_centroid_mm(mask: &MaskVolume) -> Result<[f64; 3], CoreError> {
    let dims = mask.dims();
    let spacing = mask.spacing();
    let origin = mask.origin();
    let mut w_sum = 0.0;
    let mut acc = [0.0f64; 3];
    let mut i = 0usize;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let w = mask.data()[i];
                if w != 0.0 {
                    w_sum += w;
                    acc[0] += w * (origin[0] + x as f64 * spacing[0]);
                    acc[1] += w * (origin[1] + y as f64 * spacing[1]);
                    acc[2] += w * (origin[2] + z as f64 * spacing[2]);
                }
                i += 1;
            }
        }
    }
    if w_sum == 0.0 {
        return Err(CoreError::Metric("centroid of an empty mask".into()));
    }
    Ok([acc[0] / w_sum, acc[1] / w_sum, acc[2] / w_sum])
}

/// Euclidean distance in mm between the intensity-weighted centroids.
pub fn centroid_distance(a: &MaskVolume, b: &MaskVolume) -> Result<f64, CoreError> {
    if a.dims() != b.dims() {
        return Err(CoreError::DimMismatch(format!("cd: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let ca = weighted_centroid_mm(a)?;
    let cb = weighted_centroid_mm(b)?;
    Ok(((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)).sqrt())
}

/// Mean squared intensity difference.
pub fn mse(a: &Volume3D, b: &Volume3D) -> Result<f64, CoreError> {
    if a.dims() != b.dims() {
        return Err(CoreError::DimMismatch(format!("mse: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.num_voxels() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Target registration error per landmark, in mm: the distance between each
/// fixed landmark warped through the field and its moving counterpart.
pub fn tre(sample: &RegistrationSample, ddf: &DisplacementField) -> Result<Vec<f64>, CoreError> {
    if !sample.moving_landmarks.corresponds_to(&sample.fixed_landmarks) {
        return Err(CoreError::InvalidLandmarks("landmark labels do not correspond".into()));
    }
    let origin = sample.fixed.origin();
    let mut out = Vec::with_capacity(sample.fixed_landmarks.len());
    for (fixed_pt, moving_pt) in
        sample.fixed_landmarks.points().iter().zip(sample.moving_landmarks.points())
    {
        let mapped = warp_point_with_origin(*fixed_pt, ddf, origin)?;
        let d = ((mapped[0] - moving_pt[0]).powi(2)
            + (mapped[1] - moving_pt[1]).powi(2)
            + (mapped[2] - moving_pt[2]).powi(2))
        .sqrt();
        out.push(d);
    }
    Ok(out)
}

/// Fraction of interior voxels where `det(I + grad u) <= 0`.
pub fn neg_jacobian_fraction(ddf: &DisplacementField) -> Result<f64, CoreError> {
    let det = jacobian_determinants(ddf)?;
    let dims = det.dims();
    let mut neg = 0usize;
    let mut count = 0usize;
    for z in 1..dims[2] - 1 {
        for y in 1..dims[1] - 1 {
            for x in 1..dims[0] - 1 {
                count += 1;
                if det.at(x, y, z) <= 0.0 {
                    neg += 1;
                }
            }
        }
    }
    Ok(neg as f64 / count as f64)
}
