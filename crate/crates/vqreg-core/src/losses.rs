//! Training objective: SSD image similarity, soft Dice on masks, bending
//! energy regularization of the field, and their weighted combination with
//! the quantization losses.

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::transform::{resample, resample_mask, MaskMode, ResampleSpec};
use crate::volume::{DisplacementField, MaskVolume, RegistrationSample, Volume3D};

pub const DICE_EPS: f64 = 1e-6;

/// Weights of the combined objective plus the commitment coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_q: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub lambda_b: f64,
    pub beta: f64,
}

impl LossWeights {
    /// Reference weights: quantization, SSD and Dice at 1, bending at 50,
    /// commitment coefficient 0.25.
    pub fn reference() -> Self {
        Self { lambda_q: 1.0, lambda_s: 1.0, lambda_d: 1.0, lambda_b: 50.0, beta: 0.25 }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        for (name, v) in [
            ("lambda_q", self.lambda_q),
            ("lambda_s", self.lambda_s),
            ("lambda_d", self.lambda_d),
            ("lambda_b", self.lambda_b),
            ("beta", self.beta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::InvalidWeights(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-component loss values for one sample. Disabled quantizers contribute 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub quant_vanilla: f64,
    pub quant_hierarchical: f64,
    pub quant_collaborative: f64,
    pub ssd: f64,
    pub dice: f64,
    pub bending: f64,
}

impl LossComponents {
    pub fn quant_sum(&self) -> f64 {
        self.quant_vanilla + self.quant_hierarchical + self.quant_collaborative
    }
}

/// Mean over voxels of the squared intensity difference.
pub fn ssd_loss(warped: &Volume3D, fixed: &Volume3D) -> Result<f64, CoreError> {
    if warped.dims() != fixed.dims() {
        return Err(CoreError::DimMismatch(format!(
            "ssd: {:?} vs {:?}",
            warped.dims(),
            fixed.dims()
        )));
    }
    let n = warped.num_voxels() as f64;
    Ok(warped
        .data()
        .iter()
        .zip(fixed.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Negative soft Dice: `-(2*sum(a*b) + eps) / (sum(a) + sum(b) + eps)`.
pub fn dice_loss(warped_mask: &MaskVolume, fixed_mask: &MaskVolume) -> Result<f64, CoreError> {
    if warped_mask.dims() != fixed_mask.dims() {
        return Err(CoreError::DimMismatch(format!(
            "dice: {:?} vs {:?}",
            warped_mask.dims(),
            fixed_mask.dims()
        )));
    }
    let mut inter = 0.0;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    for (&a, &b) in warped_mask.data().iter().zip(fixed_mask.data()) {
        inter += a * b;
        sum_a += a;
        sum_b += b;
    }
    Ok(-(2.0 * inter + DICE_EPS) / (sum_a + sum_b + DICE_EPS))
}

/// Second-order smoothness penalty on the displacement field.
///
/// Mean over interior voxels and channels of the squared second derivatives
/// with mixed terms counted twice:
/// `u_xx^2 + u_yy^2 + u_zz^2 + 2 u_xy^2 + 2 u_xz^2 + 2 u_yz^2`,
/// central differences in voxel units.
pub fn bending_energy(ddf: &DisplacementField) -> Result<f64, CoreError> {
    let dims = ddf.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(CoreError::DimMismatch(format!(
            "bending stencil needs dims >= 3 per axis, got {dims:?}"
        )));
    }
    Ok(bending_energy_forward(ddf.data(), dims))
}

/// Weighted combination of the component losses:
/// `lambda_q * (L_V + L_C + L_H) + lambda_s * SSD + lambda_d * Dice +
/// lambda_b * Bending`.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<f64, CoreError> {
    weights.validate()?;
    Ok(weights.lambda_q * components.quant_sum()
        + weights.lambda_s * components.ssd
        + weights.lambda_d * components.dice
        + weights.lambda_b * components.bending)
}

/// Quantization losses per quantizer, in (vanilla, hierarchical,
/// collaborative) order; `None` marks a disabled quantizer.
pub type QuantLosses = [Option<f64>; 3];

/// Evaluate the full objective for one sample and a predicted field: warps
/// the moving image and mask (soft), computes SSD/Dice/bending and combines
/// them with the quantization losses under the given weights.
pub fn sample_losses(
    sample: &RegistrationSample,
    ddf: &DisplacementField,
    quant: &QuantLosses,
    weights: &LossWeights,
) -> Result<(LossComponents, f64), CoreError> {
    let spec = ResampleSpec { mask_mode: MaskMode::Soft, ..Default::default() };
    let warped = resample(&sample.moving, ddf, &spec)?;
    let warped_mask = resample_mask(&sample.moving_mask, ddf, &spec)?;
    let components = LossComponents {
        quant_vanilla: quant[0].unwrap_or(0.0),
        quant_hierarchical: quant[1].unwrap_or(0.0),
        quant_collaborative: quant[2].unwrap_or(0.0),
        ssd: ssd_loss(&warped, &sample.fixed)?,
        dice: dice_loss(&warped_mask, &sample.fixed_mask)?,
        bending: bending_energy(ddf)?,
    };
    let total = total_loss(&components, weights)?;
    Ok((components, total))
}

// ---------------------------------------------------------------------------
// generic kernels shared with the autodiff graph

/// Forward bending energy over `3 * n` field values (channel-major planes).
pub fn bending_energy_forward<T: Scalar>(data: &[T], dims: [usize; 3]) -> f64 {
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let n = nx * ny * nz;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let m = ((nx - 2) * (ny - 2) * (nz - 2)) as f64;
    let mut acc = 0.0f64;
    for c in 0..3 {
        let plane = &data[c * n..(c + 1) * n];
        for z in 1..nz - 1 {
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    let v = |dx: isize, dy: isize, dz: isize| -> f64 {
                        plane[idx(
                            (x as isize + dx) as usize,
                            (y as isize + dy) as usize,
                            (z as isize + dz) as usize,
                        )]
                        .to_f64()
                    };
                    let c0 = v(0, 0, 0);
                    let uxx = v(1, 0, 0) - 2.0 * c0 + v(-1, 0, 0);
                    let uyy = v(0, 1, 0) - 2.0 * c0 + v(0, -1, 0);
                    let uzz = v(0, 0, 1) - 2.0 * c0 + v(0, 0, -1);
                    let uxy = 0.25 * (v(1, 1, 0) - v(1, -1, 0) - v(-1, 1, 0) + v(-1, -1, 0));
                    let uxz = 0.25 * (v(1, 0, 1) - v(1, 0, -1) - v(-1, 0, 1) + v(-1, 0, -1));
                    let uyz = 0.25 * (v(0, 1, 1) - v(0, 1, -1) - v(0, -1, 1) + v(0, -1, -1));
                    acc += uxx * uxx
                        + uyy * uyy
                        + uzz * uzz
                        + 2.0 * (uxy * uxy + uxz * uxz + uyz * uyz);
                }
            }
        }
    }
    acc / (3.0 * m)
}

/// Adjoint of [`bending_energy_forward`]: accumulates
/// `grad_scale * d(bending)/d(data)` into `grad_data`.
pub fn bending_energy_backward<T: Scalar>(
    data: &[T],
    dims: [usize; 3],
    grad_scale: T,
    grad_data: &mut [T],
) {
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let n = nx * ny * nz;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let m = ((nx - 2) * (ny - 2) * (nz - 2)) as f64;
    let norm = grad_scale.to_f64() / (3.0 * m);
    for c in 0..3 {
        let plane = &data[c * n..(c + 1) * n];
        let base = c * n;
        for z in 1..nz - 1 {
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    let at = |dx: isize, dy: isize, dz: isize| -> usize {
                        idx(
                            (x as isize + dx) as usize,
                            (y as isize + dy) as usize,
                            (z as isize + dz) as usize,
                        )
                    };
                    let v = |dx: isize, dy: isize, dz: isize| plane[at(dx, dy, dz)].to_f64();
                    let c0 = v(0, 0, 0);
                    let uxx = v(1, 0, 0) - 2.0 * c0 + v(-1, 0, 0);
                    let uyy = v(0, 1, 0) - 2.0 * c0 + v(0, -1, 0);
                    let uzz = v(0, 0, 1) - 2.0 * c0 + v(0, 0, -1);
                    let uxy = 0.25 * (v(1, 1, 0) - v(1, -1, 0) - v(-1, 1, 0) + v(-1, -1, 0));
                    let uxz = 0.25 * (v(1, 0, 1) - v(1, 0, -1) - v(-1, 0, 1) + v(-1, 0, -1));
                    let uyz = 0.25 * (v(0, 1, 1) - v(0, 1, -1) - v(0, -1, 1) + v(0, -1, -1));

                    let mut add = |dx: isize, dy: isize, dz: isize, w: f64| {
                        let i = base + at(dx, dy, dz);
                        grad_data[i] += T::from_f64(norm * w);
                    };
                    // straight second derivatives: 2 * u_aa * stencil
                    add(1, 0, 0, 2.0 * uxx);
                    add(-1, 0, 0, 2.0 * uxx);
                    add(0, 1, 0, 2.0 * uyy);
                    add(0, -1, 0, 2.0 * uyy);
                    add(0, 0, 1, 2.0 * uzz);
                    add(0, 0, -1, 2.0 * uzz);
                    add(0, 0, 0, -4.0 * (uxx + uyy + uzz));
                    // mixed terms: 2 * 2 * u_ab * (stencil / 4)
                    let wxy = uxy;
                    add(1, 1, 0, wxy);
                    add(-1, -1, 0, wxy);
                    add(1, -1, 0, -wxy);
                    add(-1, 1, 0, -wxy);
                    let wxz = uxz;
                    add(1, 0, 1, wxz);
                    add(-1, 0, -1, wxz);
                    add(1, 0, -1, -wxz);
                    add(-1, 0, 1, -wxz);
                    let wyz = uyz;
                    add(0, 1, 1, wyz);
                    add(0, -1, -1, wyz);
                    add(0, 1, -1, -wyz);
                    add(0, -1, 1, -wyz);
                }
            }
        }
    }
}
