//! Spatial transform operators: trilinear resampling under a dense
//! displacement field, point warping for landmark evaluation, and
//! Jacobian-determinant analysis of the deformation.
//!
//! Convention: the field `u` lives on the fixed grid in voxel units and maps
//! fixed-grid coordinates to sampling locations in the moving image, so the
//! warped moving image at voxel `p` reads the moving image at `p + u(p)`.

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::volume::{DisplacementField, MaskKind, MaskVolume, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Trilinear,
}

/// How warped masks are produced: kept soft (for differentiable losses) or
/// hard-thresholded at 0.5 (for reported overlap metrics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    Soft,
    Threshold,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ResampleSpec {
    pub boundary: Boundary,
    pub interpolation: Interpolation,
    pub mask_mode: MaskMode,
}

/// Corner indices and weights for trilinear interpolation at a continuous
/// voxel coordinate, with clamp-to-edge boundary handling.
#[inline]
pub fn trilinear_setup(dims: [usize; 3], pos: [f64; 3]) -> ([usize; 3], [usize; 3], [f64; 3]) {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let q = pos[a].clamp(0.0, hi);
        let f = q.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(dims[a] - 1);
        frac[a] = q - f;
    }
    (i0, i1, frac)
}

/// Trilinear sample of a scalar plane stored in x-fastest raster order.
pub fn trilinear_sample_plane(plane: &[f64], dims: [usize; 3], pos: [f64; 3]) -> f64 {
    let (i0, i1, f) = trilinear_setup(dims, pos);
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    let (fx, fy, fz) = (f[0], f[1], f[2]);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    gz * (gy * (gx * plane[idx(i0[0], i0[1], i0[2])] + fx * plane[idx(i1[0], i0[1], i0[2])])
        + fy * (gx * plane[idx(i0[0], i1[1], i0[2])] + fx * plane[idx(i1[0], i1[1], i0[2])]))
        + fz * (gy
            * (gx * plane[idx(i0[0], i0[1], i1[2])] + fx * plane[idx(i1[0], i0[1], i1[2])])
            + fy * (gx * plane[idx(i0[0], i1[1], i1[2])]
                + fx * plane[idx(i1[0], i1[1], i1[2])]))
}

/// Forward warp kernel over `channels` stacked planes: for every voxel `p`,
/// `out[c][p] = vol[c] sampled at p + u(p)`. `ddf` holds the three
/// displacement planes (x, y, z) contiguously, `n` voxels each.
pub fn warp_forward<T: Scalar>(
    vol: &[T],
    channels: usize,
    dims: [usize; 3],
    ddf: &[T],
    out: &mut [T],
) {
    let n = dims[0] * dims[1] * dims[2];
    debug_assert_eq!(vol.len(), channels * n);
    debug_assert_eq!(ddf.len(), 3 * n);
    debug_assert_eq!(out.len(), channels * n);
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let mut p = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [
                    x as f64 + ddf[p].to_f64(),
                    y as f64 + ddf[n + p].to_f64(),
                    z as f64 + ddf[2 * n + p].to_f64(),
                ];
                let (i0, i1, f) = trilinear_setup(dims, pos);
                let (fx, fy, fz) = (T::from_f64(f[0]), T::from_f64(f[1]), T::from_f64(f[2]));
                let (gx, gy, gz) = (T::ONE - fx, T::ONE - fy, T::ONE - fz);
                let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
                let c000 = idx(i0[0], i0[1], i0[2]);
                let c100 = idx(i1[0], i0[1], i0[2]);
                let c010 = idx(i0[0], i1[1], i0[2]);
                let c110 = idx(i1[0], i1[1], i0[2]);
                let c001 = idx(i0[0], i0[1], i1[2]);
                let c101 = idx(i1[0], i0[1], i1[2]);
                let c011 = idx(i0[0], i1[1], i1[2]);
                let c111 = idx(i1[0], i1[1], i1[2]);
                for c in 0..channels {
                    let pl = &vol[c * n..(c + 1) * n];
                    out[c * n + p] = gz
                        * (gy * (gx * pl[c000] + fx * pl[c100])
                            + fy * (gx * pl[c010] + fx * pl[c110]))
                        + fz * (gy * (gx * pl[c001] + fx * pl[c101])
                            + fy * (gx * pl[c011] + fx * pl[c111]));
                }
                p += 1;
            }
        }
    }
}

/// Adjoint of [`warp_forward`]: accumulates gradients with respect to both
/// the sampled volume and the displacement field.
///
/// Where a sampling coordinate was clamped at the grid edge the positional
/// derivative is zero (the clamped coordinate no longer responds to `u`).
#[allow(clippy::too_many_arguments)]
pub fn warp_backward<T: Scalar>(
    vol: &[T],
    channels: usize,
    dims: [usize; 3],
    ddf: &[T],
    grad_out: &[T],
    grad_vol: &mut [T],
    grad_ddf: &mut [T],
) {
    let n = dims[0] * dims[1] * dims[2];
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let mut p = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let raw = [
                    x as f64 + ddf[p].to_f64(),
                    y as f64 + ddf[n + p].to_f64(),
                    z as f64 + ddf[2 * n + p].to_f64(),
                ];
                let (i0, i1, f) = trilinear_setup(dims, raw);
                // clamped axes stop responding to the field
                let mut active = [T::ONE; 3];
                for a in 0..3 {
                    if raw[a] <= 0.0 || raw[a] >= (dims[a] - 1) as f64 {
                        active[a] = T::ZERO;
                    }
                }
                let (fx, fy, fz) = (T::from_f64(f[0]), T::from_f64(f[1]), T::from_f64(f[2]));
                let (gx, gy, gz) = (T::ONE - fx, T::ONE - fy, T::ONE - fz);
                let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
                let corners = [
                    (idx(i0[0], i0[1], i0[2]), gx, gy, gz, -T::ONE, -T::ONE, -T::ONE),
                    (idx(i1[0], i0[1], i0[2]), fx, gy, gz, T::ONE, -T::ONE, -T::ONE),
                    (idx(i0[0], i1[1], i0[2]), gx, fy, gz, -T::ONE, T::ONE, -T::ONE),
                    (idx(i1[0], i1[1], i0[2]), fx, fy, gz, T::ONE, T::ONE, -T::ONE),
                    (idx(i0[0], i0[1], i1[2]), gx, gy, fz, -T::ONE, -T::ONE, T::ONE),
                    (idx(i1[0], i0[1], i1[2]), fx, gy, fz, T::ONE, -T::ONE, T::ONE),
                    (idx(i0[0], i1[1], i1[2]), gx, fy, fz, -T::ONE, T::ONE, T::ONE),
                    (idx(i1[0], i1[1], i1[2]), fx, fy, fz, T::ONE, T::ONE, T::ONE),
                ];
                for c in 0..channels {
                    let go = grad_out[c * n + p];
                    if go == T::ZERO {
                        continue;
                    }
                    let pl = &vol[c * n..(c + 1) * n];
                    let gvol = &mut grad_vol[c * n..(c + 1) * n];
                    let mut du = [T::ZERO; 3];
                    for &(ci, wx, wy, wz, sx, sy, sz) in &corners {
                        gvol[ci] += go * wx * wy * wz;
                        let v = pl[ci];
                        du[0] += v * sx * wy * wz;
                        du[1] += v * wx * sy * wz;
                        du[2] += v * wx * wy * sz;
                    }
                    grad_ddf[p] += go * du[0] * active[0];
                    grad_ddf[n + p] += go * du[1] * active[1];
                    grad_ddf[2 * n + p] += go * du[2] * active[2];
                }
                p += 1;
            }
        }
    }
}

fn check_ddf(dims: [usize; 3], ddf: &DisplacementField) -> Result<(), CoreError> {
    if ddf.dims() != dims {
        return Err(CoreError::DimMismatch(format!(
            "ddf dims {:?} vs volume dims {:?}",
            ddf.dims(),
            dims
        )));
    }
    if !ddf.is_finite() {
        return Err(CoreError::NonFinite("displacement field"));
    }
    Ok(())
}

/// Warp a volume with a displacement field: `out[p] = volume(p + u(p))`
/// with trilinear interpolation and clamp-to-edge boundaries.
pub fn resample(
    volume: &Volume3D,
    ddf: &DisplacementField,
    _spec: &ResampleSpec,
) -> Result<Volume3D, CoreError> {
    check_ddf(volume.dims(), ddf)?;
    let mut out = vec![0.0f64; volume.num_voxels()];
    warp_forward(volume.data(), 1, volume.dims(), ddf.data(), &mut out);
    Ok(Volume3D::new(volume.dims(), volume.spacing(), volume.origin(), out)?
        .with_dtype(volume.dtype()))
}

/// Warp a mask. Trilinear interpolation always; the result is soft, or
/// hard-thresholded at 0.5 when `spec.mask_mode` is [`MaskMode::Threshold`].
pub fn resample_mask(
    mask: &MaskVolume,
    ddf: &DisplacementField,
    spec: &ResampleSpec,
) -> Result<MaskVolume, CoreError> {
    check_ddf(mask.dims(), ddf)?;
    let mut out = vec![0.0f64; mask.data().len()];
    warp_forward(mask.data(), 1, mask.dims(), ddf.data(), &mut out);
    // interpolation of in-range values stays in range up to rounding
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    let soft = MaskVolume::new(mask.dims(), mask.spacing(), mask.origin(), MaskKind::Soft, out)?
        .with_dtype(mask.dtype());
    Ok(match spec.mask_mode {
        MaskMode::Soft => soft,
        MaskMode::Threshold => soft.threshold(),
    })
}

/// Warp a physical point through the field: converts mm to voxel
/// coordinates, interpolates `u` there, and returns
/// `(point_voxel + u) * spacing` in mm. The grid origin is taken as 0; use
/// [`warp_point_with_origin`] for volumes with a nonzero origin.
pub fn warp_point(point_mm: [f64; 3], ddf: &DisplacementField) -> Result<[f64; 3], CoreError> {
    warp_point_with_origin(point_mm, ddf, [0.0; 3])
}

pub fn warp_point_with_origin(
    point_mm: [f64; 3],
    ddf: &DisplacementField,
    origin: [f64; 3],
) -> Result<[f64; 3], CoreError> {
    let spacing = ddf.spacing();
    let dims = ddf.dims();
    let mut vox = [0.0; 3];
    for a in 0..3 {
        vox[a] = (point_mm[a] - origin[a]) / spacing[a];
        let hi = (dims[a] - 1) as f64;
        if vox[a] < 0.0 || vox[a] > hi {
            return Err(CoreError::PointOutsideExtent(point_mm[0], point_mm[1], point_mm[2]));
        }
    }
    let u = ddf.sample(vox);
    Ok([
        (vox[0] + u[0]) * spacing[0] + origin[0],
        (vox[1] + u[1]) * spacing[1] + origin[1],
        (vox[2] + u[2]) * spacing[2] + origin[2],
    ])
}

/// Per-voxel determinant of `I + grad(u)` with central differences in the
/// interior and one-sided differences at the borders. Units are voxels, so
/// the identity map has determinant 1 everywhere.
pub fn jacobian_determinants(ddf: &DisplacementField) -> Result<Volume3D, CoreError> {
    let dims = ddf.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(CoreError::DimMismatch(format!(
            "jacobian stencil needs dims >= 3 per axis, got {dims:?}"
        )));
    }
    if !ddf.is_finite() {
        return Err(CoreError::NonFinite("displacement field"));
    }
    let n = ddf.num_voxels();
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut det = vec![0.0f64; n];

    // derivative of plane values along one axis at (x,y,z)
    let deriv = |plane: &[f64], x: usize, y: usize, z: usize, axis: usize| -> f64 {
        let (pos, dim) = match axis {
            0 => (x, nx),
            1 => (y, ny),
            _ => (z, nz),
        };
        let step = |x: usize, y: usize, z: usize, d: isize| -> usize {
            match axis {
                0 => idx((x as isize + d) as usize, y, z),
                1 => idx(x, (y as isize + d) as usize, z),
                _ => idx(x, y, (z as isize + d) as usize),
            }
        };
        if pos == 0 {
            plane[step(x, y, z, 1)] - plane[step(x, y, z, 0)]
        } else if pos == dim - 1 {
            plane[step(x, y, z, 0)] - plane[step(x, y, z, -1)]
        } else {
            0.5 * (plane[step(x, y, z, 1)] - plane[step(x, y, z, -1)])
        }
    };

    let planes = [ddf.component(0), ddf.component(1), ddf.component(2)];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut j = [[0.0f64; 3]; 3];
                for (r, plane) in planes.iter().enumerate() {
                    for axis in 0..3 {
                        j[r][axis] = deriv(plane, x, y, z, axis) + if r == axis { 1.0 } else { 0.0 };
                    }
                }
                det[idx(x, y, z)] = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
            }
        }
    }
    Volume3D::new(dims, ddf.spacing(), [0.0; 3], det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        Volume3D::new(dims, [1.0; 3], [0.0; 3], data).unwrap()
    }

    fn smooth_ddf(dims: [usize; 3], seed: u64, amp: f64) -> DisplacementField {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut u = DisplacementField::zeros(dims, [1.0; 3]);
        let phase: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() * std::f64::consts::TAU).collect();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let (fx, fy, fz) = (
                        x as f64 / dims[0] as f64,
                        y as f64 / dims[1] as f64,
                        z as f64 / dims[2] as f64,
                    );
                    let v = [
                        amp * (std::f64::consts::TAU * fx + phase[0]).sin()
                            * (std::f64::consts::TAU * fy + phase[1]).cos(),
                        amp * (std::f64::consts::TAU * fy + phase[3]).sin()
                            * (std::f64::consts::TAU * fz + phase[4]).cos(),
                        amp * (std::f64::consts::TAU * fz + phase[6]).sin()
                            * (std::f64::consts::TAU * fx + phase[7]).cos(),
                    ];
                    u.set(x, y, z, v);
                }
            }
        }
        u
    }

    /// Independent scalar-loop trilinear interpolation used as the oracle.
    fn oracle_trilinear(vol: &Volume3D, pos: [f64; 3]) -> f64 {
        let dims = vol.dims();
        let mut q = [0.0; 3];
        for a in 0..3 {
            q[a] = pos[a].clamp(0.0, (dims[a] - 1) as f64);
        }
        let base = [q[0].floor() as usize, q[1].floor() as usize, q[2].floor() as usize];
        let mut acc = 0.0;
        for dz in 0..2usize {
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let cx = (base[0] + dx).min(dims[0] - 1);
                    let cy = (base[1] + dy).min(dims[1] - 1);
                    let cz = (base[2] + dz).min(dims[2] - 1);
                    let w = (if dx == 1 { q[0] - base[0] as f64 } else { 1.0 - (q[0] - base[0] as f64) })
                        * (if dy == 1 { q[1] - base[1] as f64 } else { 1.0 - (q[1] - base[1] as f64) })
                        * (if dz == 1 { q[2] - base[2] as f64 } else { 1.0 - (q[2] - base[2] as f64) });
                    acc += w * vol.at(cx, cy, cz);
                }
            }
        }
        acc
    }

    #[test]
    fn zero_ddf_is_identity() {
        let v = random_volume([6, 5, 7], 3);
        let u = DisplacementField::zeros(v.dims(), v.spacing());
        let w = resample(&v, &u, &ResampleSpec::default()).unwrap();
        assert_eq!(w.data(), v.data());
    }

    #[test]
    fn constant_shift_moves_interior_voxels() {
        let v = random_volume([8, 8, 8], 4);
        let mut u = DisplacementField::zeros(v.dims(), v.spacing());
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    u.set(x, y, z, [1.0, 0.0, 0.0]);
                }
            }
        }
        let w = resample(&v, &u, &ResampleSpec::default()).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..7 {
                    assert_eq!(w.at(x, y, z), v.at(x + 1, y, z));
                }
            }
        }
    }

    #[test]
    fn resample_matches_triple_loop_oracle() {
        let v = random_volume([8, 8, 8], 42);
        let u = smooth_ddf(v.dims(), 43, 1.7);
        let w = resample(&v, &u, &ResampleSpec::default()).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let d = u.at(x, y, z);
                    let expect =
                        oracle_trilinear(&v, [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]);
                    assert!((w.at(x, y, z) - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn resampler_is_linear_in_the_volume() {
        let v1 = random_volume([6, 6, 6], 7);
        let v2 = random_volume([6, 6, 6], 8);
        let u = smooth_ddf([6, 6, 6], 9, 1.2);
        let (a, b) = (0.7, -1.3);
        let combo_data: Vec<f64> =
            v1.data().iter().zip(v2.data()).map(|(p, q)| a * p + b * q).collect();
        let combo = Volume3D::new([6, 6, 6], [1.0; 3], [0.0; 3], combo_data).unwrap();
        let w_combo = resample(&combo, &u, &ResampleSpec::default()).unwrap();
        let w1 = resample(&v1, &u, &ResampleSpec::default()).unwrap();
        let w2 = resample(&v2, &u, &ResampleSpec::default()).unwrap();
        for i in 0..w_combo.data().len() {
            let expect = a * w1.data()[i] + b * w2.data()[i];
            assert!((w_combo.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_point_zero_field_and_constant_field() {
        let u = DisplacementField::zeros([10, 10, 10], [0.7; 3]);
        let p = warp_point([2.1, 3.5, 0.7], &u).unwrap();
        assert_eq!(p, [2.1, 3.5, 0.7]);

        let mut u1 = DisplacementField::zeros([10, 10, 10], [0.7; 3]);
        for z in 0..10 {
            for y in 0..10 {
                for x in 0..10 {
                    u1.set(x, y, z, [1.0, 0.0, 0.0]);
                }
            }
        }
        let q = warp_point([2.1, 3.5, 0.7], &u1).unwrap();
        assert!((q[0] - (2.1 + 0.7)).abs() < 1e-12);
        assert!((q[1] - 3.5).abs() < 1e-12);
        assert!((q[2] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn warp_point_outside_extent_errors() {
        let u = DisplacementField::zeros([4, 4, 4], [1.0; 3]);
        assert!(matches!(
            warp_point([5.0, 1.0, 1.0], &u),
            Err(CoreError::PointOutsideExtent(..))
        ));
    }

    #[test]
    fn jacobian_of_zero_field_is_one() {
        let u = DisplacementField::zeros([5, 6, 7], [1.0; 3]);
        let det = jacobian_determinants(&u).unwrap();
        for &d in det.data() {
            assert_eq!(d, 1.0);
        }
    }

    #[test]
    fn jacobian_of_uniform_scaling_field() {
        // u(x) = 0.1 * x per axis -> det = 1.1^3 in the interior
        let dims = [7, 7, 7];
        let mut u = DisplacementField::zeros(dims, [1.0; 3]);
        for z in 0..7 {
            for y in 0..7 {
                for x in 0..7 {
                    u.set(x, y, z, [0.1 * x as f64, 0.1 * y as f64, 0.1 * z as f64]);
                }
            }
        }
        let det = jacobian_determinants(&u).unwrap();
        for z in 1..6 {
            for y in 1..6 {
                for x in 1..6 {
                    assert!((det.at(x, y, z) - 1.331).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn folding_field_detected_where_analytic_det_negative() {
        // u_x = -2x around the centre column: det(I + grad u) = -1 there
        let dims = [9, 5, 5];
        let mut u = DisplacementField::zeros(dims, [1.0; 3]);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..9 {
                    u.set(x, y, z, [-2.0 * x as f64, 0.0, 0.0]);
                }
            }
        }
        let det = jacobian_determinants(&u).unwrap();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..9 {
                    assert!((det.at(x, y, z) - (-1.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        // d(SSD(warp(v, u), target))/du checked at random voxels
        let dims = [6, 6, 6];
        let n = 216;
        let v = random_volume(dims, 11);
        let target = random_volume(dims, 12);
        let u = smooth_ddf(dims, 13, 0.9);

        let loss = |ud: &[f64]| -> f64 {
            let mut out = vec![0.0; n];
            warp_forward(v.data(), 1, dims, ud, &mut out);
            out.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / n as f64
        };

        // analytic gradient via the adjoint kernel
        let mut warped = vec![0.0; n];
        warp_forward(v.data(), 1, dims, u.data(), &mut warped);
        let grad_out: Vec<f64> = warped
            .iter()
            .zip(target.data())
            .map(|(a, b)| 2.0 * (a - b) / n as f64)
            .collect();
        let mut grad_vol = vec![0.0; n];
        let mut grad_ddf = vec![0.0; 3 * n];
        warp_backward(v.data(), 1, dims, u.data(), &grad_out, &mut grad_vol, &mut grad_ddf);

        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let eps = 1e-6;
        for _ in 0..20 {
            let i = rng.gen_range(0..3 * n);
            let mut up = u.data().to_vec();
            let mut dn = u.data().to_vec();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * eps);
            let an = grad_ddf[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (an - fd).abs() / denom < 1e-4,
                "ddf grad mismatch at {i}: analytic {an}, fd {fd}"
            );
        }
    }
}
