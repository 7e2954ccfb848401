//! Deterministic synthetic registration pairs.
//!
//! Each sample is an anatomy-like scene: an ellipsoidal "gland" (base
//! intensity 0.6 plus smooth texture) on a 0.2 background, with a handful of
//! bright/dark internal blobs whose centres double as landmarks. The fixed
//! image is the moving image warped by a known smooth ground-truth
//! deformation (a sum of Gaussian displacement bumps) plus independent mild
//! noise. The generator is pure: the same spec yields bit-identical samples.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::CoreError;
use crate::rng::{normal, rng};
use crate::transform::{resample_mask, MaskMode, ResampleSpec};
use crate::volume::{
    DisplacementField, LandmarkSet, MaskKind, MaskVolume, RegistrationSample, Volume3D,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub deform_amplitude_mm: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(seed: u64, dims: [usize; 3], deform_amplitude_mm: f64) -> Self {
        Self { dims, spacing: [0.7; 3], deform_amplitude_mm, noise_sigma: 0.02, seed }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }
}

/// A generated sample together with the deformation that produced it.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub sample: RegistrationSample,
    /// The ground-truth field, on the fixed grid in voxel units.
    pub ground_truth: DisplacementField,
}

struct Blob {
    center_vox: [f64; 3],
    radius_vox: f64,
    intensity: f64,
}

struct TextureWave {
    dir: [f64; 3],
    wavelength_vox: f64,
    phase: f64,
    amplitude: f64,
}

struct GaussianBump {
    center_vox: [f64; 3],
    sigma_vox: f64,
    dir: [f64; 3],
    weight: f64,
}

fn unit_vector(rng: &mut ChaCha12Rng) -> [f64; 3] {
    loop {
        let v = [normal(rng), normal(rng), normal(rng)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-6 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

/// Generate a registration pair with its ground-truth deformation.
pub fn generate(spec: &SynthSpec) -> Result<SynthSample, CoreError> {
    let dims = spec.dims;
    if dims.iter().any(|&d| d < 16) {
        return Err(CoreError::Synth(format!("dims must be >= 16 per axis, got {dims:?}")));
    }
    if !(spec.deform_amplitude_mm >= 0.0) {
        return Err(CoreError::Synth("deform_amplitude must be >= 0".into()));
    }
    let mut r = rng(spec.seed);

    // --- ground-truth deformation -------------------------------------------
    // Bumps are centred near the middle of the volume (where the gland
    // lives); the z-component is damped, mimicking dominantly in-plane
    // motion and leaving the thinner z margin room for the gland.
    let n_bumps = r.gen_range(3..=6usize);
    let volume_mid = [dims[0] as f64 * 0.5, dims[1] as f64 * 0.5, dims[2] as f64 * 0.5];
    let bumps: Vec<GaussianBump> = (0..n_bumps)
        .map(|_| {
            let mut dir = unit_vector(&mut r);
            dir[2] *= 0.6;
            GaussianBump {
                center_vox: [
                    volume_mid[0] + r.gen_range(-0.4..0.4) * dims[0] as f64,
                    volume_mid[1] + r.gen_range(-0.4..0.4) * dims[1] as f64,
                    volume_mid[2] + r.gen_range(-0.4..0.4) * dims[2] as f64,
                ],
                sigma_vox: r.gen_range(4.0..8.0),
                dir,
                weight: r.gen_range(0.5..1.0),
            }
        })
        .collect();

    let raw_field = |p: [f64; 3]| -> [f64; 3] {
        let mut u = [0.0f64; 3];
        for b in &bumps {
            let d2: f64 = (0..3).map(|a| (p[a] - b.center_vox[a]).powi(2)).sum();
            let w = b.weight * (-d2 / (2.0 * b.sigma_vox * b.sigma_vox)).exp();
            for a in 0..3 {
                u[a] += w * b.dir[a];
            }
        }
        u
    };

    // scale so the maximum displacement magnitude in mm equals the amplitude
    let n = dims[0] * dims[1] * dims[2];
    let mut max_mm = 0.0f64;
    if spec.deform_amplitude_mm > 0.0 {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let u = raw_field([x as f64, y as f64, z as f64]);
                    let mm2: f64 =
                        (0..3).map(|a| (u[a] * spec.spacing[a]).powi(2)).sum();
                    max_mm = max_mm.max(mm2.sqrt());
                }
            }
        }
    }
    let scale =
        if spec.deform_amplitude_mm > 0.0 { spec.deform_amplitude_mm / max_mm } else { 0.0 };

    let mut gt = DisplacementField::zeros(dims, spec.spacing);
    let mut max_axis_vox = [0.0f64; 3];
    if scale != 0.0 {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let u = raw_field([x as f64, y as f64, z as f64]);
                    let v = [scale * u[0], scale * u[1], scale * u[2]];
                    for a in 0..3 {
                        max_axis_vox[a] = max_axis_vox[a].max(v[a].abs());
                    }
                    gt.set(x, y, z, v);
                }
            }
        }
    }

    // --- gland geometry -----------------------------------------------------
    // Margins must absorb the measured deformation so neither mask touches
    // the border.
    let amp_vox: Vec<f64> = max_axis_vox.to_vec();
    // analytic occupancy band; the floor sits above 5% because the voxelized
    // count falls slightly short of the continuous volume
    const OCC_LO: f64 = 0.058;
    const OCC_HI: f64 = 0.45;
    let mut center = [0.0f64; 3];
    let mut semi = [0.0f64; 3];
    let mut semi_hi = [0.0f64; 3];
    let mut found = false;
    for _try in 0..20 {
        let mut hi_allowed = [0.0f64; 3];
        let mut frac = [0.0f64; 3];
        let mut ok = true;
        for a in 0..3 {
            let d = dims[a] as f64;
            let jitter_max = 0.02 * d;
            hi_allowed[a] = ((0.5 * d - 2.2 - amp_vox[a] - jitter_max) / d).min(0.32);
            if hi_allowed[a] <= 0.05 {
                ok = false;
                break;
            }
            frac[a] = r.gen_range(0.85 * hi_allowed[a]..hi_allowed[a]);
            center[a] = 0.5 * d + r.gen_range(-jitter_max..jitter_max);
        }
        if !ok {
            return Err(CoreError::Synth(format!(
                "dims {dims:?} too small to contain the gland at amplitude {} mm",
                spec.deform_amplitude_mm
            )));
        }
        let occ_of = |f: &[f64; 3]| {
            (4.0 / 3.0)
                * std::f64::consts::PI
                * (f[0] * dims[0] as f64)
                * (f[1] * dims[1] as f64)
                * (f[2] * dims[2] as f64)
                / (dims[0] * dims[1] * dims[2]) as f64
        };
        let mut occ = occ_of(&frac);
        // grow a too-small gland toward the floor when the margin allows it
        if occ < OCC_LO {
            let s = (OCC_LO / occ).powf(1.0 / 3.0) * 1.01;
            if (0..3).all(|a| frac[a] * s <= hi_allowed[a]) {
                for f in frac.iter_mut() {
                    *f *= s;
                }
                occ = occ_of(&frac);
            }
        }
        if (OCC_LO..=OCC_HI).contains(&occ) {
            for a in 0..3 {
                semi[a] = frac[a] * dims[a] as f64;
                semi_hi[a] = hi_allowed[a] * dims[a] as f64;
            }
            found = true;
            break;
        }
    }
    if !found {
        return Err(CoreError::Synth(format!(
            "dims {dims:?} too small to contain the gland at amplitude {} mm",
            spec.deform_amplitude_mm
        )));
    }

    // --- internal blob structures (landmark carriers) -----------------------
    let n_blobs = r.gen_range(3..=8usize);
    let min_semi = semi[0].min(semi[1]).min(semi[2]);
    let r_hi = (0.3 * min_semi).clamp(1.3, 2.2);
    let mut blobs: Vec<Blob> = Vec::with_capacity(n_blobs);
    let mut separation_scale = 1.0f64;
    let mut tries = 0usize;
    while blobs.len() < n_blobs {
        let dir = unit_vector(&mut r);
        let rho = r.gen::<f64>().powf(1.0 / 3.0) * 0.6;
        let radius = r.gen_range(1.2..r_hi.max(1.25));
        let cand = Blob {
            center_vox: [
                center[0] + rho * dir[0] * semi[0],
                center[1] + rho * dir[1] * semi[1],
                center[2] + rho * dir[2] * semi[2],
            ],
            radius_vox: radius,
            intensity: if r.gen::<f64>() < 0.5 { 0.9 } else { 0.05 },
        };
        let far_enough = blobs.iter().all(|b| {
            let d2: f64 = (0..3)
                .map(|a| (b.center_vox[a] - cand.center_vox[a]).powi(2))
                .sum();
            d2.sqrt() >= separation_scale * (b.radius_vox + cand.radius_vox + 1.5)
        });
        if far_enough {
            blobs.push(cand);
        }
        tries += 1;
        if tries % 300 == 0 {
            separation_scale *= 0.9;
        }
    }

    // --- smooth texture inside the gland ------------------------------------
    let waves: Vec<TextureWave> = (0..4)
        .map(|_| TextureWave {
            dir: unit_vector(&mut r),
            wavelength_vox: r.gen_range(6.0..14.0),
            phase: r.gen::<f64>() * std::f64::consts::TAU,
            amplitude: r.gen_range(0.02..0.05),
        })
        .collect();

    // --- masks -----------------------------------------------------------------
    // The gland indicator on the moving grid, and its image under the
    // ground-truth deformation (discretized with the workspace resampler).
    // The fixed-side gland legitimately shrinks where the deformation
    // expands, so the occupancy floor is enforced on both masks, growing
    // the gland while the boundary margin allows it.
    let build_moving_mask = |semi: [f64; 3]| -> Vec<f64> {
        let mut data = vec![0.0f64; n];
        let mut i = 0usize;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let rho2: f64 = [
                        (x as f64 - center[0]) / semi[0],
                        (y as f64 - center[1]) / semi[1],
                        (z as f64 - center[2]) / semi[2],
                    ]
                    .iter()
                    .map(|v| v * v)
                    .sum();
                    if rho2 < 1.0 {
                        data[i] = 1.0;
                    }
                    i += 1;
                }
            }
        }
        data
    };
    let warp_spec = ResampleSpec { mask_mode: MaskMode::Threshold, ..Default::default() };
    let mut moving_mask_data = build_moving_mask(semi);
    let mut fixed_mask = {
        let m = MaskVolume::new(dims, spec.spacing, [0.0; 3], MaskKind::Binary, moving_mask_data.clone())?;
        resample_mask(&m, &gt, &warp_spec)?
    };
    for _grow in 0..12 {
        let occ_moving =
            moving_mask_data.iter().filter(|&&v| v >= 0.5).count() as f64 / n as f64;
        let occ_fixed = fixed_mask.foreground_count() as f64 / n as f64;
        if occ_moving.min(occ_fixed) >= 0.0505 || occ_moving > 0.48 {
            break;
        }
        if !(0..3).all(|a| semi[a] * 1.03 <= semi_hi[a]) {
            break;
        }
        for v in semi.iter_mut() {
            *v *= 1.03;
        }
        moving_mask_data = build_moving_mask(semi);
        fixed_mask = {
            let m = MaskVolume::new(dims, spec.spacing, [0.0; 3], MaskKind::Binary, moving_mask_data.clone())?;
            resample_mask(&m, &gt, &warp_spec)?
        };
    }
    {
        let occ_moving =
            moving_mask_data.iter().filter(|&&v| v >= 0.5).count() as f64 / n as f64;
        let occ_fixed = fixed_mask.foreground_count() as f64 / n as f64;
        if occ_moving.min(occ_fixed) < 0.0505 {
            return Err(CoreError::Synth(format!(
                "dims {dims:?} too small to contain the gland at amplitude {} mm",
                spec.deform_amplitude_mm
            )));
        }
    }
    let moving_mask =
        MaskVolume::new(dims, spec.spacing, [0.0; 3], MaskKind::Binary, moving_mask_data)?;

    // --- intensity model ------------------------------------------------------
    let ellipsoid_rho = |p: [f64; 3]| -> f64 {
        ((0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum::<f64>()).sqrt()
    };
    let intensity = |p: [f64; 3]| -> f64 {
        let rho = ellipsoid_rho(p);
        // ~1.5-voxel soft edge so SSD sees gradients at the boundary
        let edge = 1.0 / (1.0 + (-(1.0 - rho) * (4.0 * min_semi / 3.0)).exp());
        let mut texture = 0.0;
        for w in &waves {
            let t = (p[0] * w.dir[0] + p[1] * w.dir[1] + p[2] * w.dir[2])
                * std::f64::consts::TAU
                / w.wavelength_vox
                + w.phase;
            texture += w.amplitude * t.cos();
        }
        let mut v = 0.2 + (0.4 + texture) * edge;
        for b in &blobs {
            let d2: f64 = (0..3).map(|a| (p[a] - b.center_vox[a]).powi(2)).sum();
            let s = b.radius_vox / 1.2;
            let w = (-d2 / (2.0 * s * s)).exp();
            v += (b.intensity - v) * w;
        }
        v.clamp(0.0, 1.0)
    };

    let mut moving_data = vec![0.0f64; n];
    let mut fixed_data = vec![0.0f64; n];
    {
        let mut i = 0usize;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x as f64, y as f64, z as f64];
                    moving_data[i] = intensity(p);
                    let u = gt.at(x, y, z);
                    fixed_data[i] = intensity([p[0] + u[0], p[1] + u[1], p[2] + u[2]]);
                    i += 1;
                }
            }
        }
    }

    // --- noise ---------------------------------------------------------------
    if spec.noise_sigma > 0.0 {
        for v in moving_data.iter_mut() {
            *v = (*v + spec.noise_sigma * normal(&mut r)).clamp(0.0, 1.0);
        }
        for v in fixed_data.iter_mut() {
            *v = (*v + spec.noise_sigma * normal(&mut r)).clamp(0.0, 1.0);
        }
    }

    let moving =
        Volume3D::new(dims, spec.spacing, [0.0; 3], moving_data)?;
    let fixed = Volume3D::new(dims, spec.spacing, [0.0; 3], fixed_data)?;

    // --- landmarks -------------------------------------------------------------
    // moving landmark = blob centre; the fixed counterpart q solves
    // q + u(q) = blob centre (fixed-point iteration on the stored field)
    let mut labels = Vec::with_capacity(blobs.len());
    let mut moving_pts = Vec::with_capacity(blobs.len());
    let mut fixed_pts = Vec::with_capacity(blobs.len());
    for (i, b) in blobs.iter().enumerate() {
        labels.push(format!("blob-{i:02}"));
        moving_pts.push([
            b.center_vox[0] * spec.spacing[0],
            b.center_vox[1] * spec.spacing[1],
            b.center_vox[2] * spec.spacing[2],
        ]);
        let target = b.center_vox;
        let mut q = target;
        for _ in 0..40 {
            let u = gt.sample(q);
            q = [target[0] - u[0], target[1] - u[1], target[2] - u[2]];
        }
        fixed_pts.push([
            q[0] * spec.spacing[0],
            q[1] * spec.spacing[1],
            q[2] * spec.spacing[2],
        ]);
    }
    let moving_landmarks = LandmarkSet::new(labels.clone(), moving_pts)?;
    let fixed_landmarks = LandmarkSet::new(labels, fixed_pts)?;

    let sample = RegistrationSample::new(
        format!("synth-{:08x}", spec.seed),
        moving,
        fixed,
        moving_mask,
        fixed_mask,
        moving_landmarks,
        fixed_landmarks,
    )?;
    Ok(SynthSample { sample, ground_truth: gt })
}

/// Convenience wrapper: default spacing (0.7 mm isotropic) and noise.
pub fn synth_sample(
    seed: u64,
    dims: [usize; 3],
    deform_amplitude_mm: f64,
) -> Result<RegistrationSample, CoreError> {
    Ok(generate(&SynthSpec::new(seed, dims, deform_amplitude_mm))?.sample)
}

/// Gland-centred crop: bounding box of the union of both masks plus a margin,
/// clipped to the volume. Origins shift so physical coordinates (and thus
/// landmark positions) remain valid.
pub fn crop_to_gland(
    sample: &RegistrationSample,
    margin_vox: usize,
) -> Result<RegistrationSample, CoreError> {
    let dims = sample.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if sample.moving_mask.at(x, y, z) >= 0.5 || sample.fixed_mask.at(x, y, z) >= 0.5 {
                    any = true;
                    let p = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    if !any {
        return Err(CoreError::Synth("crop: both masks are empty".into()));
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin_vox);
        hi[a] = (hi[a] + margin_vox).min(dims[a] - 1);
    }
    let new_dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let spacing = sample.spacing();
    let old_origin = sample.moving.origin();
    let new_origin = [
        old_origin[0] + lo[0] as f64 * spacing[0],
        old_origin[1] + lo[1] as f64 * spacing[1],
        old_origin[2] + lo[2] as f64 * spacing[2],
    ];

    let crop_data = |data: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(new_dims[0] * new_dims[1] * new_dims[2]);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    out.push(data[x + dims[0] * (y + dims[1] * z)]);
                }
            }
        }
        out
    };

    let crop_vol = |v: &Volume3D| -> Result<Volume3D, CoreError> {
        Ok(Volume3D::new(new_dims, spacing, new_origin, crop_data(v.data()))?
            .with_dtype(v.dtype()))
    };
    let crop_mask = |m: &MaskVolume| -> Result<MaskVolume, CoreError> {
        Ok(MaskVolume::new(new_dims, spacing, new_origin, m.kind(), crop_data(m.data()))?
            .with_dtype(m.dtype()))
    };

    RegistrationSample::new(
        format!("{}-crop", sample.subject_id),
        crop_vol(&sample.moving)?,
        crop_vol(&sample.fixed)?,
        crop_mask(&sample.moving_mask)?,
        crop_mask(&sample.fixed_mask)?,
        sample.moving_landmarks.clone(),
        sample.fixed_landmarks.clone(),
    )
}
