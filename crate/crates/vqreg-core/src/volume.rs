//! Volumetric data types: scalar volumes, masks, landmark sets, dense
//! displacement fields and registration samples.
//!
//! All grids use an x-fastest raster order: the flat index of voxel
//! `(x, y, z)` is `x + nx * (y + ny * z)`. Physical coordinates are
//! `origin + index * spacing` in millimetres. All types are immutable after
//! construction and safe to share across threads.

use crate::error::CoreError;

/// Element precision used when a grid is written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(CoreError::MalformedHeader(format!(
                "unsupported dtype `{other}`"
            ))),
        }
    }
}

/// A 3D scalar grid with voxel spacing and origin in millimetres.
///
/// Carrier of images and per-channel feature planes. Data is stored as `f64`
/// in memory regardless of the on-disk precision recorded in `dtype`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: Dtype,
    data: Vec<f64>,
}

fn check_grid(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<(), CoreError> {
    if dims.iter().any(|&d| d < 1) {
        return Err(CoreError::InvalidVolume(format!(
            "all dimensions must be >= 1, got {dims:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(CoreError::InvalidVolume(format!(
            "spacing components must be > 0, got {spacing:?}"
        )));
    }
    let n = dims[0] * dims[1] * dims[2];
    if len != n {
        return Err(CoreError::InvalidVolume(format!(
            "data length {len} does not match dims {dims:?} ({n} voxels)"
        )));
    }
    Ok(())
}

impl Volume3D {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f64>,
    ) -> Result<Self, CoreError> {
        check_grid(dims, spacing, data.len())?;
        Ok(Self { dims, spacing, origin, dtype: Dtype::F32, data })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self {
            dims,
            spacing,
            origin: [0.0; 3],
            dtype: Dtype::F32,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }
    #[inline]
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }
    #[inline]
    pub fn dtype(&self) -> Dtype {
        self.dtype
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    #[inline]
    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Min-max rescale of intensities to `[0, 1]`. Constant volumes map to 0.
    pub fn normalize_intensity(&mut self) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if range > 0.0 {
            for v in &mut self.data {
                *v = (*v - lo) / range;
            }
        } else {
            for v in &mut self.data {
                *v = 0.0;
            }
        }
    }

    /// Physical extent along each axis: position of the last voxel centre.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.origin[0] + (self.dims[0] - 1) as f64 * self.spacing[0],
            self.origin[1] + (self.dims[1] - 1) as f64 * self.spacing[1],
            self.origin[2] + (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }
}

/// Whether mask voxels are restricted to `{0, 1}` or may take any value in
/// `[0, 1]` (e.g. after trilinear warping).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Binary,
    Soft,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Binary => "binary",
            MaskKind::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s {
            "binary" => Ok(MaskKind::Binary),
            "soft" => Ok(MaskKind::Soft),
            other => Err(CoreError::MalformedHeader(format!(
                "unsupported mask kind `{other}`"
            ))),
        }
    }
}

/// Segmentation mask on the same grid convention as [`Volume3D`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: Dtype,
    kind: MaskKind,
    data: Vec<f64>,
}

impl MaskVolume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: MaskKind,
        data: Vec<f64>,
    ) -> Result<Self, CoreError> {
        check_grid(dims, spacing, data.len())?;
        for &v in &data {
            match kind {
                MaskKind::Binary => {
                    if v != 0.0 && v != 1.0 {
                        return Err(CoreError::InvalidVolume(format!(
                            "binary mask contains value {v}"
                        )));
                    }
                }
                MaskKind::Soft => {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(CoreError::InvalidVolume(format!(
                            "soft mask contains value {v} outside [0, 1]"
                        )));
                    }
                }
            }
        }
        Ok(Self { dims, spacing, origin, dtype: Dtype::F32, kind, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }
    #[inline]
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }
    #[inline]
    pub fn dtype(&self) -> Dtype {
        self.dtype
    }
    #[inline]
    pub fn kind(&self) -> MaskKind {
        self.kind
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Hard-threshold a soft mask at 0.5, producing a binary mask.
    pub fn threshold(&self) -> MaskVolume {
        let data = self.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        MaskVolume {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            dtype: self.dtype,
            kind: MaskKind::Binary,
            data,
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn same_grid_as(&self, other: &MaskVolume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    pub fn view_as_volume(&self) -> Volume3D {
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            dtype: self.dtype,
            data: self.data.clone(),
        }
    }
}

/// Labelled points in physical (mm) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    labels: Vec<String>,
    points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(labels: Vec<String>, points: Vec<[f64; 3]>) -> Result<Self, CoreError> {
        if labels.len() != points.len() {
            return Err(CoreError::InvalidLandmarks(format!(
                "{} labels vs {} points",
                labels.len(),
                points.len()
            )));
        }
        Ok(Self { labels, points })
    }

    pub fn empty() -> Self {
        Self { labels: Vec::new(), points: Vec::new() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    #[inline]
    pub fn labels(&self) -> &[String] {
        &self.labels
    }
    #[inline]
    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// True when both sets have the same length and matching labels in order.
    pub fn corresponds_to(&self, other: &LandmarkSet) -> bool {
        self.labels == other.labels
    }
}

/// A moving/fixed image pair with gland masks and corresponding landmarks.
#[derive(Debug, Clone)]
pub struct RegistrationSample {
    pub subject_id: String,
    pub moving: Volume3D,
    pub fixed: Volume3D,
    pub moving_mask: MaskVolume,
    pub fixed_mask: MaskVolume,
    pub moving_landmarks: LandmarkSet,
    pub fixed_landmarks: LandmarkSet,
}

impl RegistrationSample {
    pub fn new(
        subject_id: String,
        moving: Volume3D,
        fixed: Volume3D,
        moving_mask: MaskVolume,
        fixed_mask: MaskVolume,
        moving_landmarks: LandmarkSet,
        fixed_landmarks: LandmarkSet,
    ) -> Result<Self, CoreError> {
        if !moving.same_grid(&fixed) {
            return Err(CoreError::DimMismatch(
                "moving and fixed volumes must share dims/spacing/origin".into(),
            ));
        }
        for (name, dims, spacing) in [
            ("moving_mask", moving_mask.dims(), moving_mask.spacing()),
            ("fixed_mask", fixed_mask.dims(), fixed_mask.spacing()),
        ] {
            if dims != moving.dims() || spacing != moving.spacing() {
                return Err(CoreError::DimMismatch(format!(
                    "{name} grid does not match the image grid"
                )));
            }
        }
        if !moving_landmarks.corresponds_to(&fixed_landmarks) {
            return Err(CoreError::InvalidLandmarks(
                "moving/fixed landmark labels do not correspond".into(),
            ));
        }
        Ok(Self {
            subject_id,
            moving,
            fixed,
            moving_mask,
            fixed_mask,
            moving_landmarks,
            fixed_landmarks,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.moving.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.moving.spacing()
    }
}

/// Dense per-voxel displacement field on the fixed grid, in voxel units.
///
/// Channel-major storage: plane `c` (c = 0, 1, 2 for x, y, z components)
/// occupies `data[c * n .. (c + 1) * n]` in the x-fastest raster order.
/// `u` maps fixed-grid coordinates to sampling locations in the moving
/// image: the warped moving image at voxel `p` samples the moving image at
/// `p + u(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self, CoreError> {
        let n = dims[0] * dims[1] * dims[2];
        if dims.iter().any(|&d| d < 1) {
            return Err(CoreError::InvalidVolume(format!(
                "all dimensions must be >= 1, got {dims:?}"
            )));
        }
        if data.len() != 3 * n {
            return Err(CoreError::InvalidVolume(format!(
                "ddf data length {} does not match 3 x {n}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::InvalidVolume("spacing components must be > 0".into()));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self { dims, spacing, data: vec![0.0; 3 * dims[0] * dims[1] * dims[2]] }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    #[inline]
    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.num_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Displacement vector (voxel units) at a grid point.
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let n = self.num_voxels();
        let i = self.index(x, y, z);
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, u: [f64; 3]) {
        let n = self.num_voxels();
        let i = self.index(x, y, z);
        self.data[i] = u[0];
        self.data[n + i] = u[1];
        self.data[2 * n + i] = u[2];
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Trilinear interpolation of the field at a continuous voxel
    /// coordinate, with clamp-to-edge boundary handling.
    pub fn sample(&self, pos: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        let n = self.num_voxels();
        for c in 0..3 {
            out[c] = crate::transform::trilinear_sample_plane(
                &self.data[c * n..(c + 1) * n],
                self.dims,
                pos,
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_bad_dims() {
        assert!(Volume3D::new([0, 4, 4], [1.0; 3], [0.0; 3], vec![]).is_err());
        assert!(Volume3D::new([2, 2, 2], [1.0, -1.0, 1.0], [0.0; 3], vec![0.0; 8]).is_err());
        assert!(Volume3D::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0.0; 7]).is_err());
    }

    #[test]
    fn raster_order_is_x_fastest() {
        let mut v = Volume3D::zeros([3, 4, 5], [1.0; 3]);
        v.set(1, 0, 0, 7.0);
        assert_eq!(v.data()[1], 7.0);
        v.set(0, 1, 0, 8.0);
        assert_eq!(v.data()[3], 8.0);
        v.set(0, 0, 1, 9.0);
        assert_eq!(v.data()[12], 9.0);
    }

    #[test]
    fn binary_mask_rejects_fractional_values() {
        let err = MaskVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], MaskKind::Binary, vec![0.5; 8]);
        assert!(err.is_err());
        assert!(
            MaskVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], MaskKind::Soft, vec![0.5; 8]).is_ok()
        );
    }

    #[test]
    fn mask_threshold_is_binary() {
        let m = MaskVolume::new(
            [2, 1, 1],
            [1.0; 3],
            [0.0; 3],
            MaskKind::Soft,
            vec![0.49, 0.5],
        )
        .unwrap();
        let t = m.threshold();
        assert_eq!(t.kind(), MaskKind::Binary);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn landmark_lengths_must_match() {
        assert!(LandmarkSet::new(vec!["a".into()], vec![]).is_err());
        let set = LandmarkSet::new(vec!["a".into()], vec![[1.0, 2.0, 3.0]]).unwrap();
        assert!(set.corresponds_to(&set.clone()));
    }

    #[test]
    fn ddf_component_layout() {
        let mut u = DisplacementField::zeros([2, 2, 2], [1.0; 3]);
        u.set(1, 1, 1, [1.0, 2.0, 3.0]);
        assert_eq!(u.at(1, 1, 1), [1.0, 2.0, 3.0]);
        assert_eq!(u.component(1)[7], 2.0);
    }
}
