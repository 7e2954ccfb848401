//! The nearest-code quantization operator and its loss.
//!
//! Value semantics here are plain functions; the gradient contract (codebook
//! updated through the first loss term only, encoder through the commitment
//! term and the straight-through path) is realized by the autodiff ops in
//! the network crate, which call the same `nearest_code` kernel.

use vqreg_core::Scalar;

use crate::codebook::Codebook;
use crate::error::VqError;

/// Commitment coefficient used when an operator reports its own loss.
pub const COMMITMENT_BETA: f64 = 0.25;

/// A spatial grid of feature vectors: dims (x, y, z) positions, each holding
/// a contiguous C-vector (`data[p * channels + c]`, positions in x-fastest
/// raster order).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self, VqError> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n * channels {
            return Err(VqError::ShapeMismatch(format!(
                "feature data length {} does not match {n} positions x {channels} channels",
                data.len()
            )));
        }
        Ok(Self { dims, channels, data })
    }

    /// Build from channel-major planes (`planes[c * n + p]`), the layout the
    /// network uses internally.
    pub fn from_channel_major(
        dims: [usize; 3],
        channels: usize,
        planes: &[f64],
    ) -> Result<Self, VqError> {
        let n = dims[0] * dims[1] * dims[2];
        if planes.len() != n * channels {
            return Err(VqError::ShapeMismatch(format!(
                "plane data length {} does not match {n} x {channels}",
                planes.len()
            )));
        }
        let mut data = vec![0.0; n * channels];
        for c in 0..channels {
            for p in 0..n {
                data[p * channels + c] = planes[c * n + p];
            }
        }
        Ok(Self { dims, channels, data })
    }

    pub fn to_channel_major(&self) -> Vec<f64> {
        let n = self.positions();
        let mut planes = vec![0.0; n * self.channels];
        for p in 0..n {
            for c in 0..self.channels {
                planes[c * n + p] = self.data[p * self.channels + c];
            }
        }
        planes
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn positions(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The C-vector at raster position `p`.
    #[inline]
    pub fn vector(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Quantization output: the snapped map, per-position code indices
/// (0-based), and the operator loss at the reference commitment coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub quantized: FeatureMap,
    pub indices: Vec<usize>,
    pub loss: f64,
}

/// Nearest code row by squared Euclidean distance; ties break to the lowest
/// index. Returns `(index, squared_distance)`.
#[inline]
pub fn nearest_code<T: Scalar>(vector: &[T], codes: &[T], k: usize) -> (usize, T) {
    let c = vector.len();
    let mut best = 0usize;
    let mut best_d = T::from_f64(f64::INFINITY);
    for i in 0..k {
        let row = &codes[i * c..(i + 1) * c];
        let mut d = T::ZERO;
        for (a, b) in vector.iter().zip(row) {
            let diff = *a - *b;
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// Snap every position of `features` to its nearest code vector.
pub fn quantize(features: &FeatureMap, codebook: &Codebook) -> Result<QuantResult, VqError> {
    if features.channels() != codebook.c() {
        return Err(VqError::ChannelMismatch {
            features: features.channels(),
            codebook: codebook.c(),
        });
    }
    if !features.is_finite() {
        return Err(VqError::NonFinite("features"));
    }
    let n = features.positions();
    let c = features.channels();
    let mut indices = Vec::with_capacity(n);
    let mut data = vec![0.0; n * c];
    for p in 0..n {
        let (idx, _) = nearest_code(features.vector(p), codebook.codes(), codebook.k());
        indices.push(idx);
        data[p * c..(p + 1) * c].copy_from_slice(codebook.row(idx));
    }
    let quantized = FeatureMap::new(features.dims(), c, data)?;
    let loss = quant_loss(features, &quantized, COMMITMENT_BETA)?;
    Ok(QuantResult { quantized, indices, loss })
}

/// Quantization loss value, summed over positions:
/// `sum_p ||sg(f_p) - q_p||^2 + beta * ||f_p - sg(q_p)||^2`.
///
/// Both terms share the value `||f_p - q_p||^2`; the stop-gradients only
/// affect which parameters each term trains (the first reaches the codebook
/// only, the second the encoder only — enforced by the autodiff op).
pub fn quant_loss(
    features: &FeatureMap,
    quantized: &FeatureMap,
    beta: f64,
) -> Result<f64, VqError> {
    if features.dims() != quantized.dims() || features.channels() != quantized.channels() {
        return Err(VqError::ShapeMismatch(format!(
            "features {:?}x{} vs quantized {:?}x{}",
            features.dims(),
            features.channels(),
            quantized.dims(),
            quantized.channels()
        )));
    }
    let mut sq = 0.0;
    for (a, b) in features.data().iter().zip(quantized.data()) {
        let d = a - b;
        sq += d * d;
    }
    Ok((1.0 + beta) * sq)
}

/// The straight-through estimator's backward rule: the gradient arriving at
/// the quantizer output passes to the encoder features unchanged (identity
/// Jacobian), and none of it reaches the codebook.
pub fn straight_through_backward(upstream_grad_wrt_z: &[f64]) -> Vec<f64> {
    upstream_grad_wrt_z.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{CodebookInit, CodebookName};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn codebook_from_rows(rows: &[&[f64]]) -> Codebook {
        let k = rows.len();
        let c = rows[0].len();
        let codes: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::new(CodebookName::Vanilla, CodebookInit::Random, k, c, codes).unwrap()
    }

    #[test]
    fn exact_match_snaps_to_that_code() {
        let cb = codebook_from_rows(&[&[1.0, 1.0], &[2.0, 0.5], &[0.25, -1.0], &[3.0, 3.0]]);
        let fm = FeatureMap::new([1, 1, 1], 2, vec![0.25, -1.0]).unwrap();
        let out = quantize(&fm, &cb).unwrap();
        assert_eq!(out.indices, vec![2]);
        assert_eq!(out.quantized.vector(0), fm.vector(0));
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn equidistant_codes_break_ties_to_the_lowest_index() {
        let cb = codebook_from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let fm = FeatureMap::new([1, 1, 1], 2, vec![0.0, 0.0]).unwrap();
        let out = quantize(&fm, &cb).unwrap();
        // first row wins the tie (index 0 here; the first dictionary entry)
        assert_eq!(out.indices, vec![0]);
        assert_eq!(out.quantized.vector(0), &[1.0, 0.0]);
    }

    #[test]
    fn random_features_match_exhaustive_nearest_neighbor_scan() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let (dims, c, k) = ([4, 4, 4], 8usize, 16usize);
        let n = 64;
        let feats: Vec<f64> = (0..n * c).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let codes: Vec<f64> = (0..k * c).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let fm = FeatureMap::new(dims, c, feats.clone()).unwrap();
        let cb =
            Codebook::new(CodebookName::Vanilla, CodebookInit::Random, k, c, codes.clone())
                .unwrap();
        let out = quantize(&fm, &cb).unwrap();

        // brute-force oracle: independent per-voxel scan over all K codes
        for p in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for i in 0..k {
                let mut d = 0.0;
                for j in 0..c {
                    let diff = feats[p * c + j] - codes[i * c + j];
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(out.indices[p], best, "position {p}");
        }
    }

    #[test]
    fn quantize_is_idempotent_and_outputs_codebook_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (dims, c, k) = ([3, 2, 2], 4usize, 6usize);
        let n = 12;
        let feats: Vec<f64> = (0..n * c).map(|_| rng.gen::<f64>()).collect();
        let codes: Vec<f64> = (0..k * c).map(|_| rng.gen::<f64>()).collect();
        let fm = FeatureMap::new(dims, c, feats).unwrap();
        let cb = Codebook::new(CodebookName::Vanilla, CodebookInit::Random, k, c, codes).unwrap();
        let first = quantize(&fm, &cb).unwrap();
        let second = quantize(&first.quantized, &cb).unwrap();
        assert_eq!(first.indices, second.indices);
        assert_eq!(first.quantized, second.quantized);
        // membership: every output vector is bit-equal to a codebook row
        for p in 0..n {
            assert_eq!(first.quantized.vector(p), cb.row(first.indices[p]));
        }
    }

    #[test]
    fn channel_mismatch_and_nonfinite_are_rejected() {
        let cb = codebook_from_rows(&[&[0.0, 0.0, 0.0]]);
        let fm = FeatureMap::new([1, 1, 1], 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(quantize(&fm, &cb), Err(VqError::ChannelMismatch { .. })));
        let bad = FeatureMap::new([1, 1, 1], 3, vec![0.0, f64::NAN, 0.0]).unwrap();
        assert!(matches!(quantize(&bad, &cb), Err(VqError::NonFinite(_))));
    }

    #[test]
    fn quant_loss_hand_cases() {
        let f = FeatureMap::new([1, 1, 1], 2, vec![1.0, 0.0]).unwrap();
        let q = FeatureMap::new([1, 1, 1], 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(quant_loss(&f, &f, 0.25).unwrap(), 0.0);
        let loss = quant_loss(&f, &q, 0.25).unwrap();
        assert!((loss - 1.25).abs() < 1e-15);
    }

    #[test]
    fn quant_loss_matches_elementwise_reevaluation() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..100 {
            let dims = [2, 3, 2];
            let c = 5;
            let n = 12;
            let fa: Vec<f64> = (0..n * c).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let qa: Vec<f64> = (0..n * c).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let beta = rng.gen::<f64>();
            let f = FeatureMap::new(dims, c, fa.clone()).unwrap();
            let q = FeatureMap::new(dims, c, qa.clone()).unwrap();

            // independent scalar-loop oracle written as the two terms
            let mut oracle = 0.0;
            for p in 0..n {
                let mut codebook_term = 0.0;
                let mut commit_term = 0.0;
                for j in 0..c {
                    let d = fa[p * c + j] - qa[p * c + j];
                    codebook_term += d * d;
                    commit_term += d * d;
                }
                oracle += codebook_term + beta * commit_term;
            }
            let got = quant_loss(&f, &q, beta).unwrap();
            assert!((got - oracle).abs() < 1e-10, "got {got}, oracle {oracle}");
        }
    }

    #[test]
    fn quant_loss_shape_mismatch_errors() {
        let f = FeatureMap::new([1, 1, 1], 2, vec![1.0, 0.0]).unwrap();
        let q = FeatureMap::new([2, 1, 1], 2, vec![0.0; 4]).unwrap();
        assert!(quant_loss(&f, &q, 0.25).is_err());
    }

    #[test]
    fn straight_through_backward_is_identity() {
        let ones = vec![1.0; 12];
        assert_eq!(straight_through_backward(&ones), ones);
        let zeros = vec![0.0; 12];
        assert_eq!(straight_through_backward(&zeros), zeros);
        let mixed = vec![0.5, -2.0, 3.25];
        assert_eq!(straight_through_backward(&mixed), mixed);
    }

    #[test]
    fn channel_major_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let dims = [3, 2, 2];
        let c = 4;
        let planes: Vec<f64> = (0..12 * c).map(|_| rng.gen::<f64>()).collect();
        let fm = FeatureMap::from_channel_major(dims, c, &planes).unwrap();
        assert_eq!(fm.to_channel_major(), planes);
        // vector(p) gathers across planes
        assert_eq!(fm.vector(0)[1], planes[12]);
    }
}
