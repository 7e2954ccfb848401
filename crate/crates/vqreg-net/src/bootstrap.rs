//! Collaborative-dictionary initialization pipeline: train the segmentation
//! network, harvest bottleneck feature vectors over the training set, run
//! K-means, and emit an initialized collaborative codebook.
//!
//! The segmentation network is used here and only here; registration
//! inference never touches it.

use rand::seq::SliceRandom;
use vqreg_core::losses::DICE_EPS;
use vqreg_core::rng::{derive, rng};
use vqreg_core::volume::{MaskVolume, Volume3D};
use vqreg_nn::graph::{Graph, NodeId};
use vqreg_nn::{Adam, Gemm};
use vqreg_vq::{kmeans, subsample_rows, Codebook, CodebookInit, CodebookName, VqError};

use crate::error::NetError;
use crate::segnet::{SegConfig, SegModel};

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub seg_epochs: usize,
    pub seg_lr: f64,
    pub batch_size: usize,
    /// Harvested feature vectors are capped at this count (fixed-seed
    /// uniform subsample).
    pub feature_cap: usize,
    pub k_c: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { seg_epochs: 100, seg_lr: 1e-3, batch_size: 2, feature_cap: 100_000, k_c: 32, seed: 0 }
    }
}

/// Train the segmentation network with a soft-Dice objective.
pub fn train_segmentation<T: Gemm>(
    images: &[(&Volume3D, &MaskVolume)],
    seg_config: SegConfig,
    cfg: &BootstrapConfig,
) -> Result<SegModel<T>, NetError> {
    if images.is_empty() {
        return Err(NetError::InvalidConfig("segmentation training needs at least one image".into()));
    }
    let mut model = SegModel::<T>::new(seg_config, cfg.seed)?;
    let mut opt = Adam::new(cfg.seg_lr, &model.params);
    let n = images.len();
    for epoch in 0..cfg.seg_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(derive(cfg.seed, 1000 + epoch as u64)));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut batch_grads: Option<Vec<Vec<T>>> = None;
            for &i in chunk {
                let (img, mask) = images[i];
                let mut g = Graph::new();
                let leaves = model.params.leaf_all(&mut g);
                let loss = seg_dice_loss(&model, &mut g, &leaves, img, mask);
                g.backward(loss);
                let grads = model.params.collect_grads(&g, &leaves);
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(grads) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            if let Some(mut grads) = batch_grads {
                let inv = T::from_f64(1.0 / chunk.len() as f64);
                for gvec in &mut grads {
                    for v in gvec.iter_mut() {
                        *v *= inv;
                    }
                }
                opt.step(&mut model.params, &grads);
            }
        }
    }
    Ok(model)
}

/// Soft Dice loss node for one image/mask pair.
pub fn seg_dice_loss<T: Gemm>(
    model: &SegModel<T>,
    g: &mut Graph<T>,
    leaves: &[NodeId],
    image: &Volume3D,
    mask: &MaskVolume,
) -> NodeId {
    let img: Vec<T> = image.data().iter().map(|&v| T::from_f64(v)).collect();
    let out = model.forward(g, leaves, &img);
    let dims = model.config.input_dims;
    let mask_data: Vec<T> = mask.data().iter().map(|&v| T::from_f64(v)).collect();
    let mask_leaf = g.leaf(
        mask_data,
        vqreg_nn::graph::Shape::Map { channels: 1, dims },
        false,
    );
    let inter = g.dot(out.soft_mask, mask_leaf);
    let sp = g.sum_all(out.soft_mask);
    let sm = g.sum_all(mask_leaf);
    let eps = T::from_f64(DICE_EPS);
    let num = g.affine(&[(inter, T::from_f64(2.0))], eps);
    let den = g.affine(&[(sp, T::ONE), (sm, T::ONE)], eps);
    let frac = g.div(num, den);
    g.scale(frac, T::from_f64(-1.0))
}

/// Concatenate every spatial position's bottleneck vector across all images,
/// subsampled to at most `cap` with a fixed seed. Returns `(rows, n, c)`.
pub fn harvest_features<T: Gemm>(
    seg: &SegModel<T>,
    images: &[&Volume3D],
    cap: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize, usize), NetError> {
    if images.is_empty() {
        return Err(NetError::InvalidConfig("harvest needs at least one image".into()));
    }
    let c = seg.config.bottleneck_channels;
    let mut rows: Vec<f64> = Vec::new();
    for img in images {
        let (_, features) = seg.predict(img)?;
        rows.extend_from_slice(features.data());
    }
    let n = rows.len() / c;
    let capped = subsample_rows(&rows, n, c, cap, seed);
    let n_out = capped.len() / c;
    Ok((capped, n_out, c))
}

/// K-means over harvested features; the centers become the collaborative
/// dictionary.
pub fn init_collaborative(
    features: &[f64],
    n: usize,
    c: usize,
    k_c: usize,
    seed: u64,
) -> Result<Codebook, VqError> {
    let result = kmeans(features, n, c, k_c, seed, 100)?;
    Codebook::new(CodebookName::Collaborative, CodebookInit::Kmeans, k_c, c, result.centers)
}

/// Mean squared quantization error of feature rows against a codebook.
pub fn quantization_error(features: &[f64], n: usize, c: usize, cb: &Codebook) -> f64 {
    assert_eq!(c, cb.c(), "feature dimension vs codebook dimension");
    let mut total = 0.0;
    for i in 0..n {
        let (_, d2) = vqreg_vq::nearest_code(&features[i * c..(i + 1) * c], cb.codes(), cb.k());
        total += d2;
    }
    total / n as f64
}
