//! The registration network.
//!
//! Moving and fixed images are channel-concatenated and passed through a
//! stack of residual blocks (stage 0 at full resolution, each later stage
//! halving the grid). The deepest output feeds two parallel convolutional
//! heads whose outputs are quantized against the collaborative and vanilla
//! dictionaries and concatenated into the decoder input. The penultimate
//! stage output is quantized against the hierarchical dictionary and merged
//! with the (upsampled, projected) deepest output to form the inner skip
//! connection. The decoder mirrors the encoder with nearest-neighbour
//! upsampling and convolutions; its final 3-channel layer is zero-initialized
//! so training starts from the identity transform. Disabled quantizers are
//! identity pass-throughs contributing zero loss.

use rand_chacha::ChaCha12Rng;
use vqreg_core::rng::rng;
use vqreg_core::volume::{DisplacementField, RegistrationSample, Volume3D};
use vqreg_core::Scalar;
use vqreg_nn::graph::{FrozenVq, Graph, NodeId, Shape};
use vqreg_nn::init::{he_normal, ones, zeros};
use vqreg_nn::{Gemm, ParamStore};
use vqreg_vq::{Codebook, CodebookInit, CodebookName};

use crate::config::{NetworkConfig, QuantizerKind};
use crate::error::NetError;

/// Captured quantizer assignments from one forward pass; replayed to build
/// the smooth straight-through surrogate for finite-difference checks.
#[derive(Debug, Clone)]
pub struct RegFrozen<T> {
    pub vanilla: Option<FrozenVq<T>>,
    pub hierarchical: Option<FrozenVq<T>>,
    pub collaborative: Option<FrozenVq<T>>,
}

impl<T> Default for RegFrozen<T> {
    fn default() -> Self {
        Self { vanilla: None, hierarchical: None, collaborative: None }
    }
}

pub struct RegForward<T> {
    pub ddf: NodeId,
    /// Quantization loss nodes in (vanilla, hierarchical, collaborative)
    /// order; `None` for disabled quantizers.
    pub quant_losses: [Option<NodeId>; 3],
    pub frozen: RegFrozen<T>,
}

pub struct RegModel<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    collaborative_init: CodebookInit,
}

impl<T: Gemm> RegModel<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut r = rng(seed);
        let mut params = ParamStore::new();
        let ch = &config.stage_channels;
        let n = ch.len();
        let k = 3usize;

        let conv = |params: &mut ParamStore<T>,
                    r: &mut ChaCha12Rng,
                        name: &str,
                        co: usize,
                        ci: usize,
                        ksz: usize,
                        zero: bool| {
            let len = co * ci * ksz * ksz * ksz;
            let w = if zero { zeros(len) } else { he_normal(r, len, ci * ksz * ksz * ksz) };
            params.register(format!("{name}.w"), Shape::Tensor(vec![co, ci, ksz, ksz, ksz]), w);
            params.register(format!("{name}.b"), Shape::Tensor(vec![co]), zeros(co));
        };
        let inorm = |params: &mut ParamStore<T>, name: &str, c: usize| {
            params.register(format!("{name}.gamma"), Shape::Tensor(vec![c]), ones(c));
            params.register(format!("{name}.beta"), Shape::Tensor(vec![c]), zeros(c));
        };

        for s in 0..n {
            let ci = if s == 0 { 2 } else { ch[s - 1] };
            let co = ch[s];
            for j in 0..config.convs_per_block {
                let in_j = if j == 0 { ci } else { co };
                conv(&mut params, &mut r, &format!("enc{s}.conv{j}"), co, in_j, k, false);
                inorm(&mut params, &format!("enc{s}.in{j}"), co);
            }
            conv(&mut params, &mut r, &format!("enc{s}.skip"), co, ci, 1, false);
        }
        conv(&mut params, &mut r, "head_c", config.dict_channels.collaborative, ch[n - 1], k, false);
        conv(&mut params, &mut r, "head_v", config.dict_channels.vanilla, ch[n - 1], k, false);
        conv(&mut params, &mut r, "hier_proj", config.dict_channels.hierarchical, ch[n - 1], 1, false);

        let bottleneck_ch = config.dict_channels.vanilla + config.dict_channels.collaborative;
        for level in (1..n).rev() {
            let in_ch = if level == n - 1 {
                bottleneck_ch + config.dict_channels.hierarchical
            } else {
                ch[level] + ch[level - 1]
            };
            let out = ch[level - 1];
            conv(&mut params, &mut r, &format!("dec{level}.conv0"), out, in_ch, k, false);
            inorm(&mut params, &format!("dec{level}.in0"), out);
        }
        // zero init: the network starts at the identity transform
        conv(&mut params, &mut r, "ddf_head", 3, ch[0], k, true);

        let uniform_codes = |r: &mut ChaCha12Rng, k_: usize, c_: usize| -> Vec<T> {
            use rand::Rng;
            let bound = 1.0 / k_ as f64;
            (0..k_ * c_).map(|_| T::from_f64(r.gen_range(-bound..bound))).collect()
        };
        if config.enabled.vanilla {
            let data = uniform_codes(&mut r, config.dict_sizes.vanilla, config.dict_channels.vanilla);
            params.register(
                "codebook.vanilla",
                Shape::Tensor(vec![config.dict_sizes.vanilla, config.dict_channels.vanilla]),
                data,
            );
        }
        if config.enabled.hierarchical {
            let data =
                uniform_codes(&mut r, config.dict_sizes.hierarchical, config.dict_channels.hierarchical);
            params.register(
                "codebook.hierarchical",
                Shape::Tensor(vec![config.dict_sizes.hierarchical, config.dict_channels.hierarchical]),
                data,
            );
        }
        if config.enabled.collaborative {
            let data = uniform_codes(
                &mut r,
                config.dict_sizes.collaborative,
                config.dict_channels.collaborative,
            );
            params.register(
                "codebook.collaborative",
                Shape::Tensor(vec![config.dict_sizes.collaborative, config.dict_channels.collaborative]),
                data,
            );
        }

        Ok(Self { config, params, collaborative_init: CodebookInit::Random })
    }

    pub fn collaborative_init(&self) -> CodebookInit {
        self.collaborative_init
    }

    pub(crate) fn set_collaborative_init_tag(&mut self, init: CodebookInit) {
        self.collaborative_init = init;
    }

    /// Install a bootstrapped collaborative dictionary (e.g. K-means over
    /// segmentation features).
    pub fn set_collaborative_codebook(&mut self, cb: &Codebook) -> Result<(), NetError> {
        if !self.config.enabled.collaborative {
            return Err(NetError::InvalidConfig(
                "collaborative quantizer is disabled in this config".into(),
            ));
        }
        if cb.k() != self.config.dict_sizes.collaborative
            || cb.c() != self.config.dict_channels.collaborative
        {
            return Err(NetError::ConfigMismatch(format!(
                "codebook is {}x{}, config expects {}x{}",
                cb.k(),
                cb.c(),
                self.config.dict_sizes.collaborative,
                self.config.dict_channels.collaborative
            )));
        }
        let id = self.params.by_name("codebook.collaborative").expect("registered");
        let dst = self.params.data_mut(id);
        for (d, &v) in dst.iter_mut().zip(cb.codes()) {
            *d = T::from_f64(v);
        }
        self.collaborative_init = cb.init_kind();
        Ok(())
    }

    /// Export a codebook (current values) for serialization or analysis.
    pub fn codebook(&self, kind: QuantizerKind) -> Option<Codebook> {
        let (name, pname, k, c, init) = match kind {
            QuantizerKind::Vanilla => (
                CodebookName::Vanilla,
                "codebook.vanilla",
                self.config.dict_sizes.vanilla,
                self.config.dict_channels.vanilla,
                CodebookInit::Random,
            ),
            QuantizerKind::Hierarchical => (
                CodebookName::Hierarchical,
                "codebook.hierarchical",
                self.config.dict_sizes.hierarchical,
                self.config.dict_channels.hierarchical,
                CodebookInit::Random,
            ),
            QuantizerKind::Collaborative => (
                CodebookName::Collaborative,
                "codebook.collaborative",
                self.config.dict_sizes.collaborative,
                self.config.dict_channels.collaborative,
                self.collaborative_init,
            ),
        };
        let id = self.params.by_name(pname)?;
        let codes: Vec<f64> = self.params.data(id).iter().map(|v| v.to_f64()).collect();
        Some(Codebook::new(name, init, k, c, codes).expect("stored codebook is valid"))
    }

    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    /// Parameter count excluding dictionaries (identical across quantizer
    /// subsets of one base architecture).
    pub fn backbone_param_count(&self) -> usize {
        self.params
            .entries()
            .iter()
            .filter(|e| !e.name.starts_with("codebook."))
            .map(|e| e.data.len())
            .sum()
    }

    fn pid(&self, name: &str) -> usize {
        self.params.by_name(name).unwrap_or_else(|| panic!("missing param `{name}`")).0
    }

    fn res_block(
        &self,
        g: &mut Graph<T>,
        leaves: &[NodeId],
        stage: usize,
        x: NodeId,
        stride: usize,
    ) -> NodeId {
        let mut h = x;
        for j in 0..self.config.convs_per_block {
            let s = if j == 0 { stride } else { 1 };
            let w = leaves[self.pid(&format!("enc{stage}.conv{j}.w"))];
            let b = leaves[self.pid(&format!("enc{stage}.conv{j}.b"))];
            h = g.conv3d(h, w, Some(b), s, 1);
            let gamma = leaves[self.pid(&format!("enc{stage}.in{j}.gamma"))];
            let beta = leaves[self.pid(&format!("enc{stage}.in{j}.beta"))];
            h = g.instance_norm(h, gamma, beta);
            if j + 1 < self.config.convs_per_block {
                h = g.relu(h);
            }
        }
        let sw = leaves[self.pid(&format!("enc{stage}.skip.w"))];
        let sb = leaves[self.pid(&format!("enc{stage}.skip.b"))];
        let skip = g.conv3d(x, sw, Some(sb), stride, 0);
        let sum = g.add(h, skip);
        g.relu(sum)
    }

    fn quantize_path(
        &self,
        g: &mut Graph<T>,
        leaves: &[NodeId],
        enabled: bool,
        codebook_param: &str,
        x: NodeId,
        beta: T,
        frozen: Option<&FrozenVq<T>>,
    ) -> (NodeId, Option<NodeId>, Option<FrozenVq<T>>) {
        if !enabled {
            return (x, None, None);
        }
        let codes = leaves[self.pid(codebook_param)];
        let out = g.vq_quantizer(x, codes, beta, frozen);
        (out.z, Some(out.loss), Some(out.frozen))
    }

    /// Build the forward graph for one (moving, fixed) pair given as planes
    /// at the nominal input dims. Inputs are edge-padded to the internal
    /// grid; the emitted field is cropped back.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        leaves: &[NodeId],
        moving: &[T],
        fixed: &[T],
        beta: T,
        frozen: Option<&RegFrozen<T>>,
    ) -> RegForward<T> {
        let dims = self.config.input_dims;
        let padded = self.config.padded_dims();
        let n_nominal: usize = dims.iter().product();
        assert_eq!(moving.len(), n_nominal, "moving input length");
        assert_eq!(fixed.len(), n_nominal, "fixed input length");

        let mov = pad_replicate(moving, dims, padded);
        let fix = pad_replicate(fixed, dims, padded);
        let mov_leaf = g.leaf(mov, Shape::Map { channels: 1, dims: padded }, false);
        let fix_leaf = g.leaf(fix, Shape::Map { channels: 1, dims: padded }, false);
        let x = g.concat_c(mov_leaf, fix_leaf);

        let n_stages = self.config.n_stages();
        let mut encoder_outs = Vec::with_capacity(n_stages);
        let mut h = x;
        for s in 0..n_stages {
            let stride = if s == 0 { 1 } else { 2 };
            h = self.res_block(g, leaves, s, h, stride);
            encoder_outs.push(h);
        }
        let deepest = encoder_outs[n_stages - 1];

        // bottleneck heads -> collaborative + vanilla quantizers
        let hw = leaves[self.pid("head_c.w")];
        let hb = leaves[self.pid("head_c.b")];
        let head_c = g.conv3d(deepest, hw, Some(hb), 1, 1);
        let vw = leaves[self.pid("head_v.w")];
        let vb = leaves[self.pid("head_v.b")];
        let head_v = g.conv3d(deepest, vw, Some(vb), 1, 1);

        let empty = RegFrozen::default();
        let fz = frozen.unwrap_or(&empty);
        let (zc, loss_c, frozen_c) = self.quantize_path(
            g,
            leaves,
            self.config.enabled.collaborative,
            "codebook.collaborative",
            head_c,
            beta,
            fz.collaborative.as_ref(),
        );
        let (zv, loss_v, frozen_v) = self.quantize_path(
            g,
            leaves,
            self.config.enabled.vanilla,
            "codebook.vanilla",
            head_v,
            beta,
            fz.vanilla.as_ref(),
        );
        let bottleneck = g.concat_c(zc, zv);

        // hierarchical path: quantized penultimate features plus the
        // upsampled, projected deepest features
        let penult = encoder_outs[n_stages - 2];
        let (zh, loss_h, frozen_h) = self.quantize_path(
            g,
            leaves,
            self.config.enabled.hierarchical,
            "codebook.hierarchical",
            penult,
            beta,
            fz.hierarchical.as_ref(),
        );
        let up4 = g.up_trilinear2(deepest);
        let pw = leaves[self.pid("hier_proj.w")];
        let pb = leaves[self.pid("hier_proj.b")];
        let proj = g.conv3d(up4, pw, Some(pb), 1, 0);
        let hier_merge = g.add(zh, proj);

        // decoder
        let mut d = bottleneck;
        for level in (1..n_stages).rev() {
            let up = g.up_nearest2(d);
            let skip = if level == n_stages - 1 { hier_merge } else { encoder_outs[level - 1] };
            let cat = g.concat_c(up, skip);
            let w0 = leaves[self.pid(&format!("dec{level}.conv0.w"))];
            let b0 = leaves[self.pid(&format!("dec{level}.conv0.b"))];
            let mut dh = g.conv3d(cat, w0, Some(b0), 1, 1);
            let g0 = leaves[self.pid(&format!("dec{level}.in0.gamma"))];
            let be0 = leaves[self.pid(&format!("dec{level}.in0.beta"))];
            dh = g.instance_norm(dh, g0, be0);
            d = g.relu(dh);
        }
        let dw = leaves[self.pid("ddf_head.w")];
        let db = leaves[self.pid("ddf_head.b")];
        let ddf_padded = g.conv3d(d, dw, Some(db), 1, 1);
        let ddf = g.crop_map(ddf_padded, dims);

        RegForward {
            ddf,
            quant_losses: [loss_v, loss_h, loss_c],
            frozen: RegFrozen {
                vanilla: frozen_v,
                hierarchical: frozen_h,
                collaborative: frozen_c,
            },
        }
    }

    /// Inference: predict the displacement field and per-quantizer losses
    /// for a sample (read-only, no gradients).
    pub fn predict(
        &self,
        sample: &RegistrationSample,
    ) -> Result<(DisplacementField, [Option<f64>; 3]), NetError> {
        self.predict_pair(&sample.moving, &sample.fixed)
    }

    pub fn predict_pair(
        &self,
        moving: &Volume3D,
        fixed: &Volume3D,
    ) -> Result<(DisplacementField, [Option<f64>; 3]), NetError> {
        let dims = self.config.input_dims;
        if moving.dims() != dims || fixed.dims() != dims {
            return Err(NetError::DimMismatch(format!(
                "sample dims {:?}/{:?} vs model input dims {:?}",
                moving.dims(),
                fixed.dims(),
                dims
            )));
        }
        let mov: Vec<T> = moving.data().iter().map(|&v| T::from_f64(v)).collect();
        let fix: Vec<T> = fixed.data().iter().map(|&v| T::from_f64(v)).collect();
        let mut g = Graph::new();
        // read-only pass: leaves do not track gradients
        let leaves: Vec<NodeId> = self
            .params
            .entries()
            .iter()
            .map(|e| g.leaf(e.data.clone(), e.shape.clone(), false))
            .collect();
        let out = self.forward(
            &mut g,
            &leaves,
            &mov,
            &fix,
            T::from_f64(vqreg_vq::COMMITMENT_BETA),
            None,
        );
        let ddf_data: Vec<f64> = g.value(out.ddf).iter().map(|v| v.to_f64()).collect();
        let ddf = DisplacementField::new(dims, moving.spacing(), ddf_data)?;
        let losses = out.quant_losses.map(|l| l.map(|id| g.value(id)[0].to_f64()));
        Ok((ddf, losses))
    }

    /// Per-row usage counts of one quantizer's codebook over a set of
    /// samples (dead-code diagnostics).
    pub fn code_usage(
        &self,
        kind: QuantizerKind,
        samples: &[&RegistrationSample],
    ) -> Result<Vec<u64>, NetError> {
        let (enabled, k) = match kind {
            QuantizerKind::Vanilla => (self.config.enabled.vanilla, self.config.dict_sizes.vanilla),
            QuantizerKind::Hierarchical => {
                (self.config.enabled.hierarchical, self.config.dict_sizes.hierarchical)
            }
            QuantizerKind::Collaborative => {
                (self.config.enabled.collaborative, self.config.dict_sizes.collaborative)
            }
        };
        if !enabled {
            return Err(NetError::InvalidConfig(format!("{kind:?} quantizer is disabled")));
        }
        let mut counts = vec![0u64; k];
        for sample in samples {
            let dims = self.config.input_dims;
            let mov: Vec<T> = sample.moving.data().iter().map(|&v| T::from_f64(v)).collect();
            let fix: Vec<T> = sample.fixed.data().iter().map(|&v| T::from_f64(v)).collect();
            if sample.moving.dims() != dims {
                return Err(NetError::DimMismatch("sample dims vs model input dims".into()));
            }
            let mut g = Graph::new();
            let leaves: Vec<NodeId> = self
                .params
                .entries()
                .iter()
                .map(|e| g.leaf(e.data.clone(), e.shape.clone(), false))
                .collect();
            let out = self.forward(
                &mut g,
                &leaves,
                &mov,
                &fix,
                T::from_f64(vqreg_vq::COMMITMENT_BETA),
                None,
            );
            let frozen = match kind {
                QuantizerKind::Vanilla => out.frozen.vanilla,
                QuantizerKind::Hierarchical => out.frozen.hierarchical,
                QuantizerKind::Collaborative => out.frozen.collaborative,
            };
            if let Some(fz) = frozen {
                for &idx in &fz.indices {
                    counts[idx as usize] += 1;
                }
            }
        }
        Ok(counts)
    }
}

/// Edge-replication padding from `in_dims` to `out_dims` (growth at the far
/// end of each axis only).
pub fn pad_replicate<T: Scalar>(data: &[T], in_dims: [usize; 3], out_dims: [usize; 3]) -> Vec<T> {
    if in_dims == out_dims {
        return data.to_vec();
    }
    let mut out = vec![T::ZERO; out_dims.iter().product()];
    let mut p = 0usize;
    for z in 0..out_dims[2] {
        let sz = z.min(in_dims[2] - 1);
        for y in 0..out_dims[1] {
            let sy = y.min(in_dims[1] - 1);
            let row = in_dims[0] * (sy + in_dims[1] * sz);
            for x in 0..out_dims[0] {
                let sx = x.min(in_dims[0] - 1);
                out[p] = data[row + sx];
                p += 1;
            }
        }
    }
    out
}

/// Convert a volume's data into network scalars.
pub fn volume_planes<T: Scalar>(v: &Volume3D) -> Vec<T> {
    v.data().iter().map(|&x| T::from_f64(x)).collect()
}
