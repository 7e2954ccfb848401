//! Companion U-Net segmentation network. It exists only to provide
//! anatomical features for the collaborative-codebook bootstrap and is never
//! part of the registration inference path.

use rand_chacha::ChaCha12Rng;
use vqreg_core::rng::rng;
use vqreg_core::volume::{MaskKind, MaskVolume, Volume3D};
use vqreg_nn::graph::{Graph, NodeId, Shape};
use vqreg_nn::init::{he_normal, ones, zeros};
use vqreg_nn::{Gemm, ParamStore};
use vqreg_vq::FeatureMap;

use crate::error::NetError;
use crate::regnet::pad_replicate;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegConfig {
    /// Encoder channels before the bottleneck stage (stage 0 at full
    /// resolution, each later stage halving the grid).
    pub stage_channels: Vec<usize>,
    /// Bottleneck channel count; must equal the collaborative code dimension
    /// it seeds.
    pub bottleneck_channels: usize,
    pub input_dims: [usize; 3],
}

impl SegConfig {
    pub fn desk(input_dims: [usize; 3], bottleneck_channels: usize) -> Self {
        Self { stage_channels: vec![8, 16, 32], bottleneck_channels, input_dims }
    }

    /// Downsamplings between input and bottleneck.
    pub fn depth(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        let m = 1usize << self.depth();
        let mut out = [0usize; 3];
        for a in 0..3 {
            out[a] = self.input_dims[a].div_ceil(m) * m;
        }
        out
    }

    pub fn bottleneck_dims(&self) -> [usize; 3] {
        let m = 1usize << self.depth();
        let p = self.padded_dims();
        [p[0] / m, p[1] / m, p[2] / m]
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.stage_channels.is_empty() {
            return Err(NetError::InvalidConfig("segmentation needs at least 1 encoder stage".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.bottleneck_channels == 0 {
            return Err(NetError::InvalidConfig("segmentation channels must be > 0".into()));
        }
        let m = 1usize << self.depth();
        for (a, &d) in self.input_dims.iter().enumerate() {
            if d < m {
                return Err(NetError::InvalidConfig(format!(
                    "input dim {a} = {d} is smaller than the downsampling factor {m}"
                )));
            }
        }
        Ok(())
    }
}

pub struct SegForward {
    pub soft_mask: NodeId,
    /// Deepest pre-decoder feature map (channel dim = bottleneck_channels).
    pub bottleneck: NodeId,
}

pub struct SegModel<T> {
    pub config: SegConfig,
    pub params: ParamStore<T>,
}

impl<T: Gemm> SegModel<T> {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut r = rng(seed);
        let mut params = ParamStore::new();
        let conv = |params: &mut ParamStore<T>,
                        r: &mut ChaCha12Rng,
                        name: &str,
                        co: usize,
                        ci: usize,
                        zero: bool| {
            let len = co * ci * 27;
            let w = if zero { zeros(len) } else { he_normal(r, len, ci * 27) };
            params.register(format!("{name}.w"), Shape::Tensor(vec![co, ci, 3, 3, 3]), w);
            params.register(format!("{name}.b"), Shape::Tensor(vec![co]), zeros(co));
        };
        let inorm = |params: &mut ParamStore<T>, name: &str, c: usize| {
            params.register(format!("{name}.gamma"), Shape::Tensor(vec![c]), ones(c));
            params.register(format!("{name}.beta"), Shape::Tensor(vec![c]), zeros(c));
        };

        let stages = stage_list(&config);
        for (s, &(ci, co, _stride)) in stages.iter().enumerate() {
            conv(&mut params, &mut r, &format!("enc{s}.conv0"), co, ci, false);
            inorm(&mut params, &format!("enc{s}.in0"), co);
            conv(&mut params, &mut r, &format!("enc{s}.conv1"), co, co, false);
            inorm(&mut params, &format!("enc{s}.in1"), co);
        }
        // decoder mirrors the encoder
        let n = stages.len();
        for level in (1..n).rev() {
            let skip_ch = stages[level - 1].1;
            let in_ch = stages[level].1 + skip_ch;
            let out = skip_ch;
            conv(&mut params, &mut r, &format!("dec{level}.conv0"), out, in_ch, false);
            inorm(&mut params, &format!("dec{level}.in0"), out);
            conv(&mut params, &mut r, &format!("dec{level}.conv1"), out, out, false);
            inorm(&mut params, &format!("dec{level}.in1"), out);
        }
        // zero-initialized logit head: an untrained model outputs 0.5
        conv(&mut params, &mut r, "logit_head", 1, stages[0].1, true);

        Ok(Self { config, params })
    }

    fn pid(&self, name: &str) -> usize {
        self.params.by_name(name).unwrap_or_else(|| panic!("missing param `{name}`")).0
    }

    pub fn forward(&self, g: &mut Graph<T>, leaves: &[NodeId], image: &[T]) -> SegForward {
        let dims = self.config.input_dims;
        let padded = self.config.padded_dims();
        assert_eq!(image.len(), dims.iter().product::<usize>(), "image length");
        let img = pad_replicate(image, dims, padded);
        let mut h = g.leaf(img, Shape::Map { channels: 1, dims: padded }, false);

        let stages = stage_list(&self.config);
        let mut outs = Vec::with_capacity(stages.len());
        for (s, &(_ci, _co, stride)) in stages.iter().enumerate() {
            let w0 = leaves[self.pid(&format!("enc{s}.conv0.w"))];
            let b0 = leaves[self.pid(&format!("enc{s}.conv0.b"))];
            h = g.conv3d(h, w0, Some(b0), stride, 1);
            let g0 = leaves[self.pid(&format!("enc{s}.in0.gamma"))];
            let be0 = leaves[self.pid(&format!("enc{s}.in0.beta"))];
            h = g.instance_norm(h, g0, be0);
            h = g.relu(h);
            let w1 = leaves[self.pid(&format!("enc{s}.conv1.w"))];
            let b1 = leaves[self.pid(&format!("enc{s}.conv1.b"))];
            h = g.conv3d(h, w1, Some(b1), 1, 1);
            let g1 = leaves[self.pid(&format!("enc{s}.in1.gamma"))];
            let be1 = leaves[self.pid(&format!("enc{s}.in1.beta"))];
            h = g.instance_norm(h, g1, be1);
            h = g.relu(h);
            outs.push(h);
        }
        let bottleneck = *outs.last().unwrap();

        let n = stages.len();
        let mut d = bottleneck;
        for level in (1..n).rev() {
            let up = g.up_nearest2(d);
            let cat = g.concat_c(up, outs[level - 1]);
            let w0 = leaves[self.pid(&format!("dec{level}.conv0.w"))];
            let b0 = leaves[self.pid(&format!("dec{level}.conv0.b"))];
            let mut dh = g.conv3d(cat, w0, Some(b0), 1, 1);
            let g0 = leaves[self.pid(&format!("dec{level}.in0.gamma"))];
            let be0 = leaves[self.pid(&format!("dec{level}.in0.beta"))];
            dh = g.instance_norm(dh, g0, be0);
            dh = g.relu(dh);
            let w1 = leaves[self.pid(&format!("dec{level}.conv1.w"))];
            let b1 = leaves[self.pid(&format!("dec{level}.conv1.b"))];
            dh = g.conv3d(dh, w1, Some(b1), 1, 1);
            let g1 = leaves[self.pid(&format!("dec{level}.in1.gamma"))];
            let be1 = leaves[self.pid(&format!("dec{level}.in1.beta"))];
            dh = g.instance_norm(dh, g1, be1);
            d = g.relu(dh);
        }
        let lw = leaves[self.pid("logit_head.w")];
        let lb = leaves[self.pid("logit_head.b")];
        let logits = g.conv3d(d, lw, Some(lb), 1, 1);
        let logits = g.crop_map(logits, dims);
        let soft_mask = g.sigmoid(logits);
        SegForward { soft_mask, bottleneck }
    }

    /// Inference: soft gland mask plus the bottleneck feature map.
    pub fn predict(&self, image: &Volume3D) -> Result<(MaskVolume, FeatureMap), NetError> {
        if image.dims() != self.config.input_dims {
            return Err(NetError::DimMismatch(format!(
                "image dims {:?} vs segmentation input dims {:?}",
                image.dims(),
                self.config.input_dims
            )));
        }
        let img: Vec<T> = image.data().iter().map(|&v| T::from_f64(v)).collect();
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = self
            .params
            .entries()
            .iter()
            .map(|e| g.leaf(e.data.clone(), e.shape.clone(), false))
            .collect();
        let out = self.forward(&mut g, &leaves, &img);
        let mask_data: Vec<f64> =
            g.value(out.soft_mask).iter().map(|v| v.to_f64().clamp(0.0, 1.0)).collect();
        let mask = MaskVolume::new(
            image.dims(),
            image.spacing(),
            image.origin(),
            MaskKind::Soft,
            mask_data,
        )?;
        let bdims = self.config.bottleneck_dims();
        let planes: Vec<f64> = g.value(out.bottleneck).iter().map(|v| v.to_f64()).collect();
        let features =
            FeatureMap::from_channel_major(bdims, self.config.bottleneck_channels, &planes)?;
        Ok((mask, features))
    }
}

/// (in_ch, out_ch, stride) per stage, bottleneck last.
fn stage_list(config: &SegConfig) -> Vec<(usize, usize, usize)> {
    let mut stages = Vec::new();
    let mut prev = 1usize;
    for (i, &c) in config.stage_channels.iter().enumerate() {
        stages.push((prev, c, if i == 0 { 1 } else { 2 }));
        prev = c;
    }
    stages.push((prev, config.bottleneck_channels, 2));
    stages
}
