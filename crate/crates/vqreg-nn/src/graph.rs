//! Tape-based reverse-mode autodiff over flat buffers.
//!
//! A [`Graph`] is built per forward pass; node ids are topologically ordered
//! by construction, so the backward sweep is a reverse walk over the tape.
//! Loops are written in fixed order and reductions accumulate sequentially,
//! which makes every pass bit-reproducible.

use vqreg_core::losses::{bending_energy_backward, bending_energy_forward};
use vqreg_core::transform::{trilinear_setup, warp_backward, warp_forward};
use vqreg_core::Scalar;
use vqreg_vq::nearest_code;

use crate::gemm::Gemm;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    /// Channel-major feature map: plane `c` holds `dims` voxels x-fastest.
    Map { channels: usize, dims: [usize; 3] },
    Tensor(Vec<usize>),
}

impl Shape {
    pub fn len(&self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Map { channels, dims } => channels * dims[0] * dims[1] * dims[2],
            Shape::Tensor(d) => d.iter().product(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map_dims(&self) -> [usize; 3] {
        match self {
            Shape::Map { dims, .. } => *dims,
            other => panic!("expected a Map shape, got {other:?}"),
        }
    }

    pub fn map_channels(&self) -> usize {
        match self {
            Shape::Map { channels, .. } => *channels,
            other => panic!("expected a Map shape, got {other:?}"),
        }
    }
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    Affine { terms: Vec<(NodeId, T)> },
    Relu(NodeId),
    Sigmoid(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Dot(NodeId, NodeId),
    Conv3d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, inv_std: Vec<f64> },
    ConcatC(NodeId, NodeId),
    UpNearest2(NodeId),
    UpTrilinear2(NodeId),
    Warp { vol: NodeId, ddf: NodeId },
    Bending(NodeId),
    /// Corner crop of a map to smaller spatial dims.
    CropMap(NodeId),
    /// Straight-through quantizer output: value holds the snapped code rows,
    /// the gradient passes to `x` unchanged and never reaches the codebook.
    VqApply { x: NodeId },
    /// Gather of code rows by fixed indices; gradients flow into the codebook.
    VqGather { codes: NodeId, indices: Vec<u32> },
}

/// Snapshot of a quantizer evaluation, used to rebuild the straight-through
/// surrogate as a smooth function for finite-difference checking.
#[derive(Debug, Clone)]
pub struct FrozenVq<T> {
    pub indices: Vec<u32>,
    /// Encoder output planes at the base evaluation.
    pub f0: Vec<T>,
    /// Quantized planes at the base evaluation.
    pub q0: Vec<T>,
}

pub struct VqOutput<T> {
    pub z: NodeId,
    pub loss: NodeId,
    pub indices: Vec<u32>,
    pub frozen: FrozenVq<T>,
}

pub struct Graph<T> {
    shapes: Vec<Shape>,
    values: Vec<Vec<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
    needs: Vec<bool>,
    // reused im2col workspaces (grown once, shared by all convolutions)
    scratch_col: Vec<T>,
    scratch_dcol: Vec<T>,
}

impl<T: Gemm> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Gemm> Graph<T> {
    pub fn new() -> Self {
        Self {
            shapes: Vec::new(),
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            scratch_col: Vec::new(),
            scratch_dcol: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op<T>, needs: bool) -> NodeId {
        debug_assert_eq!(shape.len(), value.len());
        self.shapes.push(shape);
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        self.needs.push(needs);
        NodeId(self.ops.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &[T] {
        &self.values[id.0]
    }

    #[inline]
    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.shapes[id.0]
    }

    /// Gradient buffer of a node, populated by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn leaf(&mut self, value: Vec<T>, shape: Shape, needs_grad: bool) -> NodeId {
        assert_eq!(shape.len(), value.len(), "leaf value length does not match shape");
        self.push(shape, value, Op::Leaf, needs_grad)
    }

    pub fn scalar_leaf(&mut self, v: T) -> NodeId {
        self.push(Shape::Scalar, vec![v], Op::Leaf, false)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> NodeId {
        assert_eq!(self.shapes[a.0], self.shapes[b.0], "elementwise shape mismatch");
        let value: Vec<T> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(self.shapes[a.0].clone(), value, op, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: NodeId, alpha: T) -> NodeId {
        let value: Vec<T> = self.values[x.0].iter().map(|&v| v * alpha).collect();
        let needs = self.needs[x.0];
        self.push(self.shapes[x.0].clone(), value, Op::Scale(x, alpha), needs)
    }

    /// `sum_i alpha_i * x_i + bias`, all terms sharing one shape.
    pub fn affine(&mut self, terms: &[(NodeId, T)], bias: T) -> NodeId {
        assert!(!terms.is_empty(), "affine needs at least one term");
        let shape = self.shapes[terms[0].0 .0].clone();
        for (id, _) in terms {
            assert_eq!(self.shapes[id.0], shape, "affine shape mismatch");
        }
        let mut value = vec![bias; shape.len()];
        for (id, alpha) in terms {
            for (o, &v) in value.iter_mut().zip(&self.values[id.0]) {
                *o += *alpha * v;
            }
        }
        let needs = terms.iter().any(|(id, _)| self.needs[id.0]);
        self.push(shape, value, Op::Affine { terms: terms.to_vec() }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value: Vec<T> =
            self.values[x.0].iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        let needs = self.needs[x.0];
        self.push(self.shapes[x.0].clone(), value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value: Vec<T> = self.values[x.0]
            .iter()
            .map(|&v| T::ONE / (T::ONE + (-v).exp()))
            .collect();
        let needs = self.needs[x.0];
        self.push(self.shapes[x.0].clone(), value, Op::Sigmoid(x), needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: T = self.values[x.0].iter().copied().sum();
        let needs = self.needs[x.0];
        self.push(Shape::Scalar, vec![s], Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].len();
        let s: T = self.values[x.0].iter().copied().sum();
        let needs = self.needs[x.0];
        self.push(Shape::Scalar, vec![s / T::usize_(n)], Op::MeanAll(x), needs)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shapes[a.0], self.shapes[b.0], "dot shape mismatch");
        let s: T =
            self.values[a.0].iter().zip(&self.values[b.0]).map(|(&x, &y)| x * y).sum();
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(Shape::Scalar, vec![s], Op::Dot(a, b), needs)
    }

    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, dims_a) = (self.shapes[a.0].map_channels(), self.shapes[a.0].map_dims());
        let (cb, dims_b) = (self.shapes[b.0].map_channels(), self.shapes[b.0].map_dims());
        assert_eq!(dims_a, dims_b, "concat spatial dims mismatch");
        let mut value = Vec::with_capacity((ca + cb) * dims_a.iter().product::<usize>());
        value.extend_from_slice(&self.values[a.0]);
        value.extend_from_slice(&self.values[b.0]);
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(
            Shape::Map { channels: ca + cb, dims: dims_a },
            value,
            Op::ConcatC(a, b),
            needs,
        )
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let (ci, in_dims) = (self.shapes[x.0].map_channels(), self.shapes[x.0].map_dims());
        let (co, wci, k) = match &self.shapes[w.0] {
            Shape::Tensor(d) if d.len() == 5 && d[2] == d[3] && d[3] == d[4] => (d[0], d[1], d[2]),
            other => panic!("conv3d weight must be [co, ci, k, k, k], got {other:?}"),
        };
        assert_eq!(ci, wci, "conv3d: input has {ci} channels, weight expects {wci}");
        if let Some(bias) = b {
            assert_eq!(self.shapes[bias.0], Shape::Tensor(vec![co]), "conv3d bias shape");
        }
        assert!(stride >= 1 && k >= 1 && pad <= k / 2, "conv3d geometry");
        let out_dims = conv_out_dims(in_dims, k, stride, pad);
        let p_out: usize = out_dims.iter().product();
        let kk = ci * k * k * k;

        let mut col = std::mem::take(&mut self.scratch_col);
        let mut out = vec![T::ZERO; co * p_out];
        let oxy = out_dims[0] * out_dims[1];
        let chunk_z = (1024 / oxy).max(1);
        let mut oz0 = 0usize;
        while oz0 < out_dims[2] {
            let zn = chunk_z.min(out_dims[2] - oz0);
            let pn = zn * oxy;
            let p0 = oz0 * oxy;
            build_col_chunk(
                &self.values[x.0],
                ci,
                in_dims,
                out_dims,
                k,
                stride,
                pad,
                oz0,
                zn,
                &mut col,
            );
            // out chunk as a column-major view: out^T = col^T x W^T
            unsafe {
                T::gemm(
                    pn,
                    kk,
                    co,
                    T::ONE,
                    col.as_ptr(),
                    1,
                    pn as isize,
                    self.values[w.0].as_ptr(),
                    1,
                    kk as isize,
                    T::ZERO,
                    out.as_mut_ptr().add(p0),
                    1,
                    p_out as isize,
                );
            }
            oz0 += zn;
        }
        self.scratch_col = col;
        if let Some(bias) = b {
            let bv = &self.values[bias.0];
            for c in 0..co {
                let bc = bv[c];
                for v in &mut out[c * p_out..(c + 1) * p_out] {
                    *v += bc;
                }
            }
        }
        let needs =
            self.needs[x.0] || self.needs[w.0] || b.map(|bb| self.needs[bb.0]).unwrap_or(false);
        self.push(
            Shape::Map { channels: co, dims: out_dims },
            out,
            Op::Conv3d { x, w, b, stride, pad },
            needs,
        )
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (c, dims) = (self.shapes[x.0].map_channels(), self.shapes[x.0].map_dims());
        assert_eq!(self.shapes[gamma.0], Shape::Tensor(vec![c]), "instance_norm gamma shape");
        assert_eq!(self.shapes[beta.0], Shape::Tensor(vec![c]), "instance_norm beta shape");
        let n = dims[0] * dims[1] * dims[2];
        let xv = &self.values[x.0];
        let mut mean = vec![0.0f64; c];
        let mut inv_std = vec![0.0f64; c];
        let mut out = vec![T::ZERO; c * n];
        for ch in 0..c {
            let plane = &xv[ch * n..(ch + 1) * n];
            let mu: f64 = plane.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var: f64 =
                plane.iter().map(|v| (v.to_f64() - mu) * (v.to_f64() - mu)).sum::<f64>()
                    / n as f64;
            let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            mean[ch] = mu;
            inv_std[ch] = inv;
            let g = self.values[gamma.0][ch];
            let bt = self.values[beta.0][ch];
            let mu_t = T::from_f64(mu);
            let inv_t = T::from_f64(inv);
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(plane) {
                *o = g * ((v - mu_t) * inv_t) + bt;
            }
        }
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        self.push(
            Shape::Map { channels: c, dims },
            out,
            Op::InstanceNorm { x, gamma, beta, mean, inv_std },
            needs,
        )
    }

    pub fn up_nearest2(&mut self, x: NodeId) -> NodeId {
        let (c, dims) = (self.shapes[x.0].map_channels(), self.shapes[x.0].map_dims());
        let od = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
        let n_in = dims.iter().product::<usize>();
        let n_out = od.iter().product::<usize>();
        let mut out = vec![T::ZERO; c * n_out];
        let xv = &self.values[x.0];
        for ch in 0..c {
            let src = &xv[ch * n_in..(ch + 1) * n_in];
            let dst = &mut out[ch * n_out..(ch + 1) * n_out];
            let mut p = 0usize;
            for z in 0..od[2] {
                let sz = z / 2;
                for y in 0..od[1] {
                    let sy = y / 2;
                    let row = dims[0] * (sy + dims[1] * sz);
                    for x_ in 0..od[0] {
                        dst[p] = src[x_ / 2 + row];
                        p += 1;
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        self.push(Shape::Map { channels: c, dims: od }, out, Op::UpNearest2(x), needs)
    }

    pub fn up_trilinear2(&mut self, x: NodeId) -> NodeId {
        let (c, dims) = (self.shapes[x.0].map_channels(), self.shapes[x.0].map_dims());
        let od = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
        let n_in = dims.iter().product::<usize>();
        let n_out = od.iter().product::<usize>();
        let mut out = vec![T::ZERO; c * n_out];
        let xv = &self.values[x.0];
        let mut p = 0usize;
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x_ in 0..od[0] {
                    let pos = [
                        x_ as f64 * 0.5 - 0.25,
                        y as f64 * 0.5 - 0.25,
                        z as f64 * 0.5 - 0.25,
                    ];
                    let (i0, i1, f) = trilinear_setup(dims, pos);
                    let idx = |a: usize, b: usize, cc: usize| a + dims[0] * (b + dims[1] * cc);
                    let (fx, fy, fz) =
                        (T::from_f64(f[0]), T::from_f64(f[1]), T::from_f64(f[2]));
                    let (gx, gy, gz) = (T::ONE - fx, T::ONE - fy, T::ONE - fz);
                    let corners = [
                        (idx(i0[0], i0[1], i0[2]), gx * gy * gz),
                        (idx(i1[0], i0[1], i0[2]), fx * gy * gz),
                        (idx(i0[0], i1[1], i0[2]), gx * fy * gz),
                        (idx(i1[0], i1[1], i0[2]), fx * fy * gz),
                        (idx(i0[0], i0[1], i1[2]), gx * gy * fz),
                        (idx(i1[0], i0[1], i1[2]), fx * gy * fz),
                        (idx(i0[0], i1[1], i1[2]), gx * fy * fz),
                        (idx(i1[0], i1[1], i1[2]), fx * fy * fz),
                    ];
                    for ch in 0..c {
                        let src = &xv[ch * n_in..(ch + 1) * n_in];
                        let mut acc = T::ZERO;
                        for &(ci, w) in &corners {
                            acc += src[ci] * w;
                        }
                        out[ch * n_out + p] = acc;
                    }
                    p += 1;
                }
            }
        }
        let needs = self.needs[x.0];
        self.push(Shape::Map { channels: c, dims: od }, out, Op::UpTrilinear2(x), needs)
    }

    /// Extract the `[0..dims]` corner region of a map (used to trim internal
    /// padding off network outputs).
    pub fn crop_map(&mut self, x: NodeId, dims: [usize; 3]) -> NodeId {
        let (c, in_dims) = (self.shapes[x.0].map_channels(), self.shapes[x.0].map_dims());
        assert!(
            (0..3).all(|a| dims[a] >= 1 && dims[a] <= in_dims[a]),
            "crop dims {dims:?} exceed input dims {in_dims:?}"
        );
        if dims == in_dims {
            // still emit a node so callers can rely on the op's shape
            let value = self.values[x.0].clone();
            let needs = self.needs[x.0];
            return self.push(Shape::Map { channels: c, dims }, value, Op::CropMap(x), needs);
        }
        let n_in: usize = in_dims.iter().product();
        let n_out: usize = dims.iter().product();
        let mut out = vec![T::ZERO; c * n_out];
        for ch in 0..c {
            let src = &self.values[x.0][ch * n_in..(ch + 1) * n_in];
            let dst = &mut out[ch * n_out..(ch + 1) * n_out];
            let mut p = 0usize;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    let row = in_dims[0] * (y + in_dims[1] * z);
                    dst[p..p + dims[0]].copy_from_slice(&src[row..row + dims[0]]);
                    p += dims[0];
                }
            }
        }
        let needs = self.needs[x.0];
        self.push(Shape::Map { channels: c, dims }, out, Op::CropMap(x), needs)
    }

    /// Trilinear warp of `vol` by the displacement field `ddf` (a 3-channel
    /// map in voxel units); differentiable with respect to both inputs.
    pub fn warp(&mut self, vol: NodeId, ddf: NodeId) -> NodeId {
        let (c, dims) = (self.shapes[vol.0].map_channels(), self.shapes[vol.0].map_dims());
        assert_eq!(
            self.shapes[ddf.0],
            Shape::Map { channels: 3, dims },
            "warp: ddf must be a 3-channel map on the volume grid"
        );
        let n = dims.iter().product::<usize>();
        let mut out = vec![T::ZERO; c * n];
        warp_forward(&self.values[vol.0], c, dims, &self.values[ddf.0], &mut out);
        let needs = self.needs[vol.0] || self.needs[ddf.0];
        self.push(Shape::Map { channels: c, dims }, out, Op::Warp { vol, ddf }, needs)
    }

    /// Bending energy of a 3-channel displacement map (mean over interior
    /// voxels and channels of squared second derivatives).
    pub fn bending(&mut self, ddf: NodeId) -> NodeId {
        let (c, dims) = (self.shapes[ddf.0].map_channels(), self.shapes[ddf.0].map_dims());
        assert_eq!(c, 3, "bending expects a 3-channel field");
        assert!(dims.iter().all(|&d| d >= 3), "bending stencil needs dims >= 3");
        let v = bending_energy_forward(&self.values[ddf.0], dims);
        let needs = self.needs[ddf.0];
        self.push(Shape::Scalar, vec![T::from_f64(v)], Op::Bending(ddf), needs)
    }

    /// Full quantizer: snaps `x` (a feature map) to its nearest codebook rows
    /// and emits the quantization loss.
    ///
    /// Gradient contract: the downstream gradient passes through `z` to `x`
    /// unchanged (straight-through); the loss trains the codebook through its
    /// first term and the encoder through the beta-weighted commitment term.
    /// Passing `frozen` rebuilds the smooth surrogate of a previous
    /// evaluation (for finite-difference checks).
    pub fn vq_quantizer(
        &mut self,
        x: NodeId,
        codes: NodeId,
        beta: T,
        frozen: Option<&FrozenVq<T>>,
    ) -> VqOutput<T> {
        let (c, dims) = (self.shapes[x.0].map_channels(), self.shapes[x.0].map_dims());
        let (k, kc) = match &self.shapes[codes.0] {
            Shape::Tensor(d) if d.len() == 2 => (d[0], d[1]),
            other => panic!("codebook must be a [K, C] tensor, got {other:?}"),
        };
        assert_eq!(c, kc, "feature channels {c} vs codebook dimension {kc}");
        let n = dims.iter().product::<usize>();

        let (indices, f0, q0) = match frozen {
            Some(fz) => {
                assert_eq!(fz.indices.len(), n, "frozen indices length");
                (fz.indices.clone(), fz.f0.clone(), fz.q0.clone())
            }
            None => {
                let xv = &self.values[x.0];
                let cv = &self.values[codes.0];
                let mut indices = Vec::with_capacity(n);
                let mut vector = vec![T::ZERO; c];
                for p in 0..n {
                    for ch in 0..c {
                        vector[ch] = xv[ch * n + p];
                    }
                    let (idx, _) = nearest_code(&vector, cv, k);
                    indices.push(idx as u32);
                }
                let mut q0 = vec![T::ZERO; c * n];
                for p in 0..n {
                    let row = indices[p] as usize * c;
                    for ch in 0..c {
                        q0[ch * n + p] = cv[row + ch];
                    }
                }
                (indices, xv.clone(), q0)
            }
        };

        let map_shape = Shape::Map { channels: c, dims };
        let z = match frozen {
            None => {
                // exact code rows, straight-through backward
                let needs = self.needs[x.0];
                self.push(map_shape.clone(), q0.clone(), Op::VqApply { x }, needs)
            }
            Some(_) => {
                // smooth surrogate: z = x + (q0 - f0)
                let offset: Vec<T> =
                    q0.iter().zip(&f0).map(|(&q, &f)| q - f).collect();
                let off = self.leaf(offset, map_shape.clone(), false);
                self.add(x, off)
            }
        };

        // loss term 1 trains the codebook: || f0 - gather(codes) ||^2
        let gathered = {
            let cv = &self.values[codes.0];
            let mut value = vec![T::ZERO; c * n];
            for p in 0..n {
                let row = indices[p] as usize * c;
                for ch in 0..c {
                    value[ch * n + p] = cv[row + ch];
                }
            }
            let needs = self.needs[codes.0];
            self.push(
                map_shape.clone(),
                value,
                Op::VqGather { codes, indices: indices.clone() },
                needs,
            )
        };
        let f0_leaf = self.leaf(f0.clone(), map_shape.clone(), false);
        let d1 = self.sub(f0_leaf, gathered);
        let t1 = self.dot(d1, d1);
        // loss term 2 (commitment) trains the encoder: beta * || x - q0 ||^2
        let q0_leaf = self.leaf(q0.clone(), map_shape, false);
        let d2 = self.sub(x, q0_leaf);
        let t2 = self.dot(d2, d2);
        let loss = self.affine(&[(t1, T::ONE), (t2, beta)], T::ZERO);

        VqOutput { z, loss, indices: indices.clone(), frozen: FrozenVq { indices, f0, q0 } }
    }

    /// Reverse sweep from a scalar loss; gradients land in [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.shapes[loss.0], Shape::Scalar, "backward needs a scalar loss");
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.needs[i] {
                continue;
            }
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            // non-leaf gradients are consumed by the sweep; only leaf
            // gradients remain readable afterwards
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let lower = &mut self.grads;
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (id, sign) in [(a, T::ONE), (b, T::ONE)] {
                        if self.needs[id.0] {
                            let dst = acc(&mut lower[id.0], g.len());
                            for (d, &gv) in dst.iter_mut().zip(&g) {
                                *d += gv * sign;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs[a.0] {
                        let dst = acc(&mut lower[a.0], g.len());
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    if self.needs[b.0] {
                        let dst = acc(&mut lower[b.0], g.len());
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs[a.0] {
                        let bv = &self.values[b.0];
                        let dst = acc(&mut lower[a.0], g.len());
                        for ((d, &gv), &vb) in dst.iter_mut().zip(&g).zip(bv) {
                            *d += gv * vb;
                        }
                    }
                    if self.needs[b.0] {
                        let av = &self.values[a.0];
                        let dst = acc(&mut lower[b.0], g.len());
                        for ((d, &gv), &va) in dst.iter_mut().zip(&g).zip(av) {
                            *d += gv * va;
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs[a.0] {
                        let bv = &self.values[b.0];
                        let dst = acc(&mut lower[a.0], g.len());
                        for ((d, &gv), &vb) in dst.iter_mut().zip(&g).zip(bv) {
                            *d += gv / vb;
                        }
                    }
                    if self.needs[b.0] {
                        let av = &self.values[a.0];
                        let bv = &self.values[b.0];
                        let dst = acc(&mut lower[b.0], g.len());
                        for i in 0..g.len() {
                            dst[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                        }
                    }
                }
                Op::Scale(x, alpha) => {
                    let (x, alpha) = (*x, *alpha);
                    if self.needs[x.0] {
                        let dst = acc(&mut lower[x.0], g.len());
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d += gv * alpha;
                        }
                    }
                }
                Op::Affine { terms } => {
                    for &(id, alpha) in terms {
                        if self.needs[id.0] {
                            let dst = acc(&mut lower[id.0], g.len());
                            for (d, &gv) in dst.iter_mut().zip(&g) {
                                *d += gv * alpha;
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    if self.needs[x.0] {
                        let xv = &self.values[x.0];
                        let dst = acc(&mut lower[x.0], g.len());
                        for i in 0..g.len() {
                            if xv[i] > T::ZERO {
                                dst[i] += g[i];
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    if self.needs[x.0] {
                        let yv = &self.values[i];
                        let dst = acc(&mut lower[x.0], g.len());
                        for j in 0..g.len() {
                            dst[j] += g[j] * yv[j] * (T::ONE - yv[j]);
                        }
                    }
                }
                Op::SumAll(x) => {
                    let x = *x;
                    if self.needs[x.0] {
                        let len = self.values[x.0].len();
                        let dst = acc(&mut lower[x.0], len);
                        for d in dst.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    if self.needs[x.0] {
                        let len = self.values[x.0].len();
                        let gv = g[0] / T::usize_(len);
                        let dst = acc(&mut lower[x.0], len);
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs[a.0] {
                        let bv = &self.values[b.0];
                        let dst = acc(&mut lower[a.0], bv.len());
                        for (d, &vb) in dst.iter_mut().zip(bv) {
                            *d += g[0] * vb;
                        }
                    }
                    if self.needs[b.0] {
                        let av = &self.values[a.0];
                        let dst = acc(&mut lower[b.0], av.len());
                        for (d, &va) in dst.iter_mut().zip(av) {
                            *d += g[0] * va;
                        }
                    }
                }
                Op::Conv3d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let (ci, in_dims) =
                        (self.shapes[x.0].map_channels(), self.shapes[x.0].map_dims());
                    let out_dims = self.shapes[i].map_dims();
                    let co = self.shapes[i].map_channels();
                    let k = match &self.shapes[w.0] {
                        Shape::Tensor(d) => d[2],
                        _ => unreachable!(),
                    };
                    let p_out: usize = out_dims.iter().product();
                    let kk = ci * k * k * k;

                    if let Some(bias) = b {
                        if self.needs[bias.0] {
                            let dst = acc(&mut lower[bias.0], co);
                            for c in 0..co {
                                let mut s = T::ZERO;
                                for &gv in &g[c * p_out..(c + 1) * p_out] {
                                    s += gv;
                                }
                                dst[c] += s;
                            }
                        }
                    }
                    let need_w = self.needs[w.0];
                    let need_x = self.needs[x.0];
                    if need_w || need_x {
                        let mut col = std::mem::take(&mut self.scratch_col);
                        let mut dcol = std::mem::take(&mut self.scratch_dcol);
                        let n_in: usize = in_dims.iter().product();
                        // ensure both destination buffers exist before chunking
                        if need_w {
                            acc(&mut lower[w.0], co * kk);
                        }
                        if need_x {
                            acc(&mut lower[x.0], ci * n_in);
                        }
                        let oxy = out_dims[0] * out_dims[1];
                        let chunk_z = (1024 / oxy).max(1);
                        let mut oz0 = 0usize;
                        while oz0 < out_dims[2] {
                            let zn = chunk_z.min(out_dims[2] - oz0);
                            let pn = zn * oxy;
                            let p0 = oz0 * oxy;
                            if need_w {
                                build_col_chunk(
                                    &self.values[x.0],
                                    ci,
                                    in_dims,
                                    out_dims,
                                    k,
                                    stride,
                                    pad,
                                    oz0,
                                    zn,
                                    &mut col,
                                );
                                let dst = lower[w.0].as_mut().expect("allocated above");
                                unsafe {
                                    T::gemm(
                                        co,
                                        pn,
                                        kk,
                                        T::ONE,
                                        g.as_ptr().add(p0),
                                        p_out as isize,
                                        1,
                                        col.as_ptr(),
                                        1,
                                        pn as isize,
                                        T::ONE,
                                        dst.as_mut_ptr(),
                                        kk as isize,
                                        1,
                                    );
                                }
                            }
                            if need_x {
                                dcol.resize(kk * pn, T::ZERO);
                                unsafe {
                                    T::gemm(
                                        kk,
                                        co,
                                        pn,
                                        T::ONE,
                                        self.values[w.0].as_ptr(),
                                        1,
                                        kk as isize,
                                        g.as_ptr().add(p0),
                                        p_out as isize,
                                        1,
                                        T::ZERO,
                                        dcol.as_mut_ptr(),
                                        pn as isize,
                                        1,
                                    );
                                }
                                let dst = lower[x.0].as_mut().expect("allocated above");
                                col2im_add_chunk(
                                    &dcol[..kk * pn],
                                    dst,
                                    ci,
                                    in_dims,
                                    out_dims,
                                    k,
                                    stride,
                                    pad,
                                    oz0,
                                    zn,
                                );
                            }
                            oz0 += zn;
                        }
                        self.scratch_col = col;
                        self.scratch_dcol = dcol;
                    }
                }
                Op::InstanceNorm { x, gamma, beta, mean, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (c, dims) =
                        (self.shapes[i].map_channels(), self.shapes[i].map_dims());
                    let n = dims.iter().product::<usize>();
                    let xv = &self.values[x.0];
                    let gv = &self.values[gamma.0];

                    if self.needs[gamma.0] {
                        let dst = acc(&mut lower[gamma.0], c);
                        for ch in 0..c {
                            let mut s = 0.0f64;
                            for p in 0..n {
                                let xh = (xv[ch * n + p].to_f64() - mean[ch]) * inv_std[ch];
                                s += g[ch * n + p].to_f64() * xh;
                            }
                            dst[ch] += T::from_f64(s);
                        }
                    }
                    if self.needs[beta.0] {
                        let dst = acc(&mut lower[beta.0], c);
                        for ch in 0..c {
                            let mut s = 0.0f64;
                            for p in 0..n {
                                s += g[ch * n + p].to_f64();
                            }
                            dst[ch] += T::from_f64(s);
                        }
                    }
                    if self.needs[x.0] {
                        let dst = acc(&mut lower[x.0], c * n);
                        for ch in 0..c {
                            let mut mean_g = 0.0f64;
                            let mut mean_gx = 0.0f64;
                            for p in 0..n {
                                let xh = (xv[ch * n + p].to_f64() - mean[ch]) * inv_std[ch];
                                let gg = g[ch * n + p].to_f64();
                                mean_g += gg;
                                mean_gx += gg * xh;
                            }
                            mean_g /= n as f64;
                            mean_gx /= n as f64;
                            let s = gv[ch].to_f64() * inv_std[ch];
                            for p in 0..n {
                                let xh = (xv[ch * n + p].to_f64() - mean[ch]) * inv_std[ch];
                                let gg = g[ch * n + p].to_f64();
                                dst[ch * n + p] +=
                                    T::from_f64(s * (gg - mean_g - xh * mean_gx));
                            }
                        }
                    }
                }
                Op::ConcatC(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.values[a.0].len();
                    if self.needs[a.0] {
                        let dst = acc(&mut lower[a.0], na);
                        for (d, &gv) in dst.iter_mut().zip(&g[..na]) {
                            *d += gv;
                        }
                    }
                    if self.needs[b.0] {
                        let nb = self.values[b.0].len();
                        let dst = acc(&mut lower[b.0], nb);
                        for (d, &gv) in dst.iter_mut().zip(&g[na..]) {
                            *d += gv;
                        }
                    }
                }
                Op::UpNearest2(x) => {
                    let x = *x;
                    if self.needs[x.0] {
                        let dims = self.shapes[x.0].map_dims();
                        let od = self.shapes[i].map_dims();
                        let c = self.shapes[i].map_channels();
                        let n_in = dims.iter().product::<usize>();
                        let n_out = od.iter().product::<usize>();
                        let dst = acc(&mut lower[x.0], c * n_in);
                        for ch in 0..c {
                            let gp = &g[ch * n_out..(ch + 1) * n_out];
                            let dp = &mut dst[ch * n_in..(ch + 1) * n_in];
                            let mut p = 0usize;
                            for z in 0..od[2] {
                                let sz = z / 2;
                                for y in 0..od[1] {
                                    let sy = y / 2;
                                    let row = dims[0] * (sy + dims[1] * sz);
                                    for x_ in 0..od[0] {
                                        dp[x_ / 2 + row] += gp[p];
                                        p += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::UpTrilinear2(x) => {
                    let x = *x;
                    if self.needs[x.0] {
                        let dims = self.shapes[x.0].map_dims();
                        let od = self.shapes[i].map_dims();
                        let c = self.shapes[i].map_channels();
                        let n_in = dims.iter().product::<usize>();
                        let n_out = od.iter().product::<usize>();
                        let dst = acc(&mut lower[x.0], c * n_in);
                        let mut p = 0usize;
                        for z in 0..od[2] {
                            for y in 0..od[1] {
                                for x_ in 0..od[0] {
                                    let pos = [
                                        x_ as f64 * 0.5 - 0.25,
                                        y as f64 * 0.5 - 0.25,
                                        z as f64 * 0.5 - 0.25,
                                    ];
                                    let (i0, i1, f) = trilinear_setup(dims, pos);
                                    let idx = |a: usize, b: usize, cc: usize| {
                                        a + dims[0] * (b + dims[1] * cc)
                                    };
                                    let (fx, fy, fz) = (
                                        T::from_f64(f[0]),
                                        T::from_f64(f[1]),
                                        T::from_f64(f[2]),
                                    );
                                    let (gx, gy, gz) =
                                        (T::ONE - fx, T::ONE - fy, T::ONE - fz);
                                    let corners = [
                                        (idx(i0[0], i0[1], i0[2]), gx * gy * gz),
                                        (idx(i1[0], i0[1], i0[2]), fx * gy * gz),
                                        (idx(i0[0], i1[1], i0[2]), gx * fy * gz),
                                        (idx(i1[0], i1[1], i0[2]), fx * fy * gz),
                                        (idx(i0[0], i0[1], i1[2]), gx * gy * fz),
                                        (idx(i1[0], i0[1], i1[2]), fx * gy * fz),
                                        (idx(i0[0], i1[1], i1[2]), gx * fy * fz),
                                        (idx(i1[0], i1[1], i1[2]), fx * fy * fz),
                                    ];
                                    for ch in 0..c {
                                        let gv = g[ch * n_out + p];
                                        if gv != T::ZERO {
                                            for &(cix, w) in &corners {
                                                dst[ch * n_in + cix] += gv * w;
                                            }
                                        }
                                    }
                                    p += 1;
                                }
                            }
                        }
                    }
                }
                Op::Warp { vol, ddf } => {
                    let (vol, ddf) = (*vol, *ddf);
                    let (c, dims) =
                        (self.shapes[vol.0].map_channels(), self.shapes[vol.0].map_dims());
                    let n = dims.iter().product::<usize>();
                    let vol_v = &self.values[vol.0];
                    let ddf_v = &self.values[ddf.0];
                    let mut gvol = vec![T::ZERO; c * n];
                    let mut gddf = vec![T::ZERO; 3 * n];
                    warp_backward(vol_v, c, dims, ddf_v, &g, &mut gvol, &mut gddf);
                    if self.needs[vol.0] {
                        let dst = acc(&mut lower[vol.0], c * n);
                        for (d, &v) in dst.iter_mut().zip(&gvol) {
                            *d += v;
                        }
                    }
                    if self.needs[ddf.0] {
                        let dst = acc(&mut lower[ddf.0], 3 * n);
                        for (d, &v) in dst.iter_mut().zip(&gddf) {
                            *d += v;
                        }
                    }
                }
                Op::Bending(ddf) => {
                    let ddf = *ddf;
                    if self.needs[ddf.0] {
                        let dims = self.shapes[ddf.0].map_dims();
                        let data = &self.values[ddf.0];
                        let dst = acc(&mut lower[ddf.0], data.len());
                        bending_energy_backward(data, dims, g[0], dst);
                    }
                }
                Op::CropMap(x) => {
                    let x = *x;
                    if self.needs[x.0] {
                        let in_dims = self.shapes[x.0].map_dims();
                        let dims = self.shapes[i].map_dims();
                        let c = self.shapes[i].map_channels();
                        let n_in = in_dims.iter().product::<usize>();
                        let n_out = dims.iter().product::<usize>();
                        let dst = acc(&mut lower[x.0], c * n_in);
                        for ch in 0..c {
                            let gp = &g[ch * n_out..(ch + 1) * n_out];
                            let dp = &mut dst[ch * n_in..(ch + 1) * n_in];
                            let mut p = 0usize;
                            for z in 0..dims[2] {
                                for y in 0..dims[1] {
                                    let row = in_dims[0] * (y + in_dims[1] * z);
                                    for x_ in 0..dims[0] {
                                        dp[row + x_] += gp[p];
                                        p += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::VqApply { x } => {
                    // straight-through: identity Jacobian into the encoder
                    let x = *x;
                    if self.needs[x.0] {
                        let dst = acc(&mut lower[x.0], g.len());
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::VqGather { codes, indices } => {
                    let codes = *codes;
                    if self.needs[codes.0] {
                        let (c, dims) =
                            (self.shapes[i].map_channels(), self.shapes[i].map_dims());
                        let n = dims.iter().product::<usize>();
                        let len = self.values[codes.0].len();
                        let dst = acc(&mut lower[codes.0], len);
                        for p in 0..n {
                            let row = indices[p] as usize * c;
                            for ch in 0..c {
                                dst[row + ch] += g[ch * n + p];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::ZERO; len])
}

pub fn conv_out_dims(in_dims: [usize; 3], k: usize, stride: usize, pad: usize) -> [usize; 3] {
    let mut out = [0usize; 3];
    for a in 0..3 {
        assert!(in_dims[a] + 2 * pad >= k, "conv3d: input too small for kernel");
        out[a] = (in_dims[a] + 2 * pad - k) / stride + 1;
    }
    out
}

/// im2col over a z-chunk of output voxels: rows are (ci, kz, ky, kx) with
/// kx fastest, columns are the chunk's output voxels in raster order. The
/// chunk keeps the working set cache-sized; every element is written, so the
/// reused buffer needs no clearing. Zero padding.
#[allow(clippy::too_many_arguments)]
fn build_col_chunk<T: Scalar>(
    x: &[T],
    ci: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    oz0: usize,
    zn: usize,
    col: &mut Vec<T>,
) {
    let pn = zn * out_dims[0] * out_dims[1];
    let n_in: usize = in_dims.iter().product();
    col.resize(ci * k * k * k * pn, T::ZERO);
    for c in 0..ci {
        let plane = &x[c * n_in..(c + 1) * n_in];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = c * k * k * k + kx + k * (ky + k * kz);
                    let dst = &mut col[r * pn..(r + 1) * pn];
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((in_dims[0] as isize - shift).clamp(0, out_dims[0] as isize))
                        as usize;
                    let mut p = 0usize;
                    for oz in oz0..oz0 + zn {
                        let iz = (oz * stride + kz) as isize - pad as isize;
                        let z_ok = iz >= 0 && (iz as usize) < in_dims[2];
                        for oy in 0..out_dims[1] {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if !z_ok || iy < 0 || iy as usize >= in_dims[1] {
                                dst[p..p + out_dims[0]].fill(T::ZERO);
                                p += out_dims[0];
                                continue;
                            }
                            let row_base =
                                in_dims[0] * (iy as usize + in_dims[1] * iz as usize);
                            if stride == 1 {
                                if lo > 0 {
                                    dst[p..p + lo].fill(T::ZERO);
                                }
                                if hi > lo {
                                    let src0 = (lo as isize + shift) as usize + row_base;
                                    dst[p + lo..p + hi]
                                        .copy_from_slice(&plane[src0..src0 + (hi - lo)]);
                                }
                                if hi < out_dims[0] {
                                    dst[p + hi..p + out_dims[0]].fill(T::ZERO);
                                }
                                p += out_dims[0];
                            } else {
                                for ox in 0..out_dims[0] {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    dst[p] = if ix >= 0 && (ix as usize) < in_dims[0] {
                                        plane[ix as usize + row_base]
                                    } else {
                                        T::ZERO
                                    };
                                    p += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`build_col_chunk`]: scatter-add a chunk's column gradients
/// back onto the input grid.
#[allow(clippy::too_many_arguments)]
fn col2im_add_chunk<T: Scalar>(
    dcol: &[T],
    dx: &mut [T],
    ci: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    oz0: usize,
    zn: usize,
) {
    let pn = zn * out_dims[0] * out_dims[1];
    let n_in: usize = in_dims.iter().product();
    for c in 0..ci {
        let plane = &mut dx[c * n_in..(c + 1) * n_in];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = c * k * k * k + kx + k * (ky + k * kz);
                    let src = &dcol[r * pn..(r + 1) * pn];
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((in_dims[0] as isize - shift).clamp(0, out_dims[0] as isize))
                        as usize;
                    let mut p = 0usize;
                    for oz in oz0..oz0 + zn {
                        let iz = (oz * stride + kz) as isize - pad as isize;
                        let z_ok = iz >= 0 && (iz as usize) < in_dims[2];
                        for oy in 0..out_dims[1] {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if !z_ok || iy < 0 || iy as usize >= in_dims[1] {
                                p += out_dims[0];
                                continue;
                            }
                            let row_base =
                                in_dims[0] * (iy as usize + in_dims[1] * iz as usize);
                            if stride == 1 {
                                if hi > lo {
                                    let src0 = (lo as isize + shift) as usize + row_base;
                                    for (d, &v) in plane[src0..src0 + (hi - lo)]
                                        .iter_mut()
                                        .zip(&src[p + lo..p + hi])
                                    {
                                        *d += v;
                                    }
                                }
                                p += out_dims[0];
                            } else {
                                for ox in 0..out_dims[0] {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && (ix as usize) < in_dims[0] {
                                        plane[ix as usize + row_base] += src[p];
                                    }
                                    p += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
