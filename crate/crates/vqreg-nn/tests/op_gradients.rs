//! Finite-difference verification of every graph operation's adjoint, plus
//! the vector-quantizer gradient contract.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use vqreg_core::rng::rng;
use vqreg_nn::graph::{FrozenVq, Graph, NodeId, Shape};
use vqreg_nn::{grad_check_params, ParamStore};

fn uniform(r: &mut ChaCha12Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| r.gen_range(lo..hi)).collect()
}

/// Random values kept away from zero so ReLU kinks are not straddled.
fn off_zero(r: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let v = r.gen_range(0.1..1.0);
            if r.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

#[test]
fn elementwise_and_reduction_gradients() {
    let mut r = rng(1);
    let dims = [3, 2, 2];
    let n = 12;
    let mut store = ParamStore::new();
    let shape = Shape::Map { channels: 2, dims };
    store.register("a", shape.clone(), off_zero(&mut r, 2 * n));
    store.register("b", shape.clone(), uniform(&mut r, 2 * n, 0.5, 1.5));
    let target = uniform(&mut r, 2 * n, -1.0, 1.0);

    let build = move |g: &mut Graph<f64>, leaves: &[NodeId]| -> NodeId {
        let (a, b) = (leaves[0], leaves[1]);
        let sum = g.add(a, b);
        let diff = g.sub(a, b);
        let prod = g.mul(sum, diff);
        let quot = g.div(prod, b);
        let act = g.relu(quot);
        let sig = g.sigmoid(a);
        let mix = g.affine(&[(act, 0.7), (sig, -1.3)], 0.25);
        let t = g.leaf(target.clone(), Shape::Map { channels: 2, dims }, false);
        let d = g.sub(mix, t);
        let sq = g.dot(d, d);
        let m = g.mean_all(d);
        let s = g.sum_all(sig);
        g.affine(&[(sq, 1.0), (m, 0.5), (s, 0.125)], 0.0)
    };
    grad_check_params(&mut store, build, 1e-6, 24, 7).assert_below(1e-6);
}

#[test]
fn conv3d_gradients_stride1_and_stride2() {
    for (stride, k, pad) in [(1usize, 3usize, 1usize), (2, 3, 1), (1, 1, 0)] {
        let mut r = rng(100 + stride as u64 + k as u64);
        let dims = [4, 4, 4];
        let (ci, co) = (2usize, 3usize);
        let n = 64;
        let mut store = ParamStore::new();
        store.register("x", Shape::Map { channels: ci, dims }, uniform(&mut r, ci * n, -1.0, 1.0));
        store.register(
            "w",
            Shape::Tensor(vec![co, ci, k, k, k]),
            uniform(&mut r, co * ci * k * k * k, -0.5, 0.5),
        );
        store.register("b", Shape::Tensor(vec![co]), uniform(&mut r, co, -0.2, 0.2));

        let build = move |g: &mut Graph<f64>, leaves: &[NodeId]| -> NodeId {
            let out = g.conv3d(leaves[0], leaves[1], Some(leaves[2]), stride, pad);
            g.dot(out, out)
        };
        grad_check_params(&mut store, build, 1e-6, 20, 11).assert_below(1e-6);
    }
}

#[test]
fn instance_norm_gradients() {
    let mut r = rng(5);
    let dims = [3, 3, 2];
    let c = 3usize;
    let n = 18;
    let mut store = ParamStore::new();
    store.register("x", Shape::Map { channels: c, dims }, uniform(&mut r, c * n, -2.0, 2.0));
    store.register("gamma", Shape::Tensor(vec![c]), uniform(&mut r, c, 0.5, 1.5));
    store.register("beta", Shape::Tensor(vec![c]), uniform(&mut r, c, -0.3, 0.3));
    let target = uniform(&mut r, c * n, -1.0, 1.0);

    let build = move |g: &mut Graph<f64>, leaves: &[NodeId]| -> NodeId {
        let y = g.instance_norm(leaves[0], leaves[1], leaves[2]);
        let t = g.leaf(target.clone(), Shape::Map { channels: c, dims }, false);
        let d = g.sub(y, t);
        g.dot(d, d)
    };
    grad_check_params(&mut store, build, 1e-6, 30, 13).assert_below(1e-6);
}

#[test]
fn upsampling_gradients() {
    let mut r = rng(9);
    let dims = [3, 2, 2];
    let c = 2usize;
    let n = 12;
    let mut store = ParamStore::new();
    store.register("x", Shape::Map { channels: c, dims }, uniform(&mut r, c * n, -1.0, 1.0));
    let t_len = c * n * 8;
    let target = uniform(&mut r, t_len, -1.0, 1.0);

    let build = move |g: &mut Graph<f64>, leaves: &[NodeId]| -> NodeId {
        let a = g.up_nearest2(leaves[0]);
        let b = g.up_trilinear2(leaves[0]);
        let m = g.add(a, b);
        let t = g.leaf(
            target.clone(),
            Shape::Map { channels: c, dims: [dims[0] * 2, dims[1] * 2, dims[2] * 2] },
            false,
        );
        let d = g.sub(m, t);
        g.dot(d, d)
    };
    grad_check_params(&mut store, build, 1e-6, 24, 17).assert_below(1e-6);
}

#[test]
fn up_nearest_doubles_and_replicates() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(
        vec![1.0, 2.0, 3.0, 4.0],
        Shape::Map { channels: 1, dims: [2, 2, 1] },
        false,
    );
    let y = g.up_nearest2(x);
    assert_eq!(g.shape(y).map_dims(), [4, 4, 2]);
    let v = g.value(y);
    // first output row is 1 1 2 2
    assert_eq!(&v[0..4], &[1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn concat_and_warp_gradients() {
    let mut r = rng(31);
    let dims = [4, 4, 3];
    let n = 48;
    let mut store = ParamStore::new();
    store.register("vol", Shape::Map { channels: 1, dims }, uniform(&mut r, n, 0.0, 1.0));
    // displacements clear of integer crossings and of the volume border
    let ddf_vals: Vec<f64> = (0..3 * n)
        .map(|_| {
            let mag = r.gen_range(0.15..0.35);
            if r.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    store.register("ddf", Shape::Map { channels: 3, dims }, ddf_vals);
    let target = uniform(&mut r, n, 0.0, 1.0);

    let build = move |g: &mut Graph<f64>, leaves: &[NodeId]| -> NodeId {
        let warped = g.warp(leaves[0], leaves[1]);
        let t = g.leaf(target.clone(), Shape::Map { channels: 1, dims }, false);
        let d = g.sub(warped, t);
        let ssd = g.dot(d, d);
        let cat = g.concat_c(warped, t);
        let s = g.mean_all(cat);
        g.affine(&[(ssd, 1.0), (s, 0.3)], 0.0)
    };
    grad_check_params(&mut store, build, 1e-6, 30, 19).assert_below(1e-6);
}

#[test]
fn bending_gradients() {
    let mut r = rng(41);
    let dims = [5, 4, 4];
    let n = 80;
    let mut store = ParamStore::new();
    store.register("ddf", Shape::Map { channels: 3, dims }, uniform(&mut r, 3 * n, -0.5, 0.5));
    let build = |g: &mut Graph<f64>, leaves: &[NodeId]| -> NodeId { g.bending(leaves[0]) };
    grad_check_params(&mut store, build, 1e-6, 40, 23).assert_below(1e-6);
}

fn vq_setup(seed: u64, k: usize, c: usize, dims: [usize; 3]) -> (ParamStore<f64>, usize) {
    let mut r = rng(seed);
    let n = dims[0] * dims[1] * dims[2];
    let mut store = ParamStore::new();
    store.register("x", Shape::Map { channels: c, dims }, uniform(&mut r, c * n, -1.0, 1.0));
    store.register("codes", Shape::Tensor(vec![k, c]), uniform(&mut r, k * c, -1.0, 1.0));
    (store, n)
}

#[test]
fn vq_loss_gradient_contract() {
    // beta-weighted term trains the encoder, first term trains the codebook
    let dims = [2, 2, 1];
    let (store, n) = vq_setup(55, 4, 3, dims);
    let c = 3usize;
    let beta = 0.25;

    let mut g = Graph::new();
    let leaves = store.leaf_all(&mut g);
    let out = g.vq_quantizer(leaves[0], leaves[1], beta, None);
    g.backward(out.loss);

    let xg = g.grad(leaves[0]).unwrap();
    let cg = g.grad(leaves[1]).unwrap();
    let xv = store.data(vqreg_nn::ParamId(0));
    let cv = store.data(vqreg_nn::ParamId(1));

    // encoder gradient: 2*beta*(x - q)
    for p in 0..n {
        let row = out.indices[p] as usize * c;
        for ch in 0..c {
            let expect = 2.0 * beta * (xv[ch * n + p] - cv[row + ch]);
            let got = xg[ch * n + p];
            assert!((got - expect).abs() < 1e-12, "x grad at p={p} ch={ch}");
        }
    }
    // codebook gradient: sum over assigned positions of 2*(d_k - f)
    let mut expect_cg = vec![0.0f64; cv.len()];
    for p in 0..n {
        let row = out.indices[p] as usize * c;
        for ch in 0..c {
            expect_cg[row + ch] += 2.0 * (cv[row + ch] - xv[ch * n + p]);
        }
    }
    for i in 0..cv.len() {
        assert!((cg[i] - expect_cg[i]).abs() < 1e-12, "codes grad at {i}");
    }
}

#[test]
fn vq_zeroing_each_term_isolates_the_other() {
    let dims = [2, 2, 1];
    let (store, _) = vq_setup(56, 4, 3, dims);

    // beta = 0: loss reaches the codebook only
    let mut g = Graph::new();
    let leaves = store.leaf_all(&mut g);
    let out = g.vq_quantizer(leaves[0], leaves[1], 0.0, None);
    g.backward(out.loss);
    assert!(g.grad(leaves[0]).unwrap().iter().all(|&v| v == 0.0));
    assert!(g.grad(leaves[1]).unwrap().iter().any(|&v| v != 0.0));

    // downstream-only loss: straight-through into x, nothing into the codebook
    let mut g2 = Graph::new();
    let leaves2 = store.leaf_all(&mut g2);
    let out2 = g2.vq_quantizer(leaves2[0], leaves2[1], 0.25, None);
    let downstream = g2.sum_all(out2.z);
    g2.backward(downstream);
    let xg = g2.grad(leaves2[0]).unwrap();
    assert!(xg.iter().all(|&v| (v - 1.0).abs() < 1e-15), "identity Jacobian");
    assert!(g2.grad(leaves2[1]).is_none() || g2.grad(leaves2[1]).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn vq_quantized_values_are_code_rows_bitwise() {
    let dims = [3, 2, 2];
    let (store, n) = vq_setup(57, 5, 4, dims);
    let mut g = Graph::new();
    let leaves = store.leaf_all(&mut g);
    let out = g.vq_quantizer(leaves[0], leaves[1], 0.25, None);
    let z = g.value(out.z);
    let cv = store.data(vqreg_nn::ParamId(1));
    for p in 0..n {
        let row = out.indices[p] as usize * 4;
        for ch in 0..4 {
            assert_eq!(z[ch * n + p], cv[row + ch]);
        }
    }
}

#[test]
fn vq_frozen_surrogate_passes_finite_difference_check() {
    let dims = [2, 2, 2];
    let c = 3usize;
    let (mut store, _) = vq_setup(58, 4, c, dims);
    let mut r = rng(59);
    let target = uniform(&mut r, c * 8, -1.0, 1.0);

    // capture assignments once on the base run
    let frozen: std::cell::RefCell<Option<FrozenVq<f64>>> = std::cell::RefCell::new(None);
    let build = move |g: &mut Graph<f64>, leaves: &[NodeId]| -> NodeId {
        let mut fz = frozen.borrow_mut();
        let out = g.vq_quantizer(leaves[0], leaves[1], 0.25, fz.as_ref());
        if fz.is_none() {
            *fz = Some(out.frozen.clone());
        }
        let t = g.leaf(target.clone(), Shape::Map { channels: c, dims }, false);
        let d = g.sub(out.z, t);
        let downstream = g.dot(d, d);
        g.affine(&[(downstream, 1.0), (out.loss, 1.0)], 0.0)
    };
    grad_check_params(&mut store, build, 1e-6, 30, 61).assert_below(1e-6);
}

#[test]
fn graphs_are_bit_deterministic() {
    let mut r = rng(71);
    let dims = [4, 4, 4];
    let n = 64;
    let x_data = uniform(&mut r, 2 * n, -1.0, 1.0);
    let w_data = uniform(&mut r, 3 * 2 * 27, -0.4, 0.4);
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(x_data.clone(), Shape::Map { channels: 2, dims }, true);
        let w = g.leaf(w_data.clone(), Shape::Tensor(vec![3, 2, 3, 3, 3]), true);
        let y = g.conv3d(x, w, None, 1, 1);
        let act = g.relu(y);
        let loss = g.dot(act, act);
        g.backward(loss);
        (g.value(y).to_vec(), g.grad(w).unwrap().to_vec())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1, g2);
}

#[test]
fn conv_matches_direct_convolution_oracle() {
    // independent triple-loop conv oracle on a small case
    let mut r = rng(83);
    let dims = [3, 3, 3];
    let (ci, co, k, pad) = (2usize, 2usize, 3usize, 1usize);
    let n = 27;
    let x = uniform(&mut r, ci * n, -1.0, 1.0);
    let w = uniform(&mut r, co * ci * 27, -1.0, 1.0);

    let mut g: Graph<f64> = Graph::new();
    let xl = g.leaf(x.clone(), Shape::Map { channels: ci, dims }, false);
    let wl = g.leaf(w.clone(), Shape::Tensor(vec![co, ci, k, k, k]), false);
    let y = g.conv3d(xl, wl, None, 1, pad);
    let yv = g.value(y);

    for oc in 0..co {
        for oz in 0..3usize {
            for oy in 0..3usize {
                for ox in 0..3usize {
                    let mut acc = 0.0;
                    for icn in 0..ci {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iz = oz as isize + kz as isize - pad as isize;
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iz < 0 || iy < 0 || ix < 0 {
                                        continue;
                                    }
                                    let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                                    if ix >= 3 || iy >= 3 || iz >= 3 {
                                        continue;
                                    }
                                    let xi = icn * n + ix + 3 * (iy + 3 * iz);
                                    let wi = ((oc * ci + icn) * 27)
                                        + kx
                                        + k * (ky + k * kz);
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    let got = yv[oc * n + ox + 3 * (oy + 3 * oz)];
                    assert!(
                        (got - acc).abs() < 1e-12,
                        "conv mismatch at ({ox},{oy},{oz}) ch {oc}: {got} vs {acc}"
                    );
                }
            }
        }
    }
}
