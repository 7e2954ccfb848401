//! Architecture-level tests: output shapes, identity start, determinism,
//! ablation parameter parity, gradient flow, the straight-through gradient
//! check on a tiny model, checkpoints and the bootstrap pipeline.

use vqreg_core::losses::LossWeights;
use vqreg_core::synth::{generate, SynthSpec};
use vqreg_nn::graph::Graph;
use vqreg_nn::{grad_check_params, ParamStore};
use vqreg_net::checkpoint::{load_reg, load_reg_expect, load_seg, save_reg, save_seg};
use vqreg_net::config::{DictChannels, DictSizes, NetworkConfig, QuantizerSet};
use vqreg_net::train::{training_loss, TrainSample};
use vqreg_net::{RegFrozen, RegModel, SegConfig, SegModel};

fn tiny_config(dims: [usize; 3], enabled: QuantizerSet) -> NetworkConfig {
    NetworkConfig {
        stage_channels: vec![4, 8],
        convs_per_block: 2,
        dict_sizes: DictSizes { vanilla: 6, hierarchical: 6, collaborative: 4 },
        dict_channels: DictChannels { vanilla: 6, hierarchical: 4, collaborative: 6 },
        enabled,
        input_dims: dims,
    }
}

#[test]
fn forward_emits_a_field_at_input_resolution() {
    let out = generate(&SynthSpec::new(3, [32, 32, 24], 1.5)).unwrap();
    let model =
        RegModel::<f32>::new(NetworkConfig::desk([32, 32, 24]), 7).expect("model builds");
    let (ddf, losses) = model.predict(&out.sample).unwrap();
    assert_eq!(ddf.dims(), [32, 32, 24]);
    assert!(ddf.is_finite());
    // all three quantizers enabled -> three loss values
    assert!(losses.iter().all(|l| l.is_some()));
}

#[test]
fn paper_scale_dims_are_padded_internally() {
    // 102 is not divisible by the 8x downsampling; the model pads to 104
    // internally and crops the field back. Tiny channels keep this fast.
    let cfg = NetworkConfig {
        stage_channels: vec![2, 2, 2, 2],
        convs_per_block: 2,
        dict_sizes: DictSizes { vanilla: 4, hierarchical: 4, collaborative: 4 },
        dict_channels: DictChannels { vanilla: 2, hierarchical: 2, collaborative: 2 },
        enabled: QuantizerSet::all(),
        input_dims: [128, 128, 102],
    };
    assert_eq!(cfg.padded_dims(), [128, 128, 104]);
    let model = RegModel::<f32>::new(cfg, 1).unwrap();
    let n = 128 * 128 * 102;
    let moving = vec![0.3f32; n];
    let fixed = vec![0.5f32; n];
    let mut g = Graph::new();
    let leaves: Vec<_> = model
        .params
        .entries()
        .iter()
        .map(|e| g.leaf(e.data.clone(), e.shape.clone(), false))
        .collect();
    let out = model.forward(&mut g, &leaves, &moving, &fixed, 0.25, None);
    assert_eq!(g.shape(out.ddf).map_dims(), [128, 128, 102]);
    assert_eq!(g.shape(out.ddf).map_channels(), 3);
}

#[test]
fn disabled_quantizers_pass_through_with_zero_loss_and_identity_start() {
    let out = generate(&SynthSpec::new(5, [16, 16, 16], 0.6)).unwrap();
    let model =
        RegModel::<f64>::new(tiny_config([16, 16, 16], QuantizerSet::none()), 3).unwrap();
    let (ddf, losses) = model.predict(&out.sample).unwrap();
    assert!(losses.iter().all(|l| l.is_none()));
    // zero-initialized field head: training starts at the identity transform
    assert!(ddf.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_bit_deterministic() {
    let out = generate(&SynthSpec::new(9, [16, 16, 16], 0.7)).unwrap();
    let model = RegModel::<f64>::new(tiny_config([16, 16, 16], QuantizerSet::all()), 3).unwrap();
    let (ddf1, l1) = model.predict(&out.sample).unwrap();
    let (ddf2, l2) = model.predict(&out.sample).unwrap();
    assert_eq!(ddf1.data(), ddf2.data());
    assert_eq!(l1, l2);
}

#[test]
fn backbone_parameter_count_is_identical_across_quantizer_subsets() {
    let arms = [
        QuantizerSet::none(),
        QuantizerSet { vanilla: true, ..QuantizerSet::none() },
        QuantizerSet { vanilla: true, hierarchical: true, ..QuantizerSet::none() },
        QuantizerSet { vanilla: true, collaborative: true, ..QuantizerSet::none() },
        QuantizerSet::all(),
    ];
    let counts: Vec<usize> = arms
        .iter()
        .map(|&set| {
            RegModel::<f32>::new(tiny_config([16, 16, 16], set), 3)
                .unwrap()
                .backbone_param_count()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    // and the same subset twice gives the same total count
    let a = RegModel::<f32>::new(tiny_config([16, 16, 16], QuantizerSet::all()), 3).unwrap();
    let b = RegModel::<f32>::new(tiny_config([16, 16, 16], QuantizerSet::all()), 4).unwrap();
    assert_eq!(a.param_count(), b.param_count());
}

#[test]
fn every_encoder_param_and_selected_code_row_receives_gradient() {
    let out = generate(&SynthSpec::new(11, [16, 16, 16], 0.7)).unwrap();
    let model = RegModel::<f64>::new(tiny_config([16, 16, 16], QuantizerSet::all()), 5).unwrap();
    let sample = TrainSample::from_sample(&out.sample);
    let weights = LossWeights::reference();

    let mut g = Graph::new();
    let leaves = model.params.leaf_all(&mut g);
    let nodes = training_loss(&model, &mut g, &leaves, &sample, &weights, None);
    g.backward(nodes.total);

    for (i, entry) in model.params.entries().iter().enumerate() {
        let is_encoder = entry.name.starts_with("enc") || entry.name.starts_with("head");
        if is_encoder {
            let grad = g.grad(leaves[i]).expect("encoder param has a gradient buffer");
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "encoder param `{}` received no gradient",
                entry.name
            );
        }
    }
    // every selected codebook row gets a gradient
    for (frozen, pname) in [
        (&nodes.forward.frozen.vanilla, "codebook.vanilla"),
        (&nodes.forward.frozen.hierarchical, "codebook.hierarchical"),
        (&nodes.forward.frozen.collaborative, "codebook.collaborative"),
    ] {
        let fz = frozen.as_ref().expect("enabled quantizer captured");
        let pid = model.params.by_name(pname).unwrap();
        let grad = g.grad(leaves[pid.0]).expect("codebook gradient");
        let c = match &model.params.entry(pid).shape {
            vqreg_nn::graph::Shape::Tensor(d) => d[1],
            _ => unreachable!(),
        };
        let mut selected: Vec<u32> = fz.indices.clone();
        selected.sort_unstable();
        selected.dedup();
        for &row in &selected {
            let r = row as usize;
            assert!(
                grad[r * c..(r + 1) * c].iter().any(|&v| v != 0.0),
                "{pname} row {r} was selected but has zero gradient"
            );
        }
    }
}

#[test]
fn straight_through_gradients_match_finite_differences_on_tiny_model() {
    // 2-stage model on an 8^3 grid, full objective, double precision
    let start = std::time::Instant::now();
    let mut rng = vqreg_core::rng::rng(21);
    use rand::Rng;
    let dims = [8, 8, 8];
    let n: usize = dims.iter().product();
    let sample = TrainSample::<f64> {
        dims,
        moving: (0..n).map(|_| rng.gen::<f64>()).collect(),
        fixed: (0..n).map(|_| rng.gen::<f64>()).collect(),
        moving_mask: (0..n).map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect(),
        fixed_mask: (0..n).map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect(),
    };
    let model = RegModel::<f64>::new(tiny_config(dims, QuantizerSet::all()), 13).unwrap();
    let weights = LossWeights::reference();

    // jitter the zero-initialized field head so the warp path is active
    let mut store: ParamStore<f64> = model.params.clone();
    let head = store.by_name("ddf_head.w").unwrap();
    for v in store.data_mut(head).iter_mut() {
        *v = rng.gen_range(-0.05..0.05);
    }

    let frozen: std::cell::RefCell<Option<RegFrozen<f64>>> = std::cell::RefCell::new(None);
    let build = |g: &mut Graph<f64>, leaves: &[vqreg_nn::NodeId]| {
        let mut fz = frozen.borrow_mut();
        let nodes = training_loss(&model, g, leaves, &sample, &weights, fz.as_ref());
        if fz.is_none() {
            *fz = Some(nodes.forward.frozen.clone());
        }
        nodes.total
    };
    let report = grad_check_params(&mut store, build, 1e-6, 6, 31);
    report.assert_below(1e-4);
    assert!(start.elapsed().as_secs() < 60, "gradient check exceeded 60 s");
}

#[test]
fn translation_equivariance_smoke_check() {
    // two windows of one scene, offset by the full downsampling factor;
    // the interior of the predicted fields should agree far better than
    // the clamped borders do
    let big = generate(&SynthSpec::new(31, [48, 32, 24], 1.5).with_noise(0.0)).unwrap();
    let dims = [40, 32, 24];
    let shift = 8usize;

    let window = |x0: usize| -> (Vec<f64>, Vec<f64>) {
        let mut mov = Vec::with_capacity(40 * 32 * 24);
        let mut fix = Vec::with_capacity(40 * 32 * 24);
        for z in 0..24 {
            for y in 0..32 {
                for x in 0..40 {
                    mov.push(big.sample.moving.at(x + x0, y, z));
                    fix.push(big.sample.fixed.at(x + x0, y, z));
                }
            }
        }
        (mov, fix)
    };
    let (mov_a, fix_a) = window(0);
    let (mov_b, fix_b) = window(shift);

    let cfg = tiny_config(dims, QuantizerSet::all());
    let mut model = RegModel::<f64>::new(cfg, 17).unwrap();
    // randomize the zero-initialized head so the field is nontrivial
    let mut r = vqreg_core::rng::rng(18);
    use rand::Rng;
    let head = model.params.by_name("ddf_head.w").unwrap();
    for v in model.params.data_mut(head).iter_mut() {
        *v = r.gen_range(-0.05..0.05);
    }

    let run = |mov: &[f64], fix: &[f64]| -> Vec<f64> {
        let conv: Vec<f64> = mov.to_vec();
        let conv_f: Vec<f64> = fix.to_vec();
        let mut g = Graph::new();
        let leaves: Vec<_> = model
            .params
            .entries()
            .iter()
            .map(|e| g.leaf(e.data.clone(), e.shape.clone(), false))
            .collect();
        let out = model.forward(&mut g, &leaves, &conv, &conv_f, 0.25, None);
        g.value(out.ddf).to_vec()
    };
    let ddf_a = run(&mov_a, &fix_a);
    let ddf_b = run(&mov_b, &fix_b);

    let n = 40 * 32 * 24;
    let idx = |x: usize, y: usize, z: usize| x + 40 * (y + 32 * z);
    let mut border_sum = 0.0;
    let mut border_n = 0usize;
    let mut interior_sum = 0.0;
    let mut interior_n = 0usize;
    for c in 0..3 {
        for z in 0..24 {
            for y in 0..32 {
                // overlap in window-A coordinates: x in [shift, 40)
                for x in shift..40 {
                    let d = (ddf_a[c * n + idx(x, y, z)]
                        - ddf_b[c * n + idx(x - shift, y, z)])
                    .abs();
                    if (shift..shift + 6).contains(&x) || (34..40).contains(&x) {
                        border_sum += d;
                        border_n += 1;
                    } else if (17..31).contains(&x) {
                        interior_sum += d;
                        interior_n += 1;
                    }
                }
            }
        }
    }
    let border = border_sum / border_n as f64;
    let interior = interior_sum / interior_n as f64;
    assert!(
        interior < 10.0 * border + 1e-9,
        "interior change {interior} vs border effect {border}"
    );
}

#[test]
fn checkpoint_round_trip_and_config_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = tiny_config([16, 16, 16], QuantizerSet::all());
    let model = RegModel::<f64>::new(cfg.clone(), 3).unwrap();
    save_reg(&model, &path).unwrap();
    let loaded = load_reg::<f64>(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    for (a, b) in loaded.params.entries().iter().zip(model.params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.data, b.data);
    }
    // refusing a mismatched config
    let other = tiny_config([16, 16, 16], QuantizerSet::none());
    assert!(load_reg_expect::<f64>(&path, &other).is_err());
    assert!(load_reg_expect::<f64>(&path, &cfg).is_ok());
}

#[test]
fn seg_zero_logits_give_half_everywhere_and_bottleneck_shape() {
    let out = generate(&SynthSpec::new(2, [32, 32, 24], 0.0)).unwrap();
    let cfg = SegConfig { stage_channels: vec![4, 8, 8], bottleneck_channels: 6, input_dims: [32, 32, 24] };
    let model = SegModel::<f32>::new(cfg, 1).unwrap();
    let (mask, features) = model.predict(&out.sample.moving).unwrap();
    assert!(mask.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    assert_eq!(features.dims(), [4, 4, 3]);
    assert_eq!(features.channels(), 6);
    assert_eq!(features.positions(), 48);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    save_seg(&model, &path).unwrap();
    let loaded = load_seg::<f32>(&path).unwrap();
    assert_eq!(loaded.config, model.config);
}

#[test]
fn harvest_counts_match_bottleneck_arithmetic() {
    let out = generate(&SynthSpec::new(4, [16, 16, 16], 0.0)).unwrap();
    let cfg = SegConfig { stage_channels: vec![4, 8], bottleneck_channels: 5, input_dims: [16, 16, 16] };
    let model = SegModel::<f32>::new(cfg, 2).unwrap();
    // one image: bottleneck 4x4x4 -> 64 vectors
    let (rows, n, c) = vqreg_net::bootstrap::harvest_features(
        &model,
        &[&out.sample.moving],
        100_000,
        0,
    )
    .unwrap();
    assert_eq!((n, c), (64, 5));
    assert_eq!(rows.len(), 64 * 5);
    // two identical images: every vector twice before subsampling
    let (rows2, n2, _) = vqreg_net::bootstrap::harvest_features(
        &model,
        &[&out.sample.moving, &out.sample.moving],
        100_000,
        0,
    )
    .unwrap();
    assert_eq!(n2, 128);
    assert_eq!(&rows2[..rows.len()], &rows[..]);
    assert_eq!(&rows2[rows.len()..], &rows[..]);
    // the cap applies
    let (_, n3, _) =
        vqreg_net::bootstrap::harvest_features(&model, &[&out.sample.moving], 10, 0).unwrap();
    assert_eq!(n3, 10);
}

#[test]
fn collaborative_codebook_install_validates_shape() {
    let mut model =
        RegModel::<f64>::new(tiny_config([16, 16, 16], QuantizerSet::all()), 3).unwrap();
    let good = vqreg_vq::Codebook::new(
        vqreg_vq::CodebookName::Collaborative,
        vqreg_vq::CodebookInit::Kmeans,
        4,
        6,
        vec![0.1; 24],
    )
    .unwrap();
    model.set_collaborative_codebook(&good).unwrap();
    assert_eq!(model.collaborative_init(), vqreg_vq::CodebookInit::Kmeans);
    let exported = model.codebook(vqreg_net::QuantizerKind::Collaborative).unwrap();
    assert_eq!(exported.codes(), good.codes());

    let bad = vqreg_vq::Codebook::new(
        vqreg_vq::CodebookName::Collaborative,
        vqreg_vq::CodebookInit::Kmeans,
        5,
        6,
        vec![0.1; 30],
    )
    .unwrap();
    assert!(model.set_collaborative_codebook(&bad).is_err());
}
