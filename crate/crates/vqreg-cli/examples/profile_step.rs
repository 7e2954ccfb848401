use std::time::Instant;
use vqreg_cli::config::TrainConfig;
use vqreg_cli::dataset::{DatasetSpec, SplitDataset};
use vqreg_core::losses::LossWeights;
use vqreg_net::train::{training_loss, TrainSample};
use vqreg_net::RegModel;
use vqreg_nn::Graph;

fn main() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }

    let spec = DatasetSpec::desk(8, 0);
    let samples: Vec<_> = spec.generate_all().unwrap().into_iter().map(|(s, _)| s).collect();
    let data = SplitDataset::split(samples, 42);
    let cfg = TrainConfig::desk([32, 32, 24]);
    let model = RegModel::<f32>::new(cfg.network.clone(), 0).unwrap();
    let ts = TrainSample::<f32>::from_sample(&data.train[0]);
    let weights = LossWeights::reference();

    // warmup
    for _ in 0..2 {
        let mut g = Graph::new();
        let leaves = model.params.leaf_all(&mut g);
        let nodes = training_loss(&model, &mut g, &leaves, &ts, &weights, None);
        g.backward(nodes.total);
    }

    let t0 = Instant::now();
    let reps = 6;
    for _ in 0..reps {
        let mut g = Graph::new();
        let leaves = model.params.leaf_all(&mut g);
        let _ = training_loss(&model, &mut g, &leaves, &ts, &weights, None);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    let t1 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let leaves = model.params.leaf_all(&mut g);
        let nodes = training_loss(&model, &mut g, &leaves, &ts, &weights, None);
        g.backward(nodes.total);
        let _ = model.params.collect_grads(&g, &leaves);
    }
    let full = t1.elapsed().as_secs_f64() / reps as f64;

    let t2 = Instant::now();
    for _ in 0..reps {
        let _ = model.predict(&data.train[0]).unwrap();
    }
    let pred = t2.elapsed().as_secs_f64() / reps as f64;

    println!("forward+loss: {:.1} ms", fwd * 1e3);
    println!("fwd+bwd+grads: {:.1} ms", full * 1e3);
    println!("predict (no-grad): {:.1} ms", pred * 1e3);

    // parallel batch of 4 like the trainer does
    use rayon::prelude::*;
    let samples: Vec<TrainSample<f32>> =
        data.train.iter().take(4).map(TrainSample::from_sample).collect();
    let t3 = Instant::now();
    for _ in 0..reps {
        let _: Vec<Vec<Vec<f32>>> = samples
            .par_iter()
            .map(|ts| {
                let mut g = Graph::new();
                let leaves = model.params.leaf_all(&mut g);
                let nodes = training_loss(&model, &mut g, &leaves, ts, &weights, None);
                g.backward(nodes.total);
                model.params.collect_grads(&g, &leaves)
            })
            .collect();
    }
    let batch = t3.elapsed().as_secs_f64() / reps as f64;
    println!("parallel batch of 4: {:.1} ms ({:.1} ms/sample)", batch * 1e3, batch * 250.0);

    let t4 = Instant::now();
    for _ in 0..reps {
        for ts in &samples {
            let mut g = Graph::new();
            let leaves = model.params.leaf_all(&mut g);
            let nodes = training_loss(&model, &mut g, &leaves, ts, &weights, None);
            g.backward(nodes.total);
            let _ = model.params.collect_grads(&g, &leaves);
        }
    }
    let serial = t4.elapsed().as_secs_f64() / reps as f64;
    println!("serial batch of 4: {:.1} ms", serial * 1e3);
}
