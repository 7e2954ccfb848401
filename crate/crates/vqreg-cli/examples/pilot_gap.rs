use vqreg_cli::config::TrainConfig;
use vqreg_cli::dataset::{DatasetSpec, SplitDataset};
use vqreg_cli::trainer::train;
use vqreg_core::rng::derive;
use vqreg_net::config::{DictChannels, DictSizes, NetworkConfig, QuantizerSet};

fn main() {
    vqreg_cli::tune_allocator();
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.03);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(80);
    let kv: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_train: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lambda_q: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-4);

    let spec = DatasetSpec {
        count: 24,
        dims: [24, 24, 16],
        amplitude_mm: 1.0,
        noise_sigma: noise,
        ..DatasetSpec::desk(24, 500)
    };
    let samples: Vec<_> = spec.generate_all().unwrap().into_iter().map(|(s, _)| s).collect();
    // few training pairs, many test pairs: overfitting pressure
    let mut it = samples.into_iter();
    let train_set: Vec<_> = (&mut it).take(n_train).collect();
    let val: Vec<_> = (&mut it).take(2).collect();
    let test: Vec<_> = it.collect();
    let data = SplitDataset { train: train_set, val, test };

    let network = |enabled: QuantizerSet| NetworkConfig {
        stage_channels: vec![6, 12, 24, 32],
        convs_per_block: 2,
        dict_sizes: DictSizes { vanilla: kv, hierarchical: kv, collaborative: kv / 2 },
        dict_channels: DictChannels { vanilla: 32, hierarchical: 24, collaborative: 32 },
        enabled,
        input_dims: [24, 24, 16],
    };

    for (name, enabled) in [
        ("baseline", QuantizerSet::none()),
        ("vanilla", QuantizerSet { vanilla: true, ..QuantizerSet::none() }),
    ] {
        let mut gaps = Vec::new();
        let mut dscs = Vec::new();
        for seed in [0u64, 1, 2] {
            let mut cfg = TrainConfig::desk([24, 24, 16]);
            cfg.network = network(enabled);
            cfg.epochs = epochs;
            cfg.weights.lambda_q = lambda_q;
            cfg.seed = derive(1000, seed);
            let dir = tempfile::tempdir().unwrap();
            let outcome = train(&cfg, &data, dir.path(), None).unwrap();
            gaps.push(outcome.late_gap());
            dscs.push(outcome.late_test_dsc());
        }
        let mean_gap = gaps.iter().sum::<f64>() / 3.0;
        let mean_dsc = dscs.iter().sum::<f64>() / 3.0;
        println!(
            "{name}: gaps {:?} mean {mean_gap:.4}; test dsc mean {mean_dsc:.4}",
            gaps.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>()
        );
    }
}
