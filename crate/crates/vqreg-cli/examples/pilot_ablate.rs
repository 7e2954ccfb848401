use vqreg_cli::config::TrainConfig;
use vqreg_cli::dataset::{DatasetSpec, SplitDataset};
use vqreg_cli::experiments::{run_ablation, ArmSpec};
use vqreg_net::bootstrap::BootstrapConfig;
use vqreg_net::config::{DictChannels, DictSizes, NetworkConfig, QuantizerSet};

fn main() {
    vqreg_cli::tune_allocator();
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let amplitude: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.2);
    let count: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(24);

    let spec = DatasetSpec {
        count,
        dims: [24, 24, 16],
        amplitude_mm: amplitude,
        noise_sigma: 0.03,
        ..DatasetSpec::desk(count, 700)
    };
    let samples: Vec<_> = spec.generate_all().unwrap().into_iter().map(|(s, _)| s).collect();
    let mut it = samples.into_iter();
    let train: Vec<_> = (&mut it).take(12).collect();
    let val: Vec<_> = (&mut it).take(2).collect();
    let test: Vec<_> = it.collect();
    let data = SplitDataset { train, val, test };

    let mut cfg = TrainConfig::desk([24, 24, 16]);
    cfg.network = NetworkConfig {
        stage_channels: vec![6, 12, 24, 32],
        convs_per_block: 2,
        dict_sizes: DictSizes { vanilla: 16, hierarchical: 16, collaborative: 8 },
        dict_channels: DictChannels { vanilla: 32, hierarchical: 24, collaborative: 32 },
        enabled: QuantizerSet::all(),
        input_dims: [24, 24, 16],
    };
    cfg.epochs = epochs;
    let bcfg = BootstrapConfig {
        seg_epochs: 25,
        k_c: cfg.network.dict_sizes.collaborative,
        seed: cfg.seed,
        ..BootstrapConfig::default()
    };
    let arms = [
        ArmSpec::parse("none").unwrap(),
        ArmSpec::parse("v").unwrap(),
        ArmSpec::parse("v+h+c").unwrap(),
    ];
    let dir = tempfile::tempdir().unwrap();
    let report = run_ablation(&cfg, &data, &arms, &[0, 1, 2], &bcfg, dir.path()).unwrap();
    println!("{}", report.to_table());
    for arm in ["none", "v", "v+h+c"] {
        let tre = report.mean_over_seeds(arm, |r| r.test_tre);
        let dsc = report.mean_over_seeds(arm, |r| r.test_dsc);
        println!("{arm}: mean TRE {tre:.4} mm, mean DSC {dsc:.4}");
    }
}
