use vqreg_cli::dataset::DatasetSpec;
use vqreg_cli::trainer::unregistered_dsc;
use vqreg_cli::dataset::SplitDataset;

fn main() {
    for amp in [3.4f64, 3.6, 3.8] {
        let spec = DatasetSpec { amplitude_mm: amp, ..DatasetSpec::desk(50, 0) };
        match spec.generate_all() {
            Ok(samples) => {
                let s: Vec<_> = samples.into_iter().map(|(s, _)| s).collect();
                let data = SplitDataset::split(s, 42);
                println!(
                    "amp {amp}: ok; unreg train {:.4} test {:.4}",
                    unregistered_dsc(&data.train).unwrap(),
                    unregistered_dsc(&data.test).unwrap()
                );
            }
            Err(e) => println!("amp {amp}: FAIL {e}"),
        }
    }
}
