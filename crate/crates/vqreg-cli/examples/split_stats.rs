use vqreg_cli::dataset::{DatasetSpec, SplitDataset};
use vqreg_cli::trainer::unregistered_dsc;
use vqreg_core::metrics::tre;
use vqreg_core::DisplacementField;

fn main() {
    let dir = std::env::args().nth(1).expect("dataset dir");
    let samples: Vec<_> =
        DatasetSpec::load_dir(std::path::Path::new(&dir)).unwrap().into_iter().map(|(s, _)| s).collect();
    let data = SplitDataset::split(samples, 42);
    println!("train/val/test: {:?}", data.counts());
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let d = unregistered_dsc(split).unwrap();
        let mut tre_sum = 0.0;
        let mut tre_n = 0usize;
        for s in split.iter() {
            let identity = DisplacementField::zeros(s.dims(), s.spacing());
            for v in tre(s, &identity).unwrap() {
                tre_sum += v;
                tre_n += 1;
            }
        }
        println!("{name}: unregistered DSC {:.4}, unregistered TRE {:.3} mm", d, tre_sum / tre_n as f64);
    }
}
