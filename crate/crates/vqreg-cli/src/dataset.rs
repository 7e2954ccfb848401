//! Synthetic dataset generation to disk, loading, and the subject-level
//! train/validation/test split.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use vqreg_core::io;
use vqreg_core::keyval::Document;
use vqreg_core::rng::{derive, rng};
use vqreg_core::synth::{generate, SynthSpec};
use vqreg_core::volume::RegistrationSample;
use vqreg_core::DisplacementField;

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub count: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub amplitude_mm: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn desk(count: usize, seed: u64) -> Self {
        Self {
            count,
            dims: [32, 32, 24],
            spacing: [0.7; 3],
            amplitude_mm: 3.6,
            noise_sigma: 0.02,
            seed,
        }
    }

    fn to_document(&self) -> Document {
        let mut doc = Document::new();
        doc.set("dataset", "count", self.count);
        doc.set(
            "dataset",
            "dims",
            format!("{} {} {}", self.dims[0], self.dims[1], self.dims[2]),
        );
        doc.set(
            "dataset",
            "spacing",
            format!("{} {} {}", self.spacing[0], self.spacing[1], self.spacing[2]),
        );
        doc.set("dataset", "amplitude_mm", self.amplitude_mm);
        doc.set("dataset", "noise_sigma", self.noise_sigma);
        doc.set("dataset", "seed", self.seed);
        doc
    }

    pub fn sample_spec(&self, index: usize) -> SynthSpec {
        SynthSpec {
            dims: self.dims,
            spacing: self.spacing,
            deform_amplitude_mm: self.amplitude_mm,
            noise_sigma: self.noise_sigma,
            seed: derive(self.seed, index as u64),
        }
    }

    /// Generate all samples in memory (ground truth included).
    pub fn generate_all(&self) -> Result<Vec<(RegistrationSample, DisplacementField)>> {
        (0..self.count)
            .map(|i| {
                let out = generate(&self.sample_spec(i))
                    .map_err(|e| anyhow::anyhow!("sample {i}: {e}"))?;
                Ok((out.sample, out.ground_truth))
            })
            .collect()
    }

    /// Write the dataset to a directory with a manifest.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating dataset dir {}", dir.display()))?;
        for i in 0..self.count {
            let out = generate(&self.sample_spec(i))
                .map_err(|e| anyhow::anyhow!("sample {i}: {e}"))?;
            let stem = |suffix: &str| dir.join(format!("s{i:03}.{suffix}"));
            io::save_volume(&out.sample.moving, stem("moving.vol"))?;
            io::save_volume(&out.sample.fixed, stem("fixed.vol"))?;
            io::save_mask(&out.sample.moving_mask, stem("moving_mask.vol"))?;
            io::save_mask(&out.sample.fixed_mask, stem("fixed_mask.vol"))?;
            io::save_landmarks(&out.sample.moving_landmarks, stem("moving.lmk"))?;
            io::save_landmarks(&out.sample.fixed_landmarks, stem("fixed.lmk"))?;
            io::save_ddf(&out.ground_truth, stem("gt.ddf"))?;
        }
        std::fs::write(dir.join("manifest.txt"), self.to_document().render())
            .context("writing manifest")?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.txt"))
            .with_context(|| format!("reading manifest in {}", dir.display()))?;
        let doc = Document::parse(&text).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let triple = |key: &str| -> Result<Vec<f64>> {
            let s = doc.require("dataset", key).map_err(|e| anyhow::anyhow!(e.to_string()))?;
            let v: Vec<f64> = s
                .split_whitespace()
                .map(|p| p.parse::<f64>().map_err(|_| anyhow::anyhow!("bad {key}")))
                .collect::<Result<_>>()?;
            if v.len() != 3 {
                bail!("{key} must have 3 components");
            }
            Ok(v)
        };
        let dims = triple("dims")?;
        let spacing = triple("spacing")?;
        Ok(Self {
            count: doc
                .get_parsed::<usize>("dataset", "count")
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .context("missing count")?,
            dims: [dims[0] as usize, dims[1] as usize, dims[2] as usize],
            spacing: [spacing[0], spacing[1], spacing[2]],
            amplitude_mm: doc
                .get_parsed::<f64>("dataset", "amplitude_mm")
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .context("missing amplitude_mm")?,
            noise_sigma: doc
                .get_parsed::<f64>("dataset", "noise_sigma")
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .context("missing noise_sigma")?,
            seed: doc
                .get_parsed::<u64>("dataset", "seed")
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .context("missing seed")?,
        })
    }

    /// Load a dataset previously written with [`DatasetSpec::write_to`].
    pub fn load_dir(dir: &Path) -> Result<Vec<(RegistrationSample, Option<DisplacementField>)>> {
        let spec = Self::read_manifest(dir)?;
        let mut out = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let stem = |suffix: &str| -> PathBuf { dir.join(format!("s{i:03}.{suffix}")) };
            let sample = RegistrationSample::new(
                format!("s{i:03}"),
                io::load_volume(stem("moving.vol"))?,
                io::load_volume(stem("fixed.vol"))?,
                io::load_mask(stem("moving_mask.vol"))?,
                io::load_mask(stem("fixed_mask.vol"))?,
                io::load_landmarks(stem("moving.lmk"))?,
                io::load_landmarks(stem("fixed.lmk"))?,
            )?;
            let gt_path = stem("gt.ddf");
            let gt = if gt_path.exists() { Some(io::load_ddf(gt_path)?) } else { None };
            out.push((sample, gt));
        }
        Ok(out)
    }
}

/// Subject-level 70/10/20 split.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<RegistrationSample>,
    pub val: Vec<RegistrationSample>,
    pub test: Vec<RegistrationSample>,
}

impl SplitDataset {
    pub fn split(samples: Vec<RegistrationSample>, split_seed: u64) -> Self {
        let n = samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(derive(split_seed, 0xD5)));
        let n_train = ((n as f64) * 0.7).round() as usize;
        let n_val = (((n as f64) * 0.1).round() as usize).max(if n >= 10 { 1 } else { 0 });
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        let mut by_index: Vec<Option<RegistrationSample>> =
            samples.into_iter().map(Some).collect();
        let mut take = |idx: &[usize]| -> Vec<RegistrationSample> {
            idx.iter().map(|&i| by_index[i].take().expect("unique index")).collect()
        };
        let train = take(&order[..n_train]);
        let val = take(&order[n_train..n_train + n_val]);
        let test = take(&order[n_train + n_val..]);
        Self { train, val, test }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let spec = DatasetSpec { count: 10, ..DatasetSpec::desk(10, 3) };
        let samples: Vec<RegistrationSample> =
            spec.generate_all().unwrap().into_iter().map(|(s, _)| s).collect();
        let a = SplitDataset::split(samples.clone(), 42);
        let b = SplitDataset::split(samples, 42);
        assert_eq!(a.counts(), (7, 1, 2));
        let ids = |v: &[RegistrationSample]| -> Vec<String> {
            v.iter().map(|s| s.subject_id.clone()).collect()
        };
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
        let mut all: Vec<String> = ids(&a.train);
        all.extend(ids(&a.val));
        all.extend(ids(&a.test));
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            count: 2,
            dims: [16, 16, 16],
            amplitude_mm: 0.5,
            ..DatasetSpec::desk(2, 9)
        };
        spec.write_to(dir.path()).unwrap();
        let loaded = DatasetSpec::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        let direct = spec.generate_all().unwrap();
        // f32 storage: loaded data equals the generated data at f32 precision
        for ((ls, lgt), (ds, dgt)) in loaded.iter().zip(&direct) {
            assert_eq!(ls.dims(), ds.dims());
            for (a, b) in ls.moving.data().iter().zip(ds.moving.data()) {
                assert_eq!(*a, *b as f32 as f64);
            }
            assert_eq!(ls.moving_mask.data(), ds.moving_mask.data());
            let lgt = lgt.as_ref().unwrap();
            assert_eq!(lgt.data(), dgt.data());
        }
    }
}
