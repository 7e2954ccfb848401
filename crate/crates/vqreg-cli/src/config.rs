//! Training configuration: architecture + loss weights + optimizer +
//! schedule, parsed from the sectioned key=value config format and echoed
//! into every output artifact.

use std::path::Path;

use anyhow::{bail, Context, Result};
use vqreg_core::keyval::Document;
use vqreg_core::losses::LossWeights;
use vqreg_net::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => bail!("unknown profile `{other}`"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainDtype {
    F32,
    F64,
}

impl TrainDtype {
    pub fn name(self) -> &'static str {
        match self {
            TrainDtype::F32 => "f32",
            TrainDtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(TrainDtype::F32),
            "f64" => Ok(TrainDtype::F64),
            other => bail!("unknown dtype `{other}`"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub profile: Profile,
    pub dtype: TrainDtype,
}

impl TrainConfig {
    /// Desk profile: CPU-minutes scale. Two weights are retuned once for
    /// this grid: the bending weight (smaller volumes, per-voxel means) and
    /// the quantization weight, which scales the position-summed
    /// quantization losses down to the magnitude of the similarity terms.
    pub fn desk(input_dims: [usize; 3]) -> Self {
        Self {
            network: NetworkConfig::desk(input_dims),
            weights: LossWeights { lambda_q: 1e-4, lambda_b: 3.0, ..LossWeights::reference() },
            lr: 3e-3,
            batch_size: 4,
            epochs: 200,
            seed: 0,
            profile: Profile::Desk,
            dtype: TrainDtype::F32,
        }
    }

    /// Reference profile mirroring the full-scale setup: batch 4, Adam at
    /// 1e-4, up to 1000 epochs, weights (1, 1, 1, 50).
    pub fn paper(input_dims: [usize; 3]) -> Self {
        Self {
            network: NetworkConfig::paper(input_dims),
            weights: LossWeights::reference(),
            lr: 1e-4,
            batch_size: 4,
            epochs: 1000,
            seed: 0,
            profile: Profile::Paper,
            dtype: TrainDtype::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate().map_err(|e| anyhow::anyhow!(e.to_string()))?;
        self.weights.validate().map_err(|e| anyhow::anyhow!(e.to_string()))?;
        if self.batch_size == 0 || self.epochs == 0 {
            bail!("batch_size and epochs must be > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("learning rate must be positive");
        }
        match self.profile {
            Profile::Paper => {
                if self.batch_size != 4 {
                    bail!("paper profile fixes batch_size = 4");
                }
                if (self.lr - 1e-4).abs() > 1e-12 {
                    bail!("paper profile fixes lr = 1e-4");
                }
                if self.epochs > 1000 {
                    bail!("paper profile trains for at most 1000 epochs");
                }
            }
            Profile::Desk => {
                if self.epochs > 500 {
                    bail!("desk profile is bounded to 500 epochs");
                }
                if self.network.input_dims.iter().any(|&d| d > 64) {
                    bail!("desk profile is bounded to 64 voxels per axis");
                }
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> Document {
        let mut doc = Document::new();
        self.network.to_keyval(&mut doc);
        doc.set("loss", "lambda_q", self.weights.lambda_q);
        doc.set("loss", "lambda_s", self.weights.lambda_s);
        doc.set("loss", "lambda_d", self.weights.lambda_d);
        doc.set("loss", "lambda_b", self.weights.lambda_b);
        doc.set("loss", "beta", self.weights.beta);
        doc.set("train", "profile", self.profile.name());
        doc.set("train", "optimizer", "adam");
        doc.set("train", "lr", self.lr);
        doc.set("train", "batch_size", self.batch_size);
        doc.set("train", "epochs", self.epochs);
        doc.set("train", "seed", self.seed);
        doc.set("train", "dtype", self.dtype.name());
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        let network =
            NetworkConfig::from_keyval(doc).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let f = |key: &str, default: f64| -> Result<f64> {
            Ok(doc
                .get_parsed::<f64>("loss", key)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .unwrap_or(default))
        };
        let weights = LossWeights {
            lambda_q: f("lambda_q", 1.0)?,
            lambda_s: f("lambda_s", 1.0)?,
            lambda_d: f("lambda_d", 1.0)?,
            lambda_b: f("lambda_b", 50.0)?,
            beta: f("beta", 0.25)?,
        };
        let profile = Profile::parse(doc.get("train", "profile").unwrap_or("desk"))?;
        let dtype = TrainDtype::parse(doc.get("train", "dtype").unwrap_or("f32"))?;
        let cfg = Self {
            network,
            weights,
            lr: doc
                .get_parsed::<f64>("train", "lr")
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .unwrap_or(1e-4),
            batch_size: doc
                .get_parsed::<usize>("train", "batch_size")
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .unwrap_or(4),
            epochs: doc
                .get_parsed::<usize>("train", "epochs")
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .unwrap_or(200),
            seed: doc
                .get_parsed::<u64>("train", "seed")
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .unwrap_or(0),
            profile,
            dtype,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let doc = Document::parse(&text).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        Self::from_document(&doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_document().render())
            .with_context(|| format!("writing config {}", path.as_ref().display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_document_round_trip() {
        let cfg = TrainConfig::desk([32, 32, 24]);
        let doc = cfg.to_document();
        let back = TrainConfig::from_document(&doc).unwrap();
        assert_eq!(back.network, cfg.network);
        assert_eq!(back.weights, cfg.weights);
        assert_eq!(back.epochs, cfg.epochs);
        assert_eq!(back.profile, cfg.profile);
    }

    #[test]
    fn paper_profile_invariants_are_enforced() {
        let mut cfg = TrainConfig::paper([32, 32, 24]);
        cfg.network = NetworkConfig::desk([32, 32, 24]);
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 8;
        assert!(cfg.validate().is_err());
        let mut cfg2 = TrainConfig::paper([32, 32, 24]);
        cfg2.network = NetworkConfig::desk([32, 32, 24]);
        cfg2.epochs = 1001;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn desk_profile_is_bounded() {
        let mut cfg = TrainConfig::desk([32, 32, 24]);
        cfg.epochs = 501;
        assert!(cfg.validate().is_err());
    }
}
