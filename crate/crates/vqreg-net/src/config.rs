//! Architecture configuration for the registration network.

use vqreg_core::keyval::Document;

use crate::error::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    Vanilla,
    Hierarchical,
    Collaborative,
}

/// Which quantizers are active; disabled ones become identity pass-throughs
/// with zero loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QuantizerSet {
    pub vanilla: bool,
    pub hierarchical: bool,
    pub collaborative: bool,
}

impl QuantizerSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self { vanilla: true, hierarchical: true, collaborative: true }
    }

    pub fn any(&self) -> bool {
        self.vanilla || self.hierarchical || self.collaborative
    }

    /// Compact tag: `none`, `v`, `v+h`, `v+h+c`, ...
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.vanilla {
            parts.push("v");
        }
        if self.hierarchical {
            parts.push("h");
        }
        if self.collaborative {
            parts.push("c");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(s: &str) -> Result<Self, NetError> {
        if s == "none" {
            return Ok(Self::none());
        }
        let mut set = Self::none();
        for part in s.split('+') {
            match part {
                "v" | "vanilla" => set.vanilla = true,
                "h" | "hierarchical" => set.hierarchical = true,
                "c" | "collaborative" => set.collaborative = true,
                other => {
                    return Err(NetError::InvalidConfig(format!(
                        "unknown quantizer `{other}` in `{s}`"
                    )))
                }
            }
        }
        Ok(set)
    }
}

/// Dictionary sizes (K) per quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DictSizes {
    pub vanilla: usize,
    pub hierarchical: usize,
    pub collaborative: usize,
}

/// Code dimensions (C) per quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DictChannels {
    pub vanilla: usize,
    pub hierarchical: usize,
    pub collaborative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Encoder channels per residual stage; stage 0 runs at full resolution,
    /// every later stage halves the grid.
    pub stage_channels: Vec<usize>,
    /// Convolutions per residual block (2 or 3).
    pub convs_per_block: usize,
    pub dict_sizes: DictSizes,
    pub dict_channels: DictChannels,
    pub enabled: QuantizerSet,
    pub input_dims: [usize; 3],
}

impl NetworkConfig {
    /// Desk-scale profile: CPU-trainable in minutes. Keeps the K ratios of
    /// the reference profile at reduced size.
    pub fn desk(input_dims: [usize; 3]) -> Self {
        Self {
            stage_channels: vec![8, 16, 32, 64],
            convs_per_block: 3,
            dict_sizes: DictSizes { vanilla: 64, hierarchical: 64, collaborative: 32 },
            dict_channels: DictChannels { vanilla: 64, hierarchical: 32, collaborative: 64 },
            enabled: QuantizerSet::all(),
            input_dims,
        }
    }

    /// Reference full-scale profile: 4 residual blocks (12 convolutions),
    /// hierarchical codes of dimension 128, bottleneck codes of dimension
    /// 256, vocabulary sizes 1024/1024/512.
    pub fn paper(input_dims: [usize; 3]) -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256],
            convs_per_block: 3,
            dict_sizes: DictSizes { vanilla: 1024, hierarchical: 1024, collaborative: 512 },
            dict_channels: DictChannels { vanilla: 256, hierarchical: 128, collaborative: 256 },
            enabled: QuantizerSet::all(),
            input_dims,
        }
    }

    pub fn with_quantizers(mut self, enabled: QuantizerSet) -> Self {
        self.enabled = enabled;
        self
    }

    pub fn n_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn base_channels(&self) -> usize {
        self.stage_channels[0]
    }

    /// Number of 2x downsamplings between input and bottleneck.
    pub fn depth(&self) -> usize {
        self.n_stages() - 1
    }

    /// Internal grid: input dims padded up to a multiple of `2^depth`.
    pub fn padded_dims(&self) -> [usize; 3] {
        let m = 1usize << self.depth();
        let mut out = [0usize; 3];
        for a in 0..3 {
            out[a] = self.input_dims[a].div_ceil(m) * m;
        }
        out
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.n_stages() < 2 {
            return Err(NetError::InvalidConfig("need at least 2 encoder stages".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(NetError::InvalidConfig("stage channels must be > 0".into()));
        }
        if !(self.convs_per_block == 2 || self.convs_per_block == 3) {
            return Err(NetError::InvalidConfig(format!(
                "convs_per_block must be 2 or 3, got {}",
                self.convs_per_block
            )));
        }
        // bottleneck heads are concatenated on one grid, so C_v == C_c
        if self.dict_channels.vanilla != self.dict_channels.collaborative {
            return Err(NetError::InvalidConfig(format!(
                "vanilla and collaborative code dimensions must match ({} vs {})",
                self.dict_channels.vanilla, self.dict_channels.collaborative
            )));
        }
        // the hierarchical quantizer consumes the penultimate stage directly
        let hier_stage_ch = self.stage_channels[self.n_stages() - 2];
        if self.dict_channels.hierarchical != hier_stage_ch {
            return Err(NetError::InvalidConfig(format!(
                "hierarchical code dimension {} must equal the penultimate stage channels {}",
                self.dict_channels.hierarchical, hier_stage_ch
            )));
        }
        for (name, k) in [
            ("vanilla", self.dict_sizes.vanilla),
            ("hierarchical", self.dict_sizes.hierarchical),
            ("collaborative", self.dict_sizes.collaborative),
        ] {
            if k == 0 {
                return Err(NetError::InvalidConfig(format!("{name} dictionary size is 0")));
            }
        }
        let m = 1usize << self.depth();
        for (a, &d) in self.input_dims.iter().enumerate() {
            if d < m {
                return Err(NetError::InvalidConfig(format!(
                    "input dim {a} = {d} is smaller than the downsampling factor {m}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_keyval(&self, doc: &mut Document) {
        let ch: Vec<String> = self.stage_channels.iter().map(|c| c.to_string()).collect();
        doc.set("network", "stage_channels", ch.join(" "));
        doc.set("network", "convs_per_block", self.convs_per_block);
        doc.set("network", "dict_size_v", self.dict_sizes.vanilla);
        doc.set("network", "dict_size_h", self.dict_sizes.hierarchical);
        doc.set("network", "dict_size_c", self.dict_sizes.collaborative);
        doc.set("network", "dict_channels_v", self.dict_channels.vanilla);
        doc.set("network", "dict_channels_h", self.dict_channels.hierarchical);
        doc.set("network", "dict_channels_c", self.dict_channels.collaborative);
        doc.set("network", "quantizers", self.enabled.tag());
        doc.set(
            "network",
            "input_dims",
            format!("{} {} {}", self.input_dims[0], self.input_dims[1], self.input_dims[2]),
        );
    }

    pub fn from_keyval(doc: &Document) -> Result<Self, NetError> {
        let parse_usize_list = |s: &str| -> Result<Vec<usize>, NetError> {
            s.split_whitespace()
                .map(|p| {
                    p.parse::<usize>()
                        .map_err(|_| NetError::InvalidConfig(format!("bad integer `{p}`")))
                })
                .collect()
        };
        let req = |key: &str| -> Result<String, NetError> {
            doc.require("network", key)
                .map(|s| s.to_string())
                .map_err(|e| NetError::InvalidConfig(e.to_string()))
        };
        let stage_channels = parse_usize_list(&req("stage_channels")?)?;
        let dims_v = parse_usize_list(&req("input_dims")?)?;
        if dims_v.len() != 3 {
            return Err(NetError::InvalidConfig("input_dims must have 3 components".into()));
        }
        let get_usize = |key: &str| -> Result<usize, NetError> {
            req(key)?
                .parse::<usize>()
                .map_err(|_| NetError::InvalidConfig(format!("bad integer for {key}")))
        };
        let cfg = Self {
            stage_channels,
            convs_per_block: get_usize("convs_per_block")?,
            dict_sizes: DictSizes {
                vanilla: get_usize("dict_size_v")?,
                hierarchical: get_usize("dict_size_h")?,
                collaborative: get_usize("dict_size_c")?,
            },
            dict_channels: DictChannels {
                vanilla: get_usize("dict_channels_v")?,
                hierarchical: get_usize("dict_channels_h")?,
                collaborative: get_usize("dict_channels_c")?,
            },
            enabled: QuantizerSet::parse(&req("quantizers")?)?,
            input_dims: [dims_v[0], dims_v[1], dims_v[2]],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_paper_profiles_validate() {
        assert!(NetworkConfig::desk([32, 32, 24]).validate().is_ok());
        assert!(NetworkConfig::paper([128, 128, 102]).validate().is_ok());
    }

    #[test]
    fn mismatched_head_channels_rejected() {
        let mut cfg = NetworkConfig::desk([32, 32, 24]);
        cfg.dict_channels.collaborative = 32;
        assert!(cfg.validate().is_err());
        let mut cfg2 = NetworkConfig::desk([32, 32, 24]);
        cfg2.dict_channels.hierarchical = 16;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn padding_rounds_up_to_the_downsampling_grid() {
        let cfg = NetworkConfig::paper([128, 128, 102]);
        assert_eq!(cfg.padded_dims(), [128, 128, 104]);
        let cfg2 = NetworkConfig::desk([32, 32, 24]);
        assert_eq!(cfg2.padded_dims(), [32, 32, 24]);
    }

    #[test]
    fn keyval_round_trip() {
        let cfg = NetworkConfig::desk([32, 32, 24])
            .with_quantizers(QuantizerSet { vanilla: true, hierarchical: false, collaborative: true });
        let mut doc = Document::new();
        cfg.to_keyval(&mut doc);
        let back = NetworkConfig::from_keyval(&doc).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn quantizer_set_tags() {
        assert_eq!(QuantizerSet::none().tag(), "none");
        assert_eq!(QuantizerSet::all().tag(), "v+h+c");
        assert_eq!(QuantizerSet::parse("v+c").unwrap().tag(), "v+c");
        assert!(QuantizerSet::parse("v+x").is_err());
    }
}
