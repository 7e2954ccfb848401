//! Codebooks (dictionaries): K ordered code vectors of dimension C with an
//! initialization provenance tag, plus their on-disk format.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use vqreg_core::rng::rng;

use crate::error::VqError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookInit {
    Random,
    Kmeans,
}

impl CodebookInit {
    pub fn name(self) -> &'static str {
        match self {
            CodebookInit::Random => "random",
            CodebookInit::Kmeans => "kmeans",
        }
    }

    pub fn parse(s: &str) -> Result<Self, VqError> {
        match s {
            "random" => Ok(CodebookInit::Random),
            "kmeans" => Ok(CodebookInit::Kmeans),
            other => Err(VqError::MalformedFile(format!("unknown init_kind `{other}`"))),
        }
    }
}

/// Which of the three quantizers a dictionary belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookName {
    Vanilla,
    Hierarchical,
    Collaborative,
}

impl CodebookName {
    pub fn name(self) -> &'static str {
        match self {
            CodebookName::Vanilla => "vanilla",
            CodebookName::Hierarchical => "hierarchical",
            CodebookName::Collaborative => "collaborative",
        }
    }

    pub fn parse(s: &str) -> Result<Self, VqError> {
        match s {
            "vanilla" => Ok(CodebookName::Vanilla),
            "hierarchical" => Ok(CodebookName::Hierarchical),
            "collaborative" => Ok(CodebookName::Collaborative),
            other => Err(VqError::MalformedFile(format!("unknown codebook name `{other}`"))),
        }
    }
}

impl fmt::Display for CodebookName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An ordered set of K code vectors of dimension C, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    name: CodebookName,
    init_kind: CodebookInit,
    k: usize,
    c: usize,
    codes: Vec<f64>,
}

impl Codebook {
    pub fn new(
        name: CodebookName,
        init_kind: CodebookInit,
        k: usize,
        c: usize,
        codes: Vec<f64>,
    ) -> Result<Self, VqError> {
        if k < 1 || c < 1 {
            return Err(VqError::InvalidCodebook(format!("K and C must be >= 1, got K={k} C={c}")));
        }
        if codes.len() != k * c {
            return Err(VqError::InvalidCodebook(format!(
                "expected {} values for K={k} C={c}, got {}",
                k * c,
                codes.len()
            )));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(VqError::NonFinite("codebook"));
        }
        Ok(Self { name, init_kind, k, c, codes })
    }

    /// Random initialization, uniform in `[-1/K, 1/K]`.
    pub fn random(name: CodebookName, k: usize, c: usize, seed: u64) -> Result<Self, VqError> {
        if k < 1 || c < 1 {
            return Err(VqError::InvalidCodebook(format!("K and C must be >= 1, got K={k} C={c}")));
        }
        let mut r = rng(seed);
        let bound = 1.0 / k as f64;
        let codes: Vec<f64> = (0..k * c).map(|_| r.gen_range(-bound..bound)).collect();
        Self::new(name, CodebookInit::Random, k, c, codes)
    }

    #[inline]
    pub fn name(&self) -> CodebookName {
        self.name
    }
    #[inline]
    pub fn init_kind(&self) -> CodebookInit {
        self.init_kind
    }
    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn codes(&self) -> &[f64] {
        &self.codes
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.codes[i * self.c..(i + 1) * self.c]
    }

    /// Serialize: text header (k, c, init_kind, name, dtype) terminated by a
    /// blank line, then the row-major little-endian f64 payload.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VqError> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        let _ = writeln!(bytes, "format=vqreg-codebook");
        let _ = writeln!(bytes, "k={}", self.k);
        let _ = writeln!(bytes, "c={}", self.c);
        let _ = writeln!(bytes, "init_kind={}", self.init_kind.name());
        let _ = writeln!(bytes, "name={}", self.name.name());
        let _ = writeln!(bytes, "dtype=f64");
        bytes.push(b'\n');
        for v in &self.codes {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| VqError::Io { path: path.into(), source: e })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VqError> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| VqError::Io { path: path.into(), source: e })?;
        let sep = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| VqError::MalformedFile("no blank line after header".into()))?;
        let header = std::str::from_utf8(&bytes[..sep + 1])
            .map_err(|_| VqError::MalformedFile("header is not UTF-8".into()))?;
        let mut k = None;
        let mut c = None;
        let mut init_kind = None;
        let mut name = None;
        let mut dtype_ok = false;
        let mut format_ok = false;
        for line in header.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| VqError::MalformedFile(format!("bad header line `{line}`")))?;
            match key {
                "format" => format_ok = value == "vqreg-codebook",
                "k" => {
                    k = Some(value.parse::<usize>().map_err(|_| {
                        VqError::MalformedFile(format!("bad k `{value}`"))
                    })?)
                }
                "c" => {
                    c = Some(value.parse::<usize>().map_err(|_| {
                        VqError::MalformedFile(format!("bad c `{value}`"))
                    })?)
                }
                "init_kind" => init_kind = Some(CodebookInit::parse(value)?),
                "name" => name = Some(CodebookName::parse(value)?),
                "dtype" => dtype_ok = value == "f64",
                other => {
                    return Err(VqError::MalformedFile(format!("unknown key `{other}`")));
                }
            }
        }
        if !format_ok {
            return Err(VqError::MalformedFile("missing format=vqreg-codebook".into()));
        }
        if !dtype_ok {
            return Err(VqError::MalformedFile("only f64 payloads are supported".into()));
        }
        let (k, c) = match (k, c) {
            (Some(k), Some(c)) => (k, c),
            _ => return Err(VqError::MalformedFile("missing k or c".into())),
        };
        let init_kind =
            init_kind.ok_or_else(|| VqError::MalformedFile("missing init_kind".into()))?;
        let name = name.ok_or_else(|| VqError::MalformedFile("missing name".into()))?;
        let payload = &bytes[sep + 2..];
        if payload.len() != k * c * 8 {
            return Err(VqError::MalformedFile(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                k * c * 8
            )));
        }
        let codes: Vec<f64> = payload
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        Self::new(name, init_kind, k, c, codes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_init_is_bounded_and_deterministic() {
        let a = Codebook::random(CodebookName::Vanilla, 16, 8, 5).unwrap();
        let b = Codebook::random(CodebookName::Vanilla, 16, 8, 5).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 16.0;
        assert!(a.codes().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn rejects_degenerate_shapes_and_nonfinite() {
        assert!(Codebook::new(CodebookName::Vanilla, CodebookInit::Random, 0, 4, vec![]).is_err());
        assert!(
            Codebook::new(CodebookName::Vanilla, CodebookInit::Random, 1, 1, vec![f64::NAN])
                .is_err()
        );
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dc.cbk");
        let cb = Codebook::random(CodebookName::Collaborative, 8, 4, 9).unwrap();
        cb.save(&path).unwrap();
        let loaded = Codebook::load(&path).unwrap();
        assert_eq!(loaded, cb);
    }
}
