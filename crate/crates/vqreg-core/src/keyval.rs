//! Sectioned `key=value` text documents: the configuration format used by
//! the CLI and echoed into every output artifact.
//!
//! ```text
//! # comment
//! [section]
//! key=value
//! ```

use crate::error::CoreError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Document {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, CoreError> {
        let mut doc = Document::new();
        let mut current: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        CoreError::Config(format!("line {}: unterminated section", lineno + 1))
                    })?
                    .trim()
                    .to_string();
                if doc.sections.iter().any(|(n, _)| *n == name) {
                    return Err(CoreError::Config(format!(
                        "line {}: duplicate section `{name}`",
                        lineno + 1
                    )));
                }
                doc.sections.push((name, Vec::new()));
                current = Some(doc.sections.len() - 1);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let idx = match current {
                Some(i) => i,
                None => {
                    doc.sections.push((String::new(), Vec::new()));
                    current = Some(doc.sections.len() - 1);
                    doc.sections.len() - 1
                }
            };
            let key = key.trim().to_string();
            let entries = &mut doc.sections[idx].1;
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(CoreError::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            entries.push((key, value.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        let idx = match self.sections.iter().position(|(n, _)| n == section) {
            Some(i) => i,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        let entries = &mut self.sections[idx].1;
        match entries.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value.to_string(),
            None => entries.push((key.to_string(), value.to_string())),
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)?
            .1
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, CoreError> {
        self.get(section, key)
            .ok_or_else(|| CoreError::Config(format!("missing [{section}] {key}")))
    }

    pub fn get_parsed<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<Option<T>, CoreError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                CoreError::Config(format!("[{section}] {key}: cannot parse `{v}`"))
            }),
        }
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &[(String, String)])> {
        self.sections.iter().map(|(n, e)| (n.as_str(), e.as_slice()))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            if !name.is_empty() {
                out.push_str(&format!("[{name}]\n"));
            }
            for (k, v) in entries {
                out.push_str(&format!("{k}={v}\n"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# top comment\n[network]\nstage_channels=8 16 32 64\n\n[train]\nepochs=200\nlr=0.0001\n";
        let doc = Document::parse(text).unwrap();
        assert_eq!(doc.get("network", "stage_channels"), Some("8 16 32 64"));
        assert_eq!(doc.get_parsed::<usize>("train", "epochs").unwrap(), Some(200));
        let rendered = doc.render();
        let reparsed = Document::parse(&rendered).unwrap();
        assert_eq!(doc, reparsed);
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(Document::parse("[a]\nx=1\nx=2\n").is_err());
        assert!(Document::parse("[a]\n[a]\n").is_err());
    }

    #[test]
    fn set_overwrites() {
        let mut doc = Document::new();
        doc.set("s", "k", 1);
        doc.set("s", "k", 2);
        assert_eq!(doc.get("s", "k"), Some("2"));
    }
}
