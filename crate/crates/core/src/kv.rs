//! Line-oriented `key = value` files with optional `[section]` headers.
//!
//! Used for corpus manifests, experiment configs and decoder weight files.

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: malformed section header {text:?}")]
    Section { line: usize, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parsed file, entries kept in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    pub entries: Vec<KvEntry>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = Vec::new();
        let mut section = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(KvError::Section {
                        line: line_no,
                        text: raw.to_string(),
                    });
                }
                section = Some(line[1..line.len() - 1].trim().to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(KvError::Syntax {
                    line: line_no,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(KvError::Syntax {
                    line: line_no,
                    text: raw.to_string(),
                });
            }
            entries.push(KvEntry {
                section: section.clone(),
                key: key.to_string(),
                value: value.trim().to_string(),
                line: line_no,
            });
        }
        Ok(KvFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self, KvError> {
        let text = std::fs::read_to_string(path).map_err(|source| KvError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Last value for `key` in `section` (`None` = top level).
    pub fn get(&self, section: Option<&str>, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.section.as_deref() == section && e.key == key)
            .map(|e| e.value.as_str())
    }

    /// All values for `key` in `section`, in file order.
    pub fn get_all<'a>(&'a self, section: Option<&'a str>, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.section.as_deref() == section && e.key == key)
            .map(|e| e.value.as_str())
    }

    pub fn sections(&self) -> Vec<Option<&str>> {
        let mut out: Vec<Option<&str>> = Vec::new();
        for e in &self.entries {
            let s = e.section.as_deref();
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn push(&mut self, section: Option<&str>, key: &str, value: impl fmt::Display) {
        self.entries.push(KvEntry {
            section: section.map(str::to_string),
            key: key.to_string(),
            value: value.to_string(),
            line: 0,
        });
    }
}

impl fmt::Display for KvFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut current: Option<&str> = None;
        for e in &self.entries {
            if e.section.as_deref() != current {
                if let Some(s) = e.section.as_deref() {
                    writeln!(f, "[{s}]")?;
                }
                current = e.section.as_deref();
            }
            writeln!(f, "{} = {}", e.key, e.value)?;
        }
        Ok(())
    }
}
