//! Sentence splitting and keyword bucketing of free-text reports.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OTHERS: &str = "others";

const DEFAULT_CATALOG: &str = include_str!("../catalog/chest_ct.toml");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureEntry {
    pub name: String,
    #[serde(default)]
    pub keywords: Vec<String>,
}

/// Ordered structures with their keyword lists; the last entry is "others".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureCatalog {
    #[serde(rename = "structure")]
    entries: Vec<StructureEntry>,
}

impl StructureCatalog {
    pub fn new(entries: Vec<StructureEntry>) -> Result<Self> {
        let entries = entries
            .into_iter()
            .map(|e| StructureEntry {
                keywords: e.keywords.iter().map(|k| k.trim().to_lowercase()).collect(),
                name: e.name,
            })
            .collect::<Vec<_>>();
        let Some(last) = entries.last() else {
            return Err(Error::Config("structure catalog is empty".into()));
        };
        if last.name != OTHERS || !last.keywords.is_empty() {
            return Err(Error::Config(
                "last catalog entry must be \"others\" with no keywords".into(),
            ));
        }
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate structure name {:?}", e.name)));
            }
            let is_last = i + 1 == entries.len();
            if !is_last && (e.keywords.is_empty() || e.keywords.iter().any(String::is_empty)) {
                return Err(Error::Config(format!("structure {:?} needs non-empty keywords", e.name)));
            }
            if !is_last && e.name == OTHERS {
                return Err(Error::Config("\"others\" must be the last entry".into()));
            }
        }
        Ok(Self { entries })
    }

    /// The ten-structure chest CT catalog shipped with the crate.
    pub fn chest_ct() -> Self {
        Self::from_toml(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: StructureCatalog =
            toml::from_str(text).map_err(|e| Error::Config(format!("catalog: {e}")))?;
        Self::new(raw.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("catalog serializes")
    }

    /// Keeps the first `n` named structures plus "others".
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.named_len() {
            return Err(Error::Param(format!(
                "cannot keep {n} of {} named structures",
                self.named_len()
            )));
        }
        let mut entries = self.entries[..n].to_vec();
        entries.push(self.entries.last().unwrap().clone());
        Self::new(entries)
    }

    /// Number of structures including "others".
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn named_len(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn others_index(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[StructureEntry] {
        &self.entries
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

/// Sentences of one report grouped by structure index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReport {
    pub subject_id: String,
    pub buckets: Vec<Vec<String>>,
    pub text: String,
}

impl ParsedReport {
    pub fn bucket(&self, i: usize) -> &[String] {
        &self.buckets[i]
    }

    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.buckets
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_empty())
            .map(|(i, _)| i)
    }
}

/// Splits on `.`, `!`, `?` and newlines. Spans are trimmed, terminators
/// dropped, and empty spans discarded.
pub fn split_sentences(report: &str) -> Vec<String> {
    report
        .split(['.', '!', '?', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Assigns each sentence to every structure with a keyword occurring in it
/// (case-insensitive substring match); sentences matching nothing go to "others".
pub fn bucket(sentences: &[String], catalog: &StructureCatalog) -> Vec<Vec<String>> {
    let mut buckets = vec![Vec::new(); catalog.len()];
    for s in sentences {
        let lower = s.to_lowercase();
        let mut hit = false;
        for (i, e) in catalog.entries[..catalog.named_len()].iter().enumerate() {
            if e.keywords.iter().any(|k| lower.contains(k.as_str())) {
                buckets[i].push(s.clone());
                hit = true;
            }
        }
        if !hit {
            buckets[catalog.others_index()].push(s.clone());
        }
    }
    buckets
}

pub fn parse_report(subject_id: &str, text: &str, catalog: &StructureCatalog) -> ParsedReport {
    ParsedReport {
        subject_id: subject_id.to_string(),
        buckets: bucket(&split_sentences(text), catalog),
        text: text.to_string(),
    }
}
