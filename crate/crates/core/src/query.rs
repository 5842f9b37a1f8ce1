//! User queries and labeled datasets.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ground-truth label attached to benchmark queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryLabel {
    Benign,
    /// Malicious query tagged with the attack family that produced it.
    Malicious(String),
}

impl QueryLabel {
    pub fn is_benign(&self) -> bool {
        matches!(self, QueryLabel::Benign)
    }

    pub fn attack_name(&self) -> Option<&str> {
        match self {
            QueryLabel::Benign => None,
            QueryLabel::Malicious(name) => Some(name),
        }
    }
}

/// A user query submitted to the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<QueryLabel>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, label: QueryLabel) -> Self {
        self.label = Some(label);
        self
    }

    /// Builds a query whose id is derived from the text. Used by the
    /// guardrail service, where requests carry only raw text; the derivation
    /// is fixed so service-side and library-side evaluation of the same text
    /// share every sampling substream.
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        let digest = Sha256::digest(text.as_bytes());
        let id = format!("q-{}", hex_prefix(&digest, 12));
        Self::new(id, text)
    }

    /// Detection requires non-empty text.
    pub fn validate_for_detection(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::InvalidInput(format!(
                "query `{}` has empty text",
                self.id
            )));
        }
        Ok(())
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes[..n].iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a JSONL dataset (one query object per line), checking id uniqueness.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut queries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let query: Query = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!(
                "{}:{}: malformed query: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if !seen.insert(query.id.clone()) {
            return Err(Error::InvalidInput(format!(
                "duplicate query id `{}` in {}",
                query.id,
                path.display()
            )));
        }
        queries.push(query);
    }
    Ok(queries)
}

/// Writes queries as JSONL, one object per line.
pub fn save_queries(path: impl AsRef<Path>, queries: &[Query]) -> Result<()> {
    let path = path.as_ref();
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for q in queries {
        let line = serde_json::to_string(q)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
