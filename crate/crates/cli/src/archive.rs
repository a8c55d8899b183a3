//! Text archive of a param store.
//!
//! ```json
//! {"format_version": "1",
//!  "entries": {"q_scale": {"constraint": "positive", "shape": [], "data": [-0.34]}}}
//! ```
//!
//! `data` holds unconstrained values in row-major order. Floats are written
//! in shortest round-trip form and read back exactly.

use std::path::Path;

use effectppl::effects::{Constraint, ParamStore};
use effectppl::tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported archive format_version `{found}` (expected `{FORMAT_VERSION}`)")]
    Version { found: String },
    #[error("malformed archive: {0}")]
    Syntax(String),
    #[error("malformed archive entry `{name}`: {reason}")]
    Entry { name: String, reason: String },
    #[error("param `{name}` has a non-finite value and cannot be archived")]
    NonFinite { name: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    constraint: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Archive<'a> {
    format_version: &'a str,
    entries: IndexMap<&'a str, Entry>,
}

#[derive(Debug, Deserialize)]
struct RawArchive {
    format_version: serde_json::Value,
    entries: IndexMap<String, serde_json::Value>,
}

pub fn to_string(store: &ParamStore) -> Result<String, ArchiveError> {
    let mut entries = IndexMap::new();
    for (name, e) in store.iter() {
        let data = e.unconstrained().to_vec();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ArchiveError::NonFinite { name: name.into() });
        }
        entries.insert(
            name,
            Entry {
                constraint: e.constraint().as_str().into(),
                shape: e.unconstrained().shape().to_vec(),
                data,
            },
        );
    }
    let archive = Archive {
        format_version: FORMAT_VERSION,
        entries,
    };
    Ok(serde_json::to_string_pretty(&archive).expect("plain data serializes") + "\n")
}

/// Parses an archive into a fresh store.
pub fn from_str(text: &str) -> Result<ParamStore, ArchiveError> {
    let raw: RawArchive = serde_json::from_str(text).map_err(|e| ArchiveError::Syntax(e.to_string()))?;
    match raw.format_version.as_str() {
        Some(FORMAT_VERSION) => {}
        _ => {
            return Err(ArchiveError::Version {
                found: raw.format_version.to_string().trim_matches('"').to_string(),
            })
        }
    }
    let mut store = ParamStore::new();
    for (name, value) in raw.entries {
        let bad = |reason: String| ArchiveError::Entry {
            name: name.clone(),
            reason,
        };
        let entry: Entry = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        let constraint =
            Constraint::parse(&entry.constraint).ok_or_else(|| bad(format!("unknown constraint `{}`", entry.constraint)))?;
        let tensor = Tensor::new(entry.data, &entry.shape).map_err(|e| bad(e.to_string()))?;
        store.insert_unconstrained(&name, tensor, constraint);
    }
    Ok(store)
}

pub fn save_params(path: impl AsRef<Path>, store: &ParamStore) -> Result<(), ArchiveError> {
    let path = path.as_ref();
    std::fs::write(path, to_string(store)?).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an archive and inserts every entry into `store`, replacing params
/// of the same name.
pub fn load_params(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<(), ArchiveError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let loaded = from_str(&text)?;
    for (name, e) in loaded.iter() {
        store.insert_unconstrained(name, e.unconstrained().clone(), e.constraint());
    }
    Ok(())
}
