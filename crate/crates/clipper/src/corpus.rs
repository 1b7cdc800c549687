//! Dataset model, JSONL ingestion/emission, and stable sample identity.
//!
//! A dataset is an ordered list of (image, query, label) triples read from a
//! JSONL file, one object per line:
//!
//! ```text
//! {"id": "x1", "image": {"uri": "img/0001.png"}, "query": "...", "label": "...", "meta": {...}}
//! ```
//!
//! Images are never decoded here; they are opaque references forwarded to the
//! model backend as-is. Missing ids are synthesized as `<source>#<line>` so
//! manifests stay meaningful across machines.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} line {line}: malformed JSON: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        path: String,
        id: String,
        first: usize,
        second: usize,
    },

    #[error("{path} line {line}: missing or empty required field {field:?}")]
    MissingField {
        path: String,
        line: usize,
        field: String,
    },

    #[error("unknown ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
}

/// Opaque image reference: either a URI or an inline base64 payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Uri { uri: String },
    Inline { b64: String, media_type: String },
}

impl ImageRef {
    /// The string a chat backend embeds as the image URL part: the URI
    /// itself, or a data URL for inline payloads.
    pub fn as_url(&self) -> String {
        match self {
            ImageRef::Uri { uri } => uri.clone(),
            ImageRef::Inline { b64, media_type } => {
                format!("data:{media_type};base64,{b64}")
            }
        }
    }
}

/// One training triple: image reference, query text, ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: ImageRef,
    pub query: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

/// Raw line shape: id and meta are optional on disk.
#[derive(Deserialize)]
struct RawSample {
    id: Option<String>,
    image: Option<ImageRef>,
    query: Option<String>,
    label: Option<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// An ordered, immutable collection of samples with pairwise-distinct ids.
/// Iteration order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    samples: Vec<Sample>,
    source: String,
}

impl Dataset {
    /// Build a dataset from samples already known to satisfy the invariants
    /// (non-empty unique ids, non-empty query/label). Panics on violation;
    /// use [`load_jsonl`] for untrusted input.
    pub fn new(samples: Vec<Sample>, source: impl Into<String>) -> Self {
        let mut seen = BTreeSet::new();
        for s in &samples {
            assert!(!s.id.is_empty(), "sample id must be non-empty");
            assert!(seen.insert(s.id.clone()), "duplicate sample id {:?}", s.id);
            assert!(!s.query.is_empty() && !s.label.is_empty());
        }
        Dataset {
            samples,
            source: source.into(),
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Map from id to position in dataset order.
    pub fn position_index(&self) -> HashMap<&str, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }
}

/// Load a JSONL dataset. Line order is preserved; a missing id is synthesized
/// as `<source-stem>#<line-number>` (1-based).
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());

    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                path: display.clone(),
                line: lineno,
                message: e.to_string(),
            })?;
        let missing = |field: &str| CorpusError::MissingField {
            path: display.clone(),
            line: lineno,
            field: field.to_string(),
        };
        let image = raw.image.ok_or_else(|| missing("image"))?;
        let query = match raw.query {
            Some(q) if !q.is_empty() => q,
            _ => return Err(missing("query")),
        };
        let label = match raw.label {
            Some(l) if !l.is_empty() => l,
            _ => return Err(missing("label")),
        };
        let id = match raw.id {
            Some(id) if !id.is_empty() => id,
            Some(_) => return Err(missing("id")),
            None => format!("{stem}#{lineno}"),
        };
        if let Some(&first) = seen.get(&id) {
            return Err(CorpusError::DuplicateId {
                path: display,
                id,
                first,
                second: lineno,
            });
        }
        seen.insert(id.clone(), lineno);
        samples.push(Sample {
            id,
            image,
            query,
            label,
            meta: raw.meta,
        });
    }
    Ok(Dataset {
        samples,
        source: display,
    })
}

/// Emit one JSON object per line. `load_jsonl(write_jsonl(d))` reproduces `d`
/// field-for-field.
pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let io_err = |source| CorpusError::Io {
        path: display.clone(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for sample in &dataset.samples {
        let line = serde_json::to_string(sample).expect("sample serializes");
        writeln!(w, "{line}").map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })
}

/// Materialize the subset with the given ids, in original dataset order.
/// Every id must exist; unknown ids are reported together.
pub fn subset_by_ids(dataset: &Dataset, ids: &BTreeSet<String>) -> Result<Dataset, CorpusError> {
    let known: BTreeSet<&str> = dataset.ids().collect();
    let unknown: Vec<String> = ids
        .iter()
        .filter(|id| !known.contains(id.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownIds(unknown));
    }
    let samples = dataset
        .samples
        .iter()
        .filter(|s| ids.contains(&s.id))
        .cloned()
        .collect();
    Ok(Dataset {
        samples,
        source: dataset.source.clone(),
    })
}
