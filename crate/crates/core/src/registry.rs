//! Handler lookup by (type, format) and URL-scheme resolution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::metadata::ArtifactMetadata;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("a handler for {0} is already registered")]
    DuplicateHandler(HandlerKey),
    #[error("invalid handler key: type and format must both be non-empty")]
    InvalidKey,
    #[error("{}", no_handler_message(.key, .hint.as_deref()))]
    NoHandler { key: HandlerKey, hint: Option<String> },
    #[error("scheme {0:?} is already registered")]
    DuplicateScheme(String),
    #[error("invalid scheme name {0:?}")]
    InvalidScheme(String),
    #[error("unknown URL scheme {scheme:?}; registered schemes: {}", list_or_none(.registered))]
    UnknownScheme { scheme: String, registered: Vec<String> },
    #[error("cannot resolve {url:?}: {reason}")]
    Resolve { url: String, reason: String },
    #[error("cannot read handler config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
}

fn no_handler_message(key: &HandlerKey, hint: Option<&str>) -> String {
    match hint {
        Some(hint) if hint.contains(", ") => format!("no handler for {key}; try installing one of: {hint}"),
        Some(hint) => format!("no handler for {key}; try installing the package {hint:?}"),
        None => format!("no handler for {key}: unknown artifact type/format"),
    }
}

fn list_or_none(items: &[String]) -> String {
    if items.is_empty() {
        "(none)".into()
    } else {
        items.join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HandlerKey {
    #[serde(rename = "type")]
    pub artifact_type: String,
    pub format: String,
}

impl HandlerKey {
    pub fn new(artifact_type: impl Into<String>, format: impl Into<String>) -> Result<Self, RegistryError> {
        let key = Self {
            artifact_type: artifact_type.into(),
            format: format.into(),
        };
        if key.artifact_type.is_empty() || key.format.is_empty() {
            return Err(RegistryError::InvalidKey);
        }
        Ok(key)
    }

    pub fn of(meta: &ArtifactMetadata) -> Self {
        Self {
            artifact_type: meta.artifact_type().to_owned(),
            format: meta.format().to_owned(),
        }
    }
}

impl fmt::Display for HandlerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.artifact_type, self.format)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerRecord {
    #[serde(flatten)]
    pub key: HandlerKey,
    pub name: String,
    pub package_hint: String,
    #[serde(default)]
    pub capabilities: Vec<String>,
}

impl HandlerRecord {
    pub fn new(artifact_type: &str, format: &str, name: &str, package_hint: &str, capabilities: &[&str]) -> Self {
        Self {
            key: HandlerKey {
                artifact_type: artifact_type.into(),
                format: format.into(),
            },
            name: name.into(),
            package_hint: package_hint.into(),
            capabilities: capabilities.iter().map(|c| (*c).into()).collect(),
        }
    }
}

/// (class, type, format, package, capabilities)
const SEED: [(&str, &str, &str, &str, &[&str]); 14] = [
    (
        "TerrierIndex",
        "sparse_index",
        "terrier",
        "python-terrier",
        &["bm25-retrieval", "text-loading"],
    ),
    (
        "AnseriniIndex",
        "sparse_index",
        "anserini",
        "pyterrier-anserini",
        &["bm25-retrieval"],
    ),
    (
        "PisaIndex",
        "sparse_index",
        "pisa",
        "pyterrier-pisa",
        &["bm25-retrieval", "learned-sparse-retrieval"],
    ),
    (
        "CiffIndex",
        "sparse_index",
        "ciff",
        "pyterrier-ciff",
        &["index-exchange"],
    ),
    ("BmpIndex", "sparse_index", "bmp", "bmp", &["learned-sparse-retrieval"]),
    ("FlexIndex", "dense_index", "flex", "pyterrier-dr", &["dense-retrieval"]),
    (
        "CorpusGraph",
        "corpus_graph",
        "np_topk",
        "pyterrier-adaptive",
        &["neighbour-lookup"],
    ),
    (
        "KeyValueCache",
        "key_value_cache",
        "sqlite3",
        "pyterrier-caching",
        &["caching"],
    ),
    (
        "IndexerCache",
        "indexer_cache",
        "lz4pickle",
        "pyterrier-caching",
        &["caching"],
    ),
    (
        "RetrieverCache",
        "retriever_cache",
        "dbm.dumb",
        "pyterrier-caching",
        &["caching"],
    ),
    (
        "ScorerCache",
        "scorer_cache",
        "sqlite3",
        "pyterrier-caching",
        &["caching"],
    ),
    (
        "DenseScorerCache",
        "scorer_cache",
        "hdf5",
        "pyterrier-caching",
        &["caching"],
    ),
    ("CDECache", "cde_cache", "np_pickle", "pyterrier-dr", &["caching"]),
    (
        "QualCache",
        "quality_score_cache",
        "numpy",
        "pyterrier-quality",
        &["caching", "quality-estimation"],
    ),
];

pub fn seed_handlers() -> Vec<HandlerRecord> {
    SEED.iter()
        .map(|(name, t, f, pkg, caps)| HandlerRecord::new(t, f, name, pkg, caps))
        .collect()
}

/// Where a resolved URL points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Url(String),
    Path(PathBuf),
}

impl Location {
    /// String used for cache keys.
    pub fn canonical(&self) -> String {
        match self {
            Self::Url(u) => u.trim_end_matches('/').to_owned(),
            Self::Path(p) => format!(
                "file://{}",
                std::path::absolute(p).unwrap_or_else(|_| p.clone()).display()
            ),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Url(u) => f.write_str(u),
            Self::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

pub type ResolverFn = dyn Fn(&str) -> Result<Location, String> + Send + Sync;

#[derive(Clone)]
pub struct SchemeRecord {
    pub scheme: String,
    pub resolver: Arc<ResolverFn>,
}

impl fmt::Debug for SchemeRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SchemeRecord")
            .field("scheme", &self.scheme)
            .finish_non_exhaustive()
    }
}

impl SchemeRecord {
    pub fn new(
        scheme: impl Into<String>,
        resolver: impl Fn(&str) -> Result<Location, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            scheme: scheme.into(),
            resolver: Arc::new(resolver),
        }
    }

    /// Substitutes the identifier for `{id}` in `template` (appending
    /// `/{id}` when the placeholder is absent). Results that are not
    /// http(s) URLs are treated as local paths.
    pub fn template(scheme: impl Into<String>, template: impl Into<String>) -> Self {
        let template = template.into();
        Self::new(scheme, move |id| {
            if id.is_empty() {
                return Err("empty identifier".into());
            }
            if id.split('/').any(|seg| seg == "..") {
                return Err("identifier must not contain '..'".into());
            }
            let filled = if template.contains("{id}") {
                template.replace("{id}", id)
            } else {
                format!("{}/{id}", template.trim_end_matches('/'))
            };
            Ok(classify(&filled))
        })
    }
}

fn classify(s: &str) -> Location {
    if is_http(s) {
        Location::Url(s.to_owned())
    } else if let Some(path) = s.strip_prefix("file://") {
        Location::Path(PathBuf::from(path))
    } else {
        Location::Path(PathBuf::from(s))
    }
}

fn is_http(s: &str) -> bool {
    let lower = s.get(..8).unwrap_or(s).to_ascii_lowercase();
    lower.starts_with("http://") || lower.starts_with("https://")
}

pub fn valid_scheme_name(name: &str) -> bool {
    let mut bytes = name.bytes();
    matches!(bytes.next(), Some(b'a'..=b'z'))
        && bytes.all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'+' | b'.' | b'-'))
}

pub const DEFAULT_HUB_TEMPLATE: &str = "https://huggingface.co/datasets/{id}/resolve/main";

#[derive(Debug, Clone, Default)]
pub struct Registry {
    handlers: BTreeMap<HandlerKey, HandlerRecord>,
    schemes: BTreeMap<String, SchemeRecord>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The seed handler table plus the `hf` scheme on the default hub.
    pub fn seeded() -> Self {
        Self::seeded_with_hub(DEFAULT_HUB_TEMPLATE)
    }

    pub fn seeded_with_hub(hub_template: &str) -> Self {
        let mut reg = Self::empty();
        for record in seed_handlers() {
            reg.register_handler(record).expect("seed keys are unique");
        }
        reg.register_scheme(SchemeRecord::template("hf", hub_template))
            .expect("fresh registry");
        reg
    }

    pub fn register_handler(&mut self, record: HandlerRecord) -> Result<(), RegistryError> {
        HandlerKey::new(&record.key.artifact_type, &record.key.format)?;
        if self.handlers.contains_key(&record.key) {
            return Err(RegistryError::DuplicateHandler(record.key));
        }
        self.handlers.insert(record.key.clone(), record);
        Ok(())
    }

    /// Merges configured records, replacing any existing record with the
    /// same key.
    pub fn merge_handlers(&mut self, records: Vec<HandlerRecord>) -> Result<(), RegistryError> {
        for record in records {
            HandlerKey::new(&record.key.artifact_type, &record.key.format)?;
            if let Some(old) = self.handlers.get(&record.key) {
                tracing::info!(key = %record.key, old = %old.name, new = %record.name, "handler overridden by config");
            }
            self.handlers.insert(record.key.clone(), record);
        }
        Ok(())
    }

    pub fn load_handlers_file(&mut self, path: &Path) -> Result<(), RegistryError> {
        let config_err = |reason: String| RegistryError::Config {
            path: path.to_owned(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| config_err(e.to_string()))?;
        let records: Vec<HandlerRecord> = serde_json::from_slice(&bytes).map_err(|e| config_err(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for r in &records {
            if !seen.insert(&r.key) {
                return Err(config_err(format!("duplicate key {}", r.key)));
            }
        }
        self.merge_handlers(records)
    }

    pub fn handlers(&self) -> impl Iterator<Item = &HandlerRecord> {
        self.handlers.values()
    }

    pub fn get(&self, key: &HandlerKey) -> Option<&HandlerRecord> {
        self.handlers.get(key)
    }

    pub fn resolve_handler(&self, meta: &ArtifactMetadata) -> Result<&HandlerRecord, RegistryError> {
        let key = HandlerKey::of(meta);
        self.handlers.get(&key).ok_or_else(|| RegistryError::NoHandler {
            hint: self.hint_for(&key, meta.package_hint()),
            key,
        })
    }

    /// Package hint for an unresolvable key: the metadata's own hint, else
    /// the packages registered for the same artifact type.
    pub fn hint_for(&self, key: &HandlerKey, meta_hint: Option<&str>) -> Option<String> {
        if let Some(hint) = meta_hint.filter(|h| !h.is_empty()) {
            return Some(hint.to_owned());
        }
        if let Some(record) = self.handlers.get(key) {
            return Some(record.package_hint.clone());
        }
        let mut packages: Vec<&str> = self
            .handlers
            .values()
            .filter(|r| r.key.artifact_type == key.artifact_type)
            .map(|r| r.package_hint.as_str())
            .collect();
        packages.sort_unstable();
        packages.dedup();
        (!packages.is_empty()).then(|| packages.join(", "))
    }

    pub fn register_scheme(&mut self, record: SchemeRecord) -> Result<(), RegistryError> {
        if !valid_scheme_name(&record.scheme) || matches!(record.scheme.as_str(), "http" | "https" | "file") {
            return Err(RegistryError::InvalidScheme(record.scheme));
        }
        if self.schemes.contains_key(&record.scheme) {
            return Err(RegistryError::DuplicateScheme(record.scheme));
        }
        self.schemes.insert(record.scheme.clone(), record);
        Ok(())
    }

    /// Registers or replaces a scheme.
    pub fn set_scheme(&mut self, record: SchemeRecord) -> Result<(), RegistryError> {
        self.schemes.remove(&record.scheme);
        self.register_scheme(record)
    }

    pub fn scheme_names(&self) -> Vec<String> {
        self.schemes.keys().cloned().collect()
    }

    /// Maps `url` to a concrete location. http(s) URLs pass through;
    /// `file://` and scheme-less strings are local paths.
    pub fn resolve_location(&self, url: &str) -> Result<Location, RegistryError> {
        if is_http(url) {
            return Ok(Location::Url(url.to_owned()));
        }
        if let Some(path) = url.strip_prefix("file://") {
            return Ok(Location::Path(PathBuf::from(path)));
        }
        let Some((scheme, id)) = url.split_once(':').filter(|(s, _)| valid_scheme_name(s)) else {
            return Ok(Location::Path(PathBuf::from(url)));
        };
        let record = self.schemes.get(scheme).ok_or_else(|| RegistryError::UnknownScheme {
            scheme: scheme.to_owned(),
            registered: self.scheme_names(),
        })?;
        (record.resolver)(id).map_err(|reason| RegistryError::Resolve {
            url: url.to_owned(),
            reason,
        })
    }
}
