//! Artifact metadata (`pt_meta.json`): parsing, canonical encoding and
//! resolution with content-sniffing fallbacks.

mod sniff;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::archive::{self, ArchiveEntry, EntryKind};
use crate::canonical;

pub use sniff::{default_sniffers, AnseriniSniffer, CiffSniffer, Sniffer};

/// File name of the embedded metadata at the artifact root.
pub const METADATA_FILE: &str = "pt_meta.json";

/// Key added to `extra` when metadata was produced by a sniffer.
pub const INFERRED_KEY: &str = "_inferred";

const RESERVED_KEYS: [&str; 3] = ["type", "format", "package_hint"];

#[derive(Debug, thiserror::Error)]
pub enum MetadataError {
    #[error("metadata is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("metadata is not valid UTF-8")]
    NotUtf8,
    #[error("metadata schema error: {0}")]
    Schema(String),
    #[error("metadata field {0:?} is missing")]
    MissingField(&'static str),
    #[error("extra key {0:?} is reserved")]
    ReservedKey(String),
    #[error("unknown artifact: no {METADATA_FILE} and no metadata adapter matched{}", .0.as_ref().map(|p| format!(" ({})", p.display())).unwrap_or_default())]
    UnknownArtifact(Option<PathBuf>),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Archive(#[from] archive::ArchiveError),
}

/// Contents of `pt_meta.json`.
///
/// `type` and `format` are required and non-empty. Everything else that is
/// not `package_hint` lands in `extra`, untouched.
#[derive(Clone, PartialEq)]
pub struct ArtifactMetadata {
    artifact_type: String,
    format: String,
    package_hint: Option<String>,
    extra: BTreeMap<String, Value>,
}

impl ArtifactMetadata {
    pub fn new(artifact_type: impl Into<String>, format: impl Into<String>) -> Result<Self, MetadataError> {
        let artifact_type = artifact_type.into();
        let format = format.into();
        if artifact_type.is_empty() {
            return Err(MetadataError::Schema("\"type\" must be a non-empty string".into()));
        }
        if format.is_empty() {
            return Err(MetadataError::Schema("\"format\" must be a non-empty string".into()));
        }
        Ok(Self {
            artifact_type,
            format,
            package_hint: None,
            extra: BTreeMap::new(),
        })
    }

    pub fn with_package_hint(mut self, hint: impl Into<String>) -> Self {
        self.package_hint = Some(hint.into());
        self
    }

    pub fn artifact_type(&self) -> &str {
        &self.artifact_type
    }

    pub fn format(&self) -> &str {
        &self.format
    }

    pub fn package_hint(&self) -> Option<&str> {
        self.package_hint.as_deref()
    }

    pub fn set_package_hint(&mut self, hint: Option<String>) {
        self.package_hint = hint;
    }

    pub fn extra(&self) -> &BTreeMap<String, Value> {
        &self.extra
    }

    pub fn insert_extra(&mut self, key: impl Into<String>, value: Value) -> Result<Option<Value>, MetadataError> {
        let key = key.into();
        if RESERVED_KEYS.contains(&key.as_str()) {
            return Err(MetadataError::ReservedKey(key));
        }
        Ok(self.extra.insert(key, value))
    }

    /// True when this metadata came from a sniffer rather than `pt_meta.json`.
    pub fn is_inferred(&self) -> bool {
        self.extra.get(INFERRED_KEY) == Some(&Value::Bool(true))
    }

    pub fn to_json_value(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in &self.extra {
            map.insert(k.clone(), v.clone());
        }
        map.insert("type".into(), Value::String(self.artifact_type.clone()));
        map.insert("format".into(), Value::String(self.format.clone()));
        if let Some(hint) = &self.package_hint {
            map.insert("package_hint".into(), Value::String(hint.clone()));
        }
        Value::Object(map)
    }

    pub fn from_json_value(value: Value) -> Result<Self, MetadataError> {
        let Value::Object(mut map) = value else {
            return Err(MetadataError::Schema("metadata must be a JSON object".into()));
        };
        let artifact_type = take_required(&mut map, "type")?;
        let format = take_required(&mut map, "format")?;
        let package_hint = match map.remove("package_hint") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(MetadataError::Schema("\"package_hint\" must be a string".into())),
        };
        let mut meta = Self::new(artifact_type, format)?;
        meta.package_hint = package_hint;
        meta.extra = map.into_iter().collect();
        Ok(meta)
    }
}

fn take_required(map: &mut Map<String, Value>, field: &'static str) -> Result<String, MetadataError> {
    match map.remove(field) {
        None => Err(MetadataError::MissingField(field)),
        Some(Value::String(s)) if !s.is_empty() => Ok(s),
        Some(Value::String(_)) => Err(MetadataError::Schema(format!("{field:?} must be a non-empty string"))),
        Some(_) => Err(MetadataError::Schema(format!("{field:?} must be a string"))),
    }
}

impl fmt::Debug for ArtifactMetadata {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&canonical::to_canonical_string(&self.to_json_value()))
    }
}

impl fmt::Display for ArtifactMetadata {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.artifact_type, self.format)
    }
}

pub fn parse_metadata(bytes: &[u8]) -> Result<ArtifactMetadata, MetadataError> {
    let text = std::str::from_utf8(bytes).map_err(|_| MetadataError::NotUtf8)?;
    let value: Value = serde_json::from_str(text)?;
    ArtifactMetadata::from_json_value(value)
}

/// Canonical `pt_meta.json` bytes: sorted keys, compact, no trailing newline.
pub fn write_metadata(meta: &ArtifactMetadata) -> Vec<u8> {
    canonical::to_canonical_bytes(&meta.to_json_value())
}

/// What a sniffer gets to look at: the artifact's entry listing plus the raw
/// embedded metadata, if there is any.
#[derive(Debug, Clone, Default)]
pub struct ArtifactListing {
    pub entries: Vec<ArchiveEntry>,
    pub embedded_metadata: Option<Vec<u8>>,
    pub origin: Option<PathBuf>,
}

impl ArtifactListing {
    /// Lists an extracted tree on disk.
    pub fn from_dir(root: &Path) -> Result<Self, MetadataError> {
        let entries = archive::scan_tree(root)?;
        let meta_path = root.join(METADATA_FILE);
        let embedded_metadata = if meta_path.is_file() {
            Some(fs::read(&meta_path)?)
        } else {
            None
        };
        Ok(Self {
            entries,
            embedded_metadata,
            origin: Some(root.to_path_buf()),
        })
    }

    /// Lists a serialization file without extracting it.
    pub fn from_archive(file: &Path) -> Result<Self, MetadataError> {
        let (entries, embedded_metadata) = archive::list_with_metadata(file)?;
        Ok(Self {
            entries,
            embedded_metadata,
            origin: Some(file.to_path_buf()),
        })
    }

    /// Either of the above, depending on what `path` is.
    pub fn from_path(path: &Path) -> Result<Self, MetadataError> {
        if path.is_dir() {
            Self::from_dir(path)
        } else {
            Self::from_archive(path)
        }
    }

    /// Entries that sit directly at the artifact root.
    pub fn root_entries(&self) -> impl Iterator<Item = &ArchiveEntry> {
        self.entries.iter().filter(|e| !e.path.contains('/'))
    }

    pub fn root_files(&self) -> impl Iterator<Item = &str> {
        self.root_entries()
            .filter(|e| e.kind == EntryKind::File)
            .map(|e| e.path.as_str())
    }
}

/// Where resolved metadata came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetadataSource {
    Embedded,
    Sniffer(String),
}

/// Embedded metadata wins; otherwise the first matching sniffer in order.
pub fn resolve_metadata(
    listing: &ArtifactListing,
    sniffers: &[Box<dyn Sniffer>],
) -> Result<(ArtifactMetadata, MetadataSource), MetadataError> {
    // Malformed embedded metadata is an error, not a reason to sniff.
    if let Some(bytes) = &listing.embedded_metadata {
        return Ok((parse_metadata(bytes)?, MetadataSource::Embedded));
    }
    for sniffer in sniffers {
        if let Some(mut meta) = sniffer.sniff(listing) {
            meta.insert_extra(INFERRED_KEY, Value::Bool(true))?;
            return Ok((meta, MetadataSource::Sniffer(sniffer.id().to_string())));
        }
    }
    Err(MetadataError::UnknownArtifact(listing.origin.clone()))
}

/// Convenience wrapper over a tree or serialization file with the default sniffers.
pub fn resolve_path(path: &Path) -> Result<(ArtifactMetadata, MetadataSource), MetadataError> {
    let listing = ArtifactListing::from_path(path)?;
    resolve_metadata(&listing, &default_sniffers())
}
