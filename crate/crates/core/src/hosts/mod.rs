//! Artifact hosts: fetching (with segment discovery, verification, resume
//! and a local cache), pushing to hub-style repositories, and the reference
//! host server.

pub mod client;
pub mod readme;
pub mod server;

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use futures::{StreamExt, TryStreamExt};

pub use client::{DownloadOutcome, HostClient};
pub use readme::generate_readme;
pub use server::{serve, ListingEntry, LoggedRequest, RequestLog, ServeOptions, ServerHandle};

use crate::archive::{self, ArchiveError, PackOptions, DEFAULT_ARCHIVE_NAME};
use crate::digest::{sha256_file, Sha256Digest};
use crate::metadata::{
    default_sniffers, parse_metadata, resolve_metadata, write_metadata, ArtifactListing, ArtifactMetadata,
    MetadataError, MetadataSource, METADATA_FILE,
};
use crate::registry::{Location, Registry, RegistryError};
use crate::segments::{
    self, manifest_name, parse_manifest, segment_name, write_manifest, DirStore, SegmentError, SegmentManifest,
    SegmentStore, DEFAULT_MAX_SEGMENT_SIZE,
};

pub const COMPLETE_MARKER: &str = ".complete";
pub const STAGING_DIR: &str = ".partial";
pub const TREE_DIR: &str = "tree";
pub const DEFAULT_WORKERS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum HostError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unauthorized: {0}")]
    Auth(String),
    #[error("file exceeds the host's size limit: {0}")]
    SizeLimit(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("request to {url} failed: {source}")]
    Http {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("{0}: segments found but no manifest; the manifest must accompany segmented files")]
    SegmentedWithoutManifest(String),
    #[error("upload incomplete: uploaded [{}], missing [{}]: {source}", .uploaded.join(", "), .missing.join(", "))]
    PartialUpload {
        uploaded: Vec<String>,
        missing: Vec<String>,
        #[source]
        source: Box<HostError>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Segments(#[from] SegmentError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

impl HostError {
    pub fn is_integrity(&self) -> bool {
        match self {
            Self::Integrity(_) => true,
            Self::Segments(e) => e.is_integrity(),
            Self::PartialUpload { source, .. } => source.is_integrity(),
            _ => false,
        }
    }
}

async fn blocking<T: Send + 'static, E: From<io::Error> + Send + 'static>(
    f: impl FnOnce() -> Result<T, E> + Send + 'static,
) -> Result<T, E> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| E::from(io::Error::other(e)))?
}

/// A resolved location plus the name shown to users.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactRef {
    pub location: Location,
    pub display_name: String,
}

impl ArtifactRef {
    pub fn resolve(registry: &Registry, url: &str) -> Result<Self, RegistryError> {
        let location = registry.resolve_location(url)?;
        Ok(Self {
            display_name: display_name_for(url),
            location,
        })
    }
}

/// `user/repo` for `hf:user/repo` or `http://host/user/repo`.
pub fn display_name_for(url: &str) -> String {
    if let Ok(parsed) = url::Url::parse(url) {
        if matches!(parsed.scheme(), "http" | "https") {
            return parsed.path().trim_matches('/').to_owned();
        }
        if parsed.scheme() != "file" && parsed.scheme().len() > 1 {
            if let Some((_, id)) = url.split_once(':') {
                return id.to_owned();
            }
        }
    }
    url.to_owned()
}

/// URL of the serialization file for a location: the location itself when
/// it names a `.lz4` file, otherwise `<repo>/artifact.tar.lz4`.
pub fn artifact_url(location_url: &str) -> String {
    let trimmed = location_url.trim_end_matches('/');
    let last = trimmed.rsplit('/').next().unwrap_or_default();
    if last.ends_with(".lz4") {
        trimmed.to_owned()
    } else {
        format!("{trimmed}/{DEFAULT_ARCHIVE_NAME}")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FetchProgress {
    pub total_bytes: Option<u64>,
    pub received_bytes: u64,
    pub segments_done: u64,
    pub segments_total: u64,
}

pub type ProgressFn = Arc<dyn Fn(&FetchProgress) + Send + Sync>;

#[derive(Clone)]
pub struct FetchOptions {
    pub verify: bool,
    pub workers: usize,
    pub progress: Option<ProgressFn>,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            verify: true,
            workers: DEFAULT_WORKERS,
            progress: None,
        }
    }
}

impl std::fmt::Debug for FetchOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FetchOptions")
            .field("verify", &self.verify)
            .field("workers", &self.workers)
            .finish_non_exhaustive()
    }
}

#[derive(Clone)]
struct Progress {
    state: Arc<Mutex<FetchProgress>>,
    callback: Option<ProgressFn>,
}

impl Progress {
    fn new(callback: Option<ProgressFn>) -> Self {
        Self {
            state: Arc::default(),
            callback,
        }
    }

    fn update(&self, f: impl FnOnce(&mut FetchProgress)) {
        let snapshot = {
            let mut state = self.state.lock().expect("progress poisoned");
            f(&mut state);
            *state
        };
        if let Some(cb) = &self.callback {
            cb(&snapshot);
        }
    }
}

/// A fetched, unpacked artifact.
#[derive(Debug, Clone)]
pub struct Fetched {
    pub tree: PathBuf,
    pub metadata: ArtifactMetadata,
    pub from_cache: bool,
}

/// On-disk cache: `<root>/<sha256(location)[:16]>/{tree/, pt_meta.json, .complete}`.
#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub const ENV: &'static str = "ARTIFACT_SHARE_CACHE";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$ARTIFACT_SHARE_CACHE`, else the platform cache directory.
    pub fn default_root() -> PathBuf {
        if let Some(dir) = std::env::var_os(Self::ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(dir);
        }
        dirs::cache_dir()
            .unwrap_or_else(std::env::temp_dir)
            .join("artifact-share")
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(location: &Location) -> String {
        Sha256Digest::of(location.canonical().as_bytes()).to_hex()[..16].to_owned()
    }

    pub fn entry_dir(&self, location: &Location) -> PathBuf {
        self.root.join(Self::key(location))
    }

    fn lock_path(&self, location: &Location) -> PathBuf {
        self.root.join(format!("{}.lock", Self::key(location)))
    }

    /// The cached artifact, only if its entry is marked complete.
    pub fn lookup(&self, location: &Location) -> Result<Option<Fetched>, HostError> {
        let entry = self.entry_dir(location);
        if !entry.join(COMPLETE_MARKER).is_file() {
            return Ok(None);
        }
        let metadata = parse_metadata(&fs::read(entry.join(METADATA_FILE))?)?;
        Ok(Some(Fetched {
            tree: entry.join(TREE_DIR),
            metadata,
            from_cache: true,
        }))
    }
}

async fn lock_entry(path: PathBuf) -> io::Result<File> {
    blocking(move || {
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)?;
        file.lock()?;
        Ok(file)
    })
    .await
}

/// Fetches `aref` into `cache`, returning the unpacked tree.
pub async fn fetch(
    client: &HostClient,
    aref: &ArtifactRef,
    cache: &Cache,
    options: &FetchOptions,
) -> Result<Fetched, HostError> {
    if let Some(hit) = cache.lookup(&aref.location)? {
        return Ok(hit);
    }
    fs::create_dir_all(cache.root())?;
    let _lock = lock_entry(cache.lock_path(&aref.location)).await?;
    if let Some(hit) = cache.lookup(&aref.location)? {
        return Ok(hit);
    }
    let entry = cache.entry_dir(&aref.location);
    let staging = entry.join(STAGING_DIR);
    fs::create_dir_all(&staging)?;

    let progress = Progress::new(options.progress.clone());
    let obtained = match &aref.location {
        Location::Url(url) => fetch_remote(client, url, &staging, options, &progress).await,
        Location::Path(path) => {
            let (path, staging, verify) = (path.clone(), staging.clone(), options.verify);
            blocking(move || fetch_local(&path, &staging, verify)).await
        }
    };
    let file = match obtained {
        Ok(file) => file,
        Err(e) => {
            // Corrupt data is discarded; anything else keeps the partial
            // files so the next attempt can resume.
            if e.is_integrity() {
                let _ = fs::remove_dir_all(&staging);
            }
            return Err(e);
        }
    };

    let staged_tree = staging.join(TREE_DIR);
    let finish = {
        let (entry, staging, file) = (entry.clone(), staging.clone(), file.clone());
        blocking(move || -> Result<ArtifactMetadata, HostError> {
            if staged_tree.exists() {
                fs::remove_dir_all(&staged_tree)?;
            }
            archive::unpack(&file, &staged_tree)?;
            let listing = ArtifactListing::from_dir(&staged_tree)?;
            let (metadata, source) = resolve_metadata(&listing, &default_sniffers())?;
            if let MetadataSource::Sniffer(id) = &source {
                tracing::info!(sniffer = %id, "metadata inferred from contents");
            }
            let tree = entry.join(TREE_DIR);
            if tree.exists() {
                fs::remove_dir_all(&tree)?;
            }
            fs::rename(&staged_tree, &tree)?;
            fs::write(entry.join(METADATA_FILE), write_metadata(&metadata))?;
            fs::remove_dir_all(&staging)?;
            File::create(entry.join(COMPLETE_MARKER))?.sync_all()?;
            Ok(metadata)
        })
        .await
    };
    match finish {
        Ok(metadata) => Ok(Fetched {
            tree: entry.join(TREE_DIR),
            metadata,
            from_cache: false,
        }),
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

async fn fetch_remote(
    client: &HostClient,
    url: &str,
    staging: &Path,
    options: &FetchOptions,
    progress: &Progress,
) -> Result<PathBuf, HostError> {
    let base = artifact_url(url);
    let manifest = match client.get_optional(&format!("{base}.json")).await? {
        Some(bytes) => Some(parse_manifest(&bytes)?),
        None => None,
    };
    let dest = staging.join(DEFAULT_ARCHIVE_NAME);
    match manifest {
        Some(m) if m.expected_segments > 1 => {
            fetch_segments(client, &base, &m, staging, options, progress).await?;
            Ok(dest)
        }
        Some(m) => {
            progress.update(|p| {
                p.total_bytes = Some(m.total_size);
                p.segments_total = 1;
            });
            discard_if_oversized(&dest, m.total_size)?;
            let tick = |n| progress.update(|p| p.received_bytes += n);
            match client.download(&base, &dest, tick).await {
                Err(HostError::NotFound(_)) => {
                    client.download(&segment_url(&base, 0), &dest, tick).await?;
                }
                other => {
                    other?;
                }
            }
            if options.verify {
                let path = dest.clone();
                let (digest, len) = blocking(move || sha256_file(&path)).await?;
                if len != m.total_size || digest != m.checksum_sha256 {
                    return Err(HostError::Integrity(format!(
                        "{base} does not match its manifest checksum"
                    )));
                }
            }
            progress.update(|p| p.segments_done = 1);
            Ok(dest)
        }
        None => {
            progress.update(|p| p.segments_total = 1);
            let tick = |n| progress.update(|p| p.received_bytes += n);
            match client.download(&base, &dest, tick).await {
                Ok(_) => {}
                Err(HostError::NotFound(_)) => {
                    if client.exists(&segment_url(&base, 0)).await? {
                        return Err(HostError::SegmentedWithoutManifest(base));
                    }
                    return Err(HostError::NotFound(base));
                }
                Err(e) => return Err(e),
            }
            progress.update(|p| p.segments_done = 1);
            Ok(dest)
        }
    }
}

fn segment_url(base: &str, index: u64) -> String {
    let (dir, name) = base.rsplit_once('/').unwrap_or(("", base));
    format!("{dir}/{}", segment_name(name, index))
}

fn discard_if_oversized(path: &Path, expected: u64) -> io::Result<()> {
    match fs::metadata(path) {
        Ok(m) if m.len() > expected => fs::remove_file(path),
        _ => Ok(()),
    }
}

async fn fetch_segments(
    client: &HostClient,
    base: &str,
    manifest: &SegmentManifest,
    staging: &Path,
    options: &FetchOptions,
    progress: &Progress,
) -> Result<(), HostError> {
    let seg_dir = staging.join("segments");
    fs::create_dir_all(&seg_dir)?;
    let store = DirStore::new(&seg_dir, DEFAULT_ARCHIVE_NAME);
    progress.update(|p| {
        p.total_bytes = Some(manifest.total_size);
        p.segments_total = manifest.expected_segments;
    });

    futures::stream::iter(0..manifest.expected_segments)
        .map(|index| {
            let path = store.segment_path(index);
            let url = segment_url(base, index);
            async move {
                let expected_len = manifest.segment_len(index);
                discard_if_oversized(&path, expected_len)?;
                client
                    .download(&url, &path, |n| progress.update(|p| p.received_bytes += n))
                    .await?;
                if options.verify {
                    let p = path.clone();
                    let (digest, len) = blocking(move || sha256_file(&p)).await?;
                    if len != expected_len || digest != manifest.segment_checksums[index as usize] {
                        return Err(HostError::Segments(SegmentError::SegmentIntegrity { index }));
                    }
                }
                progress.update(|p| p.segments_done += 1);
                Ok::<_, HostError>(())
            }
        })
        .buffer_unordered(options.workers.max(1))
        .try_collect::<Vec<()>>()
        .await?;

    let out = staging.join(DEFAULT_ARCHIVE_NAME);
    let manifest = options.verify.then(|| manifest.clone());
    blocking(move || -> Result<(), HostError> {
        let mut writer = io::BufWriter::new(File::create(&out)?);
        segments::join(&store, manifest.as_ref(), &mut writer)?;
        io::Write::flush(&mut writer)?;
        fs::remove_dir_all(&seg_dir)?;
        Ok(())
    })
    .await
}

/// Copies or joins a local serialization file (or packs a local tree) into
/// `staging`.
fn fetch_local(path: &Path, staging: &Path, verify: bool) -> Result<PathBuf, HostError> {
    let dest = staging.join(DEFAULT_ARCHIVE_NAME);
    let base = if path.is_dir() {
        let candidate = path.join(DEFAULT_ARCHIVE_NAME);
        let has_archive = candidate.is_file() || path.join(manifest_name(DEFAULT_ARCHIVE_NAME)).is_file();
        if !has_archive {
            archive::pack(path, None, &PackOptions::default(), &dest)?;
            return Ok(dest);
        }
        candidate
    } else {
        path.to_path_buf()
    };
    let manifest = segments::read_manifest_for(&base)?;
    let store = DirStore::for_file(&base);
    if base.is_file() {
        if let (Some(m), true) = (&manifest, verify) {
            let report = segments::verify_file(&base, m)?;
            if !report.is_ok() {
                return Err(HostError::Integrity(format!(
                    "{} does not match its manifest",
                    base.display()
                )));
            }
        }
        fs::copy(&base, &dest)?;
        return Ok(dest);
    }
    if store.indices().map(|i| i.is_empty()).unwrap_or(true) {
        return Err(HostError::NotFound(base.display().to_string()));
    }
    let Some(manifest) = manifest else {
        return Err(HostError::SegmentedWithoutManifest(base.display().to_string()));
    };
    let mut writer = io::BufWriter::new(File::create(&dest)?);
    segments::join(&store, verify.then_some(&manifest), &mut writer)?;
    io::Write::flush(&mut writer)?;
    Ok(dest)
}

#[derive(Debug, Clone)]
pub struct PushOptions {
    pub max_segment_size: u64,
    /// Used when the artifact carries no `pt_meta.json`.
    pub metadata: Option<ArtifactMetadata>,
    /// Name for the README heading; defaults to the repository path.
    pub display_name: Option<String>,
    /// Package named in the README when the metadata carries no hint.
    pub package_hint: Option<String>,
    pub compression_level: u32,
}

impl Default for PushOptions {
    fn default() -> Self {
        Self {
            max_segment_size: DEFAULT_MAX_SEGMENT_SIZE,
            metadata: None,
            display_name: None,
            package_hint: None,
            compression_level: PackOptions::default().compression_level,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PushReport {
    /// Every file this push placed in the repository.
    pub files: Vec<String>,
    /// Files actually transferred; the rest were already present.
    pub uploaded: Vec<String>,
    pub skipped: Vec<String>,
    pub segments: u64,
    pub sha256: Sha256Digest,
    pub size: u64,
    pub metadata: ArtifactMetadata,
}

struct Upload {
    name: String,
    path: PathBuf,
    digest: Sha256Digest,
}

/// Packs (if needed), splits (if needed) and uploads `artifact` to `repo_url`.
pub async fn push(
    client: &HostClient,
    artifact: &Path,
    repo_url: &str,
    options: &PushOptions,
) -> Result<PushReport, HostError> {
    if options.max_segment_size == 0 {
        return Err(SegmentError::ZeroSegmentSize.into());
    }
    let repo_url = repo_url.trim_end_matches('/').to_owned();
    let work = tempfile::tempdir()?;
    let prepared = {
        let (artifact, work_dir, options) = (artifact.to_path_buf(), work.path().to_path_buf(), options.clone());
        blocking(move || prepare_push(&artifact, &work_dir, &options)).await?
    };
    let (uploads, segments, sha256, size, metadata) = prepared;

    let display = options
        .display_name
        .clone()
        .unwrap_or_else(|| display_name_for(&repo_url));
    let mut readme_meta = metadata.clone();
    if readme_meta.package_hint().is_none() {
        readme_meta.set_package_hint(options.package_hint.clone());
    }
    let readme = generate_readme(&readme_meta, &display).into_bytes();
    let readme_path = work.path().join(readme::README_NAME);
    fs::write(&readme_path, &readme)?;
    let mut uploads = uploads;
    uploads.push(Upload {
        name: readme::README_NAME.into(),
        path: readme_path,
        digest: Sha256Digest::of(&readme),
    });

    let mut uploaded = Vec::new();
    let mut skipped = Vec::new();
    for (i, up) in uploads.iter().enumerate() {
        let url = format!("{repo_url}/{}", up.name);
        let result = async {
            if let Some(Some(remote)) = client.head_checksum(&url).await? {
                if remote == up.digest {
                    return Ok(false);
                }
            }
            client.put_file(&url, &up.path).await?;
            Ok::<_, HostError>(true)
        }
        .await;
        match result {
            Ok(true) => uploaded.push(up.name.clone()),
            Ok(false) => skipped.push(up.name.clone()),
            Err(HostError::Auth(msg)) => return Err(HostError::Auth(msg)),
            Err(e) => {
                let mut done = uploaded.clone();
                done.extend(skipped.iter().cloned());
                return Err(HostError::PartialUpload {
                    uploaded: done,
                    missing: uploads[i..].iter().map(|u| u.name.clone()).collect(),
                    source: Box::new(e),
                });
            }
        }
    }

    let files: Vec<String> = uploads.iter().map(|u| u.name.clone()).collect();
    if let Some(listing) = client.list(&repo_url).await? {
        for stale in listing
            .iter()
            .filter(|e| e.name.starts_with(DEFAULT_ARCHIVE_NAME) && !files.contains(&e.name))
        {
            client.delete(&format!("{repo_url}/{}", stale.name)).await?;
        }
    }
    Ok(PushReport {
        files,
        uploaded,
        skipped,
        segments,
        sha256,
        size,
        metadata,
    })
}

type Prepared = (Vec<Upload>, u64, Sha256Digest, u64, ArtifactMetadata);

fn prepare_push(artifact: &Path, work: &Path, options: &PushOptions) -> Result<Prepared, HostError> {
    let packed = work.join(DEFAULT_ARCHIVE_NAME);
    let (file, metadata) = if artifact.is_dir() {
        let listing = ArtifactListing::from_dir(artifact)?;
        let (metadata, inject) = match (&listing.embedded_metadata, &options.metadata) {
            (Some(bytes), _) => (parse_metadata(bytes)?, None),
            (None, Some(meta)) => (meta.clone(), Some(meta.clone())),
            (None, None) => {
                let (meta, _) = resolve_metadata(&listing, &default_sniffers())?;
                (meta.clone(), Some(meta))
            }
        };
        let pack_options = PackOptions {
            compression_level: options.compression_level,
            ..PackOptions::default()
        };
        archive::pack(artifact, inject.as_ref(), &pack_options, &packed)?;
        (packed, metadata)
    } else if artifact.is_file() {
        let listing = ArtifactListing::from_archive(artifact)?;
        let metadata = match (&listing.embedded_metadata, &options.metadata) {
            (None, Some(meta)) => meta.clone(),
            _ => resolve_metadata(&listing, &default_sniffers())?.0,
        };
        (artifact.to_path_buf(), metadata)
    } else {
        return Err(HostError::NotFound(artifact.display().to_string()));
    };

    let (sha256, size) = sha256_file(&file)?;
    if size <= options.max_segment_size {
        let upload = Upload {
            name: DEFAULT_ARCHIVE_NAME.into(),
            path: file,
            digest: sha256,
        };
        return Ok((vec![upload], 1, sha256, size, metadata));
    }

    let seg_dir = work.join("segments");
    fs::create_dir_all(&seg_dir)?;
    let mut store = DirStore::new(&seg_dir, DEFAULT_ARCHIVE_NAME);
    let manifest = segments::split(
        io::BufReader::new(File::open(&file)?),
        options.max_segment_size,
        &mut store,
    )?;
    let mut uploads: Vec<Upload> = (0..manifest.expected_segments)
        .map(|i| Upload {
            name: segment_name(DEFAULT_ARCHIVE_NAME, i),
            path: store.segment_path(i),
            digest: manifest.segment_checksums[i as usize],
        })
        .collect();
    let manifest_bytes = write_manifest(&manifest);
    let manifest_path = store.manifest_path();
    fs::write(&manifest_path, &manifest_bytes)?;
    uploads.push(Upload {
        name: manifest_name(DEFAULT_ARCHIVE_NAME),
        path: manifest_path,
        digest: Sha256Digest::of(&manifest_bytes),
    });
    Ok((uploads, manifest.expected_segments, sha256, size, metadata))
}
