//! The serialization file: an LZ4-framed ustar archive of an artifact tree.
//!
//! With default [`PackOptions`] the output depends only on entry paths,
//! entry contents, the metadata and the compression level. Entries are
//! sorted by the byte order of their stored names and every header carries
//! mtime 0, uid/gid 0, empty owner names and mode 0644 or 0755.

mod lz4;
pub(crate) mod tar;

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Component, Path, PathBuf};

use crate::digest::{HashingWriter, Sha256Digest};
use crate::metadata::{self, ArtifactMetadata, METADATA_FILE};

use self::tar::{MemberHeader, TarError, TarReader, TarWriter, TYPE_DIR, TYPE_FILE};

pub use self::lz4::{MAX_COMPRESSION_LEVEL, MIN_COMPRESSION_LEVEL};

/// Default name of a serialization file.
pub const DEFAULT_ARCHIVE_NAME: &str = "artifact.tar.lz4";

pub const FILE_MODE: u32 = 0o644;
pub const DIR_MODE: u32 = 0o755;

/// Largest `pt_meta.json` we are willing to buffer while listing an archive.
const MAX_METADATA_BYTES: u64 = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid entry {path:?}: {reason}")]
    InvalidEntry { path: String, reason: String },
    #[error("unsupported entry {path:?}: {kind} (only regular files and directories are packed)")]
    UnsupportedEntry { path: String, kind: &'static str },
    #[error("entry {0:?} escapes the destination directory")]
    PathTraversal(String),
    #[error("metadata conflict: {0}")]
    MetadataConflict(String),
    #[error("cannot decode serialization file: {0}")]
    Decode(String),
    #[error("invalid pack option: {0}")]
    InvalidOption(String),
}

impl ArchiveError {
    fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    fn decode(err: impl fmt::Display) -> Self {
        Self::Decode(err.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryKind {
    #[serde(rename = "regular-file")]
    File,
    Directory,
}

/// One member of a serialization file.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ArchiveEntry {
    /// Relative, `/`-separated, without a trailing slash.
    pub path: String,
    pub kind: EntryKind,
    pub mode: u32,
    pub size: u64,
    pub mtime: u64,
}

impl ArchiveEntry {
    pub fn file(path: impl Into<String>, size: u64) -> Self {
        Self {
            path: path.into(),
            kind: EntryKind::File,
            mode: FILE_MODE,
            size,
            mtime: 0,
        }
    }

    pub fn dir(path: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            kind: EntryKind::Directory,
            mode: DIR_MODE,
            size: 0,
            mtime: 0,
        }
    }

    /// Name as stored in the TAR header; directories get a trailing `/`.
    pub fn stored_name(&self) -> String {
        match self.kind {
            EntryKind::File => self.path.clone(),
            EntryKind::Directory => format!("{}/", self.path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackOptions {
    /// Zero timestamps and ownership, and collapse modes to 0644/0755.
    pub normalize_attributes: bool,
    /// Emit entries in byte-lexicographic order of their stored names.
    pub sort_entries: bool,
    /// 1-2 use the fast LZ4 compressor, 3-12 the high-compression one.
    pub compression_level: u32,
}

impl Default for PackOptions {
    fn default() -> Self {
        Self {
            normalize_attributes: true,
            sort_entries: true,
            compression_level: 1,
        }
    }
}

/// Result of a successful pack.
#[derive(Debug, Clone)]
pub struct PackSummary {
    pub entries: Vec<ArchiveEntry>,
    pub sha256: Sha256Digest,
    pub size: u64,
}

enum Source {
    Path(PathBuf),
    Bytes(Vec<u8>),
}

struct PendingEntry {
    entry: ArchiveEntry,
    uid: u64,
    gid: u64,
    source: Source,
}

/// Checks an entry path against the [`ArchiveEntry`] path rules.
pub fn validate_entry_path(path: &str) -> Result<(), ArchiveError> {
    let invalid = |reason: &str| ArchiveError::InvalidEntry {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    if path.is_empty() {
        return Err(invalid("empty path"));
    }
    if path.starts_with('/') {
        return Err(ArchiveError::PathTraversal(path.to_string()));
    }
    if path.contains('\0') || path.contains('\\') {
        return Err(invalid("contains NUL or backslash"));
    }
    for component in path.split('/') {
        match component {
            ".." => return Err(ArchiveError::PathTraversal(path.to_string())),
            "" => return Err(invalid("empty path component")),
            "." => return Err(invalid("'.' path component")),
            _ => {}
        }
    }
    Ok(())
}

/// Walks `root` and returns its entries as they would be packed with the
/// given options (without metadata injection).
fn collect_tree(root: &Path, options: &PackOptions) -> Result<Vec<PendingEntry>, ArchiveError> {
    let meta = fs::metadata(root).map_err(|e| ArchiveError::io(root, e))?;
    if !meta.is_dir() {
        return Err(ArchiveError::io(
            root,
            io::Error::new(io::ErrorKind::InvalidInput, "not a directory"),
        ));
    }
    let mut out = Vec::new();
    walk(root, "", options, &mut out)?;
    Ok(out)
}

fn walk(dir: &Path, prefix: &str, options: &PackOptions, out: &mut Vec<PendingEntry>) -> Result<(), ArchiveError> {
    let mut children = fs::read_dir(dir)
        .map_err(|e| ArchiveError::io(dir, e))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ArchiveError::io(dir, e))?;
    if options.sort_entries {
        // Directory-first recursion keeps parents before children; the final
        // global sort happens in `pack`.
        children.sort_by_key(|c| c.file_name());
    }
    for child in children {
        let os_name = child.file_name();
        let name = os_name.to_str().ok_or_else(|| ArchiveError::InvalidEntry {
            path: format!("{prefix}{}", os_name.to_string_lossy()),
            reason: "file name is not valid UTF-8".into(),
        })?;
        let rel = format!("{prefix}{name}");
        validate_entry_path(&rel)?;
        let path = child.path();
        let md = fs::symlink_metadata(&path).map_err(|e| ArchiveError::io(&path, e))?;
        let ft = md.file_type();
        let kind = if ft.is_dir() {
            EntryKind::Directory
        } else if ft.is_file() {
            EntryKind::File
        } else {
            return Err(ArchiveError::UnsupportedEntry {
                path: rel,
                kind: if ft.is_symlink() {
                    "symbolic link"
                } else {
                    "special file"
                },
            });
        };
        let mut entry = match kind {
            EntryKind::File => ArchiveEntry::file(rel.clone(), md.len()),
            EntryKind::Directory => ArchiveEntry::dir(rel.clone()),
        };
        let (mut uid, mut gid) = (0, 0);
        if !options.normalize_attributes {
            entry.mode = raw_mode(&md, kind);
            entry.mtime = md
                .modified()
                .ok()
                .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
                .map_or(0, |d| d.as_secs());
            (uid, gid) = owner(&md);
        }
        out.push(PendingEntry {
            entry,
            uid,
            gid,
            source: Source::Path(path.clone()),
        });
        if kind == EntryKind::Directory {
            walk(&path, &format!("{rel}/"), options, out)?;
        }
    }
    Ok(())
}

#[cfg(unix)]
fn raw_mode(md: &fs::Metadata, _kind: EntryKind) -> u32 {
    use std::os::unix::fs::PermissionsExt;
    md.permissions().mode() & 0o7777
}

#[cfg(not(unix))]
fn raw_mode(md: &fs::Metadata, kind: EntryKind) -> u32 {
    match (kind, md.permissions().readonly()) {
        (EntryKind::Directory, _) => DIR_MODE,
        (EntryKind::File, true) => 0o444,
        (EntryKind::File, false) => FILE_MODE,
    }
}

#[cfg(unix)]
fn owner(md: &fs::Metadata) -> (u64, u64) {
    use std::os::unix::fs::MetadataExt;
    (u64::from(md.uid()), u64::from(md.gid()))
}

#[cfg(not(unix))]
fn owner(_md: &fs::Metadata) -> (u64, u64) {
    (0, 0)
}

/// Lists a tree on disk as normalized, sorted entries.
pub fn scan_tree(root: &Path) -> Result<Vec<ArchiveEntry>, ArchiveError> {
    let mut entries: Vec<ArchiveEntry> = collect_tree(root, &PackOptions::default())?
        .into_iter()
        .map(|p| p.entry)
        .collect();
    entries.sort_by_key(|a| a.stored_name());
    Ok(entries)
}

/// Packs `tree_root` into `dest`.
///
/// The output is written to a temporary file beside `dest` and renamed into
/// place, so a failed pack never leaves a partial serialization file.
pub fn pack(
    tree_root: &Path,
    metadata: Option<&ArtifactMetadata>,
    options: &PackOptions,
    dest: &Path,
) -> Result<PackSummary, ArchiveError> {
    let parent = dest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    if let (Ok(tree), Ok(out_dir)) = (tree_root.canonicalize(), parent.canonicalize()) {
        if out_dir.starts_with(&tree) {
            return Err(ArchiveError::InvalidEntry {
                path: dest.display().to_string(),
                reason: "output file would be inside the packed tree".into(),
            });
        }
    }
    let tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| ArchiveError::io(parent, e))?;
    let writer = BufWriter::new(tmp.as_file().try_clone().map_err(|e| ArchiveError::io(dest, e))?);
    let (writer, entries) = pack_to_writer(tree_root, metadata, options, HashingWriter::new(writer))?;
    let (mut buffered, sha256, size) = writer.finish();
    buffered.flush().map_err(|e| ArchiveError::io(dest, e))?;
    drop(buffered);
    tmp.persist(dest).map_err(|e| ArchiveError::io(dest, e.error))?;
    Ok(PackSummary { entries, sha256, size })
}

/// Packs into an arbitrary writer, returning it together with the entries
/// written in archive order.
pub fn pack_to_writer<W: Write>(
    tree_root: &Path,
    metadata: Option<&ArtifactMetadata>,
    options: &PackOptions,
    writer: W,
) -> Result<(W, Vec<ArchiveEntry>), ArchiveError> {
    lz4::check_level(options.compression_level)?;
    let mut pending = collect_tree(tree_root, options)?;

    if let Some(meta) = metadata {
        let canonical = metadata::write_metadata(meta);
        match pending.iter_mut().find(|p| p.entry.path == METADATA_FILE) {
            Some(existing) => {
                if existing.entry.kind != EntryKind::File {
                    return Err(ArchiveError::MetadataConflict(format!(
                        "{METADATA_FILE} in the tree is not a file"
                    )));
                }
                let Source::Path(path) = &existing.source else {
                    unreachable!("tree entries are always backed by paths")
                };
                let on_disk = fs::read(path).map_err(|e| ArchiveError::io(path, e))?;
                let embedded = metadata::parse_metadata(&on_disk).map_err(|e| {
                    ArchiveError::MetadataConflict(format!("embedded {METADATA_FILE} is unreadable: {e}"))
                })?;
                if &embedded != meta {
                    return Err(ArchiveError::MetadataConflict(format!(
                        "embedded {METADATA_FILE} ({embedded:?}) differs from provided metadata ({meta:?})"
                    )));
                }
                existing.entry.size = canonical.len() as u64;
                existing.source = Source::Bytes(canonical);
            }
            None => {
                let entry = ArchiveEntry::file(METADATA_FILE, canonical.len() as u64);
                // Unsorted archives get the metadata up front.
                pending.insert(
                    0,
                    PendingEntry {
                        entry,
                        uid: 0,
                        gid: 0,
                        source: Source::Bytes(canonical),
                    },
                );
            }
        }
    }

    if options.sort_entries {
        pending.sort_by_cached_key(|p| p.entry.stored_name());
    }

    let encoder = lz4::encoder(writer, options.compression_level).map_err(|e| ArchiveError::io("<lz4 encoder>", e))?;
    let mut tar = TarWriter::new(encoder);
    let mut written = Vec::with_capacity(pending.len());
    for p in pending {
        let header = MemberHeader {
            name: p.entry.stored_name(),
            typeflag: match p.entry.kind {
                EntryKind::File => TYPE_FILE,
                EntryKind::Directory => TYPE_DIR,
            },
            mode: p.entry.mode,
            uid: p.uid,
            gid: p.gid,
            size: p.entry.size,
            mtime: p.entry.mtime,
        };
        let result = match &p.source {
            Source::Bytes(bytes) => tar.append(&header, &bytes[..]),
            Source::Path(_) if p.entry.kind == EntryKind::Directory => tar.append(&header, io::empty()),
            Source::Path(path) => {
                let file = File::open(path).map_err(|e| ArchiveError::io(path, e))?;
                tar.append(&header, BufReader::new(file))
            }
        };
        result.map_err(|e| match e {
            TarError::Io(source) => ArchiveError::io(
                match &p.source {
                    Source::Path(path) => path.clone(),
                    Source::Bytes(_) => PathBuf::from(METADATA_FILE),
                },
                source,
            ),
            other => ArchiveError::InvalidEntry {
                path: p.entry.path.clone(),
                reason: other.to_string(),
            },
        })?;
        written.push(p.entry);
    }
    let encoder = tar
        .finish()
        .map_err(|e| ArchiveError::io("<archive>", io::Error::other(e)))?;
    let writer = lz4::finish(encoder).map_err(|e| ArchiveError::io("<lz4 encoder>", e))?;
    Ok((writer, written))
}

/// Turns a raw member name into a validated relative entry path.
///
/// Leading `./` components written by other tools are dropped; returns
/// `None` for the archive root itself.
fn member_path(raw: &[u8]) -> Result<Option<String>, ArchiveError> {
    let name = std::str::from_utf8(raw).map_err(|_| ArchiveError::InvalidEntry {
        path: String::from_utf8_lossy(raw).into_owned(),
        reason: "member name is not valid UTF-8".into(),
    })?;
    if name.starts_with('/') {
        return Err(ArchiveError::PathTraversal(name.to_string()));
    }
    let parts: Vec<&str> = name.split('/').filter(|c| !c.is_empty() && *c != ".").collect();
    if parts.is_empty() {
        return Ok(None);
    }
    let path = parts.join("/");
    validate_entry_path(&path)?;
    Ok(Some(path))
}

fn member_entry(member: &tar::RawMember) -> Result<Option<ArchiveEntry>, ArchiveError> {
    let Some(path) = member_path(&member.name)? else {
        return Ok(None);
    };
    let kind = match member.typeflag {
        b'0' | 0 | b'7' if !member.name.ends_with(b"/") => EntryKind::File,
        b'5' | b'0' | 0 => EntryKind::Directory,
        other => {
            return Err(ArchiveError::UnsupportedEntry {
                path,
                kind: match other {
                    b'1' => "hard link",
                    b'2' => "symbolic link",
                    b'3' | b'4' => "device node",
                    b'6' => "fifo",
                    _ => "unknown member type",
                },
            })
        }
    };
    Ok(Some(ArchiveEntry {
        path,
        kind,
        mode: member.mode & 0o7777,
        size: if kind == EntryKind::File { member.size } else { 0 },
        mtime: member.mtime,
    }))
}

fn open_archive(file: &Path) -> Result<TarReader<lz4::Decoder<BufReader<File>>>, ArchiveError> {
    let f = File::open(file).map_err(|e| ArchiveError::io(file, e))?;
    let decoder = lz4::decoder(BufReader::new(f)).map_err(ArchiveError::decode)?;
    Ok(TarReader::new(decoder))
}

fn map_tar(e: TarError) -> ArchiveError {
    match e {
        TarError::Io(io) => ArchiveError::decode(io),
        other => ArchiveError::decode(other),
    }
}

/// Reads the rest of the LZ4 stream so the frame's content checksum is
/// verified, and fails if the frame was cut short.
fn drain<R: Read>(reader: TarReader<lz4::Decoder<R>>) -> Result<(), ArchiveError> {
    let mut decoder = reader.into_inner();
    io::copy(&mut decoder, &mut io::sink()).map_err(ArchiveError::decode)?;
    decoder
        .finish()
        .1
        .map_err(|_| ArchiveError::decode("LZ4 frame is truncated"))
}

/// Lists the entries of a serialization file without extracting them.
pub fn list_entries(file: &Path) -> Result<Vec<ArchiveEntry>, ArchiveError> {
    Ok(list_with_metadata(file)?.0)
}

/// Lists entries and captures the raw bytes of a root `pt_meta.json`.
pub fn list_with_metadata(file: &Path) -> Result<(Vec<ArchiveEntry>, Option<Vec<u8>>), ArchiveError> {
    let mut reader = open_archive(file)?;
    let mut entries = Vec::new();
    let mut meta = None;
    while let Some(member) = reader.next_member().map_err(map_tar)? {
        let Some(entry) = member_entry(&member)? else {
            continue;
        };
        if entry.kind == EntryKind::File && entry.path == METADATA_FILE && entry.size <= MAX_METADATA_BYTES {
            let mut buf = Vec::with_capacity(entry.size as usize);
            reader
                .data(entry.size)
                .read_to_end(&mut buf)
                .map_err(ArchiveError::decode)?;
            meta = Some(buf);
        }
        entries.push(entry);
    }
    drain(reader)?;
    Ok((entries, meta))
}

/// Extracts a serialization file into `dest`, creating it if needed.
///
/// Any member whose path would land outside `dest` aborts the extraction
/// with [`ArchiveError::PathTraversal`].
pub fn unpack(file: &Path, dest: &Path) -> Result<Vec<ArchiveEntry>, ArchiveError> {
    let f = File::open(file).map_err(|e| ArchiveError::io(file, e))?;
    unpack_reader(BufReader::new(f), dest)
}

pub fn unpack_reader<R: Read>(reader: R, dest: &Path) -> Result<Vec<ArchiveEntry>, ArchiveError> {
    let decoder = lz4::decoder(reader).map_err(ArchiveError::decode)?;
    let mut reader = TarReader::new(decoder);
    fs::create_dir_all(dest).map_err(|e| ArchiveError::io(dest, e))?;
    let mut entries = Vec::new();
    while let Some(member) = reader.next_member().map_err(map_tar)? {
        let Some(entry) = member_entry(&member)? else {
            continue;
        };
        let target = safe_join(dest, &entry.path)?;
        match entry.kind {
            EntryKind::Directory => {
                fs::create_dir_all(&target).map_err(|e| ArchiveError::io(&target, e))?;
            }
            EntryKind::File => {
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent).map_err(|e| ArchiveError::io(parent, e))?;
                }
                if fs::symlink_metadata(&target).is_ok_and(|m| m.is_dir()) {
                    return Err(ArchiveError::InvalidEntry {
                        path: entry.path,
                        reason: "a directory already exists at this path".into(),
                    });
                }
                let mut out = BufWriter::new(File::create(&target).map_err(|e| ArchiveError::io(&target, e))?);
                let copied = io::copy(&mut reader.data(entry.size), &mut out).map_err(|e| {
                    if e.kind() == io::ErrorKind::UnexpectedEof {
                        ArchiveError::decode(e)
                    } else {
                        ArchiveError::io(&target, e)
                    }
                })?;
                debug_assert_eq!(copied, entry.size);
                out.flush().map_err(|e| ArchiveError::io(&target, e))?;
                set_file_mode(&target, entry.mode)?;
            }
        }
        entries.push(entry);
    }
    drain(reader)?;
    Ok(entries)
}

/// Joins a validated entry path onto `dest`, refusing to pass through any
/// symbolic link already present below `dest`.
fn safe_join(dest: &Path, rel: &str) -> Result<PathBuf, ArchiveError> {
    let mut out = dest.to_path_buf();
    for component in Path::new(rel).components() {
        match component {
            Component::Normal(c) => {
                out.push(c);
                if fs::symlink_metadata(&out).is_ok_and(|m| m.file_type().is_symlink()) {
                    return Err(ArchiveError::PathTraversal(rel.to_string()));
                }
            }
            _ => return Err(ArchiveError::PathTraversal(rel.to_string())),
        }
    }
    Ok(out)
}

#[cfg(unix)]
fn set_file_mode(path: &Path, mode: u32) -> Result<(), ArchiveError> {
    use std::os::unix::fs::PermissionsExt;
    // Keep the owner able to rewrite what it extracted.
    let mode = (mode & 0o777) | 0o600;
    fs::set_permissions(path, fs::Permissions::from_mode(mode)).map_err(|e| ArchiveError::io(path, e))
}

#[cfg(not(unix))]
fn set_file_mode(_path: &Path, _mode: u32) -> Result<(), ArchiveError> {
    Ok(())
}
