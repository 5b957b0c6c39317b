//! Segmented serialization files: `<base>.0`, `<base>.1`, ... plus the
//! `<base>.json` manifest that must accompany them.
//!
//! Split/join/verify are written against [`SegmentStore`] so the same code
//! drives both on-disk segment sets ([`DirStore`]) and in-memory ones
//! ([`MemStore`]).

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical;
use crate::digest::{sha256_reader, HashingWriter, Sha256Digest};

/// Default maximum segment size: the 50 GB single-file limit of the hub.
pub const DEFAULT_MAX_SEGMENT_SIZE: u64 = 50_000_000_000;

#[derive(Debug, thiserror::Error)]
pub enum SegmentError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("cannot split an empty file")]
    EmptyInput,
    #[error("segment size must be at least 1 byte")]
    ZeroSegmentSize,
    #[error("incomplete segment set: segment {missing} is missing")]
    Incomplete { missing: u64 },
    #[error("no segments found for {0}")]
    NoSegments(String),
    #[error("integrity error: segment {index} does not match the manifest")]
    SegmentIntegrity { index: u64 },
    #[error("integrity error: joined file does not match the manifest checksum")]
    WholeFileIntegrity,
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

impl SegmentError {
    pub fn is_integrity(&self) -> bool {
        matches!(self, Self::SegmentIntegrity { .. } | Self::WholeFileIntegrity)
    }
}

/// Contents of `<base>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentManifest {
    pub checksum_sha256: Sha256Digest,
    pub expected_segments: u64,
    pub segment_checksums: Vec<Sha256Digest>,
    pub segment_size: u64,
    pub total_size: u64,
}

impl SegmentManifest {
    pub fn validate(&self) -> Result<(), SegmentError> {
        let bad = |msg: String| Err(SegmentError::Manifest(msg));
        if self.expected_segments == 0 {
            return bad("expected_segments must be positive".into());
        }
        if self.segment_size == 0 {
            return bad("segment_size must be positive".into());
        }
        let expected = if self.total_size == 0 {
            1
        } else {
            self.total_size.div_ceil(self.segment_size)
        };
        if self.expected_segments != expected {
            return bad(format!(
                "expected_segments is {} but {} bytes in {}-byte segments needs {expected}",
                self.expected_segments, self.total_size, self.segment_size
            ));
        }
        if self.segment_checksums.len() as u64 != self.expected_segments {
            return bad(format!(
                "{} segment checksums for {} segments",
                self.segment_checksums.len(),
                self.expected_segments
            ));
        }
        Ok(())
    }

    /// Byte length segment `index` must have.
    pub fn segment_len(&self, index: u64) -> u64 {
        if index + 1 < self.expected_segments {
            self.segment_size
        } else {
            self.total_size - self.segment_size * (self.expected_segments - 1)
        }
    }
}

pub fn parse_manifest(bytes: &[u8]) -> Result<SegmentManifest, SegmentError> {
    let manifest: SegmentManifest = serde_json::from_slice(bytes).map_err(|e| SegmentError::Manifest(e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Canonical manifest JSON (sorted keys, compact).
pub fn write_manifest(manifest: &SegmentManifest) -> Vec<u8> {
    let value = serde_json::to_value(manifest).expect("manifest always serializes");
    canonical::to_canonical_bytes(&value)
}

/// Storage for a numbered segment set.
pub trait SegmentStore {
    /// Creates (or truncates) segment `index` for writing.
    fn create(&mut self, index: u64) -> io::Result<Box<dyn Write + '_>>;
    /// Opens segment `index`, or `None` if it does not exist.
    fn open(&self, index: u64) -> io::Result<Option<Box<dyn Read + '_>>>;
    /// All segment indices present, ascending.
    fn indices(&self) -> io::Result<Vec<u64>>;
}

/// Segments stored as `<dir>/<base>.<index>`.
#[derive(Debug, Clone)]
pub struct DirStore {
    dir: PathBuf,
    base: String,
}

impl DirStore {
    pub fn new(dir: impl Into<PathBuf>, base: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            base: base.into(),
        }
    }

    /// Store for the segments of `file`, i.e. siblings named `<file>.<N>`.
    pub fn for_file(file: &Path) -> Self {
        let dir = file
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let base = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(dir, base)
    }

    pub fn segment_path(&self, index: u64) -> PathBuf {
        self.dir.join(segment_name(&self.base, index))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(manifest_name(&self.base))
    }
}

pub fn segment_name(base: &str, index: u64) -> String {
    format!("{base}.{index}")
}

pub fn manifest_name(base: &str) -> String {
    format!("{base}.json")
}

/// Parses `<base>.<N>` where N is a decimal index without zero padding.
pub fn parse_segment_index(base: &str, name: &str) -> Option<u64> {
    let suffix = name.strip_prefix(base)?.strip_prefix('.')?;
    if suffix.is_empty() || !suffix.bytes().all(|b| b.is_ascii_digit()) || (suffix.len() > 1 && suffix.starts_with('0'))
    {
        return None;
    }
    suffix.parse().ok()
}

impl SegmentStore for DirStore {
    fn create(&mut self, index: u64) -> io::Result<Box<dyn Write + '_>> {
        Ok(Box::new(BufWriter::new(File::create(self.segment_path(index))?)))
    }

    fn open(&self, index: u64) -> io::Result<Option<Box<dyn Read + '_>>> {
        match File::open(self.segment_path(index)) {
            Ok(f) => Ok(Some(Box::new(BufReader::new(f)))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn indices(&self) -> io::Result<Vec<u64>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if let Some(index) = entry
                .file_name()
                .to_str()
                .and_then(|n| parse_segment_index(&self.base, n))
            {
                if entry.file_type()?.is_file() {
                    out.push(index);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// In-memory segment set; `None` marks an absent index.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    pub segments: Vec<Option<Vec<u8>>>,
}

impl SegmentStore for MemStore {
    fn create(&mut self, index: u64) -> io::Result<Box<dyn Write + '_>> {
        let i = index as usize;
        if self.segments.len() <= i {
            self.segments.resize(i + 1, None);
        }
        let slot = self.segments[i].insert(Vec::new());
        Ok(Box::new(slot))
    }

    fn open(&self, index: u64) -> io::Result<Option<Box<dyn Read + '_>>> {
        Ok(self
            .segments
            .get(index as usize)
            .and_then(|s| s.as_deref())
            .map(|s| Box::new(s) as Box<dyn Read>))
    }

    fn indices(&self) -> io::Result<Vec<u64>> {
        Ok(self
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| i as u64)
            .collect())
    }
}

/// Splits `input` into segments of at most `max_segment_size` bytes.
pub fn split<R: Read, S: SegmentStore + ?Sized>(
    mut input: R,
    max_segment_size: u64,
    store: &mut S,
) -> Result<SegmentManifest, SegmentError> {
    if max_segment_size == 0 {
        return Err(SegmentError::ZeroSegmentSize);
    }
    let mut whole = Sha256::new();
    let mut checksums = Vec::new();
    let mut total = 0u64;
    let mut buf = vec![0u8; max_segment_size.min(256 * 1024) as usize];
    // One byte of lookahead tells us whether another segment is needed
    // without creating an empty trailing one.
    let mut carry: Option<u8> = None;
    loop {
        if carry.is_none() {
            let mut one = [0u8; 1];
            if read_full(&mut input, &mut one)? == 0 {
                break;
            }
            carry = Some(one[0]);
        }
        let index = checksums.len() as u64;
        let mut out = HashingWriter::new(store.create(index)?);
        let first = [carry.take().expect("lookahead byte present")];
        out.write_all(&first)?;
        whole.update(first);
        let mut remaining = max_segment_size - 1;
        while remaining > 0 {
            let want = remaining.min(buf.len() as u64) as usize;
            let n = read_full(&mut input, &mut buf[..want])?;
            if n == 0 {
                break;
            }
            out.write_all(&buf[..n])?;
            whole.update(&buf[..n]);
            remaining -= n as u64;
        }
        let (mut sink, digest, written) = out.finish();
        sink.flush()?;
        total += written;
        checksums.push(digest);
    }
    if checksums.is_empty() {
        return Err(SegmentError::EmptyInput);
    }
    Ok(SegmentManifest {
        checksum_sha256: Sha256Digest(whole.finalize().into()),
        expected_segments: checksums.len() as u64,
        segment_checksums: checksums,
        segment_size: max_segment_size,
        total_size: total,
    })
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Checks that `indices` is exactly `0..n`, naming the first gap.
fn contiguous_count(indices: &[u64]) -> Result<u64, SegmentError> {
    for (expected, &actual) in indices.iter().enumerate() {
        if actual != expected as u64 {
            return Err(SegmentError::Incomplete {
                missing: expected as u64,
            });
        }
    }
    Ok(indices.len() as u64)
}

/// Concatenates segments in index order into `out`, returning the byte
/// count. With a manifest, every segment digest and the whole-file digest
/// are checked; the caller must discard `out` on error.
pub fn join<S: SegmentStore + ?Sized, W: Write>(
    store: &S,
    manifest: Option<&SegmentManifest>,
    out: W,
) -> Result<u64, SegmentError> {
    let indices = store.indices()?;
    if indices.is_empty() && manifest.is_none() {
        return Err(SegmentError::NoSegments("segment set".into()));
    }
    let present = match manifest {
        Some(m) => {
            m.validate()?;
            // Report the first missing index before any count disagreement.
            if let Some(missing) = (0..m.expected_segments).find(|i| indices.binary_search(i).is_err()) {
                return Err(SegmentError::Incomplete { missing });
            }
            if indices.len() as u64 != m.expected_segments {
                return Err(SegmentError::ManifestMismatch(format!(
                    "manifest declares {} segments but {} are present",
                    m.expected_segments,
                    indices.len()
                )));
            }
            m.expected_segments
        }
        None => contiguous_count(&indices)?,
    };

    let mut out = out;
    let mut whole = Sha256::new();
    let mut written = 0u64;
    let mut buf = segment_buffer(manifest.map_or(256 * 1024, |m| m.segment_size));
    for index in 0..present {
        let mut reader = store.open(index)?.ok_or(SegmentError::Incomplete { missing: index })?;
        match manifest {
            Some(m) => {
                let expected = m.segment_len(index);
                let (digest, copied) = stream_segment(&mut reader, expected + 1, &mut buf, &mut whole, &mut out)?;
                written += copied;
                if copied != expected || digest != m.segment_checksums[index as usize] {
                    return Err(SegmentError::SegmentIntegrity { index });
                }
            }
            None => {
                written += stream_segment(&mut reader, u64::MAX, &mut buf, &mut whole, &mut out)?.1;
            }
        }
    }
    out.flush()?;
    if let Some(m) = manifest {
        if written != m.total_size || Sha256Digest(whole.finalize().into()) != m.checksum_sha256 {
            return Err(SegmentError::WholeFileIntegrity);
        }
    }
    Ok(written)
}

/// One discrepancy found by [`verify`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mismatch {
    MissingSegment { index: u64 },
    UnexpectedSegment { index: u64 },
    SegmentSize { index: u64, expected: u64, actual: u64 },
    SegmentChecksum { index: u64 },
    WholeFileSize { expected: u64, actual: u64 },
    WholeFileChecksum,
}

impl Mismatch {
    pub fn segment_index(&self) -> Option<u64> {
        match self {
            Self::MissingSegment { index }
            | Self::UnexpectedSegment { index }
            | Self::SegmentSize { index, .. }
            | Self::SegmentChecksum { index } => Some(*index),
            Self::WholeFileSize { .. } | Self::WholeFileChecksum => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub mismatches: Vec<Mismatch>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    /// Distinct segment indices named by any mismatch.
    pub fn bad_segments(&self) -> Vec<u64> {
        let mut out: Vec<u64> = self.mismatches.iter().filter_map(Mismatch::segment_index).collect();
        out.dedup();
        out
    }
}

/// Compares a segment set against its manifest without producing output.
pub fn verify<S: SegmentStore + ?Sized>(store: &S, manifest: &SegmentManifest) -> Result<VerifyReport, SegmentError> {
    manifest.validate()?;
    let mut report = VerifyReport::default();
    let mut whole = Sha256::new();
    let mut whole_len = 0u64;
    let mut complete = true;
    let mut buf = segment_buffer(manifest.segment_size);
    for index in 0..manifest.expected_segments {
        let Some(mut reader) = store.open(index)? else {
            report.mismatches.push(Mismatch::MissingSegment { index });
            complete = false;
            continue;
        };
        let (digest, actual) = stream_segment(&mut reader, u64::MAX, &mut buf, &mut whole, &mut io::sink())?;
        whole_len += actual;
        let expected = manifest.segment_len(index);
        if actual != expected {
            report.mismatches.push(Mismatch::SegmentSize {
                index,
                expected,
                actual,
            });
        } else if digest != manifest.segment_checksums[index as usize] {
            report.mismatches.push(Mismatch::SegmentChecksum { index });
        }
    }
    for index in store.indices()? {
        if index >= manifest.expected_segments {
            report.mismatches.push(Mismatch::UnexpectedSegment { index });
        }
    }
    if complete {
        if whole_len != manifest.total_size {
            report.mismatches.push(Mismatch::WholeFileSize {
                expected: manifest.total_size,
                actual: whole_len,
            });
        } else if Sha256Digest(whole.finalize().into()) != manifest.checksum_sha256 {
            report.mismatches.push(Mismatch::WholeFileChecksum);
        }
    }
    Ok(report)
}

/// Checks an unsegmented file against a manifest: whole-file size and digest only.
pub fn verify_file(file: &Path, manifest: &SegmentManifest) -> Result<VerifyReport, SegmentError> {
    manifest.validate()?;
    let (digest, len) = sha256_reader(BufReader::new(File::open(file)?))?;
    let mut report = VerifyReport::default();
    if len != manifest.total_size {
        report.mismatches.push(Mismatch::WholeFileSize {
            expected: manifest.total_size,
            actual: len,
        });
    } else if digest != manifest.checksum_sha256 {
        report.mismatches.push(Mismatch::WholeFileChecksum);
    }
    Ok(report)
}

/// Streams up to `limit` bytes of one segment into `out`, feeding both the
/// segment hash and `whole`.
fn stream_segment<W: Write + ?Sized>(
    reader: &mut dyn Read,
    limit: u64,
    buf: &mut [u8],
    whole: &mut Sha256,
    out: &mut W,
) -> io::Result<(Sha256Digest, u64)> {
    let mut seg = Sha256::new();
    let mut total = 0u64;
    while total < limit {
        let want = (limit - total).min(buf.len() as u64) as usize;
        let n = match reader.read(&mut buf[..want]) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        seg.update(&buf[..n]);
        whole.update(&buf[..n]);
        out.write_all(&buf[..n])?;
        total += n as u64;
    }
    Ok((Sha256Digest(seg.finalize().into()), total))
}

fn segment_buffer(segment_size: u64) -> Vec<u8> {
    // One spare byte lets a single read also detect an overlong segment.
    vec![0u8; segment_size.saturating_add(1).min(256 * 1024) as usize]
}

/// Splits `file` into `<file>.N` siblings and writes `<file>.json`.
pub fn split_file(file: &Path, max_segment_size: u64) -> Result<SegmentManifest, SegmentError> {
    let mut store = DirStore::for_file(file);
    let manifest = split(BufReader::new(File::open(file)?), max_segment_size, &mut store)?;
    write_atomic(&store.manifest_path(), &write_manifest(&manifest))?;
    Ok(manifest)
}

/// Reads `<base>.json` next to `base`, if present.
pub fn read_manifest_for(base: &Path) -> Result<Option<SegmentManifest>, SegmentError> {
    let path = DirStore::for_file(base).manifest_path();
    match fs::read(&path) {
        Ok(bytes) => parse_manifest(&bytes).map(Some),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Joins the segments of `base` into `output`, verifying against
/// `<base>.json` when it exists. `output` is only created on success.
pub fn join_file(base: &Path, output: &Path) -> Result<u64, SegmentError> {
    let store = DirStore::for_file(base);
    let manifest = read_manifest_for(base)?;
    if store.indices()?.is_empty() && manifest.is_none() {
        return Err(SegmentError::NoSegments(base.display().to_string()));
    }
    let parent = output
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(parent)?;
    let mut writer = BufWriter::new(tmp.as_file());
    let written = join(&store, manifest.as_ref(), &mut writer)?;
    writer.flush()?;
    drop(writer);
    tmp.persist(output).map_err(|e| e.error)?;
    Ok(written)
}

/// Verifies `base` against its manifest: the segment set when segments
/// exist, otherwise the unsegmented file itself.
pub fn verify_path(base: &Path) -> Result<VerifyReport, SegmentError> {
    let manifest = read_manifest_for(base)?.ok_or_else(|| {
        SegmentError::Manifest(format!(
            "{} not found",
            DirStore::for_file(base).manifest_path().display()
        ))
    })?;
    let store = DirStore::for_file(base);
    if store.indices()?.is_empty() && base.is_file() {
        verify_file(base, &manifest)
    } else {
        verify(&store, &manifest)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
