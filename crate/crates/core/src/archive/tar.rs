//! Minimal POSIX ustar reader/writer.
//!
//! The writer only ever emits regular files and directories. Names that do
//! not fit ustar's name/prefix split get a PAX extended header carrying the
//! `path` record (and `size` for members of 8 GiB or more). No time records
//! are ever written.

use std::io::{self, Read, Write};

pub const BLOCK: usize = 512;

const NAME_LEN: usize = 100;
const PREFIX_LEN: usize = 155;
const MAX_OCTAL_SIZE: u64 = 0o77777777777;
const PAX_HEADER_NAME: &[u8] = b"././@PaxHeader";

pub const TYPE_FILE: u8 = b'0';
pub const TYPE_DIR: u8 = b'5';
const TYPE_PAX: u8 = b'x';
const TYPE_PAX_GLOBAL: u8 = b'g';
const TYPE_GNU_LONGNAME: u8 = b'L';

/// Header attributes for one member, before encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberHeader {
    /// Member name as stored, with a trailing `/` for directories.
    pub name: String,
    pub typeflag: u8,
    pub mode: u32,
    pub uid: u64,
    pub gid: u64,
    pub size: u64,
    pub mtime: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum TarError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corrupt tar header: {0}")]
    Corrupt(String),
    #[error("value {value} does not fit in the ustar {field} field")]
    Overflow { field: &'static str, value: u64 },
}

pub struct TarWriter<W> {
    inner: W,
}

impl<W: Write> TarWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    /// Writes a header and then exactly `header.size` bytes from `data`,
    /// followed by zero padding to the block boundary.
    pub fn append<R: Read>(&mut self, header: &MemberHeader, data: R) -> Result<(), TarError> {
        let mut pax = Vec::new();
        let (name, prefix) = match split_name(header.name.as_bytes()) {
            Some(parts) => parts,
            None => {
                pax_record(&mut pax, "path", header.name.as_bytes());
                (truncate_utf8(&header.name, NAME_LEN), &[][..])
            }
        };
        let mut size_field = header.size;
        if header.size > MAX_OCTAL_SIZE {
            pax_record(&mut pax, "size", header.size.to_string().as_bytes());
            size_field = 0;
        }
        if !pax.is_empty() {
            let pax_header = encode_header(PAX_HEADER_NAME, &[], TYPE_PAX, 0o644, 0, 0, pax.len() as u64, 0)?;
            self.inner.write_all(&pax_header)?;
            self.inner.write_all(&pax)?;
            self.pad(pax.len() as u64)?;
        }
        let block = encode_header(
            name,
            prefix,
            header.typeflag,
            header.mode,
            header.uid,
            header.gid,
            size_field,
            header.mtime,
        )?;
        self.inner.write_all(&block)?;
        let copied = io::copy(&mut data.take(header.size), &mut self.inner)?;
        if copied != header.size {
            return Err(TarError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("{}: expected {} bytes, read {copied}", header.name, header.size),
            )));
        }
        self.pad(header.size)
    }

    fn pad(&mut self, len: u64) -> Result<(), TarError> {
        let rem = (len % BLOCK as u64) as usize;
        if rem != 0 {
            self.inner.write_all(&[0u8; BLOCK][..BLOCK - rem])?;
        }
        Ok(())
    }

    /// Writes the two zero blocks that terminate the archive.
    pub fn finish(mut self) -> Result<W, TarError> {
        self.inner.write_all(&[0u8; BLOCK * 2])?;
        Ok(self.inner)
    }
}

/// Splits a stored name into ustar (name, prefix) fields, or `None` when a
/// PAX header is required.
fn split_name(name: &[u8]) -> Option<(&[u8], &[u8])> {
    if name.len() <= NAME_LEN {
        return Some((name, &[]));
    }
    // The last byte may be the directory slash; never split there.
    let searchable = &name[..name.len() - 1];
    searchable
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'/')
        .map(|(i, _)| (&name[i + 1..], &name[..i]))
        .find(|(rest, prefix)| rest.len() <= NAME_LEN && prefix.len() <= PREFIX_LEN && !prefix.is_empty())
}

fn truncate_utf8(s: &str, max: usize) -> &[u8] {
    let mut end = max.min(s.len());
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s.as_bytes()[..end]
}

fn pax_record(out: &mut Vec<u8>, key: &str, value: &[u8]) {
    // "<len> <key>=<value>\n" where <len> counts itself.
    let base = key.len() + value.len() + 3;
    let mut len = base + 1;
    while base + len.to_string().len() != len {
        len += 1;
    }
    out.extend_from_slice(len.to_string().as_bytes());
    out.push(b' ');
    out.extend_from_slice(key.as_bytes());
    out.push(b'=');
    out.extend_from_slice(value);
    out.push(b'\n');
}

fn write_octal(field: &mut [u8], value: u64, name: &'static str) -> Result<(), TarError> {
    let digits = field.len() - 1;
    let text = format!("{value:0digits$o}");
    if text.len() > digits {
        return Err(TarError::Overflow { field: name, value });
    }
    field[..digits].copy_from_slice(text.as_bytes());
    field[digits] = 0;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn encode_header(
    name: &[u8],
    prefix: &[u8],
    typeflag: u8,
    mode: u32,
    uid: u64,
    gid: u64,
    size: u64,
    mtime: u64,
) -> Result<[u8; BLOCK], TarError> {
    let mut h = [0u8; BLOCK];
    h[..name.len()].copy_from_slice(name);
    write_octal(&mut h[100..108], u64::from(mode), "mode")?;
    write_octal(&mut h[108..116], uid, "uid")?;
    write_octal(&mut h[116..124], gid, "gid")?;
    write_octal(&mut h[124..136], size, "size")?;
    write_octal(&mut h[136..148], mtime, "mtime")?;
    h[156] = typeflag;
    h[257..263].copy_from_slice(b"ustar\0");
    h[263..265].copy_from_slice(b"00");
    write_octal(&mut h[329..337], 0, "devmajor")?;
    write_octal(&mut h[337..345], 0, "devminor")?;
    h[345..345 + prefix.len()].copy_from_slice(prefix);
    h[148..156].fill(b' ');
    let sum: u64 = h.iter().map(|&b| u64::from(b)).sum();
    let text = format!("{sum:06o}");
    h[148..154].copy_from_slice(text.as_bytes());
    h[154] = 0;
    h[155] = b' ';
    Ok(h)
}

fn field_str(field: &[u8]) -> &[u8] {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    &field[..end]
}

fn parse_numeric(field: &[u8], name: &str) -> Result<u64, TarError> {
    if field.first().is_some_and(|b| b & 0x80 != 0) {
        // GNU base-256 encoding.
        let mut value: u64 = u64::from(field[0] & 0x7f);
        for &b in &field[1..] {
            value = value
                .checked_mul(256)
                .and_then(|v| v.checked_add(u64::from(b)))
                .ok_or_else(|| TarError::Corrupt(format!("{name} field overflows")))?;
        }
        return Ok(value);
    }
    let text = field_str(field);
    let trimmed: Vec<u8> = text.iter().copied().filter(|b| *b != b' ').collect();
    if trimmed.is_empty() {
        return Ok(0);
    }
    let s = std::str::from_utf8(&trimmed).map_err(|_| TarError::Corrupt(format!("{name} field is not octal")))?;
    u64::from_str_radix(s, 8).map_err(|_| TarError::Corrupt(format!("{name} field is not octal: {s:?}")))
}

/// A decoded member header, with PAX overrides applied.
#[derive(Debug, Clone)]
pub struct RawMember {
    pub name: Vec<u8>,
    pub typeflag: u8,
    pub mode: u32,
    pub size: u64,
    pub mtime: u64,
}

pub struct TarReader<R> {
    inner: R,
    /// Bytes of the current member's data (plus padding) not yet consumed.
    pending: u64,
    done: bool,
}

impl<R: Read> TarReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            pending: 0,
            done: false,
        }
    }

    /// Advances to the next regular member, skipping any unread data of the
    /// previous one. Returns `None` at the end-of-archive marker.
    pub fn next_member(&mut self) -> Result<Option<RawMember>, TarError> {
        self.skip_pending()?;
        if self.done {
            return Ok(None);
        }
        let mut long_name: Option<Vec<u8>> = None;
        let mut pax_size: Option<u64> = None;
        loop {
            let mut block = [0u8; BLOCK];
            if !read_block(&mut self.inner, &mut block)? {
                return Err(TarError::Corrupt(
                    "archive ends without an end-of-archive marker".into(),
                ));
            }
            if block.iter().all(|&b| b == 0) {
                self.done = true;
                return Ok(None);
            }
            verify_checksum(&block)?;
            let typeflag = block[156];
            let size = parse_numeric(&block[124..136], "size")?;
            match typeflag {
                TYPE_PAX | TYPE_PAX_GLOBAL | TYPE_GNU_LONGNAME => {
                    let data = self.read_aux(size)?;
                    if typeflag == TYPE_PAX {
                        for (key, value) in parse_pax(&data)? {
                            match key.as_slice() {
                                b"path" => long_name = Some(value),
                                b"size" => {
                                    let s = std::str::from_utf8(&value)
                                        .ok()
                                        .and_then(|s| s.parse().ok())
                                        .ok_or_else(|| TarError::Corrupt("bad PAX size record".into()))?;
                                    pax_size = Some(s);
                                }
                                _ => {}
                            }
                        }
                    } else if typeflag == TYPE_GNU_LONGNAME {
                        long_name = Some(field_str(&data).to_vec());
                    }
                    continue;
                }
                _ => {}
            }
            let name = match long_name.take() {
                Some(name) => name,
                None => {
                    let base = field_str(&block[..100]);
                    let prefix = if &block[257..262] == b"ustar" {
                        field_str(&block[345..500])
                    } else {
                        &[][..]
                    };
                    if prefix.is_empty() {
                        base.to_vec()
                    } else {
                        let mut full = prefix.to_vec();
                        full.push(b'/');
                        full.extend_from_slice(base);
                        full
                    }
                }
            };
            let size = pax_size.take().unwrap_or(size);
            let member = RawMember {
                name,
                typeflag,
                mode: parse_numeric(&block[100..108], "mode")? as u32,
                size,
                mtime: parse_numeric(&block[136..148], "mtime")?,
            };
            self.pending = padded(size);
            return Ok(Some(member));
        }
    }

    /// Reader over the current member's data.
    pub fn data(&mut self, size: u64) -> MemberData<'_, R> {
        MemberData {
            reader: self,
            remaining: size,
        }
    }

    fn read_aux(&mut self, size: u64) -> Result<Vec<u8>, TarError> {
        if size > 16 * 1024 * 1024 {
            return Err(TarError::Corrupt(format!("extended header of {size} bytes")));
        }
        let mut data = vec![0u8; size as usize];
        self.inner.read_exact(&mut data)?;
        self.pending = padded(size) - size;
        self.skip_pending()?;
        Ok(data)
    }

    fn skip_pending(&mut self) -> Result<(), TarError> {
        if self.pending > 0 {
            let n = io::copy(&mut (&mut self.inner).take(self.pending), &mut io::sink())?;
            if n != self.pending {
                return Err(TarError::Io(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "truncated tar member",
                )));
            }
            self.pending = 0;
        }
        Ok(())
    }

    pub fn into_inner(self) -> R {
        self.inner
    }
}

pub struct MemberData<'a, R> {
    reader: &'a mut TarReader<R>,
    remaining: u64,
}

impl<R: Read> Read for MemberData<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.remaining == 0 {
            return Ok(0);
        }
        let max = buf.len().min(self.remaining.min(usize::MAX as u64) as usize);
        let n = self.reader.inner.read(&mut buf[..max])?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated tar member"));
        }
        self.remaining -= n as u64;
        self.reader.pending -= n as u64;
        Ok(n)
    }
}

fn padded(size: u64) -> u64 {
    size.div_ceil(BLOCK as u64) * BLOCK as u64
}

fn read_block<R: Read>(r: &mut R, block: &mut [u8; BLOCK]) -> Result<bool, TarError> {
    let mut filled = 0;
    while filled < BLOCK {
        match r.read(&mut block[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(TarError::Corrupt("truncated header block".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn verify_checksum(block: &[u8; BLOCK]) -> Result<(), TarError> {
    let stored = parse_numeric(&block[148..156], "checksum")?;
    let computed: u64 = block
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (148..156).contains(&i) {
                u64::from(b' ')
            } else {
                u64::from(b)
            }
        })
        .sum();
    if stored != computed {
        return Err(TarError::Corrupt(format!(
            "header checksum {stored:o} != computed {computed:o}"
        )));
    }
    Ok(())
}

type PaxRecord = (Vec<u8>, Vec<u8>);

fn parse_pax(data: &[u8]) -> Result<Vec<PaxRecord>, TarError> {
    let mut out = Vec::new();
    let mut rest = data;
    while !rest.is_empty() {
        let space = rest
            .iter()
            .position(|&b| b == b' ')
            .ok_or_else(|| TarError::Corrupt("bad PAX record".into()))?;
        let len: usize = std::str::from_utf8(&rest[..space])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TarError::Corrupt("bad PAX record length".into()))?;
        if len <= space + 1 || len > rest.len() || rest[len - 1] != b'\n' {
            return Err(TarError::Corrupt("bad PAX record length".into()));
        }
        let record = &rest[space + 1..len - 1];
        let eq = record
            .iter()
            .position(|&b| b == b'=')
            .ok_or_else(|| TarError::Corrupt("PAX record without '='".into()))?;
        out.push((record[..eq].to_vec(), record[eq + 1..].to_vec()));
        rest = &rest[len..];
    }
    Ok(out)
}
