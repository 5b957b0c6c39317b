//! LZ4 frame parameters for serialization files.
//!
//! Fixed: 4 MiB independent blocks, content checksum on, block checksums off,
//! content size unset.

use std::io::{self, Read, Write};

use lz4::liblz4::BlockChecksum;
use lz4::{BlockMode, BlockSize, ContentChecksum, EncoderBuilder};

use super::ArchiveError;

pub const MIN_COMPRESSION_LEVEL: u32 = 1;
pub const MAX_COMPRESSION_LEVEL: u32 = 12;

pub type Decoder<R> = lz4::Decoder<R>;

pub fn check_level(level: u32) -> Result<(), ArchiveError> {
    if !(MIN_COMPRESSION_LEVEL..=MAX_COMPRESSION_LEVEL).contains(&level) {
        return Err(ArchiveError::InvalidOption(format!(
            "compression level {level} outside {MIN_COMPRESSION_LEVEL}..={MAX_COMPRESSION_LEVEL}"
        )));
    }
    Ok(())
}

pub fn encoder<W: Write>(writer: W, level: u32) -> io::Result<lz4::Encoder<W>> {
    EncoderBuilder::new()
        .block_size(BlockSize::Max4MB)
        .block_mode(BlockMode::Independent)
        .block_checksum(BlockChecksum::NoBlockChecksum)
        .checksum(ContentChecksum::ChecksumEnabled)
        .content_size(0)
        .auto_flush(false)
        .favor_dec_speed(false)
        .level(level)
        .build(writer)
}

pub fn finish<W: Write>(encoder: lz4::Encoder<W>) -> io::Result<W> {
    let (writer, result) = encoder.finish();
    result?;
    Ok(writer)
}

pub fn decoder<R: Read>(reader: R) -> io::Result<Decoder<R>> {
    lz4::Decoder::new(reader)
}
