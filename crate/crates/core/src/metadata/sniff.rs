//! Metadata adapters: infer metadata from an artifact's contents when it
//! carries no `pt_meta.json`.

use super::{ArtifactListing, ArtifactMetadata};

pub trait Sniffer: Send + Sync {
    fn id(&self) -> &str;

    /// Metadata implied by the artifact, or `None` when the match condition
    /// does not hold.
    fn sniff(&self, listing: &ArtifactListing) -> Option<ArtifactMetadata>;
}

/// Matches an artifact whose root holds exactly one `*.ciff` file.
#[derive(Debug, Clone, Copy, Default)]
pub struct CiffSniffer;

impl Sniffer for CiffSniffer {
    fn id(&self) -> &str {
        "ciff"
    }

    fn sniff(&self, listing: &ArtifactListing) -> Option<ArtifactMetadata> {
        let count = listing.root_files().filter(|name| name.ends_with(".ciff")).count();
        if count != 1 {
            return None;
        }
        ArtifactMetadata::new("sparse_index", "ciff")
            .ok()
            .map(|m| m.with_package_hint("pyterrier-ciff"))
    }
}

/// Matches a Lucene index directory: a `segments_N` file plus `write.lock`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnseriniSniffer;

impl Sniffer for AnseriniSniffer {
    fn id(&self) -> &str {
        "anserini"
    }

    fn sniff(&self, listing: &ArtifactListing) -> Option<ArtifactMetadata> {
        let mut has_segments = false;
        let mut has_lock = false;
        for name in listing.root_files() {
            if name == "write.lock" {
                has_lock = true;
            } else if name.strip_prefix("segments_").is_some_and(|suffix| !suffix.is_empty()) {
                has_segments = true;
            }
        }
        if !(has_segments && has_lock) {
            return None;
        }
        ArtifactMetadata::new("sparse_index", "anserini")
            .ok()
            .map(|m| m.with_package_hint("pyterrier-anserini"))
    }
}

pub fn default_sniffers() -> Vec<Box<dyn Sniffer>> {
    vec![Box::new(AnseriniSniffer), Box::new(CiffSniffer)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::ArchiveEntry;

    fn listing(entries: Vec<ArchiveEntry>) -> ArtifactListing {
        ArtifactListing {
            entries,
            ..Default::default()
        }
    }

    #[test]
    fn ciff_requires_exactly_one_root_file() {
        assert!(CiffSniffer
            .sniff(&listing(vec![ArchiveEntry::file("x.ciff", 10)]))
            .is_some());
        assert!(CiffSniffer
            .sniff(&listing(vec![
                ArchiveEntry::file("a.ciff", 1),
                ArchiveEntry::file("b.ciff", 1)
            ]))
            .is_none());
        assert!(CiffSniffer.sniff(&listing(vec![])).is_none());
        // Nested files and directories named *.ciff do not count.
        assert!(CiffSniffer
            .sniff(&listing(vec![
                ArchiveEntry::dir("d"),
                ArchiveEntry::file("d/x.ciff", 1)
            ]))
            .is_none());
        assert!(CiffSniffer.sniff(&listing(vec![ArchiveEntry::dir("x.ciff")])).is_none());
    }

    #[test]
    fn anserini_needs_both_markers() {
        let both = listing(vec![
            ArchiveEntry::file("segments_1", 1),
            ArchiveEntry::file("write.lock", 0),
        ]);
        assert!(AnseriniSniffer.sniff(&both).is_some());
        assert!(AnseriniSniffer
            .sniff(&listing(vec![ArchiveEntry::file("segments_1", 1)]))
            .is_none());
        assert!(AnseriniSniffer
            .sniff(&listing(vec![ArchiveEntry::file("write.lock", 1)]))
            .is_none());
        let bare = listing(vec![
            ArchiveEntry::file("segments_", 1),
            ArchiveEntry::file("write.lock", 0),
        ]);
        assert!(AnseriniSniffer.sniff(&bare).is_none());
    }
}
