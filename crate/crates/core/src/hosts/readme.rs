//! README generated for every hub upload.

use std::fmt::Write;

use crate::metadata::ArtifactMetadata;

pub const README_NAME: &str = "README.md";
pub const TAG_LINE: &str = "tag: artifact";

/// Renders the upload README for `meta` published as `display_name`.
pub fn generate_readme(meta: &ArtifactMetadata, display_name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {display_name}\n");
    let _ = writeln!(
        out,
        "Artifact type/format: `{}/{}`",
        meta.artifact_type(),
        meta.format()
    );
    if let Some(hint) = meta.package_hint() {
        let _ = writeln!(out, "\nLoading it requires the `{hint}` package.");
    }
    let _ = writeln!(out, "\n## Usage\n");
    let _ = writeln!(out, "```sh\nartifact-share pull hf:{display_name}\n```");
    let _ = writeln!(
        out,
        "\n## Benchmarks\n\n_TODO: add benchmark results for this artifact._"
    );
    let _ = writeln!(
        out,
        "\n## Reproduction\n\n_TODO: add the code used to build this artifact._"
    );
    let _ = writeln!(out, "\n{TAG_LINE}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_contract() {
        let meta = ArtifactMetadata::new("sparse_index", "terrier").unwrap();
        let text = generate_readme(&meta, "user/my-index.terrier");
        assert!(text.starts_with("# user/my-index.terrier\n"));
        assert!(text.contains("`sparse_index/terrier`"));
        assert!(text.contains("hf:user/my-index.terrier"));
        assert!(text.contains("\n## Benchmarks\n"));
        assert!(text.contains("\n## Reproduction\n"));
        assert!(text.lines().any(|l| l == TAG_LINE));
        assert_eq!(text, generate_readme(&meta, "user/my-index.terrier"));
    }

    #[test]
    fn mentions_package_hint() {
        let meta = ArtifactMetadata::new("dense_index", "flex")
            .unwrap()
            .with_package_hint("pyterrier-dr");
        assert!(generate_readme(&meta, "a/b").contains("`pyterrier-dr`"));
    }
}
