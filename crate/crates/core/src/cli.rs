//! Command-line front end.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::archive::{self, ArchiveEntry, PackOptions, DEFAULT_ARCHIVE_NAME};
use crate::canonical::to_canonical_string;
use crate::error::{Error, ExitStatus};
use crate::hosts::{self, ArtifactRef, Cache, FetchOptions, HostClient, PushOptions, ServeOptions};
use crate::metadata::{self, default_sniffers, ArtifactListing, ArtifactMetadata, MetadataSource};
use crate::p2p::{self, ReceiveOptions, SendOptions, TransferCode};
use crate::registry::{HandlerKey, Location, Registry, SchemeRecord, DEFAULT_HUB_TEMPLATE};
use crate::segments;

pub const TOKEN_ENV: &str = "ARTIFACT_SHARE_TOKEN";
pub const RELAY_ENV: &str = "ARTIFACT_SHARE_RELAY";
pub const HUB_ENV: &str = "ARTIFACT_SHARE_HUB";
pub const HANDLERS_ENV: &str = "ARTIFACT_SHARE_HANDLERS";

#[derive(Debug, Parser)]
#[command(
    name = "artifact-share",
    version,
    about = "Package, share and fetch research artifacts"
)]
pub struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Extra handler records (JSON array) merged over the built-in table.
    #[arg(long, global = true, env = HANDLERS_ENV, value_name = "FILE")]
    handlers: Option<PathBuf>,
    /// URL template for `hf:` identifiers; `{id}` is replaced by the identifier.
    #[arg(long, global = true, env = HUB_ENV, value_name = "TEMPLATE")]
    hub: Option<String>,
    /// Register a URL scheme, e.g. `ciff-hub=https://host/{id}.tar.lz4`. Repeatable.
    #[arg(long = "scheme", global = true, value_name = "NAME=TEMPLATE")]
    schemes: Vec<String>,
    /// Log more (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pack a directory into a serialization file.
    Pack {
        dir: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Artifact type to record when the tree has no metadata file.
        #[arg(long = "type", requires = "format", value_name = "TYPE")]
        artifact_type: Option<String>,
        #[arg(long, requires = "artifact_type")]
        format: Option<String>,
        #[arg(long)]
        package_hint: Option<String>,
        /// Keep directory iteration order instead of sorting entries.
        #[arg(long)]
        no_sort: bool,
        /// Keep real modes, times and ownership (not reproducible).
        #[arg(long)]
        keep_attrs: bool,
        /// Compression level, 1-12.
        #[arg(long, default_value_t = 1)]
        level: u32,
    },
    /// Extract a serialization file.
    Unpack { file: PathBuf, dir: PathBuf },
    /// List entries and metadata of a serialization file or tree.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Show the metadata a tree or file resolves to, and where it came from.
    Sniff {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Split a file into numbered segments plus a manifest.
    Split {
        file: PathBuf,
        /// Maximum segment size (suffixes K, M, G, T for binary units; KB, MB, GB, TB for decimal).
        #[arg(long, value_parser = parse_size, default_value = "50GB")]
        size: u64,
    },
    /// Reassemble segments, verifying them against the manifest if present.
    Join {
        base: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check segments (or an unsegmented file) against the manifest.
    Verify {
        base: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Look up the handler for a type/format pair.
    Resolve {
        artifact_type: String,
        format: String,
        #[arg(long)]
        package_hint: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Download an artifact into the cache.
    Pull {
        url: String,
        #[arg(long, value_name = "DIR")]
        cache: Option<PathBuf>,
        #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
        token: Option<String>,
        #[arg(long, default_value_t = hosts::DEFAULT_WORKERS)]
        workers: usize,
        #[arg(long)]
        no_verify: bool,
        #[arg(long)]
        json: bool,
    },
    /// Upload an artifact to a hub repository.
    Push {
        artifact: PathBuf,
        repo_url: String,
        #[arg(long, value_parser = parse_size, default_value = "50GB")]
        max_segment: u64,
        #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
        token: Option<String>,
        #[arg(long = "type", requires = "format", value_name = "TYPE")]
        artifact_type: Option<String>,
        #[arg(long, requires = "artifact_type")]
        format: Option<String>,
        /// Name used in the generated README.
        #[arg(long)]
        name: Option<String>,
    },
    /// Run the reference artifact host.
    Serve {
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Largest single file accepted.
        #[arg(long, value_parser = parse_size, default_value = "50GB")]
        limit: u64,
        /// Bearer token required for uploads.
        #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
        token: Option<String>,
        #[arg(long)]
        readonly: bool,
        /// Require the token for downloads too.
        #[arg(long, requires = "token")]
        private: bool,
        /// Ignore Range headers.
        #[arg(long)]
        no_ranges: bool,
    },
    /// Offer an artifact to one receiver via a relay.
    Send {
        artifact: PathBuf,
        #[arg(long, env = RELAY_ENV, default_value = p2p::DEFAULT_RELAY)]
        relay: String,
        /// Seconds to wait for the receiver.
        #[arg(long, default_value_t = p2p::DEFAULT_TIMEOUT.as_secs())]
        timeout: u64,
    },
    /// Receive an artifact by its one-time code.
    Receive {
        code: String,
        dest: PathBuf,
        #[arg(long, env = RELAY_ENV, default_value = p2p::DEFAULT_RELAY)]
        relay: String,
        #[arg(long, default_value_t = p2p::DEFAULT_TIMEOUT.as_secs())]
        timeout: u64,
    },
    /// Run a rendezvous relay.
    Relay {
        #[arg(long, default_value = p2p::DEFAULT_RELAY)]
        addr: SocketAddr,
    },
}

/// Parses `123`, `4K`, `1M`, `50GB` and friends.
pub fn parse_size(text: &str) -> Result<u64, String> {
    let t = text.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (digits, unit) = t.split_at(split);
    let n: u64 = digits.parse().map_err(|_| format!("invalid size {text:?}"))?;
    let mult: u64 = match unit.to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KIB" => 1 << 10,
        "M" | "MIB" => 1 << 20,
        "G" | "GIB" => 1 << 30,
        "T" | "TIB" => 1 << 40,
        "KB" => 1_000,
        "MB" => 1_000_000,
        "GB" => 1_000_000_000,
        "TB" => 1_000_000_000_000,
        _ => return Err(format!("unknown size unit in {text:?}")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("size {text:?} is too large"))
}

/// Entry point for the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitStatus::Success,
                _ => ExitStatus::Usage,
            }
            .into();
        }
    };
    init_logging(cli.global.verbose);
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitStatus::Success.into(),
        Err(e) => {
            let _ = stdout.flush();
            eprintln!("error: {e}");
            e.status().into()
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn runtime() -> Result<tokio::runtime::Runtime, Error> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn registry(global: &GlobalArgs) -> Result<Registry, Error> {
    let hub = global.hub.as_deref().unwrap_or(DEFAULT_HUB_TEMPLATE);
    let mut reg = Registry::seeded_with_hub(hub);
    if let Some(path) = &global.handlers {
        reg.load_handlers_file(path)?;
    }
    for spec in &global.schemes {
        let (name, template) = spec
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--scheme expects NAME=TEMPLATE, got {spec:?}")))?;
        reg.set_scheme(SchemeRecord::template(name, template))?;
    }
    Ok(reg)
}

fn println(out: &mut dyn Write, text: impl AsRef<str>) -> Result<(), Error> {
    writeln!(out, "{}", text.as_ref())?;
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Error> {
    let global = cli.global;
    match cli.command {
        Command::Pack {
            dir,
            output,
            artifact_type,
            format,
            package_hint,
            no_sort,
            keep_attrs,
            level,
        } => {
            let reg = registry(&global)?;
            let meta = match (artifact_type, format) {
                (Some(t), Some(f)) => {
                    let mut meta = ArtifactMetadata::new(t, f)?;
                    let hint = package_hint.or_else(|| reg.get(&HandlerKey::of(&meta)).map(|r| r.package_hint.clone()));
                    meta.set_package_hint(hint);
                    Some(meta)
                }
                _ => None,
            };
            let options = PackOptions {
                normalize_attributes: !keep_attrs,
                sort_entries: !no_sort,
                compression_level: level,
            };
            let dest = output.unwrap_or_else(|| PathBuf::from(DEFAULT_ARCHIVE_NAME));
            let summary = archive::pack(&dir, meta.as_ref(), &options, &dest)?;
            println(
                out,
                format!(
                    "{}\t{} entries\t{} bytes\tsha256 {}",
                    dest.display(),
                    summary.entries.len(),
                    summary.size,
                    summary.sha256
                ),
            )
        }
        Command::Unpack { file, dir } => {
            let entries = archive::unpack(&file, &dir)?;
            println(out, format!("{} entries -> {}", entries.len(), dir.display()))
        }
        Command::Inspect { path, json } => inspect(&path, json, out),
        Command::Sniff { path, json } => {
            let listing = ArtifactListing::from_path(&path)?;
            let (meta, source) = metadata::resolve_metadata(&listing, &default_sniffers())?;
            if json {
                let v = json!({"metadata": meta.to_json_value(), "source": source_label(&source)});
                println(out, to_canonical_string(&v))
            } else {
                println(out, format!("{meta}\t{}", source_label(&source)))
            }
        }
        Command::Split { file, size } => {
            let manifest = segments::split_file(&file, size)?;
            println(
                out,
                format!(
                    "{} segments of at most {} bytes; manifest {}",
                    manifest.expected_segments,
                    manifest.segment_size,
                    segments::DirStore::for_file(&file).manifest_path().display()
                ),
            )
        }
        Command::Join { base, output } => {
            let dest = output.unwrap_or_else(|| base.clone());
            let n = segments::join_file(&base, &dest)?;
            println(out, format!("{} bytes -> {}", n, dest.display()))
        }
        Command::Verify { base, json } => {
            let report = segments::verify_path(&base)?;
            if json {
                let v = serde_json::to_value(&report).expect("report serializes");
                let v = json!({"ok": report.is_ok(), "mismatches": v["mismatches"]});
                println(out, to_canonical_string(&v))?;
            } else if report.is_ok() {
                println(out, "ok")?;
            } else {
                for m in &report.mismatches {
                    println(out, format!("mismatch: {}", describe_mismatch(m)))?;
                }
            }
            if report.is_ok() {
                Ok(())
            } else {
                Err(Error::Integrity(format!(
                    "{} mismatch(es) against the manifest",
                    report.mismatches.len()
                )))
            }
        }
        Command::Resolve {
            artifact_type,
            format,
            package_hint,
            json,
        } => {
            let reg = registry(&global)?;
            let mut meta = ArtifactMetadata::new(artifact_type, format)?;
            meta.set_package_hint(package_hint);
            let record = reg.resolve_handler(&meta)?;
            if json {
                let v = serde_json::to_value(record).expect("record serializes");
                println(out, to_canonical_string(&v))
            } else {
                println(
                    out,
                    format!("{}\t{}\tpackage: {}", record.name, record.key, record.package_hint),
                )
            }
        }
        Command::Pull {
            url,
            cache,
            token,
            workers,
            no_verify,
            json,
        } => {
            let reg = registry(&global)?;
            let aref = ArtifactRef::resolve(&reg, &url)?;
            let cache = Cache::new(std::path::absolute(cache.unwrap_or_else(Cache::default_root))?);
            let client = HostClient::new(token);
            let options = FetchOptions {
                verify: !no_verify,
                workers,
                progress: None,
            };
            let fetched = runtime()?.block_on(hosts::fetch(&client, &aref, &cache, &options))?;
            let handler = reg.resolve_handler(&fetched.metadata);
            if json {
                let v = json!({
                    "from_cache": fetched.from_cache,
                    "handler": handler.as_ref().ok().map(|r| serde_json::to_value(r).expect("record serializes")),
                    "metadata": fetched.metadata.to_json_value(),
                    "path": fetched.tree.display().to_string(),
                });
                println(out, to_canonical_string(&v))?;
            } else {
                println(out, format!("path: {}", fetched.tree.display()))?;
                println(out, format!("type/format: {}", fetched.metadata))?;
                if let Ok(r) = &handler {
                    println(out, format!("handler: {} (package: {})", r.name, r.package_hint))?;
                }
            }
            handler.map(|_| ()).map_err(Error::from)
        }
        Command::Push {
            artifact,
            repo_url,
            max_segment,
            token,
            artifact_type,
            format,
            name,
        } => {
            let reg = registry(&global)?;
            let location = reg.resolve_location(&repo_url)?;
            let Location::Url(url) = location else {
                return Err(Error::Usage(format!(
                    "{repo_url} does not resolve to an HTTP(S) repository"
                )));
            };
            let metadata = match (artifact_type, format) {
                (Some(t), Some(f)) => Some(ArtifactMetadata::new(t, f)?),
                _ => None,
            };
            let effective = match &metadata {
                Some(m) => Some(m.clone()),
                None => metadata::resolve_path(&artifact).ok().map(|(m, _)| m),
            };
            let package_hint = effective
                .as_ref()
                .and_then(|m| reg.hint_for(&HandlerKey::of(m), m.package_hint()));
            let options = PushOptions {
                max_segment_size: max_segment,
                metadata,
                display_name: name.or_else(|| Some(hosts::display_name_for(&repo_url))),
                package_hint,
                ..PushOptions::default()
            };
            let client = HostClient::new(token);
            let report = runtime()?.block_on(hosts::push(&client, &artifact, &url, &options))?;
            for f in &report.files {
                let state = if report.uploaded.contains(f) {
                    "uploaded"
                } else {
                    "unchanged"
                };
                println(out, format!("{state}\t{f}"))?;
            }
            println(
                out,
                format!("{}\t{} bytes\tsha256 {}", report.metadata, report.size, report.sha256),
            )
        }
        Command::Serve {
            dir,
            addr,
            limit,
            token,
            readonly,
            private,
            no_ranges,
        } => {
            let options = ServeOptions {
                token,
                readonly,
                private,
                accept_ranges: !no_ranges,
                max_file_size: limit,
            };
            let rt = runtime()?;
            rt.block_on(async {
                let handle = hosts::serve(&dir, addr, options).await?;
                println(out, format!("serving {} on {}", dir.display(), handle.url()))?;
                out.flush()?;
                tokio::select! {
                    r = handle.wait() => r?,
                    _ = tokio::signal::ctrl_c() => {}
                }
                Ok(())
            })
        }
        Command::Send {
            artifact,
            relay,
            timeout,
        } => {
            let options = SendOptions {
                timeout: Duration::from_secs(timeout),
                ..SendOptions::default()
            };
            let report = runtime()?.block_on(p2p::send(&artifact, &relay, &options, |code| {
                let _ = writeln!(out, "code: {code}");
                let _ = out.flush();
                eprintln!("On the other machine run: artifact-share receive {code} <dest>");
            }))?;
            println(out, format!("sent {} bytes, sha256 {}", report.size, report.sha256))
        }
        Command::Receive {
            code,
            dest,
            relay,
            timeout,
        } => {
            let code: TransferCode = code.parse().map_err(p2p::P2pError::from)?;
            let options = ReceiveOptions {
                timeout: Duration::from_secs(timeout),
            };
            let report = runtime()?.block_on(p2p::receive(&code, &dest, &relay, &options))?;
            println(
                out,
                format!(
                    "received {} bytes, sha256 {} -> {}",
                    report.size,
                    report.sha256,
                    report.dest.display()
                ),
            )
        }
        Command::Relay { addr } => {
            let rt = runtime()?;
            rt.block_on(async {
                let handle = p2p::relay_serve(addr).await?;
                println(out, format!("relay listening on {}", handle.addr()))?;
                out.flush()?;
                tokio::select! {
                    _ = handle.wait() => {}
                    _ = tokio::signal::ctrl_c() => {}
                }
                Ok(())
            })
        }
    }
}

fn source_label(source: &MetadataSource) -> String {
    match source {
        MetadataSource::Embedded => "embedded".into(),
        MetadataSource::Sniffer(id) => format!("sniffer:{id}"),
    }
}

fn describe_mismatch(m: &segments::Mismatch) -> String {
    use segments::Mismatch::*;
    match m {
        MissingSegment { index } => format!("segment {index} is missing"),
        UnexpectedSegment { index } => format!("segment {index} is not in the manifest"),
        SegmentSize {
            index,
            expected,
            actual,
        } => {
            format!("segment {index} has {actual} bytes, expected {expected}")
        }
        SegmentChecksum { index } => format!("segment {index} checksum differs"),
        WholeFileSize { expected, actual } => format!("file has {actual} bytes, expected {expected}"),
        WholeFileChecksum => "whole-file checksum differs".into(),
    }
}

fn inspect(path: &Path, json: bool, out: &mut dyn Write) -> Result<(), Error> {
    let listing = ArtifactListing::from_path(path)?;
    let resolved = metadata::resolve_metadata(&listing, &default_sniffers());
    if json {
        let entries: Vec<Value> = listing
            .entries
            .iter()
            .map(|e| serde_json::to_value(e).expect("entry serializes"))
            .collect();
        let (meta, inferred, source) = match &resolved {
            Ok((m, s)) => (m.to_json_value(), json!(m.is_inferred()), json!(source_label(s))),
            Err(_) => (Value::Null, Value::Null, Value::Null),
        };
        let v = json!({"entries": entries, "inferred": inferred, "metadata": meta, "source": source});
        println(out, to_canonical_string(&v))?;
    } else {
        match &resolved {
            Ok((m, s)) => {
                println(out, format!("type/format: {m}"))?;
                if let Some(hint) = m.package_hint() {
                    println(out, format!("package hint: {hint}"))?;
                }
                println(out, format!("inferred: {}", m.is_inferred()))?;
                println(out, format!("source: {}", source_label(s)))?;
            }
            Err(_) => println(out, "type/format: unknown")?,
        }
        println(out, format!("entries: {}", listing.entries.len()))?;
        for e in &listing.entries {
            println(out, format_entry(e))?;
        }
    }
    resolved.map(|_| ()).map_err(Error::from)
}

fn format_entry(e: &ArchiveEntry) -> String {
    let kind = match e.kind {
        archive::EntryKind::File => '-',
        archive::EntryKind::Directory => 'd',
    };
    format!("{kind} {:04o} {:>12} {}", e.mode & 0o7777, e.size, e.stored_name())
}
