//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant, SystemTime};

use artifact_share::archive::{self, PackOptions};
use artifact_share::hosts::{
    self, fetch, push, serve, ArtifactRef, Cache, FetchOptions, HostClient, PushOptions, ServeOptions,
};
use artifact_share::metadata::{self, ArtifactMetadata, MetadataSource};
use artifact_share::p2p::{self, frame::decode_all, P2pError, ReceiveOptions, SendOptions};
use artifact_share::registry::{Location, Registry, RegistryError};
use artifact_share::segments::{self, SegmentStore};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use common::*;

const AC1_LIMIT: Duration = Duration::from_secs(10);
const AC1_FILES: usize = 1000;
const AC1_BYTES: usize = 10 << 20;
const AC2_CASES: u32 = 100;
const AC2_MAX_DEPTH: usize = 5;
const AC2_MAX_FILE: usize = 1 << 20;
const AC4_LIMIT: Duration = Duration::from_secs(30);
const AC4_FILE_SIZES: [usize; 4] = [1, 10, 1 << 20, 10 << 20];
const AC4_SEGMENT_SIZES: [u64; 4] = [1, 4, 100 << 10, 1 << 20];
/// Segment sets up to this size get a flip in every segment; larger ones
/// get the first, the last and a number of random segments.
const AC4_EXHAUSTIVE_FLIPS: u64 = 64;
const AC4_RANDOM_FLIPS: usize = 14;
/// Above this many segments each verify pass is a multi-second scan, so
/// the random sample shrinks to keep the whole criterion under its limit.
const AC4_LARGE_SET: u64 = 100_000;
const AC4_LARGE_SET_RANDOM_FLIPS: usize = 2;
const AC7_LIMIT: Duration = Duration::from_secs(10);
const AC8_CUT: f64 = 0.40;
const AC9_LIMIT: Duration = Duration::from_secs(10);
const AC9_BYTES: usize = 5 << 20;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn io_err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:.2?}, limit {limit:?}");
    Ok(took)
}

fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn random_name(rng: &mut ChaCha8Rng, len: usize) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-";
    (0..len)
        .map(|_| CHARS[rng.random_range(0..CHARS.len())] as char)
        .collect()
}

/// File list for the determinism tree: random directories and names,
/// random sizes averaging `total / files`.
fn determinism_layout(seed: u64) -> Vec<(String, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<String> = (0..60)
        .map(|_| {
            let depth = rng.random_range(0..=3);
            (0..depth)
                .map(|_| {
                    let len = rng.random_range(1..12);
                    random_name(&mut rng, len)
                })
                .collect::<Vec<_>>()
                .join("/")
        })
        .collect();
    let mut files = BTreeMap::new();
    let mean = AC1_BYTES / AC1_FILES;
    while files.len() < AC1_FILES {
        let dir = &dirs[rng.random_range(0..dirs.len())];
        let len = rng.random_range(1..20);
        let ext = ["bin", "txt", "idx", "json"][rng.random_range(0..4)];
        // Directories never contain '.', so file and directory names cannot collide.
        let name = format!("{}.{ext}", random_name(&mut rng, len));
        let path = if dir.is_empty() { name } else { format!("{dir}/{name}") };
        let mut data = vec![0u8; rng.random_range(0..=2 * mean)];
        rng.fill_bytes(&mut data);
        files.insert(path, data);
    }
    files.into_iter().collect()
}

fn materialize(root: &Path, layout: &[(String, Vec<u8>)], mtime: impl Fn(usize) -> SystemTime) -> io::Result<()> {
    for (i, (path, data)) in layout.iter().enumerate() {
        let p = root.join(path);
        fs::create_dir_all(p.parent().unwrap())?;
        fs::write(&p, data)?;
        fs::File::options().write(true).open(&p)?.set_modified(mtime(i))?;
    }
    Ok(())
}

fn ac1_determinism() -> Outcome {
    let work = tempfile::tempdir().map_err(io_err)?;
    let layout = determinism_layout(0xA11CE);
    let total: usize = layout.iter().map(|(_, d)| d.len()).sum();
    let start = Instant::now();

    let first = work.path().join("first");
    materialize(&first, &layout, |_| SystemTime::now()).map_err(io_err)?;
    let opts = PackOptions::default();
    let a = work.path().join("a.tar.lz4");
    let b = work.path().join("b.tar.lz4");
    archive::pack(&first, None, &opts, &a).map_err(io_err)?;
    archive::pack(&first, None, &opts, &b).map_err(io_err)?;

    // Same contents created in a shuffled order with scattered timestamps.
    let mut shuffled = layout.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    let second = work.path().join("second");
    materialize(&second, &shuffled, |i| {
        SystemTime::UNIX_EPOCH + Duration::from_secs(1_000_000 + 7919 * i as u64)
    })
    .map_err(io_err)?;
    let c = work.path().join("c.tar.lz4");
    archive::pack(&second, None, &opts, &c).map_err(io_err)?;
    let took = within(AC1_LIMIT, start)?;

    let digests = [oracle_sha256(&a), oracle_sha256(&b), oracle_sha256(&c)];
    ensure!(
        digests[0] == digests[1] && digests[1] == digests[2],
        "archive digests differ: {digests:?}"
    );
    Ok(format!(
        "{} files, {:.1} MiB, sha256 {}.. x3 in {took:.2?}",
        layout.len(),
        total as f64 / (1 << 20) as f64,
        &digests[0][..12]
    ))
}

#[derive(Debug, Clone)]
struct TreeLayout {
    files: Vec<(Vec<String>, String, usize, u64)>,
    empty_dirs: Vec<Vec<String>>,
}

fn component(prefix: char) -> impl Strategy<Value = String> {
    // Up to 60 bytes per component, so deep paths exceed the ustar name fields.
    proptest::string::string_regex("[a-zA-Z0-9 _.=-]{1,59}")
        .unwrap()
        .prop_map(move |s| format!("{prefix}{s}"))
}

fn tree_strategy() -> impl Strategy<Value = TreeLayout> {
    let dirs = proptest::collection::vec(component('d'), 0..AC2_MAX_DEPTH);
    let size = prop_oneof![3 => 0usize..=4096, 1 => 0usize..=AC2_MAX_FILE];
    let file = (dirs, component('f'), size, any::<u64>());
    (
        proptest::collection::vec(file, 1..8),
        proptest::collection::vec(proptest::collection::vec(component('e'), 1..=AC2_MAX_DEPTH), 0..3),
    )
        .prop_map(|(files, empty_dirs)| TreeLayout { files, empty_dirs })
}

fn build_tree(root: &Path, layout: &TreeLayout) -> io::Result<()> {
    fs::create_dir_all(root)?;
    for (dirs, name, size, seed) in &layout.files {
        let dir = dirs.iter().fold(root.to_path_buf(), |p, d| p.join(d));
        fs::create_dir_all(&dir)?;
        let mut data = vec![0u8; *size];
        ChaCha8Rng::seed_from_u64(*seed).fill_bytes(&mut data);
        fs::write(dir.join(name), data)?;
    }
    for dirs in &layout.empty_dirs {
        fs::create_dir_all(dirs.iter().fold(root.to_path_buf(), |p, d| p.join(d)))?;
    }
    Ok(())
}

fn ac2_round_trip() -> Outcome {
    let config = Config {
        cases: AC2_CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    let mut runner = TestRunner::new_with_rng(config, rng);
    let files = std::cell::Cell::new(0usize);
    let bytes = std::cell::Cell::new(0usize);
    let result = runner.run(&tree_strategy(), |layout| {
        let work = tempfile::tempdir().unwrap();
        let tree = work.path().join("tree");
        build_tree(&tree, &layout).unwrap();
        let file = work.path().join("t.tar.lz4");
        archive::pack(&tree, None, &PackOptions::default(), &file).unwrap();
        let out = work.path().join("out");
        archive::unpack(&file, &out).unwrap();
        let expected = snapshot(&tree);
        files.set(files.get() + expected.values().filter(|v| v.is_some()).count());
        bytes.set(bytes.get() + expected.values().flatten().map(Vec::len).sum::<usize>());
        prop_assert_eq!(snapshot(&out), expected);
        Ok(())
    });
    match result {
        Ok(()) => Ok(format!(
            "{AC2_CASES} trees, {} files, {:.1} MiB reproduced",
            files.get(),
            bytes.get() as f64 / (1 << 20) as f64
        )),
        Err(e) => Err(e.to_string()),
    }
}

fn ac3_normalization() -> Outcome {
    use std::os::unix::fs::PermissionsExt;
    let work = tempfile::tempdir().map_err(io_err)?;
    let tree = work.path().join("tree");
    // Names chosen so that path order and stored-name order disagree.
    for (path, mode) in [
        ("a", 0o600),
        ("a-b", 0o777),
        ("b/x", 0o640),
        ("b/x.y", 0o755),
        ("b-c/z", 0o444),
        ("B", 0o700),
        ("\u{e9}t\u{e9}", 0o644),
        ("deep/er/still/file.bin", 0o751),
        (&format!("long/{}", "n".repeat(150)), 0o644),
    ] {
        let p = tree.join(path);
        fs::create_dir_all(p.parent().unwrap()).map_err(io_err)?;
        fs::write(&p, path.as_bytes()).map_err(io_err)?;
        fs::set_permissions(&p, fs::Permissions::from_mode(mode)).map_err(io_err)?;
    }
    fs::set_permissions(tree.join("deep"), fs::Permissions::from_mode(0o700)).map_err(io_err)?;
    write_meta(&tree, "sparse_index", "terrier");
    let file = work.path().join("n.tar.lz4");
    archive::pack(&tree, None, &PackOptions::default(), &file).map_err(io_err)?;

    // Independent decoders: a pure-Rust LZ4 frame reader and TAR reader.
    let decoder = lz4_flex::frame::FrameDecoder::new(fs::File::open(&file).map_err(io_err)?);
    let mut tar = tar::Archive::new(decoder);
    let mut names: Vec<Vec<u8>> = Vec::new();
    for entry in tar.entries().map_err(io_err)? {
        let mut entry = entry.map_err(io_err)?;
        let name = entry.path_bytes().into_owned();
        let shown = String::from_utf8_lossy(&name).into_owned();
        let h = entry.header();
        let mtime = h.mtime().map_err(io_err)?;
        let (uid, gid) = (h.uid().map_err(io_err)?, h.gid().map_err(io_err)?);
        let mode = h.mode().map_err(io_err)?;
        ensure!(mtime == 0, "{shown}: mtime {mtime}");
        ensure!(uid == 0 && gid == 0, "{shown}: uid {uid} gid {gid}");
        ensure!(mode == 0o644 || mode == 0o755, "{shown}: mode {mode:o}");
        let is_dir = h.entry_type().is_dir();
        ensure!(is_dir == (mode == 0o755), "{shown}: mode {mode:o} for is_dir={is_dir}");
        if let Some(prev) = names.last() {
            ensure!(
                prev < &name,
                "{} does not sort before {shown}",
                String::from_utf8_lossy(prev)
            );
        }
        let mut sink = Vec::new();
        entry.read_to_end(&mut sink).map_err(io_err)?;
        names.push(name);
    }
    ensure!(names.len() >= 10, "only {} entries read", names.len());
    Ok(format!(
        "{} entries: mtime 0, uid/gid 0, modes 0644/0755, strictly sorted",
        names.len()
    ))
}

/// All segments in one buffer; segment `i` spans `starts[i]..starts[i + 1]`.
#[derive(Default)]
struct FlatStore {
    data: Vec<u8>,
    starts: Vec<usize>,
}

impl FlatStore {
    fn span(&self, index: usize) -> std::ops::Range<usize> {
        self.starts[index]..self.starts.get(index + 1).copied().unwrap_or(self.data.len())
    }
}

impl SegmentStore for FlatStore {
    fn create(&mut self, index: u64) -> io::Result<Box<dyn Write + '_>> {
        if index as usize != self.starts.len() {
            return Err(io::Error::other("segments must be created in order"));
        }
        self.starts.push(self.data.len());
        Ok(Box::new(&mut self.data))
    }

    fn open(&self, index: u64) -> io::Result<Option<Box<dyn Read + '_>>> {
        let i = index as usize;
        if i >= self.starts.len() {
            return Ok(None);
        }
        Ok(Some(Box::new(&self.data[self.span(i)])))
    }

    fn indices(&self) -> io::Result<Vec<u64>> {
        Ok((0..self.starts.len() as u64).collect())
    }
}

fn ac4_case(rng: &mut ChaCha8Rng, len: usize, seg: u64) -> Result<u64, String> {
    let mut input = vec![0u8; len];
    rng.fill_bytes(&mut input);
    let mut store = FlatStore::default();
    let m = segments::split(&input[..], seg, &mut store).map_err(io_err)?;
    let label = format!("{len} B / {seg} B");

    let count = (len as u64).div_ceil(seg);
    ensure!(
        m.expected_segments == count,
        "{label}: {} segments, expected {count}",
        m.expected_segments
    );
    ensure!(m.segment_checksums.len() as u64 == count, "{label}: checksum count");
    ensure!(
        m.total_size == len as u64 && m.segment_size == seg,
        "{label}: sizes in manifest"
    );
    ensure!(
        m.checksum_sha256.0 == <[u8; 32]>::from(Sha256::digest(&input)),
        "{label}: whole-file checksum"
    );
    for (i, chunk) in input.chunks(seg as usize).enumerate() {
        ensure!(store.span(i).len() == chunk.len(), "{label}: segment {i} length");
        ensure!(
            m.segment_checksums[i].0 == <[u8; 32]>::from(Sha256::digest(chunk)),
            "{label}: segment {i} checksum"
        );
    }
    if count <= AC4_LARGE_SET {
        let json: serde_json::Value = serde_json::from_slice(&segments::write_manifest(&m)).map_err(io_err)?;
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        ensure!(
            keys == [
                "checksum_sha256",
                "expected_segments",
                "segment_checksums",
                "segment_size",
                "total_size"
            ],
            "{label}: manifest keys {keys:?}"
        );
        ensure!(
            segments::parse_manifest(&segments::write_manifest(&m)).map_err(io_err)? == m,
            "{label}: manifest round trip"
        );
    }

    let mut joined = Vec::with_capacity(len);
    segments::join(&store, Some(&m), &mut joined).map_err(io_err)?;
    ensure!(joined == input, "{label}: join(split(F)) != F");

    let targets: BTreeSet<u64> = if count <= AC4_EXHAUSTIVE_FLIPS {
        (0..count).collect()
    } else {
        let random = if count > AC4_LARGE_SET {
            AC4_LARGE_SET_RANDOM_FLIPS
        } else {
            AC4_RANDOM_FLIPS
        };
        let mut t: BTreeSet<u64> = [0, count - 1].into();
        while t.len() < 2 + random {
            t.insert(rng.random_range(0..count));
        }
        t
    };
    for &i in &targets {
        let span = store.span(i as usize);
        let pos = rng.random_range(span);
        store.data[pos] ^= 1 << rng.random_range(0..8);
        let report = segments::verify(&store, &m).map_err(io_err)?;
        ensure!(
            report.bad_segments() == [i],
            "{label}: flip in segment {i} reported {:?}",
            report.mismatches
        );
        store.data[pos] = input[pos];
    }
    ensure!(
        segments::verify(&store, &m).map_err(io_err)?.is_ok(),
        "{label}: clean set fails verify"
    );
    Ok(targets.len() as u64)
}

fn ac4_segmentation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut flips = 0;
    for len in AC4_FILE_SIZES {
        for seg in AC4_SEGMENT_SIZES {
            flips += ac4_case(&mut rng, len, seg)?;
        }
    }
    let took = within(AC4_LIMIT, start)?;
    Ok(format!(
        "16 size pairs, {flips} single-byte flips localized, {took:.2?}"
    ))
}

/// (class, type, format, package) as published.
const HANDLER_TABLE: [(&str, &str, &str, &str); 14] = [
    ("TerrierIndex", "sparse_index", "terrier", "python-terrier"),
    ("AnseriniIndex", "sparse_index", "anserini", "pyterrier-anserini"),
    ("PisaIndex", "sparse_index", "pisa", "pyterrier-pisa"),
    ("CiffIndex", "sparse_index", "ciff", "pyterrier-ciff"),
    ("BmpIndex", "sparse_index", "bmp", "bmp"),
    ("FlexIndex", "dense_index", "flex", "pyterrier-dr"),
    ("CorpusGraph", "corpus_graph", "np_topk", "pyterrier-adaptive"),
    ("KeyValueCache", "key_value_cache", "sqlite3", "pyterrier-caching"),
    ("IndexerCache", "indexer_cache", "lz4pickle", "pyterrier-caching"),
    ("RetrieverCache", "retriever_cache", "dbm.dumb", "pyterrier-caching"),
    ("ScorerCache", "scorer_cache", "sqlite3", "pyterrier-caching"),
    ("DenseScorerCache", "scorer_cache", "hdf5", "pyterrier-caching"),
    ("CDECache", "cde_cache", "np_pickle", "pyterrier-dr"),
    ("QualCache", "quality_score_cache", "numpy", "pyterrier-quality"),
];

fn ac5_registry() -> Outcome {
    let reg = Registry::seeded();
    ensure!(
        reg.handlers().count() == HANDLER_TABLE.len(),
        "{} seeded handlers",
        reg.handlers().count()
    );
    for (class, t, f, pkg) in HANDLER_TABLE {
        let meta = ArtifactMetadata::new(t, f).map_err(io_err)?;
        let rec = reg.resolve_handler(&meta).map_err(io_err)?;
        ensure!(
            rec.name == class && rec.package_hint == pkg,
            "{t}/{f} -> {} / {}",
            rec.name,
            rec.package_hint
        );
    }
    let meta = ArtifactMetadata::new("mystery_index", "custom")
        .map_err(io_err)?
        .with_package_hint("my-pkg");
    let err = reg.resolve_handler(&meta).unwrap_err();
    ensure!(
        matches!(err, RegistryError::NoHandler { .. }),
        "wrong error kind: {err}"
    );
    let msg = err.to_string();
    ensure!(msg.contains("my-pkg"), "message lacks the hint: {msg}");
    Ok(format!("14/14 rows resolved; unknown pair says: {msg}"))
}

fn packed_without_meta(work: &Path, name: &str, files: &[&str], meta: Option<(&str, &str)>) -> Result<PathBuf, String> {
    let tree = work.join(name);
    fs::create_dir_all(&tree).map_err(io_err)?;
    for f in files {
        fs::write(tree.join(f), f.as_bytes()).map_err(io_err)?;
    }
    if let Some((t, f)) = meta {
        write_meta(&tree, t, f);
    }
    let file = work.join(format!("{name}.tar.lz4"));
    archive::pack(&tree, None, &PackOptions::default(), &file).map_err(io_err)?;
    Ok(file)
}

fn ac6_sniffers() -> Outcome {
    let work = tempfile::tempdir().map_err(io_err)?;
    let w = work.path();
    let cases = [
        (
            "ciff",
            vec!["collection.ciff", "notes.txt"],
            None,
            ("sparse_index", "ciff"),
            true,
        ),
        (
            "lucene",
            vec!["segments_4", "write.lock", "_0.cfs", "_0.si"],
            None,
            ("sparse_index", "anserini"),
            true,
        ),
        (
            "ciff-declared",
            vec!["collection.ciff"],
            Some(("dense_index", "flex")),
            ("dense_index", "flex"),
            false,
        ),
        (
            "lucene-declared",
            vec!["segments_1", "write.lock"],
            Some(("sparse_index", "terrier")),
            ("sparse_index", "terrier"),
            false,
        ),
    ];
    for (name, files, meta, expected, inferred) in cases {
        let file = packed_without_meta(w, name, &files, meta)?;
        let has_meta = archive::list_entries(&file)
            .map_err(io_err)?
            .iter()
            .any(|e| e.path == metadata::METADATA_FILE);
        ensure!(has_meta == meta.is_some(), "{name}: metadata file presence");
        let (got, source) = metadata::resolve_path(&file).map_err(io_err)?;
        ensure!(
            (got.artifact_type(), got.format()) == expected,
            "{name}: resolved to {got}, expected {}/{}",
            expected.0,
            expected.1
        );
        ensure!(
            got.is_inferred() == inferred,
            "{name}: inferred flag {}",
            got.is_inferred()
        );
        ensure!(
            matches!(source, MetadataSource::Embedded) != inferred,
            "{name}: source {source:?}"
        );
    }
    Ok("ciff -> sparse_index/ciff, Lucene -> sparse_index/anserini, embedded wins in both".into())
}

fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
}

fn url_ref(url: &str) -> ArtifactRef {
    ArtifactRef {
        location: Location::Url(url.to_owned()),
        display_name: url.to_owned(),
    }
}

fn ac7_hub_flow() -> Outcome {
    rt().block_on(async {
        let work = tempfile::tempdir().map_err(io_err)?;
        let root = work.path().join("srv");
        fs::create_dir_all(&root).map_err(io_err)?;
        let tree = work.path().join("tree");
        // Random payload sized so the serialization file lands just under 3 MiB.
        random_tree(&tree, 77, 6, (3 << 20) - (64 << 10));
        write_meta(&tree, "sparse_index", "pisa");
        let start = Instant::now();
        let server = serve(
            &root,
            loopback(),
            ServeOptions {
                token: Some("t0k".into()),
                ..Default::default()
            },
        )
        .await
        .map_err(io_err)?;
        let repo = format!("{}/lab/pisa-msmarco", server.url());
        let client = HostClient::new(Some("t0k".into()));
        let opts = PushOptions {
            max_segment_size: 1 << 20,
            ..Default::default()
        };
        let report = push(&client, &tree, &repo, &opts).await.map_err(io_err)?;
        ensure!(
            report.size > 2 << 20 && report.size <= 3 << 20,
            "serialization file is {} bytes",
            report.size
        );

        let mut held: Vec<String> = fs::read_dir(root.join("lab/pisa-msmarco"))
            .map_err(io_err)?
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        held.sort();
        let expected = [
            "README.md",
            "artifact.tar.lz4.0",
            "artifact.tar.lz4.1",
            "artifact.tar.lz4.2",
            "artifact.tar.lz4.json",
        ];
        ensure!(held == expected, "server holds {held:?}");

        let cache = Cache::new(work.path().join("cache"));
        let anon = HostClient::default();
        let got = fetch(&anon, &url_ref(&repo), &cache, &FetchOptions::default())
            .await
            .map_err(io_err)?;
        ensure!(!got.from_cache, "first pull served from cache");
        ensure!(tree_digest(&got.tree) == tree_digest(&tree), "pulled tree differs");

        server.log().clear();
        let again = fetch(&anon, &url_ref(&repo), &cache, &FetchOptions::default())
            .await
            .map_err(io_err)?;
        let requests = server.log().len();
        ensure!(
            again.from_cache && requests == 0,
            "second pull made {requests} requests"
        );
        let took = within(AC7_LIMIT, start)?;
        server.shutdown().await.map_err(io_err)?;
        Ok(format!(
            "{} B pushed as 3 segments + manifest + README; 2nd pull 0 requests; {took:.2?}",
            report.size
        ))
    })
}

fn ac8_resume() -> Outcome {
    rt().block_on(async {
        let work = tempfile::tempdir().map_err(io_err)?;
        let root = work.path().join("srv");
        let repo_dir = root.join("r");
        fs::create_dir_all(&repo_dir).map_err(io_err)?;
        let tree = work.path().join("tree");
        random_tree(&tree, 88, 10, 4 << 20);
        write_meta(&tree, "dense_index", "flex");
        let file = repo_dir.join(archive::DEFAULT_ARCHIVE_NAME);
        archive::pack(&tree, None, &PackOptions::default(), &file).map_err(io_err)?;
        let original = fs::read(&file).map_err(io_err)?;
        // A one-segment manifest alongside the unsegmented file.
        let mut mem = segments::MemStore::default();
        let m = segments::split(&original[..], original.len() as u64, &mut mem).map_err(io_err)?;
        fs::write(repo_dir.join("artifact.tar.lz4.json"), segments::write_manifest(&m)).map_err(io_err)?;
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(repo_dir.join("artifact.tar.lz4.json")).map_err(io_err)?)
                .map_err(io_err)?;
        let want = manifest["checksum_sha256"].as_str().unwrap_or_default().to_owned();

        let server = serve(&root, loopback(), ServeOptions::default())
            .await
            .map_err(io_err)?;
        let repo = format!("{}/r", server.url());
        let cut = (original.len() as f64 * AC8_CUT) as usize;
        let client = HostClient::default();

        // Direct download interrupted at 40%.
        let dest = work.path().join("direct.tar.lz4");
        fs::write(&dest, &original[..cut]).map_err(io_err)?;
        let out = client
            .download(&format!("{repo}/artifact.tar.lz4"), &dest, |_| {})
            .await
            .map_err(io_err)?;
        ensure!(
            out.resumed_from == cut as u64 && out.received == (original.len() - cut) as u64 && !out.restarted,
            "resume outcome {out:?}"
        );
        let got = oracle_sha256(&dest);
        ensure!(got == want, "resumed file sha256 {got} != manifest {want}");

        // The same through the cache: a staged partial file is resumed.
        let cache = Cache::new(work.path().join("cache"));
        let aref = url_ref(&repo);
        let staging = cache.entry_dir(&aref.location).join(hosts::STAGING_DIR);
        fs::create_dir_all(&staging).map_err(io_err)?;
        fs::write(staging.join(archive::DEFAULT_ARCHIVE_NAME), &original[..cut]).map_err(io_err)?;
        server.log().clear();
        let fetched = fetch(&client, &aref, &cache, &FetchOptions::default())
            .await
            .map_err(io_err)?;
        ensure!(
            tree_digest(&fetched.tree) == tree_digest(&tree),
            "resumed pull unpacked a different tree"
        );
        let log = server.log().snapshot();
        let gets: Vec<_> = log
            .iter()
            .filter(|r| r.method == "GET" && r.path.ends_with("/artifact.tar.lz4"))
            .collect();
        let range = format!("bytes={cut}-");
        ensure!(
            gets.len() == 1 && gets[0].range.as_deref() == Some(range.as_str()) && gets[0].status == 206,
            "archive requests {gets:?}"
        );
        server.shutdown().await.map_err(io_err)?;
        Ok(format!(
            "cut at {cut}/{} B, resumed with {range} (206), sha256 matches manifest",
            original.len()
        ))
    })
}

fn ac9_p2p() -> Outcome {
    rt().block_on(async {
        let work = tempfile::tempdir().map_err(io_err)?;
        let tree = work.path().join("tree");
        random_tree(&tree, 99, 5, AC9_BYTES);
        write_meta(&tree, "corpus_graph", "np_topk");
        let start = Instant::now();
        let relay = p2p::relay_serve(loopback()).await.map_err(io_err)?;
        let (proxy, captured) = capture_proxy(relay.addr()).await;
        let addr = proxy.to_string();

        let (tx, rx) = tokio::sync::oneshot::channel();
        let sender = {
            let (tree, addr) = (tree.clone(), addr.clone());
            tokio::spawn(async move {
                p2p::send(&tree, &addr, &SendOptions::default(), move |c| {
                    let _ = tx.send(*c);
                })
                .await
            })
        };
        let code = rx.await.map_err(io_err)?;
        let opts = ReceiveOptions {
            timeout: Duration::from_secs(20),
        };
        let dest = work.path().join("received");
        let got = p2p::receive(&code, &dest, &addr, &opts).await.map_err(io_err)?;
        let sent = sender.await.map_err(io_err)?.map_err(io_err)?;
        ensure!(got.sha256 == sent.sha256, "digests differ");
        ensure!(tree_digest(&dest) == tree_digest(&tree), "received tree differs");

        let again = p2p::receive(&code, &work.path().join("again"), &addr, &opts).await;
        ensure!(
            matches!(again, Err(P2pError::NoSuchChannel)),
            "second receive: {:?}",
            again.map(|r| r.dest)
        );
        let took = within(AC9_LIMIT, start)?;

        let text = code.to_string();
        let words = text.split_once('-').map(|(_, w)| w.to_owned()).unwrap_or_default();
        let conns = captured.lock().unwrap().clone();
        ensure!(conns.len() == 3, "{} relay connections captured", conns.len());
        let mut total = 0;
        for conn in conns {
            let c = conn.lock().unwrap().clone();
            for bytes in [&c.upstream, &c.downstream] {
                decode_all(bytes).map_err(io_err)?;
                ensure!(
                    !contains_subslice(bytes, text.as_bytes()) && !contains_subslice(bytes, words.as_bytes()),
                    "code text seen on the wire"
                );
                total += bytes.len();
            }
        }
        relay.shutdown().await;
        Ok(format!(
            "{} B delivered with code {text}; reuse -> no such channel; {total} wire bytes code-free; {took:.2?}",
            sent.size
        ))
    })
}

fn ac10_schemes() -> Outcome {
    let hub = rt().block_on(async {
        let work = tempfile::tempdir().map_err(io_err)?;
        let root = work.path().join("srv");
        fs::create_dir_all(root.join("alice/terrier-vaswani")).map_err(io_err)?;
        let tree = work.path().join("tree");
        random_tree(&tree, 10, 4, 200_000);
        write_meta(&tree, "sparse_index", "terrier");
        archive::pack(
            &tree,
            None,
            &PackOptions::default(),
            &root.join("alice/terrier-vaswani/artifact.tar.lz4"),
        )
        .map_err(io_err)?;
        let server = serve(&root, loopback(), ServeOptions::default())
            .await
            .map_err(io_err)?;
        let reg = Registry::seeded_with_hub(&format!("{}/{{id}}", server.url()));
        let aref = ArtifactRef::resolve(&reg, "hf:alice/terrier-vaswani").map_err(io_err)?;
        let cache = Cache::new(work.path().join("cache"));
        let got = fetch(&HostClient::default(), &aref, &cache, &FetchOptions::default())
            .await
            .map_err(io_err)?;
        ensure!(
            tree_digest(&got.tree) == tree_digest(&tree),
            "hf pull unpacked a different tree"
        );
        let handler = reg.resolve_handler(&got.metadata).map_err(io_err)?;
        ensure!(handler.name == "TerrierIndex", "handler {}", handler.name);
        let paths: BTreeSet<String> = server.log().snapshot().into_iter().map(|r| r.path).collect();
        ensure!(
            paths.iter().all(|p| p.starts_with("/alice/terrier-vaswani/")),
            "requests {paths:?}"
        );
        server.shutdown().await.map_err(io_err)?;
        Ok::<_, String>(aref.location.to_string())
    })?;

    let bin = env!("CARGO_BIN_EXE_artifact-share");
    let work = tempfile::tempdir().map_err(io_err)?;
    let out = std::process::Command::new(bin)
        .current_dir(work.path())
        .env("ARTIFACT_SHARE_CACHE", work.path())
        .args([
            "--scheme",
            "lab=http://127.0.0.1:9/{id}",
            "pull",
            "nosuch:team/artifact",
        ])
        .output()
        .map_err(io_err)?;
    let code = out.status.code();
    let stderr = String::from_utf8_lossy(&out.stderr);
    ensure!(code == Some(4), "unknown scheme exit {code:?}");
    ensure!(
        stderr.contains("registered schemes") && stderr.contains("hf") && stderr.contains("lab"),
        "message: {stderr}"
    );
    Ok(format!(
        "hf:alice/terrier-vaswani -> {hub}; unknown scheme exit 4: {}",
        stderr.trim()
    ))
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| (*s).to_owned()))
        .map(|s| format!("panicked: {s}"))
        .unwrap_or_else(|| "panicked".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("determinism", ac1_determinism),
        ("round trip", ac2_round_trip),
        ("normalization", ac3_normalization),
        ("segmentation", ac4_segmentation),
        ("metadata & registry", ac5_registry),
        ("sniffers", ac6_sniffers),
        ("hub flow", ac7_hub_flow),
        ("resume", ac8_resume),
        ("p2p", ac9_p2p),
        ("url schemes", ac10_schemes),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty()
            && !filter.iter().any(|f| match f.parse::<usize>() {
                Ok(k) => k == n,
                Err(_) => name.contains(f.as_str()),
            })
        {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| Err(panic_message(p)));
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} [{took:.2?}]");
            }
        }
        let _ = io::stdout().flush();
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
