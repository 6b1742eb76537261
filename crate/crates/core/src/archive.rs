//! Self-describing result archives.
//!
//! An archive is a `tar.gz` holding everything a third party needs to
//! inspect or replay a run: the canonical workflow, resolved scripts,
//! input snapshots, harvested outputs and traces, image references, and a
//! `MANIFEST.json` with a digest for every payload.
//!
//! Archive bytes are deterministic: entries are sorted by path, headers
//! carry fixed ownership/mode/mtime, and gzip runs with a zeroed
//! timestamp at a fixed level. The manifest's `determinism_digest` hashes
//! the decompressed tar with its three intentionally variable fields
//! (`created_at`, `run_id`, and the digest field itself) replaced by
//! fixed-length sentinels, so independent runs of the same workflow
//! compare equal by digest alone.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{parse_workflow, validate_structure, Workflow};
use crate::digest::Digest;
use crate::executor::RunRecord;

/// First tar entry; the only file not covered by manifest entries.
pub const MANIFEST_PATH: &str = "MANIFEST.json";
pub const FORMAT_VERSION: &str = "1";
/// Stand-in for `created_at` when hashing for determinism.
pub const CREATED_AT_SENTINEL: &str = "1970-01-01T00:00:00Z";

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("payload `{}` is missing from the run directory", .path.display())]
    MissingPayload { path: PathBuf },
    #[error("archive `{}` already exists; refusing to overwrite", .0.display())]
    AlreadyExists(PathBuf),
    #[error("workflow does not match the run record (digest mismatch)")]
    WorkflowMismatch,
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("archive failed verification; refusing to extract")]
    Tampered(Box<VerifyReport>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Canonical metadata describing one archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub workflow_digest: Digest,
    pub run_id: String,
    /// RFC3339 UTC build time; neutralized in the determinism digest.
    pub created_at: String,
    pub mode: String,
    pub seed: u64,
    pub environment: BTreeMap<String, String>,
    pub images: Vec<ImageEntry>,
    /// One row per payload file, sorted by path.
    pub entries: Vec<ManifestEntry>,
    pub determinism_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub vm: String,
    pub cache_key: Digest,
    /// What the image locator points at: `frozen-fs`, `directory`, `box`,
    /// or `plan`.
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: Digest,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub path: String,
    pub expected: Digest,
    pub actual: Digest,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub ok: bool,
    pub mismatches: Vec<Mismatch>,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    pub manifest_schema_errors: Vec<String>,
}

impl VerifyReport {
    fn finish(mut self) -> VerifyReport {
        self.ok = self.mismatches.is_empty()
            && self.missing.is_empty()
            && self.extra.is_empty()
            && self.manifest_schema_errors.is_empty();
        self
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ArchiveOptions {
    /// Embed image payloads as `images/<cache-key>.box` instead of only
    /// referencing them in `images/REFS.json`.
    pub include_images: bool,
}

pub fn archive_file_name(workflow: &str, run_id: &str) -> String {
    format!("{workflow}-{run_id}.tar.gz")
}

fn locator_kind(backend: &str) -> &'static str {
    match backend {
        "mock" => "frozen-fs",
        "local" => "directory",
        "managed-vm" => "box",
        _ => "plan",
    }
}

enum Payload {
    Bytes(Vec<u8>),
    File(PathBuf),
}

/// Packages a persisted run into `<out_dir>/<name>-<run_id>.tar.gz` and
/// returns the path with the manifest it embeds.
pub fn build_archive(
    record: &RunRecord,
    w: &Workflow,
    run_dir: &Path,
    out_dir: &Path,
    opts: &ArchiveOptions,
) -> Result<(PathBuf, Manifest), ArchiveError> {
    let workflow_digest =
        crate::config::canonical_digest(w).map_err(|_| ArchiveError::WorkflowMismatch)?;
    if workflow_digest != record.workflow_digest {
        return Err(ArchiveError::WorkflowMismatch);
    }

    let mut payloads: BTreeMap<String, Payload> = BTreeMap::new();
    payloads.insert(
        "workflow.xanthus".to_string(),
        Payload::Bytes(crate::config::canonical_text(w).into_bytes()),
    );
    for name in w.scripts.keys() {
        payloads.insert(
            format!("scripts/{name}"),
            Payload::File(run_dir.join("scripts").join(name)),
        );
    }
    for jr in &record.job_results {
        for input in &jr.inputs {
            payloads.insert(
                format!("inputs/{}/{}", jr.job, input.name),
                Payload::File(run_dir.join("inputs").join(&jr.job).join(&input.name)),
            );
        }
        for it in &jr.iterations {
            for (section, (map_key, file)) in it
                .outputs
                .iter()
                .map(|kv| ("outputs", kv))
                .chain(it.collector_traces.iter().map(|kv| ("traces", kv)))
            {
                let (vm, name) = map_key
                    .split_once('/')
                    .expect("output keys are vm/name by construction");
                payloads.insert(
                    format!("{section}/{}/iter-{}/{vm}/{name}", jr.job, it.index),
                    Payload::File(run_dir.join(&file.path)),
                );
            }
        }
    }

    let image_refs: Vec<ImageEntry> = record
        .images
        .iter()
        .map(|(vm, image)| ImageEntry {
            vm: vm.clone(),
            cache_key: image.cache_key.clone(),
            kind: locator_kind(&image.backend).to_string(),
        })
        .collect();
    payloads.insert(
        "images/REFS.json".to_string(),
        Payload::Bytes(crate::jsonutil::to_canonical_json(&image_refs)?.into_bytes()),
    );
    if opts.include_images {
        let mut seen = BTreeSet::new();
        for image in record.images.values() {
            if !seen.insert(image.cache_key.clone()) {
                continue;
            }
            let source = Path::new(&image.locator);
            let bytes = if source.is_dir() {
                build_tar(&tree_payloads(source)?)?
            } else if source.is_file() {
                std::fs::read(source)?
            } else {
                return Err(ArchiveError::MissingPayload { path: source.to_path_buf() });
            };
            payloads.insert(format!("images/{}.box", image.cache_key), Payload::Bytes(bytes));
        }
    }

    // Load file payloads so hashing and writing see the same bytes.
    let mut loaded: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (path, payload) in payloads {
        let bytes = match payload {
            Payload::Bytes(b) => b,
            Payload::File(p) => std::fs::read(&p).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    ArchiveError::MissingPayload { path: p.clone() }
                } else {
                    ArchiveError::Io(e)
                }
            })?,
        };
        loaded.insert(path, bytes);
    }
    let entries: Vec<ManifestEntry> = loaded
        .iter()
        .map(|(path, bytes)| ManifestEntry {
            path: path.clone(),
            sha256: Digest::of_bytes(bytes),
            size: bytes.len() as u64,
        })
        .collect();

    let mut manifest = Manifest {
        format_version: FORMAT_VERSION.to_string(),
        workflow_digest,
        run_id: record.run_id.clone(),
        created_at: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        mode: record.mode.clone(),
        seed: record.seed,
        environment: record.environment.clone(),
        images: image_refs,
        entries,
        determinism_digest: Digest::parse(&"0".repeat(64)).expect("placeholder digest"),
    };

    // First pass with the placeholder digest fixes the manifest length;
    // the real digest is the same length, so patching it in afterwards
    // moves no tar offsets.
    let placeholder_json = crate::jsonutil::to_canonical_json(&manifest)?.into_bytes();
    let mut all = loaded.clone();
    all.insert(MANIFEST_PATH.to_string(), placeholder_json.clone());
    let mut tar_bytes = build_tar(&all)?;
    let digest = neutralized_digest(&tar_bytes)?;

    manifest.determinism_digest = digest;
    let final_json = crate::jsonutil::to_canonical_json(&manifest)?.into_bytes();
    debug_assert_eq!(final_json.len(), placeholder_json.len());
    let (start, len) = manifest_span(&tar_bytes)?;
    debug_assert_eq!(&tar_bytes[start..start + len], &placeholder_json[..]);
    tar_bytes[start..start + len].copy_from_slice(&final_json);

    let out_path = out_dir.join(archive_file_name(&record.workflow, &record.run_id));
    if out_path.exists() {
        return Err(ArchiveError::AlreadyExists(out_path));
    }
    std::fs::create_dir_all(out_dir)?;
    let file = std::fs::File::create(&out_path)?;
    let mut gz = flate2::GzBuilder::new().mtime(0).write(file, flate2::Compression::new(6));
    std::io::Write::write_all(&mut gz, &tar_bytes)?;
    gz.finish()?;
    Ok((out_path, manifest))
}

/// Collects a directory tree as archive payloads with `/`-separated
/// relative paths.
fn tree_payloads(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, ArchiveError> {
    fn walk(
        root: &Path,
        dir: &Path,
        out: &mut BTreeMap<String, Vec<u8>>,
    ) -> Result<(), ArchiveError> {
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                walk(root, &path, out)?;
            } else if entry.file_type()?.is_file() {
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(rel, std::fs::read(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Serializes payloads as an uncompressed tar: paths sorted (parent
/// directory entries first), uid=gid=0, files 0644, dirs 0755, mtime 0.
fn build_tar(payloads: &BTreeMap<String, Vec<u8>>) -> Result<Vec<u8>, ArchiveError> {
    let mut names = BTreeSet::new();
    for path in payloads.keys() {
        let mut prefix = String::new();
        for part in path.split('/') {
            if !prefix.is_empty() {
                names.insert((prefix.clone(), true));
            }
            if prefix.is_empty() {
                prefix = part.to_string();
            } else {
                prefix = format!("{prefix}/{part}");
            }
        }
        names.insert((path.clone(), false));
    }

    let mut builder = tar::Builder::new(Vec::new());
    for (path, is_dir) in names {
        let mut header = tar::Header::new_gnu();
        header.set_uid(0);
        header.set_gid(0);
        header.set_mtime(0);
        if is_dir {
            header.set_entry_type(tar::EntryType::Directory);
            header.set_mode(0o755);
            header.set_size(0);
            builder.append_data(&mut header, format!("{path}/"), std::io::empty())?;
        } else {
            let data = &payloads[&path];
            header.set_entry_type(tar::EntryType::Regular);
            header.set_mode(0o644);
            header.set_size(data.len() as u64);
            builder.append_data(&mut header, &path, data.as_slice())?;
        }
    }
    Ok(builder.into_inner()?)
}

fn corrupt(detail: impl std::fmt::Display) -> ArchiveError {
    ArchiveError::CorruptArchive(detail.to_string())
}

fn read_tar_bytes(path: &Path) -> Result<Vec<u8>, ArchiveError> {
    let file = std::fs::File::open(path)?;
    let mut tar_bytes = Vec::new();
    flate2::read::GzDecoder::new(file)
        .read_to_end(&mut tar_bytes)
        .map_err(|e| corrupt(format!("gzip: {e}")))?;
    Ok(tar_bytes)
}

/// Returns every regular file in the tar as `path -> bytes`.
fn tar_files(tar_bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>, ArchiveError> {
    let mut archive = tar::Archive::new(std::io::Cursor::new(tar_bytes));
    let mut files = BTreeMap::new();
    for entry in archive.entries().map_err(|e| corrupt(format!("tar: {e}")))? {
        let mut entry = entry.map_err(|e| corrupt(format!("tar: {e}")))?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let path = String::from_utf8_lossy(&entry.path_bytes()).into_owned();
        let mut bytes = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut bytes).map_err(|e| corrupt(format!("tar: {e}")))?;
        files.insert(path, bytes);
    }
    Ok(files)
}

/// Byte range of the manifest's contents inside the tar stream.
fn manifest_span(tar_bytes: &[u8]) -> Result<(usize, usize), ArchiveError> {
    let mut archive = tar::Archive::new(std::io::Cursor::new(tar_bytes));
    for entry in archive.entries().map_err(|e| corrupt(format!("tar: {e}")))? {
        let entry = entry.map_err(|e| corrupt(format!("tar: {e}")))?;
        if entry.path_bytes().as_ref() == MANIFEST_PATH.as_bytes() {
            return Ok((entry.raw_file_position() as usize, entry.size() as usize));
        }
    }
    Err(corrupt("no MANIFEST.json entry"))
}

/// Replaces a `"key": "value"` string value inside raw JSON bytes,
/// returning the spliced buffer. Values here are plain (no escapes).
fn replace_json_string(
    json: Vec<u8>,
    key: &str,
    replacement: impl Fn(&str) -> String,
) -> Result<Vec<u8>, ArchiveError> {
    let text = String::from_utf8(json).map_err(|_| corrupt("manifest is not UTF-8"))?;
    let marker = format!("\"{key}\": \"");
    let at = text.find(&marker).ok_or_else(|| corrupt(format!("manifest lacks `{key}`")))?;
    let value_start = at + marker.len();
    let value_len = text[value_start..]
        .find('"')
        .ok_or_else(|| corrupt(format!("unterminated `{key}` value")))?;
    let value = &text[value_start..value_start + value_len];
    let mut out = String::with_capacity(text.len());
    out.push_str(&text[..value_start]);
    out.push_str(&replacement(value));
    out.push_str(&text[value_start + value_len..]);
    Ok(out.into_bytes())
}

/// Digest of the tar stream with the manifest's variable fields
/// neutralized: `created_at` becomes the epoch sentinel, `run_id` and
/// `determinism_digest` become all-zero strings of equal length.
fn neutralized_digest(tar_bytes: &[u8]) -> Result<Digest, ArchiveError> {
    let (start, len) = manifest_span(tar_bytes)?;
    let mut region = tar_bytes[start..start + len].to_vec();
    region = replace_json_string(region, "created_at", |_| CREATED_AT_SENTINEL.to_string())?;
    region = replace_json_string(region, "run_id", |v| "0".repeat(v.len()))?;
    region = replace_json_string(region, "determinism_digest", |v| "0".repeat(v.len()))?;

    use sha2::Digest as _;
    let mut hasher = sha2::Sha256::new();
    hasher.update(&tar_bytes[..start]);
    hasher.update(&region);
    hasher.update(&tar_bytes[start + len..]);
    Ok(Digest::parse(&hex::encode(hasher.finalize())).expect("sha256 hex"))
}

/// Recomputes the archive's determinism digest from its bytes.
pub fn determinism_digest(path: &Path) -> Result<Digest, ArchiveError> {
    neutralized_digest(&read_tar_bytes(path)?)
}

/// Reads just the manifest out of an archive.
pub fn read_manifest(path: &Path) -> Result<Manifest, ArchiveError> {
    let tar_bytes = read_tar_bytes(path)?;
    let (start, len) = manifest_span(&tar_bytes)?;
    serde_json::from_slice(&tar_bytes[start..start + len])
        .map_err(|e| corrupt(format!("manifest does not parse: {e}")))
}

/// Parses the workflow document embedded in an archive.
pub fn read_embedded_workflow(path: &Path) -> Result<Workflow, ArchiveError> {
    let tar_bytes = read_tar_bytes(path)?;
    let files = tar_files(&tar_bytes)?;
    let bytes = files
        .get("workflow.xanthus")
        .ok_or_else(|| corrupt("archive lacks workflow.xanthus".to_string()))?;
    let text = std::str::from_utf8(bytes)
        .map_err(|e| corrupt(format!("embedded workflow is not UTF-8: {e}")))?;
    parse_workflow(text).map_err(|e| corrupt(format!("embedded workflow does not parse: {e}")))
}

/// Recomputes every digest and coverage rule in the archive.
pub fn verify_archive(path: &Path) -> Result<VerifyReport, ArchiveError> {
    let tar_bytes = read_tar_bytes(path)?;
    let files = tar_files(&tar_bytes)?;
    Ok(verify_loaded(&files))
}

fn verify_loaded(files: &BTreeMap<String, Vec<u8>>) -> VerifyReport {
    let mut report = VerifyReport::default();
    let Some(manifest_bytes) = files.get(MANIFEST_PATH) else {
        report.manifest_schema_errors.push("MANIFEST.json is missing".to_string());
        return report.finish();
    };
    let manifest: Manifest = match serde_json::from_slice(manifest_bytes) {
        Ok(m) => m,
        Err(e) => {
            report.manifest_schema_errors.push(format!("MANIFEST.json does not parse: {e}"));
            return report.finish();
        }
    };
    if manifest.format_version != FORMAT_VERSION {
        report.manifest_schema_errors.push(format!(
            "unsupported format_version `{}` (expected `{FORMAT_VERSION}`)",
            manifest.format_version
        ));
    }

    let mut expected: BTreeMap<&str, &ManifestEntry> = BTreeMap::new();
    for entry in &manifest.entries {
        if expected.insert(entry.path.as_str(), entry).is_some() {
            report
                .manifest_schema_errors
                .push(format!("duplicate manifest entry `{}`", entry.path));
        }
    }
    for (path, entry) in &expected {
        match files.get(*path) {
            None => report.missing.push(path.to_string()),
            Some(bytes) => {
                let actual = Digest::of_bytes(bytes);
                if actual != entry.sha256 || bytes.len() as u64 != entry.size {
                    report.mismatches.push(Mismatch {
                        path: path.to_string(),
                        expected: entry.sha256.clone(),
                        actual,
                    });
                }
            }
        }
    }
    for path in files.keys() {
        if path != MANIFEST_PATH && !expected.contains_key(path.as_str()) {
            report.extra.push(path.clone());
        }
    }

    match files.get("workflow.xanthus") {
        None => {}
        Some(bytes) => match std::str::from_utf8(bytes).map_err(|e| e.to_string()).and_then(
            |text| parse_workflow(text).map_err(|e| e.to_string()),
        ) {
            Err(e) => report
                .manifest_schema_errors
                .push(format!("embedded workflow does not parse: {e}")),
            Ok(w) => {
                let structural = validate_structure(&w);
                if crate::config::has_errors(&structural) {
                    report
                        .manifest_schema_errors
                        .push("embedded workflow does not validate".to_string());
                } else if crate::config::canonical_digest(&w).ok()
                    != Some(manifest.workflow_digest.clone())
                {
                    report.manifest_schema_errors.push(
                        "workflow_digest does not match the embedded workflow".to_string(),
                    );
                }
            }
        },
    }

    report.finish()
}

/// Verifies the archive, then materializes everything a replay needs
/// under `dest`: the workflow file, file-sourced script bodies, and input
/// files at their original workflow-relative paths.
pub fn extract_for_replay(
    path: &Path,
    dest: &Path,
) -> Result<(Workflow, Manifest), ArchiveError> {
    let tar_bytes = read_tar_bytes(path)?;
    let files = tar_files(&tar_bytes)?;
    let report = verify_loaded(&files);
    if !report.ok {
        return Err(ArchiveError::Tampered(Box::new(report)));
    }
    let manifest: Manifest =
        serde_json::from_slice(&files[MANIFEST_PATH]).expect("verified manifest parses");
    let text = String::from_utf8(files["workflow.xanthus"].clone())
        .expect("verified workflow is UTF-8");
    let w = parse_workflow(&text).expect("verified workflow parses");

    std::fs::create_dir_all(dest)?;
    let write = |rel: &str, bytes: &[u8]| -> Result<(), ArchiveError> {
        let target = dest.join(rel);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(target, bytes)?;
        Ok(())
    };
    write("workflow.xanthus", text.as_bytes())?;

    for script in w.scripts.values() {
        if let crate::config::ScriptSource::File(rel) = &script.source {
            let body = files
                .get(&format!("scripts/{}", script.name))
                .ok_or_else(|| corrupt(format!("archive lacks script `{}`", script.name)))?;
            write(rel, body)?;
        }
    }

    // Snapshot names are the deduplicated basenames in declaration order,
    // exactly as the run laid them down, so the original relative paths
    // are reconstructible from the workflow alone.
    for job in &w.jobs {
        let mut used = BTreeSet::new();
        for input in &job.inputs {
            let base = input.local.rsplit('/').next().unwrap_or(&input.local);
            let snapshot = crate::executor::unique_name(&mut used, base);
            if let Some(bytes) = files.get(&format!("inputs/{}/{snapshot}", job.name)) {
                write(&input.local, bytes)?;
            }
        }
    }

    Ok((w, manifest))
}
