//! Publish plans and their execution.
//!
//! Publishing is split into a pure planning step that turns (archive,
//! manifest, target) into an ordered action list, and an execution step
//! that walks the list through a swappable [`Transport`]. Dry-run stops
//! before the transport: the report lists every action as planned and
//! nothing is written or sent.
//!
//! Credentials come from the environment variable the target names, are
//! held in a [`Secret`] that never prints, and reach the tools out of
//! band: the version-control helper reads `XANTHUS_PUBLISH_TOKEN` from
//! its environment, Dataverse gets a request header. Token values never
//! appear in plans, reports, argv, or logs.
//!
//! ## Pinned version-control argv sequences
//!
//! For a GitHub target the system transport runs, in order (program
//! configurable via `XANTHUS_GIT_TOOL`, default `git`):
//!
//! ```text
//! ensure-repo  clone --depth 1 <url> <scratch>
//! lfs-track    lfs track <pattern>            (in <scratch>)
//! add          add -A                         (in <scratch>, after copying the archive in)
//! commit       -c user.name=xanthus -c user.email=xanthus@localhost commit -m <message>
//! push         push origin HEAD
//! ```
//!
//! Every invocation carries a `-c credential.helper=...` prefix that
//! reads the token from the environment, so argv stays free of secrets.
//!
//! ## Dataverse HTTP shape
//!
//! ```text
//! create-dataset   POST <base>/api/dataverses/<collection>/datasets
//! upload-file      POST <base>/api/datasets/:persistentId/add?persistentId=<pid>
//! publish-dataset  POST <base>/api/datasets/:persistentId/actions/:publish?persistentId=<pid>&type=major
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::Manifest;
use crate::config::{PublishTarget, TargetKind};
use crate::digest::Digest;

/// Environment variable the credential helper reads during git actions.
pub const GIT_TOKEN_ENV: &str = "XANTHUS_PUBLISH_TOKEN";
/// Overrides the version-control program used by the system transport.
pub const GIT_TOOL_ENV: &str = "XANTHUS_GIT_TOOL";

#[derive(Debug, thiserror::Error)]
pub enum PublishError {
    #[error("credentials missing: environment variable `{var}` is not set or empty")]
    MissingCredentials { var: String },
    #[error("archive `{}` is not readable: {source}", .path.display())]
    ArchiveUnreadable { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A token that renders as `***` everywhere; only [`Secret::reveal`]
/// exposes the value, and only transports call it.
#[derive(Clone)]
pub struct Secret(String);

impl Secret {
    pub fn from_env(var: &str) -> Result<Secret, PublishError> {
        match std::env::var(var) {
            Ok(v) if !v.trim().is_empty() => Ok(Secret(v)),
            _ => Err(PublishError::MissingCredentials { var: var.to_string() }),
        }
    }

    pub fn reveal(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Debug for Secret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Action {
    EnsureRepo { url: String },
    LfsTrack { pattern: String },
    Add { path: String },
    Commit { message: String },
    Push,
    CreateDataset { collection: String, metadata: BTreeMap<String, String> },
    UploadFile { path: String, sha256: Digest },
    PublishDataset,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::EnsureRepo { url } => write!(f, "ensure-repo {url}"),
            Action::LfsTrack { pattern } => write!(f, "lfs-track {pattern}"),
            Action::Add { path } => write!(f, "add {path}"),
            Action::Commit { message } => write!(f, "commit {message:?}"),
            Action::Push => write!(f, "push"),
            Action::CreateDataset { collection, .. } => {
                write!(f, "create-dataset {collection}")
            }
            Action::UploadFile { path, sha256 } => {
                write!(f, "upload-file {path} sha256={sha256}")
            }
            Action::PublishDataset => write!(f, "publish-dataset"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublishPlan {
    pub target: PublishTarget,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionOutcome {
    Planned,
    Done,
    Failed,
    NotAttempted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionStatus {
    pub action: String,
    pub outcome: ActionOutcome,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublishReport {
    pub dry_run: bool,
    pub statuses: Vec<ActionStatus>,
    /// True when nothing failed (dry-run reports are always ok).
    pub ok: bool,
}

impl PublishReport {
    pub fn first_failure(&self) -> Option<(usize, &ActionStatus)> {
        self.statuses.iter().enumerate().find(|(_, s)| s.outcome == ActionOutcome::Failed)
    }
}

/// Splits a Dataverse locator `https://host#collection` into base URL and
/// collection alias (default alias `root`).
fn dataverse_parts(locator: &str) -> (String, String) {
    match locator.split_once('#') {
        Some((base, collection)) if !collection.is_empty() => {
            (base.trim_end_matches('/').to_string(), collection.to_string())
        }
        _ => (locator.trim_end_matches('/').to_string(), "root".to_string()),
    }
}

/// Derives the deterministic action list for one target. The archive must
/// already have passed verification; this only reads its size and digest.
pub fn plan_publish(
    archive: &Path,
    manifest: &Manifest,
    target: &PublishTarget,
) -> Result<PublishPlan, PublishError> {
    let unreadable = |source| PublishError::ArchiveUnreadable {
        path: archive.to_path_buf(),
        source,
    };
    let size = std::fs::metadata(archive).map_err(unreadable)?.len();
    let file_name = archive
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "archive.tar.gz".to_string());

    let actions = match target.kind {
        TargetKind::Github => {
            let mut actions = vec![Action::EnsureRepo { url: target.locator.clone() }];
            if size >= target.lfs_threshold_bytes {
                actions.push(Action::LfsTrack { pattern: "*.tar.gz".to_string() });
            }
            actions.push(Action::Add { path: file_name });
            actions.push(Action::Commit {
                message: format!("publish run {}", manifest.run_id),
            });
            actions.push(Action::Push);
            actions
        }
        TargetKind::Dataverse => {
            let (_, collection) = dataverse_parts(&target.locator);
            let name = file_name
                .strip_suffix(&format!("-{}.tar.gz", manifest.run_id))
                .unwrap_or(&file_name)
                .to_string();
            let mut metadata = BTreeMap::new();
            metadata.insert("name".to_string(), name);
            metadata.insert("run_id".to_string(), manifest.run_id.clone());
            metadata
                .insert("workflow_digest".to_string(), manifest.workflow_digest.to_string());
            for (k, v) in &manifest.environment {
                metadata.insert(format!("environment.{k}"), v.clone());
            }
            vec![
                Action::CreateDataset { collection, metadata },
                Action::UploadFile {
                    path: file_name,
                    sha256: Digest::of_file(archive).map_err(unreadable)?,
                },
                Action::PublishDataset,
            ]
        }
    };
    Ok(PublishPlan { target: target.clone(), actions })
}

/// How publish actions reach the outside world. The system transport
/// shells out and speaks HTTP; tests substitute instrumented fakes.
pub trait Transport {
    /// Runs the version-control tool with `args` in `cwd`. The token is
    /// exported as `XANTHUS_PUBLISH_TOKEN` for the credential helper and
    /// must never enter argv.
    fn run_git(&mut self, cwd: &Path, args: &[String], token: &Secret) -> Result<(), String>;

    /// POSTs `body` and returns the response text.
    fn http_post(
        &mut self,
        url: &str,
        token: &Secret,
        content_type: &str,
        body: &[u8],
    ) -> Result<String, String>;
}

/// Real transport: version-control subprocess plus blocking HTTP.
pub struct SystemTransport {
    program: String,
}

impl SystemTransport {
    pub fn new() -> SystemTransport {
        let program = std::env::var(GIT_TOOL_ENV).unwrap_or_else(|_| "git".to_string());
        SystemTransport { program }
    }
}

impl Default for SystemTransport {
    fn default() -> Self {
        SystemTransport::new()
    }
}

impl Transport for SystemTransport {
    fn run_git(&mut self, cwd: &Path, args: &[String], token: &Secret) -> Result<(), String> {
        let out = std::process::Command::new(&self.program)
            .args(args)
            .current_dir(cwd)
            .env(GIT_TOKEN_ENV, token.reveal())
            .output()
            .map_err(|e| format!("cannot run `{}`: {e}", self.program))?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!(
                "`{} {}` exited {}: {}",
                self.program,
                args.first().map(String::as_str).unwrap_or(""),
                out.status.code().unwrap_or(-1),
                String::from_utf8_lossy(&out.stderr).trim()
            ))
        }
    }

    fn http_post(
        &mut self,
        url: &str,
        token: &Secret,
        content_type: &str,
        body: &[u8],
    ) -> Result<String, String> {
        let mut response = ureq::post(url)
            .header("X-Dataverse-key", token.reveal())
            .header("Content-Type", content_type)
            .send(body)
            .map_err(|e| format!("POST {url}: {e}"))?;
        response.body_mut().read_to_string().map_err(|e| format!("POST {url}: {e}"))
    }
}

/// Credential-helper argv prefix: the helper echoes the token from the
/// environment, so the secret itself stays out of the command line.
fn credential_args() -> Vec<String> {
    vec![
        "-c".to_string(),
        format!(
            "credential.helper=!f() {{ echo username=x-access-token; echo \
             password=${GIT_TOKEN_ENV}; }}; f"
        ),
    ]
}

fn with_credentials(args: &[&str]) -> Vec<String> {
    let mut v = credential_args();
    v.extend(args.iter().map(|s| s.to_string()));
    v
}

/// Boundary for the hand-built multipart body (fixed for determinism).
const MULTIPART_BOUNDARY: &str = "xanthus-multipart-9d4f2c";

fn multipart_file_body(file_name: &str, bytes: &[u8], json_data: &str) -> Vec<u8> {
    let head = format!(
        "--{MULTIPART_BOUNDARY}\r\n\
         Content-Disposition: form-data; name=\"file\"; filename=\"{file_name}\"\r\n\
         Content-Type: application/gzip\r\n\r\n"
    );
    let tail = format!(
        "\r\n--{MULTIPART_BOUNDARY}\r\n\
         Content-Disposition: form-data; name=\"jsonData\"\r\n\r\n\
         {json_data}\r\n--{MULTIPART_BOUNDARY}--\r\n"
    );
    let mut body = Vec::with_capacity(head.len() + bytes.len() + tail.len());
    body.extend_from_slice(head.as_bytes());
    body.extend_from_slice(bytes);
    body.extend_from_slice(tail.as_bytes());
    body
}

/// Walks the plan. Dry-run records every action as planned and never
/// touches the transport; otherwise actions execute in order and the
/// first failure stops the walk, leaving later actions not attempted.
pub fn execute_publish(
    plan: &PublishPlan,
    archive: &Path,
    transport: &mut dyn Transport,
    dry_run: bool,
) -> Result<PublishReport, PublishError> {
    if dry_run {
        return Ok(PublishReport {
            dry_run: true,
            statuses: plan
                .actions
                .iter()
                .map(|a| ActionStatus {
                    action: a.to_string(),
                    outcome: ActionOutcome::Planned,
                    detail: None,
                })
                .collect(),
            ok: true,
        });
    }

    let token = Secret::from_env(&plan.target.auth_env)?;
    let mut statuses: Vec<ActionStatus> = Vec::with_capacity(plan.actions.len());
    let mut failed = false;
    let mut scratch: Option<tempfile::TempDir> = None;
    let mut dataset_id: Option<String> = None;
    let (api_base, _) = dataverse_parts(&plan.target.locator);

    for action in &plan.actions {
        if failed {
            statuses.push(ActionStatus {
                action: action.to_string(),
                outcome: ActionOutcome::NotAttempted,
                detail: None,
            });
            continue;
        }
        let result = run_action(
            action,
            archive,
            transport,
            &token,
            &mut scratch,
            &mut dataset_id,
            &api_base,
        );
        match result {
            Ok(()) => statuses.push(ActionStatus {
                action: action.to_string(),
                outcome: ActionOutcome::Done,
                detail: None,
            }),
            Err(detail) => {
                failed = true;
                statuses.push(ActionStatus {
                    action: action.to_string(),
                    outcome: ActionOutcome::Failed,
                    detail: Some(detail),
                });
            }
        }
    }
    Ok(PublishReport { dry_run: false, statuses, ok: !failed })
}

#[allow(clippy::too_many_arguments)]
fn run_action(
    action: &Action,
    archive: &Path,
    transport: &mut dyn Transport,
    token: &Secret,
    scratch: &mut Option<tempfile::TempDir>,
    dataset_id: &mut Option<String>,
    api_base: &str,
) -> Result<(), String> {
    let clone_dir = |scratch: &Option<tempfile::TempDir>| -> Result<PathBuf, String> {
        scratch
            .as_ref()
            .map(|d| d.path().join("repo"))
            .ok_or_else(|| "repository was never cloned".to_string())
    };
    match action {
        Action::EnsureRepo { url } => {
            let dir = tempfile::tempdir().map_err(|e| format!("scratch dir: {e}"))?;
            let repo = dir.path().join("repo");
            let args = with_credentials(&[
                "clone",
                "--depth",
                "1",
                url.as_str(),
                repo.to_string_lossy().as_ref(),
            ]);
            transport.run_git(dir.path(), &args, token)?;
            *scratch = Some(dir);
            Ok(())
        }
        Action::LfsTrack { pattern } => {
            let repo = clone_dir(scratch)?;
            transport.run_git(&repo, &with_credentials(&["lfs", "track", pattern.as_str()]), token)
        }
        Action::Add { path } => {
            let repo = clone_dir(scratch)?;
            if repo.is_dir() {
                std::fs::copy(archive, repo.join(path))
                    .map_err(|e| format!("copying archive into the repo: {e}"))?;
            }
            transport.run_git(&repo, &with_credentials(&["add", "-A"]), token)
        }
        Action::Commit { message } => {
            let repo = clone_dir(scratch)?;
            transport.run_git(
                &repo,
                &with_credentials(&[
                    "-c",
                    "user.name=xanthus",
                    "-c",
                    "user.email=xanthus@localhost",
                    "commit",
                    "-m",
                    message.as_str(),
                ]),
                token,
            )
        }
        Action::Push => {
            let repo = clone_dir(scratch)?;
            transport.run_git(&repo, &with_credentials(&["push", "origin", "HEAD"]), token)
        }
        Action::CreateDataset { collection, metadata } => {
            let url = format!("{api_base}/api/dataverses/{collection}/datasets");
            let body = crate::jsonutil::to_canonical_json(metadata)
                .expect("metadata map serializes");
            let response =
                transport.http_post(&url, token, "application/json", body.as_bytes())?;
            *dataset_id = Some(extract_persistent_id(&response)?);
            Ok(())
        }
        Action::UploadFile { path, sha256 } => {
            let pid = dataset_id.as_deref().ok_or("dataset was never created")?;
            let bytes = std::fs::read(archive).map_err(|e| format!("reading archive: {e}"))?;
            let json_data = format!("{{\"checksum\": \"{sha256}\"}}");
            let body = multipart_file_body(path, &bytes, &json_data);
            let url = format!(
                "{api_base}/api/datasets/:persistentId/add?persistentId={pid}"
            );
            let content_type =
                format!("multipart/form-data; boundary={MULTIPART_BOUNDARY}");
            transport.http_post(&url, token, &content_type, &body)?;
            Ok(())
        }
        Action::PublishDataset => {
            let pid = dataset_id.as_deref().ok_or("dataset was never created")?;
            let url = format!(
                "{api_base}/api/datasets/:persistentId/actions/:publish?persistentId={pid}&type=major"
            );
            transport.http_post(&url, token, "application/json", b"{}")?;
            Ok(())
        }
    }
    .inspect_err(|e| {
        debug_assert!(!e.contains(token.reveal()), "transport leaked the token");
    })
}

/// Pulls `data.persistentId` (or a top-level `persistentId`) out of a
/// Dataverse JSON response.
fn extract_persistent_id(response: &str) -> Result<String, String> {
    let value: serde_json::Value = serde_json::from_str(response)
        .map_err(|e| format!("dataset response is not JSON: {e}"))?;
    value
        .pointer("/data/persistentId")
        .or_else(|| value.pointer("/persistentId"))
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| "dataset response lacks a persistentId".to_string())
}
