//! Machine provisioning behind one interface.
//!
//! A [`Provider`] materializes machine images (cached by content key) and
//! launches [`MachineHandle`]s. Four backends implement the same five
//! operations (exec, stage in, stage out, destroy, plus launch):
//!
//! - **mock**: machines are in-memory filesystems; scripts are interpreted
//!   line by line and `#xanthus:` directives take effect. Fully offline,
//!   byte-deterministic, and the only backend that records fine-grained
//!   events.
//! - **local**: machines are throwaway directories under the run workdir;
//!   shell scripts run for real under `sh` with the machine root mapped to
//!   absolute paths.
//! - **managed-vm**: drives an external VM manager through a pinned
//!   command-line contract (`up`, `ssh -c`, `upload`, `package --output`,
//!   `halt`, `destroy -f`).
//! - **cloud**: writes provisioning plans; nothing is executed and no
//!   cloud API is contacted.

mod cache;
mod cloud;
mod local;
mod managed;
mod mock;

pub use cache::{CacheStats, ImageCache};
pub use cloud::{CloudSettings, CLOUD_KEY_ID_ENV, CLOUD_SECRET_ENV};
pub use managed::ManagedTool;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ImageSource, Interpreter, Mode, VmSpec};
use crate::digest::Digest;

/// Environment variable naming the managed-VM manager binary.
pub const VM_TOOL_ENV: &str = "XANTHUS_VM_TOOL";

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("config script `{script}` failed with exit code {exit_code}: {stderr_excerpt}")]
    BuildFailed { script: String, exit_code: i32, stderr_excerpt: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("launch failed: {0}")]
    LaunchFailed(String),
    #[error("machine transport: {0}")]
    Transport(String),
    #[error("machine `{id}` is destroyed")]
    DestroyedHandle { id: String },
    #[error("local file not found: {}", path.display())]
    MissingLocalFile { path: PathBuf },
    #[error("remote file not found on `{vm}`: {path}")]
    MissingRemoteFile { vm: String, path: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a machine did, in per-machine order. `seq` starts at 1 and is
/// strictly increasing within one machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub subject: String,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Exec,
    Write,
    StageIn,
    StageOut,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Exec => "exec",
            EventKind::Write => "write",
            EventKind::StageIn => "stage_in",
            EventKind::StageOut => "stage_out",
        }
    }

    pub fn from_name(s: &str) -> Option<EventKind> {
        match s {
            "exec" => Some(EventKind::Exec),
            "write" => Some(EventKind::Write),
            "stage_in" => Some(EventKind::StageIn),
            "stage_out" => Some(EventKind::StageOut),
            _ => None,
        }
    }
}

/// Append-only event log. Subjects are whitespace-sanitized so rendered
/// trace lines stay field-splittable.
#[derive(Debug, Default, Clone)]
pub(crate) struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub(crate) fn append(&mut self, kind: EventKind, subject: &str, detail: impl Into<String>) {
        let subject: String =
            subject.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect();
        self.events.push(Event {
            seq: self.events.len() as u64 + 1,
            kind,
            subject,
            detail: detail.into(),
        });
    }

    pub(crate) fn events(&self) -> &[Event] {
        &self.events
    }

    pub(crate) fn last_seq(&self) -> u64 {
        self.events.len() as u64
    }
}

/// Result of one script execution on a machine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    /// Events appended by this execution. Empty on backends without
    /// fine-grained observation (managed-vm, cloud).
    pub events: Vec<Event>,
}

/// A script with its body already resolved (file sources read).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedScript {
    pub name: String,
    pub body: String,
    pub interpreter: Interpreter,
}

/// Identity under which a machine is launched; drives template variables
/// and machine environment.
#[derive(Debug, Clone)]
pub struct LaunchCtx {
    pub run_id: String,
    pub job: String,
    pub iteration: u64,
    pub seed: u64,
}

impl LaunchCtx {
    /// Template context for config-script builds: images are shared across
    /// runs, so no run identity may leak into baked content.
    pub(crate) fn build_phase() -> LaunchCtx {
        LaunchCtx { run_id: String::new(), job: "build".into(), iteration: 0, seed: 0 }
    }
}

/// `{vm}` value during config-script builds. The cache key excludes the
/// machine name, so identically-specced machines share an image; baking the
/// name in would serve the first builder's name to every sharer.
pub(crate) const BUILD_VM: &str = "build";

/// Expands `{job}`, `{iter}`, `{vm}`, `{seed}` in mock/local write
/// directives.
pub(crate) fn render_template(template: &str, ctx: &LaunchCtx, vm: &str) -> String {
    template
        .replace("{job}", &ctx.job)
        .replace("{iter}", &ctx.iteration.to_string())
        .replace("{vm}", vm)
        .replace("{seed}", &ctx.seed.to_string())
}

/// A materialized image: the cache key plus a backend-specific locator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub cache_key: Digest,
    pub backend: String,
    pub locator: String,
}

/// Content key for the image cache: image source, machine size, and the
/// exact bodies (and interpreters) of the config scripts, in order. VM
/// name and address do not participate, so identical machines share one
/// image.
pub fn image_cache_key(spec: &VmSpec, scripts: &[ResolvedScript]) -> Digest {
    let mut material = String::new();
    material.push_str("xanthus-image-v1\n");
    material.push_str(&format!("image:{}:{}\n", spec.image.kind(), spec.image.locator()));
    material.push_str(&format!("cpus:{}\n", spec.cpus));
    material.push_str(&format!("memory_mb:{}\n", spec.memory_mb));
    for s in scripts {
        material.push_str(&format!(
            "script:{}:{}\n{}\n",
            s.body.len(),
            s.interpreter.as_str(),
            s.body
        ));
    }
    Digest::of_bytes(material.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleState {
    Launched,
    Ready,
    Destroyed,
}

#[derive(Debug, Default)]
pub(crate) struct Counters {
    pub(crate) launched: AtomicU64,
    pub(crate) destroyed: AtomicU64,
}

/// Snapshot of machine lifecycle accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineCounters {
    pub launched: u64,
    pub destroyed: u64,
}

pub(crate) enum Inner {
    Mock(mock::MockMachine),
    Local(local::LocalMachine),
    Managed(managed::ManagedMachine),
    Cloud(cloud::PlannedMachine),
}

/// A live (or destroyed) machine. All operations on a destroyed handle are
/// rejected; destroy itself is idempotent.
pub struct MachineHandle {
    id: String,
    vm: String,
    state: HandleState,
    ctx: LaunchCtx,
    counters: Arc<Counters>,
    inner: Inner,
}

impl std::fmt::Debug for MachineHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MachineHandle")
            .field("id", &self.id)
            .field("vm", &self.vm)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl MachineHandle {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vm_name(&self) -> &str {
        &self.vm
    }

    pub fn state(&self) -> HandleState {
        self.state
    }

    pub fn ctx(&self) -> &LaunchCtx {
        &self.ctx
    }

    /// Per-machine event log (mock and local backends; empty elsewhere).
    pub fn events(&self) -> &[Event] {
        match &self.inner {
            Inner::Mock(m) => m.log.events(),
            Inner::Local(m) => m.log.events(),
            _ => &[],
        }
    }

    pub fn last_seq(&self) -> u64 {
        self.events().len() as u64
    }

    fn guard_ready(&self) -> Result<(), ProviderError> {
        match self.state {
            HandleState::Ready => Ok(()),
            HandleState::Destroyed => {
                Err(ProviderError::DestroyedHandle { id: self.id.clone() })
            }
            HandleState::Launched => {
                Err(ProviderError::Transport(format!("machine `{}` is not ready", self.id)))
            }
        }
    }

    /// Runs a script on the machine with extra environment variables.
    pub fn exec_script(
        &mut self,
        script: &ResolvedScript,
        extra_env: &BTreeMap<String, String>,
    ) -> Result<ExecResult, ProviderError> {
        self.guard_ready()?;
        let ctx = self.ctx.clone();
        let vm = self.vm.clone();
        match &mut self.inner {
            Inner::Mock(m) => m.exec(&ctx, &vm, script),
            Inner::Local(m) => m.exec(&ctx, &vm, script, extra_env),
            Inner::Managed(m) => m.exec(&ctx, &vm, script, extra_env),
            Inner::Cloud(m) => m.exec(script),
        }
    }

    /// Copies a host file onto the machine. Returns bytes staged.
    pub fn stage_in(&mut self, local: &Path, remote: &str) -> Result<u64, ProviderError> {
        self.guard_ready()?;
        if !local.is_file() {
            return Err(ProviderError::MissingLocalFile { path: local.to_path_buf() });
        }
        match &mut self.inner {
            Inner::Mock(m) => m.stage_in(local, remote),
            Inner::Local(m) => m.stage_in(local, remote),
            Inner::Managed(m) => m.stage_in(local, remote),
            Inner::Cloud(m) => m.stage_in(local, remote),
        }
    }

    /// Copies a machine file back to the host. Returns bytes staged.
    pub fn stage_out(&mut self, remote: &str, local: &Path) -> Result<u64, ProviderError> {
        self.guard_ready()?;
        let vm = self.vm.clone();
        match &mut self.inner {
            Inner::Mock(m) => m.stage_out(&vm, remote, local),
            Inner::Local(m) => m.stage_out(&vm, remote, local),
            Inner::Managed(m) => m.stage_out(&vm, remote, local),
            Inner::Cloud(m) => m.stage_out(&vm, remote, local),
        }
    }

    /// Writes bytes directly to a machine path without recording an event.
    /// Infrastructure writes (collector trace export) use this so they do
    /// not pollute the machine's own activity log.
    pub fn write_remote_file(&mut self, remote: &str, bytes: &[u8]) -> Result<(), ProviderError> {
        self.guard_ready()?;
        match &mut self.inner {
            Inner::Mock(m) => m.write_file(remote, bytes),
            Inner::Local(m) => m.write_file(remote, bytes),
            Inner::Managed(m) => m.write_file(remote, bytes),
            Inner::Cloud(m) => m.write_file(remote, bytes),
        }
    }

    /// Tears the machine down. Safe to call more than once; all later
    /// operations fail with `DestroyedHandle`.
    pub fn destroy(&mut self) -> Result<(), ProviderError> {
        if self.state == HandleState::Destroyed {
            return Ok(());
        }
        let result = match &mut self.inner {
            Inner::Mock(m) => m.destroy(),
            Inner::Local(m) => m.destroy(),
            Inner::Managed(m) => m.destroy(),
            Inner::Cloud(m) => m.destroy(),
        };
        self.state = HandleState::Destroyed;
        self.counters.destroyed.fetch_add(1, Ordering::SeqCst);
        result
    }
}

/// Backend factory: owns the image cache and machine workspace root for
/// one run.
pub struct Provider {
    mode: Mode,
    cache: ImageCache,
    machines_root: PathBuf,
    /// Directory the workflow file lives in; `path:` images resolve
    /// against it.
    base_dir: PathBuf,
    counters: Arc<Counters>,
    serial: AtomicU64,
    managed: Option<ManagedTool>,
    cloud: CloudSettings,
}

impl Provider {
    pub fn new(
        mode: Mode,
        cache_dir: &Path,
        machines_root: &Path,
        base_dir: &Path,
    ) -> Result<Provider, ProviderError> {
        // Backends run child processes with their own working directory,
        // so every stored root must survive a cwd change.
        let cache_dir = std::path::absolute(cache_dir)?;
        let machines_root = std::path::absolute(machines_root)?;
        let base_dir = std::path::absolute(base_dir)?;
        let cache = ImageCache::open(&cache_dir)?;
        std::fs::create_dir_all(&machines_root)?;
        let managed = match mode {
            Mode::ManagedVm => {
                let tool = ManagedTool::from_env();
                tool.version()?; // fail early when the manager is absent
                Some(tool)
            }
            _ => None,
        };
        Ok(Provider {
            mode,
            cache,
            machines_root,
            base_dir,
            counters: Arc::new(Counters::default()),
            serial: AtomicU64::new(0),
            managed,
            cloud: CloudSettings::from_env(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn managed_tool(&self) -> Option<&ManagedTool> {
        self.managed.as_ref()
    }

    pub fn cloud_settings(&self) -> &CloudSettings {
        &self.cloud
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn machine_counters(&self) -> MachineCounters {
        MachineCounters {
            launched: self.counters.launched.load(Ordering::SeqCst),
            destroyed: self.counters.destroyed.load(Ordering::SeqCst),
        }
    }

    /// Returns the image for a VM spec, building it at most once per
    /// distinct cache key. The flag reports whether the cache served it.
    pub fn materialize_image(
        &self,
        spec: &VmSpec,
        scripts: &[ResolvedScript],
    ) -> Result<(ImageRef, bool), ProviderError> {
        let key = image_cache_key(spec, scripts);
        let mode = self.mode;
        if let Mode::Cloud = mode {
            if !matches!(spec.image, ImageSource::CloudImage { .. }) {
                return Err(ProviderError::BackendUnavailable(format!(
                    "cloud mode requires a `cloud:` image for vm `{}`",
                    spec.name
                )));
            }
        }
        self.cache.get_or_build(&key, |target| match mode {
            Mode::Mock => mock::build_image(target, &key, spec, scripts),
            Mode::Local => local::build_image(target, &key, &self.base_dir, spec, scripts),
            Mode::ManagedVm => {
                let tool = self.managed.as_ref().expect("managed mode has a tool");
                managed::build_image(tool, target, &key, spec, scripts)
            }
            Mode::Cloud => cloud::build_image(target, &key, spec, scripts),
        })
    }

    /// Boots a fresh machine from an image. The handle starts `Ready`.
    pub fn launch(
        &self,
        image: &ImageRef,
        spec: &VmSpec,
        ctx: &LaunchCtx,
    ) -> Result<MachineHandle, ProviderError> {
        if image.backend != self.mode.as_str() {
            return Err(ProviderError::LaunchFailed(format!(
                "image was built for backend `{}`, provider runs `{}`",
                image.backend, self.mode
            )));
        }
        let serial = self.serial.fetch_add(1, Ordering::SeqCst);
        let id = format!("{}-{}-{}", spec.name, ctx.iteration, serial);
        let dir = self.machines_root.join(&id);
        let inner = match self.mode {
            Mode::Mock => Inner::Mock(mock::launch(image)?),
            Mode::Local => Inner::Local(local::launch(image, &dir)?),
            Mode::ManagedVm => {
                let tool = self.managed.as_ref().expect("managed mode has a tool");
                Inner::Managed(managed::launch(tool.clone(), image, spec, &dir)?)
            }
            Mode::Cloud => Inner::Cloud(cloud::launch(&self.cloud, image, spec, &dir, ctx)?),
        };
        self.counters.launched.fetch_add(1, Ordering::SeqCst);
        let mut handle = MachineHandle {
            id,
            vm: spec.name.clone(),
            state: HandleState::Launched,
            ctx: ctx.clone(),
            counters: Arc::clone(&self.counters),
            inner,
        };
        handle.state = HandleState::Ready;
        Ok(handle)
    }
}

/// Maps an absolute machine path into a host directory, rejecting
/// traversal. Shared by the local backend and tests.
pub(crate) fn map_remote_path(root: &Path, remote: &str) -> Result<PathBuf, ProviderError> {
    let rel = remote.trim_start_matches('/');
    if rel.is_empty() {
        return Err(ProviderError::Transport(format!("remote path `{remote}` names no file")));
    }
    if rel.split('/').any(|c| c == ".." || c.is_empty() || c == ".") {
        return Err(ProviderError::Transport(format!("unsafe remote path `{remote}`")));
    }
    Ok(root.join(rel))
}

/// Last `limit` characters of command output, for error excerpts.
pub(crate) fn excerpt(bytes: &[u8], limit: usize) -> String {
    let text = String::from_utf8_lossy(bytes);
    let text = text.trim();
    let start = text.char_indices().rev().nth(limit.saturating_sub(1)).map_or(0, |(i, _)| i);
    text[start..].to_string()
}
