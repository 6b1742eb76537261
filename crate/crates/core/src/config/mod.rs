//! Workflow model: the typed form of a `.xanthus` document.
//!
//! A workflow names a set of virtual machines, the scripts that configure
//! and drive them, optional provenance collectors, the jobs that tie tasks
//! to machines, and where the packaged results should be published. Parsing
//! lives in [`parse`], structural checks in [`validate`], and the canonical
//! byte rendering (the basis of the workflow digest) in [`canonical`].

mod canonical;
mod parse;
mod validate;

pub use canonical::{canonical_digest, canonical_text};
pub use parse::{parse_workflow, ParseError};
pub use validate::{has_errors, validate_structure, validate_workflow, Diagnostic, Severity};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Name of the built-in collector that records the backend event log.
/// Workflows may not declare their own collector under this name.
pub const SYNTHETIC_COLLECTOR: &str = "synthetic";

/// Default Git LFS threshold for publish targets: 50 MiB.
pub const DEFAULT_LFS_THRESHOLD: u64 = 52_428_800;

/// Which machine backend a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// In-memory machines; the default. Fully offline and deterministic.
    Mock,
    /// Throwaway directories on the host, scripts run under `sh`.
    Local,
    /// Drives an external VM manager through a pinned CLI contract.
    ManagedVm,
    /// Produces provisioning plans without contacting any cloud API.
    Cloud,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mock => "mock",
            Mode::Local => "local",
            Mode::ManagedVm => "managed-vm",
            Mode::Cloud => "cloud",
        }
    }

    pub fn from_name(s: &str) -> Option<Mode> {
        match s {
            "mock" => Some(Mode::Mock),
            "local" => Some(Mode::Local),
            "managed-vm" => Some(Mode::ManagedVm),
            "cloud" => Some(Mode::Cloud),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a machine image comes from.
///
/// The textual form is a single string: `"name"` or `"name@version"` for a
/// registry box, `"path:relative/dir"` for a local template, and
/// `"cloud:ami-..."` for a cloud image id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Registry { coordinate: String },
    LocalPath { path: String },
    CloudImage { id: String },
}

impl ImageSource {
    /// The string form used in documents and cache keys.
    pub fn locator(&self) -> String {
        match self {
            ImageSource::Registry { coordinate } => coordinate.clone(),
            ImageSource::LocalPath { path } => format!("path:{path}"),
            ImageSource::CloudImage { id } => format!("cloud:{id}"),
        }
    }

    /// Short tag describing the variant, recorded in archives.
    pub fn kind(&self) -> &'static str {
        match self {
            ImageSource::Registry { .. } => "registry",
            ImageSource::LocalPath { .. } => "path",
            ImageSource::CloudImage { .. } => "cloud",
        }
    }
}

/// One virtual machine declaration (`[vm.<name>]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmSpec {
    pub name: String,
    pub image: ImageSource,
    /// Optional fixed private address, forwarded to backends that honor it.
    pub ip: Option<String>,
    pub cpus: u64,
    pub memory_mb: u64,
    /// Scripts baked into the machine image, in order. Changing any of them
    /// changes the image cache key.
    pub config_scripts: Vec<String>,
}

/// How a script body is obtained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptSource {
    /// Body embedded in the workflow document.
    Inline(String),
    /// Path relative to the workflow file.
    File(String),
}

/// How a script body is interpreted on a machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpreter {
    /// Run under `sh` (real backends) or line-interpreted (mock backend).
    Shell,
    /// Only `#xanthus:` directive lines take effect; all backends treat the
    /// rest of the body as commentary. Useful for portable fixtures.
    CollectorDirective,
}

impl Interpreter {
    pub fn as_str(self) -> &'static str {
        match self {
            Interpreter::Shell => "shell",
            Interpreter::CollectorDirective => "collector-directive",
        }
    }

    pub fn from_name(s: &str) -> Option<Interpreter> {
        match s {
            "shell" => Some(Interpreter::Shell),
            "collector-directive" => Some(Interpreter::CollectorDirective),
            _ => None,
        }
    }
}

/// A named script (`[script.<name>]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Script {
    pub name: String,
    pub source: ScriptSource,
    pub interpreter: Interpreter,
}

/// One entry in a per-machine task list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskRef {
    pub script: String,
    pub before_hook: Option<String>,
    pub after_hook: Option<String>,
    /// Extra environment for this task; keys must be identifiers.
    pub env: BTreeMap<String, String>,
}

impl TaskRef {
    pub fn new(script: &str) -> TaskRef {
        TaskRef { script: script.to_string(), ..TaskRef::default() }
    }
}

/// A file copied onto a machine before tasks run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagedFile {
    /// Path relative to the workflow file.
    pub local: String,
    /// Machine that receives the file.
    pub vm: String,
    /// Absolute path on the machine.
    pub remote: String,
}

/// A file expected on a machine after tasks finish.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedOutput {
    pub vm: String,
    /// Absolute path on the machine.
    pub remote: String,
    /// File name it is archived under.
    pub name: String,
}

/// Position of a task: machine name plus zero-based index into its list.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId {
    pub vm: String,
    pub index: usize,
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.vm, self.index)
    }
}

/// A cross-machine ordering constraint: `before` must finish before `after`
/// starts. Within one machine the task list order already applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderEdge {
    pub before: TaskId,
    pub after: TaskId,
}

/// What happens to the run when an iteration fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePolicy {
    /// Stop the run; remaining iterations and jobs do not execute.
    Abort,
    /// Record the failure and keep going.
    Continue,
}

impl FailurePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            FailurePolicy::Abort => "abort",
            FailurePolicy::Continue => "continue",
        }
    }

    pub fn from_name(s: &str) -> Option<FailurePolicy> {
        match s {
            "abort" => Some(FailurePolicy::Abort),
            "continue" => Some(FailurePolicy::Continue),
            _ => None,
        }
    }
}

/// A job (`[job.<name>]`): tasks across machines, repeated `iterations`
/// times, each iteration on freshly launched machines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub name: String,
    pub iterations: u64,
    /// Machine name to its ordered task list. Every key must be a declared
    /// VM and every list must be non-empty.
    pub tasks: BTreeMap<String, Vec<TaskRef>>,
    pub inputs: Vec<StagedFile>,
    pub outputs: Vec<ExpectedOutput>,
    pub order: Vec<OrderEdge>,
    pub on_failure: FailurePolicy,
    /// Collector to run on every machine hosting tasks, if any.
    pub collector: Option<String>,
}

/// A provenance collector (`[collector.<name>]`): four lifecycle scripts
/// plus the machine paths its traces land in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectorSpec {
    pub name: String,
    pub install: String,
    pub start: String,
    pub stop: String,
    pub export: String,
    pub trace_outputs: Vec<String>,
}

/// Supported publication services.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Github,
    Dataverse,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Github => "github",
            TargetKind::Dataverse => "dataverse",
        }
    }

    pub fn from_name(s: &str) -> Option<TargetKind> {
        match s {
            "github" => Some(TargetKind::Github),
            "dataverse" => Some(TargetKind::Dataverse),
            _ => None,
        }
    }
}

/// A publication destination (`[publish.<n>]`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishTarget {
    pub kind: TargetKind,
    /// GitHub: repository URL. Dataverse: `<server-url>#<collection>`.
    pub locator: String,
    /// Environment variable holding the credential. The value itself never
    /// appears in documents, plans, or reports.
    pub auth_env: String,
    /// Files at least this large are routed through Git LFS.
    pub lfs_threshold_bytes: u64,
}

/// A parsed workflow document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workflow {
    pub name: String,
    pub seed: u64,
    pub mode: Mode,
    pub vms: BTreeMap<String, VmSpec>,
    pub scripts: BTreeMap<String, Script>,
    pub collectors: BTreeMap<String, CollectorSpec>,
    /// Jobs in execution order.
    pub jobs: Vec<Job>,
    /// Publish targets in declaration order; selected by index.
    pub publish_targets: Vec<PublishTarget>,
}

impl Workflow {
    pub fn job(&self, name: &str) -> Option<&Job> {
        self.jobs.iter().find(|j| j.name == name)
    }
}

/// Checks the identifier rule shared by section names, VM names, and env
/// keys: ASCII letter or underscore first, then letters, digits, `_`, `-`.
pub fn is_valid_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}
