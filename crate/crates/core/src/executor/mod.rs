//! Workflow execution.
//!
//! A run walks the jobs in declaration order. Every iteration of a job gets
//! freshly launched machines (from cached images), then moves through fixed
//! phases: stage inputs, bring the collector up, run the task graph, wind
//! the collector down and export traces, harvest declared outputs, destroy
//! the machines. Tasks are sequential per machine and concurrent across
//! machines, subject to declared cross-machine order edges.
//!
//! Everything observable lands in a [`RunRecord`] persisted under
//! `<workdir>/<run_id>/record` before `run_workflow` returns, on success
//! and on abort alike.

mod merge;

pub use merge::{merge_events, MachineLog, VmEvent};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Barrier, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::collector::{Collector, TraceFile};
use crate::config::{
    has_errors, validate_workflow, FailurePolicy, Job, Mode, ScriptSource, Severity, TaskId,
    TaskRef, Workflow, SYNTHETIC_COLLECTOR,
};
use crate::digest::Digest;
use crate::provider::{
    Event, ImageRef, LaunchCtx, MachineHandle, Provider, ProviderError, ResolvedScript,
};

/// File name of the persisted run record inside the run directory.
pub const RECORD_FILE: &str = "record";

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("workflow is not valid:\n{summary}")]
    Invalid { summary: String },
    #[error("job `{job}` iteration {iteration} failed ({cause}); run aborted")]
    Aborted { job: String, iteration: u64, cause: String },
    #[error("cannot read script `{name}`: {source}")]
    ScriptRead { name: String, source: std::io::Error },
    #[error("cannot snapshot input `{path}`: {source}")]
    InputRead { path: String, source: std::io::Error },
    #[error("run directory `{}` already exists", .0.display())]
    RunExists(PathBuf),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot serialize run record: {0}")]
    Record(#[from] serde_json::Error),
}

/// Everything one run did, in canonical-JSON-serializable form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Workflow name, used for archive file names.
    pub workflow: String,
    pub workflow_digest: Digest,
    pub mode: String,
    pub seed: u64,
    /// Captured host/tool identification, e.g. `host_os`, `vm_tool`.
    pub environment: BTreeMap<String, String>,
    /// VM name to the image it launched from.
    pub images: BTreeMap<String, ImageRef>,
    /// One entry per executed job, in workflow order.
    pub job_results: Vec<JobResult>,
}

impl RunRecord {
    pub fn persist(&self, run_dir: &Path) -> Result<(), ExecError> {
        let text = crate::jsonutil::to_canonical_json(self)?;
        std::fs::write(run_dir.join(RECORD_FILE), text)?;
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<RunRecord, ExecError> {
        let text = std::fs::read_to_string(run_dir.join(RECORD_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// All merged events across jobs and iterations, in execution order.
    pub fn global_events(&self) -> impl Iterator<Item = (&str, u64, &VmEvent)> {
        self.job_results.iter().flat_map(|j| {
            j.iterations
                .iter()
                .flat_map(move |it| it.events.iter().map(move |e| (j.job.as_str(), it.index, e)))
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobResult {
    pub job: String,
    pub planned_iterations: u64,
    /// True when an abort stopped the job short of its plan.
    pub truncated: bool,
    pub inputs: Vec<InputSnapshot>,
    pub iterations: Vec<IterationResult>,
}

/// An input file frozen under `inputs/<job>/` at job start; iterations
/// stage from the snapshot so mid-run edits cannot skew later iterations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputSnapshot {
    /// File name inside the snapshot directory.
    pub name: String,
    /// Path relative to the workflow file, as declared.
    pub source: String,
    pub vm: String,
    pub remote: String,
    pub sha256: Digest,
    pub size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskResult {
    pub vm: String,
    /// Position in the machine's task list.
    pub index: usize,
    pub script: String,
    pub status: TaskStatus,
    /// None when the task never ran; -1 marks a transport failure.
    pub exit_code: Option<i32>,
    pub duration_ms: u64,
}

/// A harvested file in the run staging area.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub vm: String,
    /// `/`-separated path relative to the run directory.
    pub path: String,
    pub sha256: Digest,
    pub size: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationResult {
    /// 1-based.
    pub index: u64,
    pub status: IterationStatus,
    /// First phase that failed: `stage_in`, `collector_install`,
    /// `collector_start`, `task`, or `harvest`.
    pub failure_phase: Option<String>,
    /// All tasks of the iteration, sorted by (vm, index).
    pub tasks: Vec<TaskResult>,
    /// `vm/archive-name` to the harvested file.
    pub outputs: BTreeMap<String, OutputFile>,
    /// `vm/trace-file` to the harvested trace.
    pub collector_traces: BTreeMap<String, OutputFile>,
    pub notes: Vec<String>,
    /// Deterministically merged machine events (mock/local backends).
    pub events: Vec<VmEvent>,
}

/// Fresh run identifier: UTC timestamp plus a random suffix. The length is
/// fixed so length-preserving redaction downstream stays trivial.
pub fn generate_run_id() -> String {
    let now = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let suffix: u32 = rand::random();
    format!("{now}-{suffix:08x}")
}

/// Identifies the host and the tools a mode depends on. Probes never fail:
/// a missing tool is recorded as `unavailable`.
pub fn capture_environment(mode: Mode) -> BTreeMap<String, String> {
    let mut env = BTreeMap::new();
    env.insert("orchestrator".to_string(), env!("CARGO_PKG_VERSION").to_string());
    env.insert("backend".to_string(), mode.as_str().to_string());
    env.insert("host_os".to_string(), std::env::consts::OS.to_string());
    env.insert("host_arch".to_string(), std::env::consts::ARCH.to_string());
    let kernel = std::process::Command::new("uname")
        .arg("-sr")
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unavailable".to_string());
    env.insert("host_kernel".to_string(), kernel);
    if mode == Mode::ManagedVm {
        let tool = crate::provider::ManagedTool::from_env();
        let version = tool.version().unwrap_or_else(|_| "unavailable".to_string());
        env.insert("vm_tool".to_string(), version);
    }
    if mode == Mode::Cloud {
        let settings = crate::provider::CloudSettings::from_env();
        env.insert("cloud_region".to_string(), settings.region);
        let have_creds = std::env::var(crate::provider::CLOUD_KEY_ID_ENV).is_ok()
            && std::env::var(crate::provider::CLOUD_SECRET_ENV).is_ok();
        // Presence only; credential values never enter the record.
        env.insert(
            "cloud_credentials".to_string(),
            if have_creds { "set" } else { "unset" }.to_string(),
        );
    }
    env
}

/// Reads every script body (inline or file-sourced, relative to the
/// workflow file) into executable form.
pub fn resolve_scripts(
    w: &Workflow,
    base_dir: &Path,
) -> Result<BTreeMap<String, ResolvedScript>, ExecError> {
    let mut out = BTreeMap::new();
    for s in w.scripts.values() {
        let body = match &s.source {
            ScriptSource::Inline(text) => text.clone(),
            ScriptSource::File(rel) => std::fs::read_to_string(base_dir.join(rel))
                .map_err(|e| ExecError::ScriptRead { name: s.name.clone(), source: e })?,
        };
        out.insert(
            s.name.clone(),
            ResolvedScript { name: s.name.clone(), body, interpreter: s.interpreter },
        );
    }
    Ok(out)
}

/// Runs a validated workflow end to end. The record is persisted under
/// `<workdir>/<run_id>/` before this returns, also when a job aborts or an
/// infrastructure error cuts the run short.
pub fn run_workflow(
    w: &Workflow,
    provider: &Provider,
    base_dir: &Path,
    workdir: &Path,
    run_id: &str,
) -> Result<RunRecord, ExecError> {
    let diags = validate_workflow(w, base_dir);
    if has_errors(&diags) {
        let summary = diags
            .iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| format!("{}: {}", d.path, d.message))
            .collect::<Vec<_>>()
            .join("\n");
        return Err(ExecError::Invalid { summary });
    }
    let workflow_digest = crate::config::canonical_digest(w).expect("workflow just validated");

    // Staged file paths are handed to backends that change the working
    // directory of child processes, so the run tree must be absolute.
    let base_dir = &std::path::absolute(base_dir)?;
    let workdir = std::path::absolute(workdir)?;
    std::fs::create_dir_all(&workdir)?;
    let run_dir = workdir.join(run_id);
    if run_dir.exists() {
        return Err(ExecError::RunExists(run_dir));
    }
    std::fs::create_dir(&run_dir)?;

    // Freeze what ran: canonical workflow text plus resolved script bodies.
    std::fs::write(run_dir.join("workflow.xanthus"), crate::config::canonical_text(w))?;
    let scripts = resolve_scripts(w, base_dir)?;
    let scripts_dir = run_dir.join("scripts");
    std::fs::create_dir_all(&scripts_dir)?;
    for s in scripts.values() {
        std::fs::write(scripts_dir.join(&s.name), &s.body)?;
    }

    let mut record = RunRecord {
        run_id: run_id.to_string(),
        workflow: w.name.clone(),
        workflow_digest,
        mode: w.mode.as_str().to_string(),
        seed: w.seed,
        environment: capture_environment(w.mode),
        images: BTreeMap::new(),
        job_results: Vec::new(),
    };

    let outcome = execute_jobs(w, provider, base_dir, &scripts, &run_dir, run_id, &mut record);
    record.persist(&run_dir)?;
    outcome?;
    Ok(record)
}

fn execute_jobs(
    w: &Workflow,
    provider: &Provider,
    base_dir: &Path,
    scripts: &BTreeMap<String, ResolvedScript>,
    run_dir: &Path,
    run_id: &str,
    record: &mut RunRecord,
) -> Result<(), ExecError> {
    for job in &w.jobs {
        for vm in job.tasks.keys() {
            if record.images.contains_key(vm) {
                continue;
            }
            let spec = &w.vms[vm];
            let cfg: Vec<ResolvedScript> =
                spec.config_scripts.iter().map(|n| scripts[n].clone()).collect();
            let (image, _) = provider.materialize_image(spec, &cfg)?;
            record.images.insert(vm.clone(), image);
        }

        let collector = build_collector(w, job, scripts);
        let (snapshots, staged_inputs) = snapshot_inputs(job, base_dir, run_dir)?;
        let mut jr = JobResult {
            job: job.name.clone(),
            planned_iterations: job.iterations,
            truncated: false,
            inputs: snapshots,
            iterations: Vec::new(),
        };

        let mut abort: Option<ExecError> = None;
        for k in 1..=job.iterations {
            let staging = run_dir.join("staging").join(&job.name).join(format!("iter-{k}"));
            let result = match run_iteration(
                provider,
                w,
                job,
                k,
                run_id,
                scripts,
                collector.as_ref(),
                &staged_inputs,
                &record.images,
                &staging,
                run_dir,
            ) {
                Ok(r) => r,
                Err(e) => {
                    abort = Some(e);
                    break;
                }
            };
            let failed = result.status == IterationStatus::Failed;
            let cause = failure_cause(&result);
            jr.iterations.push(result);
            if failed && job.on_failure == FailurePolicy::Abort {
                abort =
                    Some(ExecError::Aborted { job: job.name.clone(), iteration: k, cause });
                break;
            }
        }
        jr.truncated = (jr.iterations.len() as u64) < job.iterations;
        record.job_results.push(jr);
        if let Some(e) = abort {
            return Err(e);
        }
    }
    Ok(())
}

fn failure_cause(result: &IterationResult) -> String {
    let mut cause = match &result.failure_phase {
        Some(phase) => format!("phase={phase}"),
        None => "failure".to_string(),
    };
    if let Some(note) = result.notes.first() {
        cause.push_str(": ");
        cause.push_str(note);
    }
    cause
}

fn build_collector(
    w: &Workflow,
    job: &Job,
    scripts: &BTreeMap<String, ResolvedScript>,
) -> Option<Collector> {
    let name = job.collector.as_deref()?;
    if name == SYNTHETIC_COLLECTOR {
        return Some(Collector::Synthetic);
    }
    let spec = &w.collectors[name];
    Some(Collector::Adapter {
        name: name.to_string(),
        install: scripts[&spec.install].clone(),
        start: scripts[&spec.start].clone(),
        stop: scripts[&spec.stop].clone(),
        export: scripts[&spec.export].clone(),
        trace_outputs: spec.trace_outputs.clone(),
    })
}

/// Copies declared inputs into `inputs/<job>/` and returns the snapshots
/// plus `(host path, vm, remote)` staging instructions.
#[allow(clippy::type_complexity)]
fn snapshot_inputs(
    job: &Job,
    base_dir: &Path,
    run_dir: &Path,
) -> Result<(Vec<InputSnapshot>, Vec<(PathBuf, String, String)>), ExecError> {
    if job.inputs.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let dir = run_dir.join("inputs").join(&job.name);
    std::fs::create_dir_all(&dir)?;
    let mut used = BTreeSet::new();
    let mut snapshots = Vec::new();
    let mut staged = Vec::new();
    for input in &job.inputs {
        let src = base_dir.join(&input.local);
        let base = input.local.rsplit('/').next().unwrap_or(&input.local);
        let name = unique_name(&mut used, base);
        let dest = dir.join(&name);
        std::fs::copy(&src, &dest).map_err(|e| ExecError::InputRead {
            path: input.local.clone(),
            source: e,
        })?;
        let sha256 = Digest::of_file(&dest)?;
        let size = std::fs::metadata(&dest)?.len();
        snapshots.push(InputSnapshot {
            name,
            source: input.local.clone(),
            vm: input.vm.clone(),
            remote: input.remote.clone(),
            sha256,
            size,
        });
        staged.push((dest, input.vm.clone(), input.remote.clone()));
    }
    Ok((snapshots, staged))
}

pub(crate) fn unique_name(used: &mut BTreeSet<String>, base: &str) -> String {
    if used.insert(base.to_string()) {
        return base.to_string();
    }
    for k in 2u32.. {
        let candidate = format!("{k}-{base}");
        if used.insert(candidate.clone()) {
            return candidate;
        }
    }
    unreachable!("u32 range exhausted")
}

fn rel_path(run_dir: &Path, p: &Path) -> String {
    match p.strip_prefix(run_dir) {
        Ok(rel) => rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/"),
        Err(_) => p.display().to_string(),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TaskState {
    Pending,
    Ok,
    Failed,
    Skipped,
}

/// Cross-machine completion board. Workers resolve every task of their own
/// machine (run, fail, or skip), so waits always terminate on workflows
/// whose order graph passed cycle validation.
struct Board {
    state: Mutex<BTreeMap<TaskId, TaskState>>,
    cv: Condvar,
}

impl Board {
    fn new(job: &Job) -> Board {
        let mut state = BTreeMap::new();
        for (vm, refs) in &job.tasks {
            for index in 0..refs.len() {
                state.insert(TaskId { vm: vm.clone(), index }, TaskState::Pending);
            }
        }
        Board { state: Mutex::new(state), cv: Condvar::new() }
    }

    fn set(&self, id: &TaskId, s: TaskState) {
        *self.state.lock().unwrap().get_mut(id).expect("task is on the board") = s;
        self.cv.notify_all();
    }

    /// Blocks until every dependency is resolved; true iff all succeeded.
    fn wait_all(&self, deps: &[&TaskId]) -> bool {
        let mut guard = self.state.lock().unwrap();
        loop {
            if deps.iter().all(|d| guard[*d] != TaskState::Pending) {
                return deps.iter().all(|d| guard[*d] == TaskState::Ok);
            }
            guard = self.cv.wait(guard).unwrap();
        }
    }
}

struct WorkerReport {
    vm: String,
    /// `(phase, note)` when staging or collector bring-up failed here.
    setup_failure: Option<(String, String)>,
    tasks: Vec<TaskResult>,
    task_spans: Vec<(usize, u64, u64)>,
    setup_end: u64,
    outputs: Vec<(String, OutputFile)>,
    missing_outputs: Vec<String>,
    traces: Vec<TraceFile>,
    notes: Vec<String>,
    events: Vec<Event>,
}

#[allow(clippy::too_many_arguments)]
fn run_iteration(
    provider: &Provider,
    w: &Workflow,
    job: &Job,
    k: u64,
    run_id: &str,
    scripts: &BTreeMap<String, ResolvedScript>,
    collector: Option<&Collector>,
    inputs: &[(PathBuf, String, String)],
    images: &BTreeMap<String, ImageRef>,
    staging: &Path,
    run_dir: &Path,
) -> Result<IterationResult, ExecError> {
    let ctx =
        LaunchCtx { run_id: run_id.to_string(), job: job.name.clone(), iteration: k, seed: w.seed };

    let vm_names: Vec<&String> = job.tasks.keys().collect();
    let mut handles: Vec<MachineHandle> = Vec::with_capacity(vm_names.len());
    for name in &vm_names {
        match provider.launch(&images[*name], &w.vms[*name], &ctx) {
            Ok(h) => handles.push(h),
            Err(e) => {
                for h in &mut handles {
                    let _ = h.destroy();
                }
                return Err(e.into());
            }
        }
    }

    let board = Board::new(job);
    let barrier = Barrier::new(handles.len());
    let poisoned = AtomicBool::new(false);

    let mut reports: Vec<WorkerReport> = std::thread::scope(|scope| {
        let mut joins = Vec::new();
        for h in handles.iter_mut() {
            joins.push(scope.spawn(|| {
                machine_worker(
                    h, job, scripts, collector, inputs, &board, &barrier, &poisoned, staging,
                    run_dir,
                )
            }));
        }
        joins.into_iter().map(|j| j.join().expect("machine worker panicked")).collect()
    });
    reports.sort_by(|a, b| a.vm.cmp(&b.vm));

    let mut teardown_notes = Vec::new();
    for h in handles.iter_mut() {
        if let Err(e) = h.destroy() {
            teardown_notes.push(format!("destroying `{}`: {e}", h.id()));
        }
    }

    let mut result = IterationResult {
        index: k,
        status: IterationStatus::Ok,
        failure_phase: None,
        tasks: Vec::new(),
        outputs: BTreeMap::new(),
        collector_traces: BTreeMap::new(),
        notes: Vec::new(),
        events: Vec::new(),
    };

    // Reports are vm-sorted, so everything assembled here is deterministic.
    let mut harvest_failed = false;
    for report in &mut reports {
        if let Some((_, note)) = &report.setup_failure {
            result.notes.push(note.clone());
        }
        result.notes.append(&mut report.notes);
        harvest_failed |= !report.missing_outputs.is_empty();
        result.notes.append(&mut report.missing_outputs);
        result.tasks.append(&mut report.tasks);
        for (key, file) in report.outputs.drain(..) {
            result.outputs.insert(key, file);
        }
        for t in report.traces.drain(..) {
            let file = t.local.file_name().map(|n| n.to_string_lossy().into_owned());
            let key = format!("{}/{}", t.vm, file.unwrap_or_else(|| "trace".to_string()));
            result.collector_traces.insert(
                key,
                OutputFile {
                    vm: t.vm,
                    path: rel_path(run_dir, &t.local),
                    sha256: t.sha256,
                    size: t.size,
                },
            );
        }
    }
    result.notes.extend(teardown_notes);
    result.tasks.sort_by(|a, b| (&a.vm, a.index).cmp(&(&b.vm, b.index)));

    // Phases rank so concurrent failures resolve to one deterministic cause.
    let phase_rank = |p: &str| match p {
        "stage_in" => 0,
        "collector_install" => 1,
        "collector_start" => 2,
        _ => 3,
    };
    result.failure_phase = reports
        .iter()
        .filter_map(|r| r.setup_failure.as_ref())
        .map(|(phase, _)| phase.clone())
        .min_by_key(|p| phase_rank(p));
    if result.failure_phase.is_none() {
        if result.tasks.iter().any(|t| t.status != TaskStatus::Ok) {
            result.failure_phase = Some("task".to_string());
        } else if harvest_failed {
            result.failure_phase = Some("harvest".to_string());
        }
    }
    if result.failure_phase.is_some() {
        result.status = IterationStatus::Failed;
    }

    let logs: Vec<MachineLog> = reports
        .into_iter()
        .map(|r| MachineLog {
            vm: r.vm,
            events: r.events,
            setup_end: r.setup_end,
            task_spans: r.task_spans,
        })
        .collect();
    result.events = merge_events(&logs, &job.order);

    Ok(result)
}

/// Drives one machine through all iteration phases. Never early-returns:
/// every worker reaches every barrier, so no phase can deadlock, and
/// failures degrade the report instead of tearing the thread down.
#[allow(clippy::too_many_arguments)]
fn machine_worker(
    h: &mut MachineHandle,
    job: &Job,
    scripts: &BTreeMap<String, ResolvedScript>,
    collector: Option<&Collector>,
    inputs: &[(PathBuf, String, String)],
    board: &Board,
    barrier: &Barrier,
    poisoned: &AtomicBool,
    staging: &Path,
    run_dir: &Path,
) -> WorkerReport {
    let vm = h.vm_name().to_string();
    let tasks = &job.tasks[&vm];
    let mut report = WorkerReport {
        vm: vm.clone(),
        setup_failure: None,
        tasks: Vec::new(),
        task_spans: Vec::new(),
        setup_end: 0,
        outputs: Vec::new(),
        missing_outputs: Vec::new(),
        traces: Vec::new(),
        notes: Vec::new(),
        events: Vec::new(),
    };
    let fail_setup = |report: &mut WorkerReport, phase: &str, note: String| {
        if report.setup_failure.is_none() {
            report.setup_failure = Some((phase.to_string(), note));
        }
        poisoned.store(true, Ordering::SeqCst);
    };

    // Stage inputs targeted at this machine.
    for (local, _, remote) in inputs.iter().filter(|(_, ivm, _)| *ivm == vm) {
        if let Err(e) = h.stage_in(local, remote) {
            fail_setup(&mut report, "stage_in", format!("staging `{remote}` onto `{vm}`: {e}"));
        }
    }
    barrier.wait();

    // Bring the collector up, unless staging already poisoned the
    // iteration somewhere.
    let mut collector_up = false;
    if let Some(c) = collector {
        if !poisoned.load(Ordering::SeqCst) {
            match c.install(h) {
                Ok(r) if r.exit_code != 0 => fail_setup(
                    &mut report,
                    "collector_install",
                    format!("collector install exited {} on `{vm}`", r.exit_code),
                ),
                Err(e) => fail_setup(
                    &mut report,
                    "collector_install",
                    format!("collector install failed on `{vm}`: {e}"),
                ),
                Ok(_) => match c.start(h) {
                    Ok(r) if r.exit_code != 0 => fail_setup(
                        &mut report,
                        "collector_start",
                        format!("collector start exited {} on `{vm}`", r.exit_code),
                    ),
                    Err(e) => fail_setup(
                        &mut report,
                        "collector_start",
                        format!("collector start failed on `{vm}`: {e}"),
                    ),
                    Ok(_) => collector_up = true,
                },
            }
        }
    }
    barrier.wait();

    // Task graph. Skips still resolve board entries, so cross-machine
    // waiters never hang.
    report.setup_end = h.last_seq();
    let skip_all = poisoned.load(Ordering::SeqCst);
    let mut prev_ok = true;
    for (index, t) in tasks.iter().enumerate() {
        let id = TaskId { vm: vm.clone(), index };
        if skip_all || !prev_ok {
            board.set(&id, TaskState::Skipped);
            report.tasks.push(skipped_task(&vm, index, t));
            prev_ok = false;
            continue;
        }
        let deps: Vec<&TaskId> =
            job.order.iter().filter(|e| e.after == id).map(|e| &e.before).collect();
        if !board.wait_all(&deps) {
            board.set(&id, TaskState::Skipped);
            report.tasks.push(skipped_task(&vm, index, t));
            report.notes.push(format!("task `{id}` skipped: a dependency did not succeed"));
            prev_ok = false;
            continue;
        }
        let before_seq = h.last_seq();
        let (task_result, note) = run_task(h, t, index, &vm, scripts);
        let last_seq = h.last_seq();
        if last_seq > before_seq {
            report.task_spans.push((index, before_seq + 1, last_seq));
        }
        prev_ok = task_result.status == TaskStatus::Ok;
        board.set(&id, if prev_ok { TaskState::Ok } else { TaskState::Failed });
        report.tasks.push(task_result);
        if let Some(note) = note {
            report.notes.push(note);
        }
    }
    barrier.wait();

    // Collector wind-down and trace export, best effort.
    if let Some(c) = collector {
        if collector_up {
            match c.stop(h) {
                Ok(r) if r.exit_code != 0 => report.notes.push(format!(
                    "collector stop exited {} on `{vm}`; trace may be incomplete",
                    r.exit_code
                )),
                Err(e) => report.notes.push(format!("collector stop failed on `{vm}`: {e}")),
                Ok(_) => {}
            }
            match c.export(h, &staging.join(format!("{vm}.trace"))) {
                Ok(mut out) => {
                    report.traces.append(&mut out.traces);
                    report.notes.append(&mut out.degraded);
                }
                Err(e) => report.notes.push(format!("collector export failed on `{vm}`: {e}")),
            }
        }
    }

    // Declared outputs, best effort even when the iteration failed.
    for o in job.outputs.iter().filter(|o| o.vm == vm) {
        let dest = staging.join(&vm).join(&o.name);
        match h.stage_out(&o.remote, &dest) {
            Ok(_) => match Digest::of_file(&dest).and_then(|d| {
                std::fs::metadata(&dest).map(|m| (d, m.len()))
            }) {
                Ok((sha256, size)) => report.outputs.push((
                    format!("{vm}/{}", o.name),
                    OutputFile { vm: vm.clone(), path: rel_path(run_dir, &dest), sha256, size },
                )),
                Err(e) => report
                    .missing_outputs
                    .push(format!("output `{}` from `{vm}:{}`: {e}", o.name, o.remote)),
            },
            Err(e) => report
                .missing_outputs
                .push(format!("output `{}` from `{vm}:{}`: {e}", o.name, o.remote)),
        }
    }

    report.events = h.events().to_vec();
    report
}

fn skipped_task(vm: &str, index: usize, t: &TaskRef) -> TaskResult {
    TaskResult {
        vm: vm.to_string(),
        index,
        script: t.script.clone(),
        status: TaskStatus::Skipped,
        exit_code: None,
        duration_ms: 0,
    }
}

/// Runs before-hook, script, after-hook in order, stopping at the first
/// nonzero exit or transport failure.
fn run_task(
    h: &mut MachineHandle,
    t: &TaskRef,
    index: usize,
    vm: &str,
    scripts: &BTreeMap<String, ResolvedScript>,
) -> (TaskResult, Option<String>) {
    let mut duration_ms = 0u64;
    let mut exit_code = 0i32;
    let mut note = None;
    let pieces = t.before_hook.iter().chain([&t.script]).chain(t.after_hook.iter());
    for name in pieces {
        match h.exec_script(&scripts[name], &t.env) {
            Ok(r) => {
                duration_ms += r.duration_ms;
                if r.exit_code != 0 {
                    exit_code = r.exit_code;
                    note = Some(format!("script `{name}` exited {exit_code} on `{vm}`"));
                    break;
                }
            }
            Err(e) => {
                exit_code = -1;
                note = Some(format!("script `{name}` failed on `{vm}`: {e}"));
                break;
            }
        }
    }
    let status = if exit_code == 0 { TaskStatus::Ok } else { TaskStatus::Failed };
    (
        TaskResult {
            vm: vm.to_string(),
            index,
            script: t.script.clone(),
            status,
            exit_code: Some(exit_code),
            duration_ms,
        },
        note,
    )
}
