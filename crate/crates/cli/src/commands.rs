//! Command implementations behind the argument parser.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use xanthus_core::archive::{
    build_archive, extract_for_replay, read_embedded_workflow, read_manifest, verify_archive,
    ArchiveError, ArchiveOptions, Manifest,
};
use xanthus_core::config::{
    has_errors, parse_workflow, validate_workflow, Diagnostic, Mode, Severity, Workflow,
    SYNTHETIC_COLLECTOR,
};
use xanthus_core::executor::{
    generate_run_id, run_workflow, ExecError, IterationStatus, RunRecord, RECORD_FILE,
};
use xanthus_core::provider::Provider;
use xanthus_core::publish::{execute_publish, plan_publish, ActionOutcome, SystemTransport};
use xanthus_core::Digest;

use crate::{Failure, OutputFormat};

/// Exclusive ownership of a workdir for one invocation: the lock file
/// holds the owner's pid and disappears when the guard drops.
struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    fn acquire(workdir: &Path) -> Result<WorkdirLock, Failure> {
        fs::create_dir_all(workdir).map_err(|e| {
            Failure::execution(format!("cannot create workdir `{}`: {e}", workdir.display()))
        })?;
        let path = workdir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = write!(file, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Failure::execution(format!(
                    "workdir `{}` is locked by another invocation (delete `{}` if that \
                     process is gone)",
                    workdir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(Failure::execution(format!("cannot lock workdir: {e}"))),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

const STARTER: &str = r#"# Starter workflow. One declarative document describes the experiment:
# machines, scripts, jobs, and where the packaged results go.

[workflow]
name = "starter"
seed = 1
# mock runs offline; other modes: local, managed-vm, cloud.
mode = "mock"

[vm.host]
image = "debian/bookworm64@12.2"
cpus = 1
memory_mb = 512

# Scripts hold the workload. {job}, {iter}, {vm}, and {seed} are
# substituted before execution.
[script.greet]
inline = """
#xanthus: write /out/greeting.txt hello-{job}-{iter}
"""

[job.demo]
iterations = 1
tasks = { host = ["greet"] }
outputs = [{ name = "greeting.txt", remote = "/out/greeting.txt", vm = "host" }]

# Declare publish targets when results should leave this machine:
# [publish.0]
# kind = "github"
# locator = "https://github.com/you/results"
# auth_env = "XANTHUS_GITHUB_TOKEN"
"#;

pub fn init(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        return Err(Failure::validation(format!(
            "`{}` already exists; refusing to overwrite",
            path.display()
        )));
    }
    fs::write(path, STARTER)
        .map_err(|e| Failure::execution(format!("cannot write `{}`: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_workflow(path: &Path) -> Result<(Workflow, PathBuf), Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("cannot read `{}`: {e}", path.display())))?;
    let w = parse_workflow(&text)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let base_dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok((w, base_dir))
}

fn print_diagnostics(diags: &[Diagnostic]) {
    for d in diags {
        let tag = match d.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        eprintln!("{tag}: {}: {}", d.path, d.message);
    }
}

pub fn validate(workflow: &Path) -> Result<(), Failure> {
    let (w, base_dir) = load_workflow(workflow)?;
    let diags = validate_workflow(&w, &base_dir);
    print_diagnostics(&diags);
    if has_errors(&diags) {
        return Err(Failure::validation(format!("`{}` does not validate", workflow.display())));
    }
    println!(
        "ok: {} machines, {} scripts, {} jobs",
        w.vms.len(),
        w.scripts.len(),
        w.jobs.len()
    );
    Ok(())
}

fn parse_mode(s: &str) -> Result<Mode, Failure> {
    Mode::from_name(s).ok_or_else(|| {
        Failure::validation(format!("unknown mode `{s}` (mock, local, managed-vm, cloud)"))
    })
}

fn filter_jobs(w: &mut Workflow, filter: &str) -> Result<(), Failure> {
    let wanted: Vec<&str> =
        filter.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if wanted.is_empty() {
        return Err(Failure::validation("--jobs selected nothing"));
    }
    for name in &wanted {
        if !w.jobs.iter().any(|j| j.name == *name) {
            return Err(Failure::validation(format!(
                "job `{name}` is not declared in the workflow"
            )));
        }
    }
    w.jobs.retain(|j| wanted.contains(&j.name.as_str()));
    Ok(())
}

pub struct RunArgs {
    pub workflow: PathBuf,
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub workdir: PathBuf,
    pub jobs: Option<String>,
    pub format: OutputFormat,
}

pub fn run(args: RunArgs) -> Result<(), Failure> {
    let (mut w, base_dir) = load_workflow(&args.workflow)?;
    if let Some(mode) = &args.mode {
        w.mode = parse_mode(mode)?;
    }
    if let Some(seed) = args.seed {
        w.seed = seed;
    }
    if let Some(filter) = &args.jobs {
        filter_jobs(&mut w, filter)?;
    }
    let diags = validate_workflow(&w, &base_dir);
    print_diagnostics(&diags);
    if has_errors(&diags) {
        return Err(Failure::validation(format!(
            "`{}` does not validate",
            args.workflow.display()
        )));
    }

    let _lock = WorkdirLock::acquire(&args.workdir)?;
    let run_id = generate_run_id();
    let (record, built, hits) = execute_run(&w, &base_dir, &args.workdir, &run_id)?;
    report_run(&record, &args.workdir.join(&record.run_id), built, hits, args.format)
}

/// Runs a validated workflow, returning the record plus the image cache
/// delta (builds, hits) this invocation caused.
fn execute_run(
    w: &Workflow,
    base_dir: &Path,
    workdir: &Path,
    run_id: &str,
) -> Result<(RunRecord, u64, u64), Failure> {
    let provider = Provider::new(
        w.mode,
        &workdir.join("cache"),
        &workdir.join("machines"),
        base_dir,
    )
    .map_err(|e| Failure::execution(e.to_string()))?;
    let before = provider.cache_stats();
    let outcome = run_workflow(w, &provider, base_dir, workdir, run_id);
    let after = provider.cache_stats();
    let (built, hits) = (after.builds - before.builds, after.hits - before.hits);
    match outcome {
        Ok(record) => Ok((record, built, hits)),
        Err(ExecError::Invalid { summary }) => Err(Failure::validation(summary)),
        Err(e) => {
            let run_dir = workdir.join(run_id);
            let hint = if run_dir.join(RECORD_FILE).is_file() {
                format!("; partial record at `{}`", run_dir.display())
            } else {
                String::new()
            };
            Err(Failure::execution(format!("{e}{hint}")))
        }
    }
}

fn record_is_clean(record: &RunRecord) -> bool {
    record.job_results.iter().all(|jr| {
        !jr.truncated && jr.iterations.iter().all(|it| it.status == IterationStatus::Ok)
    })
}

fn run_report(
    record: &RunRecord,
    run_dir: &Path,
    built: u64,
    hits: u64,
    ok: bool,
) -> serde_json::Value {
    json!({
        "run_id": record.run_id,
        "workflow": record.workflow,
        "workflow_digest": record.workflow_digest,
        "mode": record.mode,
        "seed": record.seed,
        "run_dir": run_dir.display().to_string(),
        "images": { "built": built, "cache_hits": hits },
        "jobs": record.job_results.iter().map(|jr| json!({
            "job": jr.job,
            "planned_iterations": jr.planned_iterations,
            "truncated": jr.truncated,
            "iterations": jr.iterations.iter().map(|it| json!({
                "index": it.index,
                "status": it.status,
                "failure_phase": it.failure_phase,
            })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "ok": ok,
    })
}

fn report_run(
    record: &RunRecord,
    run_dir: &Path,
    built: u64,
    hits: u64,
    format: OutputFormat,
) -> Result<(), Failure> {
    let ok = record_is_clean(record);
    match format {
        OutputFormat::Json => println!(
            "{}",
            serde_json::to_string_pretty(&run_report(record, run_dir, built, hits, ok))
                .expect("report serializes")
        ),
        OutputFormat::Human => {
            println!("run {} (mode {}, seed {})", record.run_id, record.mode, record.seed);
            println!("  images: {built} built, {hits} cached");
            for jr in &record.job_results {
                for it in &jr.iterations {
                    match it.status {
                        IterationStatus::Ok => {
                            println!("  {} iteration {}: ok", jr.job, it.index)
                        }
                        IterationStatus::Failed => println!(
                            "  {} iteration {}: failed ({})",
                            jr.job,
                            it.index,
                            it.failure_phase.as_deref().unwrap_or("unknown")
                        ),
                    }
                }
                if jr.truncated {
                    println!(
                        "  {}: stopped after {} of {} iterations",
                        jr.job,
                        jr.iterations.len(),
                        jr.planned_iterations
                    );
                }
            }
            println!("record: {}", run_dir.join(RECORD_FILE).display());
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::execution(format!("run {} completed with failures", record.run_id)))
    }
}

pub struct PackageArgs {
    pub workdir: PathBuf,
    pub run_id: Option<String>,
    pub include_images: bool,
    pub out_dir: PathBuf,
}

pub fn package(args: PackageArgs) -> Result<(), Failure> {
    let _lock = WorkdirLock::acquire(&args.workdir)?;
    let run_dir = match &args.run_id {
        Some(id) => {
            let dir = args.workdir.join(id);
            if !dir.join(RECORD_FILE).is_file() {
                return Err(Failure::validation(format!(
                    "no record for run `{id}` under `{}`",
                    args.workdir.display()
                )));
            }
            dir
        }
        None => latest_run_dir(&args.workdir)?,
    };
    let record = RunRecord::load(&run_dir)
        .map_err(|e| Failure::validation(format!("cannot load the run record: {e}")))?;
    // Package from the frozen copy: the original file may have moved on.
    let text = fs::read_to_string(run_dir.join("workflow.xanthus")).map_err(|e| {
        Failure::validation(format!("cannot read the frozen workflow: {e}"))
    })?;
    let w = parse_workflow(&text)
        .map_err(|e| Failure::validation(format!("frozen workflow does not parse: {e}")))?;
    fs::create_dir_all(&args.out_dir).map_err(|e| {
        Failure::execution(format!("cannot create `{}`: {e}", args.out_dir.display()))
    })?;
    let opts = ArchiveOptions { include_images: args.include_images };
    let (path, manifest) = build_archive(&record, &w, &run_dir, &args.out_dir, &opts)
        .map_err(|e| Failure::execution(e.to_string()))?;
    println!("wrote {}", path.display());
    println!("determinism digest: {}", manifest.determinism_digest);
    Ok(())
}

/// Newest run directory in the workdir; run ids start with a UTC
/// timestamp, so name order is age order.
fn latest_run_dir(workdir: &Path) -> Result<PathBuf, Failure> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(workdir)
        .map_err(|e| {
            Failure::validation(format!("cannot read workdir `{}`: {e}", workdir.display()))
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(RECORD_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.pop().ok_or_else(|| {
        Failure::validation(format!("no recorded runs under `{}`", workdir.display()))
    })
}

pub fn verify(archive: &Path, format: OutputFormat) -> Result<(), Failure> {
    if !archive.is_file() {
        return Err(Failure::validation(format!("`{}` is not a file", archive.display())));
    }
    let report = verify_archive(archive).map_err(|e| Failure::verification(e.to_string()))?;
    match format {
        OutputFormat::Json => println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        ),
        OutputFormat::Human => {
            for m in &report.mismatches {
                println!(
                    "mismatch: {} (expected {}, found {})",
                    m.path,
                    m.expected.short(),
                    m.actual.short()
                );
            }
            for p in &report.missing {
                println!("missing: {p}");
            }
            for p in &report.extra {
                println!("extra: {p}");
            }
            for e in &report.manifest_schema_errors {
                println!("manifest: {e}");
            }
            if report.ok {
                println!("ok");
            }
        }
    }
    if report.ok {
        Ok(())
    } else {
        Err(Failure::verification(format!("`{}` fails verification", archive.display())))
    }
}

pub struct PublishArgs {
    pub archive: PathBuf,
    pub target: usize,
    pub dry_run: bool,
    pub format: OutputFormat,
}

pub fn publish(args: PublishArgs) -> Result<(), Failure> {
    if !args.archive.is_file() {
        return Err(Failure::validation(format!(
            "`{}` is not a file",
            args.archive.display()
        )));
    }
    // Never ship bytes that fail their own manifest.
    let check = verify_archive(&args.archive).map_err(|e| Failure::verification(e.to_string()))?;
    if !check.ok {
        return Err(Failure::verification(format!(
            "`{}` fails verification; refusing to publish",
            args.archive.display()
        )));
    }
    let manifest =
        read_manifest(&args.archive).map_err(|e| Failure::verification(e.to_string()))?;
    let w = read_embedded_workflow(&args.archive)
        .map_err(|e| Failure::verification(e.to_string()))?;
    if w.publish_targets.is_empty() {
        return Err(Failure::validation("the workflow declares no publish targets"));
    }
    let target = w.publish_targets.get(args.target).ok_or_else(|| {
        Failure::validation(format!(
            "target index {} out of range ({} targets declared)",
            args.target,
            w.publish_targets.len()
        ))
    })?;

    let plan = plan_publish(&args.archive, &manifest, target)
        .map_err(|e| Failure::publish(e.to_string()))?;
    let mut transport = SystemTransport::new();
    let report = execute_publish(&plan, &args.archive, &mut transport, args.dry_run)
        .map_err(|e| Failure::publish(e.to_string()))?;

    match args.format {
        OutputFormat::Json => println!(
            "{}",
            serde_json::to_string_pretty(&json!({ "plan": plan, "report": report }))
                .expect("report serializes")
        ),
        OutputFormat::Human => {
            println!("target {} ({} {})", args.target, target.kind.as_str(), target.locator);
            for s in &report.statuses {
                let outcome = match s.outcome {
                    ActionOutcome::Planned => "planned",
                    ActionOutcome::Done => "done",
                    ActionOutcome::Failed => "failed",
                    ActionOutcome::NotAttempted => "not attempted",
                };
                match &s.detail {
                    Some(d) => println!("  {outcome:<13} {} ({d})", s.action),
                    None => println!("  {outcome:<13} {}", s.action),
                }
            }
            if report.dry_run {
                println!("dry run: nothing executed");
            }
        }
    }
    if report.ok {
        Ok(())
    } else {
        Err(Failure::publish("publication failed".to_string()))
    }
}

pub struct ReplayArgs {
    pub archive: PathBuf,
    pub mode: Option<String>,
    pub collector: Option<String>,
    pub workdir: PathBuf,
    pub format: OutputFormat,
}

pub fn replay(args: ReplayArgs) -> Result<(), Failure> {
    if !args.archive.is_file() {
        return Err(Failure::validation(format!(
            "`{}` is not a file",
            args.archive.display()
        )));
    }
    let _lock = WorkdirLock::acquire(&args.workdir)?;
    let run_id = generate_run_id();
    let src_dir = args.workdir.join(format!("replay-src-{run_id}"));
    let (mut w, manifest) = match extract_for_replay(&args.archive, &src_dir) {
        Ok(pair) => pair,
        Err(ArchiveError::Tampered(report)) => {
            return Err(Failure::verification(format!(
                "`{}` fails verification ({} mismatches, {} missing, {} extra, {} manifest \
                 problems)",
                args.archive.display(),
                report.mismatches.len(),
                report.missing.len(),
                report.extra.len(),
                report.manifest_schema_errors.len()
            )));
        }
        Err(e @ ArchiveError::CorruptArchive(_)) => {
            return Err(Failure::verification(e.to_string()))
        }
        Err(e) => return Err(Failure::execution(e.to_string())),
    };
    if let Some(mode) = &args.mode {
        w.mode = parse_mode(mode)?;
    }
    if let Some(name) = &args.collector {
        set_collector(&mut w, name)?;
    }

    let outcome = execute_run(&w, &src_dir, &args.workdir, &run_id);
    // The run dir re-freezes workflow, scripts, and inputs; the extracted
    // materials have served their purpose.
    let _ = fs::remove_dir_all(&src_dir);
    let (record, _, _) = outcome?;
    let drift = drift_report(&manifest, &record);
    report_replay(&record, &args.workdir.join(&record.run_id), &drift, args.format)
}

fn set_collector(w: &mut Workflow, name: &str) -> Result<(), Failure> {
    if name != SYNTHETIC_COLLECTOR && !w.collectors.contains_key(name) {
        return Err(Failure::validation(format!(
            "collector `{name}` is not declared in the workflow"
        )));
    }
    for job in &mut w.jobs {
        job.collector = Some(name.to_string());
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct DriftEntry {
    path: String,
    expected: Digest,
    actual: Digest,
}

/// How a replay's outputs compare to the archive it came from.
#[derive(serde::Serialize)]
struct Drift {
    changed: Vec<DriftEntry>,
    missing: Vec<String>,
    unexpected: Vec<String>,
}

impl Drift {
    fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.missing.is_empty() && self.unexpected.is_empty()
    }
}

fn drift_report(manifest: &Manifest, record: &RunRecord) -> Drift {
    let mut expected: BTreeMap<&str, &Digest> = manifest
        .entries
        .iter()
        .filter(|e| e.path.starts_with("outputs/"))
        .map(|e| (e.path.as_str(), &e.sha256))
        .collect();
    let mut drift =
        Drift { changed: Vec::new(), missing: Vec::new(), unexpected: Vec::new() };
    for jr in &record.job_results {
        for it in &jr.iterations {
            for (key, file) in &it.outputs {
                let path = format!("outputs/{}/iter-{}/{}", jr.job, it.index, key);
                match expected.remove(path.as_str()) {
                    None => drift.unexpected.push(path),
                    Some(digest) if digest != &file.sha256 => drift.changed.push(DriftEntry {
                        path,
                        expected: digest.clone(),
                        actual: file.sha256.clone(),
                    }),
                    Some(_) => {}
                }
            }
        }
    }
    drift.missing = expected.keys().map(|s| s.to_string()).collect();
    drift
}

fn report_replay(
    record: &RunRecord,
    run_dir: &Path,
    drift: &Drift,
    format: OutputFormat,
) -> Result<(), Failure> {
    let run_ok = record_is_clean(record);
    match format {
        OutputFormat::Json => println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "run_id": record.run_id,
                "mode": record.mode,
                "seed": record.seed,
                "run_dir": run_dir.display().to_string(),
                "drift": drift,
                "ok": run_ok && drift.is_empty(),
            }))
            .expect("report serializes")
        ),
        OutputFormat::Human => {
            println!(
                "replay run {} (mode {}, seed {})",
                record.run_id, record.mode, record.seed
            );
            if drift.is_empty() {
                println!("drift: none");
            } else {
                for d in &drift.changed {
                    println!(
                        "drift changed: {} (expected {}, found {})",
                        d.path,
                        d.expected.short(),
                        d.actual.short()
                    );
                }
                for p in &drift.missing {
                    println!("drift missing: {p}");
                }
                for p in &drift.unexpected {
                    println!("drift unexpected: {p}");
                }
            }
            println!("record: {}", run_dir.join(RECORD_FILE).display());
        }
    }
    if !run_ok {
        return Err(Failure::execution(format!(
            "replay run {} completed with failures",
            record.run_id
        )));
    }
    if !drift.is_empty() {
        return Err(Failure::verification(
            "replay outputs drifted from the manifest".to_string(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_starter_workflow_parses_and_validates() {
        let w = parse_workflow(STARTER).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let diags = validate_workflow(&w, dir.path());
        assert!(!has_errors(&diags), "{diags:?}");
        assert_eq!(w.name, "starter");
        assert_eq!(w.jobs.len(), 1);
    }

    #[test]
    fn the_workdir_lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WorkdirLock::acquire(dir.path()).unwrap();
        let second = WorkdirLock::acquire(dir.path());
        assert!(second.is_err());
        drop(lock);
        assert!(WorkdirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn job_filters_must_name_declared_jobs() {
        let mut w = parse_workflow(STARTER).unwrap();
        assert!(filter_jobs(&mut w, "nonexistent").is_err());
        let mut w = parse_workflow(STARTER).unwrap();
        filter_jobs(&mut w, "demo").unwrap();
        assert_eq!(w.jobs.len(), 1);
    }
}
