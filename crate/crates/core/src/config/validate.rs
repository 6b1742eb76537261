//! Structural and referential checks on parsed workflows.
//!
//! Parsing guarantees shape; validation guarantees the workflow can
//! actually run: every reference resolves, ordering constraints are
//! acyclic, and paths are safe to stage and archive. Checks that need the
//! filesystem (script and input files) run only in [`validate_workflow`],
//! so digests can be computed on documents alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use super::{is_valid_name, Job, TaskId, Workflow, SYNTHETIC_COLLECTOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        })
    }
}

/// One finding, addressed by a dotted path into the workflow such as
/// `jobs.attack.tasks.client[2]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn error(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
        Diagnostic { severity: Severity::Error, path: path.into(), message: message.into() }
    }

    fn warning(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
        Diagnostic { severity: Severity::Warning, path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.severity, self.path, self.message)
    }
}

/// True when any diagnostic is an error.
pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

/// A local path that is safe to resolve against the workflow directory and
/// to embed in an archive: relative, normal components only.
fn check_local_path(path: &str, at: &str, out: &mut Vec<Diagnostic>) {
    if path.is_empty() {
        out.push(Diagnostic::error(at, "path must not be empty"));
        return;
    }
    if path.starts_with('/') || path.contains('\\') {
        out.push(Diagnostic::error(
            at,
            format!("`{path}` must be relative to the workflow file, with `/` separators"),
        ));
        return;
    }
    if path.split('/').any(|c| c == ".." || c == "." || c.is_empty()) {
        out.push(Diagnostic::error(
            at,
            format!("`{path}` must not contain `.`, `..`, or empty components"),
        ));
    }
}

fn check_remote_path(path: &str, at: &str, out: &mut Vec<Diagnostic>) {
    if !path.starts_with('/') {
        out.push(Diagnostic::error(at, format!("machine path `{path}` must be absolute")));
    }
}

fn check_archive_name(name: &str, at: &str, out: &mut Vec<Diagnostic>) {
    let bad = name.is_empty()
        || name == "."
        || name == ".."
        || name.contains('/')
        || name.contains('\\')
        || name.chars().any(char::is_whitespace);
    if bad {
        out.push(Diagnostic::error(
            at,
            format!("`{name}` is not a plain file name (no separators or whitespace)"),
        ));
    }
}

/// Checks everything that does not require the filesystem.
pub fn validate_structure(w: &Workflow) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    if !is_valid_name(&w.name) {
        out.push(Diagnostic::error(
            "name",
            format!("workflow name `{}` must be an identifier (it becomes the archive file name)", w.name),
        ));
    }
    if w.jobs.is_empty() {
        out.push(Diagnostic::error("jobs", "workflow declares no jobs"));
    }

    let mut referenced_scripts: BTreeSet<&str> = BTreeSet::new();
    let mut referenced_vms: BTreeSet<&str> = BTreeSet::new();

    for (name, vm) in &w.vms {
        let at = format!("vms.{name}");
        if vm.cpus == 0 {
            out.push(Diagnostic::error(format!("{at}.cpus"), "cpus must be at least 1"));
        }
        if vm.memory_mb == 0 {
            out.push(Diagnostic::error(format!("{at}.memory_mb"), "memory_mb must be at least 1"));
        }
        if let Some(ip) = &vm.ip {
            let quad_ok = ip.split('.').count() == 4
                && ip.split('.').all(|p| p.parse::<u8>().is_ok());
            if !quad_ok {
                out.push(Diagnostic::warning(
                    format!("{at}.ip"),
                    format!("`{ip}` does not look like an IPv4 address"),
                ));
            }
        }
        for (i, s) in vm.config_scripts.iter().enumerate() {
            referenced_scripts.insert(s);
            if !w.scripts.contains_key(s) {
                out.push(Diagnostic::error(
                    format!("{at}.config_scripts[{i}]"),
                    format!("unknown script `{s}`"),
                ));
            }
        }
    }

    for (name, s) in &w.scripts {
        if let super::ScriptSource::File(path) = &s.source {
            check_local_path(path, &format!("scripts.{name}.file"), &mut out);
        }
    }

    for (name, c) in &w.collectors {
        let at = format!("collectors.{name}");
        if name == SYNTHETIC_COLLECTOR {
            out.push(Diagnostic::error(
                &at,
                format!("collector name `{SYNTHETIC_COLLECTOR}` is reserved for the built-in collector"),
            ));
        }
        for (field, script) in [
            ("install", &c.install),
            ("start", &c.start),
            ("stop", &c.stop),
            ("export", &c.export),
        ] {
            referenced_scripts.insert(script);
            if !w.scripts.contains_key(script.as_str()) {
                out.push(Diagnostic::error(
                    format!("{at}.{field}"),
                    format!("unknown script `{script}`"),
                ));
            }
        }
        if c.trace_outputs.is_empty() {
            out.push(Diagnostic::error(
                format!("{at}.trace_outputs"),
                "collector declares no trace outputs",
            ));
        }
        for (i, p) in c.trace_outputs.iter().enumerate() {
            check_remote_path(p, &format!("{at}.trace_outputs[{i}]"), &mut out);
        }
    }

    for job in &w.jobs {
        validate_job(w, job, &mut referenced_scripts, &mut referenced_vms, &mut out);
    }

    for (i, t) in w.publish_targets.iter().enumerate() {
        let at = format!("publish[{i}]");
        if t.locator.is_empty() {
            out.push(Diagnostic::error(format!("{at}.locator"), "locator must not be empty"));
        }
        match t.kind {
            super::TargetKind::Dataverse => {
                if !t.locator.contains('#') {
                    out.push(Diagnostic::error(
                        format!("{at}.locator"),
                        "dataverse locator must be `<server-url>#<collection>`",
                    ));
                }
            }
            super::TargetKind::Github => {
                let urlish = t.locator.contains("://") || t.locator.starts_with("git@");
                if !t.locator.is_empty() && !urlish {
                    out.push(Diagnostic::warning(
                        format!("{at}.locator"),
                        format!("`{}` does not look like a git remote URL", t.locator),
                    ));
                }
            }
        }
        let env_ok = {
            let mut chars = t.auth_env.chars();
            matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
                && t.auth_env.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        };
        if !env_ok {
            out.push(Diagnostic::error(
                format!("{at}.auth_env"),
                format!("`{}` is not a valid environment variable name", t.auth_env),
            ));
        }
    }

    for name in w.vms.keys() {
        if !referenced_vms.contains(name.as_str()) {
            out.push(Diagnostic::warning(
                format!("vms.{name}"),
                "vm is not used by any job",
            ));
        }
    }
    for name in w.scripts.keys() {
        if !referenced_scripts.contains(name.as_str()) {
            out.push(Diagnostic::warning(
                format!("scripts.{name}"),
                "script is not referenced anywhere",
            ));
        }
    }

    out
}

fn validate_job<'w>(
    w: &'w Workflow,
    job: &'w Job,
    referenced_scripts: &mut BTreeSet<&'w str>,
    referenced_vms: &mut BTreeSet<&'w str>,
    out: &mut Vec<Diagnostic>,
) {
    let at = format!("jobs.{}", job.name);
    if job.iterations == 0 {
        out.push(Diagnostic::error(format!("{at}.iterations"), "iterations must be at least 1"));
    }
    if job.tasks.is_empty() {
        out.push(Diagnostic::error(format!("{at}.tasks"), "job assigns no tasks to any vm"));
    }

    for (vm, refs) in &job.tasks {
        referenced_vms.insert(vm);
        let vat = format!("{at}.tasks.{vm}");
        if !w.vms.contains_key(vm) {
            out.push(Diagnostic::error(&vat, format!("unknown vm `{vm}`")));
        }
        if refs.is_empty() {
            out.push(Diagnostic::error(&vat, "task list must not be empty"));
        }
        for (i, t) in refs.iter().enumerate() {
            for script in [Some(&t.script), t.before_hook.as_ref(), t.after_hook.as_ref()]
                .into_iter()
                .flatten()
            {
                referenced_scripts.insert(script);
                if !w.scripts.contains_key(script.as_str()) {
                    out.push(Diagnostic::error(
                        format!("{vat}[{i}]"),
                        format!("unknown script `{script}`"),
                    ));
                }
            }
        }
    }

    for (i, input) in job.inputs.iter().enumerate() {
        let iat = format!("{at}.inputs[{i}]");
        check_local_path(&input.local, &format!("{iat}.local"), out);
        check_remote_path(&input.remote, &format!("{iat}.remote"), out);
        if !job.tasks.contains_key(&input.vm) {
            out.push(Diagnostic::error(
                format!("{iat}.vm"),
                format!("input targets vm `{}` which hosts no tasks in this job", input.vm),
            ));
        }
    }
    let mut input_dests: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (i, input) in job.inputs.iter().enumerate() {
        if !input_dests.insert((&input.vm, &input.remote)) {
            out.push(Diagnostic::warning(
                format!("{at}.inputs[{i}]"),
                format!("`{}` on vm `{}` is staged more than once", input.remote, input.vm),
            ));
        }
    }

    let mut output_names: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (i, output) in job.outputs.iter().enumerate() {
        let oat = format!("{at}.outputs[{i}]");
        check_remote_path(&output.remote, &format!("{oat}.remote"), out);
        check_archive_name(&output.name, &format!("{oat}.name"), out);
        if !job.tasks.contains_key(&output.vm) {
            out.push(Diagnostic::error(
                format!("{oat}.vm"),
                format!("output expects vm `{}` which hosts no tasks in this job", output.vm),
            ));
        }
        if !output_names.insert((&output.vm, &output.name)) {
            out.push(Diagnostic::error(
                format!("{oat}.name"),
                format!("duplicate output name `{}` for vm `{}`", output.name, output.vm),
            ));
        }
    }

    let mut edges_ok = true;
    for (i, edge) in job.order.iter().enumerate() {
        let eat = format!("{at}.order[{i}]");
        for id in [&edge.before, &edge.after] {
            match job.tasks.get(&id.vm) {
                None => {
                    out.push(Diagnostic::error(
                        &eat,
                        format!("`{id}` names vm `{}` which hosts no tasks in this job", id.vm),
                    ));
                    edges_ok = false;
                }
                Some(refs) if id.index >= refs.len() => {
                    out.push(Diagnostic::error(
                        &eat,
                        format!("`{id}` is out of range; vm `{}` has {} task(s)", id.vm, refs.len()),
                    ));
                    edges_ok = false;
                }
                Some(_) => {}
            }
        }
        if edge.before == edge.after {
            out.push(Diagnostic::error(&eat, format!("`{}` depends on itself", edge.before)));
            edges_ok = false;
        }
    }

    if edges_ok && has_cycle(job) {
        out.push(Diagnostic::error(
            format!("{at}.order"),
            "ordering constraints form a cycle with the per-vm task sequence",
        ));
    }

    if let Some(c) = &job.collector {
        if c != SYNTHETIC_COLLECTOR && !w.collectors.contains_key(c) {
            out.push(Diagnostic::error(
                format!("{at}.collector"),
                format!("unknown collector `{c}`"),
            ));
        }
    }
}

/// Cycle check over the union of per-vm sequences and cross edges.
fn has_cycle(job: &Job) -> bool {
    let mut nodes: Vec<TaskId> = Vec::new();
    let mut index: BTreeMap<TaskId, usize> = BTreeMap::new();
    for (vm, refs) in &job.tasks {
        for i in 0..refs.len() {
            let id = TaskId { vm: vm.clone(), index: i };
            index.insert(id.clone(), nodes.len());
            nodes.push(id);
        }
    }
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    let mut indegree: Vec<usize> = vec![0; nodes.len()];
    let add = |succ: &mut Vec<Vec<usize>>, indegree: &mut Vec<usize>, a: usize, b: usize| {
        succ[a].push(b);
        indegree[b] += 1;
    };
    for (vm, refs) in &job.tasks {
        for i in 1..refs.len() {
            let a = index[&TaskId { vm: vm.clone(), index: i - 1 }];
            let b = index[&TaskId { vm: vm.clone(), index: i }];
            add(&mut succ, &mut indegree, a, b);
        }
    }
    for edge in &job.order {
        let (Some(&a), Some(&b)) = (index.get(&edge.before), index.get(&edge.after)) else {
            continue;
        };
        add(&mut succ, &mut indegree, a, b);
    }
    let mut ready: Vec<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(n) = ready.pop() {
        seen += 1;
        for &m in &succ[n] {
            indegree[m] -= 1;
            if indegree[m] == 0 {
                ready.push(m);
            }
        }
    }
    seen != nodes.len()
}

/// Full validation: structure plus filesystem checks relative to the
/// directory containing the workflow file.
pub fn validate_workflow(w: &Workflow, base_dir: &Path) -> Vec<Diagnostic> {
    let mut out = validate_structure(w);

    for (name, s) in &w.scripts {
        if let super::ScriptSource::File(path) = &s.source {
            if path_is_clean(path) && !base_dir.join(path).is_file() {
                out.push(Diagnostic::error(
                    format!("scripts.{name}.file"),
                    format!("script file not found: {path}"),
                ));
            }
        }
    }
    for job in &w.jobs {
        for (i, input) in job.inputs.iter().enumerate() {
            if path_is_clean(&input.local) && !base_dir.join(&input.local).is_file() {
                out.push(Diagnostic::error(
                    format!("jobs.{}.inputs[{i}].local", job.name),
                    format!("input file not found: {}", input.local),
                ));
            }
        }
    }
    out
}

fn path_is_clean(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && path.split('/').all(|c| c != ".." && c != "." && !c.is_empty())
}
