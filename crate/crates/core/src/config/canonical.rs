//! Canonical rendering of workflows.
//!
//! Two workflows with equal content must produce byte-identical documents,
//! because the workflow digest (and through it archive verification) hashes
//! these bytes. Frozen rules:
//!
//! - sections sorted lexicographically by full header name, one blank line
//!   between sections, LF endings, single trailing newline;
//! - keys sorted within each section; inline table keys sorted too;
//! - scalar defaults written out explicitly; unset options and empty lists
//!   omitted;
//! - `[workflow]` always carries `jobs = [...]`, which fixes execution
//!   order independently of section sorting;
//! - strings use a triple-quoted block when multi-line and safe to embed
//!   raw, otherwise one-line escaped form.

use std::fmt::Write as _;

use super::{validate_structure, Job, ScriptSource, TaskRef, Workflow};
use crate::digest::Digest;

/// Renders the canonical document. The workflow should already be
/// structurally valid; names that violate the identifier rule would
/// produce a document that cannot re-parse.
pub fn canonical_text(w: &Workflow) -> String {
    let mut sections: Vec<(String, String)> = Vec::new();

    for (name, c) in &w.collectors {
        let mut b = Body::new();
        b.kv("export", &quote(&c.export));
        b.kv("install", &quote(&c.install));
        b.kv("start", &quote(&c.start));
        b.kv("stop", &quote(&c.stop));
        b.kv("trace_outputs", &string_list(&c.trace_outputs));
        sections.push((format!("collector.{name}"), b.text));
    }

    for job in &w.jobs {
        sections.push((format!("job.{}", job.name), job_body(job)));
    }

    for (i, t) in w.publish_targets.iter().enumerate() {
        let mut b = Body::new();
        b.kv("auth_env", &quote(&t.auth_env));
        b.kv("kind", &quote(t.kind.as_str()));
        b.kv("lfs_threshold_bytes", &t.lfs_threshold_bytes.to_string());
        b.kv("locator", &quote(&t.locator));
        sections.push((format!("publish.{i}"), b.text));
    }

    for (name, s) in &w.scripts {
        let mut b = Body::new();
        match &s.source {
            ScriptSource::File(path) => b.kv("file", &quote(path)),
            ScriptSource::Inline(body) => b.kv("inline", &quote(body)),
        }
        b.kv("interpreter", &quote(s.interpreter.as_str()));
        sections.push((format!("script.{name}"), b.text));
    }

    for (name, vm) in &w.vms {
        let mut b = Body::new();
        if !vm.config_scripts.is_empty() {
            b.kv("config_scripts", &string_list(&vm.config_scripts));
        }
        b.kv("cpus", &vm.cpus.to_string());
        b.kv("image", &quote(&vm.image.locator()));
        if let Some(ip) = &vm.ip {
            b.kv("ip", &quote(ip));
        }
        b.kv("memory_mb", &vm.memory_mb.to_string());
        sections.push((format!("vm.{name}"), b.text));
    }

    {
        let mut b = Body::new();
        let job_names: Vec<String> = w.jobs.iter().map(|j| j.name.clone()).collect();
        b.kv("jobs", &string_list(&job_names));
        b.kv("mode", &quote(w.mode.as_str()));
        b.kv("name", &quote(&w.name));
        b.kv("seed", &w.seed.to_string());
        sections.push(("workflow".to_string(), b.text));
    }

    sections.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for (i, (name, body)) in sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "[{name}]");
        out.push_str(body);
    }
    out
}

/// SHA-256 of the canonical document. Fails when the workflow has
/// structural errors, since a digest of an unrunnable document would be
/// misleading.
pub fn canonical_digest(w: &Workflow) -> Result<Digest, Vec<super::Diagnostic>> {
    let diags = validate_structure(w);
    if diags.iter().any(|d| d.severity == super::Severity::Error) {
        return Err(diags);
    }
    Ok(Digest::of_bytes(canonical_text(w).as_bytes()))
}

fn job_body(job: &Job) -> String {
    let mut b = Body::new();
    if let Some(c) = &job.collector {
        b.kv("collector", &quote(c));
    }
    if !job.inputs.is_empty() {
        let items: Vec<String> = job
            .inputs
            .iter()
            .map(|i| {
                format!(
                    "{{ local = {}, remote = {}, vm = {} }}",
                    quote(&i.local),
                    quote(&i.remote),
                    quote(&i.vm)
                )
            })
            .collect();
        b.kv("inputs", &list(&items));
    }
    b.kv("iterations", &job.iterations.to_string());
    b.kv("on_failure", &quote(job.on_failure.as_str()));
    if !job.order.is_empty() {
        let items: Vec<String> = job
            .order
            .iter()
            .map(|e| quote(&format!("{} -> {}", e.before, e.after)))
            .collect();
        b.kv("order", &list(&items));
    }
    if !job.outputs.is_empty() {
        let items: Vec<String> = job
            .outputs
            .iter()
            .map(|o| {
                format!(
                    "{{ name = {}, remote = {}, vm = {} }}",
                    quote(&o.name),
                    quote(&o.remote),
                    quote(&o.vm)
                )
            })
            .collect();
        b.kv("outputs", &list(&items));
    }
    let vm_lists: Vec<String> = job
        .tasks
        .iter()
        .map(|(vm, refs)| {
            let items: Vec<String> = refs.iter().map(task_ref_text).collect();
            format!("{vm} = {}", list(&items))
        })
        .collect();
    b.kv("tasks", &format!("{{ {} }}", vm_lists.join(", ")));
    b.text
}

fn task_ref_text(t: &TaskRef) -> String {
    if t.before_hook.is_none() && t.after_hook.is_none() && t.env.is_empty() {
        return quote(&t.script);
    }
    let mut parts: Vec<String> = Vec::new();
    if let Some(h) = &t.after_hook {
        parts.push(format!("after_hook = {}", quote(h)));
    }
    if let Some(h) = &t.before_hook {
        parts.push(format!("before_hook = {}", quote(h)));
    }
    if !t.env.is_empty() {
        let pairs: Vec<String> =
            t.env.iter().map(|(k, v)| format!("{k} = {}", quote(v))).collect();
        parts.push(format!("env = {{ {} }}", pairs.join(", ")));
    }
    parts.push(format!("script = {}", quote(&t.script)));
    format!("{{ {} }}", parts.join(", "))
}

struct Body {
    text: String,
}

impl Body {
    fn new() -> Body {
        Body { text: String::new() }
    }

    fn kv(&mut self, key: &str, rendered: &str) {
        let _ = writeln!(self.text, "{key} = {rendered}");
    }
}

fn list(items: &[String]) -> String {
    format!("[{}]", items.join(", "))
}

fn string_list(items: &[String]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| quote(s)).collect();
    list(&quoted)
}

/// Chooses the string form. Multi-line bodies go in a raw triple-quoted
/// block unless the raw bytes could confuse the block scanner (embedded
/// `"""`, trailing quote) or survive CRLF normalization poorly (`\r`).
fn quote(s: &str) -> String {
    let block_safe =
        s.contains('\n') && !s.contains("\"\"\"") && !s.ends_with('"') && !s.contains('\r');
    if block_safe {
        return format!("\"\"\"\n{s}\"\"\"");
    }
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
