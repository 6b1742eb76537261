//! Audit/provenance capture around workload tasks.
//!
//! A collector is installed and started on every task-hosting machine
//! before tasks run, stopped once they finish, and exported last. Real
//! capture frameworks attach as four user-declared adapter scripts
//! (install, start, stop, export) plus a list of trace paths to harvest.
//! The built-in `synthetic` collector needs nothing on the machine: it
//! serializes the backend's own event log as the trace.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Interpreter;
use crate::digest::Digest;
use crate::provider::{Event, EventKind, ExecResult, MachineHandle, ProviderError, ResolvedScript};

/// Remote path where the synthetic collector leaves its trace.
pub const SYNTHETIC_TRACE_PATH: &str = "/xanthus/trace/events.log";

/// One harvested trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFile {
    /// Machine the trace came from.
    pub vm: String,
    /// Remote path it was harvested from.
    pub source: String,
    /// Where it landed on the host.
    pub local: PathBuf,
    pub sha256: Digest,
    pub size: u64,
    /// Newline count; equals the event count for synthetic traces.
    pub lines: u64,
}

/// Harvest result: what was collected plus what silently went missing.
/// Degradations (absent declared paths, a nonzero export script) do not
/// fail the iteration; transport failures do.
#[derive(Debug, Default)]
pub struct ExportOutcome {
    pub traces: Vec<TraceFile>,
    pub degraded: Vec<String>,
}

/// A resolved collector, ready to drive on machines.
// One instance exists per running job; the variant size gap is irrelevant.
#[allow(clippy::large_enum_variant)]
pub enum Collector {
    /// Built-in: exports the backend event log, no machine-side setup.
    Synthetic,
    /// User-declared capture framework.
    Adapter {
        name: String,
        install: ResolvedScript,
        start: ResolvedScript,
        stop: ResolvedScript,
        export: ResolvedScript,
        trace_outputs: Vec<String>,
    },
}

impl Collector {
    pub fn name(&self) -> &str {
        match self {
            Collector::Synthetic => crate::config::SYNTHETIC_COLLECTOR,
            Collector::Adapter { name, .. } => name,
        }
    }

    pub fn install(&self, h: &mut MachineHandle) -> Result<ExecResult, ProviderError> {
        self.run_phase(h, "install")
    }

    pub fn start(&self, h: &mut MachineHandle) -> Result<ExecResult, ProviderError> {
        self.run_phase(h, "start")
    }

    pub fn stop(&self, h: &mut MachineHandle) -> Result<ExecResult, ProviderError> {
        self.run_phase(h, "stop")
    }

    fn run_phase(&self, h: &mut MachineHandle, phase: &str) -> Result<ExecResult, ProviderError> {
        let script = match self {
            Collector::Synthetic => noop_script(phase),
            Collector::Adapter { install, start, stop, .. } => match phase {
                "install" => install.clone(),
                "start" => start.clone(),
                _ => stop.clone(),
            },
        };
        h.exec_script(&script, &BTreeMap::new())
    }

    /// Collects trace files into `dest_dir`. The synthetic collector first
    /// snapshots the machine's event log and writes it to
    /// [`SYNTHETIC_TRACE_PATH`]; an adapter runs its export script. Every
    /// declared path is then staged out and digested.
    pub fn export(
        &self,
        h: &mut MachineHandle,
        dest_dir: &Path,
    ) -> Result<ExportOutcome, ProviderError> {
        std::fs::create_dir_all(dest_dir)?;
        let mut outcome = ExportOutcome::default();
        let sources: Vec<String> = match self {
            Collector::Synthetic => {
                // Snapshot before writing so the trace cannot contain its
                // own harvest; write_remote_file records no event.
                let rendered = render_event_log(h.events());
                h.write_remote_file(SYNTHETIC_TRACE_PATH, rendered.as_bytes())?;
                vec![SYNTHETIC_TRACE_PATH.to_string()]
            }
            Collector::Adapter { export, trace_outputs, .. } => {
                let result = h.exec_script(export, &BTreeMap::new())?;
                if result.exit_code != 0 {
                    outcome.degraded.push(format!(
                        "collector export script `{}` exited {} on `{}`",
                        export.name,
                        result.exit_code,
                        h.vm_name()
                    ));
                }
                trace_outputs.clone()
            }
        };

        let mut used = BTreeSet::new();
        for source in &sources {
            let base = source.rsplit('/').next().unwrap_or(source);
            let local = dest_dir.join(unique_name(&mut used, base));
            match h.stage_out(source, &local) {
                Ok(_) => {
                    let bytes = std::fs::read(&local)?;
                    outcome.traces.push(TraceFile {
                        vm: h.vm_name().to_string(),
                        source: source.clone(),
                        local,
                        sha256: Digest::of_bytes(&bytes),
                        size: bytes.len() as u64,
                        lines: bytes.iter().filter(|&&b| b == b'\n').count() as u64,
                    });
                }
                Err(ProviderError::MissingRemoteFile { .. }) => {
                    outcome.degraded.push(format!(
                        "declared trace `{source}` missing on `{}`",
                        h.vm_name()
                    ));
                }
                Err(other) => return Err(other),
            }
        }
        Ok(outcome)
    }
}

/// The synthetic lifecycle runs an empty directive script so the machine
/// log still marks the phase boundary (one `exec … invoke` event).
fn noop_script(phase: &str) -> ResolvedScript {
    ResolvedScript {
        name: format!("synthetic-{phase}"),
        body: String::new(),
        interpreter: Interpreter::CollectorDirective,
    }
}

fn unique_name(used: &mut BTreeSet<String>, base: &str) -> String {
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

/// Serializes an event log, one `«seq» «kind» «subject» «detail»` line per
/// event. Subjects never contain whitespace; details are escaped so a line
/// is always one event.
pub fn render_event_log(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.seq.to_string());
        out.push(' ');
        out.push_str(e.kind.as_str());
        out.push(' ');
        out.push_str(&e.subject);
        if !e.detail.is_empty() {
            out.push(' ');
            out.push_str(&escape_detail(&e.detail));
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`render_event_log`]. Errors carry the offending line number.
pub fn parse_event_log(text: &str) -> Result<Vec<Event>, String> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |what: &str| format!("line {}: {what}", i + 1);
        if line.is_empty() {
            return Err(bad("empty line"));
        }
        let mut parts = line.splitn(4, ' ');
        let seq = parts
            .next()
            .unwrap()
            .parse::<u64>()
            .map_err(|_| bad("sequence number is not an unsigned integer"))?;
        let kind_token = parts.next().ok_or_else(|| bad("missing event kind"))?;
        let kind = EventKind::from_name(kind_token)
            .ok_or_else(|| bad(&format!("unknown event kind `{kind_token}`")))?;
        let subject = parts.next().ok_or_else(|| bad("missing subject"))?;
        if subject.is_empty() {
            return Err(bad("empty subject"));
        }
        let detail = unescape_detail(parts.next().unwrap_or("")).map_err(|e| bad(&e))?;
        events.push(Event { seq, kind, subject: subject.to_string(), detail });
    }
    Ok(events)
}

fn escape_detail(detail: &str) -> String {
    let mut out = String::with_capacity(detail.len());
    for c in detail.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_detail(escaped: &str) -> Result<String, String> {
    let mut out = String::with_capacity(escaped.len());
    let mut chars = escaped.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => return Err(format!("bad escape `\\{other}` in detail")),
            None => return Err("dangling backslash in detail".to_string()),
        }
    }
    Ok(out)
}
