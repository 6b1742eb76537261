//! In-memory backend.
//!
//! A mock machine is a `BTreeMap` filesystem plus an event log. Script
//! bodies are interpreted line by line:
//!
//! - `#xanthus: write <path> <template>` renders `{job}` `{iter}` `{vm}`
//!   `{seed}` and writes the result to the machine path (`write` event);
//! - `#xanthus: exit <code>` stops the script with that exit code;
//! - other `#...` lines are comments and are skipped;
//! - any other non-blank line records an `exec` event (`shell`
//!   interpreter only; the `collector-directive` interpreter ignores
//!   non-directive lines entirely);
//! - a script with no effective lines still records one `exec` event, so
//!   every execution is visible in the log.
//!
//! All of this is pure computation: durations are zero and output bytes
//! depend only on the workflow and seed.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{Interpreter, VmSpec};
use crate::digest::Digest;

use super::{
    render_template, EventKind, EventLog, ExecResult, ImageRef, LaunchCtx, ProviderError,
    ResolvedScript,
};

pub(crate) struct MockMachine {
    pub(crate) fs: BTreeMap<String, Vec<u8>>,
    pub(crate) log: EventLog,
}

/// Builds a mock image by running the config scripts against an empty
/// filesystem and freezing the result as `fs.json`.
pub(crate) fn build_image(
    target: &Path,
    key: &Digest,
    _spec: &VmSpec,
    scripts: &[ResolvedScript],
) -> Result<ImageRef, ProviderError> {
    let mut machine = MockMachine { fs: BTreeMap::new(), log: EventLog::default() };
    let ctx = LaunchCtx::build_phase();
    for script in scripts {
        let result = machine.exec(&ctx, super::BUILD_VM, script)?;
        if result.exit_code != 0 {
            return Err(ProviderError::BuildFailed {
                script: script.name.clone(),
                exit_code: result.exit_code,
                stderr_excerpt: super::excerpt(result.stderr.as_bytes(), 400),
            });
        }
    }
    let frozen: BTreeMap<&String, String> = machine
        .fs
        .iter()
        .map(|(path, bytes)| (path, String::from_utf8_lossy(bytes).into_owned()))
        .collect();
    let fs_path = target.join("fs.json");
    std::fs::write(&fs_path, crate::jsonutil::to_canonical_json(&frozen).expect("fs serializes"))?;
    Ok(ImageRef {
        cache_key: key.clone(),
        backend: "mock".to_string(),
        locator: fs_path.display().to_string(),
    })
}

pub(crate) fn launch(image: &ImageRef) -> Result<MockMachine, ProviderError> {
    let text = std::fs::read_to_string(&image.locator).map_err(|e| {
        ProviderError::LaunchFailed(format!("mock image `{}` unreadable: {e}", image.locator))
    })?;
    let frozen: BTreeMap<String, String> = serde_json::from_str(&text)
        .map_err(|e| ProviderError::LaunchFailed(format!("mock image corrupt: {e}")))?;
    Ok(MockMachine {
        fs: frozen.into_iter().map(|(p, c)| (p, c.into_bytes())).collect(),
        log: EventLog::default(),
    })
}

enum Directive<'a> {
    Write { path: &'a str, template: &'a str },
    Exit(i32),
    Unknown(&'a str),
}

/// `rest` is the line after `#xanthus:`.
fn parse_directive(rest: &str) -> Directive<'_> {
    let rest = rest.trim_start();
    if let Some(args) = rest.strip_prefix("write ") {
        let args = args.trim_start();
        let (path, template) = args.split_once(char::is_whitespace).unwrap_or((args, ""));
        return Directive::Write { path, template: template.trim_start() };
    }
    if let Some(code) = rest.strip_prefix("exit") {
        if let Ok(code) = code.trim().parse::<i32>() {
            return Directive::Exit(code);
        }
    }
    Directive::Unknown(rest)
}

impl MockMachine {
    pub(crate) fn exec(
        &mut self,
        ctx: &LaunchCtx,
        vm: &str,
        script: &ResolvedScript,
    ) -> Result<ExecResult, ProviderError> {
        let before = self.log.last_seq() as usize;
        let mut exit_code = 0;
        let mut stderr = String::new();
        let mut effective_lines = 0usize;

        'lines: for line in script.body.lines() {
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix("#xanthus:") {
                match parse_directive(rest) {
                    Directive::Write { path, template } => {
                        let content = render_template(template, ctx, vm);
                        self.log.append(EventKind::Write, path, content.clone());
                        self.fs.insert(path.to_string(), content.into_bytes());
                        effective_lines += 1;
                    }
                    Directive::Exit(code) => {
                        exit_code = code;
                        effective_lines += 1;
                        break 'lines;
                    }
                    Directive::Unknown(rest) => {
                        exit_code = 2;
                        stderr = format!("unknown directive: #xanthus: {rest}");
                        effective_lines += 1;
                        break 'lines;
                    }
                }
                continue;
            }
            if trimmed.starts_with('#') {
                continue; // plain comment
            }
            if script.interpreter == Interpreter::Shell {
                self.log.append(EventKind::Exec, &script.name, trimmed);
                effective_lines += 1;
            }
        }

        if effective_lines == 0 {
            self.log.append(EventKind::Exec, &script.name, "invoke");
        }
        let events = self.log.events()[before..].to_vec();
        Ok(ExecResult { exit_code, stdout: String::new(), stderr, duration_ms: 0, events })
    }

    pub(crate) fn stage_in(&mut self, local: &Path, remote: &str) -> Result<u64, ProviderError> {
        let bytes = std::fs::read(local)?;
        let n = bytes.len() as u64;
        self.log.append(EventKind::StageIn, remote, format!("{n} bytes"));
        self.fs.insert(remote.to_string(), bytes);
        Ok(n)
    }

    pub(crate) fn stage_out(
        &mut self,
        vm: &str,
        remote: &str,
        local: &Path,
    ) -> Result<u64, ProviderError> {
        let bytes = self
            .fs
            .get(remote)
            .ok_or_else(|| ProviderError::MissingRemoteFile {
                vm: vm.to_string(),
                path: remote.to_string(),
            })?
            .clone();
        if let Some(parent) = local.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(local, &bytes)?;
        let n = bytes.len() as u64;
        self.log.append(EventKind::StageOut, remote, format!("{n} bytes"));
        Ok(n)
    }

    pub(crate) fn write_file(&mut self, remote: &str, bytes: &[u8]) -> Result<(), ProviderError> {
        self.fs.insert(remote.to_string(), bytes.to_vec());
        Ok(())
    }

    pub(crate) fn destroy(&mut self) -> Result<(), ProviderError> {
        self.fs.clear();
        Ok(())
    }
}
