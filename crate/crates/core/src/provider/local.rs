//! Host-local backend: machines are throwaway directories.
//!
//! The machine's filesystem root is a directory; the absolute machine
//! path `/x/y` maps to `<root>/x/y`. Shell scripts run for real under
//! `sh` with the machine root as working directory and a scrubbed
//! environment (`PATH` plus the `XANTHUS_*` variables), so host secrets
//! never reach workloads. Scripts address machine paths either relative
//! to the working directory or via `$XANTHUS_MACHINE_ROOT`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use crate::config::{ImageSource, Interpreter, VmSpec};
use crate::digest::Digest;

use super::{
    map_remote_path, render_template, EventKind, EventLog, ExecResult, ImageRef, LaunchCtx,
    ProviderError, ResolvedScript,
};

pub(crate) struct LocalMachine {
    dir: PathBuf,
    root: PathBuf,
    script_serial: u64,
    pub(crate) log: EventLog,
}

/// Builds a template root by running config scripts in it. `path:` images
/// seed the template from a directory relative to the workflow file.
pub(crate) fn build_image(
    target: &Path,
    key: &Digest,
    base_dir: &Path,
    spec: &VmSpec,
    scripts: &[ResolvedScript],
) -> Result<ImageRef, ProviderError> {
    let root = target.join("rootfs");
    std::fs::create_dir_all(&root)?;
    if let ImageSource::LocalPath { path } = &spec.image {
        let template = base_dir.join(path);
        if !template.is_dir() {
            return Err(ProviderError::MissingLocalFile { path: template });
        }
        copy_tree(&template, &root)?;
    }

    let ctx = LaunchCtx::build_phase();
    let mut machine = LocalMachine {
        dir: target.to_path_buf(),
        root: root.clone(),
        script_serial: 0,
        log: EventLog::default(),
    };
    for script in scripts {
        let result = machine.exec(&ctx, super::BUILD_VM, script, &BTreeMap::new())?;
        if result.exit_code != 0 {
            return Err(ProviderError::BuildFailed {
                script: script.name.clone(),
                exit_code: result.exit_code,
                stderr_excerpt: super::excerpt(result.stderr.as_bytes(), 400),
            });
        }
    }
    Ok(ImageRef {
        cache_key: key.clone(),
        backend: "local".to_string(),
        locator: root.display().to_string(),
    })
}

pub(crate) fn launch(image: &ImageRef, dir: &Path) -> Result<LocalMachine, ProviderError> {
    let template = Path::new(&image.locator);
    if !template.is_dir() {
        return Err(ProviderError::LaunchFailed(format!(
            "image template `{}` is missing",
            image.locator
        )));
    }
    let root = dir.join("root");
    std::fs::create_dir_all(&root)?;
    copy_tree(template, &root)?;
    Ok(LocalMachine {
        dir: dir.to_path_buf(),
        root,
        script_serial: 0,
        log: EventLog::default(),
    })
}

impl LocalMachine {
    pub(crate) fn exec(
        &mut self,
        ctx: &LaunchCtx,
        vm: &str,
        script: &ResolvedScript,
        extra_env: &BTreeMap<String, String>,
    ) -> Result<ExecResult, ProviderError> {
        let before = self.log.last_seq() as usize;
        if script.interpreter == Interpreter::CollectorDirective {
            let mut result = self.exec_directives(ctx, vm, script)?;
            result.events = self.log.events()[before..].to_vec();
            return Ok(result);
        }

        self.script_serial += 1;
        let scripts_dir = self.dir.join("scripts");
        std::fs::create_dir_all(&scripts_dir)?;
        let script_path = scripts_dir.join(format!("{:03}-{}.sh", self.script_serial, script.name));
        std::fs::write(&script_path, &script.body)?;

        let started = Instant::now();
        let output = Command::new("sh")
            .arg(&script_path)
            .current_dir(&self.root)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("HOME", &self.root)
            .env("XANTHUS_MACHINE_ROOT", &self.root)
            .env("XANTHUS_RUN_ID", &ctx.run_id)
            .env("XANTHUS_JOB", &ctx.job)
            .env("XANTHUS_ITERATION", ctx.iteration.to_string())
            .env("XANTHUS_VM", vm)
            .env("XANTHUS_SEED", ctx.seed.to_string())
            .envs(extra_env)
            .output()
            .map_err(|e| ProviderError::Transport(format!("cannot run sh: {e}")))?;
        let exit_code = output.status.code().unwrap_or(-1);
        self.log.append(EventKind::Exec, &script.name, format!("exit={exit_code}"));
        Ok(ExecResult {
            exit_code,
            stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
            duration_ms: started.elapsed().as_millis() as u64,
            events: self.log.events()[before..].to_vec(),
        })
    }

    /// `collector-directive` scripts never touch `sh`; the directives are
    /// applied to the machine root directly, exactly as the mock backend
    /// does. This keeps directive-only workflows portable between the two
    /// backends.
    fn exec_directives(
        &mut self,
        ctx: &LaunchCtx,
        vm: &str,
        script: &ResolvedScript,
    ) -> Result<ExecResult, ProviderError> {
        let mut exit_code = 0;
        let mut stderr = String::new();
        let mut effective = 0usize;
        for line in script.body.lines() {
            let trimmed = line.trim();
            let Some(rest) = trimmed.strip_prefix("#xanthus:") else { continue };
            let rest = rest.trim_start();
            if let Some(args) = rest.strip_prefix("write ") {
                let args = args.trim_start();
                let (path, template) = args.split_once(char::is_whitespace).unwrap_or((args, ""));
                let content = render_template(template.trim_start(), ctx, vm);
                let host = map_remote_path(&self.root, path)?;
                if let Some(parent) = host.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&host, content.as_bytes())?;
                self.log.append(EventKind::Write, path, content);
                effective += 1;
            } else if let Some(code) = rest.strip_prefix("exit") {
                exit_code = code.trim().parse::<i32>().unwrap_or(2);
                effective += 1;
                break;
            } else {
                exit_code = 2;
                stderr = format!("unknown directive: #xanthus: {rest}");
                effective += 1;
                break;
            }
        }
        if effective == 0 {
            self.log.append(EventKind::Exec, &script.name, "invoke");
        }
        Ok(ExecResult { exit_code, stdout: String::new(), stderr, duration_ms: 0, events: vec![] })
    }

    pub(crate) fn stage_in(&mut self, local: &Path, remote: &str) -> Result<u64, ProviderError> {
        let host = map_remote_path(&self.root, remote)?;
        if let Some(parent) = host.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let n = std::fs::copy(local, &host)?;
        self.log.append(EventKind::StageIn, remote, format!("{n} bytes"));
        Ok(n)
    }

    pub(crate) fn stage_out(
        &mut self,
        vm: &str,
        remote: &str,
        local: &Path,
    ) -> Result<u64, ProviderError> {
        let host = map_remote_path(&self.root, remote)?;
        if !host.is_file() {
            return Err(ProviderError::MissingRemoteFile {
                vm: vm.to_string(),
                path: remote.to_string(),
            });
        }
        if let Some(parent) = local.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let n = std::fs::copy(&host, local)?;
        self.log.append(EventKind::StageOut, remote, format!("{n} bytes"));
        Ok(n)
    }

    pub(crate) fn write_file(&mut self, remote: &str, bytes: &[u8]) -> Result<(), ProviderError> {
        let host = map_remote_path(&self.root, remote)?;
        if let Some(parent) = host.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(host, bytes)?;
        Ok(())
    }

    pub(crate) fn destroy(&mut self) -> Result<(), ProviderError> {
        std::fs::remove_dir_all(&self.dir)?;
        Ok(())
    }
}

/// Recursive copy; follows no symlinks and preserves only content.
pub(crate) fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dst)?;
    for entry in std::fs::read_dir(src)? {
        let entry = entry?;
        let ty = entry.file_type()?;
        let to = dst.join(entry.file_name());
        if ty.is_dir() {
            copy_tree(&entry.path(), &to)?;
        } else if ty.is_file() {
            std::fs::copy(entry.path(), &to)?;
        }
    }
    Ok(())
}
