//! Managed-VM backend: drives an external VM manager binary.
//!
//! The manager is named by `$XANTHUS_VM_TOOL` (default `xanthus-vm`) and
//! must implement this command contract, always invoked with the machine
//! directory (containing `machine.cfg`) as working directory:
//!
//! ```text
//! <tool> --version
//! <tool> up
//! <tool> ssh -c <command>
//! <tool> upload <local> <remote>
//! <tool> package --output <box-path>
//! <tool> halt
//! <tool> destroy -f
//! ```
//!
//! `machine.cfg` is `key=value` lines: `image`, `cpus`, `memory_mb`, and
//! optionally `ip`. Output files are harvested with `ssh -c "cat <path>"`,
//! which keeps the contract to the six commands above. The manager's exit
//! code is trusted: nonzero `ssh` means the script failed, nonzero
//! anything else is a transport error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use crate::config::VmSpec;
use crate::digest::Digest;

use super::{excerpt, ExecResult, ImageRef, LaunchCtx, ProviderError, ResolvedScript, VM_TOOL_ENV};

#[derive(Debug, Clone)]
pub struct ManagedTool {
    program: String,
}

impl ManagedTool {
    pub fn new(program: impl Into<String>) -> ManagedTool {
        ManagedTool { program: program.into() }
    }

    pub fn from_env() -> ManagedTool {
        let program =
            std::env::var(VM_TOOL_ENV).unwrap_or_else(|_| "xanthus-vm".to_string());
        ManagedTool { program }
    }

    pub fn program(&self) -> &str {
        &self.program
    }

    pub fn version(&self) -> Result<String, ProviderError> {
        let out = self.run(Path::new("."), &["--version"])?;
        if !out.status.success() {
            return Err(ProviderError::BackendUnavailable(format!(
                "`{} --version` failed: {}",
                self.program,
                excerpt(&out.stderr, 200)
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }

    fn run(&self, cwd: &Path, args: &[&str]) -> Result<Output, ProviderError> {
        Command::new(&self.program).args(args).current_dir(cwd).output().map_err(|e| {
            ProviderError::BackendUnavailable(format!(
                "cannot run `{}` (set {VM_TOOL_ENV}): {e}",
                self.program
            ))
        })
    }

    /// Runs a subcommand and demands success; failures are transport
    /// errors tagged with the subcommand.
    fn must(&self, cwd: &Path, args: &[&str]) -> Result<Output, ProviderError> {
        let out = self.run(cwd, args)?;
        if !out.status.success() {
            return Err(ProviderError::Transport(format!(
                "`{} {}` exited {}: {}",
                self.program,
                args.join(" "),
                out.status.code().unwrap_or(-1),
                excerpt(&out.stderr, 400)
            )));
        }
        Ok(out)
    }
}

pub(crate) struct ManagedMachine {
    tool: ManagedTool,
    dir: PathBuf,
    script_serial: u64,
}

fn write_machine_cfg(dir: &Path, image: &str, spec: &VmSpec) -> std::io::Result<()> {
    let mut cfg = String::new();
    cfg.push_str(&format!("image={image}\n"));
    cfg.push_str(&format!("cpus={}\n", spec.cpus));
    cfg.push_str(&format!("memory_mb={}\n", spec.memory_mb));
    if let Some(ip) = &spec.ip {
        cfg.push_str(&format!("ip={ip}\n"));
    }
    std::fs::write(dir.join("machine.cfg"), cfg)
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "'\\''"))
}

/// Boots a machine from the raw image source, runs the config scripts,
/// and packages the result as `image.box` in the cache.
pub(crate) fn build_image(
    tool: &ManagedTool,
    target: &Path,
    key: &Digest,
    spec: &VmSpec,
    scripts: &[ResolvedScript],
) -> Result<ImageRef, ProviderError> {
    let build_dir = target.join("build");
    std::fs::create_dir_all(&build_dir)?;
    write_machine_cfg(&build_dir, &spec.image.locator(), spec)?;
    tool.must(&build_dir, &["up"])?;

    let teardown = |dir: &Path| {
        let _ = tool.run(dir, &["halt"]);
        let _ = tool.run(dir, &["destroy", "-f"]);
    };

    for (i, script) in scripts.iter().enumerate() {
        let local = build_dir.join(format!("provision-{i}.sh"));
        std::fs::write(&local, &script.body)?;
        let remote = format!("/xanthus/provision-{i}.sh");
        let local_str = local.display().to_string();
        if let Err(e) = tool.must(&build_dir, &["upload", &local_str, &remote]) {
            teardown(&build_dir);
            return Err(e);
        }
        let out = match tool.run(&build_dir, &["ssh", "-c", &format!("sh {remote}")]) {
            Ok(out) => out,
            Err(e) => {
                teardown(&build_dir);
                return Err(e);
            }
        };
        if !out.status.success() {
            teardown(&build_dir);
            return Err(ProviderError::BuildFailed {
                script: script.name.clone(),
                exit_code: out.status.code().unwrap_or(-1),
                stderr_excerpt: excerpt(&out.stderr, 400),
            });
        }
    }

    let box_path = target.join("image.box");
    let box_str = box_path.display().to_string();
    let packaged = tool.must(&build_dir, &["package", "--output", &box_str]);
    teardown(&build_dir);
    packaged?;
    Ok(ImageRef {
        cache_key: key.clone(),
        backend: "managed-vm".to_string(),
        locator: box_str,
    })
}

pub(crate) fn launch(
    tool: ManagedTool,
    image: &ImageRef,
    spec: &VmSpec,
    dir: &Path,
) -> Result<ManagedMachine, ProviderError> {
    std::fs::create_dir_all(dir)?;
    write_machine_cfg(dir, &image.locator, spec)?;
    tool.must(dir, &["up"]).map_err(|e| match e {
        ProviderError::Transport(msg) => ProviderError::LaunchFailed(msg),
        other => other,
    })?;
    Ok(ManagedMachine { tool, dir: dir.to_path_buf(), script_serial: 0 })
}

impl ManagedMachine {
    pub(crate) fn exec(
        &mut self,
        ctx: &LaunchCtx,
        vm: &str,
        script: &ResolvedScript,
        extra_env: &BTreeMap<String, String>,
    ) -> Result<ExecResult, ProviderError> {
        self.script_serial += 1;
        let local = self.dir.join(format!("task-{:03}-{}.sh", self.script_serial, script.name));
        std::fs::write(&local, &script.body)?;
        let remote = format!("/xanthus/task-{:03}-{}.sh", self.script_serial, script.name);
        let local_str = local.display().to_string();
        self.tool.must(&self.dir, &["upload", &local_str, &remote])?;

        let mut env: BTreeMap<String, String> = extra_env.clone();
        env.insert("XANTHUS_RUN_ID".into(), ctx.run_id.clone());
        env.insert("XANTHUS_JOB".into(), ctx.job.clone());
        env.insert("XANTHUS_ITERATION".into(), ctx.iteration.to_string());
        env.insert("XANTHUS_VM".into(), vm.to_string());
        env.insert("XANTHUS_SEED".into(), ctx.seed.to_string());
        let assignments: Vec<String> =
            env.iter().map(|(k, v)| format!("{k}={}", shell_quote(v))).collect();
        let command = format!("{} sh {remote}", assignments.join(" "));

        let started = Instant::now();
        let out = self.tool.run(&self.dir, &["ssh", "-c", &command])?;
        Ok(ExecResult {
            exit_code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
            duration_ms: started.elapsed().as_millis() as u64,
            events: vec![],
        })
    }

    pub(crate) fn stage_in(&mut self, local: &Path, remote: &str) -> Result<u64, ProviderError> {
        let size = std::fs::metadata(local)?.len();
        let local_str = local.display().to_string();
        self.tool.must(&self.dir, &["upload", &local_str, remote])?;
        Ok(size)
    }

    pub(crate) fn stage_out(
        &mut self,
        vm: &str,
        remote: &str,
        local: &Path,
    ) -> Result<u64, ProviderError> {
        let out =
            self.tool.run(&self.dir, &["ssh", "-c", &format!("cat {}", shell_quote(remote))])?;
        if !out.status.success() {
            return Err(ProviderError::MissingRemoteFile {
                vm: vm.to_string(),
                path: remote.to_string(),
            });
        }
        if let Some(parent) = local.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(local, &out.stdout)?;
        Ok(out.stdout.len() as u64)
    }

    pub(crate) fn write_file(&mut self, remote: &str, bytes: &[u8]) -> Result<(), ProviderError> {
        self.script_serial += 1;
        let local = self.dir.join(format!("payload-{:03}", self.script_serial));
        std::fs::write(&local, bytes)?;
        let local_str = local.display().to_string();
        self.tool.must(&self.dir, &["upload", &local_str, remote])?;
        Ok(())
    }

    pub(crate) fn destroy(&mut self) -> Result<(), ProviderError> {
        let _ = self.tool.run(&self.dir, &["halt"]);
        self.tool.must(&self.dir, &["destroy", "-f"])?;
        let _ = std::fs::remove_dir_all(&self.dir);
        Ok(())
    }
}
