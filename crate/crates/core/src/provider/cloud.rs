//! Cloud backend: plans only, no API calls.
//!
//! Launching writes a human-readable `plan.txt` describing the instance
//! that would be provisioned; exec and stage operations append planned
//! actions. Credentials are never read: the plan records only whether the
//! `XANTHUS_CLOUD_KEY_ID` / `XANTHUS_CLOUD_SECRET` variables are set.
//! Harvesting outputs from a planned machine reports `MissingRemoteFile`,
//! since nothing ran.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::VmSpec;
use crate::digest::Digest;

use super::{ExecResult, ImageRef, LaunchCtx, ProviderError, ResolvedScript};

/// Credential environment variables; only their presence is observed.
pub const CLOUD_KEY_ID_ENV: &str = "XANTHUS_CLOUD_KEY_ID";
pub const CLOUD_SECRET_ENV: &str = "XANTHUS_CLOUD_SECRET";

#[derive(Debug, Clone)]
pub struct CloudSettings {
    pub region: String,
    pub key_name: String,
    pub security_group: String,
}

impl CloudSettings {
    pub fn from_env() -> CloudSettings {
        let var = |name: &str, default: &str| {
            std::env::var(name).unwrap_or_else(|_| default.to_string())
        };
        CloudSettings {
            region: var("XANTHUS_CLOUD_REGION", "us-east-1"),
            key_name: var("XANTHUS_CLOUD_KEY_NAME", "xanthus"),
            security_group: var("XANTHUS_CLOUD_SECURITY_GROUP", "xanthus-sg"),
        }
    }
}

/// Smallest instance type that fits the requested shape.
pub fn instance_type_for(cpus: u64, memory_mb: u64) -> &'static str {
    match () {
        _ if cpus <= 2 && memory_mb <= 1024 => "t3.micro",
        _ if cpus <= 2 && memory_mb <= 2048 => "t3.small",
        _ if cpus <= 2 && memory_mb <= 4096 => "t3.medium",
        _ if cpus <= 2 && memory_mb <= 8192 => "t3.large",
        _ if cpus <= 4 && memory_mb <= 16384 => "t3.xlarge",
        _ => "t3.2xlarge",
    }
}

/// Cloud images are not built; the image reference simply carries the
/// image id and the config scripts are listed in each machine's plan.
pub(crate) fn build_image(
    target: &Path,
    key: &Digest,
    spec: &VmSpec,
    scripts: &[ResolvedScript],
) -> Result<ImageRef, ProviderError> {
    let names: Vec<&str> = scripts.iter().map(|s| s.name.as_str()).collect();
    std::fs::write(
        target.join("provision-scripts.txt"),
        format!("{}\n", names.join("\n")),
    )?;
    Ok(ImageRef {
        cache_key: key.clone(),
        backend: "cloud".to_string(),
        locator: spec.image.locator(),
    })
}

pub(crate) struct PlannedMachine {
    plan_path: PathBuf,
    action: u64,
}

pub(crate) fn launch(
    settings: &CloudSettings,
    image: &ImageRef,
    spec: &VmSpec,
    dir: &Path,
    ctx: &LaunchCtx,
) -> Result<PlannedMachine, ProviderError> {
    std::fs::create_dir_all(dir)?;
    let plan_path = dir.join("plan.txt");
    let credentials = format!(
        "{CLOUD_KEY_ID_ENV} {}, {CLOUD_SECRET_ENV} {}",
        presence(CLOUD_KEY_ID_ENV),
        presence(CLOUD_SECRET_ENV)
    );
    let image_id = image.locator.strip_prefix("cloud:").unwrap_or(&image.locator);
    let plan = format!(
        "xanthus cloud provisioning plan (not executed)\n\
         run_id: {run_id}\n\
         job: {job} iteration {iter}\n\
         vm: {vm}\n\
         region: {region}\n\
         image_id: {image_id}\n\
         instance_type: {itype}\n\
         key_name: {key_name}\n\
         security_group: {sg}\n\
         credentials: {credentials}\n\
         actions:\n",
        run_id = ctx.run_id,
        job = ctx.job,
        iter = ctx.iteration,
        vm = spec.name,
        region = settings.region,
        image_id = image_id,
        itype = instance_type_for(spec.cpus, spec.memory_mb),
        key_name = settings.key_name,
        sg = settings.security_group,
    );
    std::fs::write(&plan_path, plan)?;
    let mut machine = PlannedMachine { plan_path, action: 0 };
    machine.note("run-instances")?;
    Ok(machine)
}

fn presence(name: &str) -> &'static str {
    if std::env::var_os(name).is_some() {
        "set"
    } else {
        "unset"
    }
}

impl PlannedMachine {
    fn note(&mut self, action: &str) -> Result<(), ProviderError> {
        self.action += 1;
        let mut f = OpenOptions::new().append(true).open(&self.plan_path)?;
        writeln!(f, "  {}. {action}", self.action)?;
        Ok(())
    }

    pub(crate) fn exec(&mut self, script: &ResolvedScript) -> Result<ExecResult, ProviderError> {
        self.note(&format!("ssh: run script `{}`", script.name))?;
        Ok(ExecResult {
            exit_code: 0,
            stdout: String::new(),
            stderr: String::new(),
            duration_ms: 0,
            events: vec![],
        })
    }

    pub(crate) fn stage_in(&mut self, local: &Path, remote: &str) -> Result<u64, ProviderError> {
        let size = std::fs::metadata(local)?.len();
        self.note(&format!("upload {remote} ({size} bytes)"))?;
        Ok(size)
    }

    pub(crate) fn stage_out(
        &mut self,
        vm: &str,
        remote: &str,
        _local: &Path,
    ) -> Result<u64, ProviderError> {
        self.note(&format!("download {remote} (skipped: plan only)"))?;
        Err(ProviderError::MissingRemoteFile { vm: vm.to_string(), path: remote.to_string() })
    }

    pub(crate) fn write_file(&mut self, remote: &str, _bytes: &[u8]) -> Result<(), ProviderError> {
        self.note(&format!("write {remote} (skipped: plan only)"))?;
        Ok(())
    }

    pub(crate) fn destroy(&mut self) -> Result<(), ProviderError> {
        self.note("terminate-instances")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_type_table_is_monotone() {
        assert_eq!(instance_type_for(1, 512), "t3.micro");
        assert_eq!(instance_type_for(2, 1024), "t3.micro");
        assert_eq!(instance_type_for(2, 2048), "t3.small");
        assert_eq!(instance_type_for(2, 4096), "t3.medium");
        assert_eq!(instance_type_for(2, 8192), "t3.large");
        assert_eq!(instance_type_for(4, 16384), "t3.xlarge");
        assert_eq!(instance_type_for(8, 32768), "t3.2xlarge");
        assert_eq!(instance_type_for(64, 1024), "t3.2xlarge");
    }
}
