//! xanthus: push-button packaging for multi-machine experiments.
//!
//! The pipeline runs in five stages, one module each:
//!
//! 1. [`config`] parses and validates a declarative `.xanthus` workflow.
//! 2. [`provider`] turns VM declarations into disposable machines behind a
//!    uniform interface (in-memory mock, host-local directories, an
//!    external VM manager, or cloud provisioning plans).
//! 3. [`executor`] launches machines per iteration, stages inputs, runs
//!    task scripts under an optional provenance collector, and harvests
//!    outputs and traces into a run record.
//! 4. [`archive`] packages a run into a byte-deterministic, self-verifying
//!    `tar.gz` with a manifest of digests.
//! 5. [`publish`] pushes an archive to GitHub (with LFS planning) or a
//!    Dataverse collection, with a faithful dry-run mode.

pub mod archive;
pub mod collector;
pub mod config;
pub mod digest;
pub mod executor;
pub mod jsonutil;
pub mod provider;
pub mod publish;

pub use archive::{
    build_archive, determinism_digest, extract_for_replay, read_embedded_workflow, read_manifest,
    verify_archive, ArchiveError, ArchiveOptions, Manifest, VerifyReport,
};
pub use config::{
    canonical_digest, canonical_text, has_errors, parse_workflow, validate_structure,
    validate_workflow, Diagnostic, Mode, ParseError, Severity, Workflow,
};
pub use digest::Digest;
pub use executor::{
    capture_environment, generate_run_id, run_workflow, ExecError, IterationResult,
    IterationStatus, RunRecord, TaskStatus, VmEvent,
};
pub use publish::{
    execute_publish, plan_publish, Action, ActionOutcome, ActionStatus, PublishError,
    PublishPlan, PublishReport, Secret, SystemTransport, Transport,
};
