//! End-to-end acceptance checks driven through the compiled binary.
//!
//! Each test exercises one released guarantee of the full pipeline
//! (run, package, verify, publish, replay) and prints an
//! `ACCEPTANCE n: PASS` line once its assertions hold. The suite is
//! hermetic: mock and local backends only, a fake VM manager for the
//! managed backend, and no network or ambient credentials.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../workflows")
        .join(name)
        .canonicalize()
        .expect("fixture exists")
}

/// A binary invocation with a scrubbed environment: no ambient tokens,
/// no tool overrides.
fn xanthus(cwd: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xanthus"));
    c.current_dir(cwd)
        .env_remove("XANTHUS_GITHUB_TOKEN")
        .env_remove("XANTHUS_PUBLISH_TOKEN")
        .env_remove("XANTHUS_VM_TOOL");
    c
}

fn succeed(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn xanthus");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

/// Runs the command expecting `code`; returns (stdout, stderr).
fn fail_with(cmd: &mut Command, code: i32) -> (String, String) {
    let out = cmd.output().expect("spawn xanthus");
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (
        String::from_utf8(out.stdout).expect("stdout is UTF-8"),
        String::from_utf8(out.stderr).expect("stderr is UTF-8"),
    )
}

fn parse_json(stdout: &str) -> serde_json::Value {
    serde_json::from_str(stdout).expect("stdout is one JSON document")
}

/// Runs a workflow and returns (run_id, full JSON report).
fn run_workflow_json(
    cwd: &Path,
    workflow: &Path,
    workdir: &str,
    extra: &[&str],
) -> (String, serde_json::Value) {
    let mut cmd = xanthus(cwd);
    cmd.arg("run").arg(workflow).args(["--workdir", workdir, "--format", "json"]).args(extra);
    let report = parse_json(&succeed(&mut cmd));
    let run_id = report["run_id"].as_str().expect("run_id").to_string();
    (run_id, report)
}

/// Packages the latest (or named) run; returns (archive path, printed
/// determinism digest).
fn package_run(cwd: &Path, workdir: &str, run_id: Option<&str>) -> (PathBuf, String) {
    let mut cmd = xanthus(cwd);
    cmd.arg("package").args(["--workdir", workdir]);
    if let Some(id) = run_id {
        cmd.args(["--run-id", id]);
    }
    let stdout = succeed(&mut cmd);
    let mut archive = None;
    let mut digest = None;
    for line in stdout.lines() {
        if let Some(p) = line.strip_prefix("wrote ") {
            archive = Some(cwd.join(p));
        }
        if let Some(d) = line.strip_prefix("determinism digest: ") {
            digest = Some(d.to_string());
        }
    }
    (archive.expect("package names the archive"), digest.expect("package prints the digest"))
}

fn decompress(path: &Path) -> Vec<u8> {
    let gz = fs::read(path).expect("archive readable");
    let mut raw = Vec::new();
    GzDecoder::new(&gz[..]).read_to_end(&mut raw).expect("gzip payload");
    raw
}

/// Every regular file in the archive, path -> bytes.
fn archive_entries(path: &Path) -> BTreeMap<String, Vec<u8>> {
    let raw = decompress(path);
    let mut map = BTreeMap::new();
    for entry in tar::Archive::new(&raw[..]).entries().expect("tar entries") {
        let mut e = entry.expect("tar entry");
        if e.header().entry_type().is_file() {
            let p = e.path().expect("entry path").to_string_lossy().into_owned();
            let mut buf = Vec::new();
            e.read_to_end(&mut buf).expect("entry bytes");
            map.insert(p, buf);
        }
    }
    map
}

/// Flips one data byte of `victim` inside the archive, in place.
fn flip_payload_byte(path: &Path, victim: &str) {
    let mut raw = decompress(path);
    let mut offset = None;
    for entry in tar::Archive::new(&raw[..]).entries().expect("tar entries") {
        let e = entry.expect("tar entry");
        if e.path().expect("entry path").to_string_lossy() == victim {
            assert!(e.size() > 0, "victim must have data to corrupt");
            offset = Some(e.raw_file_position() as usize);
        }
    }
    let offset = offset.expect("victim entry present");
    raw[offset] ^= 0x01;
    let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
    enc.write_all(&raw).expect("regzip");
    fs::write(path, enc.finish().expect("regzip")).expect("rewrite archive");
}

fn sorted_keys<'a, V>(map: &'a BTreeMap<String, V>, prefix: &str) -> Vec<&'a str> {
    map.keys().filter(|k| k.starts_with(prefix)).map(String::as_str).collect()
}

#[test]
fn acceptance_01_shared_images_build_once_and_hit_the_cache_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    // Two machines with identical shape: one image build serves both.
    fs::write(
        dir.path().join("pair.xanthus"),
        r#"
[workflow]
name = "pair"
seed = 1
mode = "mock"

[vm.alpha]
image = "debian/bookworm64@12.2"

[vm.beta]
image = "debian/bookworm64@12.2"

[script.mark]
inline = """
#xanthus: write /tmp/mark.txt {vm}-{iter}
"""

[job.fanout]
iterations = 1
tasks = { alpha = ["mark"], beta = ["mark"] }
"#,
    )
    .unwrap();

    let stats = |label: &str| -> (u64, u64) {
        let text = fs::read_to_string(dir.path().join("w/cache/stats.json"))
            .unwrap_or_else(|_| panic!("cache stats exist {label}"));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        (v["builds"].as_u64().unwrap(), v["hits"].as_u64().unwrap())
    };

    run_workflow_json(dir.path(), Path::new("pair.xanthus"), "w", &[]);
    let (builds_1, hits_1) = stats("after the first run");
    run_workflow_json(dir.path(), Path::new("pair.xanthus"), "w", &[]);
    let (builds_2, hits_2) = stats("after the second run");

    assert_eq!(builds_1, 1, "both machines share one image build");
    assert_eq!(builds_2, 1, "the second run must not rebuild");
    assert!(hits_1 >= 1, "the second machine already hits the cache");
    assert!(hits_2 > hits_1, "the second run is served from the cache");
    println!("ACCEPTANCE 1: PASS");
}

#[test]
fn acceptance_02_two_iteration_two_output_run_packages_exactly_four_output_files() {
    let dir = tempfile::tempdir().unwrap();
    let workflow = fixture("two-host-attack.xanthus");
    let (_, report) = run_workflow_json(dir.path(), &workflow, "w", &[]);
    assert_eq!(report["ok"], serde_json::Value::Bool(true));
    assert_eq!(report["jobs"][0]["iterations"].as_array().unwrap().len(), 2);

    let (archive, _) = package_run(dir.path(), "w", None);
    let entries = archive_entries(&archive);
    let outputs = sorted_keys(&entries, "outputs/");
    assert_eq!(
        outputs,
        [
            "outputs/attack/iter-1/client/loot.txt",
            "outputs/attack/iter-1/client/session.log",
            "outputs/attack/iter-2/client/loot.txt",
            "outputs/attack/iter-2/client/session.log",
        ]
    );
    assert_eq!(sorted_keys(&entries, "inputs/").len(), 2);

    let stdout = succeed(xanthus(dir.path()).arg("verify").arg(&archive));
    assert!(stdout.contains("ok"));
    println!("ACCEPTANCE 2: PASS");
}

#[test]
fn acceptance_03_independent_cycles_agree_on_the_digest_and_seeds_change_outputs() {
    let workflow = fixture("two-host-attack.xanthus");
    let cycle = |seed: Option<&str>| -> (tempfile::TempDir, PathBuf, String) {
        let dir = tempfile::tempdir().unwrap();
        let extra: Vec<&str> = match seed {
            Some(s) => vec!["--seed", s],
            None => Vec::new(),
        };
        run_workflow_json(dir.path(), &workflow, "w", &extra);
        let (archive, digest) = package_run(dir.path(), "w", None);
        (dir, archive, digest)
    };

    let (_a_dir, a_archive, a_digest) = cycle(None);
    let (_b_dir, b_archive, b_digest) = cycle(None);
    assert_eq!(a_digest, b_digest, "independent cycles must agree");
    assert_ne!(
        fs::read(&a_archive).unwrap(),
        fs::read(&b_archive).unwrap(),
        "raw bytes differ (run ids), only the determinism digest is stable"
    );

    let (_c_dir, c_archive, c_digest) = cycle(Some("8"));
    assert_ne!(a_digest, c_digest, "a new seed is a new experiment");
    let a_loot = &archive_entries(&a_archive)["outputs/attack/iter-1/client/loot.txt"];
    let c_loot = &archive_entries(&c_archive)["outputs/attack/iter-1/client/loot.txt"];
    assert_ne!(a_loot, c_loot, "seed participates in the workload outputs");
    println!("ACCEPTANCE 3: PASS");
}

#[test]
fn acceptance_04_replay_reproduces_outputs_and_collector_swaps_touch_only_traces() {
    let dir = tempfile::tempdir().unwrap();
    let workflow = fixture("two-host-attack.xanthus");
    run_workflow_json(dir.path(), &workflow, "w", &[]);
    let (archive, _) = package_run(dir.path(), "w", None);
    let original = archive_entries(&archive);

    // Same collector: byte-faithful outputs, empty drift.
    let stdout = succeed(xanthus(dir.path()).args([
        "replay",
        archive.to_str().unwrap(),
        "--workdir",
        "replay-a",
        "--format",
        "json",
    ]));
    let report = parse_json(&stdout);
    assert_eq!(report["ok"], serde_json::Value::Bool(true));
    for list in ["changed", "missing", "unexpected"] {
        assert_eq!(report["drift"][list].as_array().unwrap().len(), 0, "{list} drift");
    }

    // Different collector: drift still empty, but the packaged traces
    // change while outputs stay byte-identical.
    let stdout = succeed(xanthus(dir.path()).args([
        "replay",
        archive.to_str().unwrap(),
        "--collector",
        "audit",
        "--workdir",
        "replay-b",
        "--format",
        "json",
    ]));
    let report = parse_json(&stdout);
    assert_eq!(report["ok"], serde_json::Value::Bool(true));
    for list in ["changed", "missing", "unexpected"] {
        assert_eq!(report["drift"][list].as_array().unwrap().len(), 0, "{list} drift");
    }
    let replay_id = report["run_id"].as_str().unwrap();
    let (replay_archive, _) = package_run(dir.path(), "replay-b", Some(replay_id));
    let swapped = archive_entries(&replay_archive);

    let outputs = |m: &BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
        m.iter()
            .filter(|(k, _)| k.starts_with("outputs/"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    assert_eq!(outputs(&original), outputs(&swapped), "outputs survive the swap untouched");
    let trace_names = |m: &BTreeMap<String, Vec<u8>>| -> BTreeSet<String> {
        m.keys().filter(|k| k.starts_with("traces/")).cloned().collect()
    };
    assert_ne!(
        trace_names(&original),
        trace_names(&swapped),
        "the collector swap must be visible under traces/"
    );
    assert!(trace_names(&swapped).iter().all(|k| k.ends_with("/audit.trace")));
    println!("ACCEPTANCE 4: PASS");
}

#[test]
fn acceptance_05_one_flipped_byte_fails_verification_naming_exactly_that_file() {
    let dir = tempfile::tempdir().unwrap();
    let workflow = fixture("two-host-attack.xanthus");
    run_workflow_json(dir.path(), &workflow, "w", &[]);
    let (archive, _) = package_run(dir.path(), "w", None);

    let victim = "outputs/attack/iter-1/client/loot.txt";
    flip_payload_byte(&archive, victim);

    let (stdout, _) = fail_with(xanthus(dir.path()).arg("verify").arg(&archive), 3);
    let mismatches: Vec<&str> =
        stdout.lines().filter(|l| l.starts_with("mismatch: ")).collect();
    assert_eq!(mismatches.len(), 1, "exactly one file is corrupt:\n{stdout}");
    assert!(mismatches[0].contains(victim), "{}", mismatches[0]);
    assert!(!stdout.contains("missing:"), "{stdout}");
    assert!(!stdout.contains("extra:"), "{stdout}");
    println!("ACCEPTANCE 5: PASS");
}

#[test]
fn acceptance_06_a_nonzero_task_exits_2_with_the_failure_recorded_and_partial_outputs_staged() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("breaks.xanthus"),
        r#"
[workflow]
name = "breaks"
seed = 1
mode = "mock"

[vm.host]
image = "debian/bookworm64@12.2"

[script.write-partial]
inline = """
#xanthus: write /out/partial.txt partial-{iter}
"""

[script.boom]
inline = """
#xanthus: exit 3
"""

[job.breaks]
iterations = 1
tasks = { host = ["write-partial", "boom"] }
outputs = [{ name = "partial.txt", remote = "/out/partial.txt", vm = "host" }]
on_failure = "continue"
"#,
    )
    .unwrap();

    let mut cmd = xanthus(dir.path());
    cmd.args(["run", "breaks.xanthus", "--workdir", "w", "--format", "json"]);
    let (stdout, stderr) = fail_with(&mut cmd, 2);
    assert!(stderr.contains("completed with failures"), "{stderr}");

    let report = parse_json(&stdout);
    assert_eq!(report["ok"], serde_json::Value::Bool(false));
    let iteration = &report["jobs"][0]["iterations"][0];
    assert_eq!(iteration["status"], "failed");
    assert_eq!(iteration["failure_phase"], "task");

    // Harvest is best-effort: the file written before the failure is
    // staged even though the iteration failed.
    let run_id = report["run_id"].as_str().unwrap();
    let staged = dir
        .path()
        .join("w")
        .join(run_id)
        .join("staging/breaks/iter-1/host/partial.txt");
    assert_eq!(fs::read_to_string(staged).unwrap(), "partial-1");
    println!("ACCEPTANCE 6: PASS");
}

#[test]
fn acceptance_07_lfs_tracking_follows_the_threshold_and_dry_runs_have_no_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let workflow = fixture("two-host-attack.xanthus");
    run_workflow_json(dir.path(), &workflow, "w", &[]);
    let (archive, _) = package_run(dir.path(), "w", None);
    assert!(fs::metadata(&archive).unwrap().len() >= 512);

    let listing = |p: &Path| -> BTreeSet<String> {
        fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect()
    };
    let before = listing(dir.path());

    // Target 0 sets a 512-byte threshold: the archive must ride LFS, and
    // tracking must be configured before the file is staged.
    let plan_kinds = |target: &str| -> Vec<String> {
        let stdout = succeed(xanthus(dir.path()).args([
            "publish",
            archive.to_str().unwrap(),
            "--dry-run",
            "--target",
            target,
            "--format",
            "json",
        ]));
        let doc = parse_json(&stdout);
        for status in doc["report"]["statuses"].as_array().unwrap() {
            assert_eq!(status["outcome"], "planned");
        }
        doc["plan"]["actions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a["kind"].as_str().unwrap().to_string())
            .collect()
    };

    let small_threshold = plan_kinds("0");
    assert_eq!(small_threshold, ["ensure-repo", "lfs-track", "add", "commit", "push"]);
    let default_threshold = plan_kinds("1");
    assert_eq!(default_threshold, ["ensure-repo", "add", "commit", "push"]);

    // No credentials in the environment, nothing written, nothing sent.
    assert_eq!(before, listing(dir.path()), "dry runs leave the directory untouched");
    println!("ACCEPTANCE 7: PASS");
}

#[test]
fn acceptance_08_order_edges_hold_in_the_merged_log_across_100_runs() {
    let workflow = fixture("two-host-attack.xanthus");
    let text = fs::read_to_string(&workflow).unwrap();
    let w = xanthus_core::config::parse_workflow(&text).unwrap();
    let base_dir = workflow.parent().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let provider = xanthus_core::provider::Provider::new(
        w.mode,
        &dir.path().join("cache"),
        &dir.path().join("machines"),
        base_dir,
    )
    .unwrap();

    for round in 0..100 {
        let run_id = format!("ord-{round:03}");
        let record = xanthus_core::executor::run_workflow(
            &w,
            &provider,
            base_dir,
            &dir.path().join("runs"),
            &run_id,
        )
        .unwrap();
        for iteration in &record.job_results[0].iterations {
            let server_flag = iteration
                .events
                .iter()
                .position(|e| e.vm == "server" && e.event.subject == "/srv/flag.txt")
                .expect("server task event present");
            let client_first = iteration
                .events
                .iter()
                .position(|e| {
                    e.vm == "client"
                        && e.event.kind == xanthus_core::provider::EventKind::Exec
                        && e.event.subject == "recon"
                })
                .expect("client first task event present");
            assert!(
                server_flag < client_first,
                "round {round}: server event at {server_flag}, client at {client_first}"
            );
        }
    }
    println!("ACCEPTANCE 8: PASS");
}

#[test]
fn acceptance_09_local_backend_archives_two_real_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("smoke.xanthus"),
        r#"
[workflow]
name = "smoke"
seed = 3
mode = "local"

[vm.node]
image = "any/base@1"

[script.write-seed]
inline = """
mkdir -p out
printf 'seed=%s\n' "$XANTHUS_SEED" > out/seed.txt
"""

[script.write-job]
inline = """
printf 'job=%s iter=%s\n' "$XANTHUS_JOB" "$XANTHUS_ITERATION" > out/job.txt
"""

[job.probe]
iterations = 1
tasks = { node = ["write-seed", "write-job"] }
outputs = [
  { name = "seed.txt", remote = "/out/seed.txt", vm = "node" },
  { name = "job.txt", remote = "/out/job.txt", vm = "node" },
]
"#,
    )
    .unwrap();

    run_workflow_json(dir.path(), Path::new("smoke.xanthus"), "w", &[]);
    let (archive, _) = package_run(dir.path(), "w", None);
    succeed(xanthus(dir.path()).arg("verify").arg(&archive));

    let entries = archive_entries(&archive);
    assert_eq!(
        entries["outputs/probe/iter-1/node/seed.txt"],
        b"seed=3\n".to_vec()
    );
    assert_eq!(
        entries["outputs/probe/iter-1/node/job.txt"],
        b"job=probe iter=1\n".to_vec()
    );
    println!("ACCEPTANCE 9: PASS");
}

#[test]
fn acceptance_10_managed_backend_drives_the_pinned_tool_sequence_and_packages_once() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("tool.log");
    let tool = dir.path().join("fake-vm");
    fs::write(
        &tool,
        format!(
            "#!/bin/sh\nprintf '%s\\n' \"$*\" >> {}\ncase \"$1\" in\n  --version) echo 'fake-vm 1.0' ;;\n  up|halt|upload) : ;;\n  destroy) : ;;\n  package) shift; [ \"$1\" = --output ] && : > \"$2\" ;;\n  ssh)\n    shift; [ \"$1\" = -c ] || exit 64\n    case \"$2\" in\n      *cat*) printf 'remote-content' ;;\n      *) : ;;\n    esac ;;\n  *) exit 64 ;;\nesac\n",
            log.display()
        ),
    )
    .unwrap();
    let mut perms = fs::metadata(&tool).unwrap().permissions();
    use std::os::unix::fs::PermissionsExt;
    perms.set_mode(0o755);
    fs::set_permissions(&tool, perms).unwrap();

    fs::create_dir(dir.path().join("files")).unwrap();
    fs::write(dir.path().join("files/tool.py"), "print('survey')\n").unwrap();
    fs::write(
        dir.path().join("survey.xanthus"),
        r#"
[workflow]
name = "survey"
seed = 1
mode = "managed-vm"

[vm.node]
image = "debian/bookworm64@12.2"
config_scripts = ["provision"]

[script.provision]
inline = """
apt-get install -y auditd
"""

[script.probe]
inline = """
uname -a > /out/kernel.txt
"""

[job.survey]
iterations = 1
tasks = { node = ["probe"] }
inputs = [{ local = "files/tool.py", remote = "/opt/tool.py", vm = "node" }]
outputs = [{ name = "kernel.txt", remote = "/out/kernel.txt", vm = "node" }]
"#,
    )
    .unwrap();

    let run = || {
        let mut cmd = xanthus(dir.path());
        cmd.args(["run", "survey.xanthus", "--workdir", "w", "--format", "json"])
            .env("XANTHUS_VM_TOOL", &tool);
        parse_json(&succeed(&mut cmd))
    };
    assert_eq!(run()["ok"], serde_json::Value::Bool(true));
    assert_eq!(run()["ok"], serde_json::Value::Bool(true));

    let text = fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let heads: Vec<&str> =
        lines.iter().map(|l| l.split_whitespace().next().unwrap_or("")).collect();

    // First run: probe the tool (once while wiring the backend, once for
    // the environment fingerprint), build and package the image, then
    // boot the job machine, stage the input, run the task, harvest, and
    // destroy. Second run: the image comes from the cache.
    let first_run = [
        "--version", "--version", "up", "upload", "ssh", "package", "halt", "destroy", "up",
        "upload", "upload", "ssh", "ssh", "halt", "destroy",
    ];
    let second_run = [
        "--version", "--version", "up", "upload", "upload", "ssh", "ssh", "halt", "destroy",
    ];
    assert_eq!(heads[..first_run.len()], first_run, "log:\n{text}");
    assert_eq!(heads[first_run.len()..], second_run, "log:\n{text}");

    assert!(lines[3].contains("provision-0.sh"), "{}", lines[3]);
    assert!(lines[4].starts_with("ssh -c sh /xanthus/provision-0.sh"), "{}", lines[4]);
    assert!(
        lines[5].starts_with("package --output") && lines[5].ends_with("image.box"),
        "{}",
        lines[5]
    );
    assert!(lines[9].contains("/opt/tool.py"), "{}", lines[9]);
    assert!(lines[10].contains("task-001-probe.sh"), "{}", lines[10]);
    assert!(lines[11].contains("sh /xanthus/task-001-probe.sh"), "{}", lines[11]);
    assert!(lines[12].starts_with("ssh -c cat"), "{}", lines[12]);
    assert_eq!(lines[14], "destroy -f");
    assert_eq!(
        lines.iter().filter(|l| l.starts_with("package")).count(),
        1,
        "the image is packaged exactly once across both runs"
    );
    println!("ACCEPTANCE 10: PASS");
}
