//! Parsing, canonicalization, and validation of workflow documents.

use std::collections::BTreeMap;
use std::process::Command;

use xanthus_core::config::*;
use xanthus_core::digest::Digest;

/// A two-machine document exercising every section kind.
const TWO_HOST: &str = r#"
# A replicable two-host experiment.
[workflow]
name = "exfil-study"
seed = 7
mode = "mock"

[vm.server]
image = "debian/bookworm64@12.2"
ip = "192.168.56.10"
cpus = 2
memory_mb = 1024
config_scripts = ["provision"]

[vm.client]
image = "debian/bookworm64@12.2"

[script.provision]
inline = """
#xanthus: write /etc/motd provisioned-{vm}
"""

[script.serve]
inline = """
#xanthus: write /srv/data/flag.txt seed-{seed}
"""

[script.fetch]
inline = """
#xanthus: write /home/user/loot-{iter}.txt got-it
"""

[collector.audit]
install = "provision"
start = "serve"
stop = "fetch"
export = "serve"
trace_outputs = ["/var/log/audit.log"]

[job.attack]
iterations = 2
tasks = { server = ["serve"], client = ["fetch", { script = "fetch", env = { VERBOSE = "1" } }, "fetch"] }
inputs = [{ local = "files/payload.bin", remote = "/opt/payload.bin", vm = "client" }]
outputs = [
  { name = "loot.txt", remote = "/home/user/loot-0.txt", vm = "client" },
  { name = "flag.txt", remote = "/srv/data/flag.txt", vm = "server" },
]
order = ["server:0 -> client:0"]
on_failure = "continue"
collector = "synthetic"

[publish.0]
kind = "github"
locator = "https://github.com/lab/exfil-study"
auth_env = "XANTHUS_GITHUB_TOKEN"

[publish.1]
kind = "dataverse"
locator = "https://demo.dataverse.org#lab"
auth_env = "XANTHUS_DATAVERSE_TOKEN"
lfs_threshold_bytes = 1048576
"#;

#[test]
fn parses_full_document() {
    let w = parse_workflow(TWO_HOST).unwrap();
    assert_eq!(w.name, "exfil-study");
    assert_eq!(w.seed, 7);
    assert_eq!(w.mode, Mode::Mock);
    assert_eq!(w.vms.len(), 2);

    let server = &w.vms["server"];
    assert_eq!(server.cpus, 2);
    assert_eq!(server.memory_mb, 1024);
    assert_eq!(server.ip.as_deref(), Some("192.168.56.10"));
    assert_eq!(server.config_scripts, vec!["provision".to_string()]);
    assert_eq!(server.image.locator(), "debian/bookworm64@12.2");

    let client = &w.vms["client"];
    assert_eq!((client.cpus, client.memory_mb), (1, 512));
    assert!(client.ip.is_none());

    let provision = &w.scripts["provision"];
    assert_eq!(provision.interpreter, Interpreter::Shell);
    match &provision.source {
        ScriptSource::Inline(body) => {
            assert_eq!(body, "#xanthus: write /etc/motd provisioned-{vm}\n");
        }
        other => panic!("expected inline source, got {other:?}"),
    }

    assert_eq!(w.jobs.len(), 1);
    let job = &w.jobs[0];
    assert_eq!(job.name, "attack");
    assert_eq!(job.iterations, 2);
    assert_eq!(job.on_failure, FailurePolicy::Continue);
    assert_eq!(job.collector.as_deref(), Some("synthetic"));
    assert_eq!(job.tasks["server"].len(), 1);
    assert_eq!(job.tasks["client"].len(), 3);
    assert_eq!(job.tasks["client"][1].env["VERBOSE"], "1");
    assert_eq!(job.inputs.len(), 1);
    assert_eq!(job.outputs.len(), 2);
    assert_eq!(job.order.len(), 1);
    assert_eq!(job.order[0].before, TaskId { vm: "server".into(), index: 0 });
    assert_eq!(job.order[0].after, TaskId { vm: "client".into(), index: 0 });

    assert_eq!(w.publish_targets.len(), 2);
    assert_eq!(w.publish_targets[0].kind, TargetKind::Github);
    assert_eq!(w.publish_targets[0].lfs_threshold_bytes, DEFAULT_LFS_THRESHOLD);
    assert_eq!(w.publish_targets[1].kind, TargetKind::Dataverse);
    assert_eq!(w.publish_targets[1].lfs_threshold_bytes, 1_048_576);
}

#[test]
fn defaults_fill_in() {
    let w = parse_workflow(
        "[workflow]\nname = \"tiny\"\n\n[vm.a]\nimage = \"box\"\n\n[script.s]\ninline = \"x\"\n\n[job.j]\ntasks = { a = [\"s\"] }\n",
    )
    .unwrap();
    assert_eq!(w.seed, 0);
    assert_eq!(w.mode, Mode::Mock);
    assert_eq!(w.jobs[0].iterations, 1);
    assert_eq!(w.jobs[0].on_failure, FailurePolicy::Abort);
    assert!(w.jobs[0].collector.is_none());
    assert!(w.publish_targets.is_empty());
}

#[test]
fn error_positions_are_exact() {
    let err = parse_workflow("[workflow]\nname = \"x\"\nseed = \"high\"\n").unwrap_err();
    assert_eq!((err.line, err.column), (3, 8));
    assert!(err.message.contains("integer"), "message: {}", err.message);

    let err = parse_workflow("[workflow]\nname = \"x\"\nname = \"y\"\n").unwrap_err();
    assert_eq!((err.line, err.column), (3, 1));
    assert!(err.message.contains("duplicate key"), "message: {}", err.message);

    let err = parse_workflow("[workflow]\nname = \"x\"\nbogus = 1\n").unwrap_err();
    assert_eq!((err.line, err.column), (3, 1));
    assert!(err.message.contains("unknown key"), "message: {}", err.message);

    let err = parse_workflow("[workflow]\nname = \"x\"\n\n[widget.a]\nk = 1\n").unwrap_err();
    assert_eq!((err.line, err.column), (4, 1));
    assert!(err.message.contains("unknown section kind"), "message: {}", err.message);

    let err = parse_workflow("[vm.a]\nimage = \"b\"\n\n[vm.a]\nimage = \"b\"\n").unwrap_err();
    assert_eq!((err.line, err.column), (4, 1));
    assert!(err.message.contains("duplicate section"), "message: {}", err.message);

    let err = parse_workflow("name = \"x\"\n").unwrap_err();
    assert!(err.message.contains("outside any section"), "message: {}", err.message);

    let err = parse_workflow("[workflow]\nname = unquoted\n").unwrap_err();
    assert_eq!((err.line, err.column), (2, 8));
}

#[test]
fn missing_workflow_section_is_an_error() {
    let err = parse_workflow("[vm.a]\nimage = \"b\"\n").unwrap_err();
    assert!(err.message.contains("[workflow]"), "message: {}", err.message);
}

#[test]
fn triple_quoted_blocks_keep_raw_content() {
    let w = parse_workflow(
        "[workflow]\nname = \"x\"\n\n[script.s]\ninline = \"\"\"\necho \"quoted\" # not a comment\nsecond line\n\"\"\"\n",
    )
    .unwrap();
    match &w.scripts["s"].source {
        ScriptSource::Inline(body) => {
            assert_eq!(body, "echo \"quoted\" # not a comment\nsecond line\n");
        }
        other => panic!("unexpected source {other:?}"),
    }
}

#[test]
fn escapes_and_crlf() {
    let w = parse_workflow(
        "[workflow]\r\nname = \"a\\\"b\\\\c\\nd\\te\"\r\nseed = 3\r\n",
    )
    .unwrap();
    assert_eq!(w.name, "a\"b\\c\nd\te");
    assert_eq!(w.seed, 3);

    let err = parse_workflow("[workflow]\nname = \"bad\\q\"\n").unwrap_err();
    assert!(err.message.contains("unknown escape"), "message: {}", err.message);
}

#[test]
fn image_schemes() {
    let doc = |img: &str| {
        format!("[workflow]\nname = \"x\"\n\n[vm.a]\nimage = \"{img}\"\n")
    };
    let w = parse_workflow(&doc("path:images/base")).unwrap();
    assert_eq!(w.vms["a"].image, ImageSource::LocalPath { path: "images/base".into() });
    let w = parse_workflow(&doc("cloud:ami-123")).unwrap();
    assert_eq!(w.vms["a"].image, ImageSource::CloudImage { id: "ami-123".into() });
    let err = parse_workflow(&doc("docker:thing")).unwrap_err();
    assert!(err.message.contains("unknown image scheme"), "message: {}", err.message);
}

#[test]
fn explicit_job_order_overrides_document_order() {
    let base = "[workflow]\nname = \"x\"\n{JOBS}\n[vm.a]\nimage = \"b\"\n\n[script.s]\ninline = \"x\"\n\n[job.second]\ntasks = { a = [\"s\"] }\n\n[job.first]\ntasks = { a = [\"s\"] }\n";
    let doc = base.replace("{JOBS}", "");
    let w = parse_workflow(&doc).unwrap();
    let names: Vec<&str> = w.jobs.iter().map(|j| j.name.as_str()).collect();
    assert_eq!(names, ["second", "first"], "document order by default");

    let doc = base.replace("{JOBS}", "jobs = [\"first\", \"second\"]\n");
    let w = parse_workflow(&doc).unwrap();
    let names: Vec<&str> = w.jobs.iter().map(|j| j.name.as_str()).collect();
    assert_eq!(names, ["first", "second"], "explicit order wins");

    let doc = base.replace("{JOBS}", "jobs = [\"first\", \"ghost\"]\n");
    let err = parse_workflow(&doc).unwrap_err();
    assert!(err.message.contains("ghost"), "message: {}", err.message);

    let doc = base.replace("{JOBS}", "jobs = [\"first\"]\n");
    let err = parse_workflow(&doc).unwrap_err();
    assert!(err.message.contains("second"), "message: {}", err.message);
}

#[test]
fn publish_sections_number_from_zero() {
    let err = parse_workflow(
        "[workflow]\nname = \"x\"\n\n[publish.1]\nkind = \"github\"\nlocator = \"https://g/r\"\nauth_env = \"T\"\n",
    )
    .unwrap_err();
    assert!(err.message.contains("publish.0"), "message: {}", err.message);
}

#[test]
fn canonical_text_is_stable_and_sorted() {
    let w = parse_workflow(TWO_HOST).unwrap();
    let text = canonical_text(&w);

    let reparsed = parse_workflow(&text).unwrap();
    assert_eq!(reparsed, w, "canonical text parses back to the same workflow");
    assert_eq!(canonical_text(&reparsed), text, "canonicalization is idempotent");

    let headers: Vec<&str> =
        text.lines().filter(|l| l.starts_with('[') && l.ends_with(']')).collect();
    let mut sorted = headers.clone();
    sorted.sort();
    assert_eq!(headers, sorted, "sections are sorted");
    assert!(text.ends_with('\n'));
    assert!(!text.contains('\r'));
}

#[test]
fn semantically_equal_documents_share_a_digest() {
    let w1 = parse_workflow(TWO_HOST).unwrap();

    // Same content, different section order, different comments and spacing.
    let mut shuffled = String::new();
    let mut sections: Vec<&str> = TWO_HOST.trim_start().split("\n[").collect();
    sections.reverse();
    for (i, s) in sections.iter().enumerate() {
        if i + 1 == sections.len() {
            shuffled.push_str(s); // the original first section, already has `[`
        } else {
            shuffled.push('[');
            shuffled.push_str(s);
        }
        shuffled.push('\n');
    }
    let w2 = parse_workflow(&shuffled).unwrap();
    assert_eq!(w1, w2);
    assert_eq!(canonical_digest(&w1).unwrap(), canonical_digest(&w2).unwrap());

    let mut reseeded = w1.clone();
    reseeded.seed = 8;
    assert_ne!(canonical_digest(&w1).unwrap(), canonical_digest(&reseeded).unwrap());
}

#[test]
fn digest_matches_external_sha256sum() {
    let w = parse_workflow(TWO_HOST).unwrap();
    let text = canonical_text(&w);
    let digest = canonical_digest(&w).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("canonical.xanthus");
    std::fs::write(&path, &text).unwrap();
    let out = Command::new("sha256sum").arg(&path).output().unwrap();
    assert!(out.status.success());
    let external = String::from_utf8(out.stdout).unwrap();
    let external = external.split_whitespace().next().unwrap();
    assert_eq!(digest.as_str(), external);
    assert_eq!(digest, Digest::of_bytes(text.as_bytes()));
}

#[test]
fn canonical_digest_refuses_broken_workflows() {
    let mut w = parse_workflow(TWO_HOST).unwrap();
    w.jobs[0].tasks.get_mut("client").unwrap()[0].script = "missing".into();
    let diags = canonical_digest(&w).unwrap_err();
    assert!(has_errors(&diags));
}

#[test]
fn validation_reports_dotted_paths() {
    let mut w = parse_workflow(TWO_HOST).unwrap();
    w.jobs[0].tasks.get_mut("client").unwrap()[2].script = "missing".into();
    let diags = validate_structure(&w);
    let hit = diags
        .iter()
        .find(|d| d.path == "jobs.attack.tasks.client[2]")
        .unwrap_or_else(|| panic!("no diagnostic for the bad task in {diags:?}"));
    assert_eq!(hit.severity, Severity::Error);
    assert!(hit.message.contains("missing"));
}

#[test]
fn validation_catches_cycles_and_bad_references() {
    let doc = "
[workflow]
name = \"x\"

[vm.a]
image = \"b\"

[vm.b]
image = \"b\"

[script.s]
inline = \"y\"

[job.j]
tasks = { a = [\"s\"], b = [\"s\"] }
order = [\"a:0 -> b:0\", \"b:0 -> a:0\"]
";
    let w = parse_workflow(doc).unwrap();
    let diags = validate_structure(&w);
    assert!(
        diags.iter().any(|d| d.path == "jobs.j.order" && d.message.contains("cycle")),
        "diags: {diags:?}"
    );

    let doc = "
[workflow]
name = \"x\"

[vm.a]
image = \"b\"

[script.s]
inline = \"y\"

[job.j]
tasks = { a = [\"s\"] }
order = [\"a:0 -> a:5\"]
outputs = [{ name = \"o\", remote = \"relative/path\", vm = \"ghost\" }]
collector = \"nope\"
";
    let w = parse_workflow(doc).unwrap();
    let diags = validate_structure(&w);
    let paths: Vec<&str> = diags.iter().map(|d| d.path.as_str()).collect();
    assert!(paths.contains(&"jobs.j.order[0]"), "diags: {diags:?}");
    assert!(paths.contains(&"jobs.j.outputs[0].remote"), "diags: {diags:?}");
    assert!(paths.contains(&"jobs.j.outputs[0].vm"), "diags: {diags:?}");
    assert!(paths.contains(&"jobs.j.collector"), "diags: {diags:?}");
}

#[test]
fn reserved_collector_name_is_rejected() {
    let doc = "
[workflow]
name = \"x\"

[vm.a]
image = \"b\"

[script.s]
inline = \"y\"

[collector.synthetic]
install = \"s\"
start = \"s\"
stop = \"s\"
export = \"s\"
trace_outputs = [\"/t.log\"]

[job.j]
tasks = { a = [\"s\"] }
";
    let w = parse_workflow(doc).unwrap();
    let diags = validate_structure(&w);
    assert!(
        diags.iter().any(|d| d.severity == Severity::Error && d.message.contains("reserved")),
        "diags: {diags:?}"
    );
}

#[test]
fn file_checks_use_the_workflow_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("files")).unwrap();
    std::fs::write(dir.path().join("files/payload.bin"), b"pp").unwrap();

    let doc = "
[workflow]
name = \"x\"

[vm.a]
image = \"b\"

[script.s]
file = \"files/setup.sh\"

[job.j]
tasks = { a = [\"s\"] }
inputs = [
  { local = \"files/payload.bin\", remote = \"/p\", vm = \"a\" },
  { local = \"files/gone.bin\", remote = \"/q\", vm = \"a\" },
  { local = \"/etc/passwd\", remote = \"/r\", vm = \"a\" },
  { local = \"../escape\", remote = \"/s\", vm = \"a\" },
]
";
    let w = parse_workflow(doc).unwrap();
    let diags = validate_workflow(&w, dir.path());
    let errors: Vec<&Diagnostic> =
        diags.iter().filter(|d| d.severity == Severity::Error).collect();
    assert!(
        errors.iter().any(|d| d.path == "scripts.s.file" && d.message.contains("not found")),
        "diags: {diags:?}"
    );
    assert!(
        errors.iter().any(|d| d.path == "jobs.j.inputs[1].local" && d.message.contains("not found")),
        "diags: {diags:?}"
    );
    assert!(
        errors.iter().any(|d| d.path == "jobs.j.inputs[2].local"),
        "absolute input path must be rejected: {diags:?}"
    );
    assert!(
        errors.iter().any(|d| d.path == "jobs.j.inputs[3].local"),
        "parent traversal must be rejected: {diags:?}"
    );
    assert!(
        !errors.iter().any(|d| d.path == "jobs.j.inputs[0].local"),
        "existing input must pass: {diags:?}"
    );

    std::fs::write(dir.path().join("files/setup.sh"), b"echo ok\n").unwrap();
    let diags = validate_workflow(&w, dir.path());
    assert!(!diags.iter().any(|d| d.path == "scripts.s.file"), "diags: {diags:?}");
}

#[test]
fn unused_declarations_warn() {
    let doc = "
[workflow]
name = \"x\"

[vm.a]
image = \"b\"

[vm.spare]
image = \"b\"

[script.s]
inline = \"y\"

[script.orphan]
inline = \"z\"

[job.j]
tasks = { a = [\"s\"] }
";
    let w = parse_workflow(doc).unwrap();
    let diags = validate_structure(&w);
    assert!(!has_errors(&diags), "diags: {diags:?}");
    assert!(diags.iter().any(|d| d.path == "vms.spare" && d.severity == Severity::Warning));
    assert!(diags.iter().any(|d| d.path == "scripts.orphan" && d.severity == Severity::Warning));
}

mod round_trip {
    use super::*;
    use proptest::prelude::*;

    fn ident() -> impl Strategy<Value = String> {
        "[a-z_][a-z0-9_-]{0,6}"
    }

    fn text() -> impl Strategy<Value = String> {
        prop_oneof![
            Just(String::new()),
            Just("\n".to_string()),
            Just("a\"b".to_string()),
            Just("\\".to_string()),
            Just("\"\"\"".to_string()),
            Just("line1\nline2\n".to_string()),
            Just("ends with a quote\"".to_string()),
            Just("tab\there".to_string()),
            Just("\r\nmixed endings\n".to_string()),
            Just("x\n\"\"\"\ny".to_string()),
            Just("ünïcode €".to_string()),
            "[ -~]{0,24}",
            any::<String>().prop_map(|s| s.chars().take(12).collect()),
        ]
    }

    fn image() -> impl Strategy<Value = ImageSource> {
        prop_oneof![
            "[a-z][a-z0-9/@._-]{0,12}".prop_map(|coordinate| ImageSource::Registry { coordinate }),
            "[ -~]{0,12}".prop_map(|path| ImageSource::LocalPath { path }),
            "[a-z0-9-]{1,10}".prop_map(|id| ImageSource::CloudImage { id }),
        ]
    }

    fn vm_spec() -> impl Strategy<Value = VmSpec> {
        (image(), proptest::option::of(text()), any::<u64>(), any::<u64>(), proptest::collection::vec(ident(), 0..3))
            .prop_map(|(image, ip, cpus, memory_mb, config_scripts)| VmSpec {
                name: String::new(),
                image,
                ip,
                cpus,
                memory_mb,
                config_scripts,
            })
    }

    fn script() -> impl Strategy<Value = Script> {
        (
            prop_oneof![
                text().prop_map(ScriptSource::Inline),
                "[ -~]{0,16}".prop_map(ScriptSource::File),
            ],
            prop_oneof![Just(Interpreter::Shell), Just(Interpreter::CollectorDirective)],
        )
            .prop_map(|(source, interpreter)| Script { name: String::new(), source, interpreter })
    }

    fn collector() -> impl Strategy<Value = CollectorSpec> {
        (ident(), ident(), ident(), ident(), proptest::collection::vec(text(), 1..3)).prop_map(
            |(install, start, stop, export, trace_outputs)| CollectorSpec {
                name: String::new(),
                install,
                start,
                stop,
                export,
                trace_outputs,
            },
        )
    }

    fn task_ref() -> impl Strategy<Value = TaskRef> {
        (
            ident(),
            proptest::option::of(ident()),
            proptest::option::of(ident()),
            proptest::collection::btree_map("[A-Z_][A-Z0-9_]{0,5}", text(), 0..3),
        )
            .prop_map(|(script, before_hook, after_hook, env)| TaskRef {
                script,
                before_hook,
                after_hook,
                env,
            })
    }

    fn task_id() -> impl Strategy<Value = TaskId> {
        (ident(), 0usize..10).prop_map(|(vm, index)| TaskId { vm, index })
    }

    fn job() -> impl Strategy<Value = Job> {
        let inputs = proptest::collection::vec(
            (text(), text(), ident()).prop_map(|(local, remote, vm)| StagedFile { local, vm, remote }),
            0..3,
        );
        let outputs = proptest::collection::vec(
            (ident(), text(), ident()).prop_map(|(name, remote, vm)| ExpectedOutput { vm, remote, name }),
            0..3,
        );
        let order = proptest::collection::vec(
            (task_id(), task_id()).prop_map(|(before, after)| OrderEdge { before, after }),
            0..3,
        );
        (
            any::<u64>(),
            proptest::collection::btree_map(ident(), proptest::collection::vec(task_ref(), 1..3), 1..3),
            inputs,
            outputs,
            order,
            prop_oneof![Just(FailurePolicy::Abort), Just(FailurePolicy::Continue)],
            proptest::option::of(ident()),
        )
            .prop_map(|(iterations, tasks, inputs, outputs, order, on_failure, collector)| Job {
                name: String::new(),
                iterations,
                tasks,
                inputs,
                outputs,
                order,
                on_failure,
                collector,
            })
    }

    fn publish_target() -> impl Strategy<Value = PublishTarget> {
        (
            prop_oneof![Just(TargetKind::Github), Just(TargetKind::Dataverse)],
            text(),
            "[A-Z_][A-Z0-9_]{0,8}",
            any::<u64>(),
        )
            .prop_map(|(kind, locator, auth_env, lfs_threshold_bytes)| PublishTarget {
                kind,
                locator,
                auth_env,
                lfs_threshold_bytes,
            })
    }

    fn workflow() -> impl Strategy<Value = Workflow> {
        (
            (
                ident(),
                any::<u64>(),
                prop_oneof![
                    Just(Mode::Mock),
                    Just(Mode::Local),
                    Just(Mode::ManagedVm),
                    Just(Mode::Cloud)
                ],
                any::<bool>(),
            ),
            proptest::collection::btree_map(ident(), vm_spec(), 0..3),
            proptest::collection::btree_map(ident(), script(), 0..3),
            proptest::collection::btree_map(ident(), collector(), 0..2),
            proptest::collection::btree_map(ident(), job(), 0..3),
            proptest::collection::vec(publish_target(), 0..3),
        )
            .prop_map(|((name, seed, mode, reverse), mut vms, mut scripts, mut collectors, jobs, publish_targets)| {
                for (n, v) in vms.iter_mut() {
                    v.name = n.clone();
                }
                for (n, s) in scripts.iter_mut() {
                    s.name = n.clone();
                }
                collectors.retain(|n, _| n != SYNTHETIC_COLLECTOR);
                for (n, c) in collectors.iter_mut() {
                    c.name = n.clone();
                }
                let mut jobs: Vec<Job> = jobs
                    .into_iter()
                    .map(|(n, mut j)| {
                        j.name = n;
                        j
                    })
                    .collect();
                if reverse {
                    jobs.reverse(); // execution order is independent of name order
                }
                Workflow { name, seed, mode, vms, scripts, collectors, jobs, publish_targets }
            })
    }

    proptest! {
        /// parse(canonical(w)) == w and canonical is idempotent, for
        /// arbitrary content including hostile strings.
        #[test]
        fn canonical_round_trips(w in workflow()) {
            let text = canonical_text(&w);
            let parsed = parse_workflow(&text)
                .map_err(|e| TestCaseError::fail(format!("reparse failed: {e}\n---\n{text}")))?;
            prop_assert_eq!(&parsed, &w);
            prop_assert_eq!(canonical_text(&parsed), text);
        }

        /// The parser never panics, whatever bytes it is fed.
        #[test]
        fn parser_total_on_arbitrary_input(s in any::<String>()) {
            let _ = parse_workflow(&s);
        }

        /// Digest is exactly the sha256 of the canonical bytes.
        #[test]
        fn digest_is_sha256_of_canonical_bytes(seed in any::<u64>()) {
            let mut w = parse_workflow(
                "[workflow]\nname = \"x\"\n\n[vm.a]\nimage = \"b\"\n\n[script.s]\ninline = \"y\"\n\n[job.j]\ntasks = { a = [\"s\"] }\n",
            ).unwrap();
            w.seed = seed;
            let digest = canonical_digest(&w).unwrap();
            prop_assert_eq!(digest, Digest::of_bytes(canonical_text(&w).as_bytes()));
        }
    }

    #[test]
    fn env_keys_round_trip() {
        let mut env = BTreeMap::new();
        env.insert("PATH_EXTRA".to_string(), "with \"quotes\" and\nnewline".to_string());
        let w = Workflow {
            name: "envcase".into(),
            seed: 0,
            mode: Mode::Mock,
            vms: BTreeMap::from([(
                "a".to_string(),
                VmSpec {
                    name: "a".into(),
                    image: ImageSource::Registry { coordinate: "b".into() },
                    ip: None,
                    cpus: 1,
                    memory_mb: 512,
                    config_scripts: vec![],
                },
            )]),
            scripts: BTreeMap::from([(
                "s".to_string(),
                Script {
                    name: "s".into(),
                    source: ScriptSource::Inline("y".into()),
                    interpreter: Interpreter::Shell,
                },
            )]),
            collectors: BTreeMap::new(),
            jobs: vec![Job {
                name: "j".into(),
                iterations: 1,
                tasks: BTreeMap::from([(
                    "a".to_string(),
                    vec![TaskRef { script: "s".into(), before_hook: None, after_hook: None, env }],
                )]),
                inputs: vec![],
                outputs: vec![],
                order: vec![],
                on_failure: FailurePolicy::Abort,
                collector: None,
            }],
            publish_targets: vec![],
        };
        let text = canonical_text(&w);
        let parsed = parse_workflow(&text).unwrap();
        assert_eq!(parsed, w);
    }
}
