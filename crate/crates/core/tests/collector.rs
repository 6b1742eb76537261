//! Collector lifecycle and trace harvesting against live machine handles.

use std::collections::BTreeMap;

use tempfile::TempDir;
use xanthus_core::collector::{
    parse_event_log, Collector, SYNTHETIC_TRACE_PATH,
};
use xanthus_core::config::{ImageSource, Interpreter, Mode, VmSpec};
use xanthus_core::digest::Digest;
use xanthus_core::provider::{EventKind, LaunchCtx, MachineHandle, Provider, ResolvedScript};

fn vm(name: &str) -> VmSpec {
    VmSpec {
        name: name.into(),
        image: ImageSource::Registry { coordinate: "debian/bookworm64".into() },
        ip: None,
        cpus: 1,
        memory_mb: 512,
        config_scripts: vec![],
    }
}

fn directive(name: &str, body: &str) -> ResolvedScript {
    ResolvedScript {
        name: name.into(),
        body: body.into(),
        interpreter: Interpreter::CollectorDirective,
    }
}

fn shell(name: &str, body: &str) -> ResolvedScript {
    ResolvedScript { name: name.into(), body: body.into(), interpreter: Interpreter::Shell }
}

fn ctx() -> LaunchCtx {
    LaunchCtx { run_id: "20260101-000000-aabbccdd".into(), job: "j".into(), iteration: 1, seed: 7 }
}

fn mock_machine(dir: &TempDir, name: &str) -> MachineHandle {
    let p = Provider::new(
        Mode::Mock,
        &dir.path().join("cache"),
        &dir.path().join("machines"),
        dir.path(),
    )
    .unwrap();
    let (image, _) = p.materialize_image(&vm(name), &[]).unwrap();
    p.launch(&image, &vm(name), &ctx()).unwrap()
}

fn adapter(trace_outputs: &[&str], export_body: &str) -> Collector {
    Collector::Adapter {
        name: "tracer".into(),
        install: directive("tracer-install", "#xanthus: write /etc/tracer installed"),
        start: directive("tracer-start", "#xanthus: write /run/tracer on"),
        stop: directive("tracer-stop", "#xanthus: write /run/tracer off"),
        export: directive("tracer-export", export_body),
        trace_outputs: trace_outputs.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn synthetic_lifecycle_marks_phases_and_exports_the_log() {
    let dir = TempDir::new().unwrap();
    let mut h = mock_machine(&dir, "host");
    let c = Collector::Synthetic;

    assert_eq!(c.install(&mut h).unwrap().exit_code, 0);
    assert_eq!(c.start(&mut h).unwrap().exit_code, 0);
    h.exec_script(&directive("task", "#xanthus: write /out/x v-{job}-{iter}"), &BTreeMap::new())
        .unwrap();
    assert_eq!(c.stop(&mut h).unwrap().exit_code, 0);

    let snapshot = h.events().to_vec();
    let out = c.export(&mut h, &dir.path().join("traces")).unwrap();
    assert!(out.degraded.is_empty());
    assert_eq!(out.traces.len(), 1);

    let t = &out.traces[0];
    assert_eq!(t.vm, "host");
    assert_eq!(t.source, SYNTHETIC_TRACE_PATH);
    assert_eq!(t.lines, 4);
    let bytes = std::fs::read(&t.local).unwrap();
    assert_eq!(t.sha256, Digest::of_bytes(&bytes));
    assert_eq!(t.size, bytes.len() as u64);

    // The trace is the whole pre-export log, byte for byte.
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(
        text,
        "1 exec synthetic-install invoke\n\
         2 exec synthetic-start invoke\n\
         3 write /out/x v-j-1\n\
         4 exec synthetic-stop invoke\n"
    );
    assert_eq!(parse_event_log(&text).unwrap(), snapshot);
    h.destroy().unwrap();
}

#[test]
fn adapter_scripts_run_on_the_machine_and_traces_are_harvested() {
    let dir = TempDir::new().unwrap();
    let mut h = mock_machine(&dir, "host");
    let c = adapter(
        &["/var/log/audit.log", "/var/log/graph.json"],
        "#xanthus: write /var/log/audit.log lines\n\
         #xanthus: write /var/log/graph.json {}",
    );

    assert_eq!(c.install(&mut h).unwrap().exit_code, 0);
    assert_eq!(c.start(&mut h).unwrap().exit_code, 0);
    assert_eq!(c.stop(&mut h).unwrap().exit_code, 0);
    let out = c.export(&mut h, &dir.path().join("traces")).unwrap();
    assert!(out.degraded.is_empty(), "degraded: {:?}", out.degraded);

    let names: Vec<String> = out
        .traces
        .iter()
        .map(|t| t.local.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["audit.log", "graph.json"]);
    assert_eq!(std::fs::read(&out.traces[0].local).unwrap(), b"lines");
    for t in &out.traces {
        assert_eq!(t.sha256, Digest::of_bytes(std::fs::read(&t.local).unwrap()));
    }

    // The lifecycle ran on the machine: stop left its marker.
    let marker = dir.path().join("marker");
    h.stage_out("/run/tracer", &marker).unwrap();
    assert_eq!(std::fs::read_to_string(&marker).unwrap(), "off");
    h.destroy().unwrap();
}

#[test]
fn missing_declared_trace_degrades_instead_of_failing() {
    let dir = TempDir::new().unwrap();
    let mut h = mock_machine(&dir, "host");
    let c = adapter(
        &["/var/log/real.log", "/var/log/ghost.log"],
        "#xanthus: write /var/log/real.log captured",
    );
    let out = c.export(&mut h, &dir.path().join("traces")).unwrap();
    assert_eq!(out.traces.len(), 1);
    assert_eq!(out.traces[0].source, "/var/log/real.log");
    assert_eq!(out.degraded.len(), 1);
    assert!(out.degraded[0].contains("/var/log/ghost.log"), "note: {}", out.degraded[0]);
    assert!(out.degraded[0].contains("host"), "note: {}", out.degraded[0]);
    h.destroy().unwrap();
}

#[test]
fn failing_export_script_degrades_but_still_harvests() {
    let dir = TempDir::new().unwrap();
    let mut h = mock_machine(&dir, "host");
    // The trace was written while tasks ran; the export scrape itself dies.
    h.exec_script(&directive("task", "#xanthus: write /var/log/audit.log partial"), &BTreeMap::new())
        .unwrap();
    let c = adapter(&["/var/log/audit.log"], "#xanthus: exit 3");
    let out = c.export(&mut h, &dir.path().join("traces")).unwrap();
    assert_eq!(out.traces.len(), 1);
    assert_eq!(out.degraded.len(), 1);
    assert!(out.degraded[0].contains("exited 3"), "note: {}", out.degraded[0]);
    h.destroy().unwrap();
}

#[test]
fn export_does_not_change_task_outputs() {
    let dir = TempDir::new().unwrap();
    let mut h = mock_machine(&dir, "host");
    h.exec_script(&directive("task", "#xanthus: write /out/result r-{seed}"), &BTreeMap::new())
        .unwrap();

    let before = dir.path().join("before");
    h.stage_out("/out/result", &before).unwrap();
    let digest_before = Digest::of_file(&before).unwrap();

    Collector::Synthetic.export(&mut h, &dir.path().join("traces")).unwrap();

    let after = dir.path().join("after");
    h.stage_out("/out/result", &after).unwrap();
    assert_eq!(Digest::of_file(&after).unwrap(), digest_before);
    h.destroy().unwrap();
}

#[test]
fn machines_export_under_their_own_names() {
    let dir = TempDir::new().unwrap();
    let mut a = mock_machine(&dir, "client");
    let mut b = mock_machine(&dir, "server");
    b.exec_script(&directive("extra", "#xanthus: write /tmp/x y"), &BTreeMap::new()).unwrap();

    let ta = Collector::Synthetic.export(&mut a, &dir.path().join("ta")).unwrap().traces;
    let tb = Collector::Synthetic.export(&mut b, &dir.path().join("tb")).unwrap().traces;
    assert_eq!(ta[0].vm, "client");
    assert_eq!(tb[0].vm, "server");
    assert_ne!(ta[0].sha256, tb[0].sha256, "different activity, different trace");
    assert_eq!(ta[0].lines, 0, "idle machine has an empty log");
    assert_eq!(tb[0].lines, 1);
    a.destroy().unwrap();
    b.destroy().unwrap();
}

#[test]
fn identical_activity_yields_identical_trace_bytes() {
    let run = |dir: &TempDir, tag: &str| {
        let mut h = mock_machine(dir, "host");
        let c = Collector::Synthetic;
        c.install(&mut h).unwrap();
        c.start(&mut h).unwrap();
        h.exec_script(&directive("work", "#xanthus: write /out/a {seed}"), &BTreeMap::new())
            .unwrap();
        c.stop(&mut h).unwrap();
        let traces = c.export(&mut h, &dir.path().join(tag)).unwrap().traces;
        h.destroy().unwrap();
        traces[0].sha256.clone()
    };
    let dir = TempDir::new().unwrap();
    assert_eq!(run(&dir, "one"), run(&dir, "two"));
}

#[test]
fn duplicate_trace_basenames_get_distinct_local_names() {
    let dir = TempDir::new().unwrap();
    let mut h = mock_machine(&dir, "host");
    let c = adapter(
        &["/a/audit.log", "/b/audit.log"],
        "#xanthus: write /a/audit.log first\n#xanthus: write /b/audit.log second",
    );
    let out = c.export(&mut h, &dir.path().join("traces")).unwrap();
    let names: Vec<String> = out
        .traces
        .iter()
        .map(|t| t.local.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["audit.log", "2-audit.log"]);
    assert_eq!(std::fs::read(&out.traces[1].local).unwrap(), b"second");
    h.destroy().unwrap();
}

#[test]
fn synthetic_collector_works_on_the_local_backend() {
    let dir = TempDir::new().unwrap();
    let p = Provider::new(
        Mode::Local,
        &dir.path().join("cache"),
        &dir.path().join("machines"),
        dir.path(),
    )
    .unwrap();
    let (image, _) = p.materialize_image(&vm("host"), &[]).unwrap();
    let mut h = p.launch(&image, &vm("host"), &ctx()).unwrap();

    let c = Collector::Synthetic;
    c.install(&mut h).unwrap();
    c.start(&mut h).unwrap();
    h.exec_script(&shell("work", "echo done > \"$XANTHUS_MACHINE_ROOT/out.txt\""), &BTreeMap::new())
        .unwrap();
    c.stop(&mut h).unwrap();

    let out = c.export(&mut h, &dir.path().join("traces")).unwrap();
    assert!(out.degraded.is_empty(), "degraded: {:?}", out.degraded);
    let text = std::fs::read_to_string(&out.traces[0].local).unwrap();
    let events = parse_event_log(&text).unwrap();
    assert_eq!(events.len(), 4);
    assert_eq!(events[2].kind, EventKind::Exec);
    assert_eq!(events[2].subject, "work");
    assert_eq!(events[2].detail, "exit=0");
    h.destroy().unwrap();
}
