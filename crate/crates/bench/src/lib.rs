//! Deterministic fixture generators shared by the criterion benches.
//!
//! Everything here is pure text generation so the benches control all
//! file-system placement themselves.

use std::fmt::Write;

/// A mock-mode workflow with `scripts` synthetic workloads spread over
/// two machines. Sizes scale linearly, which makes the generated text
/// useful for parser and canonicalization throughput measurements.
pub fn workflow_text(scripts: usize, iterations: u32) -> String {
    assert!(scripts >= 2, "need at least one script per machine");
    let mut t = String::new();
    writeln!(t, "[workflow]").unwrap();
    writeln!(t, "name = \"bench-fleet\"").unwrap();
    writeln!(t, "seed = 11").unwrap();
    writeln!(t, "mode = \"mock\"\n").unwrap();
    writeln!(t, "[vm.alpha]").unwrap();
    writeln!(t, "image = \"debian/bookworm64@12.2\"\n").unwrap();
    writeln!(t, "[vm.beta]").unwrap();
    writeln!(t, "image = \"debian/bookworm64@12.2\"").unwrap();

    for i in 0..scripts {
        writeln!(t, "\n[script.s{i}]").unwrap();
        writeln!(t, "inline = \"\"\"").unwrap();
        writeln!(t, "#xanthus: write /out/file-{i}.txt payload-{i}-{{job}}-{{iter}}-{{seed}}")
            .unwrap();
        writeln!(t, "probe round {i}").unwrap();
        writeln!(t, "\"\"\"").unwrap();
    }

    let list = |parity: usize| -> String {
        (0..scripts)
            .filter(|i| i % 2 == parity)
            .map(|i| format!("\"s{i}\""))
            .collect::<Vec<_>>()
            .join(", ")
    };
    writeln!(t, "\n[job.sweep]").unwrap();
    writeln!(t, "iterations = {iterations}").unwrap();
    writeln!(t, "tasks = {{ alpha = [{}], beta = [{}] }}", list(0), list(1)).unwrap();
    writeln!(t, "outputs = [").unwrap();
    writeln!(t, "  {{ name = \"file-0.txt\", remote = \"/out/file-0.txt\", vm = \"alpha\" }},")
        .unwrap();
    writeln!(t, "  {{ name = \"file-1.txt\", remote = \"/out/file-1.txt\", vm = \"beta\" }},")
        .unwrap();
    writeln!(t, "]").unwrap();
    writeln!(t, "order = [\"alpha:0 -> beta:0\"]").unwrap();

    writeln!(t, "\n[publish.0]").unwrap();
    writeln!(t, "kind = \"github\"").unwrap();
    writeln!(t, "locator = \"https://host.invalid/lab/results.git\"").unwrap();
    writeln!(t, "auth_env = \"XANTHUS_GITHUB_TOKEN\"").unwrap();
    t
}
