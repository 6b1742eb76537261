//! Deterministic interleave of per-machine event logs.
//!
//! Machines record events with per-machine sequence numbers; wall-clock
//! interleave across machines is scheduler noise. The merged log is instead
//! fixed by causality: per-machine order, the setup barrier (no task event
//! before any machine's staging), and declared cross-machine order edges.
//! Causally unordered events are broken by (vm name, seq), so the merge is
//! a pure function of the per-machine logs.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::config::OrderEdge;
use crate::provider::Event;

/// One merged-log entry: an event tagged with the machine it happened on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmEvent {
    pub vm: String,
    #[serde(flatten)]
    pub event: Event,
}

/// One machine's events for an iteration, with phase boundaries.
#[derive(Debug, Clone)]
pub struct MachineLog {
    pub vm: String,
    pub events: Vec<Event>,
    /// Seq of the last setup event (staging, collector install/start);
    /// 0 when the machine recorded none.
    pub setup_end: u64,
    /// `(task index, first seq, last seq)` for tasks that recorded events.
    pub task_spans: Vec<(usize, u64, u64)>,
}

impl MachineLog {
    fn position(&self, seq: u64) -> Option<usize> {
        self.events.iter().position(|e| e.seq == seq)
    }

    fn first_task_seq(&self) -> Option<u64> {
        self.task_spans.iter().map(|&(_, first, _)| first).min()
    }

    fn task_span(&self, index: usize) -> Option<(u64, u64)> {
        self.task_spans.iter().find(|&&(i, _, _)| i == index).map(|&(_, f, l)| (f, l))
    }
}

/// Merges per-machine logs into one deterministic global order.
pub fn merge_events(logs: &[MachineLog], edges: &[OrderEdge]) -> Vec<VmEvent> {
    // Nodes are (log index, event index); ids are flattened.
    let mut offset = Vec::with_capacity(logs.len());
    let mut total = 0usize;
    for log in logs {
        offset.push(total);
        total += log.events.len();
    }
    let node = |li: usize, ei: usize| offset[li] + ei;

    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); total];
    let mut indegree: Vec<usize> = vec![0; total];
    let link = |succ: &mut Vec<Vec<usize>>, indegree: &mut Vec<usize>, a: usize, b: usize| {
        succ[a].push(b);
        indegree[b] += 1;
    };

    // Per-machine order.
    for (li, log) in logs.iter().enumerate() {
        for ei in 1..log.events.len() {
            link(&mut succ, &mut indegree, node(li, ei - 1), node(li, ei));
        }
    }

    // Setup barrier: staging and collector bring-up on any machine precede
    // every task event on every machine.
    for (ai, a) in logs.iter().enumerate() {
        if a.setup_end == 0 {
            continue;
        }
        let Some(last_setup) = a.position(a.setup_end) else { continue };
        for (bi, b) in logs.iter().enumerate() {
            if ai == bi {
                continue; // per-machine order already covers it
            }
            if let Some(first) = b.first_task_seq().and_then(|s| b.position(s)) {
                link(&mut succ, &mut indegree, node(ai, last_setup), node(bi, first));
            }
        }
    }

    // Declared cross-machine edges: the before-task's last event precedes
    // the after-task's first event.
    for edge in edges {
        let before = logs.iter().enumerate().find(|(_, l)| l.vm == edge.before.vm);
        let after = logs.iter().enumerate().find(|(_, l)| l.vm == edge.after.vm);
        let (Some((ai, a)), Some((bi, b))) = (before, after) else { continue };
        let (Some((_, a_last)), Some((b_first, _))) =
            (a.task_span(edge.before.index), b.task_span(edge.after.index))
        else {
            continue; // a side recorded no events (skipped, or a terse backend)
        };
        let (Some(ae), Some(be)) = (a.position(a_last), b.position(b_first)) else { continue };
        link(&mut succ, &mut indegree, node(ai, ae), node(bi, be));
    }

    // Kahn's algorithm; the ready heap breaks ties by (vm name, seq).
    let mut ready: BinaryHeap<Reverse<(&str, u64, usize, usize)>> = BinaryHeap::new();
    for (li, log) in logs.iter().enumerate() {
        for ei in 0..log.events.len() {
            if indegree[node(li, ei)] == 0 {
                ready.push(Reverse((log.vm.as_str(), log.events[ei].seq, li, ei)));
            }
        }
    }
    let mut merged = Vec::with_capacity(total);
    while let Some(Reverse((_, _, li, ei))) = ready.pop() {
        merged.push(VmEvent { vm: logs[li].vm.clone(), event: logs[li].events[ei].clone() });
        for &n in &succ[node(li, ei)] {
            indegree[n] -= 1;
            if indegree[n] == 0 {
                let (bli, bei) = owner(&offset, logs, n);
                ready.push(Reverse((logs[bli].vm.as_str(), logs[bli].events[bei].seq, bli, bei)));
            }
        }
    }
    debug_assert_eq!(merged.len(), total, "merge graph must be acyclic");
    merged
}

fn owner(offset: &[usize], logs: &[MachineLog], node: usize) -> (usize, usize) {
    for (li, log) in logs.iter().enumerate().rev() {
        if node >= offset[li] {
            debug_assert!(node - offset[li] < log.events.len());
            return (li, node - offset[li]);
        }
    }
    unreachable!("node id out of range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskId;
    use crate::provider::EventKind;
    use proptest::prelude::*;

    fn ev(seq: u64, subject: &str) -> Event {
        Event { seq, kind: EventKind::Exec, subject: subject.into(), detail: String::new() }
    }

    fn log(vm: &str, events: Vec<Event>, setup_end: u64, spans: Vec<(usize, u64, u64)>) -> MachineLog {
        MachineLog { vm: vm.into(), events, setup_end, task_spans: spans }
    }

    fn edge(bvm: &str, bi: usize, avm: &str, ai: usize) -> OrderEdge {
        OrderEdge {
            before: TaskId { vm: bvm.into(), index: bi },
            after: TaskId { vm: avm.into(), index: ai },
        }
    }

    fn order_of(merged: &[VmEvent]) -> Vec<(&str, u64)> {
        merged.iter().map(|m| (m.vm.as_str(), m.event.seq)).collect()
    }

    #[test]
    fn without_edges_the_order_is_vm_then_seq() {
        let merged = merge_events(
            &[
                log("b", vec![ev(1, "x"), ev(2, "y")], 0, vec![(0, 1, 2)]),
                log("a", vec![ev(1, "z")], 0, vec![(0, 1, 1)]),
            ],
            &[],
        );
        assert_eq!(order_of(&merged), vec![("a", 1), ("b", 1), ("b", 2)]);
    }

    #[test]
    fn order_edges_override_name_order() {
        // server task 0 must precede client task 0 even though
        // "client" < "server".
        let merged = merge_events(
            &[
                log("client", vec![ev(1, "cli")], 0, vec![(0, 1, 1)]),
                log("server", vec![ev(1, "srv")], 0, vec![(0, 1, 1)]),
            ],
            &[edge("server", 0, "client", 0)],
        );
        assert_eq!(order_of(&merged), vec![("server", 1), ("client", 1)]);
    }

    #[test]
    fn setup_events_precede_every_task_event() {
        // zz's staging must land before aa's task despite the name order.
        let merged = merge_events(
            &[
                log("aa", vec![ev(1, "stage"), ev(2, "task")], 1, vec![(0, 2, 2)]),
                log("zz", vec![ev(1, "stage"), ev(2, "task")], 1, vec![(0, 2, 2)]),
            ],
            &[],
        );
        assert_eq!(
            order_of(&merged),
            vec![("aa", 1), ("zz", 1), ("aa", 2), ("zz", 2)]
        );
    }

    #[test]
    fn chained_edges_interleave_three_machines() {
        let merged = merge_events(
            &[
                log("a", vec![ev(1, "t0"), ev(2, "t1")], 0, vec![(0, 1, 1), (1, 2, 2)]),
                log("b", vec![ev(1, "t0")], 0, vec![(0, 1, 1)]),
            ],
            &[edge("b", 0, "a", 1)], // b:0 between a:0 and a:1
        );
        assert_eq!(order_of(&merged), vec![("a", 1), ("b", 1), ("a", 2)]);
    }

    #[test]
    fn edges_to_eventless_tasks_are_ignored() {
        let merged = merge_events(
            &[
                log("a", vec![ev(1, "t0")], 0, vec![(0, 1, 1)]),
                log("b", vec![], 0, vec![]),
            ],
            &[edge("b", 0, "a", 0), edge("a", 0, "b", 0)],
        );
        assert_eq!(order_of(&merged), vec![("a", 1)]);
    }

    proptest! {
        // With no cross edges the merge must preserve every machine's own
        // order and equal the plain (vm, seq) sort.
        #[test]
        fn edge_free_merge_is_the_vm_seq_sort(sizes in proptest::collection::vec(0usize..6, 1..5)) {
            let logs: Vec<MachineLog> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let events = (1..=n as u64).map(|s| ev(s, "e")).collect();
                    log(&format!("vm{i}"), events, 0, vec![])
                })
                .collect();
            let merged = merge_events(&logs, &[]);
            let mut expect: Vec<(String, u64)> = logs
                .iter()
                .flat_map(|l| l.events.iter().map(|e| (l.vm.clone(), e.seq)))
                .collect();
            expect.sort();
            let got: Vec<(String, u64)> =
                merged.iter().map(|m| (m.vm.clone(), m.event.seq)).collect();
            prop_assert_eq!(got, expect);
        }
    }
}
