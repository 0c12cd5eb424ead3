//! Shared helpers for integration tests: a strategy generating random
//! small processes over a fixed channel pool, and deterministic sampling.

use commnet::ast::{ChannelId, Process};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

pub fn arb_channel() -> impl Strategy<Value = ChannelId> {
    prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(ChannelId::new)
}

pub fn arb_process() -> impl Strategy<Value = Process> {
    let leaf = prop_oneof![
        Just(Process::Stop),
        (arb_channel(), arb_channel()).prop_map(|(a, b)| Process::Bridge(a, b)),
        arb_channel().prop_map(Process::Loser),
        arb_channel().prop_map(Process::Duplicator),
        arb_channel().prop_map(Process::Duploser),
        (arb_channel(), prop::collection::vec(arb_channel(), 0..3))
            .prop_map(|(a, targets)| Process::Distribute(a, targets)),
    ];
    leaf.prop_recursive(3, 16, 4, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(p, q)| Process::par(p, q)),
            (arb_channel(), inner).prop_map(|(ch, p)| Process::restrict(ch, p)),
        ]
    })
}

/// A fixed-seed sample, identical on every run.
pub fn sample_processes(count: usize) -> Vec<Process> {
    let mut runner = TestRunner::deterministic();
    let strategy = arb_process();
    (0..count)
        .map(|_| {
            strategy
                .new_tree(&mut runner)
                .expect("generation succeeds")
                .current()
        })
        .collect()
}
