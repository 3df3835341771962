//! System-call traces and their control-flow graphs: recording, the
//! mandatory resume marker, graph construction, canonical encoding, and
//! subsumption verification against a reference.
//!
//! ```bash
//! cargo run -p talos --example syscall_graph
//! ```

use talos::sccfg::{graph_from_trace, graph_verify, SysCallGraph, TraceLog, RESUME_MARKER};

fn main() {
    // A reload-phase trace as the guest runtime would emit it.
    let mut log = TraceLog::new();
    for (name, params) in [
        ("mmap", "len=4096"),
        ("open", "path=/state/blob"),
        ("read", "fd=3"),
        ("read", "fd=3"),
        (RESUME_MARKER, ""),
        ("write", "fd=1"),
    ] {
        log.record(name, params.as_bytes()).expect("record");
    }
    print!("{}", log.to_file_format());

    let (reload, outcome) = log.until_marker(RESUME_MARKER);
    println!(
        "marker outcome: {outcome:?}, reload prefix: {} events",
        reload.len()
    );

    let observed = graph_from_trace(&reload);
    println!(
        "observed graph: {} nodes, {} edges",
        observed.nodes.len(),
        observed.edges.len()
    );
    for (from, to) in &observed.edges {
        println!("  ({from}, {to})");
    }
    println!(
        "canonical bytes: {}",
        hex::encode(observed.canonical_bytes())
    );

    // The enrolled reference allows everything observed (plus a branch the
    // reload may skip); subsumption passes.
    let mut reference = observed.clone();
    reference.insert_edge("open", "fstat");
    reference.insert_edge("fstat", "read");
    assert!(graph_verify(&reference, &observed).is_empty());
    println!("\nsubsumption against the enrolled reference: ok");

    // An injected transition is flagged precisely.
    let mut tampered = observed.clone();
    tampered.insert_edge("read", "execve");
    for deviation in graph_verify(&reference, &tampered) {
        println!("deviation: {deviation}");
    }

    // Round-trip through the canonical encoding.
    let decoded = SysCallGraph::from_canonical_bytes(&observed.canonical_bytes()).expect("decode");
    assert_eq!(decoded, observed);
    println!("canonical encoding round-trips");
}
