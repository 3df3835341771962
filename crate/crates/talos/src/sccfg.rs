//! System-call trace log and the directed graph over call transitions
//! used as the runtime proof-of-execution reference.
//!
//! A graph is `G = (V, E)`: `V` the set of system-call names observed,
//! `E` the set of ordered transition pairs between consecutive calls.
//! Verification is subsumption — an observed graph passes iff every node
//! and edge appears in the reference — with the mandatory resume marker
//! enforced separately at the protocol layer.

use std::collections::BTreeSet;

use crate::crypto::sha256;

/// Marker syscall the guest runtime emits once its volatile state is
/// fully reloaded.
pub const RESUME_MARKER: &str = "talos_state_resumed";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("trace already terminated")]
    TraceTerminated,
    #[error("malformed trace file: {0}")]
    MalformedTraceFile(String),
}

/// One recorded system call: order, name, and a digest of its serialized
/// parameters. Raw parameters stay out of attestation evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SysCallEvent {
    pub sequence_no: u64,
    pub name: String,
    pub params_digest: [u8; 32],
}

/// Append-only event log, closed by `terminate`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceLog {
    pub events: Vec<SysCallEvent>,
    pub terminated: bool,
}

impl TraceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: &str, params: &[u8]) -> Result<(), TraceError> {
        if self.terminated {
            return Err(TraceError::TraceTerminated);
        }
        self.events.push(SysCallEvent {
            sequence_no: self.events.len() as u64,
            name: name.to_string(),
            params_digest: sha256(params),
        });
        Ok(())
    }

    pub fn terminate(&mut self) {
        self.terminated = true;
    }

    /// The prefix up to and including the first occurrence of `marker`.
    /// If the marker never appears the whole log is returned flagged, and
    /// the caller decides — at the protocol layer absence fails verification.
    pub fn until_marker(&self, marker: &str) -> (Vec<SysCallEvent>, MarkerOutcome) {
        for (i, event) in self.events.iter().enumerate() {
            if event.name == marker {
                return (self.events[..=i].to_vec(), MarkerOutcome::Seen);
            }
        }
        (self.events.clone(), MarkerOutcome::MarkerNotSeen)
    }

    /// One event per line `<seq> <name> <params_digest_hex>`, closed by `END`.
    pub fn to_file_format(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&format!(
                "{} {} {}\n",
                e.sequence_no,
                e.name,
                hex::encode(e.params_digest)
            ));
        }
        out.push_str("END\n");
        out
    }

    pub fn from_file_format(text: &str) -> Result<Self, TraceError> {
        let mut events = Vec::new();
        let mut saw_end = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "END" {
                saw_end = true;
                break;
            }
            let mut parts = line.split_whitespace();
            let seq = parts
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| TraceError::MalformedTraceFile(format!("bad seq in {line:?}")))?;
            let name = parts.next().ok_or_else(|| {
                TraceError::MalformedTraceFile(format!("missing name in {line:?}"))
            })?;
            let digest_hex = parts.next().ok_or_else(|| {
                TraceError::MalformedTraceFile(format!("missing digest in {line:?}"))
            })?;
            let digest = hex::decode(digest_hex)
                .ok()
                .and_then(|b| <[u8; 32]>::try_from(b).ok())
                .ok_or_else(|| TraceError::MalformedTraceFile(format!("bad digest in {line:?}")))?;
            if seq != events.len() as u64 {
                return Err(TraceError::MalformedTraceFile(format!(
                    "non-sequential seq {seq}"
                )));
            }
            events.push(SysCallEvent {
                sequence_no: seq,
                name: name.to_string(),
                params_digest: digest,
            });
        }
        if !saw_end {
            return Err(TraceError::MalformedTraceFile(
                "missing END terminator".into(),
            ));
        }
        Ok(TraceLog {
            events,
            terminated: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerOutcome {
    Seen,
    MarkerNotSeen,
}

/// Directed graph over system-call names. Self-edges are legal (repeated
/// calls); set semantics throughout.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SysCallGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
}

impl SysCallGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_edge(&mut self, from: &str, to: &str) {
        self.nodes.insert(from.to_string());
        self.nodes.insert(to.to_string());
        self.edges.insert((from.to_string(), to.to_string()));
    }

    pub fn insert_node(&mut self, node: &str) {
        self.nodes.insert(node.to_string());
    }

    pub fn contains_node(&self, node: &str) -> bool {
        self.nodes.contains(node)
    }

    /// Canonical byte encoding: u32-LE node count, nodes sorted
    /// lexicographically (each u32-LE-length-prefixed), u32-LE edge count,
    /// edges sorted by (from, to).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        for node in &self.nodes {
            out.extend_from_slice(&(node.len() as u32).to_le_bytes());
            out.extend_from_slice(node.as_bytes());
        }
        out.extend_from_slice(&(self.edges.len() as u32).to_le_bytes());
        for (from, to) in &self.edges {
            out.extend_from_slice(&(from.len() as u32).to_le_bytes());
            out.extend_from_slice(from.as_bytes());
            out.extend_from_slice(&(to.len() as u32).to_le_bytes());
            out.extend_from_slice(to.as_bytes());
        }
        out
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Option<Self> {
        fn take_str(bytes: &[u8], cursor: &mut usize) -> Option<String> {
            let len_end = cursor.checked_add(4)?;
            let len = u32::from_le_bytes(bytes.get(*cursor..len_end)?.try_into().ok()?) as usize;
            let end = len_end.checked_add(len)?;
            let s = std::str::from_utf8(bytes.get(len_end..end)?)
                .ok()?
                .to_string();
            *cursor = end;
            Some(s)
        }
        let mut cursor = 0usize;
        let node_count = u32::from_le_bytes(bytes.get(0..4)?.try_into().ok()?) as usize;
        cursor += 4;
        let mut graph = SysCallGraph::new();
        for _ in 0..node_count {
            let node = take_str(bytes, &mut cursor)?;
            graph.nodes.insert(node);
        }
        let edge_end = cursor.checked_add(4)?;
        let edge_count = u32::from_le_bytes(bytes.get(cursor..edge_end)?.try_into().ok()?) as usize;
        cursor = edge_end;
        for _ in 0..edge_count {
            let from = take_str(bytes, &mut cursor)?;
            let to = take_str(bytes, &mut cursor)?;
            if !graph.nodes.contains(&from) || !graph.nodes.contains(&to) {
                return None;
            }
            graph.edges.insert((from, to));
        }
        if cursor != bytes.len() {
            return None;
        }
        Some(graph)
    }
}

/// Builds the graph of an ordered event sequence: nodes are the names,
/// edges the consecutive transitions.
pub fn graph_from_trace(events: &[SysCallEvent]) -> SysCallGraph {
    let mut graph = SysCallGraph::new();
    for event in events {
        graph.nodes.insert(event.name.clone());
    }
    for pair in events.windows(2) {
        graph
            .edges
            .insert((pair[0].name.clone(), pair[1].name.clone()));
    }
    graph
}

/// A node or edge in the observed graph that the reference does not allow,
/// or a missing mandatory trace prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphDeviation {
    UnknownNode(String),
    UnknownEdge(String, String),
    MissingMandatoryPrefix(String),
}

impl std::fmt::Display for GraphDeviation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphDeviation::UnknownNode(n) => write!(f, "unknown node {n}"),
            GraphDeviation::UnknownEdge(a, b) => write!(f, "unknown edge ({a}, {b})"),
            GraphDeviation::MissingMandatoryPrefix(m) => write!(f, "marker {m} never observed"),
        }
    }
}

/// Empty result iff `observed` is node- and edge-subsumed by `reference`.
/// Each violation is reported once.
pub fn graph_verify(reference: &SysCallGraph, observed: &SysCallGraph) -> Vec<GraphDeviation> {
    let mut deviations = Vec::new();
    for node in observed.nodes.difference(&reference.nodes) {
        deviations.push(GraphDeviation::UnknownNode(node.clone()));
    }
    for (from, to) in observed.edges.difference(&reference.edges) {
        deviations.push(GraphDeviation::UnknownEdge(from.clone(), to.clone()));
    }
    deviations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_of(names: &[&str]) -> Vec<SysCallEvent> {
        let mut log = TraceLog::new();
        for n in names {
            log.record(n, b"").unwrap();
        }
        log.events
    }

    #[test]
    fn record_orders_and_digests() {
        let mut log = TraceLog::new();
        log.record("open", b"path=/x").unwrap();
        log.record("read", b"fd=3").unwrap();
        assert_eq!(log.events[0].sequence_no, 0);
        assert_eq!(log.events[0].name, "open");
        assert_eq!(log.events[1].sequence_no, 1);
        assert_eq!(log.events[1].name, "read");
        assert_eq!(log.events[0].params_digest, sha256(b"path=/x"));

        log.terminate();
        assert_eq!(log.record("write", b""), Err(TraceError::TraceTerminated));
    }

    #[test]
    fn identical_params_identical_digest() {
        let mut log = TraceLog::new();
        log.record("read", b"fd=3").unwrap();
        log.record("read", b"fd=3").unwrap();
        assert_eq!(log.events[0].params_digest, log.events[1].params_digest);
    }

    #[test]
    fn marker_prefix_cases() {
        let mut log = TraceLog::new();
        for n in ["open", "read", RESUME_MARKER, "write"] {
            log.record(n, b"").unwrap();
        }
        let (prefix, outcome) = log.until_marker(RESUME_MARKER);
        assert_eq!(outcome, MarkerOutcome::Seen);
        assert_eq!(prefix.len(), 3);
        assert_eq!(prefix[2].name, RESUME_MARKER);

        let (all, outcome) = log.until_marker("never_called");
        assert_eq!(outcome, MarkerOutcome::MarkerNotSeen);
        assert_eq!(all.len(), 4);

        let mut first = TraceLog::new();
        first.record(RESUME_MARKER, b"").unwrap();
        let (prefix, outcome) = first.until_marker(RESUME_MARKER);
        assert_eq!(outcome, MarkerOutcome::Seen);
        assert_eq!(prefix.len(), 1);
    }

    #[test]
    fn graph_from_trace_matches_definition() {
        let events = trace_of(&["open", "read", "read", "write", "close"]);
        let g = graph_from_trace(&events);
        let nodes: Vec<_> = g.nodes.iter().map(String::as_str).collect();
        assert_eq!(nodes, ["close", "open", "read", "write"]);
        let expected: BTreeSet<(String, String)> = [
            ("open", "read"),
            ("read", "read"),
            ("read", "write"),
            ("write", "close"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        assert_eq!(g.edges, expected);
    }

    #[test]
    fn graph_from_trace_degenerate() {
        assert_eq!(graph_from_trace(&[]), SysCallGraph::new());
        let g = graph_from_trace(&trace_of(&["open"]));
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn canonical_bytes_insertion_order_independent() {
        let mut a = SysCallGraph::new();
        a.insert_edge("read", "write");
        a.insert_edge("open", "read");
        let mut b = SysCallGraph::new();
        b.insert_edge("open", "read");
        b.insert_edge("read", "write");
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());

        b.insert_edge("write", "close");
        assert_ne!(a.canonical_bytes(), b.canonical_bytes());
    }

    #[test]
    fn canonical_bytes_empty_graph() {
        assert_eq!(SysCallGraph::new().canonical_bytes(), vec![0u8; 8]);
    }

    #[test]
    fn canonical_bytes_roundtrip() {
        let mut g = SysCallGraph::new();
        g.insert_edge("mmap", "read");
        g.insert_edge("read", RESUME_MARKER);
        g.insert_node("brk");
        let bytes = g.canonical_bytes();
        assert_eq!(SysCallGraph::from_canonical_bytes(&bytes).unwrap(), g);
    }

    #[test]
    fn verify_subsumption() {
        let mut reference = SysCallGraph::new();
        reference.insert_edge("open", "read");
        reference.insert_edge("read", "exec");

        assert!(graph_verify(&reference, &reference).is_empty());

        let mut observed = SysCallGraph::new();
        observed.insert_edge("read", "exec");
        assert!(graph_verify(&reference, &observed).is_empty());

        observed.insert_edge("read", "socket");
        let deviations = graph_verify(&reference, &observed);
        assert_eq!(deviations.len(), 2);
        assert!(deviations.contains(&GraphDeviation::UnknownNode("socket".to_string())));
        assert!(deviations.contains(&GraphDeviation::UnknownEdge(
            "read".to_string(),
            "socket".to_string()
        )));

        // Vacuous subsumption of the empty graph; emptiness is rejected at
        // the protocol layer by the mandatory marker.
        assert!(graph_verify(&reference, &SysCallGraph::new()).is_empty());
    }

    #[test]
    fn trace_file_roundtrip() {
        let mut log = TraceLog::new();
        log.record("open", b"p").unwrap();
        log.record(RESUME_MARKER, b"").unwrap();
        log.terminate();
        let text = log.to_file_format();
        assert!(text.ends_with("END\n"));
        let parsed = TraceLog::from_file_format(&text).unwrap();
        assert_eq!(parsed.events, log.events);
        assert!(TraceLog::from_file_format("0 open deadbeef\n").is_err());
    }
}
