//! The multi-process shape of a migration, in one process: an
//! orchestrator and a source node serving on localhost TCP, enrollment,
//! then — with the orchestrator already shut down — a live migration.
//!
//! ```bash
//! cargo run -p talos --example tcp_migration
//! ```

use std::net::TcpListener;
use std::sync::Arc;

use talos::crypto::NodeKeyPair;
use talos::guest::GuestProgram;
use talos::harness::adversary::Adversary;
use talos::harness::{scenario, tcp, TempWorkspace};
use talos::node::{migration_service_measurement, Node};
use talos::orchestrator::Orchestrator;

fn main() {
    let workspace = TempWorkspace::new("tcp-example").expect("workspace");
    let platform = NodeKeyPair::generate().expect("platform key");

    // Orchestrator: profile the scenario-2 app, then serve enrollment.
    let app_dir = workspace.path().join("app");
    scenario::write_app_dir(&app_dir, 2).expect("fixture");
    let orchestrator = Arc::new(
        Orchestrator::new(platform.public_key(), migration_service_measurement())
            .expect("orchestrator"),
    );
    let program = Arc::new(GuestProgram::load(&app_dir).expect("program"));
    let profile = orchestrator
        .profile_application(&program)
        .expect("profiling run");
    orchestrator
        .register_profile(profile)
        .expect("profile registration");

    let orch_listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let orch_addr = orch_listener.local_addr().unwrap();
    let orch_handle = {
        let orchestrator = orchestrator.clone();
        std::thread::spawn(move || tcp::serve_orchestrator(orchestrator, orch_listener))
    };
    println!("orchestrator on {orch_addr}");

    // Two directory-backed nodes enroll over TCP.
    let source = Arc::new(
        Node::open(&workspace.path().join("smn"), "smn-1", platform.clone()).expect("source node"),
    );
    let target = Arc::new(
        Node::open(&workspace.path().join("tmn"), "tmn-1", platform).expect("target node"),
    );
    tcp::enroll_over_tcp(&source, orch_addr).expect("source enrollment");
    tcp::enroll_over_tcp(&target, orch_addr).expect("target enrollment");
    println!("both nodes enrolled");

    // The orchestrator leaves the trust path: drop its listener thread.
    drop(orch_handle);
    drop(orchestrator);
    println!("orchestrator stopped — migration proceeds autonomously");

    let measurement = source.install_app(&app_dir).expect("install");
    target.install_app(&app_dir).expect("install");
    source.launch_app(&measurement).expect("launch");
    source.step_app(&measurement, 8).expect("step");

    let node_listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let node_addr = node_listener.local_addr().unwrap();
    {
        let source = source.clone();
        std::thread::spawn(move || tcp::serve_node(source, node_listener));
    }
    println!("source node on {node_addr}");

    let started = std::time::Instant::now();
    let mut adversary = Adversary::passive();
    let (outcome, digest) =
        tcp::migrate_over_tcp(&target, node_addr, &measurement, &mut adversary).expect("migration");
    println!(
        "outcome: {outcome:?} in {:.1} ms, digest {}",
        started.elapsed().as_secs_f64() * 1e3,
        digest.map(hex::encode).unwrap_or_default()
    );
    assert!(outcome.is_confirmed());
    assert!(target.app_running(&measurement));
    assert!(!source.app_running(&measurement));
    println!("instance now runs on the target; source entry finalized");
}
