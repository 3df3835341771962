//! TALOS: verifiable live migration of enclave applications over a mock
//! TEE backend.
//!
//! The library models two migration nodes (source and target), a one-time
//! enrollment orchestrator, and deterministic scripted guest applications
//! with an ELF persistent identity. A migration extracts the guest's
//! sealed volatile state, masks it under session keys negotiated over an
//! authenticated ECDH handshake, re-launches the guest on the target, and
//! proves the re-launch with a syscall-graph trace plus an ELF-derived
//! reference digest that the source verifies before terminating its copy.
//!
//! Start with the `examples/` directory: each major capability — the
//! honest migration path, the five adversarial games, the benchmark
//! runner, ELF fixtures and introspection — has a runnable example.
//! A thin `talos` binary exposes the same capabilities as subcommands
//! for multi-process runs over TCP.

pub mod crypto;
pub mod elf;
pub mod fixture;
pub mod guest;
pub mod harness;
pub mod node;
pub mod orchestrator;
pub mod registry;
pub mod sccfg;
pub mod state;
pub mod tee;
pub mod wire;

pub use node::{MigrationOutcome, Node};
pub use tee::EnclaveMeasurement;
