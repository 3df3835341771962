//! Executable security games, scripted adversarial transport, the
//! in-memory two-node driver, the phase-breakdown benchmark runner, and
//! TCP serving for multi-process runs.

pub mod adversary;
pub mod bench;
pub mod games;
pub mod memory;
pub mod tcp;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::crypto::NodeKeyPair;
use crate::guest::GuestProgram;
use crate::node::{migration_service_measurement, Node, NodeError};
use crate::orchestrator::Orchestrator;
use crate::registry::AuditLog;
use crate::tee::EnclaveMeasurement;
use crate::wire::Message;

/// The three shipped guest fixtures, by increasing persistent/volatile
/// complexity: statically linked and stripped; symbol/relocation tables;
/// ipc descriptors and large state.
pub mod scenario {
    pub const ELFSPEC: [&str; 3] = [
        include_str!("../../fixtures/scenario1/app.elfspec"),
        include_str!("../../fixtures/scenario2/app.elfspec"),
        include_str!("../../fixtures/scenario3/app.elfspec"),
    ];
    pub const SCRIPT: [&str; 3] = [
        include_str!("../../fixtures/scenario1/app.script"),
        include_str!("../../fixtures/scenario2/app.script"),
        include_str!("../../fixtures/scenario3/app.script"),
    ];

    pub fn name(s: u8) -> String {
        format!("scenario{s}")
    }

    /// Writes the fixture's app directory (elfspec + script) under `dir`.
    pub fn write_app_dir(dir: &std::path::Path, s: u8) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("app.elfspec"), ELFSPEC[s as usize - 1])?;
        std::fs::write(dir.join("app.script"), SCRIPT[s as usize - 1])?;
        Ok(())
    }
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A unique scratch directory removed on drop.
#[derive(Debug)]
pub struct TempWorkspace {
    path: PathBuf,
}

impl TempWorkspace {
    pub fn new(prefix: &str) -> std::io::Result<Self> {
        let path = std::env::temp_dir().join(format!(
            "talos-{prefix}-{}-{}",
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&path)?;
        Ok(TempWorkspace { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for TempWorkspace {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.path);
    }
}

/// Two enrolled nodes, an orchestrator, one installed scenario
/// application running on the source, and a shared audit log.
pub struct TestBed {
    pub orchestrator: Orchestrator,
    pub source: Arc<Node>,
    pub target: Arc<Node>,
    pub measurement: EnclaveMeasurement,
    pub audit: Arc<AuditLog>,
    /// Per-node application directories (present in dir-backed beds).
    pub source_app_dir: Option<PathBuf>,
    pub target_app_dir: Option<PathBuf>,
    workspace: Option<TempWorkspace>,
}

/// How many script steps the source runs before a migration is attempted.
pub const DEFAULT_PRERUN_STEPS: usize = 6;

impl TestBed {
    /// In-memory bed: ephemeral nodes, embedded fixture program.
    pub fn new(scenario_no: u8) -> Result<Self, NodeError> {
        Self::build_with(scenario_no, false, DEFAULT_PRERUN_STEPS)
    }

    /// Directory-backed bed: nodes and per-node app copies on disk, so
    /// file-level adversaries have node-external surfaces to edit.
    pub fn new_dir_backed(scenario_no: u8) -> Result<Self, NodeError> {
        Self::build_with(scenario_no, true, DEFAULT_PRERUN_STEPS)
    }

    /// In-memory bed whose source runs exactly `prerun_steps` commands
    /// before any migration (the continuity split point).
    pub fn new_with_steps(scenario_no: u8, prerun_steps: usize) -> Result<Self, NodeError> {
        Self::build_with(scenario_no, false, prerun_steps)
    }

    fn build_with(
        scenario_no: u8,
        dir_backed: bool,
        prerun_steps: usize,
    ) -> Result<Self, NodeError> {
        let platform = NodeKeyPair::generate().map_err(NodeError::Crypto)?;
        let orchestrator =
            Orchestrator::new(platform.public_key(), migration_service_measurement())
                .map_err(|e| NodeError::Io(e.to_string()))?;

        let (workspace, source, target, source_app_dir, target_app_dir, program) = if dir_backed {
            let workspace = TempWorkspace::new("bed").map_err(|e| NodeError::Io(e.to_string()))?;
            let src_dir = workspace.path().join("source-node");
            let tgt_dir = workspace.path().join("target-node");
            let src_app = src_dir.join("apps").join(scenario::name(scenario_no));
            let tgt_app = tgt_dir.join("apps").join(scenario::name(scenario_no));
            scenario::write_app_dir(&src_app, scenario_no)
                .map_err(|e| NodeError::Io(e.to_string()))?;
            scenario::write_app_dir(&tgt_app, scenario_no)
                .map_err(|e| NodeError::Io(e.to_string()))?;
            let source = Arc::new(Node::open(&src_dir, "smn-node", platform.clone())?);
            let target = Arc::new(Node::open(&tgt_dir, "tmn-node", platform.clone())?);
            let program = Arc::new(GuestProgram::load(&src_app)?);
            (
                Some(workspace),
                source,
                target,
                Some(src_app),
                Some(tgt_app),
                program,
            )
        } else {
            let source = Arc::new(Node::ephemeral("smn-node", platform.clone())?);
            let target = Arc::new(Node::ephemeral("tmn-node", platform)?);
            let elf =
                crate::fixture::generate_from_text(scenario::ELFSPEC[scenario_no as usize - 1])
                    .map_err(|e| NodeError::Io(e.to_string()))?;
            let program = Arc::new(GuestProgram::from_parts(
                &scenario::name(scenario_no),
                elf,
                scenario::SCRIPT[scenario_no as usize - 1],
            )?);
            (None, source, target, None, None, program)
        };

        let profile = orchestrator
            .profile_application(&program)
            .map_err(|e| NodeError::Io(e.to_string()))?;
        orchestrator
            .register_profile(profile)
            .map_err(|e| NodeError::Io(e.to_string()))?;

        for node in [&source, &target] {
            let Message::EnrollRequest(request) = node.enrollment_request() else {
                unreachable!("enrollment_request builds an EnrollRequest")
            };
            let response = orchestrator.handle_enroll(&request);
            node.complete_enrollment(&response)?;
        }

        let measurement = program.measurement;
        match (&source_app_dir, &target_app_dir) {
            (Some(src_app), Some(tgt_app)) => {
                source.install_app(src_app)?;
                target.install_app(tgt_app)?;
            }
            _ => {
                source.install_app_in_memory(program.clone());
                target.install_app_in_memory(program);
            }
        }

        let audit = AuditLog::new();
        source.registry().attach_audit(audit.clone());
        target.registry().attach_audit(audit.clone());

        source.launch_app(&measurement)?;
        source.step_app(&measurement, prerun_steps)?;

        Ok(TestBed {
            orchestrator,
            source,
            target,
            measurement,
            audit,
            source_app_dir,
            target_app_dir,
            workspace,
        })
    }

    /// Keeps the scratch directory alive for callers that extract paths.
    pub fn workspace_path(&self) -> Option<&Path> {
        self.workspace.as_ref().map(|w| w.path())
    }
}
