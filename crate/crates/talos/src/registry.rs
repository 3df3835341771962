//! Single-instance enforcement: a measurement-to-status mapping with
//! atomic acquire semantics and an append-only journal.
//!
//! State machine (`∅` = no entry):
//!
//! ```text
//! ∅|Finalized  --register_active-->    Active
//! Active       --acquire(Out)-->       MigratingOut
//! MigratingOut --mark_migrated-->      Finalized
//! MigratingOut --restore_active-->     Active        (abort)
//! ∅|Finalized  --acquire(In)-->        MigratingIn
//! MigratingIn  --activate_imported-->  Active
//! MigratingIn  --release-->            Finalized     (abort before activation)
//! Active       --teardown-->           Finalized     (abort after activation)
//! ```
//!
//! `try_acquire_migration` is the linearization point: all mutation runs
//! under one lock, so at most one session ever holds the migration slot
//! for a measurement.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use std::collections::{HashMap, HashSet};

use crate::tee::EnclaveMeasurement;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("measurement already active")]
    AlreadyActive,
    #[error("measurement not provisioned under the static policy")]
    NotProvisioned,
    #[error("session id does not hold this migration slot")]
    SessionMismatch,
    #[error("invalid status transition")]
    InvalidTransition,
    #[error("journal io: {0}")]
    JournalIo(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Active,
    MigratingOut,
    MigratingIn,
    Finalized,
}

impl Status {
    pub fn label(&self) -> &'static str {
        match self {
            Status::Active => "Active",
            Status::MigratingOut => "MigratingOut",
            Status::MigratingIn => "MigratingIn",
            Status::Finalized => "Finalized",
        }
    }

    fn from_label(label: &str) -> Option<Status> {
        match label {
            "Active" => Some(Status::Active),
            "MigratingOut" => Some(Status::MigratingOut),
            "MigratingIn" => Some(Status::MigratingIn),
            "Finalized" => Some(Status::Finalized),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceStatus {
    pub status: Status,
    pub session_id: Option<[u8; 16]>,
    pub updated_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Only measurements provisioned at enrollment may register.
    Static,
    /// The node admits measurements autonomously.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
}

/// One observed transition, stamped with a cross-node logical clock so a
/// harness can audit interleavings over several registries.
#[derive(Debug, Clone)]
pub struct AuditEvent {
    pub seq: u64,
    pub node: String,
    pub measurement: EnclaveMeasurement,
    pub old: Option<Status>,
    pub new: Status,
}

/// Shared transition log for the single-instance audit.
#[derive(Debug, Default)]
pub struct AuditLog {
    clock: AtomicU64,
    events: Mutex<Vec<AuditEvent>>,
}

impl AuditLog {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn record(&self, node: &str, m: &EnclaveMeasurement, old: Option<Status>, new: Status) {
        let seq = self.clock.fetch_add(1, Ordering::SeqCst);
        self.events.lock().expect("audit lock").push(AuditEvent {
            seq,
            node: node.to_string(),
            measurement: *m,
            old,
            new,
        });
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().expect("audit lock").clone()
    }

    /// Replays all transitions in clock order and verifies that no instant
    /// has two Active entries for one measurement across nodes.
    pub fn verify_single_instance(&self) -> Result<(), String> {
        let mut events = self.events();
        events.sort_by_key(|e| e.seq);
        let mut active: HashMap<EnclaveMeasurement, HashSet<String>> = HashMap::new();
        for event in &events {
            let holders = active.entry(event.measurement).or_default();
            match event.new {
                Status::Active => {
                    holders.insert(event.node.clone());
                    if holders.len() > 1 {
                        return Err(format!(
                            "measurement {} active on {:?} at seq {}",
                            event.measurement.hex(),
                            holders,
                            event.seq
                        ));
                    }
                }
                _ => {
                    holders.remove(&event.node);
                }
            }
        }
        Ok(())
    }
}

struct Inner {
    entries: HashMap<EnclaveMeasurement, InstanceStatus>,
    provisioned: HashSet<EnclaveMeasurement>,
}

/// Measurement → operational status map for one node.
pub struct PigeonholeRegistry {
    mode: Mode,
    node_name: String,
    inner: Mutex<Inner>,
    journal_path: Option<PathBuf>,
    audit: Mutex<Option<Arc<AuditLog>>>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl std::fmt::Debug for PigeonholeRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PigeonholeRegistry")
            .field("mode", &self.mode)
            .field("node", &self.node_name)
            .finish()
    }
}

impl PigeonholeRegistry {
    pub fn new(mode: Mode, node_name: &str) -> Self {
        PigeonholeRegistry {
            mode,
            node_name: node_name.to_string(),
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                provisioned: HashSet::new(),
            }),
            journal_path: None,
            audit: Mutex::new(None),
        }
    }

    /// Attaches the journal file, replaying any existing entries so a
    /// restarted node cannot forget an in-flight migration.
    pub fn with_journal(mut self, path: &Path) -> Result<Self, RegistryError> {
        if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| RegistryError::JournalIo(e.to_string()))?;
            let mut inner = self.inner.lock().expect("registry lock");
            for line in text.lines() {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != 5 {
                    continue;
                }
                let Some(m) = EnclaveMeasurement::from_hex(fields[1]) else {
                    continue;
                };
                let Some(new) = Status::from_label(fields[3]) else {
                    continue;
                };
                let session_id = hex::decode(fields[4])
                    .ok()
                    .and_then(|b| <[u8; 16]>::try_from(b).ok());
                inner.entries.insert(
                    m,
                    InstanceStatus {
                        status: new,
                        session_id,
                        updated_at: fields[0].parse().unwrap_or(0),
                    },
                );
            }
        }
        self.journal_path = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn attach_audit(&self, audit: Arc<AuditLog>) {
        *self.audit.lock().expect("audit slot lock") = Some(audit);
    }

    pub fn provision(&self, m: &EnclaveMeasurement) {
        self.inner
            .lock()
            .expect("registry lock")
            .provisioned
            .insert(*m);
    }

    pub fn status(&self, m: &EnclaveMeasurement) -> Option<InstanceStatus> {
        self.inner
            .lock()
            .expect("registry lock")
            .entries
            .get(m)
            .copied()
    }

    pub fn entries(&self) -> Vec<(EnclaveMeasurement, InstanceStatus)> {
        self.inner
            .lock()
            .expect("registry lock")
            .entries
            .iter()
            .map(|(k, v)| (*k, *v))
            .collect()
    }

    fn journal(
        &self,
        m: &EnclaveMeasurement,
        old: Option<Status>,
        new: Status,
        session: Option<[u8; 16]>,
    ) {
        if let Some(path) = &self.journal_path {
            let line = format!(
                "{} {} {} {} {}\n",
                unix_now(),
                m.hex(),
                old.map(|s| s.label()).unwrap_or("None"),
                new.label(),
                session.map(hex::encode).unwrap_or_else(|| "-".to_string()),
            );
            if let Ok(mut file) = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
            {
                let _ = file.write_all(line.as_bytes());
            }
        }
        if let Some(audit) = self.audit.lock().expect("audit slot lock").as_ref() {
            audit.record(&self.node_name, m, old, new);
        }
    }

    /// Registers a fresh Active instance. Pigeonhole constraint: at most
    /// one non-Finalized entry per measurement.
    pub fn register_active(&self, m: &EnclaveMeasurement) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock().expect("registry lock");
        if self.mode == Mode::Static && !inner.provisioned.contains(m) {
            return Err(RegistryError::NotProvisioned);
        }
        let old = inner.entries.get(m).map(|e| e.status);
        match old {
            None | Some(Status::Finalized) => {}
            Some(_) => return Err(RegistryError::AlreadyActive),
        }
        inner.entries.insert(
            *m,
            InstanceStatus {
                status: Status::Active,
                session_id: None,
                updated_at: unix_now(),
            },
        );
        drop(inner);
        self.journal(m, old, Status::Active, None);
        Ok(())
    }

    /// Atomic check-and-set of the migration slot. Losers get `false`.
    pub fn try_acquire_migration(
        &self,
        m: &EnclaveMeasurement,
        session_id: [u8; 16],
        direction: Direction,
    ) -> bool {
        let mut inner = self.inner.lock().expect("registry lock");
        let old = inner.entries.get(m).map(|e| e.status);
        let new = match direction {
            Direction::Out => {
                if old != Some(Status::Active) {
                    return false;
                }
                Status::MigratingOut
            }
            Direction::In => {
                match old {
                    None | Some(Status::Finalized) => {}
                    Some(_) => return false,
                }
                if self.mode == Mode::Static && !inner.provisioned.contains(m) {
                    return false;
                }
                Status::MigratingIn
            }
        };
        inner.entries.insert(
            *m,
            InstanceStatus {
                status: new,
                session_id: Some(session_id),
                updated_at: unix_now(),
            },
        );
        drop(inner);
        self.journal(m, old, new, Some(session_id));
        true
    }

    fn transition(
        &self,
        m: &EnclaveMeasurement,
        session_id: [u8; 16],
        expect: Status,
        new: Status,
    ) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock().expect("registry lock");
        let entry = inner
            .entries
            .get(m)
            .copied()
            .ok_or(RegistryError::InvalidTransition)?;
        if entry.status != expect {
            return Err(RegistryError::InvalidTransition);
        }
        if entry.session_id != Some(session_id) {
            return Err(RegistryError::SessionMismatch);
        }
        let keep_session = matches!(new, Status::MigratingOut | Status::MigratingIn);
        inner.entries.insert(
            *m,
            InstanceStatus {
                status: new,
                session_id: keep_session.then_some(session_id),
                updated_at: unix_now(),
            },
        );
        drop(inner);
        self.journal(m, Some(entry.status), new, Some(session_id));
        Ok(())
    }

    /// Source side, verification succeeded: the instance has moved.
    pub fn mark_migrated(
        &self,
        m: &EnclaveMeasurement,
        session_id: [u8; 16],
    ) -> Result<(), RegistryError> {
        self.transition(m, session_id, Status::MigratingOut, Status::Finalized)
    }

    /// Target side, import verified and dispatched: instance is live here.
    pub fn activate_imported(
        &self,
        m: &EnclaveMeasurement,
        session_id: [u8; 16],
    ) -> Result<(), RegistryError> {
        self.transition(m, session_id, Status::MigratingIn, Status::Active)
    }

    /// Source side abort: the instance keeps running here.
    pub fn restore_active(
        &self,
        m: &EnclaveMeasurement,
        session_id: [u8; 16],
    ) -> Result<(), RegistryError> {
        self.transition(m, session_id, Status::MigratingOut, Status::Active)
    }

    /// Target side abort before activation.
    pub fn release_migrating_in(
        &self,
        m: &EnclaveMeasurement,
        session_id: [u8; 16],
    ) -> Result<(), RegistryError> {
        self.transition(m, session_id, Status::MigratingIn, Status::Finalized)
    }

    /// Target side abort after activation: tear the imported instance down.
    /// Active entries carry no session id, so this keys on status alone;
    /// the session id is recorded in the journal for the audit trail.
    pub fn teardown_imported(
        &self,
        m: &EnclaveMeasurement,
        session_id: [u8; 16],
    ) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock().expect("registry lock");
        let entry = inner
            .entries
            .get(m)
            .copied()
            .ok_or(RegistryError::InvalidTransition)?;
        if entry.status != Status::Active {
            return Err(RegistryError::InvalidTransition);
        }
        inner.entries.insert(
            *m,
            InstanceStatus {
                status: Status::Finalized,
                session_id: None,
                updated_at: unix_now(),
            },
        );
        drop(inner);
        self.journal(m, Some(Status::Active), Status::Finalized, Some(session_id));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn m(byte: u8) -> EnclaveMeasurement {
        EnclaveMeasurement([byte; 32])
    }

    const SID: [u8; 16] = [9u8; 16];

    #[test]
    fn register_is_pigeonholed() {
        let reg = PigeonholeRegistry::new(Mode::Dynamic, "n1");
        reg.register_active(&m(1)).unwrap();
        assert_eq!(
            reg.register_active(&m(1)).unwrap_err(),
            RegistryError::AlreadyActive
        );
        assert_eq!(reg.status(&m(1)).unwrap().status, Status::Active);
    }

    #[test]
    fn static_mode_requires_provisioning() {
        let reg = PigeonholeRegistry::new(Mode::Static, "n1");
        assert_eq!(
            reg.register_active(&m(2)).unwrap_err(),
            RegistryError::NotProvisioned
        );
        reg.provision(&m(2));
        reg.register_active(&m(2)).unwrap();
        assert!(!reg.try_acquire_migration(&m(3), SID, Direction::In));
    }

    #[test]
    fn out_acquisition_requires_active() {
        let reg = PigeonholeRegistry::new(Mode::Dynamic, "n1");
        reg.register_active(&m(1)).unwrap();
        assert!(reg.try_acquire_migration(&m(1), SID, Direction::Out));
        assert_eq!(reg.status(&m(1)).unwrap().status, Status::MigratingOut);
        // Second take loses.
        assert!(!reg.try_acquire_migration(&m(1), [1; 16], Direction::Out));

        reg.mark_migrated(&m(1), SID).unwrap();
        assert!(!reg.try_acquire_migration(&m(1), SID, Direction::Out));
    }

    #[test]
    fn in_acquisition_excludes_non_finalized() {
        let reg = PigeonholeRegistry::new(Mode::Dynamic, "n1");
        assert!(reg.try_acquire_migration(&m(1), SID, Direction::In));
        assert!(!reg.try_acquire_migration(&m(1), [1; 16], Direction::In));
        reg.activate_imported(&m(1), SID).unwrap();
        assert!(!reg.try_acquire_migration(&m(1), [2; 16], Direction::In));
        reg.teardown_imported(&m(1), SID).unwrap();
        // Finalized frees the slot for a later import.
        assert!(reg.try_acquire_migration(&m(1), [3; 16], Direction::In));
    }

    #[test]
    fn session_binding_enforced() {
        let reg = PigeonholeRegistry::new(Mode::Dynamic, "n1");
        reg.register_active(&m(1)).unwrap();
        assert!(reg.try_acquire_migration(&m(1), SID, Direction::Out));
        assert_eq!(
            reg.mark_migrated(&m(1), [0; 16]).unwrap_err(),
            RegistryError::SessionMismatch
        );
        reg.mark_migrated(&m(1), SID).unwrap();
        assert_eq!(
            reg.activate_imported(&m(1), SID).unwrap_err(),
            RegistryError::InvalidTransition
        );
    }

    #[test]
    fn concurrent_in_acquisition_single_winner() {
        let reg = Arc::new(PigeonholeRegistry::new(Mode::Dynamic, "target"));
        let mut handles = Vec::new();
        for i in 0..100u8 {
            let reg = reg.clone();
            handles.push(std::thread::spawn(move || {
                let sid = [i; 16];
                reg.try_acquire_migration(&m(7), sid, Direction::In)
            }));
        }
        let wins: usize = handles
            .into_iter()
            .map(|h| h.join().unwrap() as usize)
            .sum();
        assert_eq!(wins, 1);
    }

    #[test]
    fn journal_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.journal");
        {
            let reg = PigeonholeRegistry::new(Mode::Dynamic, "n1")
                .with_journal(&path)
                .unwrap();
            reg.register_active(&m(1)).unwrap();
            assert!(reg.try_acquire_migration(&m(1), SID, Direction::Out));
        }
        let reloaded = PigeonholeRegistry::new(Mode::Dynamic, "n1")
            .with_journal(&path)
            .unwrap();
        let status = reloaded.status(&m(1)).unwrap();
        assert_eq!(status.status, Status::MigratingOut);
        assert_eq!(status.session_id, Some(SID));
    }

    #[test]
    fn audit_detects_dual_active() {
        let audit = AuditLog::new();
        let a = PigeonholeRegistry::new(Mode::Dynamic, "a");
        let b = PigeonholeRegistry::new(Mode::Dynamic, "b");
        a.attach_audit(audit.clone());
        b.attach_audit(audit.clone());
        a.register_active(&m(1)).unwrap();
        assert!(audit.verify_single_instance().is_ok());
        b.register_active(&m(1)).unwrap();
        assert!(audit.verify_single_instance().is_err());
    }
}
