//! The migration node: hosts guest applications, enforces the pigeonhole
//! registry, and runs the source (SMN) and target (TMN) sides of the
//! migration protocol.
//!
//! Message flow for one migration (target initiates):
//!
//! ```text
//! TMN                                SMN
//!  | -- Challenge (0x01) ------------>|  verify cert+signature, acquire Out
//!  |<-- ChannelKey (0x02, source) ----|  ephemeral key, signed
//!  | -- ChannelKey (0x02, target) --->|  both derive transcript-bound keys
//!  |<-- StatePackage (0x03) ----------|  seal, unseal, mask, reference, nonce
//!  | -- AttestationDigest (0x04) ---->|  unmask, relaunch, trace, reference'
//!  |<-- VerificationResult (0x05) ----|  HMAC check, finalize or abort
//!  | -- Abort (0x7F, ack) ----------->|  only on abort: teardown then restore
//! ```
//!
//! On any abort the target tears down first and acks with 0x7F; the source
//! restores its instance to Active only on that ack (or a transport
//! timeout), so no audit instant shows two Active entries.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::crypto::{
    self, cert_verify, derive_session_keys, ecdh_shared_secret, Certificate, CryptoError,
    NodeKeyPair, NodePublicKey, Nonce, NonceLog, SessionKeys,
};
use crate::elf::{
    build_memory_map, extract_symbols, parse_elf, persistent_reference, ElfError,
    PersistentReference,
};
use crate::guest::{guest_launch, GuestError, GuestInstance, GuestProgram};
use crate::orchestrator::{enrollment_report_data, SignedProfile};
use crate::registry::{Direction, Mode, PigeonholeRegistry, RegistryError};
use crate::sccfg::{graph_from_trace, graph_verify, GraphDeviation, MarkerOutcome};
use crate::state::{mask_state, unmask_state, volatile_deserialize, StateError};
use crate::tee::{
    seal, unseal_expecting, EnclaveMeasurement, PlatformRootSecret, SealPolicy, TeeError,
};
use crate::wire::{
    AbortMsg, AttestationDigestMsg, ChallengeMsg, ChannelKeyMsg, ChannelRole, Message,
    StatePackageMsg, VerificationResultMsg, WireError,
};

/// Canonical content of the Migration Service build; its measurement is
/// what enrollment quotes must attest to.
pub const MS_BUILD_MANIFEST: &[u8] = b"talos-migration-service core build 0.1.0";

pub fn migration_service_measurement() -> EnclaveMeasurement {
    EnclaveMeasurement(crypto::sha256(MS_BUILD_MANIFEST))
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("node is not enrolled")]
    NotEnrolled,
    #[error("peer certificate invalid")]
    CertInvalid,
    #[error("challenge or channel signature invalid")]
    SignatureInvalid,
    #[error("requested application is not running here")]
    AppNotRunning,
    #[error("migration already in progress for this measurement")]
    MigrationInProgress,
    #[error("message out of phase order")]
    PhaseViolation,
    #[error("unknown session")]
    UnknownSession,
    #[error("source certificate invalid")]
    SourceCertInvalid,
    #[error("masked state MAC mismatch")]
    MacMismatch,
    #[error("syscall graph deviation: {0:?}")]
    GraphDeviationDetected(Vec<GraphDeviation>),
    #[error("resume marker never observed in reload trace")]
    MarkerNotSeen,
    #[error("application not paused")]
    AppNotPaused,
    #[error("no profile provisioned for this measurement")]
    ProfileMissing,
    #[error("seal failure: {0}")]
    SealFailure(TeeError),
    #[error("invalid peer point")]
    InvalidPeerPoint,
    #[error("guest: {0}")]
    Guest(#[from] GuestError),
    #[error("state: {0}")]
    State(StateError),
    #[error("elf: {0}")]
    Elf(#[from] ElfError),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("crypto: {0}")]
    Crypto(CryptoError),
    #[error("registry: {0}")]
    Registry(#[from] RegistryError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MigrationOutcome {
    Confirmed,
    Aborted(String),
}

impl MigrationOutcome {
    pub fn is_confirmed(&self) -> bool {
        matches!(self, MigrationOutcome::Confirmed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    ChallengeSent,
    ChallengeReceived,
    ChannelEstablished,
    PackageSent,
    PackageReceived,
    AwaitingDigest,
    Verified,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

struct Session {
    id: [u8; 16],
    role: Role,
    phase: Phase,
    measurement: EnclaveMeasurement,
    peer_pubkey: Option<NodePublicKey>,
    ephemeral: Option<NodeKeyPair>,
    transcript: Vec<u8>,
    keys: Option<SessionKeys>,
    nonce: Option<Nonce>,
    reference: Option<PersistentReference>,
    /// Source's channel-key message, held by the target until the source
    /// identity arrives in the state package.
    pending_source_binding: Option<ChannelKeyMsg>,
    sent_digest: Option<[u8; 32]>,
    /// This session holds the registry slot (Out on source, In on target).
    slot_held: bool,
    /// Target side only: the imported instance was activated.
    activated: bool,
}

impl Session {
    fn advance(&mut self, next: Phase) -> Result<(), NodeError> {
        if next <= self.phase {
            return Err(NodeError::PhaseViolation);
        }
        self.phase = next;
        Ok(())
    }

    fn expect(&self, role: Role, phase: Phase) -> Result<(), NodeError> {
        if self.role != role || self.phase != phase {
            return Err(NodeError::PhaseViolation);
        }
        Ok(())
    }
}

struct Enrollment {
    certificate: Certificate,
    orchestrator_pubkey: NodePublicKey,
}

/// One migration node. All methods take `&self`; internal state is behind
/// per-concern locks so concurrent sessions serialize only where the
/// protocol requires it (the registry is the cross-session linearization
/// point).
pub struct Node {
    pub node_id: String,
    keypair: NodeKeyPair,
    platform_key: NodeKeyPair,
    root: PlatformRootSecret,
    dir: Option<PathBuf>,
    registry: PigeonholeRegistry,
    enrollment: Mutex<Option<Enrollment>>,
    profiles: Mutex<HashMap<EnclaveMeasurement, SignedProfile>>,
    apps: Mutex<HashMap<EnclaveMeasurement, Arc<GuestProgram>>>,
    running: Mutex<HashMap<EnclaveMeasurement, GuestInstance>>,
    sessions: Mutex<HashMap<[u8; 16], Session>>,
    nonce_log: Mutex<NonceLog>,
    outcomes: Mutex<HashMap<[u8; 16], MigrationOutcome>>,
    timings: Mutex<Vec<(&'static str, Duration)>>,
}

impl Node {
    /// In-memory node (no backing directory). Used by the game harness.
    pub fn ephemeral(node_id: &str, platform_key: NodeKeyPair) -> Result<Self, NodeError> {
        Ok(Node {
            node_id: node_id.to_string(),
            keypair: NodeKeyPair::generate().map_err(NodeError::Crypto)?,
            platform_key,
            root: PlatformRootSecret::generate(),
            dir: None,
            registry: PigeonholeRegistry::new(Mode::Dynamic, node_id),
            enrollment: Mutex::new(None),
            profiles: Mutex::new(HashMap::new()),
            apps: Mutex::new(HashMap::new()),
            running: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            nonce_log: Mutex::new(NonceLog::new()),
            outcomes: Mutex::new(HashMap::new()),
            timings: Mutex::new(Vec::new()),
        })
    }

    /// Opens (creating on first use) a directory-backed node: long-term
    /// key, root secret, registry journal, nonce log, stored enrollment
    /// and profiles.
    pub fn open(dir: &Path, node_id: &str, platform_key: NodeKeyPair) -> Result<Self, NodeError> {
        std::fs::create_dir_all(dir.join("profiles")).map_err(|e| NodeError::Io(e.to_string()))?;

        let key_path = dir.join("node.key");
        let keypair = if key_path.exists() {
            let bytes = std::fs::read(&key_path).map_err(|e| NodeError::Io(e.to_string()))?;
            let arr: [u8; 32] = bytes
                .try_into()
                .map_err(|_| NodeError::Io("node.key must be 32 bytes".into()))?;
            NodeKeyPair::from_bytes(&arr).map_err(NodeError::Crypto)?
        } else {
            let kp = NodeKeyPair::generate().map_err(NodeError::Crypto)?;
            std::fs::write(&key_path, kp.secret_bytes())
                .map_err(|e| NodeError::Io(e.to_string()))?;
            restrict_mode(&key_path)?;
            kp
        };

        let root_path = dir.join("root_secret.bin");
        let root = if root_path.exists() {
            PlatformRootSecret::load(&root_path, [0u8; 16]).map_err(NodeError::SealFailure)?
        } else {
            let root = PlatformRootSecret::generate();
            root.save(&root_path).map_err(NodeError::SealFailure)?;
            root
        };

        let registry = PigeonholeRegistry::new(Mode::Dynamic, node_id)
            .with_journal(&dir.join("registry.journal"))?;

        let nonce_log = {
            let path = dir.join("nonces.log");
            if path.exists() {
                let text =
                    std::fs::read_to_string(&path).map_err(|e| NodeError::Io(e.to_string()))?;
                NonceLog::load(&text)
            } else {
                NonceLog::new()
            }
        };

        let node = Node {
            node_id: node_id.to_string(),
            keypair,
            platform_key,
            root,
            dir: Some(dir.to_path_buf()),
            registry,
            enrollment: Mutex::new(None),
            profiles: Mutex::new(HashMap::new()),
            apps: Mutex::new(HashMap::new()),
            running: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            nonce_log: Mutex::new(nonce_log),
            outcomes: Mutex::new(HashMap::new()),
            timings: Mutex::new(Vec::new()),
        };

        // Applications already under the node directory come back up.
        let apps_dir = dir.join("apps");
        if apps_dir.is_dir() {
            for entry in std::fs::read_dir(&apps_dir).map_err(|e| NodeError::Io(e.to_string()))? {
                let entry = entry.map_err(|e| NodeError::Io(e.to_string()))?;
                if entry.path().is_dir() {
                    node.install_app(&entry.path())?;
                }
            }
        }

        // Restore a previous enrollment if present.
        let cert_path = dir.join("certificate.bin");
        let orch_path = dir.join("orchestrator.pub");
        if cert_path.exists() && orch_path.exists() {
            let cert_bytes = std::fs::read(&cert_path).map_err(|e| NodeError::Io(e.to_string()))?;
            let orch_bytes = std::fs::read(&orch_path).map_err(|e| NodeError::Io(e.to_string()))?;
            let certificate = Certificate::from_bytes(&cert_bytes).map_err(NodeError::Crypto)?;
            let orchestrator_pubkey =
                NodePublicKey::decode(&orch_bytes).map_err(NodeError::Crypto)?;
            *node.enrollment.lock().expect("enrollment lock") = Some(Enrollment {
                certificate,
                orchestrator_pubkey,
            });
            for entry in
                std::fs::read_dir(dir.join("profiles")).map_err(|e| NodeError::Io(e.to_string()))?
            {
                let entry = entry.map_err(|e| NodeError::Io(e.to_string()))?;
                let bytes =
                    std::fs::read(entry.path()).map_err(|e| NodeError::Io(e.to_string()))?;
                if let Ok(signed) = SignedProfile::from_bytes(&bytes) {
                    node.profiles
                        .lock()
                        .expect("profiles lock")
                        .insert(signed.profile.measurement, signed);
                }
            }
        }
        Ok(node)
    }

    pub fn public_key(&self) -> NodePublicKey {
        self.keypair.public_key()
    }

    pub fn registry(&self) -> &PigeonholeRegistry {
        &self.registry
    }

    pub fn is_enrolled(&self) -> bool {
        self.enrollment.lock().expect("enrollment lock").is_some()
    }

    pub fn enrollment_certificate(&self) -> Option<Certificate> {
        self.enrollment
            .lock()
            .expect("enrollment lock")
            .as_ref()
            .map(|e| e.certificate.clone())
    }

    /// Re-reads the profile store from disk, as a restarted node would.
    /// The local store is inside the node's trust boundary at this point;
    /// signatures were checked when provisioning was received.
    pub fn reload_profiles(&self) -> Result<(), NodeError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut profiles = self.profiles.lock().expect("profiles lock");
        for entry in
            std::fs::read_dir(dir.join("profiles")).map_err(|e| NodeError::Io(e.to_string()))?
        {
            let entry = entry.map_err(|e| NodeError::Io(e.to_string()))?;
            let bytes = std::fs::read(entry.path()).map_err(|e| NodeError::Io(e.to_string()))?;
            if let Ok(signed) = SignedProfile::from_bytes(&bytes) {
                profiles.insert(signed.profile.measurement, signed);
            }
        }
        Ok(())
    }

    fn certificate(&self) -> Result<Certificate, NodeError> {
        self.enrollment
            .lock()
            .expect("enrollment lock")
            .as_ref()
            .map(|e| e.certificate.clone())
            .ok_or(NodeError::NotEnrolled)
    }

    fn orchestrator_pubkey(&self) -> Result<NodePublicKey, NodeError> {
        self.enrollment
            .lock()
            .expect("enrollment lock")
            .as_ref()
            .map(|e| e.orchestrator_pubkey)
            .ok_or(NodeError::NotEnrolled)
    }

    // ------------------------------------------------------------------
    // Enrollment
    // ------------------------------------------------------------------

    /// Builds the enrollment request: a quote over the Migration Service
    /// measurement, binding this node's identity in the report data.
    pub fn enrollment_request(&self) -> Message {
        let report = enrollment_report_data(&self.node_id, &self.keypair.public_key());
        let quote = crate::tee::quote_generate(
            &self.platform_key,
            &migration_service_measurement(),
            &report,
        );
        Message::EnrollRequest(crate::wire::EnrollRequestMsg {
            node_id: self.node_id.clone(),
            node_pubkey: self.keypair.public_key(),
            quote,
        })
    }

    /// Consumes the orchestrator's response: verifies and stores the
    /// certificate, the orchestrator key, and each signed profile.
    /// Profile signatures are checked here, at provisioning receipt.
    pub fn complete_enrollment(
        &self,
        response: &crate::wire::EnrollResponseMsg,
    ) -> Result<(), NodeError> {
        if !response.accepted {
            return Err(NodeError::Io(format!(
                "enrollment rejected: {}",
                response.detail
            )));
        }
        let orchestrator_pubkey = response.orchestrator_pubkey.ok_or(NodeError::CertInvalid)?;
        let certificate =
            Certificate::from_bytes(&response.certificate_bytes).map_err(NodeError::Crypto)?;
        if !cert_verify(&orchestrator_pubkey, &certificate)
            || certificate.subject_public_key != self.keypair.public_key()
            || certificate.subject_node_id != self.node_id
        {
            return Err(NodeError::CertInvalid);
        }
        for bytes in &response.profiles {
            let signed = SignedProfile::from_bytes(bytes)
                .map_err(|e| NodeError::Io(format!("profile: {e}")))?;
            if !signed.verify(&orchestrator_pubkey) {
                return Err(NodeError::CertInvalid);
            }
            self.registry.provision(&signed.profile.measurement);
            if let Some(dir) = &self.dir {
                let path = dir
                    .join("profiles")
                    .join(format!("{}.profile", signed.profile.measurement.hex()));
                std::fs::write(path, signed.to_bytes())
                    .map_err(|e| NodeError::Io(e.to_string()))?;
            }
            self.profiles
                .lock()
                .expect("profiles lock")
                .insert(signed.profile.measurement, signed);
        }
        if let Some(dir) = &self.dir {
            std::fs::write(dir.join("certificate.bin"), certificate.to_bytes())
                .map_err(|e| NodeError::Io(e.to_string()))?;
            std::fs::write(dir.join("orchestrator.pub"), orchestrator_pubkey.0)
                .map_err(|e| NodeError::Io(e.to_string()))?;
        }
        *self.enrollment.lock().expect("enrollment lock") = Some(Enrollment {
            certificate,
            orchestrator_pubkey,
        });
        Ok(())
    }

    // ------------------------------------------------------------------
    // Application management
    // ------------------------------------------------------------------

    /// Loads an application directory into the node's app table.
    pub fn install_app(&self, app_dir: &Path) -> Result<EnclaveMeasurement, NodeError> {
        let program = Arc::new(GuestProgram::load(app_dir)?);
        let measurement = program.measurement;
        self.apps
            .lock()
            .expect("apps lock")
            .insert(measurement, program);
        Ok(measurement)
    }

    /// Installs an already-constructed program (no backing directory).
    pub fn install_app_in_memory(&self, program: Arc<GuestProgram>) -> EnclaveMeasurement {
        let measurement = program.measurement;
        self.apps
            .lock()
            .expect("apps lock")
            .insert(measurement, program);
        measurement
    }

    /// Registers the measurement as Active and launches a fresh instance.
    pub fn launch_app(&self, measurement: &EnclaveMeasurement) -> Result<(), NodeError> {
        let program = self
            .apps
            .lock()
            .expect("apps lock")
            .get(measurement)
            .cloned()
            .ok_or(NodeError::AppNotRunning)?;
        self.registry.register_active(measurement)?;
        let instance = guest_launch(program, None)?;
        self.running
            .lock()
            .expect("running lock")
            .insert(*measurement, instance);
        Ok(())
    }

    /// Runs `steps` script commands of a running instance.
    pub fn step_app(
        &self,
        measurement: &EnclaveMeasurement,
        steps: usize,
    ) -> Result<usize, NodeError> {
        let mut running = self.running.lock().expect("running lock");
        let instance = running
            .get_mut(measurement)
            .ok_or(NodeError::AppNotRunning)?;
        Ok(instance.step(steps)?)
    }

    /// Read-only/mutating access to a running instance (harness hook).
    pub fn with_running<T>(
        &self,
        measurement: &EnclaveMeasurement,
        f: impl FnOnce(&mut GuestInstance) -> T,
    ) -> Option<T> {
        let mut running = self.running.lock().expect("running lock");
        running.get_mut(measurement).map(f)
    }

    pub fn app_running(&self, measurement: &EnclaveMeasurement) -> bool {
        self.running
            .lock()
            .expect("running lock")
            .contains_key(measurement)
    }

    pub fn installed_apps(&self) -> Vec<EnclaveMeasurement> {
        self.apps
            .lock()
            .expect("apps lock")
            .keys()
            .copied()
            .collect()
    }

    // ------------------------------------------------------------------
    // Target side (TMN)
    // ------------------------------------------------------------------

    /// Opens a migration session for `measurement` and returns the
    /// challenge to send to the source node.
    pub fn begin_migration(
        &self,
        measurement: &EnclaveMeasurement,
    ) -> Result<([u8; 16], Message), NodeError> {
        let certificate = self.certificate()?;
        let mut session_id = [0u8; 16];
        use rand::RngCore;
        rand::rngs::OsRng.fill_bytes(&mut session_id);
        let challenge_signature = crypto::sign(&self.keypair, &measurement.0);
        let message = Message::Challenge(ChallengeMsg {
            target_cert: certificate,
            target_pubkey: self.keypair.public_key(),
            requested_measurement: *measurement,
            challenge_signature,
            session_id,
        });
        let session = Session {
            id: session_id,
            role: Role::Target,
            phase: Phase::ChallengeSent,
            measurement: *measurement,
            peer_pubkey: None,
            ephemeral: None,
            transcript: crate::wire::encode_message(&message),
            keys: None,
            nonce: None,
            reference: None,
            pending_source_binding: None,
            sent_digest: None,
            slot_held: false,
            activated: false,
        };
        self.sessions
            .lock()
            .expect("sessions lock")
            .insert(session_id, session);
        Ok((session_id, message))
    }

    // ------------------------------------------------------------------
    // Source side (SMN)
    // ------------------------------------------------------------------

    /// Validates a migration challenge: certificate, signature, registry.
    /// On success the migration slot is held and the source's signed
    /// ephemeral key is returned.
    pub fn smn_handle_challenge(&self, challenge: &ChallengeMsg) -> Result<Message, NodeError> {
        let started = Instant::now();
        let orchestrator = self.orchestrator_pubkey()?;
        if !cert_verify(&orchestrator, &challenge.target_cert)
            || challenge.target_cert.subject_public_key != challenge.target_pubkey
        {
            return Err(NodeError::CertInvalid);
        }
        if !crypto::signature_verify(
            &challenge.target_pubkey,
            &challenge.requested_measurement.0,
            &challenge.challenge_signature,
        ) {
            return Err(NodeError::SignatureInvalid);
        }
        let m = challenge.requested_measurement;
        match self.registry.status(&m).map(|s| s.status) {
            Some(crate::registry::Status::Active) if self.app_running(&m) => {}
            Some(crate::registry::Status::MigratingOut | crate::registry::Status::MigratingIn) => {
                return Err(NodeError::MigrationInProgress)
            }
            _ => return Err(NodeError::AppNotRunning),
        }
        if !self
            .registry
            .try_acquire_migration(&m, challenge.session_id, Direction::Out)
        {
            return Err(NodeError::MigrationInProgress);
        }
        self.record_timing("Verify TMN", started.elapsed());

        let ephemeral = NodeKeyPair::generate().map_err(NodeError::Crypto)?;
        let binding = ChannelKeyMsg::binding_payload(
            &challenge.session_id,
            ChannelRole::Source,
            &ephemeral.public_key(),
        );
        let reply = Message::ChannelKey(ChannelKeyMsg {
            session_id: challenge.session_id,
            role: ChannelRole::Source,
            ephemeral_pubkey: ephemeral.public_key(),
            binding_signature: crypto::sign(&self.keypair, &binding),
        });

        let mut transcript = Vec::new();
        transcript.extend_from_slice(&crate::wire::encode_message(&Message::Challenge(
            challenge.clone(),
        )));
        transcript.extend_from_slice(&crate::wire::encode_message(&reply));
        let session = Session {
            id: challenge.session_id,
            role: Role::Source,
            phase: Phase::ChallengeReceived,
            measurement: m,
            peer_pubkey: Some(challenge.target_pubkey),
            ephemeral: Some(ephemeral),
            transcript,
            keys: None,
            nonce: None,
            reference: None,
            pending_source_binding: None,
            sent_digest: None,
            slot_held: true,
            activated: false,
        };
        self.sessions
            .lock()
            .expect("sessions lock")
            .insert(challenge.session_id, session);
        Ok(reply)
    }

    /// Source receives the target's ephemeral key: verify the binding,
    /// derive session keys, then extract, seal, unseal, mask the volatile
    /// state and assemble the package.
    pub fn smn_handle_channel_key(&self, ck: &ChannelKeyMsg) -> Result<Message, NodeError> {
        let mut sessions = self.sessions.lock().expect("sessions lock");
        let session = sessions
            .get_mut(&ck.session_id)
            .ok_or(NodeError::UnknownSession)?;
        session.expect(Role::Source, Phase::ChallengeReceived)?;
        if ck.role != ChannelRole::Target {
            return Err(NodeError::PhaseViolation);
        }
        let peer = session.peer_pubkey.expect("source session has peer key");
        let binding = ChannelKeyMsg::binding_payload(
            &ck.session_id,
            ChannelRole::Target,
            &ck.ephemeral_pubkey,
        );
        if !crypto::signature_verify(&peer, &binding, &ck.binding_signature) {
            return Err(NodeError::SignatureInvalid);
        }
        session
            .transcript
            .extend_from_slice(&crate::wire::encode_message(&Message::ChannelKey(
                ck.clone(),
            )));
        let shared = ecdh_shared_secret(
            session
                .ephemeral
                .as_ref()
                .expect("source session has ephemeral"),
            &ck.ephemeral_pubkey,
        )
        .map_err(|_| NodeError::InvalidPeerPoint)?;
        let transcript_hash = crypto::sha256(&session.transcript);
        session.keys = Some(derive_session_keys(&shared, &transcript_hash));
        session.advance(Phase::ChannelEstablished)?;

        let m = session.measurement;
        let session_id = session.id;
        let keys = session.keys.clone().expect("keys derived above");
        drop(sessions);

        let (package, reference, nonce) = self.prepare_package(&m, session_id, &keys)?;
        let mut sessions = self.sessions.lock().expect("sessions lock");
        let session = sessions
            .get_mut(&session_id)
            .ok_or(NodeError::UnknownSession)?;
        session.reference = Some(reference);
        session.nonce = Some(nonce);
        session.advance(Phase::PackageSent)?;
        session.advance(Phase::AwaitingDigest)?;
        Ok(package)
    }

    /// Steps 4–9 on the source: pause, externalize (seal then unseal to
    /// verify), mask under the session keys, compute the persistent
    /// reference, and issue the fresh nonce.
    fn prepare_package(
        &self,
        m: &EnclaveMeasurement,
        session_id: [u8; 16],
        keys: &SessionKeys,
    ) -> Result<(Message, PersistentReference, Nonce), NodeError> {
        let profile = self
            .profiles
            .lock()
            .expect("profiles lock")
            .get(m)
            .cloned()
            .ok_or(NodeError::ProfileMissing)?;

        let extract_started = Instant::now();
        let sealed = {
            let mut running = self.running.lock().expect("running lock");
            let instance = running.get_mut(m).ok_or(NodeError::AppNotRunning)?;
            instance.pause().map_err(|_| NodeError::AppNotPaused)?;
            let policy = SealPolicy::bind_to_signer(&profile.profile.signer);
            crate::state::externalize_state(instance, &self.root, &policy)
                .map_err(NodeError::State)?
        };
        self.record_timing("Extract App. State", extract_started.elapsed());

        let mask_started = Instant::now();
        let policy = SealPolicy::bind_to_signer(&profile.profile.signer);
        let plain =
            unseal_expecting(&self.root, &policy, &sealed).map_err(NodeError::SealFailure)?;
        let masked = mask_state(&plain, keys);
        self.record_timing("Mask State", mask_started.elapsed());

        // Step 9: reference over the running image's symbols and memory
        // map plus the enrolled reference graph.
        let program = self
            .apps
            .lock()
            .expect("apps lock")
            .get(m)
            .cloned()
            .ok_or(NodeError::AppNotRunning)?;
        let reference = compute_reference(&program, &profile)?;

        let nonce = {
            let mut log = self.nonce_log.lock().expect("nonce lock");
            let nonce = log.issue().map_err(NodeError::Crypto)?;
            if let Some(dir) = &self.dir {
                use std::io::Write;
                if let Ok(mut file) = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("nonces.log"))
                {
                    let _ = writeln!(file, "{}", hex::encode(nonce.0));
                }
            }
            nonce
        };

        let package = Message::StatePackage(StatePackageMsg {
            masked,
            source_pubkey: self.keypair.public_key(),
            source_cert: self.certificate()?,
            nonce,
            session_id,
        });
        Ok((package, reference, nonce))
    }

    /// Target receives the source's ephemeral key: store the binding for
    /// verification at package receipt, contribute the target ephemeral,
    /// derive the session keys.
    pub fn tmn_handle_channel_key(&self, ck: &ChannelKeyMsg) -> Result<Message, NodeError> {
        let mut sessions = self.sessions.lock().expect("sessions lock");
        let session = sessions
            .get_mut(&ck.session_id)
            .ok_or(NodeError::UnknownSession)?;
        session.expect(Role::Target, Phase::ChallengeSent)?;
        if ck.role != ChannelRole::Source {
            return Err(NodeError::PhaseViolation);
        }
        session
            .transcript
            .extend_from_slice(&crate::wire::encode_message(&Message::ChannelKey(
                ck.clone(),
            )));
        session.pending_source_binding = Some(ck.clone());

        let ephemeral = NodeKeyPair::generate().map_err(NodeError::Crypto)?;
        let binding = ChannelKeyMsg::binding_payload(
            &ck.session_id,
            ChannelRole::Target,
            &ephemeral.public_key(),
        );
        let reply = Message::ChannelKey(ChannelKeyMsg {
            session_id: ck.session_id,
            role: ChannelRole::Target,
            ephemeral_pubkey: ephemeral.public_key(),
            binding_signature: crypto::sign(&self.keypair, &binding),
        });
        session
            .transcript
            .extend_from_slice(&crate::wire::encode_message(&reply));
        let shared = ecdh_shared_secret(&ephemeral, &ck.ephemeral_pubkey)
            .map_err(|_| NodeError::InvalidPeerPoint)?;
        let transcript_hash = crypto::sha256(&session.transcript);
        session.keys = Some(derive_session_keys(&shared, &transcript_hash));
        session.ephemeral = Some(ephemeral);
        session.advance(Phase::ChannelEstablished)?;
        Ok(reply)
    }

    /// Steps 3–12 on the target: verify the source, unmask, reseal
    /// locally, relaunch as a child instance, trace to the resume marker,
    /// verify the syscall graph, introspect the ELF, recompute the
    /// reference and return the attestation digest.
    pub fn tmn_import(&self, pkg: &StatePackageMsg) -> Result<Message, NodeError> {
        let (m, keys) = {
            let mut sessions = self.sessions.lock().expect("sessions lock");
            let session = sessions
                .get_mut(&pkg.session_id)
                .ok_or(NodeError::UnknownSession)?;
            session.expect(Role::Target, Phase::ChannelEstablished)?;

            let verify_started = Instant::now();
            let orchestrator = self.orchestrator_pubkey()?;
            if !cert_verify(&orchestrator, &pkg.source_cert)
                || pkg.source_cert.subject_public_key != pkg.source_pubkey
            {
                return Err(NodeError::SourceCertInvalid);
            }
            let pending = session
                .pending_source_binding
                .as_ref()
                .ok_or(NodeError::PhaseViolation)?;
            let binding = ChannelKeyMsg::binding_payload(
                &pkg.session_id,
                ChannelRole::Source,
                &pending.ephemeral_pubkey,
            );
            if !crypto::signature_verify(&pkg.source_pubkey, &binding, &pending.binding_signature) {
                return Err(NodeError::SignatureInvalid);
            }
            self.record_timing("Verify SMN", verify_started.elapsed());

            session.peer_pubkey = Some(pkg.source_pubkey);
            session.advance(Phase::PackageReceived)?;
            (
                session.measurement,
                session.keys.clone().ok_or(NodeError::PhaseViolation)?,
            )
        };

        let profile = self
            .profiles
            .lock()
            .expect("profiles lock")
            .get(&m)
            .cloned()
            .ok_or(NodeError::ProfileMissing)?;

        if !self
            .registry
            .try_acquire_migration(&m, pkg.session_id, Direction::In)
        {
            return Err(NodeError::MigrationInProgress);
        }
        self.set_slot_held(&pkg.session_id, true);

        let result = self.import_inner(pkg, &m, &keys, &profile);
        match result {
            Ok(reply) => Ok(reply),
            Err(e) => {
                // Abort before activation: release the slot.
                let _ = self.registry.release_migrating_in(&m, pkg.session_id);
                self.set_slot_held(&pkg.session_id, false);
                Err(e)
            }
        }
    }

    fn import_inner(
        &self,
        pkg: &StatePackageMsg,
        m: &EnclaveMeasurement,
        keys: &SessionKeys,
        profile: &SignedProfile,
    ) -> Result<Message, NodeError> {
        let unmask_started = Instant::now();
        let plain = unmask_state(&pkg.masked, keys).map_err(|e| match e {
            StateError::MacMismatch => NodeError::MacMismatch,
            other => NodeError::State(other),
        })?;
        self.record_timing("UnMask State", unmask_started.elapsed());

        let dump_started = Instant::now();
        let state = volatile_deserialize(&plain).map_err(NodeError::State)?;
        // Step 7: reseal under the local platform, bound to the signer.
        let policy = SealPolicy::bind_to_signer(&profile.profile.signer);
        let resealed = seal(&self.root, &policy, &plain).map_err(NodeError::SealFailure)?;
        if let Some(dir) = &self.dir {
            let _ = std::fs::write(
                dir.join(format!("import-{}.sealed", m.hex())),
                resealed.to_bytes(),
            );
        }
        self.record_timing("Dump App State", dump_started.elapsed());

        // Steps 8–10: relaunch from the node's current application files
        // (the launched content is what gets measured and introspected),
        // trace the reload, enforce the marker and graph subsumption.
        let sc_cfi_started = Instant::now();
        let stored = self
            .apps
            .lock()
            .expect("apps lock")
            .get(m)
            .cloned()
            .ok_or(NodeError::AppNotRunning)?;
        let program = match &stored.dir {
            Some(dir) => Arc::new(GuestProgram::load(dir)?),
            None => stored,
        };
        let instance = guest_launch(program.clone(), Some(state))?;
        let (reload_prefix, marker) = instance.trace.until_marker(&profile.profile.resume_marker);
        if marker != MarkerOutcome::Seen {
            return Err(NodeError::MarkerNotSeen);
        }
        let observed = graph_from_trace(&reload_prefix);
        let deviations = graph_verify(&profile.profile.reference_graph, &observed);
        if !deviations.is_empty() {
            return Err(NodeError::GraphDeviationDetected(deviations));
        }
        self.record_timing("SC-CFI", sc_cfi_started.elapsed());

        // Steps 9–10 continued: independent ELF introspection.
        let elf_started = Instant::now();
        let reference = compute_reference(&program, profile)?;
        self.record_timing("ELF Conf", elf_started.elapsed());

        // Step 11: digest over the recomputed reference and the nonce.
        let mut digest_input = Vec::with_capacity(64);
        digest_input.extend_from_slice(&reference.digest);
        digest_input.extend_from_slice(&pkg.nonce.0);
        let digest = crypto::hmac_compute(&keys.mac_key, &digest_input);

        self.running
            .lock()
            .expect("running lock")
            .insert(*m, instance);
        // Step 12: activate upon digest dispatch.
        self.registry.activate_imported(m, pkg.session_id)?;

        let mut sessions = self.sessions.lock().expect("sessions lock");
        let session = sessions
            .get_mut(&pkg.session_id)
            .ok_or(NodeError::UnknownSession)?;
        session.sent_digest = Some(digest);
        session.activated = true;
        session.reference = Some(reference);
        session.nonce = Some(pkg.nonce);
        Ok(Message::AttestationDigest(AttestationDigestMsg {
            digest,
            session_id: pkg.session_id,
        }))
    }

    /// Verification phase on the source: recompute the expected digest
    /// from the stored reference, nonce and session MAC key. On a match,
    /// terminate the original instance and finalize the registry entry;
    /// on a mismatch, abort (the instance stays paused until the target's
    /// teardown ack restores it).
    pub fn smn_verify_and_finalize(
        &self,
        digest_msg: &AttestationDigestMsg,
    ) -> Result<(MigrationOutcome, Message), NodeError> {
        let mut sessions = self.sessions.lock().expect("sessions lock");
        let session = sessions
            .get_mut(&digest_msg.session_id)
            .ok_or(NodeError::UnknownSession)?;
        session.expect(Role::Source, Phase::AwaitingDigest)?;
        let keys = session.keys.as_ref().ok_or(NodeError::PhaseViolation)?;
        let reference = session
            .reference
            .as_ref()
            .ok_or(NodeError::PhaseViolation)?;
        let nonce = session.nonce.as_ref().ok_or(NodeError::PhaseViolation)?;

        let mut expected_input = Vec::with_capacity(64);
        expected_input.extend_from_slice(&reference.digest);
        expected_input.extend_from_slice(&nonce.0);
        let matches = crypto::hmac_verify(&keys.mac_key, &expected_input, &digest_msg.digest);

        let m = session.measurement;
        let session_id = session.id;
        if matches {
            session.advance(Phase::Verified)?;
            session.slot_held = false;
            drop(sessions);
            // Securely terminate the original instance.
            if let Some(mut instance) = self.running.lock().expect("running lock").remove(&m) {
                let _ = instance.terminate();
            }
            self.registry.mark_migrated(&m, session_id)?;
            let outcome = MigrationOutcome::Confirmed;
            self.outcomes
                .lock()
                .expect("outcomes lock")
                .insert(session_id, outcome.clone());
            Ok((
                outcome,
                Message::VerificationResult(VerificationResultMsg {
                    session_id,
                    confirmed: true,
                    detail: String::new(),
                }),
            ))
        } else {
            session.phase = Phase::Aborted;
            drop(sessions);
            let outcome = MigrationOutcome::Aborted("attestation digest mismatch".to_string());
            self.outcomes
                .lock()
                .expect("outcomes lock")
                .insert(session_id, outcome.clone());
            Ok((
                outcome,
                Message::VerificationResult(VerificationResultMsg {
                    session_id,
                    confirmed: false,
                    detail: "attestation digest mismatch".to_string(),
                }),
            ))
        }
    }

    // ------------------------------------------------------------------
    // Abort handling
    // ------------------------------------------------------------------

    fn set_slot_held(&self, session_id: &[u8; 16], held: bool) {
        if let Some(session) = self
            .sessions
            .lock()
            .expect("sessions lock")
            .get_mut(session_id)
        {
            session.slot_held = held;
        }
    }

    /// Source side: restore the paused instance and the Active entry.
    /// Driven by the target's 0x7F ack or a transport timeout.
    pub fn smn_restore_after_abort(&self, session_id: &[u8; 16], reason: &str) {
        let (m, held) = {
            let mut sessions = self.sessions.lock().expect("sessions lock");
            let Some(session) = sessions.get_mut(session_id) else {
                return;
            };
            if session.role != Role::Source || session.phase == Phase::Verified {
                return;
            }
            session.phase = Phase::Aborted;
            let held = session.slot_held;
            session.slot_held = false;
            (session.measurement, held)
        };
        if held {
            let _ = self.registry.restore_active(&m, *session_id);
        }
        if let Some(instance) = self.running.lock().expect("running lock").get_mut(&m) {
            if instance.is_paused() {
                let _ = instance.resume();
            }
        }
        self.outcomes
            .lock()
            .expect("outcomes lock")
            .entry(*session_id)
            .or_insert_with(|| MigrationOutcome::Aborted(reason.to_string()));
    }

    /// Target side: terminate the imported instance (if any) and release
    /// or tear down the registry entry. Returns the 0x7F ack.
    pub fn tmn_teardown_after_abort(&self, session_id: &[u8; 16], reason: &str) -> Option<Message> {
        let (m, held, activated) = {
            let mut sessions = self.sessions.lock().expect("sessions lock");
            let session = sessions.get_mut(session_id)?;
            if session.role != Role::Target || session.phase == Phase::Aborted {
                return None;
            }
            session.phase = Phase::Aborted;
            let held = session.slot_held;
            session.slot_held = false;
            (session.measurement, held, session.activated)
        };
        if activated {
            if let Some(mut instance) = self.running.lock().expect("running lock").remove(&m) {
                let _ = instance.terminate();
            }
            let _ = self.registry.teardown_imported(&m, *session_id);
        } else if held {
            let _ = self.registry.release_migrating_in(&m, *session_id);
        }
        self.outcomes
            .lock()
            .expect("outcomes lock")
            .entry(*session_id)
            .or_insert_with(|| MigrationOutcome::Aborted(reason.to_string()));
        Some(Message::Abort(AbortMsg {
            session_id: *session_id,
            reason: format!("teardown complete: {reason}"),
        }))
    }

    // ------------------------------------------------------------------
    // Message dispatch
    // ------------------------------------------------------------------

    /// Full dispatch: applies the typed handlers and converts protocol
    /// errors into 0x7F aborts with cleanup, so drivers can pump frames
    /// without caring about the failure taxonomy.
    pub fn handle_message(&self, message: &Message) -> Vec<Message> {
        match message {
            Message::Challenge(ch) => match self.smn_handle_challenge(ch) {
                Ok(reply) => vec![reply],
                Err(e) => {
                    self.outcomes
                        .lock()
                        .expect("outcomes lock")
                        .insert(ch.session_id, MigrationOutcome::Aborted(e.to_string()));
                    vec![Message::Abort(AbortMsg {
                        session_id: ch.session_id,
                        reason: e.to_string(),
                    })]
                }
            },
            Message::ChannelKey(ck) => match self.session_role(&ck.session_id) {
                Some(Role::Source) => self.reply_or_abort(
                    &ck.session_id,
                    self.smn_handle_channel_key(ck),
                    Role::Source,
                ),
                Some(Role::Target) => self.reply_or_abort(
                    &ck.session_id,
                    self.tmn_handle_channel_key(ck),
                    Role::Target,
                ),
                None => vec![Message::Abort(AbortMsg {
                    session_id: ck.session_id,
                    reason: NodeError::UnknownSession.to_string(),
                })],
            },
            Message::StatePackage(pkg) => {
                let result = self.tmn_import(pkg);
                self.reply_or_abort(&pkg.session_id, result, Role::Target)
            }
            Message::AttestationDigest(d) => match self.smn_verify_and_finalize(d) {
                Ok((_outcome, reply)) => vec![reply],
                Err(e) => self.reply_or_abort(&d.session_id, Err(e), Role::Source),
            },
            Message::VerificationResult(vr) => {
                if vr.confirmed {
                    // Only a target session that actually dispatched its
                    // digest may settle as Confirmed; a forged result on
                    // an aborted session changes nothing.
                    let settled = {
                        let mut sessions = self.sessions.lock().expect("sessions lock");
                        match sessions.get_mut(&vr.session_id) {
                            Some(session)
                                if session.role == Role::Target
                                    && session.activated
                                    && session.phase < Phase::Verified =>
                            {
                                session.phase = Phase::Verified;
                                true
                            }
                            _ => false,
                        }
                    };
                    if settled {
                        self.outcomes
                            .lock()
                            .expect("outcomes lock")
                            .insert(vr.session_id, MigrationOutcome::Confirmed);
                    }
                    Vec::new()
                } else {
                    match self.tmn_teardown_after_abort(&vr.session_id, &vr.detail) {
                        Some(ack) => vec![ack],
                        None => Vec::new(),
                    }
                }
            }
            Message::Abort(abort) => {
                match self.session_role(&abort.session_id) {
                    Some(Role::Source) => {
                        self.smn_restore_after_abort(&abort.session_id, &abort.reason);
                        Vec::new()
                    }
                    Some(Role::Target) => {
                        match self.tmn_teardown_after_abort(&abort.session_id, &abort.reason) {
                            // A teardown triggered by a source abort is terminal;
                            // acking back would loop.
                            Some(_) => Vec::new(),
                            None => Vec::new(),
                        }
                    }
                    None => Vec::new(),
                }
            }
            Message::EnrollRequest(_) | Message::EnrollResponse(_) | Message::Opaque { .. } => {
                Vec::new()
            }
        }
    }

    fn reply_or_abort(
        &self,
        session_id: &[u8; 16],
        result: Result<Message, NodeError>,
        role: Role,
    ) -> Vec<Message> {
        match result {
            Ok(reply) => vec![reply],
            Err(e) => {
                let reason = e.to_string();
                match role {
                    Role::Source => {
                        // A source-side failure needs no peer ack to restore.
                        self.smn_restore_after_abort(session_id, &reason);
                    }
                    Role::Target => {
                        let _ = self.tmn_teardown_after_abort(session_id, &reason);
                    }
                }
                vec![Message::Abort(AbortMsg {
                    session_id: *session_id,
                    reason,
                })]
            }
        }
    }

    fn session_role(&self, session_id: &[u8; 16]) -> Option<Role> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(session_id)
            .map(|s| s.role)
    }

    pub fn session_phase(&self, session_id: &[u8; 16]) -> Option<Phase> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(session_id)
            .map(|s| s.phase)
    }

    pub fn session_nonce(&self, session_id: &[u8; 16]) -> Option<Nonce> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(session_id)
            .and_then(|s| s.nonce)
    }

    pub fn sent_digest(&self, session_id: &[u8; 16]) -> Option<[u8; 32]> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(session_id)
            .and_then(|s| s.sent_digest)
    }

    pub fn outcome(&self, session_id: &[u8; 16]) -> Option<MigrationOutcome> {
        self.outcomes
            .lock()
            .expect("outcomes lock")
            .get(session_id)
            .cloned()
    }

    fn record_timing(&self, label: &'static str, elapsed: Duration) {
        self.timings
            .lock()
            .expect("timings lock")
            .push((label, elapsed));
    }

    /// Drains the per-substep timings recorded since the last call.
    pub fn take_timings(&self) -> Vec<(&'static str, Duration)> {
        std::mem::take(&mut *self.timings.lock().expect("timings lock"))
    }
}

/// The persistent reference both sides compute: introspected symbols and
/// memory map of the application image plus the enrolled reference graph.
/// The map's backing label is the canonical binary name, never a
/// node-local path, so honest references agree across nodes.
fn compute_reference(
    program: &GuestProgram,
    profile: &SignedProfile,
) -> Result<PersistentReference, NodeError> {
    let img = parse_elf(&program.elf_bytes, "app.elf")?;
    let symbols = extract_symbols(&img)?;
    let map = build_memory_map(&img, 0)?;
    Ok(persistent_reference(
        &symbols,
        &map,
        &profile.profile.reference_graph,
    ))
}

fn restrict_mode(path: &Path) -> Result<(), NodeError> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))
            .map_err(|e| NodeError::Io(e.to_string()))?;
    }
    Ok(())
}
