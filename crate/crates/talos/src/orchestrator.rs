//! One-time enrollment authority: verifies node quotes, issues
//! certificates, and provisions signed per-application profiles
//! (reference syscall graph, resume marker, signer identity, pigeonhole
//! policy). After enrollment it exits the trust path entirely — a
//! migration never contacts it.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::crypto::{
    self, cert_issue, put_prefixed, take_prefixed, Certificate, NodeKeyPair, NodePublicKey,
    Signature,
};
use crate::guest::{guest_launch, GuestProgram};
use crate::sccfg::{graph_from_trace, MarkerOutcome, SysCallGraph, RESUME_MARKER};
use crate::state::VolatileState;
use crate::tee::{quote_verify, AttestationQuote, EnclaveMeasurement, SignerMeasurement};
use crate::wire::{EnrollRequestMsg, EnrollResponseMsg};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum OrchestratorError {
    #[error("node id already enrolled: {0}")]
    DuplicateNodeId(String),
    #[error("attestation quote does not verify")]
    QuoteInvalid,
    #[error("quote measurement does not match the expected migration service")]
    MeasurementUnexpected,
    #[error("node not enrolled: {0}")]
    NodeNotEnrolled(String),
    #[error("reference graph does not contain the resume marker")]
    MarkerMissingFromGraph,
    #[error("malformed profile encoding")]
    MalformedProfile,
    #[error("profiling run failed: {0}")]
    ProfilingFailure(String),
    #[error("store io: {0}")]
    StoreIo(String),
}

/// Per-application reference record delivered at enrollment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApplicationProfile {
    pub measurement: EnclaveMeasurement,
    pub reference_graph: SysCallGraph,
    pub resume_marker: String,
    pub signer: SignerMeasurement,
}

impl ApplicationProfile {
    /// Canonical encoding: measurement(32) || signer(32) ||
    /// u32-LE marker-len || marker || u32-LE graph-len || graph canonical.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.measurement.0);
        out.extend_from_slice(&self.signer.0);
        put_prefixed(&mut out, self.resume_marker.as_bytes());
        put_prefixed(&mut out, &self.reference_graph.canonical_bytes());
        out
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, OrchestratorError> {
        if bytes.len() < 64 {
            return Err(OrchestratorError::MalformedProfile);
        }
        let mut measurement = [0u8; 32];
        measurement.copy_from_slice(&bytes[..32]);
        let mut signer = [0u8; 32];
        signer.copy_from_slice(&bytes[32..64]);
        let mut cursor = 64usize;
        let marker =
            take_prefixed(bytes, &mut cursor).ok_or(OrchestratorError::MalformedProfile)?;
        let graph_bytes =
            take_prefixed(bytes, &mut cursor).ok_or(OrchestratorError::MalformedProfile)?;
        if cursor != bytes.len() {
            return Err(OrchestratorError::MalformedProfile);
        }
        let reference_graph = SysCallGraph::from_canonical_bytes(graph_bytes)
            .ok_or(OrchestratorError::MalformedProfile)?;
        Ok(ApplicationProfile {
            measurement: EnclaveMeasurement(measurement),
            reference_graph,
            resume_marker: String::from_utf8(marker.to_vec())
                .map_err(|_| OrchestratorError::MalformedProfile)?,
            signer: SignerMeasurement(signer),
        })
    }
}

/// A profile plus the orchestrator signature over its canonical bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedProfile {
    pub profile: ApplicationProfile,
    pub signature: Signature,
}

impl SignedProfile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_prefixed(&mut out, &self.profile.canonical_bytes());
        put_prefixed(&mut out, &self.signature.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, OrchestratorError> {
        let mut cursor = 0usize;
        let profile_bytes =
            take_prefixed(bytes, &mut cursor).ok_or(OrchestratorError::MalformedProfile)?;
        let sig = take_prefixed(bytes, &mut cursor).ok_or(OrchestratorError::MalformedProfile)?;
        if cursor != bytes.len() || sig.len() != 64 {
            return Err(OrchestratorError::MalformedProfile);
        }
        let mut signature = [0u8; 64];
        signature.copy_from_slice(sig);
        Ok(SignedProfile {
            profile: ApplicationProfile::from_canonical_bytes(profile_bytes)?,
            signature: Signature(signature),
        })
    }

    pub fn verify(&self, orchestrator_public: &NodePublicKey) -> bool {
        crypto::signature_verify(
            orchestrator_public,
            &self.profile.canonical_bytes(),
            &self.signature,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    Static,
    Dynamic,
}

/// Pigeonhole policy distributed at enrollment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationPolicy {
    pub mode: PolicyMode,
    pub provisioned_measurements: Vec<EnclaveMeasurement>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollmentRecord {
    pub node_id: String,
    pub node_pubkey: NodePublicKey,
    pub certificate: Certificate,
    pub enrolled_at: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// The enrollment authority.
pub struct Orchestrator {
    key: NodeKeyPair,
    platform_public: NodePublicKey,
    expected_ms_measurement: EnclaveMeasurement,
    store_dir: Option<PathBuf>,
    records: Mutex<HashMap<String, EnrollmentRecord>>,
    profiles: Mutex<BTreeMap<EnclaveMeasurement, SignedProfile>>,
    /// node_id -> measurements provisioned to that node
    assignments: Mutex<HashMap<String, Vec<EnclaveMeasurement>>>,
}

impl Orchestrator {
    pub fn new(
        platform_public: NodePublicKey,
        expected_ms_measurement: EnclaveMeasurement,
    ) -> Result<Self, OrchestratorError> {
        Ok(Orchestrator {
            key: NodeKeyPair::generate().map_err(|_| OrchestratorError::QuoteInvalid)?,
            platform_public,
            expected_ms_measurement,
            store_dir: None,
            records: Mutex::new(HashMap::new()),
            profiles: Mutex::new(BTreeMap::new()),
            assignments: Mutex::new(HashMap::new()),
        })
    }

    /// Attaches a flat-file store: `nodes/<node_id>.record`,
    /// `profiles/<measurement-hex>.profile`.
    pub fn with_store(mut self, dir: &Path) -> Result<Self, OrchestratorError> {
        std::fs::create_dir_all(dir.join("nodes"))
            .and_then(|_| std::fs::create_dir_all(dir.join("profiles")))
            .map_err(|e| OrchestratorError::StoreIo(e.to_string()))?;
        self.store_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn public_key(&self) -> NodePublicKey {
        self.key.public_key()
    }

    /// Builds an application profile by a profiling run: launch the guest
    /// in a trusted context with a placeholder state, record the reload
    /// trace up to the marker, and take its graph as the reference.
    pub fn profile_application(
        &self,
        program: &Arc<GuestProgram>,
    ) -> Result<ApplicationProfile, OrchestratorError> {
        let placeholder = VolatileState {
            heap_image: vec![0],
            ..Default::default()
        };
        let instance = guest_launch(program.clone(), Some(placeholder))
            .map_err(|e| OrchestratorError::ProfilingFailure(e.to_string()))?;
        let (prefix, outcome) = instance.trace.until_marker(RESUME_MARKER);
        if outcome != MarkerOutcome::Seen {
            return Err(OrchestratorError::MarkerMissingFromGraph);
        }
        Ok(ApplicationProfile {
            measurement: program.measurement,
            reference_graph: graph_from_trace(&prefix),
            resume_marker: RESUME_MARKER.to_string(),
            signer: SignerMeasurement(crypto::sha256(&self.key.public_key().0)),
        })
    }

    /// Registers a profile for later provisioning, signing its canonical
    /// bytes. The reference graph must contain the resume marker.
    pub fn register_profile(
        &self,
        profile: ApplicationProfile,
    ) -> Result<SignedProfile, OrchestratorError> {
        if !profile
            .reference_graph
            .contains_node(&profile.resume_marker)
        {
            return Err(OrchestratorError::MarkerMissingFromGraph);
        }
        let signature = crypto::sign(&self.key, &profile.canonical_bytes());
        let signed = SignedProfile { profile, signature };
        if let Some(dir) = &self.store_dir {
            let path = dir
                .join("profiles")
                .join(format!("{}.profile", signed.profile.measurement.hex()));
            std::fs::write(path, signed.to_bytes())
                .map_err(|e| OrchestratorError::StoreIo(e.to_string()))?;
        }
        self.profiles
            .lock()
            .expect("profiles lock")
            .insert(signed.profile.measurement, signed.clone());
        Ok(signed)
    }

    /// Verifies the node's quote (platform key, expected Migration Service
    /// measurement, report binding) and issues a certificate.
    pub fn enroll_node(
        &self,
        node_id: &str,
        node_pubkey: &NodePublicKey,
        quote: &AttestationQuote,
    ) -> Result<EnrollmentRecord, OrchestratorError> {
        {
            let records = self.records.lock().expect("records lock");
            if records.contains_key(node_id) {
                return Err(OrchestratorError::DuplicateNodeId(node_id.to_string()));
            }
        }
        if !quote_verify(&self.platform_public, quote) {
            return Err(OrchestratorError::QuoteInvalid);
        }
        if quote.measurement != self.expected_ms_measurement {
            return Err(OrchestratorError::MeasurementUnexpected);
        }
        // The quote must bind the enrolling identity.
        let expected_binding = enrollment_report_data(node_id, node_pubkey);
        if quote.report_data != expected_binding {
            return Err(OrchestratorError::QuoteInvalid);
        }
        let certificate = cert_issue(&self.key, node_pubkey, node_id, unix_now())
            .map_err(|_| OrchestratorError::QuoteInvalid)?;
        let record = EnrollmentRecord {
            node_id: node_id.to_string(),
            node_pubkey: *node_pubkey,
            certificate,
            enrolled_at: unix_now(),
        };
        if let Some(dir) = &self.store_dir {
            let mut bytes = Vec::new();
            put_prefixed(&mut bytes, record.node_id.as_bytes());
            put_prefixed(&mut bytes, &record.node_pubkey.0);
            put_prefixed(&mut bytes, &record.certificate.to_bytes());
            put_prefixed(&mut bytes, &record.enrolled_at.to_le_bytes());
            std::fs::write(dir.join("nodes").join(format!("{node_id}.record")), bytes)
                .map_err(|e| OrchestratorError::StoreIo(e.to_string()))?;
        }
        self.records
            .lock()
            .expect("records lock")
            .insert(node_id.to_string(), record.clone());
        Ok(record)
    }

    /// Assigns a registered profile to an enrolled node.
    pub fn provision_profile(
        &self,
        measurement: &EnclaveMeasurement,
        node_id: &str,
    ) -> Result<SignedProfile, OrchestratorError> {
        if !self
            .records
            .lock()
            .expect("records lock")
            .contains_key(node_id)
        {
            return Err(OrchestratorError::NodeNotEnrolled(node_id.to_string()));
        }
        let signed = self
            .profiles
            .lock()
            .expect("profiles lock")
            .get(measurement)
            .cloned()
            .ok_or(OrchestratorError::MalformedProfile)?;
        self.assignments
            .lock()
            .expect("assignments lock")
            .entry(node_id.to_string())
            .or_default()
            .push(*measurement);
        Ok(signed)
    }

    pub fn policy(&self) -> MigrationPolicy {
        MigrationPolicy {
            mode: PolicyMode::Dynamic,
            provisioned_measurements: self
                .profiles
                .lock()
                .expect("profiles lock")
                .keys()
                .copied()
                .collect(),
        }
    }

    /// Full enrollment exchange: verify, certify, and deliver every
    /// registered profile alongside the certificate.
    pub fn handle_enroll(&self, request: &EnrollRequestMsg) -> EnrollResponseMsg {
        match self.enroll_node(&request.node_id, &request.node_pubkey, &request.quote) {
            Ok(record) => {
                let (profiles, measurements): (Vec<Vec<u8>>, Vec<EnclaveMeasurement>) = {
                    let map = self.profiles.lock().expect("profiles lock");
                    (
                        map.values().map(|p| p.to_bytes()).collect(),
                        map.keys().copied().collect(),
                    )
                };
                for measurement in measurements {
                    // Recorded per node for the provisioning ledger.
                    let _ = self.provision_profile(&measurement, &request.node_id);
                }
                EnrollResponseMsg {
                    accepted: true,
                    detail: String::new(),
                    certificate_bytes: record.certificate.to_bytes(),
                    orchestrator_pubkey: Some(self.key.public_key()),
                    profiles,
                }
            }
            Err(e) => EnrollResponseMsg {
                accepted: false,
                detail: e.to_string(),
                certificate_bytes: Vec::new(),
                orchestrator_pubkey: None,
                profiles: Vec::new(),
            },
        }
    }
}

/// Report data binding an enrollment quote to the enrolling identity:
/// `SHA-256(node_id || node_pubkey)` followed by 32 zero bytes.
pub fn enrollment_report_data(node_id: &str, node_pubkey: &NodePublicKey) -> [u8; 64] {
    let mut buf = node_id.as_bytes().to_vec();
    buf.extend_from_slice(&node_pubkey.0);
    let digest = crypto::sha256(&buf);
    let mut out = [0u8; 64];
    out[..32].copy_from_slice(&digest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::cert_verify;
    use crate::crypto::Certificate;
    use crate::tee::quote_generate;

    fn setup() -> (NodeKeyPair, Orchestrator, EnclaveMeasurement) {
        let platform = NodeKeyPair::generate().unwrap();
        let ms = EnclaveMeasurement(crypto::sha256(b"migration service build"));
        let orch = Orchestrator::new(platform.public_key(), ms).unwrap();
        (platform, orch, ms)
    }

    fn enroll(
        platform: &NodeKeyPair,
        orch: &Orchestrator,
        ms: &EnclaveMeasurement,
        node_id: &str,
    ) -> (NodeKeyPair, EnrollmentRecord) {
        let node = NodeKeyPair::generate().unwrap();
        let report = enrollment_report_data(node_id, &node.public_key());
        let quote = quote_generate(platform, ms, &report);
        let record = orch
            .enroll_node(node_id, &node.public_key(), &quote)
            .unwrap();
        (node, record)
    }

    #[test]
    fn enrollment_issues_verifying_certificate() {
        let (platform, orch, ms) = setup();
        let (_, record) = enroll(&platform, &orch, &ms, "node-1");
        assert!(cert_verify(&orch.public_key(), &record.certificate));
        assert_eq!(record.certificate.subject_node_id, "node-1");
    }

    #[test]
    fn duplicate_node_id_rejected() {
        let (platform, orch, ms) = setup();
        enroll(&platform, &orch, &ms, "node-1");
        let node = NodeKeyPair::generate().unwrap();
        let report = enrollment_report_data("node-1", &node.public_key());
        let quote = quote_generate(&platform, &ms, &report);
        assert_eq!(
            orch.enroll_node("node-1", &node.public_key(), &quote)
                .unwrap_err(),
            OrchestratorError::DuplicateNodeId("node-1".to_string())
        );
    }

    #[test]
    fn wrong_ms_measurement_rejected() {
        let (platform, orch, _) = setup();
        let node = NodeKeyPair::generate().unwrap();
        let wrong = EnclaveMeasurement(crypto::sha256(b"some other service"));
        let report = enrollment_report_data("node-2", &node.public_key());
        let quote = quote_generate(&platform, &wrong, &report);
        assert_eq!(
            orch.enroll_node("node-2", &node.public_key(), &quote)
                .unwrap_err(),
            OrchestratorError::MeasurementUnexpected
        );
    }

    #[test]
    fn forged_quote_rejected() {
        let (_, orch, ms) = setup();
        let node = NodeKeyPair::generate().unwrap();
        let rogue_platform = NodeKeyPair::generate().unwrap();
        let report = enrollment_report_data("node-3", &node.public_key());
        let quote = quote_generate(&rogue_platform, &ms, &report);
        assert_eq!(
            orch.enroll_node("node-3", &node.public_key(), &quote)
                .unwrap_err(),
            OrchestratorError::QuoteInvalid
        );
    }

    #[test]
    fn profile_requires_marker_node() {
        let (_, orch, _) = setup();
        let mut graph = SysCallGraph::new();
        graph.insert_edge("open", "read");
        let profile = ApplicationProfile {
            measurement: EnclaveMeasurement([1; 32]),
            reference_graph: graph.clone(),
            resume_marker: RESUME_MARKER.to_string(),
            signer: SignerMeasurement([2; 32]),
        };
        assert_eq!(
            orch.register_profile(profile.clone()).unwrap_err(),
            OrchestratorError::MarkerMissingFromGraph
        );

        let mut good_graph = graph;
        good_graph.insert_edge("read", RESUME_MARKER);
        let good = ApplicationProfile {
            reference_graph: good_graph,
            ..profile
        };
        let signed = orch.register_profile(good).unwrap();
        assert!(signed.verify(&orch.public_key()));
    }

    #[test]
    fn provisioning_requires_enrollment() {
        let (platform, orch, ms) = setup();
        let mut graph = SysCallGraph::new();
        graph.insert_edge("read", RESUME_MARKER);
        let profile = ApplicationProfile {
            measurement: EnclaveMeasurement([1; 32]),
            reference_graph: graph,
            resume_marker: RESUME_MARKER.to_string(),
            signer: SignerMeasurement([2; 32]),
        };
        orch.register_profile(profile).unwrap();
        assert_eq!(
            orch.provision_profile(&EnclaveMeasurement([1; 32]), "ghost")
                .unwrap_err(),
            OrchestratorError::NodeNotEnrolled("ghost".to_string())
        );
        enroll(&platform, &orch, &ms, "real");
        orch.provision_profile(&EnclaveMeasurement([1; 32]), "real")
            .unwrap();
    }

    #[test]
    fn certificates_bind_to_their_issuing_orchestrator() {
        let (platform_a, orch_a, ms_a) = setup();
        let (_, record) = enroll(&platform_a, &orch_a, &ms_a, "node-a");
        assert!(cert_verify(&orch_a.public_key(), &record.certificate));

        // A second, unrelated authority: the certificate must not verify.
        let (_, orch_b, _) = setup();
        assert!(!cert_verify(&orch_b.public_key(), &record.certificate));
    }

    #[test]
    fn enroll_exchange_accepts_and_rejects() {
        let (platform, orch, ms) = setup();
        let node = NodeKeyPair::generate().unwrap();
        let report = enrollment_report_data("node-9", &node.public_key());
        let good = crate::wire::EnrollRequestMsg {
            node_id: "node-9".into(),
            node_pubkey: node.public_key(),
            quote: quote_generate(&platform, &ms, &report),
        };
        let response = orch.handle_enroll(&good);
        assert!(response.accepted, "{}", response.detail);
        assert_eq!(response.orchestrator_pubkey, Some(orch.public_key()));
        let cert = Certificate::from_bytes(&response.certificate_bytes).unwrap();
        assert!(cert_verify(&orch.public_key(), &cert));

        // A rogue platform key yields a rejection response, not a panic.
        let rogue = NodeKeyPair::generate().unwrap();
        let other = NodeKeyPair::generate().unwrap();
        let bad = crate::wire::EnrollRequestMsg {
            node_id: "node-10".into(),
            node_pubkey: other.public_key(),
            quote: quote_generate(
                &rogue,
                &ms,
                &enrollment_report_data("node-10", &other.public_key()),
            ),
        };
        let response = orch.handle_enroll(&bad);
        assert!(!response.accepted);
        assert!(response.certificate_bytes.is_empty());
        assert!(response.profiles.is_empty());
    }

    #[test]
    fn signed_profile_roundtrip_and_tamper() {
        let (_, orch, _) = setup();
        let mut graph = SysCallGraph::new();
        graph.insert_edge("read", RESUME_MARKER);
        let profile = ApplicationProfile {
            measurement: EnclaveMeasurement([3; 32]),
            reference_graph: graph,
            resume_marker: RESUME_MARKER.to_string(),
            signer: SignerMeasurement([4; 32]),
        };
        let signed = orch.register_profile(profile).unwrap();
        let bytes = signed.to_bytes();
        let parsed = SignedProfile::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, signed);
        assert!(parsed.verify(&orch.public_key()));

        let mut tampered = parsed.clone();
        tampered
            .profile
            .reference_graph
            .insert_edge("read", "socket");
        assert!(!tampered.verify(&orch.public_key()));
    }
}
