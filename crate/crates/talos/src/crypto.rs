//! Session cryptography for the migration channel: ECDH agreement, key
//! derivation, HMAC digests, signatures, certificates and nonces.
//!
//! One curve (NIST P-256) backs both the ECDH exchange and the ECDSA
//! signatures, so a node manages a single long-term key pair plus the
//! ephemeral pairs it burns per session.

use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use p256::ecdsa::signature::hazmat::PrehashVerifier;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{SigningKey, VerifyingKey};
use p256::elliptic_curve::rand_core::OsRng;
use p256::{PublicKey, SecretKey};
use sha2::{Digest, Sha256};

pub type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("entropy source unavailable")]
    EntropyUnavailable,
    #[error("peer public key is not a valid curve point")]
    InvalidPeerPoint,
    #[error("malformed signature")]
    MalformedSignature,
    #[error("malformed certificate: {0}")]
    MalformedCertificate(&'static str),
    #[error("node id already enrolled: {0}")]
    DuplicateNodeId(String),
    #[error("nonce repeated in issued-nonce log")]
    NonceReuse,
}

/// A long-term or ephemeral key pair on the node curve.
#[derive(Clone)]
pub struct NodeKeyPair {
    secret: SecretKey,
}

/// Compressed SEC1 encoding of a curve point (33 bytes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodePublicKey(pub [u8; 33]);

/// Raw fixed-width ECDSA signature (r || s, 64 bytes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl NodeKeyPair {
    pub fn generate() -> Result<Self, CryptoError> {
        Ok(NodeKeyPair {
            secret: SecretKey::random(&mut OsRng),
        })
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self, CryptoError> {
        SecretKey::from_slice(bytes)
            .map(|secret| NodeKeyPair { secret })
            .map_err(|_| CryptoError::MalformedSignature)
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out.copy_from_slice(&self.secret.to_bytes());
        out
    }

    pub fn public_key(&self) -> NodePublicKey {
        use p256::elliptic_curve::sec1::ToEncodedPoint;
        let point = self.secret.public_key().to_encoded_point(true);
        let mut out = [0u8; 33];
        out.copy_from_slice(point.as_bytes());
        NodePublicKey(out)
    }
}

impl std::fmt::Debug for NodeKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Never print the scalar.
        f.debug_struct("NodeKeyPair")
            .field("public", &self.public_key())
            .finish()
    }
}

impl NodePublicKey {
    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != 33 {
            return Err(CryptoError::InvalidPeerPoint);
        }
        // Round-trip through the curve type so invalid encodings are rejected
        // at the boundary, not deep inside a session.
        PublicKey::from_sec1_bytes(bytes).map_err(|_| CryptoError::InvalidPeerPoint)?;
        let mut out = [0u8; 33];
        out.copy_from_slice(bytes);
        Ok(NodePublicKey(out))
    }

    fn to_point(self) -> Result<PublicKey, CryptoError> {
        PublicKey::from_sec1_bytes(&self.0).map_err(|_| CryptoError::InvalidPeerPoint)
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

/// Keys derived for one migration session.
///
/// `shared_secret` is the raw ECDH output (the games' "Secret");
/// `enc_key` and `mac_key` are its HKDF expansions under distinct
/// context strings bound to the handshake transcript.
#[derive(Clone)]
pub struct SessionKeys {
    pub shared_secret: [u8; 32],
    pub enc_key: [u8; 32],
    pub mac_key: [u8; 32],
}

impl std::fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionKeys(..)")
    }
}

/// 256-bit session nonce, generated fresh per migration attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nonce(pub [u8; 32]);

impl Nonce {
    pub fn generate() -> Self {
        let mut bytes = [0u8; 32];
        use rand::RngCore;
        rand::rngs::OsRng.fill_bytes(&mut bytes);
        Nonce(bytes)
    }
}

pub fn ecdh_shared_secret(
    mine: &NodeKeyPair,
    theirs: &NodePublicKey,
) -> Result<[u8; 32], CryptoError> {
    let peer = theirs.to_point()?;
    let shared = p256::ecdh::diffie_hellman(mine.secret.to_nonzero_scalar(), peer.as_affine());
    let mut out = [0u8; 32];
    out.copy_from_slice(shared.raw_secret_bytes());
    Ok(out)
}

/// Expands the ECDH secret into the session encryption and MAC keys,
/// binding both to the handshake transcript hash.
pub fn derive_session_keys(shared_secret: &[u8; 32], transcript_hash: &[u8; 32]) -> SessionKeys {
    let hk = Hkdf::<Sha256>::new(None, shared_secret);
    let mut enc_key = [0u8; 32];
    let mut mac_key = [0u8; 32];
    let mut enc_info = b"talos-session enc ".to_vec();
    enc_info.extend_from_slice(transcript_hash);
    let mut mac_info = b"talos-session mac ".to_vec();
    mac_info.extend_from_slice(transcript_hash);
    hk.expand(&enc_info, &mut enc_key)
        .expect("32 bytes is a valid hkdf output length");
    hk.expand(&mac_info, &mut mac_key)
        .expect("32 bytes is a valid hkdf output length");
    SessionKeys {
        shared_secret: *shared_secret,
        enc_key,
        mac_key,
    }
}

pub fn hmac_compute(key: &[u8; 32], message: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(message);
    let mut out = [0u8; 32];
    out.copy_from_slice(&mac.finalize().into_bytes());
    out
}

/// Constant-time tag check; returns false on mismatch, never errors.
pub fn hmac_verify(key: &[u8; 32], message: &[u8], tag: &[u8; 32]) -> bool {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(message);
    mac.verify_slice(tag).is_ok()
}

pub fn sign(key: &NodeKeyPair, message: &[u8]) -> Signature {
    let signing = SigningKey::from(&key.secret);
    let sig: p256::ecdsa::Signature = signing.sign(message);
    let mut out = [0u8; 64];
    out.copy_from_slice(&sig.to_bytes());
    Signature(out)
}

pub fn signature_verify(key: &NodePublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(point) = key.to_point() else {
        return false;
    };
    let verifying = VerifyingKey::from(&point);
    let Ok(sig) = p256::ecdsa::Signature::from_slice(&signature.0) else {
        return false;
    };
    verifying.verify(message, &sig).is_ok()
}

/// Signs a 32-byte digest directly (used by attestation quotes where the
/// report layout is hashed once and signed).
pub fn sign_prehash(key: &NodeKeyPair, digest: &[u8; 32]) -> Signature {
    use p256::ecdsa::signature::hazmat::PrehashSigner;
    let signing = SigningKey::from(&key.secret);
    let sig: p256::ecdsa::Signature = signing
        .sign_prehash(digest)
        .expect("prehash signing of a 32-byte digest");
    let mut out = [0u8; 64];
    out.copy_from_slice(&sig.to_bytes());
    Signature(out)
}

pub fn verify_prehash(key: &NodePublicKey, digest: &[u8; 32], signature: &Signature) -> bool {
    let Ok(point) = key.to_point() else {
        return false;
    };
    let verifying = VerifyingKey::from(&point);
    let Ok(sig) = p256::ecdsa::Signature::from_slice(&signature.0) else {
        return false;
    };
    verifying.verify_prehash(digest, &sig).is_ok()
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(data));
    out
}

/// Orchestrator-signed binding of a node public key to a node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject_public_key: NodePublicKey,
    pub subject_node_id: String,
    pub issued_at: u64,
    pub orchestrator_signature: Signature,
}

pub const MAX_NODE_ID_LEN: usize = 64;

impl Certificate {
    /// The signed portion: u32-LE length-prefixed fields in declared order.
    pub fn canonical_subject(
        subject_public_key: &NodePublicKey,
        subject_node_id: &str,
        issued_at: u64,
    ) -> Vec<u8> {
        let mut out = Vec::new();
        put_prefixed(&mut out, &subject_public_key.0);
        put_prefixed(&mut out, subject_node_id.as_bytes());
        put_prefixed(&mut out, &issued_at.to_le_bytes());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Self::canonical_subject(
            &self.subject_public_key,
            &self.subject_node_id,
            self.issued_at,
        );
        put_prefixed(&mut out, &self.orchestrator_signature.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut cursor = 0usize;
        let pk = take_prefixed(bytes, &mut cursor)
            .ok_or(CryptoError::MalformedCertificate("public key field"))?;
        let node_id = take_prefixed(bytes, &mut cursor)
            .ok_or(CryptoError::MalformedCertificate("node id field"))?;
        let issued = take_prefixed(bytes, &mut cursor)
            .ok_or(CryptoError::MalformedCertificate("issued_at field"))?;
        let sig = take_prefixed(bytes, &mut cursor)
            .ok_or(CryptoError::MalformedCertificate("signature field"))?;
        if cursor != bytes.len() {
            return Err(CryptoError::MalformedCertificate("trailing bytes"));
        }
        if node_id.len() > MAX_NODE_ID_LEN {
            return Err(CryptoError::MalformedCertificate("node id too long"));
        }
        if issued.len() != 8 || sig.len() != 64 {
            return Err(CryptoError::MalformedCertificate("field width"));
        }
        let subject_public_key =
            NodePublicKey::decode(pk).map_err(|_| CryptoError::MalformedCertificate("point"))?;
        let subject_node_id = String::from_utf8(node_id.to_vec())
            .map_err(|_| CryptoError::MalformedCertificate("node id utf-8"))?;
        let mut issued_at = [0u8; 8];
        issued_at.copy_from_slice(issued);
        let mut signature = [0u8; 64];
        signature.copy_from_slice(sig);
        Ok(Certificate {
            subject_public_key,
            subject_node_id,
            issued_at: u64::from_le_bytes(issued_at),
            orchestrator_signature: Signature(signature),
        })
    }
}

pub fn cert_issue(
    orchestrator_key: &NodeKeyPair,
    subject_public_key: &NodePublicKey,
    node_id: &str,
    issued_at: u64,
) -> Result<Certificate, CryptoError> {
    if node_id.is_empty() || node_id.len() > MAX_NODE_ID_LEN {
        return Err(CryptoError::MalformedCertificate("node id length"));
    }
    let canonical = Certificate::canonical_subject(subject_public_key, node_id, issued_at);
    Ok(Certificate {
        subject_public_key: *subject_public_key,
        subject_node_id: node_id.to_string(),
        issued_at,
        orchestrator_signature: sign(orchestrator_key, &canonical),
    })
}

pub fn cert_verify(orchestrator_public: &NodePublicKey, cert: &Certificate) -> bool {
    let canonical = Certificate::canonical_subject(
        &cert.subject_public_key,
        &cert.subject_node_id,
        cert.issued_at,
    );
    signature_verify(
        orchestrator_public,
        &canonical,
        &cert.orchestrator_signature,
    )
}

/// Persisted set of nonces a node has issued; refuses duplicates so the
/// freshness audit has a ground truth to check.
#[derive(Debug, Default)]
pub struct NonceLog {
    seen: std::collections::HashSet<[u8; 32]>,
}

impl NonceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(lines: &str) -> Self {
        let mut seen = std::collections::HashSet::new();
        for line in lines.lines() {
            if let Ok(bytes) = hex::decode(line.trim()) {
                if bytes.len() == 32 {
                    let mut n = [0u8; 32];
                    n.copy_from_slice(&bytes);
                    seen.insert(n);
                }
            }
        }
        NonceLog { seen }
    }

    /// Issues a fresh nonce, recording it. The 256-bit space makes a repeat
    /// from the OS RNG a hardware-failure signal, reported as an error
    /// rather than silently reused.
    pub fn issue(&mut self) -> Result<Nonce, CryptoError> {
        let nonce = Nonce::generate();
        if !self.seen.insert(nonce.0) {
            return Err(CryptoError::NonceReuse);
        }
        Ok(nonce)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    pub fn contains(&self, nonce: &Nonce) -> bool {
        self.seen.contains(&nonce.0)
    }
}

pub(crate) fn put_prefixed(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub(crate) fn take_prefixed<'a>(bytes: &'a [u8], cursor: &mut usize) -> Option<&'a [u8]> {
    let len_end = cursor.checked_add(4)?;
    let len_bytes = bytes.get(*cursor..len_end)?;
    let len = u32::from_le_bytes(len_bytes.try_into().ok()?) as usize;
    let end = len_end.checked_add(len)?;
    let data = bytes.get(len_end..end)?;
    *cursor = end;
    Some(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keypair_public_point_consistent() {
        let kp = NodeKeyPair::generate().unwrap();
        let rebuilt = NodeKeyPair::from_bytes(&kp.secret_bytes()).unwrap();
        assert_eq!(kp.public_key(), rebuilt.public_key());
    }

    #[test]
    fn keypair_generation_is_random() {
        let a = NodeKeyPair::generate().unwrap();
        let b = NodeKeyPair::generate().unwrap();
        assert_ne!(a.secret_bytes(), b.secret_bytes());
    }

    #[test]
    fn public_key_roundtrips_wire_encoding() {
        let kp = NodeKeyPair::generate().unwrap();
        let pk = kp.public_key();
        assert_eq!(NodePublicKey::decode(&pk.0).unwrap(), pk);
    }

    #[test]
    fn ecdh_is_symmetric() {
        for _ in 0..100 {
            let a = NodeKeyPair::generate().unwrap();
            let b = NodeKeyPair::generate().unwrap();
            let s1 = ecdh_shared_secret(&a, &b.public_key()).unwrap();
            let s2 = ecdh_shared_secret(&b, &a.public_key()).unwrap();
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn ecdh_rejects_identity_point() {
        let a = NodeKeyPair::generate().unwrap();
        // SEC1 encoding of the point at infinity is the single byte 0x00;
        // any 33-byte buffer starting with 0x00 is likewise invalid.
        let degenerate = NodePublicKey([0u8; 33]);
        assert_eq!(
            ecdh_shared_secret(&a, &degenerate),
            Err(CryptoError::InvalidPeerPoint)
        );
        assert!(NodePublicKey::decode(&[0u8; 33]).is_err());
        assert!(NodePublicKey::decode(&[0u8; 1]).is_err());
    }

    #[test]
    fn session_keys_deterministic_and_separated() {
        let secret = [7u8; 32];
        let transcript = [9u8; 32];
        let k1 = derive_session_keys(&secret, &transcript);
        let k2 = derive_session_keys(&secret, &transcript);
        assert_eq!(k1.enc_key, k2.enc_key);
        assert_eq!(k1.mac_key, k2.mac_key);
        assert_ne!(k1.enc_key, k1.mac_key);
        let k3 = derive_session_keys(&secret, &[10u8; 32]);
        assert_ne!(k1.enc_key, k3.enc_key);
        assert_ne!(k1.mac_key, k3.mac_key);
    }

    #[test]
    fn hmac_round_trip_and_bit_flip() {
        let key = [3u8; 32];
        let msg = b"migration state bytes";
        let tag = hmac_compute(&key, msg);
        assert!(hmac_verify(&key, msg, &tag));
        let mut tampered = msg.to_vec();
        tampered[0] ^= 1;
        assert!(!hmac_verify(&key, &tampered, &tag));
    }

    #[test]
    fn sign_verify_matrix() {
        let kp = NodeKeyPair::generate().unwrap();
        let other = NodeKeyPair::generate().unwrap();
        let msg = b"challenge over a measurement";
        let sig = sign(&kp, msg);
        assert!(signature_verify(&kp.public_key(), msg, &sig));
        assert!(!signature_verify(&other.public_key(), msg, &sig));
        assert!(!signature_verify(
            &kp.public_key(),
            b"challenge over a different one",
            &sig
        ));
    }

    #[test]
    fn certificate_issue_verify_and_mutation() {
        let orch = NodeKeyPair::generate().unwrap();
        let node = NodeKeyPair::generate().unwrap();
        let cert = cert_issue(&orch, &node.public_key(), "smn-1", 1_700_000_000).unwrap();
        assert!(cert_verify(&orch.public_key(), &cert));

        // Self-signed: an attacker issues a certificate under its own key.
        let attacker = NodeKeyPair::generate().unwrap();
        let forged = cert_issue(&attacker, &node.public_key(), "rogue", 1).unwrap();
        assert!(!cert_verify(&orch.public_key(), &forged));

        let mut mutated = cert.clone();
        mutated.subject_node_id = "smn-2".to_string();
        assert!(!cert_verify(&orch.public_key(), &mutated));
    }

    #[test]
    fn certificate_wire_roundtrip() {
        let orch = NodeKeyPair::generate().unwrap();
        let node = NodeKeyPair::generate().unwrap();
        let cert = cert_issue(&orch, &node.public_key(), "node-x", 42).unwrap();
        let bytes = cert.to_bytes();
        assert_eq!(Certificate::from_bytes(&bytes).unwrap(), cert);
        assert!(Certificate::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn nonce_log_rejects_recorded_duplicates() {
        let mut log = NonceLog::new();
        let n = log.issue().unwrap();
        assert!(log.contains(&n));
        let reloaded = NonceLog::load(&hex::encode(n.0));
        assert!(reloaded.contains(&n));
    }

    #[test]
    fn nonce_uniqueness_over_many_sessions() {
        let mut log = NonceLog::new();
        for _ in 0..10_000 {
            log.issue().unwrap();
        }
        assert_eq!(log.len(), 10_000);
    }
}
