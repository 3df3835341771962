//! Bit-exact wire protocol: `magic "TALOS1" || msg_type u8 ||
//! payload_len u32-LE || payload`.
//!
//! Message type registry: 0x01 Challenge, 0x02 ChannelKey,
//! 0x03 StatePackage, 0x04 AttestationDigest, 0x05 VerificationResult,
//! 0x10 EnrollRequest, 0x11 EnrollResponse, 0x7F Abort. Unknown types
//! decode to `Opaque` and re-encode byte-identically.

use crate::crypto::{Certificate, CryptoError, NodePublicKey, Nonce, Signature};
use crate::state::MaskedState;
use crate::tee::{AttestationQuote, EnclaveMeasurement};

pub const WIRE_MAGIC: &[u8; 6] = b"TALOS1";
pub const FRAME_HEADER_LEN: usize = 11;

pub const MSG_CHALLENGE: u8 = 0x01;
pub const MSG_CHANNEL_KEY: u8 = 0x02;
pub const MSG_STATE_PACKAGE: u8 = 0x03;
pub const MSG_ATTESTATION_DIGEST: u8 = 0x04;
pub const MSG_VERIFICATION_RESULT: u8 = 0x05;
pub const MSG_ENROLL_REQUEST: u8 = 0x10;
pub const MSG_ENROLL_RESPONSE: u8 = 0x11;
pub const MSG_ABORT: u8 = 0x7f;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("frame length mismatch")]
    LengthMismatch,
    #[error("malformed payload: {0}")]
    MalformedPayload(&'static str),
}

impl From<CryptoError> for WireError {
    fn from(_: CryptoError) -> Self {
        WireError::MalformedPayload("embedded crypto object")
    }
}

/// The migration challenge a target node opens a session with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeMsg {
    pub target_cert: Certificate,
    pub target_pubkey: NodePublicKey,
    pub requested_measurement: EnclaveMeasurement,
    /// Signature by the target's long-term key over the measurement.
    pub challenge_signature: Signature,
    pub session_id: [u8; 16],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRole {
    Source,
    Target,
}

impl ChannelRole {
    pub fn tag(&self) -> u8 {
        match self {
            ChannelRole::Source => 0,
            ChannelRole::Target => 1,
        }
    }
}

/// Ephemeral key contribution, signed by the sender's enrolled key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelKeyMsg {
    pub session_id: [u8; 16],
    pub role: ChannelRole,
    pub ephemeral_pubkey: NodePublicKey,
    pub binding_signature: Signature,
}

impl ChannelKeyMsg {
    /// The byte string the binding signature covers.
    pub fn binding_payload(
        session_id: &[u8; 16],
        role: ChannelRole,
        eph: &NodePublicKey,
    ) -> Vec<u8> {
        let mut out = b"talos-channel-key ".to_vec();
        out.extend_from_slice(session_id);
        out.push(role.tag());
        out.extend_from_slice(&eph.0);
        out
    }
}

/// The masked volatile state plus the source's identity and a fresh nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatePackageMsg {
    pub masked: MaskedState,
    pub source_pubkey: NodePublicKey,
    pub source_cert: Certificate,
    pub nonce: Nonce,
    pub session_id: [u8; 16],
}

/// The target's proof of execution: `HMAC(mac_key, reference' || nonce)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttestationDigestMsg {
    pub digest: [u8; 32],
    pub session_id: [u8; 16],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationResultMsg {
    pub session_id: [u8; 16],
    pub confirmed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollRequestMsg {
    pub node_id: String,
    pub node_pubkey: NodePublicKey,
    pub quote: AttestationQuote,
}

/// Enrollment result. Profiles travel as opaque signed encodings so the
/// wire layer stays independent of the profile schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollResponseMsg {
    pub accepted: bool,
    pub detail: String,
    pub certificate_bytes: Vec<u8>,
    pub orchestrator_pubkey: Option<NodePublicKey>,
    pub profiles: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbortMsg {
    pub session_id: [u8; 16],
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Challenge(ChallengeMsg),
    ChannelKey(ChannelKeyMsg),
    StatePackage(StatePackageMsg),
    AttestationDigest(AttestationDigestMsg),
    VerificationResult(VerificationResultMsg),
    EnrollRequest(EnrollRequestMsg),
    EnrollResponse(EnrollResponseMsg),
    Abort(AbortMsg),
    /// Unknown message type, preserved for forward compatibility.
    Opaque {
        msg_type: u8,
        payload: Vec<u8>,
    },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Challenge(_) => MSG_CHALLENGE,
            Message::ChannelKey(_) => MSG_CHANNEL_KEY,
            Message::StatePackage(_) => MSG_STATE_PACKAGE,
            Message::AttestationDigest(_) => MSG_ATTESTATION_DIGEST,
            Message::VerificationResult(_) => MSG_VERIFICATION_RESULT,
            Message::EnrollRequest(_) => MSG_ENROLL_REQUEST,
            Message::EnrollResponse(_) => MSG_ENROLL_RESPONSE,
            Message::Abort(_) => MSG_ABORT,
            Message::Opaque { msg_type, .. } => *msg_type,
        }
    }

    pub fn session_id(&self) -> Option<[u8; 16]> {
        match self {
            Message::Challenge(m) => Some(m.session_id),
            Message::ChannelKey(m) => Some(m.session_id),
            Message::StatePackage(m) => Some(m.session_id),
            Message::AttestationDigest(m) => Some(m.session_id),
            Message::VerificationResult(m) => Some(m.session_id),
            Message::Abort(m) => Some(m.session_id),
            _ => None,
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    fn prefixed(&mut self, bytes: &[u8]) {
        self.buf
            .extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(bytes);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    cursor: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, cursor: 0 }
    }

    fn raw(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WireError> {
        let end = self
            .cursor
            .checked_add(n)
            .ok_or(WireError::MalformedPayload(what))?;
        let slice = self
            .bytes
            .get(self.cursor..end)
            .ok_or(WireError::MalformedPayload(what))?;
        self.cursor = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], WireError> {
        Ok(self.raw(N, what)?.try_into().unwrap())
    }

    fn prefixed(&mut self, what: &'static str) -> Result<&'a [u8], WireError> {
        let len = u32::from_le_bytes(self.array::<4>(what)?) as usize;
        self.raw(len, what)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, WireError> {
        Ok(self.raw(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.array::<4>(what)?))
    }

    fn string(&mut self, what: &'static str) -> Result<String, WireError> {
        String::from_utf8(self.prefixed(what)?.to_vec())
            .map_err(|_| WireError::MalformedPayload(what))
    }

    fn finish(&self, what: &'static str) -> Result<(), WireError> {
        if self.cursor == self.bytes.len() {
            Ok(())
        } else {
            Err(WireError::MalformedPayload(what))
        }
    }
}

fn encode_payload(message: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    match message {
        Message::Challenge(m) => {
            w.prefixed(&m.target_cert.to_bytes());
            w.raw(&m.target_pubkey.0);
            w.raw(&m.requested_measurement.0);
            w.raw(&m.challenge_signature.0);
            w.raw(&m.session_id);
        }
        Message::ChannelKey(m) => {
            w.raw(&m.session_id);
            w.u8(m.role.tag());
            w.raw(&m.ephemeral_pubkey.0);
            w.raw(&m.binding_signature.0);
        }
        Message::StatePackage(m) => {
            w.prefixed(&m.masked.to_bytes());
            w.raw(&m.source_pubkey.0);
            w.prefixed(&m.source_cert.to_bytes());
            w.raw(&m.nonce.0);
            w.raw(&m.session_id);
        }
        Message::AttestationDigest(m) => {
            w.raw(&m.digest);
            w.raw(&m.session_id);
        }
        Message::VerificationResult(m) => {
            w.raw(&m.session_id);
            w.u8(m.confirmed as u8);
            w.prefixed(m.detail.as_bytes());
        }
        Message::EnrollRequest(m) => {
            w.prefixed(m.node_id.as_bytes());
            w.raw(&m.node_pubkey.0);
            w.raw(&m.quote.measurement.0);
            w.raw(&m.quote.report_data);
            w.raw(&m.quote.signature.0);
        }
        Message::EnrollResponse(m) => {
            w.u8(m.accepted as u8);
            w.prefixed(m.detail.as_bytes());
            w.prefixed(&m.certificate_bytes);
            match &m.orchestrator_pubkey {
                Some(pk) => {
                    w.u8(1);
                    w.raw(&pk.0);
                }
                None => w.u8(0),
            }
            w.u32(m.profiles.len() as u32);
            for profile in &m.profiles {
                w.prefixed(profile);
            }
        }
        Message::Abort(m) => {
            w.raw(&m.session_id);
            w.prefixed(m.reason.as_bytes());
        }
        Message::Opaque { payload, .. } => w.raw(payload),
    }
    w.buf
}

fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader::new(payload);
    let message = match msg_type {
        MSG_CHALLENGE => {
            let cert = Certificate::from_bytes(r.prefixed("target cert")?)?;
            let pubkey = NodePublicKey::decode(r.raw(33, "target pubkey")?)?;
            let measurement = EnclaveMeasurement(r.array::<32>("measurement")?);
            let signature = Signature(r.array::<64>("challenge signature")?);
            let session_id = r.array::<16>("session id")?;
            Message::Challenge(ChallengeMsg {
                target_cert: cert,
                target_pubkey: pubkey,
                requested_measurement: measurement,
                challenge_signature: signature,
                session_id,
            })
        }
        MSG_CHANNEL_KEY => {
            let session_id = r.array::<16>("session id")?;
            let role = match r.u8("role tag")? {
                0 => ChannelRole::Source,
                1 => ChannelRole::Target,
                _ => return Err(WireError::MalformedPayload("role tag")),
            };
            let ephemeral = NodePublicKey::decode(r.raw(33, "ephemeral pubkey")?)?;
            let signature = Signature(r.array::<64>("binding signature")?);
            Message::ChannelKey(ChannelKeyMsg {
                session_id,
                role,
                ephemeral_pubkey: ephemeral,
                binding_signature: signature,
            })
        }
        MSG_STATE_PACKAGE => {
            let masked = MaskedState::from_bytes(r.prefixed("masked state")?)
                .map_err(|_| WireError::MalformedPayload("masked state"))?;
            let source_pubkey = NodePublicKey::decode(r.raw(33, "source pubkey")?)?;
            let source_cert = Certificate::from_bytes(r.prefixed("source cert")?)?;
            let nonce = Nonce(r.array::<32>("nonce")?);
            let session_id = r.array::<16>("session id")?;
            Message::StatePackage(StatePackageMsg {
                masked,
                source_pubkey,
                source_cert,
                nonce,
                session_id,
            })
        }
        MSG_ATTESTATION_DIGEST => Message::AttestationDigest(AttestationDigestMsg {
            digest: r.array::<32>("digest")?,
            session_id: r.array::<16>("session id")?,
        }),
        MSG_VERIFICATION_RESULT => Message::VerificationResult(VerificationResultMsg {
            session_id: r.array::<16>("session id")?,
            confirmed: r.u8("status")? != 0,
            detail: r.string("detail")?,
        }),
        MSG_ENROLL_REQUEST => {
            let node_id = r.string("node id")?;
            let node_pubkey = NodePublicKey::decode(r.raw(33, "node pubkey")?)?;
            let measurement = EnclaveMeasurement(r.array::<32>("quote measurement")?);
            let report_data = r.array::<64>("report data")?;
            let signature = Signature(r.array::<64>("quote signature")?);
            Message::EnrollRequest(EnrollRequestMsg {
                node_id,
                node_pubkey,
                quote: AttestationQuote {
                    measurement,
                    report_data,
                    signature,
                },
            })
        }
        MSG_ENROLL_RESPONSE => {
            let accepted = r.u8("status")? != 0;
            let detail = r.string("detail")?;
            let certificate_bytes = r.prefixed("certificate")?.to_vec();
            let orchestrator_pubkey = match r.u8("orchestrator pubkey flag")? {
                0 => None,
                1 => Some(NodePublicKey::decode(r.raw(33, "orchestrator pubkey")?)?),
                _ => return Err(WireError::MalformedPayload("orchestrator pubkey flag")),
            };
            let count = r.u32("profile count")? as usize;
            let mut profiles = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                profiles.push(r.prefixed("profile")?.to_vec());
            }
            Message::EnrollResponse(EnrollResponseMsg {
                accepted,
                detail,
                certificate_bytes,
                orchestrator_pubkey,
                profiles,
            })
        }
        MSG_ABORT => Message::Abort(AbortMsg {
            session_id: r.array::<16>("session id")?,
            reason: r.string("reason")?,
        }),
        other => {
            return Ok(Message::Opaque {
                msg_type: other,
                payload: payload.to_vec(),
            });
        }
    };
    r.finish("trailing payload bytes")?;
    Ok(message)
}

pub fn encode_message(message: &Message) -> Vec<u8> {
    let payload = encode_payload(message);
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(WIRE_MAGIC);
    out.push(message.msg_type());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decodes one complete frame. The input must be exactly one frame:
/// shorter is `TruncatedFrame`, longer is `LengthMismatch`.
pub fn decode_message(bytes: &[u8]) -> Result<Message, WireError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(WireError::TruncatedFrame);
    }
    if &bytes[..6] != WIRE_MAGIC {
        return Err(WireError::BadMagic);
    }
    let msg_type = bytes[6];
    let payload_len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let expected = FRAME_HEADER_LEN
        .checked_add(payload_len)
        .ok_or(WireError::TruncatedFrame)?;
    if bytes.len() < expected {
        return Err(WireError::TruncatedFrame);
    }
    if bytes.len() > expected {
        return Err(WireError::LengthMismatch);
    }
    decode_payload(msg_type, &bytes[FRAME_HEADER_LEN..])
}

/// Reads one length-framed message from a byte stream.
pub fn read_frame(stream: &mut impl std::io::Read) -> std::io::Result<Vec<u8>> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    stream.read_exact(&mut header)?;
    let payload_len = u32::from_le_bytes(header[7..11].try_into().unwrap()) as usize;
    if payload_len > 64 * 1024 * 1024 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "frame too large",
        ));
    }
    let mut frame = header.to_vec();
    frame.resize(FRAME_HEADER_LEN + payload_len, 0);
    stream.read_exact(&mut frame[FRAME_HEADER_LEN..])?;
    Ok(frame)
}

pub fn write_frame(stream: &mut impl std::io::Write, frame: &[u8]) -> std::io::Result<()> {
    stream.write_all(frame)?;
    stream.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{cert_issue, NodeKeyPair};
    use crate::state::mask_state;

    fn sample_cert() -> (NodeKeyPair, Certificate) {
        let orch = NodeKeyPair::generate().unwrap();
        let node = NodeKeyPair::generate().unwrap();
        let cert = cert_issue(&orch, &node.public_key(), "node-a", 1000).unwrap();
        (node, cert)
    }

    fn roundtrip(message: Message) {
        let bytes = encode_message(&message);
        assert_eq!(decode_message(&bytes).unwrap(), message);
    }

    #[test]
    fn all_message_types_roundtrip() {
        let (node, cert) = sample_cert();
        let keys = crate::crypto::derive_session_keys(&[1; 32], &[2; 32]);
        roundtrip(Message::Challenge(ChallengeMsg {
            target_cert: cert.clone(),
            target_pubkey: node.public_key(),
            requested_measurement: EnclaveMeasurement([7; 32]),
            challenge_signature: Signature([8; 64]),
            session_id: [9; 16],
        }));
        roundtrip(Message::ChannelKey(ChannelKeyMsg {
            session_id: [1; 16],
            role: ChannelRole::Target,
            ephemeral_pubkey: node.public_key(),
            binding_signature: Signature([3; 64]),
        }));
        roundtrip(Message::StatePackage(StatePackageMsg {
            masked: mask_state(b"state", &keys),
            source_pubkey: node.public_key(),
            source_cert: cert,
            nonce: Nonce([5; 32]),
            session_id: [6; 16],
        }));
        roundtrip(Message::AttestationDigest(AttestationDigestMsg {
            digest: [1; 32],
            session_id: [2; 16],
        }));
        roundtrip(Message::VerificationResult(VerificationResultMsg {
            session_id: [3; 16],
            confirmed: true,
            detail: "ok".into(),
        }));
        roundtrip(Message::EnrollRequest(EnrollRequestMsg {
            node_id: "smn-1".into(),
            node_pubkey: node.public_key(),
            quote: AttestationQuote {
                measurement: EnclaveMeasurement([4; 32]),
                report_data: [5; 64],
                signature: Signature([6; 64]),
            },
        }));
        roundtrip(Message::EnrollResponse(EnrollResponseMsg {
            accepted: true,
            detail: String::new(),
            certificate_bytes: vec![1, 2, 3],
            orchestrator_pubkey: Some(node.public_key()),
            profiles: vec![vec![9, 9], vec![]],
        }));
        roundtrip(Message::Abort(AbortMsg {
            session_id: [7; 16],
            reason: "nope".into(),
        }));
    }

    #[test]
    fn unknown_type_preserved_as_opaque() {
        let message = Message::Opaque {
            msg_type: 0x42,
            payload: vec![1, 2, 3],
        };
        let bytes = encode_message(&message);
        let decoded = decode_message(&bytes).unwrap();
        assert_eq!(decoded, message);
        assert_eq!(encode_message(&decoded), bytes);
    }

    #[test]
    fn frame_error_cases() {
        let message = Message::Abort(AbortMsg {
            session_id: [0; 16],
            reason: String::new(),
        });
        let bytes = encode_message(&message);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert_eq!(decode_message(&bad_magic).unwrap_err(), WireError::BadMagic);

        assert_eq!(
            decode_message(&bytes[..bytes.len() - 1]).unwrap_err(),
            WireError::TruncatedFrame
        );
        assert_eq!(
            decode_message(&bytes[..5]).unwrap_err(),
            WireError::TruncatedFrame
        );

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert_eq!(
            decode_message(&trailing).unwrap_err(),
            WireError::LengthMismatch
        );

        // Declared length larger than the remaining bytes.
        let mut lying = bytes;
        lying[7..11].copy_from_slice(&1000u32.to_le_bytes());
        assert_eq!(
            decode_message(&lying).unwrap_err(),
            WireError::TruncatedFrame
        );
    }

    #[test]
    fn stream_framing_roundtrip() {
        let message = Message::AttestationDigest(AttestationDigestMsg {
            digest: [0xaa; 32],
            session_id: [0xbb; 16],
        });
        let bytes = encode_message(&message);
        let mut buf = Vec::new();
        write_frame(&mut buf, &bytes).unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        let frame = read_frame(&mut cursor).unwrap();
        assert_eq!(decode_message(&frame).unwrap(), message);
    }
}
