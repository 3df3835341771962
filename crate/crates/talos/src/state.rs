//! Volatile-state model: bit-exact serialization, session-key masking
//! for transit, and the counter-offset scheme that keeps monotonic
//! counters non-decreasing across a migration.
//!
//! Masking is encrypt-then-MAC: the AEAD already authenticates, but the
//! protocol names the ciphertext and the MAC as separate verifiable
//! artifacts, so both layers exist and the MAC is checked before any
//! decryption is attempted.

use std::collections::BTreeMap;

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, KeyInit};

use crate::crypto::{hmac_compute, hmac_verify, SessionKeys};
use crate::tee::CounterSet;

pub const STATE_MAGIC: &[u8; 4] = b"TVS1";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum StateError {
    #[error("malformed serialized state: {0}")]
    MalformedState(&'static str),
    #[error("state MAC mismatch")]
    MacMismatch,
    #[error("state decryption failure")]
    DecryptFailure,
    #[error("counter offsets already applied")]
    OffsetsAlreadyApplied,
    #[error("unknown counter id")]
    UnknownCounterId,
    #[error("effective counter overflow")]
    CounterOverflow,
    #[error("application not paused")]
    AppNotPaused,
    #[error("seal failure: {0}")]
    SealFailure(String),
    #[error("duplicate fd {0} in descriptor table")]
    DuplicateFd(u32),
}

/// An open descriptor carried across migration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FdRecord {
    pub fd: u32,
    pub path: String,
    pub offset: u64,
}

/// The runtime context a guest externalizes: heap and stack images, the
/// descriptor table, monotonic counter values, and opaque secrets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VolatileState {
    pub heap_image: Vec<u8>,
    pub stack_image: Vec<u8>,
    pub fd_table: Vec<FdRecord>,
    pub counters: Vec<([u8; 8], u64)>,
    pub secrets: Vec<u8>,
}

impl VolatileState {
    pub fn is_empty(&self) -> bool {
        self.heap_image.is_empty()
            && self.stack_image.is_empty()
            && self.fd_table.is_empty()
            && self.counters.is_empty()
            && self.secrets.is_empty()
    }
}

/// Serialized layout (all integers little-endian):
///
/// ```text
/// "TVS1"
/// u32 heap len      || heap bytes
/// u32 stack len     || stack bytes
/// u32 fd count      || u32 fd bytes len || fd records
/// u32 counter count || u32 counter bytes len || 16-byte counter records
/// u32 secrets len   || secret bytes
/// ```
///
/// An fd record is `u32 fd || u32 path len || path || u64 offset`; a
/// counter record is `8-byte id || u64 value`. The empty state is the
/// magic followed by 28 zero bytes (the seven u32 words above).
pub fn volatile_serialize(state: &VolatileState) -> Vec<u8> {
    let mut fd_bytes = Vec::new();
    for fd in &state.fd_table {
        fd_bytes.extend_from_slice(&fd.fd.to_le_bytes());
        fd_bytes.extend_from_slice(&(fd.path.len() as u32).to_le_bytes());
        fd_bytes.extend_from_slice(fd.path.as_bytes());
        fd_bytes.extend_from_slice(&fd.offset.to_le_bytes());
    }
    let mut counter_bytes = Vec::new();
    for (id, value) in &state.counters {
        counter_bytes.extend_from_slice(id);
        counter_bytes.extend_from_slice(&value.to_le_bytes());
    }

    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&(state.heap_image.len() as u32).to_le_bytes());
    out.extend_from_slice(&state.heap_image);
    out.extend_from_slice(&(state.stack_image.len() as u32).to_le_bytes());
    out.extend_from_slice(&state.stack_image);
    out.extend_from_slice(&(state.fd_table.len() as u32).to_le_bytes());
    out.extend_from_slice(&(fd_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&fd_bytes);
    out.extend_from_slice(&(state.counters.len() as u32).to_le_bytes());
    out.extend_from_slice(&(counter_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&counter_bytes);
    out.extend_from_slice(&(state.secrets.len() as u32).to_le_bytes());
    out.extend_from_slice(&state.secrets);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    cursor: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], StateError> {
        let end = self
            .cursor
            .checked_add(n)
            .ok_or(StateError::MalformedState(what))?;
        let slice = self
            .bytes
            .get(self.cursor..end)
            .ok_or(StateError::MalformedState(what))?;
        self.cursor = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, StateError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, StateError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn volatile_deserialize(bytes: &[u8]) -> Result<VolatileState, StateError> {
    let mut r = Reader { bytes, cursor: 0 };
    if r.take(4, "magic")? != STATE_MAGIC {
        return Err(StateError::MalformedState("magic"));
    }
    let heap_len = r.u32("heap length")? as usize;
    let heap_image = r.take(heap_len, "heap bytes")?.to_vec();
    let stack_len = r.u32("stack length")? as usize;
    let stack_image = r.take(stack_len, "stack bytes")?.to_vec();

    let fd_count = r.u32("fd count")? as usize;
    let fd_bytes_len = r.u32("fd bytes length")? as usize;
    let fd_region = r.take(fd_bytes_len, "fd records")?;
    let mut fd_reader = Reader {
        bytes: fd_region,
        cursor: 0,
    };
    let mut fd_table = Vec::with_capacity(fd_count.min(4096));
    let mut seen_fds = std::collections::HashSet::new();
    for _ in 0..fd_count {
        let fd = fd_reader.u32("fd number")?;
        let path_len = fd_reader.u32("fd path length")? as usize;
        let path = String::from_utf8(fd_reader.take(path_len, "fd path")?.to_vec())
            .map_err(|_| StateError::MalformedState("fd path utf-8"))?;
        let offset = fd_reader.u64("fd offset")?;
        if !seen_fds.insert(fd) {
            return Err(StateError::DuplicateFd(fd));
        }
        fd_table.push(FdRecord { fd, path, offset });
    }
    if fd_reader.cursor != fd_region.len() {
        return Err(StateError::MalformedState("fd region trailing bytes"));
    }

    let counter_count = r.u32("counter count")? as usize;
    let counter_bytes_len = r.u32("counter bytes length")? as usize;
    if counter_bytes_len != counter_count * 16 {
        return Err(StateError::MalformedState("counter region width"));
    }
    let counter_region = r.take(counter_bytes_len, "counter records")?;
    let mut counters = Vec::with_capacity(counter_count.min(4096));
    for chunk in counter_region.chunks_exact(16) {
        let mut id = [0u8; 8];
        id.copy_from_slice(&chunk[..8]);
        counters.push((id, u64::from_le_bytes(chunk[8..].try_into().unwrap())));
    }

    let secrets_len = r.u32("secrets length")? as usize;
    let secrets = r.take(secrets_len, "secret bytes")?.to_vec();
    if r.cursor != bytes.len() {
        return Err(StateError::MalformedState("trailing bytes"));
    }
    Ok(VolatileState {
        heap_image,
        stack_image,
        fd_table,
        counters,
        secrets,
    })
}

/// The masked (in-transit) form of a serialized state.
/// Wire form: `aead_nonce(12) || u32-LE ct-len || ciphertext || mac(32)`,
/// with `mac = HMAC(mac_key, aead_nonce || ciphertext)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedState {
    pub ciphertext: Vec<u8>,
    pub mac: [u8; 32],
    pub aead_nonce: [u8; 12],
}

impl MaskedState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 + self.ciphertext.len() + 32);
        out.extend_from_slice(&self.aead_nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.mac);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StateError> {
        if bytes.len() < 12 + 4 + 32 {
            return Err(StateError::MalformedState("masked state too short"));
        }
        let mut aead_nonce = [0u8; 12];
        aead_nonce.copy_from_slice(&bytes[..12]);
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if 16usize.checked_add(len).and_then(|v| v.checked_add(32)) != Some(bytes.len()) {
            return Err(StateError::MalformedState("masked state length"));
        }
        let ciphertext = bytes[16..16 + len].to_vec();
        let mut mac = [0u8; 32];
        mac.copy_from_slice(&bytes[16 + len..]);
        Ok(MaskedState {
            ciphertext,
            mac,
            aead_nonce,
        })
    }
}

pub fn mask_state(plain: &[u8], keys: &SessionKeys) -> MaskedState {
    let cipher = Aes256Gcm::new_from_slice(&keys.enc_key).expect("32-byte aes-256 key");
    let mut aead_nonce = [0u8; 12];
    use rand::RngCore;
    rand::rngs::OsRng.fill_bytes(&mut aead_nonce);
    let ciphertext = cipher
        .encrypt(
            &aead_nonce.into(),
            Payload {
                msg: plain,
                aad: &[],
            },
        )
        .expect("aes-gcm encryption is infallible for in-memory buffers");
    let mut mac_input = Vec::with_capacity(12 + ciphertext.len());
    mac_input.extend_from_slice(&aead_nonce);
    mac_input.extend_from_slice(&ciphertext);
    let mac = hmac_compute(&keys.mac_key, &mac_input);
    MaskedState {
        ciphertext,
        mac,
        aead_nonce,
    }
}

/// Verifies the MAC (constant-time) before attempting decryption.
pub fn unmask_state(masked: &MaskedState, keys: &SessionKeys) -> Result<Vec<u8>, StateError> {
    let mut mac_input = Vec::with_capacity(12 + masked.ciphertext.len());
    mac_input.extend_from_slice(&masked.aead_nonce);
    mac_input.extend_from_slice(&masked.ciphertext);
    if !hmac_verify(&keys.mac_key, &mac_input, &masked.mac) {
        return Err(StateError::MacMismatch);
    }
    let cipher = Aes256Gcm::new_from_slice(&keys.enc_key).expect("32-byte aes-256 key");
    cipher
        .decrypt(
            &masked.aead_nonce.into(),
            Payload {
                msg: &masked.ciphertext,
                aad: &[],
            },
        )
        .map_err(|_| StateError::DecryptFailure)
}

/// Captures a paused guest's volatile state — live counter values
/// included — and seals its serialization under the given policy. Each
/// call draws a fresh AEAD nonce, so two externalizations of unchanged
/// state yield different blobs with identical plaintext.
pub fn externalize_state(
    instance: &crate::guest::GuestInstance,
    root: &crate::tee::PlatformRootSecret,
    policy: &crate::tee::SealPolicy,
) -> Result<crate::tee::SealedBlob, StateError> {
    if !instance.is_paused() {
        return Err(StateError::AppNotPaused);
    }
    let serialized = volatile_serialize(&instance.capture_state());
    crate::tee::seal(root, policy, &serialized).map_err(|e| StateError::SealFailure(e.to_string()))
}

/// Source counter values captured at export, applied exactly once on the
/// destination.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CounterOffsetTable {
    pub offsets: Vec<([u8; 8], u64)>,
}

pub fn export_counter_offsets(state: &VolatileState) -> CounterOffsetTable {
    CounterOffsetTable {
        offsets: state.counters.clone(),
    }
}

/// Destination-side view combining freshly zeroed local hardware counters
/// with the imported offsets: `effective(id) = local(id) + offset(id)`.
#[derive(Debug)]
pub struct EffectiveCounters {
    local: CounterSet,
    offsets: BTreeMap<[u8; 8], u64>,
    offsets_applied: bool,
}

impl Default for EffectiveCounters {
    fn default() -> Self {
        Self::new()
    }
}

impl EffectiveCounters {
    /// Fresh instance counters, all zero, no offsets (initial launch).
    pub fn new() -> Self {
        EffectiveCounters {
            local: CounterSet::new(),
            offsets: BTreeMap::new(),
            offsets_applied: false,
        }
    }

    /// Applies the offset table. Rejected on a second application.
    pub fn apply_offsets(&mut self, table: &CounterOffsetTable) -> Result<(), StateError> {
        if self.offsets_applied {
            return Err(StateError::OffsetsAlreadyApplied);
        }
        for (id, offset) in &table.offsets {
            self.offsets.insert(*id, *offset);
        }
        self.offsets_applied = true;
        Ok(())
    }

    /// Increments the local hardware counter (creating it at zero on first
    /// use) and returns the effective value.
    pub fn increment(&self, id: [u8; 8]) -> Result<u64, StateError> {
        let local = self
            .local
            .increment(id)
            .map_err(|_| StateError::CounterOverflow)?;
        local
            .checked_add(self.offsets.get(&id).copied().unwrap_or(0))
            .ok_or(StateError::CounterOverflow)
    }

    pub fn read(&self, id: [u8; 8]) -> Result<u64, StateError> {
        if !self.offsets.contains_key(&id) && !self.known(id) {
            return Err(StateError::UnknownCounterId);
        }
        Ok(self.local.read(id) + self.offsets.get(&id).copied().unwrap_or(0))
    }

    fn known(&self, id: [u8; 8]) -> bool {
        self.local.snapshot().iter().any(|(k, _)| *k == id)
    }

    /// Effective values of every known counter, sorted by id.
    pub fn snapshot(&self) -> Vec<([u8; 8], u64)> {
        let mut ids: std::collections::BTreeSet<[u8; 8]> = self.offsets.keys().copied().collect();
        for (id, _) in self.local.snapshot() {
            ids.insert(id);
        }
        ids.into_iter()
            .map(|id| {
                (
                    id,
                    self.local.read(id) + self.offsets.get(&id).copied().unwrap_or(0),
                )
            })
            .collect()
    }
}
