//! The five executable security games. Each trial runs a game's setup
//! against fresh nodes and evaluates its winning condition mechanically;
//! a report aggregates adversary wins (the protocol is sound iff every
//! count is zero).
//!
//! Game I   replay of recorded migration data into a fresh session
//! Game II  cloning: forged certificates / unapproved migration services
//! Game III fork bomb: concurrent same-measurement migrations
//! Game IV  volatile-state tampering in transit
//! Game V   application tampering on the target (caught at verification)

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::adversary::{Action, Adversary, FrameDirection, Pattern};
use super::memory::{pump_session, run_migration};
use super::TestBed;
use crate::crypto::{self, NodeKeyPair};
use crate::node::{MigrationOutcome, NodeError};
use crate::orchestrator::SignedProfile;
use crate::wire::{ChallengeMsg, Message, MSG_ATTESTATION_DIGEST, MSG_STATE_PACKAGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GameId {
    I,
    II,
    III,
    IV,
    V,
}

impl GameId {
    pub fn parse(s: &str) -> Option<GameId> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Some(GameId::I),
            "II" | "2" => Some(GameId::II),
            "III" | "3" => Some(GameId::III),
            "IV" | "4" => Some(GameId::IV),
            "V" | "5" => Some(GameId::V),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            GameId::I => "I",
            GameId::II => "II",
            GameId::III => "III",
            GameId::IV => "IV",
            GameId::V => "V",
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            GameId::I => "replay attack",
            GameId::II => "cloning attack",
            GameId::III => "fork bomb prevention",
            GameId::IV => "volatile state integrity",
            GameId::V => "application integrity",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameReport {
    pub game: GameId,
    pub trials: u32,
    pub adversary_wins: u32,
    pub transcripts: Vec<String>,
}

impl GameReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "game {} ({}): trials={} adversary_wins={}\n",
            self.game.label(),
            self.game.title(),
            self.trials,
            self.adversary_wins
        );
        for line in &self.transcripts {
            out.push_str("  ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    /// One record per line, tab-separated.
    pub fn to_tsv(&self) -> String {
        format!(
            "game\t{}\ttrials\t{}\tadversary_wins\t{}\n",
            self.game.label(),
            self.trials,
            self.adversary_wins
        )
    }
}

/// Small deterministic generator so a seed fixes every adversarial choice.
pub struct SeededRng(u64);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng(seed.max(1))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> u64 {
        // xorshift64*
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    pub fn pick(&mut self, bound: u64) -> u64 {
        self.next() % bound
    }
}

pub fn run_game(game: GameId, trials: u32, seed: u64) -> Result<GameReport, NodeError> {
    match game {
        GameId::I => game_replay(trials, seed),
        GameId::II => game_cloning(trials, seed),
        GameId::III => game_fork_bomb_default(trials, seed),
        GameId::IV => game_state_integrity(trials, seed),
        GameId::V => game_application_integrity(trials, seed),
    }
}

/// Stamps `session_id` into the trailing 16 payload bytes of a recorded
/// frame (state packages and digests both end with the session id).
fn rebind_session(frame: &[u8], session_id: &[u8; 16]) -> Vec<u8> {
    let mut out = frame.to_vec();
    let n = out.len();
    out[n - 16..].copy_from_slice(session_id);
    out
}

/// Game I: the adversary records `(ENC_state, MAC_state, puzzle')` from a
/// completed migration and replays them — session-rebound — into the next
/// migration of the same application. Wins if the current source accepts
/// the replayed attempt as fresh.
fn game_replay(trials: u32, seed: u64) -> Result<GameReport, NodeError> {
    let mut rng = SeededRng::new(seed);
    let mut wins = 0u32;
    let mut transcripts = Vec::new();
    for trial in 0..trials {
        let bed = TestBed::new(1)?;

        // Leg 1 (honest control): record the package and digest frames.
        let mut recorder = Adversary::with_hooks(vec![
            Action::Record(Pattern {
                msg_type: MSG_STATE_PACKAGE,
                direction: Some(FrameDirection::ToTarget),
                occurrence: 0,
            }),
            Action::Record(Pattern {
                msg_type: MSG_ATTESTATION_DIGEST,
                direction: Some(FrameDirection::ToSource),
                occurrence: 0,
            }),
        ]);
        let leg1 = run_migration(&bed.target, &bed.source, &bed.measurement, &mut recorder)?;
        if !leg1.confirmed() {
            return Err(NodeError::Io(format!(
                "game I control leg failed: {:?}",
                leg1.source_outcome
            )));
        }
        let recorded_package = recorder.tape()[0].clone();
        let recorded_digest = recorder.tape()[1].clone();

        // Leg 2: migrate back; the adversary substitutes recorded data,
        // re-bound to the fresh session. The stale ENC/MAC/nonce are
        // spliced into a message carrying the current source's (public)
        // identity, so only the cryptographic freshness checks are left
        // to reject the replay.
        let (session_id, challenge) = bed.source.begin_migration(&bed.measurement)?;
        let variant = rng.pick(2);
        let mut replayer = match variant {
            0 => {
                let Ok(Message::StatePackage(stale)) =
                    crate::wire::decode_message(&recorded_package)
                else {
                    return Err(NodeError::Io("recorded package did not decode".to_string()));
                };
                let spliced = crate::wire::StatePackageMsg {
                    masked: stale.masked,
                    nonce: stale.nonce,
                    source_pubkey: bed.target.public_key(),
                    source_cert: bed
                        .target
                        .enrollment_certificate()
                        .expect("bed target is enrolled"),
                    session_id,
                };
                Adversary::with_hooks(vec![Action::Inject {
                    pattern: Pattern {
                        msg_type: MSG_STATE_PACKAGE,
                        direction: Some(FrameDirection::ToTarget),
                        occurrence: 0,
                    },
                    frame: crate::wire::encode_message(&Message::StatePackage(spliced)),
                }])
            }
            _ => Adversary::with_hooks(vec![Action::Inject {
                pattern: Pattern {
                    msg_type: MSG_ATTESTATION_DIGEST,
                    direction: Some(FrameDirection::ToSource),
                    occurrence: 0,
                },
                frame: rebind_session(&recorded_digest, &session_id),
            }]),
        };
        // Leg 2 runs target := bed.source (the app now lives on bed.target).
        let leg2 = pump_session(
            &bed.source,
            &bed.target,
            session_id,
            challenge,
            &mut replayer,
        );

        bed.audit.verify_single_instance().map_err(NodeError::Io)?;
        if leg2.confirmed() {
            wins += 1;
            transcripts.push(format!("trial {trial}: variant {variant} ACCEPTED (win)"));
        } else if trial < 3 {
            transcripts.push(format!(
                "trial {trial}: variant {} rejected ({})",
                if variant == 0 {
                    "replay-package"
                } else {
                    "replay-digest"
                },
                leg2.source_abort_reason()
                    .unwrap_or("stalled without acceptance"),
            ));
        }
    }
    Ok(GameReport {
        game: GameId::I,
        trials,
        adversary_wins: wins,
        transcripts,
    })
}

/// Game II: the adversary runs a Migration Service that the orchestrator
/// never approved and presents forged certificates. Wins if a source
/// starts migrating to it or any forged certificate verifies.
fn game_cloning(trials: u32, seed: u64) -> Result<GameReport, NodeError> {
    let mut rng = SeededRng::new(seed);
    let mut wins = 0u32;
    let mut transcripts = Vec::new();
    for trial in 0..trials {
        let bed = TestBed::new(1)?;
        let rogue_key = NodeKeyPair::generate().map_err(NodeError::Crypto)?;
        let variant = rng.pick(3);
        let forged_cert = match variant {
            // Self-signed: the rogue node vouches for itself.
            0 => crypto::cert_issue(&rogue_key, &rogue_key.public_key(), "rogue", 1)
                .map_err(NodeError::Crypto)?,
            // Signed by some third key that is not the orchestrator.
            1 => {
                let third = NodeKeyPair::generate().map_err(NodeError::Crypto)?;
                crypto::cert_issue(&third, &rogue_key.public_key(), "rogue", 1)
                    .map_err(NodeError::Crypto)?
            }
            // A genuine certificate re-targeted at the rogue key.
            _ => {
                let mut stolen = bed
                    .target
                    .enrollment_certificate()
                    .expect("bed target is enrolled");
                stolen.subject_public_key = rogue_key.public_key();
                stolen
            }
        };

        let orch_pk = bed.orchestrator.public_key();
        if crypto::cert_verify(&orch_pk, &forged_cert) {
            wins += 1;
            transcripts.push(format!("trial {trial}: forged certificate VERIFIED (win)"));
            continue;
        }

        // End to end: the rogue service requests the application.
        let mut session_id = [0u8; 16];
        session_id[..8].copy_from_slice(&rng.next().to_le_bytes());
        session_id[8..].copy_from_slice(&rng.next().to_le_bytes());
        let challenge = Message::Challenge(ChallengeMsg {
            target_cert: forged_cert,
            target_pubkey: rogue_key.public_key(),
            requested_measurement: bed.measurement,
            challenge_signature: crypto::sign(&rogue_key, &bed.measurement.0),
            session_id,
        });
        let replies = bed.source.handle_message(&challenge);
        let rejected = matches!(replies.first(), Some(Message::Abort(_)));
        let still_active = bed
            .source
            .registry()
            .status(&bed.measurement)
            .map(|s| s.status)
            == Some(crate::registry::Status::Active);
        if !rejected || !still_active {
            wins += 1;
            transcripts.push(format!("trial {trial}: rogue service admitted (win)"));
        } else if trial < 3 {
            let reason = bed
                .source
                .outcome(&session_id)
                .map(|o| format!("{o:?}"))
                .unwrap_or_default();
            transcripts.push(format!(
                "trial {trial}: variant {variant} rejected {reason}"
            ));
        }
    }
    Ok(GameReport {
        game: GameId::II,
        trials,
        adversary_wins: wins,
        transcripts,
    })
}

/// Game III: many concurrent migration attempts for one measurement.
/// Wins if more than one attempt acquires the migration slot, or the
/// audit ever sees two Active instances.
fn game_fork_bomb(trials: u32, concurrency: u32, seed: u64) -> Result<GameReport, NodeError> {
    let _ = seed;
    let mut wins = 0u32;
    let mut transcripts = Vec::new();
    for trial in 0..trials {
        let bed = Arc::new(TestBed::new(1)?);
        let confirmed = Arc::new(AtomicU32::new(0));
        let mut handles = Vec::new();
        for _ in 0..concurrency {
            let bed = bed.clone();
            let confirmed = confirmed.clone();
            handles.push(std::thread::spawn(move || {
                let mut adversary = Adversary::passive();
                let result =
                    run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary)
                        .expect("challenge construction");
                if matches!(result.source_outcome, Some(MigrationOutcome::Confirmed)) {
                    confirmed.fetch_add(1, Ordering::SeqCst);
                }
            }));
        }
        for handle in handles {
            handle.join().expect("fork bomb thread");
        }
        // Ground truth from the audit log: how many sessions ever took the
        // source's Out slot, and how many imports ever activated.
        let events = bed.audit.events();
        let acquired = events
            .iter()
            .filter(|e| {
                e.node == bed.source.node_id
                    && e.old == Some(crate::registry::Status::Active)
                    && e.new == crate::registry::Status::MigratingOut
            })
            .count();
        let activated = events
            .iter()
            .filter(|e| {
                e.node == bed.target.node_id
                    && e.old == Some(crate::registry::Status::MigratingIn)
                    && e.new == crate::registry::Status::Active
            })
            .count();
        let confirmed = confirmed.load(Ordering::SeqCst);
        let audit_ok = bed.audit.verify_single_instance();
        if acquired > 1 || activated > 1 || confirmed > 1 || audit_ok.is_err() {
            wins += 1;
            transcripts.push(format!(
                "trial {trial}: acquisitions={acquired} activations={activated} confirmed={confirmed} audit={audit_ok:?} (win)"
            ));
        } else if trial < 3 {
            transcripts.push(format!(
                "trial {trial}: acquisitions={acquired} activations={activated} confirmed={confirmed} audit ok"
            ));
        }
    }
    Ok(GameReport {
        game: GameId::III,
        trials,
        adversary_wins: wins,
        transcripts,
    })
}

/// Default concurrency for Game III when invoked through `run_game`.
pub const FORK_BOMB_CONCURRENCY: u32 = 100;

/// Game IV: single mutations of `ENC_state`, `MAC_state` or the AEAD
/// nonce in transit. Wins if a mutated package is accepted (migration
/// confirmed). One seeded trial in sixteen runs the honest control.
fn game_state_integrity(trials: u32, seed: u64) -> Result<GameReport, NodeError> {
    let mut rng = SeededRng::new(seed);
    let mut wins = 0u32;
    let mut transcripts = Vec::new();
    for trial in 0..trials {
        let bed = TestBed::new(1)?;
        let control = rng.pick(16) == 0;
        let mut adversary = if control {
            Adversary::passive()
        } else {
            // Payload layout: u32 masked-len || nonce(12) || u32 ct-len ||
            // ciphertext || mac(32) || ... Pick a byte inside nonce,
            // ciphertext or mac, never the framing length words.
            let state = bed
                .source
                .with_running(&bed.measurement, |i| i.capture_state())
                .expect("app running");
            let ct_len = crate::state::volatile_serialize(&state).len() + 16;
            let region = rng.pick(3);
            let offset = match region {
                0 => 4 + rng.pick(12) as usize,                     // aead nonce
                1 => 4 + 12 + 4 + rng.pick(ct_len as u64) as usize, // ciphertext
                _ => 4 + 12 + 4 + ct_len + rng.pick(32) as usize,   // mac
            };
            let mask = vec![(rng.pick(255) + 1) as u8];
            Adversary::with_hooks(vec![Action::Mutate {
                pattern: Pattern {
                    msg_type: MSG_STATE_PACKAGE,
                    direction: Some(FrameDirection::ToTarget),
                    occurrence: 0,
                },
                offset,
                mask,
            }])
        };
        let result = run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary)?;
        bed.audit.verify_single_instance().map_err(NodeError::Io)?;
        if control {
            if !result.confirmed() {
                wins += 1;
                transcripts.push(format!(
                    "trial {trial}: honest control failed: {:?}",
                    result.source_outcome
                ));
            }
        } else if result.confirmed() {
            wins += 1;
            transcripts.push(format!("trial {trial}: mutation ACCEPTED (win)"));
        } else if trial < 3 {
            transcripts.push(format!(
                "trial {trial}: mutation rejected ({})",
                result.source_abort_reason().unwrap_or("no source outcome")
            ));
        }
    }
    Ok(GameReport {
        game: GameId::IV,
        trials,
        adversary_wins: wins,
        transcripts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppTamper {
    /// Rewrite a symbol name in the target's on-disk ELF description
    /// (injects one when the scenario ships stripped).
    SymbolRename,
    /// Flip a section's writable flag in the target's on-disk ELF.
    SegmentPermissionFlip,
    /// Grow the target's stored reference graph by one edge.
    ExtraSyscallEdge,
}

/// Applies a tamper to the target node's external files. Returns a label.
pub fn tamper_target(bed: &TestBed, tamper: AppTamper) -> Result<&'static str, NodeError> {
    let app_dir = bed.target_app_dir.as_ref().expect("dir-backed bed");
    match tamper {
        AppTamper::SymbolRename => {
            let path = app_dir.join("app.elfspec");
            let text = std::fs::read_to_string(&path).map_err(|e| NodeError::Io(e.to_string()))?;
            let tampered = if text.contains("symbol main ") {
                text.replace("symbol main ", "symbol maim ")
            } else {
                // Stripped fixture: the tamper introduces a symbol.
                format!("{text}symbol ghost 0x401000 0x10 .text\n")
            };
            std::fs::write(&path, tampered).map_err(|e| NodeError::Io(e.to_string()))?;
            Ok("symbol rename")
        }
        AppTamper::SegmentPermissionFlip => {
            let path = app_dir.join("app.elfspec");
            let text = std::fs::read_to_string(&path).map_err(|e| NodeError::Io(e.to_string()))?;
            let tampered = text.replacen("r-x", "rwx", 1);
            std::fs::write(&path, tampered).map_err(|e| NodeError::Io(e.to_string()))?;
            Ok("segment permission flip")
        }
        AppTamper::ExtraSyscallEdge => {
            let node_dir = bed
                .workspace_path()
                .expect("dir-backed bed")
                .join("target-node")
                .join("profiles")
                .join(format!("{}.profile", bed.measurement.hex()));
            let bytes = std::fs::read(&node_dir).map_err(|e| NodeError::Io(e.to_string()))?;
            let mut signed =
                SignedProfile::from_bytes(&bytes).map_err(|e| NodeError::Io(e.to_string()))?;
            signed.profile.reference_graph.insert_edge("read", "execve");
            std::fs::write(&node_dir, signed.to_bytes())
                .map_err(|e| NodeError::Io(e.to_string()))?;
            // The node re-reads its store, as it would after a restart.
            bed.target.reload_profiles()?;
            Ok("extra syscall edge")
        }
    }
}

/// Game V: the application (or its reference record) is altered on the
/// target. Every alteration must surface as a digest mismatch at the
/// source's verification step; wins if one is accepted.
fn game_application_integrity(trials: u32, seed: u64) -> Result<GameReport, NodeError> {
    let mut rng = SeededRng::new(seed);
    let mut wins = 0u32;
    let mut transcripts = Vec::new();
    let tampers = [
        AppTamper::SymbolRename,
        AppTamper::SegmentPermissionFlip,
        AppTamper::ExtraSyscallEdge,
    ];
    for trial in 0..trials {
        let scenario_no = (rng.pick(3) + 1) as u8;
        let control = rng.pick(8) == 0;
        let bed = TestBed::new_dir_backed(scenario_no)?;
        let label = if control {
            "control (no tamper)"
        } else {
            tamper_target(&bed, tampers[rng.pick(3) as usize])?
        };

        let mut adversary = Adversary::passive();
        let result = run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary)?;
        bed.audit.verify_single_instance().map_err(NodeError::Io)?;

        if control {
            if !result.confirmed() {
                wins += 1;
                transcripts.push(format!(
                    "trial {trial}: scenario {scenario_no} control failed: {:?}",
                    result.source_outcome
                ));
            }
        } else if result.confirmed() {
            wins += 1;
            transcripts.push(format!(
                "trial {trial}: scenario {scenario_no} {label} ACCEPTED (win)"
            ));
        } else {
            let reason = result
                .source_abort_reason()
                .unwrap_or("no outcome")
                .to_string();
            if !reason.contains("attestation digest mismatch") {
                // Reaching any other failure means the §7.5-style digest
                // check was not the layer that caught it.
                wins += 1;
                transcripts.push(format!(
                    "trial {trial}: scenario {scenario_no} {label} caught early: {reason} (win)"
                ));
            } else if trial < 6 {
                transcripts.push(format!(
                    "trial {trial}: scenario {scenario_no} {label} rejected at verification"
                ));
            }
        }
    }
    Ok(GameReport {
        game: GameId::V,
        trials,
        adversary_wins: wins,
        transcripts,
    })
}

fn game_fork_bomb_default(trials: u32, seed: u64) -> Result<GameReport, NodeError> {
    game_fork_bomb(trials, FORK_BOMB_CONCURRENCY, seed)
}

/// Game III with explicit concurrency (the acceptance suite pins 100).
pub fn run_fork_bomb(trials: u32, concurrency: u32, seed: u64) -> Result<GameReport, NodeError> {
    game_fork_bomb(trials, concurrency, seed)
}
