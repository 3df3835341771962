//! Protocol error paths, one per typed rejection, exercised directly
//! against the session handlers rather than through the pump.

use std::sync::Arc;

use talos::crypto::{self, NodeKeyPair};
use talos::guest::GuestProgram;
use talos::harness::adversary::{Action, Adversary, FrameDirection, Pattern};
use talos::harness::memory::run_migration;
use talos::harness::{scenario, TestBed};
use talos::node::{NodeError, Phase};
use talos::registry::Status;
use talos::tee::EnclaveMeasurement;
use talos::wire::{ChallengeMsg, ChannelKeyMsg, ChannelRole, Message, MSG_STATE_PACKAGE};

fn challenge_for(bed: &TestBed, measurement: EnclaveMeasurement) -> ChallengeMsg {
    let (_, message) = bed.target.begin_migration(&measurement).expect("begin");
    match message {
        Message::Challenge(ch) => ch,
        other => panic!("unexpected message {other:?}"),
    }
}

#[test]
fn challenge_with_self_signed_certificate_rejected() {
    let bed = TestBed::new(1).expect("bed");
    let mut challenge = challenge_for(&bed, bed.measurement);
    // Re-issue the certificate under the rogue's own key: Game II's forge.
    let rogue = NodeKeyPair::generate().unwrap();
    challenge.target_cert =
        crypto::cert_issue(&rogue, &challenge.target_pubkey, "tmn-node", 1).unwrap();
    assert!(matches!(
        bed.source.smn_handle_challenge(&challenge).unwrap_err(),
        NodeError::CertInvalid
    ));
    // No registry change.
    assert_eq!(
        bed.source
            .registry()
            .status(&bed.measurement)
            .unwrap()
            .status,
        Status::Active
    );
}

#[test]
fn challenge_with_bad_signature_rejected() {
    let bed = TestBed::new(1).expect("bed");
    let mut challenge = challenge_for(&bed, bed.measurement);
    challenge.challenge_signature.0[5] ^= 1;
    assert!(matches!(
        bed.source.smn_handle_challenge(&challenge).unwrap_err(),
        NodeError::SignatureInvalid
    ));
}

#[test]
fn challenge_for_absent_application_rejected() {
    let bed = TestBed::new(1).expect("bed");
    let challenge = challenge_for(&bed, EnclaveMeasurement([0xee; 32]));
    assert!(matches!(
        bed.source.smn_handle_challenge(&challenge).unwrap_err(),
        NodeError::AppNotRunning
    ));
}

#[test]
fn duplicate_channel_key_is_phase_violation() {
    let bed = TestBed::new(1).expect("bed");
    let challenge = challenge_for(&bed, bed.measurement);
    let smn_ck = bed
        .source
        .smn_handle_challenge(&challenge)
        .expect("channel key");
    let Message::ChannelKey(smn_ck) = smn_ck else {
        panic!()
    };
    let tmn_ck = bed
        .target
        .tmn_handle_channel_key(&smn_ck)
        .expect("target key");
    let Message::ChannelKey(tmn_ck) = tmn_ck else {
        panic!()
    };
    bed.source.smn_handle_channel_key(&tmn_ck).expect("package");
    // The channel is up; one more key is out of phase order.
    assert!(matches!(
        bed.source.smn_handle_channel_key(&tmn_ck).unwrap_err(),
        NodeError::PhaseViolation
    ));
}

#[test]
fn mitm_ephemeral_substitution_is_rejected() {
    // The adversary swaps the target's ephemeral key for its own valid
    // curve point; without the target's signing key the binding cannot be
    // forged, and the source rejects the channel.
    let bed = TestBed::new(1).expect("bed");
    let challenge = challenge_for(&bed, bed.measurement);
    let session_id = challenge.session_id;
    let smn_ck = bed
        .source
        .smn_handle_challenge(&challenge)
        .expect("channel key");
    let Message::ChannelKey(smn_ck) = smn_ck else {
        panic!()
    };
    let tmn_ck = bed
        .target
        .tmn_handle_channel_key(&smn_ck)
        .expect("target key");
    let Message::ChannelKey(tmn_ck) = tmn_ck else {
        panic!()
    };

    let mallory = NodeKeyPair::generate().unwrap();
    let substituted = ChannelKeyMsg {
        session_id,
        role: ChannelRole::Target,
        ephemeral_pubkey: mallory.public_key(),
        // Neither the original signature nor one by Mallory's key can
        // bind the substituted point to the target's enrolled identity.
        binding_signature: tmn_ck.binding_signature,
    };
    assert!(matches!(
        bed.source.smn_handle_channel_key(&substituted).unwrap_err(),
        NodeError::SignatureInvalid
    ));

    let resigned = ChannelKeyMsg {
        binding_signature: crypto::sign(
            &mallory,
            &ChannelKeyMsg::binding_payload(
                &session_id,
                ChannelRole::Target,
                &mallory.public_key(),
            ),
        ),
        ..substituted
    };
    assert!(matches!(
        bed.source.smn_handle_channel_key(&resigned).unwrap_err(),
        NodeError::SignatureInvalid
    ));
}

#[test]
fn mutated_package_aborts_without_launching_guest() {
    let bed = TestBed::new(1).expect("bed");
    let mut adversary = Adversary::with_hooks(vec![Action::Mutate {
        pattern: Pattern {
            msg_type: MSG_STATE_PACKAGE,
            direction: Some(FrameDirection::ToTarget),
            occurrence: 0,
        },
        offset: 24, // inside the ciphertext
        mask: vec![0x80],
    }]);
    let result =
        run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary).expect("run");
    assert_eq!(
        result.source_abort_reason(),
        Some("masked state MAC mismatch")
    );
    // No guest was launched on the target; the source's instance resumed.
    assert!(!bed.target.app_running(&bed.measurement));
    assert!(bed.source.app_running(&bed.measurement));
    assert_eq!(
        bed.source
            .registry()
            .status(&bed.measurement)
            .unwrap()
            .status,
        Status::Active
    );
    bed.audit.verify_single_instance().expect("audit");
}

#[test]
fn unprofiled_reload_syscall_is_a_graph_deviation() {
    // The target's copy of the application gains an extra reload syscall
    // after install: the local SC-CFG gate fires before any digest is
    // produced.
    let bed = TestBed::new_dir_backed(1).expect("bed");
    let script_path = bed.target_app_dir.as_ref().unwrap().join("app.script");
    let script = std::fs::read_to_string(&script_path).unwrap();
    let tampered = script.replace(
        "emit-resume-marker",
        "syscall execve path=/bin/sh\nemit-resume-marker",
    );
    assert_ne!(script, tampered);
    std::fs::write(&script_path, tampered).unwrap();

    let mut adversary = Adversary::passive();
    let result =
        run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary).expect("run");
    let reason = result.source_abort_reason().expect("aborted");
    assert!(reason.contains("syscall graph deviation"), "{reason}");
    assert!(reason.contains("execve"), "{reason}");
    assert!(bed.source.app_running(&bed.measurement));
    bed.audit.verify_single_instance().expect("audit");
}

#[test]
fn missing_resume_marker_aborts_import() {
    let bed = TestBed::new_dir_backed(1).expect("bed");
    let script_path = bed.target_app_dir.as_ref().unwrap().join("app.script");
    let script = std::fs::read_to_string(&script_path).unwrap();
    std::fs::write(&script_path, script.replace("emit-resume-marker\n", "")).unwrap();

    let mut adversary = Adversary::passive();
    let result =
        run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary).expect("run");
    let reason = result.source_abort_reason().expect("aborted");
    assert!(reason.contains("resume marker"), "{reason}");
    assert!(bed.source.app_running(&bed.measurement));
}

#[test]
fn nonces_are_fresh_across_consecutive_migrations() {
    let bed = TestBed::new(1).expect("bed");
    let mut adversary = Adversary::passive();
    let first =
        run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary).expect("run");
    assert!(first.confirmed());
    let first_nonce = bed.source.session_nonce(&first.session_id).expect("nonce");

    // Migrate back: the roles swap, the new source issues a new nonce.
    let (session_id, challenge) = bed.source.begin_migration(&bed.measurement).expect("begin");
    let second = talos::harness::memory::pump_session(
        &bed.source,
        &bed.target,
        session_id,
        challenge,
        &mut Adversary::passive(),
    );
    assert!(second.confirmed(), "{:?}", second.source_outcome);
    let second_nonce = bed.target.session_nonce(&second.session_id).expect("nonce");
    assert_ne!(first_nonce.0, second_nonce.0);
    bed.audit.verify_single_instance().expect("audit");
}

#[test]
fn verified_phases_on_both_sides_after_honest_run() {
    let bed = TestBed::new(2).expect("bed");
    let mut adversary = Adversary::passive();
    let result =
        run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary).expect("run");
    assert!(result.confirmed());
    assert_eq!(
        bed.source.session_phase(&result.session_id),
        Some(Phase::Verified)
    );
    assert_eq!(
        bed.target.session_phase(&result.session_id),
        Some(Phase::Verified)
    );
    // Both sides dispatched/stored the same digest value.
    let digest = bed.target.sent_digest(&result.session_id).expect("digest");
    assert_ne!(digest, [0u8; 32]);
}

#[test]
fn dropped_verification_result_leaves_single_instance() {
    // The adversary swallows the source's confirmation. The target keeps
    // its activated instance; the source already finalized — no instant
    // shows two Active entries.
    let bed = TestBed::new(1).expect("bed");
    let mut adversary = Adversary::with_hooks(vec![Action::Drop(Pattern {
        msg_type: talos::wire::MSG_VERIFICATION_RESULT,
        direction: Some(FrameDirection::ToTarget),
        occurrence: 0,
    })]);
    let result =
        run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary).expect("run");
    // The source confirmed; the target never heard back but holds the app.
    assert!(result.confirmed());
    assert!(bed.target.app_running(&bed.measurement));
    assert_eq!(
        bed.source
            .registry()
            .status(&bed.measurement)
            .unwrap()
            .status,
        Status::Finalized
    );
    bed.audit.verify_single_instance().expect("audit");
}

#[test]
fn forged_confirmation_cannot_settle_an_aborted_import() {
    // The import aborts on a mutated package; a forged (unauthenticated)
    // "confirmed" result afterwards must not flip the target's record.
    let bed = TestBed::new(1).expect("bed");
    let mut adversary = Adversary::with_hooks(vec![Action::Mutate {
        pattern: Pattern {
            msg_type: MSG_STATE_PACKAGE,
            direction: Some(FrameDirection::ToTarget),
            occurrence: 0,
        },
        offset: 24,
        mask: vec![0x01],
    }]);
    let result =
        run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary).expect("run");
    assert!(!result.confirmed());

    let forged = Message::VerificationResult(talos::wire::VerificationResultMsg {
        session_id: result.session_id,
        confirmed: true,
        detail: String::new(),
    });
    assert!(bed.target.handle_message(&forged).is_empty());
    assert!(matches!(
        bed.target.outcome(&result.session_id),
        Some(talos::node::MigrationOutcome::Aborted(_))
    ));
    assert!(!bed.target.app_running(&bed.measurement));
}

#[test]
fn in_memory_program_beds_also_migrate() {
    // Guard against regressions in the non-directory-backed path.
    let elf = talos::fixture::generate_from_text(scenario::ELFSPEC[0]).unwrap();
    let program = Arc::new(GuestProgram::from_parts("inline", elf, scenario::SCRIPT[0]).unwrap());
    assert!(program.dir.is_none());
    let bed = TestBed::new(1).expect("bed");
    let mut adversary = Adversary::passive();
    assert!(
        run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary)
            .expect("run")
            .confirmed()
    );
}
