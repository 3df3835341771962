//! TCP transport: serve loops for the orchestrator and migration nodes,
//! plus the client driver the `migrate` and `enroll` commands use.
//!
//! One connection carries one exchange (an enrollment or a migration
//! session). If a source-side connection dies mid-session the node
//! treats it as an abort timeout and restores its instance.

use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::Duration;

use super::adversary::{Adversary, FrameDirection};
use crate::node::{MigrationOutcome, Node, NodeError};
use crate::orchestrator::Orchestrator;
use crate::tee::EnclaveMeasurement;
use crate::wire::{decode_message, encode_message, read_frame, write_frame, Message};

pub const IO_TIMEOUT: Duration = Duration::from_secs(5);

fn io_err(e: impl std::fmt::Display) -> NodeError {
    NodeError::Io(e.to_string())
}

/// Serves enrollment requests until the listener closes.
pub fn serve_orchestrator(orchestrator: Arc<Orchestrator>, listener: TcpListener) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        let orchestrator = orchestrator.clone();
        std::thread::spawn(move || {
            let _ = orchestrator_connection(&orchestrator, stream);
        });
    }
}

fn orchestrator_connection(
    orchestrator: &Orchestrator,
    mut stream: TcpStream,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(frame) => frame,
            Err(_) => return Ok(()),
        };
        let Ok(message) = decode_message(&frame) else {
            continue;
        };
        if let Message::EnrollRequest(request) = message {
            let response = orchestrator.handle_enroll(&request);
            write_frame(
                &mut stream,
                &encode_message(&Message::EnrollResponse(response)),
            )?;
        }
    }
}

/// Serves the migration protocol (source role) until the listener closes.
pub fn serve_node(node: Arc<Node>, listener: TcpListener) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        let node = node.clone();
        std::thread::spawn(move || {
            let _ = node_connection(&node, stream);
        });
    }
}

fn node_connection(node: &Node, mut stream: TcpStream) -> std::io::Result<()> {
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    let mut touched_sessions = Vec::new();
    while let Ok(frame) = read_frame(&mut stream) {
        let Ok(message) = decode_message(&frame) else {
            continue;
        };
        if let Some(sid) = message.session_id() {
            if !touched_sessions.contains(&sid) {
                touched_sessions.push(sid);
            }
        }
        for reply in node.handle_message(&message) {
            write_frame(&mut stream, &encode_message(&reply))?;
        }
    }
    // Connection gone: any source-side session still pending an abort ack
    // is restored now (the timeout analogue of the explicit 0x7F).
    for sid in touched_sessions {
        node.smn_restore_after_abort(&sid, "connection closed");
    }
    Ok(())
}

/// Enrolls a node against an orchestrator address.
pub fn enroll_over_tcp(
    node: &Node,
    orchestrator_addr: impl ToSocketAddrs,
) -> Result<(), NodeError> {
    let mut stream = TcpStream::connect(orchestrator_addr).map_err(io_err)?;
    stream.set_read_timeout(Some(IO_TIMEOUT)).map_err(io_err)?;
    write_frame(&mut stream, &encode_message(&node.enrollment_request())).map_err(io_err)?;
    let frame = read_frame(&mut stream).map_err(io_err)?;
    match decode_message(&frame).map_err(NodeError::Wire)? {
        Message::EnrollResponse(response) => node.complete_enrollment(&response),
        other => Err(NodeError::Io(format!(
            "unexpected reply type {:#04x}",
            other.msg_type()
        ))),
    }
}

/// Runs the target role of one migration against a source node address.
/// Outbound frames pass the adversary as `ToSource`, inbound as
/// `ToTarget`. Returns the outcome and the attestation digest this node
/// dispatched (if it got that far).
pub fn migrate_over_tcp(
    node: &Node,
    source_addr: impl ToSocketAddrs,
    measurement: &EnclaveMeasurement,
    adversary: &mut Adversary,
) -> Result<(MigrationOutcome, Option<[u8; 32]>), NodeError> {
    let mut stream = TcpStream::connect(source_addr).map_err(io_err)?;
    stream.set_read_timeout(Some(IO_TIMEOUT)).map_err(io_err)?;
    let (session_id, challenge) = node.begin_migration(measurement)?;
    drive_session(node, &mut stream, session_id, challenge, adversary)
}

fn drive_session(
    node: &Node,
    stream: &mut TcpStream,
    session_id: [u8; 16],
    first: Message,
    adversary: &mut Adversary,
) -> Result<(MigrationOutcome, Option<[u8; 32]>), NodeError> {
    for frame in adversary.on_frame(FrameDirection::ToSource, encode_message(&first)) {
        write_frame(stream, &frame).map_err(io_err)?;
    }
    loop {
        if let Some(outcome) = node.outcome(&session_id) {
            return Ok((outcome, node.sent_digest(&session_id)));
        }
        let frame = match read_frame(stream) {
            Ok(frame) => frame,
            Err(_) => {
                // Source went silent: local abort with teardown.
                let _ = node.tmn_teardown_after_abort(&session_id, "source timed out");
                let outcome = node
                    .outcome(&session_id)
                    .unwrap_or(MigrationOutcome::Aborted("source timed out".to_string()));
                return Ok((outcome, node.sent_digest(&session_id)));
            }
        };
        for frame in adversary.on_frame(FrameDirection::ToTarget, frame) {
            let Ok(message) = decode_message(&frame) else {
                continue;
            };
            for reply in node.handle_message(&message) {
                for out in adversary.on_frame(FrameDirection::ToSource, encode_message(&reply)) {
                    write_frame(stream, &out).map_err(io_err)?;
                }
            }
        }
    }
}

/// The `replay-package` scripted adversary: a first (aborted) exchange
/// records a state package, then a real migration attempt replays the
/// stale package — re-bound to the fresh session — in place of the
/// genuine one. The source must reject the attempt.
pub fn migrate_replay_package(
    node: &Node,
    source_addr: impl ToSocketAddrs + Clone,
    measurement: &EnclaveMeasurement,
) -> Result<(MigrationOutcome, Option<[u8; 32]>), NodeError> {
    use crate::wire::{AbortMsg, MSG_STATE_PACKAGE};

    // Leg 0: run the handshake, record the package, then abort so the
    // source restores its instance.
    let mut stream = TcpStream::connect(source_addr.clone()).map_err(io_err)?;
    stream.set_read_timeout(Some(IO_TIMEOUT)).map_err(io_err)?;
    let (leg0_sid, challenge) = node.begin_migration(measurement)?;
    write_frame(&mut stream, &encode_message(&challenge)).map_err(io_err)?;
    let mut recorded_package: Option<Vec<u8>> = None;
    while recorded_package.is_none() {
        let frame = read_frame(&mut stream).map_err(io_err)?;
        if frame.len() > 6 && frame[6] == MSG_STATE_PACKAGE {
            recorded_package = Some(frame);
            break;
        }
        let Ok(message) = decode_message(&frame) else {
            continue;
        };
        for reply in node.handle_message(&message) {
            write_frame(&mut stream, &encode_message(&reply)).map_err(io_err)?;
        }
    }
    // Swallow the package and abort leg 0.
    let _ = node.tmn_teardown_after_abort(&leg0_sid, "adversary staging abort");
    write_frame(
        &mut stream,
        &encode_message(&Message::Abort(AbortMsg {
            session_id: leg0_sid,
            reason: "staging".to_string(),
        })),
    )
    .map_err(io_err)?;
    drop(stream);
    let recorded = recorded_package.expect("package recorded");

    // Leg 1: real attempt; swap in the stale package.
    std::thread::sleep(Duration::from_millis(50));
    let mut stream = TcpStream::connect(source_addr).map_err(io_err)?;
    stream.set_read_timeout(Some(IO_TIMEOUT)).map_err(io_err)?;
    let (session_id, challenge) = node.begin_migration(measurement)?;
    let mut stale = recorded;
    let n = stale.len();
    stale[n - 16..].copy_from_slice(&session_id);
    let mut adversary = Adversary::with_hooks(vec![super::adversary::Action::Inject {
        pattern: super::adversary::Pattern {
            msg_type: MSG_STATE_PACKAGE,
            direction: Some(FrameDirection::ToTarget),
            occurrence: 0,
        },
        frame: stale,
    }]);
    drive_session(node, &mut stream, session_id, challenge, &mut adversary)
}

/// Named adversary presets for the CLI.
pub fn adversary_preset(name: &str) -> Option<Vec<super::adversary::Action>> {
    use super::adversary::{Action, Pattern};
    use crate::wire::{MSG_CHANNEL_KEY, MSG_STATE_PACKAGE};
    match name {
        // Flip one ciphertext bit of the in-flight state package.
        "mutate-package" => Some(vec![Action::Mutate {
            pattern: Pattern {
                msg_type: MSG_STATE_PACKAGE,
                direction: Some(FrameDirection::ToTarget),
                occurrence: 0,
            },
            offset: 20,
            mask: vec![0x01],
        }]),
        // Corrupt the target's channel-key binding signature.
        "mitm-channel" => Some(vec![Action::Mutate {
            pattern: Pattern {
                msg_type: MSG_CHANNEL_KEY,
                direction: Some(FrameDirection::ToSource),
                occurrence: 0,
            },
            offset: 50,
            mask: vec![0x01],
        }]),
        // Drop the verification result; the target must still terminate.
        "drop-result" => Some(vec![Action::Drop(Pattern {
            msg_type: crate::wire::MSG_VERIFICATION_RESULT,
            direction: Some(FrameDirection::ToTarget),
            occurrence: 0,
        })]),
        _ => None,
    }
}

/// Parses an adversary script file: one action per line.
///
/// ```text
/// record  <msg-type-hex> <to-source|to-target|any> <occurrence>
/// replay  <msg-type-hex> <dir> <occurrence> <tape-index>
/// mutate  <msg-type-hex> <dir> <occurrence> <offset> <xor-hex>
/// drop    <msg-type-hex> <dir> <occurrence>
/// dup     <msg-type-hex> <dir> <occurrence>
/// ```
pub fn parse_adversary_script(text: &str) -> Result<Vec<super::adversary::Action>, String> {
    use super::adversary::{Action, Pattern};
    let mut actions = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: &str| format!("line {}: {msg}", lineno + 1);
        let parse_pattern = |tokens: &[&str]| -> Result<Pattern, String> {
            if tokens.len() < 3 {
                return Err(err("expected <msg-type-hex> <dir> <occurrence>"));
            }
            let msg_type = u8::from_str_radix(tokens[0].trim_start_matches("0x"), 16)
                .map_err(|_| err("bad msg type"))?;
            let direction = match tokens[1] {
                "to-source" => Some(FrameDirection::ToSource),
                "to-target" => Some(FrameDirection::ToTarget),
                "any" => None,
                _ => return Err(err("direction must be to-source|to-target|any")),
            };
            let occurrence = tokens[2].parse().map_err(|_| err("bad occurrence"))?;
            Ok(Pattern {
                msg_type,
                direction,
                occurrence,
            })
        };
        match tokens[0] {
            "record" => actions.push(Action::Record(parse_pattern(&tokens[1..])?)),
            "drop" => actions.push(Action::Drop(parse_pattern(&tokens[1..])?)),
            "dup" => actions.push(Action::Duplicate(parse_pattern(&tokens[1..])?)),
            "replay" => {
                let pattern = parse_pattern(&tokens[1..])?;
                let index = tokens
                    .get(4)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad tape index"))?;
                actions.push(Action::Replay { pattern, index });
            }
            "mutate" => {
                let pattern = parse_pattern(&tokens[1..])?;
                let offset = tokens
                    .get(4)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad offset"))?;
                let mask = tokens
                    .get(5)
                    .and_then(|t| hex::decode(t).ok())
                    .ok_or_else(|| err("bad xor hex"))?;
                actions.push(Action::Mutate {
                    pattern,
                    offset,
                    mask,
                });
            }
            other => return Err(err(&format!("unknown action {other:?}"))),
        }
    }
    Ok(actions)
}
