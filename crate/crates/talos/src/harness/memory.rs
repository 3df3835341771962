//! In-memory transport: pumps wire frames between two nodes through an
//! adversary, synchronously and deterministically. Frames that fail to
//! decode after adversarial mutation are dropped, as a real transport
//! would drop garbage; a stalled session simply ends without an outcome.

use std::collections::VecDeque;

use super::adversary::{Adversary, FrameDirection};
use crate::node::{MigrationOutcome, Node, NodeError};
use crate::tee::EnclaveMeasurement;
use crate::wire::{decode_message, encode_message, Message};

/// Upper bound on frames per run; an adversary duplicating frames cannot
/// spin the pump forever.
const MAX_FRAMES: usize = 256;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub session_id: [u8; 16],
    pub source_outcome: Option<MigrationOutcome>,
    pub target_outcome: Option<MigrationOutcome>,
    /// (direction, msg_type) per frame actually delivered.
    pub delivered: Vec<(FrameDirection, u8)>,
}

impl RunResult {
    /// The migration completed and the source confirmed it.
    pub fn confirmed(&self) -> bool {
        matches!(self.source_outcome, Some(MigrationOutcome::Confirmed))
    }

    pub fn source_abort_reason(&self) -> Option<&str> {
        match &self.source_outcome {
            Some(MigrationOutcome::Aborted(reason)) => Some(reason),
            _ => None,
        }
    }
}

/// Delivers `first` (target → source) and pumps all resulting traffic
/// until quiescence.
pub fn pump_session(
    target: &Node,
    source: &Node,
    session_id: [u8; 16],
    first: Message,
    adversary: &mut Adversary,
) -> RunResult {
    let mut queue: VecDeque<(FrameDirection, Vec<u8>)> = VecDeque::new();
    for frame in adversary.on_frame(FrameDirection::ToSource, encode_message(&first)) {
        queue.push_back((FrameDirection::ToSource, frame));
    }

    let mut delivered = Vec::new();
    let mut budget = MAX_FRAMES;
    while let Some((direction, frame)) = queue.pop_front() {
        if budget == 0 {
            break;
        }
        budget -= 1;
        let Ok(message) = decode_message(&frame) else {
            continue;
        };
        delivered.push((direction, message.msg_type()));
        let node = match direction {
            FrameDirection::ToSource => source,
            FrameDirection::ToTarget => target,
        };
        let replies = node.handle_message(&message);
        let reply_direction = match direction {
            FrameDirection::ToSource => FrameDirection::ToTarget,
            FrameDirection::ToTarget => FrameDirection::ToSource,
        };
        for reply in replies {
            for frame in adversary.on_frame(reply_direction, encode_message(&reply)) {
                queue.push_back((reply_direction, frame));
            }
        }
    }

    RunResult {
        session_id,
        source_outcome: source.outcome(&session_id),
        target_outcome: target.outcome(&session_id),
        delivered,
    }
}

/// One full migration attempt of `measurement` from `source` to `target`
/// through `adversary`.
pub fn run_migration(
    target: &Node,
    source: &Node,
    measurement: &EnclaveMeasurement,
    adversary: &mut Adversary,
) -> Result<RunResult, NodeError> {
    let (session_id, challenge) = target.begin_migration(measurement)?;
    Ok(pump_session(
        target, source, session_id, challenge, adversary,
    ))
}
