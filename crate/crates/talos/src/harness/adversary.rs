//! Scripted network adversary.
//!
//! Hooks operate on raw wire frames in transit (and the games may also
//! edit node-external files) — never on in-module state. Applied
//! deterministically: each hook matches a message type and an occurrence
//! index, counted per direction across the adversary's lifetime, so a
//! script plus a seed fully determines a run.

use crate::wire::{encode_message, Message, FRAME_HEADER_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameDirection {
    /// Target → source.
    ToSource,
    /// Source → target.
    ToTarget,
}

/// Matches the `occurrence`-th frame (0-based) of `msg_type` traveling
/// in `direction`. `direction: None` matches both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pattern {
    pub msg_type: u8,
    pub direction: Option<FrameDirection>,
    pub occurrence: u32,
}

impl Pattern {
    pub fn any(msg_type: u8) -> Self {
        Pattern {
            msg_type,
            direction: None,
            occurrence: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Action {
    /// Store the matched frame in the recording tape; pass it through.
    Record(Pattern),
    /// Replace the matched frame with tape entry `index`.
    Replay { pattern: Pattern, index: usize },
    /// XOR `mask` into the matched frame's payload at `offset`.
    Mutate {
        pattern: Pattern,
        offset: usize,
        mask: Vec<u8>,
    },
    /// Deliver `frame` in place of the matched frame.
    Inject { pattern: Pattern, frame: Vec<u8> },
    /// Deliver the matched frame twice.
    Duplicate(Pattern),
    /// Swallow the matched frame.
    Drop(Pattern),
}

impl Action {
    fn pattern(&self) -> &Pattern {
        match self {
            Action::Record(p)
            | Action::Duplicate(p)
            | Action::Drop(p)
            | Action::Replay { pattern: p, .. }
            | Action::Mutate { pattern: p, .. }
            | Action::Inject { pattern: p, .. } => p,
        }
    }
}

/// A deterministic frame processor assembled from an ordered hook list.
#[derive(Debug, Default)]
pub struct Adversary {
    hooks: Vec<Action>,
    tape: Vec<Vec<u8>>,
    /// (msg_type, direction) -> frames seen so far.
    seen: std::collections::HashMap<(u8, FrameDirection), u32>,
}

impl Adversary {
    pub fn passive() -> Self {
        Self::default()
    }

    pub fn with_hooks(hooks: Vec<Action>) -> Self {
        Adversary {
            hooks,
            ..Default::default()
        }
    }

    pub fn push_hook(&mut self, action: Action) {
        self.hooks.push(action);
    }

    pub fn tape(&self) -> &[Vec<u8>] {
        &self.tape
    }

    /// Seeds the tape with a pre-recorded frame (cross-session replays).
    pub fn preload_tape(&mut self, frame: Vec<u8>) {
        self.tape.push(frame);
    }

    fn matches(
        pattern: &Pattern,
        msg_type: u8,
        direction: FrameDirection,
        occurrence: u32,
    ) -> bool {
        pattern.msg_type == msg_type
            && pattern.direction.map(|d| d == direction).unwrap_or(true)
            && pattern.occurrence == occurrence
    }

    /// Processes one in-flight frame; returns what actually gets delivered.
    pub fn on_frame(&mut self, direction: FrameDirection, frame: Vec<u8>) -> Vec<Vec<u8>> {
        if frame.len() < FRAME_HEADER_LEN {
            return vec![frame];
        }
        let msg_type = frame[6];
        let counter = self.seen.entry((msg_type, direction)).or_insert(0);
        let occurrence = *counter;
        *counter += 1;

        let mut out = vec![frame];
        // Ordered application; later hooks see the effect of earlier ones.
        for i in 0..self.hooks.len() {
            let action = self.hooks[i].clone();
            if !Self::matches(action.pattern(), msg_type, direction, occurrence) {
                continue;
            }
            out = out
                .into_iter()
                .flat_map(|f| match &action {
                    Action::Record(_) => {
                        self.tape.push(f.clone());
                        vec![f]
                    }
                    Action::Replay { index, .. } => match self.tape.get(*index) {
                        Some(recorded) => vec![recorded.clone()],
                        None => vec![f],
                    },
                    Action::Mutate { offset, mask, .. } => {
                        let mut mutated = f;
                        for (i, m) in mask.iter().enumerate() {
                            let pos = FRAME_HEADER_LEN + offset + i;
                            if pos < mutated.len() {
                                mutated[pos] ^= m;
                            }
                        }
                        vec![mutated]
                    }
                    Action::Inject { frame, .. } => vec![frame.clone()],
                    Action::Duplicate(_) => vec![f.clone(), f],
                    Action::Drop(_) => Vec::new(),
                })
                .collect();
        }
        out
    }
}

/// Convenience: a fresh frame for injection hooks.
pub fn frame_of(message: &Message) -> Vec<u8> {
    encode_message(message)
}
