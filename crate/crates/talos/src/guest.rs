//! The deterministic "trusted application" the simulator migrates: an ELF
//! fixture supplies the persistent identity, a scripted execution mutates
//! the volatile state and emits trace events.
//!
//! Scripts have two sections. `[reload]` is the preamble a restored
//! instance executes before resuming — trace-only commands (`syscall`,
//! `emit-resume-marker`), since state mutation there would break bit-exact
//! continuity against an uninterrupted run. `[main]` is the program body.
//! The runtime owns the first 8 bytes of the stack image: the saved
//! resume position, written at capture and consumed at restore.
//!
//! Same program, same inputs, same step count: identical state and trace.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::sccfg::{TraceLog, RESUME_MARKER};
use crate::state::{
    export_counter_offsets, EffectiveCounters, FdRecord, StateError, VolatileState,
};
use crate::tee::{measure_enclave, EnclaveMeasurement};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GuestError {
    #[error("program content does not match its recorded measurement")]
    MeasurementMismatch,
    #[error("operation invalid in run state {0:?}")]
    InvalidRunState(RunState),
    #[error("script line {0}: {1}")]
    ScriptParse(usize, String),
    #[error("script execution: {0}")]
    ScriptExec(String),
    #[error("guest io: {0}")]
    Io(String),
    #[error("state error: {0}")]
    State(#[from] StateError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    HeapWrite {
        offset: usize,
        bytes: Vec<u8>,
    },
    HeapFill {
        offset: usize,
        len: usize,
        value: u8,
    },
    StackWrite {
        offset: usize,
        bytes: Vec<u8>,
    },
    FdOpen {
        fd: u32,
        path: String,
    },
    FdSeek {
        fd: u32,
        offset: u64,
    },
    FdClose {
        fd: u32,
    },
    CounterInc {
        id: [u8; 8],
    },
    SecretSet {
        bytes: Vec<u8>,
    },
    Syscall {
        name: String,
        params: String,
    },
    EmitResumeMarker,
}

fn parse_command(lineno: usize, line: &str) -> Result<Command, GuestError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let err = |msg: &str| GuestError::ScriptParse(lineno, msg.to_string());
    let num = |t: &str| -> Result<usize, GuestError> {
        let v = if let Some(h) = t.strip_prefix("0x") {
            usize::from_str_radix(h, 16).ok()
        } else {
            t.parse().ok()
        };
        v.ok_or_else(|| err(&format!("bad number {t:?}")))
    };
    match tokens[0] {
        "heap-write" => {
            if tokens.len() != 3 {
                return Err(err("expected: heap-write <offset> <hex>"));
            }
            Ok(Command::HeapWrite {
                offset: num(tokens[1])?,
                bytes: hex::decode(tokens[2]).map_err(|_| err("bad hex"))?,
            })
        }
        "heap-fill" => {
            if tokens.len() != 4 {
                return Err(err("expected: heap-fill <offset> <len> <byte>"));
            }
            Ok(Command::HeapFill {
                offset: num(tokens[1])?,
                len: num(tokens[2])?,
                value: num(tokens[3])? as u8,
            })
        }
        "stack-write" => {
            if tokens.len() != 3 {
                return Err(err("expected: stack-write <offset> <hex>"));
            }
            Ok(Command::StackWrite {
                offset: num(tokens[1])?,
                bytes: hex::decode(tokens[2]).map_err(|_| err("bad hex"))?,
            })
        }
        "fd-open" => {
            if tokens.len() != 3 {
                return Err(err("expected: fd-open <fd> <path>"));
            }
            Ok(Command::FdOpen {
                fd: num(tokens[1])? as u32,
                path: tokens[2].to_string(),
            })
        }
        "fd-seek" => {
            if tokens.len() != 3 {
                return Err(err("expected: fd-seek <fd> <offset>"));
            }
            Ok(Command::FdSeek {
                fd: num(tokens[1])? as u32,
                offset: num(tokens[2])? as u64,
            })
        }
        "fd-close" => {
            if tokens.len() != 2 {
                return Err(err("expected: fd-close <fd>"));
            }
            Ok(Command::FdClose {
                fd: num(tokens[1])? as u32,
            })
        }
        "counter-inc" => {
            if tokens.len() != 2 {
                return Err(err("expected: counter-inc <id-hex-16>"));
            }
            let bytes = hex::decode(tokens[1]).map_err(|_| err("bad counter id hex"))?;
            let id: [u8; 8] = bytes
                .try_into()
                .map_err(|_| err("counter id must be 8 bytes"))?;
            Ok(Command::CounterInc { id })
        }
        "secret-set" => {
            if tokens.len() != 2 {
                return Err(err("expected: secret-set <hex>"));
            }
            Ok(Command::SecretSet {
                bytes: hex::decode(tokens[1]).map_err(|_| err("bad hex"))?,
            })
        }
        "syscall" => {
            if tokens.len() < 2 {
                return Err(err("expected: syscall <name> [params...]"));
            }
            Ok(Command::Syscall {
                name: tokens[1].to_string(),
                params: tokens[2..].join(" "),
            })
        }
        "emit-resume-marker" => Ok(Command::EmitResumeMarker),
        other => Err(err(&format!("unknown command {other:?}"))),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    pub reload: Vec<Command>,
    pub main: Vec<Command>,
}

pub fn parse_script(text: &str) -> Result<Script, GuestError> {
    #[derive(PartialEq)]
    enum Section {
        Reload,
        Main,
    }
    let mut script = Script::default();
    let mut section = Section::Main;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "[reload]" => {
                section = Section::Reload;
                continue;
            }
            "[main]" => {
                section = Section::Main;
                continue;
            }
            _ => {}
        }
        let command = parse_command(lineno, line)?;
        match section {
            Section::Reload => {
                if !matches!(command, Command::Syscall { .. } | Command::EmitResumeMarker) {
                    return Err(GuestError::ScriptParse(
                        lineno,
                        "reload section permits only syscall/emit-resume-marker".to_string(),
                    ));
                }
                script.reload.push(command);
            }
            Section::Main => script.main.push(command),
        }
    }
    Ok(script)
}

/// A migratable application: ELF identity plus scripted behavior.
/// `measurement` covers the canonical persistent content
/// (`u32-LE elf-len || elf || u32-LE script-len || script`).
#[derive(Debug, Clone)]
pub struct GuestProgram {
    pub name: String,
    pub elf_bytes: Vec<u8>,
    pub script_text: String,
    pub script: Script,
    pub measurement: EnclaveMeasurement,
    /// Backing directory when loaded from disk; launch re-reads and
    /// re-measures it.
    pub dir: Option<PathBuf>,
}

pub fn canonical_persistent_bytes(elf: &[u8], script: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + elf.len() + script.len());
    out.extend_from_slice(&(elf.len() as u32).to_le_bytes());
    out.extend_from_slice(elf);
    out.extend_from_slice(&(script.len() as u32).to_le_bytes());
    out.extend_from_slice(script);
    out
}

impl GuestProgram {
    pub fn from_parts(
        name: &str,
        elf_bytes: Vec<u8>,
        script_text: &str,
    ) -> Result<Self, GuestError> {
        let script = parse_script(script_text)?;
        let canonical = canonical_persistent_bytes(&elf_bytes, script_text.as_bytes());
        let measurement =
            measure_enclave(&canonical).map_err(|e| GuestError::ScriptExec(e.to_string()))?;
        Ok(GuestProgram {
            name: name.to_string(),
            elf_bytes,
            script_text: script_text.to_string(),
            script,
            measurement,
            dir: None,
        })
    }

    /// Loads an application directory: `app.elf` (or `app.elfspec`, which
    /// is generated deterministically) plus `app.script`.
    pub fn load(dir: &Path) -> Result<Self, GuestError> {
        let (elf_bytes, name) = read_app_elf(dir)?;
        let script_text = std::fs::read_to_string(dir.join("app.script"))
            .map_err(|e| GuestError::Io(format!("app.script: {e}")))?;
        let mut program = GuestProgram::from_parts(&name, elf_bytes, &script_text)?;
        program.dir = Some(dir.to_path_buf());
        Ok(program)
    }

    /// Re-reads the backing files and re-measures them.
    fn current_measurement(&self) -> Result<EnclaveMeasurement, GuestError> {
        match &self.dir {
            None => Ok(self.measurement),
            Some(dir) => {
                let (elf_bytes, _) = read_app_elf(dir)?;
                let script_text = std::fs::read_to_string(dir.join("app.script"))
                    .map_err(|e| GuestError::Io(format!("app.script: {e}")))?;
                let canonical = canonical_persistent_bytes(&elf_bytes, script_text.as_bytes());
                measure_enclave(&canonical).map_err(|e| GuestError::ScriptExec(e.to_string()))
            }
        }
    }
}

fn read_app_elf(dir: &Path) -> Result<(Vec<u8>, String), GuestError> {
    let elf_path = dir.join("app.elf");
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "app".to_string());
    if elf_path.exists() {
        return Ok((
            std::fs::read(&elf_path).map_err(|e| GuestError::Io(format!("app.elf: {e}")))?,
            name,
        ));
    }
    let spec_path = dir.join("app.elfspec");
    let text = std::fs::read_to_string(&spec_path)
        .map_err(|e| GuestError::Io(format!("app.elfspec: {e}")))?;
    let elf = crate::fixture::generate_from_text(&text)
        .map_err(|e| GuestError::Io(format!("app.elfspec: {e}")))?;
    Ok((elf, name))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunState {
    Running,
    Paused,
    Terminated,
}

/// A launched instance: live volatile state, instance counters, trace.
#[derive(Debug)]
pub struct GuestInstance {
    pub program: Arc<GuestProgram>,
    heap: Vec<u8>,
    stack: Vec<u8>,
    fd_table: Vec<FdRecord>,
    secrets: Vec<u8>,
    counters: EffectiveCounters,
    pub trace: TraceLog,
    pub run_state: RunState,
    /// Next main-script command to execute.
    pc: usize,
}

const STACK_HEADER: usize = 8;

/// Upper bound on a guest's heap or stack image. Scripts are
/// node-external files, so growth driven by them is capped rather than
/// trusted — a hostile offset must fail the instance, not the service.
pub const MAX_GUEST_IMAGE: usize = 16 * 1024 * 1024;

fn grow_for(image: &mut Vec<u8>, offset: usize, len: usize) -> Result<usize, GuestError> {
    let end = offset
        .checked_add(len)
        .filter(|end| *end <= MAX_GUEST_IMAGE)
        .ok_or_else(|| {
            GuestError::ScriptExec(format!(
                "write 0x{offset:x}+0x{len:x} exceeds the guest image bound"
            ))
        })?;
    if image.len() < end {
        image.resize(end, 0);
    }
    Ok(end)
}

/// Launches an instance. With a restored state the guest consumes it,
/// applies the counter offsets, executes its reload preamble (emitting
/// the resume marker), and continues from the saved position.
pub fn guest_launch(
    program: Arc<GuestProgram>,
    initial_state: Option<VolatileState>,
) -> Result<GuestInstance, GuestError> {
    if program.current_measurement()? != program.measurement {
        return Err(GuestError::MeasurementMismatch);
    }
    let mut instance = GuestInstance {
        program: program.clone(),
        heap: Vec::new(),
        stack: vec![0u8; STACK_HEADER],
        fd_table: Vec::new(),
        secrets: Vec::new(),
        counters: EffectiveCounters::new(),
        trace: TraceLog::new(),
        run_state: RunState::Running,
        pc: 0,
    };
    match initial_state {
        None => Ok(instance),
        Some(state) if state.is_empty() => Ok(instance),
        Some(state) => {
            let offsets = export_counter_offsets(&state);
            instance.counters.apply_offsets(&offsets)?;
            instance.heap = state.heap_image;
            instance.stack = state.stack_image;
            if instance.stack.len() < STACK_HEADER {
                instance.stack.resize(STACK_HEADER, 0);
            }
            instance.fd_table = state.fd_table;
            instance.secrets = state.secrets;
            let saved = u64::from_le_bytes(instance.stack[..STACK_HEADER].try_into().unwrap());
            instance.pc = (saved as usize).min(program.script.main.len());
            // Reload preamble: trace-only commands ending in the marker.
            let reload = program.script.reload.clone();
            for command in &reload {
                instance.execute(command)?;
            }
            Ok(instance)
        }
    }
}

impl GuestInstance {
    fn execute(&mut self, command: &Command) -> Result<(), GuestError> {
        match command {
            Command::HeapWrite { offset, bytes } => {
                let end = grow_for(&mut self.heap, *offset, bytes.len())?;
                self.heap[*offset..end].copy_from_slice(bytes);
            }
            Command::HeapFill { offset, len, value } => {
                let end = grow_for(&mut self.heap, *offset, *len)?;
                self.heap[*offset..end].fill(*value);
            }
            Command::StackWrite { offset, bytes } => {
                let start = STACK_HEADER
                    .checked_add(*offset)
                    .ok_or_else(|| GuestError::ScriptExec("stack offset overflow".to_string()))?;
                let end = grow_for(&mut self.stack, start, bytes.len())?;
                self.stack[start..end].copy_from_slice(bytes);
            }
            Command::FdOpen { fd, path } => {
                if self.fd_table.iter().any(|r| r.fd == *fd) {
                    return Err(GuestError::ScriptExec(format!("fd {fd} already open")));
                }
                self.fd_table.push(FdRecord {
                    fd: *fd,
                    path: path.clone(),
                    offset: 0,
                });
            }
            Command::FdSeek { fd, offset } => {
                let record = self
                    .fd_table
                    .iter_mut()
                    .find(|r| r.fd == *fd)
                    .ok_or_else(|| GuestError::ScriptExec(format!("fd {fd} not open")))?;
                record.offset = *offset;
            }
            Command::FdClose { fd } => {
                let before = self.fd_table.len();
                self.fd_table.retain(|r| r.fd != *fd);
                if self.fd_table.len() == before {
                    return Err(GuestError::ScriptExec(format!("fd {fd} not open")));
                }
            }
            Command::CounterInc { id } => {
                self.counters.increment(*id)?;
            }
            Command::SecretSet { bytes } => {
                self.secrets = bytes.clone();
            }
            Command::Syscall { name, params } => {
                self.trace
                    .record(name, params.as_bytes())
                    .map_err(|e| GuestError::ScriptExec(e.to_string()))?;
            }
            Command::EmitResumeMarker => {
                self.trace
                    .record(RESUME_MARKER, b"")
                    .map_err(|e| GuestError::ScriptExec(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Executes up to `n` remaining main-script commands.
    pub fn step(&mut self, n: usize) -> Result<usize, GuestError> {
        if self.run_state != RunState::Running {
            return Err(GuestError::InvalidRunState(self.run_state));
        }
        let mut executed = 0;
        while executed < n && self.pc < self.program.script.main.len() {
            let command = self.program.script.main[self.pc].clone();
            self.execute(&command)?;
            self.pc += 1;
            executed += 1;
        }
        Ok(executed)
    }

    /// Runs the remaining script to completion.
    pub fn run_to_end(&mut self) -> Result<usize, GuestError> {
        self.step(usize::MAX)
    }

    pub fn remaining_steps(&self) -> usize {
        self.program.script.main.len() - self.pc
    }

    pub fn pause(&mut self) -> Result<(), GuestError> {
        if self.run_state != RunState::Running {
            return Err(GuestError::InvalidRunState(self.run_state));
        }
        self.run_state = RunState::Paused;
        Ok(())
    }

    pub fn resume(&mut self) -> Result<(), GuestError> {
        if self.run_state != RunState::Paused {
            return Err(GuestError::InvalidRunState(self.run_state));
        }
        self.run_state = RunState::Running;
        Ok(())
    }

    pub fn terminate(&mut self) -> Result<(), GuestError> {
        if self.run_state == RunState::Terminated {
            return Err(GuestError::InvalidRunState(self.run_state));
        }
        self.run_state = RunState::Terminated;
        self.trace.terminate();
        Ok(())
    }

    pub fn is_paused(&self) -> bool {
        self.run_state == RunState::Paused
    }

    /// Snapshot of the live volatile state: heap, stack (resume position
    /// written into the runtime header), descriptor table, effective
    /// counter values, secrets. Read-only; the instance keeps running.
    pub fn capture_state(&self) -> VolatileState {
        let mut stack = self.stack.clone();
        stack[..STACK_HEADER].copy_from_slice(&(self.pc as u64).to_le_bytes());
        VolatileState {
            heap_image: self.heap.clone(),
            stack_image: stack,
            fd_table: self.fd_table.clone(),
            counters: self.counters.snapshot(),
            secrets: self.secrets.clone(),
        }
    }

    pub fn counter_read(&self, id: [u8; 8]) -> Result<u64, StateError> {
        self.counters.read(id)
    }

    /// Events from the reload marker onward (exclusive), as (name, digest)
    /// pairs; sequence numbers are instance-relative and excluded.
    pub fn post_marker_trace(&self) -> Vec<(String, [u8; 32])> {
        let marker_pos = self
            .trace
            .events
            .iter()
            .position(|e| e.name == RESUME_MARKER);
        let start = marker_pos.map(|p| p + 1).unwrap_or(0);
        self.trace.events[start..]
            .iter()
            .map(|e| (e.name.clone(), e.params_digest))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCRIPT: &str = "\
[reload]
syscall mmap addr=0
syscall read fd=5
emit-resume-marker
[main]
heap-write 0 deadbeef
counter-inc 00000000000000a1
syscall write fd=1
heap-write 4 cafebabe
counter-inc 00000000000000a1
syscall write fd=1
fd-open 3 /tmp/out
syscall close fd=3
fd-close 3
secret-set 0102030405
";

    const ELFSPEC: &str =
        "section .text 0x401000 0x20 r-x 554889e54883ec10c745fc00000000b8000000004883c4105dc3\n";

    fn program() -> Arc<GuestProgram> {
        let elf = crate::fixture::generate_from_text(ELFSPEC).unwrap();
        Arc::new(GuestProgram::from_parts("demo", elf, SCRIPT).unwrap())
    }

    #[test]
    fn script_sections_parse() {
        let script = parse_script(SCRIPT).unwrap();
        assert_eq!(script.reload.len(), 3);
        assert_eq!(script.main.len(), 10);
        assert!(matches!(script.reload[2], Command::EmitResumeMarker));
    }

    #[test]
    fn reload_section_rejects_mutation() {
        let bad = "[reload]\nheap-write 0 00\n";
        assert!(matches!(
            parse_script(bad),
            Err(GuestError::ScriptParse(2, _))
        ));
    }

    #[test]
    fn fresh_launch_starts_with_prologue() {
        let mut instance = guest_launch(program(), None).unwrap();
        instance.step(3).unwrap();
        assert_eq!(instance.trace.events.len(), 1);
        assert_eq!(instance.trace.events[0].name, "write");
        assert_eq!(instance.counter_read(*b"\0\0\0\0\0\0\0\xa1").unwrap(), 1);
    }

    #[test]
    fn restored_launch_continues_counters() {
        let mut first = guest_launch(program(), None).unwrap();
        first.step(5).unwrap(); // through second counter-inc
        first.pause().unwrap();
        let state = first.capture_state();
        assert_eq!(state.counters, vec![(*b"\0\0\0\0\0\0\0\xa1", 2)]);

        let restored = guest_launch(program(), Some(state)).unwrap();
        // Reload preamble ran: mmap, read, marker.
        assert_eq!(restored.trace.events.len(), 3);
        assert_eq!(restored.trace.events[2].name, RESUME_MARKER);
        assert_eq!(restored.counter_read(*b"\0\0\0\0\0\0\0\xa1").unwrap(), 2);
    }

    #[test]
    fn split_run_equals_uninterrupted_run() {
        // Continuity oracle: run the unmigrated execution to completion and
        // compare bit-exactly against a 5 + rest split.
        let mut oracle = guest_launch(program(), None).unwrap();
        oracle.run_to_end().unwrap();
        oracle.pause().unwrap();
        let expected = oracle.capture_state();

        let mut first = guest_launch(program(), None).unwrap();
        first.step(5).unwrap();
        first.pause().unwrap();
        let mid = first.capture_state();
        let emitted_before_split = first.trace.events.len();

        let mut second = guest_launch(program(), Some(mid)).unwrap();
        second.run_to_end().unwrap();
        second.pause().unwrap();
        assert_eq!(second.capture_state(), expected);

        // Post-marker trace equals the oracle's remaining events.
        let oracle_tail: Vec<(String, [u8; 32])> = oracle.trace.events[emitted_before_split..]
            .iter()
            .map(|e| (e.name.clone(), e.params_digest))
            .collect();
        assert_eq!(second.post_marker_trace(), oracle_tail);
    }

    #[test]
    fn run_state_machine_enforced() {
        let mut instance = guest_launch(program(), None).unwrap();
        instance.pause().unwrap();
        assert!(matches!(
            instance.pause(),
            Err(GuestError::InvalidRunState(RunState::Paused))
        ));
        assert!(matches!(
            instance.step(1),
            Err(GuestError::InvalidRunState(RunState::Paused))
        ));
        instance.resume().unwrap();
        instance.terminate().unwrap();
        assert!(matches!(
            instance.terminate(),
            Err(GuestError::InvalidRunState(RunState::Terminated))
        ));
    }

    #[test]
    fn tampered_script_fails_measurement() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("app.elfspec"), ELFSPEC).unwrap();
        std::fs::write(dir.path().join("app.script"), SCRIPT).unwrap();
        let program = Arc::new(GuestProgram::load(dir.path()).unwrap());
        guest_launch(program.clone(), None).unwrap();

        std::fs::write(
            dir.path().join("app.script"),
            SCRIPT.replace("deadbeef", "deadbeee"),
        )
        .unwrap();
        assert_eq!(
            guest_launch(program, None).unwrap_err(),
            GuestError::MeasurementMismatch
        );
    }

    #[test]
    fn hostile_write_bounds_fail_the_instance_not_the_process() {
        let elf = crate::fixture::generate_from_text(ELFSPEC).unwrap();
        for script in [
            "heap-write 18446744073709551615 00\n",
            "heap-fill 0 999999999999 0xff\n",
            "stack-write 0xffffffffffffff00 00\n",
        ] {
            let program =
                Arc::new(GuestProgram::from_parts("hostile", elf.clone(), script).unwrap());
            let mut instance = guest_launch(program, None).unwrap();
            assert!(
                matches!(instance.step(1), Err(GuestError::ScriptExec(_))),
                "{script:?}"
            );
        }
    }

    #[test]
    fn fd_lifecycle_and_errors() {
        let script = "\
fd-open 3 /a
fd-seek 3 128
fd-open 3 /b
";
        let elf = crate::fixture::generate_from_text(ELFSPEC).unwrap();
        let program = Arc::new(GuestProgram::from_parts("fds", elf, script).unwrap());
        let mut instance = guest_launch(program, None).unwrap();
        instance.step(2).unwrap();
        assert_eq!(instance.capture_state().fd_table[0].offset, 128);
        assert!(matches!(instance.step(1), Err(GuestError::ScriptExec(_))));
    }
}
