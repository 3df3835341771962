//! Thin command-line front end: every subcommand maps onto library
//! operations. See the crate examples for the in-process equivalents.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use talos::crypto::NodeKeyPair;
use talos::harness::adversary::Adversary;
use talos::harness::{bench, games, tcp};
use talos::node::{migration_service_measurement, MigrationOutcome, Node};
use talos::orchestrator::Orchestrator;
use talos::tee::EnclaveMeasurement;

#[derive(Parser)]
#[command(
    name = "talos",
    version,
    about = "verifiable live migration of enclave applications"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enrollment authority operations.
    Orchestrator {
        #[command(subcommand)]
        command: OrchestratorCommand,
    },
    /// Migration node operations.
    Node {
        #[command(subcommand)]
        command: NodeCommand,
    },
    /// Enroll a node directory against a running orchestrator.
    Enroll {
        /// Orchestrator address, e.g. 127.0.0.1:7100
        #[arg(long)]
        orchestrator: String,
        #[arg(long)]
        node_dir: PathBuf,
        #[arg(long)]
        node_id: String,
        /// Deployment platform key file (32 bytes).
        #[arg(long, default_value = "platform.key")]
        platform_key: PathBuf,
    },
    /// Run the target role of one migration against a source node.
    Migrate {
        /// Source node address, e.g. 127.0.0.1:7200
        #[arg(long)]
        source: String,
        #[arg(long)]
        node_dir: PathBuf,
        /// Application measurement (hex); defaults to the only installed app.
        #[arg(long)]
        measurement: Option<String>,
        /// Application directories to install before migrating.
        #[arg(long = "apps")]
        apps: Vec<PathBuf>,
        /// Named adversary preset (replay-package, mutate-package,
        /// mitm-channel, drop-result) or a script file path.
        #[arg(long)]
        adversary: Option<String>,
        #[arg(long, default_value = "platform.key")]
        platform_key: PathBuf,
    },
    /// Execute one of the adversarial games (I..V).
    Game {
        game: String,
        #[arg(long, default_value_t = 100)]
        trials: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Concurrent attempts per trial (game III only).
        #[arg(long, default_value_t = games::FORK_BOMB_CONCURRENCY)]
        concurrency: u32,
    },
    /// Time the migration sub-steps over repeated honest runs.
    Bench {
        #[arg(long, default_value_t = 1)]
        scenario: u8,
        #[arg(long, default_value_t = 100)]
        iterations: u32,
        /// Also print the machine-readable record lines.
        #[arg(long, default_value_t = false)]
        tsv: bool,
    },
    /// ELF fixture tooling.
    Fixture {
        #[command(subcommand)]
        command: FixtureCommand,
    },
}

#[derive(Subcommand)]
enum OrchestratorCommand {
    /// Serve enrollment requests; profiles every app under --apps.
    Serve {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        store: PathBuf,
        /// Application directories to profile and provision.
        #[arg(long = "apps")]
        apps: Vec<PathBuf>,
        #[arg(long, default_value = "platform.key")]
        platform_key: PathBuf,
    },
}

#[derive(Subcommand)]
enum NodeCommand {
    /// Serve the migration protocol; launches every app under --apps.
    Serve {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        node_dir: PathBuf,
        #[arg(long = "apps")]
        apps: Vec<PathBuf>,
        /// Script steps each launched app runs before idling.
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long, default_value = "platform.key")]
        platform_key: PathBuf,
    },
}

#[derive(Subcommand)]
enum FixtureCommand {
    /// Write a minimal ELF64 binary from a description file.
    GenElf { spec: PathBuf, out: PathBuf },
    /// Parse an ELF file and print sections, symbols and relocations.
    Parse { elf: PathBuf },
}

fn load_or_create_platform_key(path: &Path, create: bool) -> Result<NodeKeyPair, String> {
    if path.exists() {
        let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| format!("{}: expected 32 bytes", path.display()))?;
        NodeKeyPair::from_bytes(&arr).map_err(|e| e.to_string())
    } else if create {
        let key = NodeKeyPair::generate().map_err(|e| e.to_string())?;
        std::fs::write(path, key.secret_bytes()).map_err(|e| format!("{}: {e}", path.display()))?;
        eprintln!("generated platform key at {}", path.display());
        Ok(key)
    } else {
        Err(format!(
            "platform key {} not found (start the orchestrator first)",
            path.display()
        ))
    }
}

fn open_node(node_dir: &Path, platform_key: &Path) -> Result<Node, String> {
    let key = load_or_create_platform_key(platform_key, false)?;
    let node_id = node_dir
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "node".to_string());
    Node::open(node_dir, &node_id, key).map_err(|e| e.to_string())
}

fn install_apps(node: &Node, apps: &[PathBuf]) -> Result<Vec<EnclaveMeasurement>, String> {
    let mut measurements = Vec::new();
    for app in apps {
        let m = node
            .install_app(app)
            .map_err(|e| format!("{}: {e}", app.display()))?;
        println!("installed {} -> {}", app.display(), m.hex());
        measurements.push(m);
    }
    Ok(measurements)
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Orchestrator {
            command:
                OrchestratorCommand::Serve {
                    listen,
                    store,
                    apps,
                    platform_key,
                },
        } => {
            let key = load_or_create_platform_key(&platform_key, true)?;
            let orchestrator = Orchestrator::new(key.public_key(), migration_service_measurement())
                .map_err(|e| e.to_string())?
                .with_store(&store)
                .map_err(|e| e.to_string())?;
            for app in &apps {
                let program = Arc::new(
                    talos::guest::GuestProgram::load(app)
                        .map_err(|e| format!("{}: {e}", app.display()))?,
                );
                let profile = orchestrator
                    .profile_application(&program)
                    .map_err(|e| e.to_string())?;
                let signed = orchestrator
                    .register_profile(profile)
                    .map_err(|e| e.to_string())?;
                println!(
                    "profiled {} -> {}",
                    app.display(),
                    signed.profile.measurement.hex()
                );
            }
            let listener = TcpListener::bind(&listen).map_err(|e| format!("{listen}: {e}"))?;
            println!("orchestrator listening on {listen}");
            tcp::serve_orchestrator(Arc::new(orchestrator), listener);
            Ok(())
        }
        Command::Node {
            command:
                NodeCommand::Serve {
                    listen,
                    node_dir,
                    apps,
                    steps,
                    platform_key,
                },
        } => {
            let node = Arc::new(open_node(&node_dir, &platform_key)?);
            if !node.is_enrolled() {
                return Err("node is not enrolled; run `talos enroll` first".to_string());
            }
            for m in install_apps(&node, &apps)? {
                node.launch_app(&m).map_err(|e| e.to_string())?;
                node.step_app(&m, steps).map_err(|e| e.to_string())?;
                println!("launched {} ({} steps)", m.hex(), steps);
            }
            let listener = TcpListener::bind(&listen).map_err(|e| format!("{listen}: {e}"))?;
            println!("node {} listening on {listen}", node.node_id);
            tcp::serve_node(node, listener);
            Ok(())
        }
        Command::Enroll {
            orchestrator,
            node_dir,
            node_id,
            platform_key,
        } => {
            let key = load_or_create_platform_key(&platform_key, false)?;
            let node = Node::open(&node_dir, &node_id, key).map_err(|e| e.to_string())?;
            tcp::enroll_over_tcp(&node, orchestrator.as_str()).map_err(|e| e.to_string())?;
            println!("enrolled {node_id} at {}", node_dir.display());
            Ok(())
        }
        Command::Migrate {
            source,
            node_dir,
            measurement,
            apps,
            adversary,
            platform_key,
        } => {
            let node = open_node(&node_dir, &platform_key)?;
            if !node.is_enrolled() {
                return Err("node is not enrolled; run `talos enroll` first".to_string());
            }
            install_apps(&node, &apps)?;
            let measurement = match measurement {
                Some(hex) => EnclaveMeasurement::from_hex(&hex)
                    .ok_or_else(|| format!("bad measurement hex {hex:?}"))?,
                None => {
                    let installed = node.installed_apps();
                    match installed.as_slice() {
                        [only] => *only,
                        _ => {
                            return Err(
                                "pass --measurement (node has zero or several apps)".to_string()
                            )
                        }
                    }
                }
            };

            let (outcome, digest) = match adversary.as_deref() {
                Some("replay-package") => {
                    tcp::migrate_replay_package(&node, source.as_str(), &measurement)
                        .map_err(|e| e.to_string())?
                }
                Some(name) => {
                    let hooks = match tcp::adversary_preset(name) {
                        Some(hooks) => hooks,
                        None => {
                            let text = std::fs::read_to_string(name)
                                .map_err(|e| format!("adversary {name}: {e}"))?;
                            tcp::parse_adversary_script(&text)?
                        }
                    };
                    let mut adversary = Adversary::with_hooks(hooks);
                    tcp::migrate_over_tcp(&node, source.as_str(), &measurement, &mut adversary)
                        .map_err(|e| e.to_string())?
                }
                None => {
                    let mut adversary = Adversary::passive();
                    tcp::migrate_over_tcp(&node, source.as_str(), &measurement, &mut adversary)
                        .map_err(|e| e.to_string())?
                }
            };

            match digest {
                Some(digest) => println!("digest {}", hex::encode(digest)),
                None => println!("digest -"),
            }
            match outcome {
                MigrationOutcome::Confirmed => {
                    println!("Confirmed");
                    Ok(())
                }
                MigrationOutcome::Aborted(reason) => {
                    println!("Aborted: {reason}");
                    Err(format!("migration aborted: {reason}"))
                }
            }
        }
        Command::Game {
            game,
            trials,
            seed,
            concurrency,
        } => {
            let id = games::GameId::parse(&game).ok_or_else(|| format!("unknown game {game:?}"))?;
            let report = if id == games::GameId::III {
                games::run_fork_bomb(trials, concurrency, seed).map_err(|e| e.to_string())?
            } else {
                games::run_game(id, trials, seed).map_err(|e| e.to_string())?
            };
            print!("{}", report.render());
            print!("{}", report.to_tsv());
            if report.adversary_wins > 0 {
                return Err(format!("adversary won {} trial(s)", report.adversary_wins));
            }
            Ok(())
        }
        Command::Bench {
            scenario,
            iterations,
            tsv,
        } => {
            let report = bench::run_benchmark(scenario, iterations).map_err(|e| e.to_string())?;
            print!("{}", report.render());
            if tsv {
                print!("{}", report.to_tsv());
            }
            Ok(())
        }
        Command::Fixture { command } => match command {
            FixtureCommand::GenElf { spec, out } => {
                let text = std::fs::read_to_string(&spec)
                    .map_err(|e| format!("{}: {e}", spec.display()))?;
                let elf = talos::fixture::generate_from_text(&text).map_err(|e| e.to_string())?;
                std::fs::write(&out, &elf).map_err(|e| format!("{}: {e}", out.display()))?;
                println!("wrote {} ({} bytes)", out.display(), elf.len());
                Ok(())
            }
            FixtureCommand::Parse { elf } => {
                let bytes = std::fs::read(&elf).map_err(|e| format!("{}: {e}", elf.display()))?;
                let name = elf
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_default();
                let img = talos::elf::parse_elf(&bytes, &name).map_err(|e| e.to_string())?;
                println!("entry 0x{:x}", img.entry_point);
                for section in &img.sections {
                    println!(
                        "section {:<12} vaddr 0x{:<8x} size 0x{:<6x} {} offset 0x{:x}",
                        section.name,
                        section.vaddr,
                        section.size,
                        section.flags.render(),
                        section.file_offset
                    );
                }
                for map in talos::elf::build_memory_map(&img, 0)
                    .map_err(|e| e.to_string())?
                    .entries
                {
                    println!(
                        "map 0x{:012x}-0x{:012x} {} {}",
                        map.start_vaddr,
                        map.end_vaddr,
                        map.permissions.render(),
                        map.backing
                    );
                }
                for sym in talos::elf::extract_symbols(&img).map_err(|e| e.to_string())? {
                    println!(
                        "symbol {:<20} value 0x{:<8x} size 0x{:<4x} section {}",
                        sym.name, sym.value, sym.size, sym.section_index
                    );
                }
                for rel in talos::elf::extract_relocations(&img).map_err(|e| e.to_string())? {
                    println!(
                        "reloc offset 0x{:<8x} sym {} type {} addend {}",
                        rel.offset, rel.symbol_index, rel.reloc_type, rel.addend
                    );
                }
                println!(
                    "text sha256 {}",
                    talos::elf::text_section_hash(&img)
                        .map(hex::encode)
                        .unwrap_or_else(|_| "(no .text)".to_string())
                );
                Ok(())
            }
        },
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
