//! The introspection pipeline over a generated ELF fixture: parse,
//! memory map, symbols, relocations, text hash, and the persistent
//! reference digest — plus how one renamed symbol changes it.
//!
//! ```bash
//! cargo run -p talos --example elf_introspection
//! ```

use talos::elf::{
    build_memory_map, extract_relocations, extract_symbols, parse_elf, persistent_reference,
    text_section_hash,
};
use talos::fixture::generate_from_text;
use talos::sccfg::SysCallGraph;

const DESCRIPTION: &str = "\
section .text 0x401000 0x40 r-x 554889e54883ec10c745fc2a0000008b45fc4883c4105dc3
section .data 0x402000 0x20 rw- 00112233
section .bss  0x403000 0x100 rw- zero
symbol main 0x401000 0x18 .text
symbol answer 0x402000 0x4 .data
reloc 0x402000 1 1 0
";

fn main() {
    let elf = generate_from_text(DESCRIPTION).expect("valid description");
    println!("generated {} ELF bytes", elf.len());

    let img = parse_elf(&elf, "app.elf").expect("parse");
    println!("entry point 0x{:x}", img.entry_point);
    for section in &img.sections {
        println!(
            "  section {:<10} vaddr 0x{:<6x} size 0x{:<4x} {}",
            section.name,
            section.vaddr,
            section.size,
            section.flags.render()
        );
    }

    let map = build_memory_map(&img, 0).expect("memory map");
    for entry in &map.entries {
        println!(
            "  map 0x{:x}-0x{:x} {} ({})",
            entry.start_vaddr,
            entry.end_vaddr,
            entry.permissions.render(),
            entry.backing
        );
    }

    let symbols = extract_symbols(&img).expect("symbols");
    for symbol in &symbols {
        println!(
            "  symbol {:<8} @0x{:x} size 0x{:x}",
            symbol.name, symbol.value, symbol.size
        );
    }
    for reloc in extract_relocations(&img).expect("relocations") {
        println!(
            "  reloc @0x{:x} sym {} type {}",
            reloc.offset, reloc.symbol_index, reloc.reloc_type
        );
    }
    println!(
        "  .text sha256 {}",
        hex::encode(text_section_hash(&img).expect("text hash"))
    );

    let mut graph = SysCallGraph::new();
    graph.insert_edge("open", "read");
    graph.insert_edge("read", "talos_state_resumed");

    let reference = persistent_reference(&symbols, &map, &graph);
    println!("\npersistent reference:   {}", reference.hex());

    // One renamed symbol: a completely different digest.
    let renamed = generate_from_text(&DESCRIPTION.replace("symbol main", "symbol MAIN"))
        .expect("valid description");
    let img2 = parse_elf(&renamed, "app.elf").expect("parse");
    let reference2 = persistent_reference(
        &extract_symbols(&img2).expect("symbols"),
        &build_memory_map(&img2, 0).expect("map"),
        &graph,
    );
    println!("after a symbol rename:  {}", reference2.hex());
    assert_ne!(reference.digest, reference2.digest);
}
