//! Deterministic ELF64 fixture generator.
//!
//! Tests and scenario fixtures describe a binary in a small line-oriented
//! format and this module writes a minimal valid little-endian ELF64
//! executable for it, so no compiler toolchain is ever needed:
//!
//! ```text
//! section <name> <vaddr> <size> <rwx> <hex-bytes|zero>
//! symbol <name> <value> <size> <section>
//! reloc <offset> <symindex> <type> <addend>
//! ```
//!
//! `zero` sections become SHT_NOBITS (the .bss case). Lines starting with
//! `#` and blank lines are ignored. Output bytes are a pure function of
//! the description.

use crate::elf::{
    PF_R, PF_W, PF_X, PT_LOAD, SHF_ALLOC, SHF_EXECINSTR, SHF_WRITE, SHT_NOBITS, SHT_RELA,
    SHT_STRTAB, SHT_SYMTAB,
};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FixtureError {
    #[error("line {0}: {1}")]
    Parse(usize, String),
    #[error("symbol references unknown section {0:?}")]
    UnknownSection(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionDesc {
    pub name: String,
    pub vaddr: u64,
    pub size: u64,
    pub read: bool,
    pub write: bool,
    pub execute: bool,
    /// None = uninitialized (NOBITS); Some = contents padded to `size`.
    pub contents: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolDesc {
    pub name: String,
    pub value: u64,
    pub size: u64,
    pub section: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelocDesc {
    pub offset: u64,
    pub symbol_index: u32,
    pub reloc_type: u32,
    pub addend: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FixtureDescription {
    pub sections: Vec<SectionDesc>,
    pub symbols: Vec<SymbolDesc>,
    pub relocs: Vec<RelocDesc>,
}

fn parse_num(token: &str) -> Option<u64> {
    if let Some(hexpart) = token.strip_prefix("0x") {
        u64::from_str_radix(hexpart, 16).ok()
    } else {
        token.parse().ok()
    }
}

pub fn parse_description(text: &str) -> Result<FixtureDescription, FixtureError> {
    let mut desc = FixtureDescription::default();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: &str| FixtureError::Parse(lineno, msg.to_string());
        match tokens[0] {
            "section" => {
                if tokens.len() != 6 {
                    return Err(err(
                        "expected: section <name> <vaddr> <size> <rwx> <hex|zero>",
                    ));
                }
                let vaddr = parse_num(tokens[2]).ok_or_else(|| err("bad vaddr"))?;
                let size = parse_num(tokens[3]).ok_or_else(|| err("bad size"))?;
                if size > 16 * 1024 * 1024 {
                    return Err(err("section size above the 16 MiB fixture bound"));
                }
                let rwx = tokens[4];
                if rwx.len() != 3 {
                    return Err(err("rwx must be three of r/w/x/-"));
                }
                let flag = |i: usize, c: char| -> Result<bool, FixtureError> {
                    match rwx.as_bytes()[i] as char {
                        ch if ch == c => Ok(true),
                        '-' => Ok(false),
                        _ => Err(err("rwx must be three of r/w/x/-")),
                    }
                };
                let contents = if tokens[5] == "zero" {
                    None
                } else {
                    let bytes = hex::decode(tokens[5]).map_err(|_| err("bad hex contents"))?;
                    if bytes.len() as u64 > size {
                        return Err(err("contents longer than declared size"));
                    }
                    let mut padded = bytes;
                    padded.resize(size as usize, 0);
                    Some(padded)
                };
                desc.sections.push(SectionDesc {
                    name: tokens[1].to_string(),
                    vaddr,
                    size,
                    read: flag(0, 'r')?,
                    write: flag(1, 'w')?,
                    execute: flag(2, 'x')?,
                    contents,
                });
            }
            "symbol" => {
                if tokens.len() != 5 {
                    return Err(err("expected: symbol <name> <value> <size> <section>"));
                }
                desc.symbols.push(SymbolDesc {
                    name: tokens[1].to_string(),
                    value: parse_num(tokens[2]).ok_or_else(|| err("bad value"))?,
                    size: parse_num(tokens[3]).ok_or_else(|| err("bad size"))?,
                    section: tokens[4].to_string(),
                });
            }
            "reloc" => {
                if tokens.len() != 5 {
                    return Err(err("expected: reloc <offset> <symindex> <type> <addend>"));
                }
                let addend_token = tokens[4];
                let addend = if let Some(rest) = addend_token.strip_prefix('-') {
                    -(parse_num(rest).ok_or_else(|| err("bad addend"))? as i64)
                } else {
                    parse_num(addend_token).ok_or_else(|| err("bad addend"))? as i64
                };
                desc.relocs.push(RelocDesc {
                    offset: parse_num(tokens[1]).ok_or_else(|| err("bad offset"))?,
                    symbol_index: parse_num(tokens[2]).ok_or_else(|| err("bad symindex"))? as u32,
                    reloc_type: parse_num(tokens[3]).ok_or_else(|| err("bad type"))? as u32,
                    addend,
                });
            }
            other => return Err(err(&format!("unknown directive {other:?}"))),
        }
    }
    for sym in &desc.symbols {
        if !desc.sections.iter().any(|s| s.name == sym.section) {
            return Err(FixtureError::UnknownSection(sym.section.clone()));
        }
    }
    Ok(desc)
}

struct StrTab {
    bytes: Vec<u8>,
}

impl StrTab {
    fn new() -> Self {
        StrTab { bytes: vec![0] }
    }

    fn add(&mut self, name: &str) -> u32 {
        let index = self.bytes.len() as u32;
        self.bytes.extend_from_slice(name.as_bytes());
        self.bytes.push(0);
        index
    }
}

fn align16(v: usize) -> usize {
    (v + 15) & !15
}

/// Emits the complete ELF64 file for a description.
pub fn generate_elf(desc: &FixtureDescription) -> Vec<u8> {
    let has_symtab = !desc.symbols.is_empty();
    let has_rela = !desc.relocs.is_empty();

    // Section header table layout:
    //   0: SHT_NULL
    //   1..=n: declared sections
    //   then .symtab, .strtab (if symbols), .rela (if relocs), .shstrtab
    let declared = desc.sections.len();
    let symtab_index = 1 + declared;
    let strtab_index = symtab_index + 1;
    let rela_index = if has_symtab {
        strtab_index + 1
    } else {
        symtab_index
    };
    let shstrtab_index =
        1 + declared + if has_symtab { 2 } else { 0 } + if has_rela { 1 } else { 0 };
    let shnum = shstrtab_index + 1;
    let phnum = declared;

    let mut shstrtab = StrTab::new();
    let shstr_offsets: Vec<u32> = desc
        .sections
        .iter()
        .map(|s| shstrtab.add(&s.name))
        .collect();
    let symtab_name = if has_symtab {
        shstrtab.add(".symtab")
    } else {
        0
    };
    let strtab_name = if has_symtab {
        shstrtab.add(".strtab")
    } else {
        0
    };
    let rela_name = if has_rela {
        shstrtab.add(".rela.talos")
    } else {
        0
    };
    let shstrtab_name = shstrtab.add(".shstrtab");

    // Body layout after the headers.
    let mut cursor = 64 + phnum * 56;
    let mut section_offsets = Vec::with_capacity(declared);
    for section in &desc.sections {
        cursor = align16(cursor);
        section_offsets.push(cursor);
        if section.contents.is_some() {
            cursor += section.size as usize;
        }
    }

    let mut strtab = StrTab::new();
    let sym_name_offsets: Vec<u32> = desc.symbols.iter().map(|s| strtab.add(&s.name)).collect();

    cursor = align16(cursor);
    let symtab_offset = cursor;
    let symtab_size = if has_symtab {
        (desc.symbols.len() + 1) * 24
    } else {
        0
    };
    cursor += symtab_size;

    cursor = align16(cursor);
    let strtab_offset = cursor;
    let strtab_size = if has_symtab { strtab.bytes.len() } else { 0 };
    cursor += strtab_size;

    cursor = align16(cursor);
    let rela_offset = cursor;
    let rela_size = if has_rela { desc.relocs.len() * 24 } else { 0 };
    cursor += rela_size;

    cursor = align16(cursor);
    let shstrtab_offset = cursor;
    cursor += shstrtab.bytes.len();

    cursor = align16(cursor);
    let shoff = cursor;
    let total = shoff + shnum * 64;

    let entry = desc
        .sections
        .iter()
        .find(|s| s.execute)
        .map(|s| s.vaddr)
        .unwrap_or(0);

    let mut out = vec![0u8; total];

    // ELF header
    out[0..4].copy_from_slice(&crate::elf::ELF_MAGIC);
    out[4] = 2; // ELFCLASS64
    out[5] = 1; // ELFDATA2LSB
    out[6] = 1; // EV_CURRENT
    out[16..18].copy_from_slice(&2u16.to_le_bytes()); // ET_EXEC
    out[18..20].copy_from_slice(&62u16.to_le_bytes()); // EM_X86_64
    out[20..24].copy_from_slice(&1u32.to_le_bytes());
    out[24..32].copy_from_slice(&entry.to_le_bytes());
    out[32..40].copy_from_slice(&64u64.to_le_bytes()); // e_phoff
    out[40..48].copy_from_slice(&(shoff as u64).to_le_bytes());
    out[52..54].copy_from_slice(&64u16.to_le_bytes()); // e_ehsize
    out[54..56].copy_from_slice(&56u16.to_le_bytes()); // e_phentsize
    out[56..58].copy_from_slice(&(phnum as u16).to_le_bytes());
    out[58..60].copy_from_slice(&64u16.to_le_bytes()); // e_shentsize
    out[60..62].copy_from_slice(&(shnum as u16).to_le_bytes());
    out[62..64].copy_from_slice(&(shstrtab_index as u16).to_le_bytes());

    // Program headers: one PT_LOAD per declared section.
    for (i, section) in desc.sections.iter().enumerate() {
        let off = 64 + i * 56;
        let mut flags = 0u32;
        if section.read {
            flags |= PF_R;
        }
        if section.write {
            flags |= PF_W;
        }
        if section.execute {
            flags |= PF_X;
        }
        let filesz = if section.contents.is_some() {
            section.size
        } else {
            0
        };
        out[off..off + 4].copy_from_slice(&PT_LOAD.to_le_bytes());
        out[off + 4..off + 8].copy_from_slice(&flags.to_le_bytes());
        out[off + 8..off + 16].copy_from_slice(&(section_offsets[i] as u64).to_le_bytes());
        out[off + 16..off + 24].copy_from_slice(&section.vaddr.to_le_bytes());
        out[off + 24..off + 32].copy_from_slice(&section.vaddr.to_le_bytes()); // p_paddr
        out[off + 32..off + 40].copy_from_slice(&filesz.to_le_bytes());
        out[off + 40..off + 48].copy_from_slice(&section.size.to_le_bytes());
        out[off + 48..off + 56].copy_from_slice(&0x1000u64.to_le_bytes());
    }

    // Section contents.
    for (i, section) in desc.sections.iter().enumerate() {
        if let Some(contents) = &section.contents {
            out[section_offsets[i]..section_offsets[i] + contents.len()].copy_from_slice(contents);
        }
    }

    // Symbol table: null entry then declared symbols (GLOBAL NOTYPE).
    if has_symtab {
        for (i, sym) in desc.symbols.iter().enumerate() {
            let off = symtab_offset + (i + 1) * 24;
            let shndx = 1 + desc
                .sections
                .iter()
                .position(|s| s.name == sym.section)
                .unwrap();
            out[off..off + 4].copy_from_slice(&sym_name_offsets[i].to_le_bytes());
            out[off + 4] = 0x10; // STB_GLOBAL << 4 | STT_NOTYPE
            out[off + 6..off + 8].copy_from_slice(&(shndx as u16).to_le_bytes());
            out[off + 8..off + 16].copy_from_slice(&sym.value.to_le_bytes());
            out[off + 16..off + 24].copy_from_slice(&sym.size.to_le_bytes());
        }
        out[strtab_offset..strtab_offset + strtab.bytes.len()].copy_from_slice(&strtab.bytes);
    }

    // Relocation entries.
    if has_rela {
        for (i, rel) in desc.relocs.iter().enumerate() {
            let off = rela_offset + i * 24;
            let info = ((rel.symbol_index as u64) << 32) | rel.reloc_type as u64;
            out[off..off + 8].copy_from_slice(&rel.offset.to_le_bytes());
            out[off + 8..off + 16].copy_from_slice(&info.to_le_bytes());
            out[off + 16..off + 24].copy_from_slice(&rel.addend.to_le_bytes());
        }
    }

    out[shstrtab_offset..shstrtab_offset + shstrtab.bytes.len()].copy_from_slice(&shstrtab.bytes);

    // Section headers.
    let mut write_shdr = |index: usize,
                          name: u32,
                          sh_type: u32,
                          flags: u64,
                          addr: u64,
                          offset: usize,
                          size: usize,
                          link: u32,
                          info: u32,
                          entsize: u64| {
        let off = shoff + index * 64;
        out[off..off + 4].copy_from_slice(&name.to_le_bytes());
        out[off + 4..off + 8].copy_from_slice(&sh_type.to_le_bytes());
        out[off + 8..off + 16].copy_from_slice(&flags.to_le_bytes());
        out[off + 16..off + 24].copy_from_slice(&addr.to_le_bytes());
        out[off + 24..off + 32].copy_from_slice(&(offset as u64).to_le_bytes());
        out[off + 32..off + 40].copy_from_slice(&(size as u64).to_le_bytes());
        out[off + 40..off + 44].copy_from_slice(&link.to_le_bytes());
        out[off + 44..off + 48].copy_from_slice(&info.to_le_bytes());
        out[off + 48..off + 56].copy_from_slice(&16u64.to_le_bytes()); // sh_addralign
        out[off + 56..off + 64].copy_from_slice(&entsize.to_le_bytes());
    };

    for (i, section) in desc.sections.iter().enumerate() {
        let mut flags = SHF_ALLOC;
        if section.write {
            flags |= SHF_WRITE;
        }
        if section.execute {
            flags |= SHF_EXECINSTR;
        }
        let (sh_type, size) = if section.contents.is_some() {
            (1u32, section.size as usize) // SHT_PROGBITS
        } else {
            (SHT_NOBITS, section.size as usize)
        };
        write_shdr(
            1 + i,
            shstr_offsets[i],
            sh_type,
            flags,
            section.vaddr,
            section_offsets[i],
            size,
            0,
            0,
            0,
        );
    }
    if has_symtab {
        write_shdr(
            symtab_index,
            symtab_name,
            SHT_SYMTAB,
            0,
            0,
            symtab_offset,
            symtab_size,
            strtab_index as u32,
            1, // index of the first non-local symbol
            24,
        );
        write_shdr(
            strtab_index,
            strtab_name,
            SHT_STRTAB,
            0,
            0,
            strtab_offset,
            strtab_size,
            0,
            0,
            0,
        );
    }
    if has_rela {
        write_shdr(
            rela_index,
            rela_name,
            SHT_RELA,
            0,
            0,
            rela_offset,
            rela_size,
            if has_symtab { symtab_index as u32 } else { 0 },
            1,
            24,
        );
    }
    write_shdr(
        shstrtab_index,
        shstrtab_name,
        SHT_STRTAB,
        0,
        0,
        shstrtab_offset,
        shstrtab.bytes.len(),
        0,
        0,
        0,
    );

    out
}

/// Convenience: parse a description file and emit the binary.
pub fn generate_from_text(text: &str) -> Result<Vec<u8>, FixtureError> {
    Ok(generate_elf(&parse_description(text)?))
}
