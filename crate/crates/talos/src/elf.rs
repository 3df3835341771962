//! ELF64 introspection: parsing, the memory-map view of loadable
//! segments, symbol/relocation extraction, and the persistent reference
//! hash binding static layout to expected control flow.
//!
//! The parser is total over arbitrary input: every offset and count is
//! validated against the file length before any allocation or read, so
//! hostile bytes yield structured errors, never panics or unbounded
//! allocations. Only little-endian ELF64 is accepted.

use crate::crypto::sha256;
use crate::sccfg::SysCallGraph;

pub const ELF_MAGIC: [u8; 4] = [0x7f, b'E', b'L', b'F'];
const EHDR_SIZE: usize = 64;
const PHDR_SIZE: usize = 56;
const SHDR_SIZE: usize = 64;
const SYM_SIZE: usize = 24;
const RELA_SIZE: usize = 24;

pub const PT_LOAD: u32 = 1;
pub const SHT_SYMTAB: u32 = 2;
pub const SHT_STRTAB: u32 = 3;
pub const SHT_RELA: u32 = 4;
pub const SHT_NOBITS: u32 = 8;
pub const SHF_WRITE: u64 = 1;
pub const SHF_ALLOC: u64 = 2;
pub const SHF_EXECINSTR: u64 = 4;
pub const PF_X: u32 = 1;
pub const PF_W: u32 = 2;
pub const PF_R: u32 = 4;
/// Symbol table index meaning "undefined".
pub const SHN_UNDEF: u16 = 0;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ElfError {
    #[error("bad ELF magic")]
    BadMagic,
    #[error("truncated header: {0}")]
    TruncatedHeader(&'static str),
    #[error("offset out of bounds: {0}")]
    OutOfBoundsOffset(&'static str),
    #[error("unsupported ELF class or encoding (only little-endian ELF64)")]
    UnsupportedClass,
    #[error("corrupt string table")]
    CorruptStringTable,
    #[error("no .text section")]
    MissingTextSection,
    #[error("loadable segments overlap")]
    OverlappingSegments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgramHeader {
    pub p_type: u32,
    pub p_flags: u32,
    pub p_offset: u64,
    pub p_vaddr: u64,
    pub p_filesz: u64,
    pub p_memsz: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSectionHeader {
    pub sh_name: u32,
    pub sh_type: u32,
    pub sh_flags: u64,
    pub sh_addr: u64,
    pub sh_offset: u64,
    pub sh_size: u64,
    pub sh_link: u32,
    pub sh_info: u32,
    pub sh_entsize: u64,
}

/// Read/write/execute permission triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Perms {
    pub fn from_phdr_flags(flags: u32) -> Self {
        Perms {
            read: flags & PF_R != 0,
            write: flags & PF_W != 0,
            execute: flags & PF_X != 0,
        }
    }

    pub fn from_section_flags(flags: u64) -> Self {
        Perms {
            read: flags & SHF_ALLOC != 0,
            write: flags & SHF_WRITE != 0,
            execute: flags & SHF_EXECINSTR != 0,
        }
    }

    pub fn bits(&self) -> u8 {
        (self.read as u8) << 2 | (self.write as u8) << 1 | self.execute as u8
    }

    pub fn render(&self) -> String {
        format!(
            "{}{}{}",
            if self.read { 'r' } else { '-' },
            if self.write { 'w' } else { '-' },
            if self.execute { 'x' } else { '-' }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionRecord {
    pub name: String,
    pub vaddr: u64,
    pub size: u64,
    pub flags: Perms,
    pub file_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolRecord {
    pub name: String,
    pub value: u64,
    pub size: u64,
    pub section_index: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelocationRecord {
    pub offset: u64,
    pub symbol_index: u32,
    pub reloc_type: u32,
    pub addend: i64,
}

/// Parsed ELF64 image with validated header tables.
#[derive(Debug, Clone)]
pub struct ElfImage {
    pub raw: Vec<u8>,
    pub entry_point: u64,
    pub program_headers: Vec<ProgramHeader>,
    pub section_headers: Vec<RawSectionHeader>,
    pub sections: Vec<SectionRecord>,
    /// Name of the backing file, surfaced in the memory map.
    pub source_name: String,
}

fn read_u16(raw: &[u8], off: usize) -> Option<u16> {
    raw.get(off..off + 2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
}

fn read_u32(raw: &[u8], off: usize) -> Option<u32> {
    raw.get(off..off + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(raw: &[u8], off: usize) -> Option<u64> {
    raw.get(off..off + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

fn table_bounds(
    raw_len: usize,
    off: u64,
    count: u64,
    entsize: usize,
    what: &'static str,
) -> Result<usize, ElfError> {
    if count == 0 {
        return Ok(0);
    }
    let off = usize::try_from(off).map_err(|_| ElfError::OutOfBoundsOffset(what))?;
    let total = count
        .checked_mul(entsize as u64)
        .and_then(|t| usize::try_from(t).ok())
        .ok_or(ElfError::OutOfBoundsOffset(what))?;
    let end = off
        .checked_add(total)
        .ok_or(ElfError::OutOfBoundsOffset(what))?;
    if end > raw_len {
        return Err(ElfError::OutOfBoundsOffset(what));
    }
    Ok(off)
}

/// Resolves a NUL-terminated name at `index` inside a string table slice.
fn strtab_name(table: &[u8], index: u32) -> Result<String, ElfError> {
    let start = index as usize;
    if start > table.len() {
        return Err(ElfError::CorruptStringTable);
    }
    let rest = &table[start..];
    let end = rest
        .iter()
        .position(|&b| b == 0)
        .ok_or(ElfError::CorruptStringTable)?;
    String::from_utf8(rest[..end].to_vec()).map_err(|_| ElfError::CorruptStringTable)
}

pub fn parse_elf(raw: &[u8], source_name: &str) -> Result<ElfImage, ElfError> {
    if raw.len() < EHDR_SIZE {
        if raw.len() >= 4 && raw[..4] != ELF_MAGIC {
            return Err(ElfError::BadMagic);
        }
        return Err(ElfError::TruncatedHeader("file shorter than ELF64 header"));
    }
    if raw[..4] != ELF_MAGIC {
        return Err(ElfError::BadMagic);
    }
    // EI_CLASS 2 = 64-bit, EI_DATA 1 = little-endian.
    if raw[4] != 2 || raw[5] != 1 {
        return Err(ElfError::UnsupportedClass);
    }

    let entry_point = read_u64(raw, 24).ok_or(ElfError::TruncatedHeader("e_entry"))?;
    let phoff = read_u64(raw, 32).ok_or(ElfError::TruncatedHeader("e_phoff"))?;
    let shoff = read_u64(raw, 40).ok_or(ElfError::TruncatedHeader("e_shoff"))?;
    let phentsize = read_u16(raw, 54).ok_or(ElfError::TruncatedHeader("e_phentsize"))?;
    let phnum = read_u16(raw, 56).ok_or(ElfError::TruncatedHeader("e_phnum"))?;
    let shentsize = read_u16(raw, 58).ok_or(ElfError::TruncatedHeader("e_shentsize"))?;
    let shnum = read_u16(raw, 60).ok_or(ElfError::TruncatedHeader("e_shnum"))?;
    let shstrndx = read_u16(raw, 62).ok_or(ElfError::TruncatedHeader("e_shstrndx"))?;

    if phnum > 0 && phentsize as usize != PHDR_SIZE {
        return Err(ElfError::TruncatedHeader("e_phentsize"));
    }
    if shnum > 0 && shentsize as usize != SHDR_SIZE {
        return Err(ElfError::TruncatedHeader("e_shentsize"));
    }

    let ph_base = table_bounds(raw.len(), phoff, phnum as u64, PHDR_SIZE, "program headers")?;
    let mut program_headers = Vec::with_capacity(phnum as usize);
    for i in 0..phnum as usize {
        let off = ph_base + i * PHDR_SIZE;
        let header = ProgramHeader {
            p_type: read_u32(raw, off).unwrap(),
            p_flags: read_u32(raw, off + 4).unwrap(),
            p_offset: read_u64(raw, off + 8).unwrap(),
            p_vaddr: read_u64(raw, off + 16).unwrap(),
            p_filesz: read_u64(raw, off + 32).unwrap(),
            p_memsz: read_u64(raw, off + 40).unwrap(),
        };
        // File-backed ranges must land inside the file.
        if header.p_type == PT_LOAD {
            let end = header.p_offset.checked_add(header.p_filesz);
            match end {
                Some(end) if end <= raw.len() as u64 => {}
                _ => return Err(ElfError::OutOfBoundsOffset("PT_LOAD file range")),
            }
        }
        program_headers.push(header);
    }

    let sh_base = table_bounds(raw.len(), shoff, shnum as u64, SHDR_SIZE, "section headers")?;
    let mut section_headers = Vec::with_capacity(shnum as usize);
    for i in 0..shnum as usize {
        let off = sh_base + i * SHDR_SIZE;
        let header = RawSectionHeader {
            sh_name: read_u32(raw, off).unwrap(),
            sh_type: read_u32(raw, off + 4).unwrap(),
            sh_flags: read_u64(raw, off + 8).unwrap(),
            sh_addr: read_u64(raw, off + 16).unwrap(),
            sh_offset: read_u64(raw, off + 24).unwrap(),
            sh_size: read_u64(raw, off + 32).unwrap(),
            sh_link: read_u32(raw, off + 40).unwrap(),
            sh_info: read_u32(raw, off + 44).unwrap(),
            sh_entsize: read_u64(raw, off + 56).unwrap(),
        };
        // Sections with file contents must lie inside the file.
        if header.sh_type != SHT_NOBITS && header.sh_type != 0 {
            let end = header.sh_offset.checked_add(header.sh_size);
            match end {
                Some(end) if end <= raw.len() as u64 => {}
                _ => return Err(ElfError::OutOfBoundsOffset("section contents")),
            }
        }
        section_headers.push(header);
    }

    // Resolve section names through the section-header string table.
    let shstrtab: &[u8] = match section_headers.get(shstrndx as usize) {
        Some(h) if h.sh_type == SHT_STRTAB => {
            let start = usize::try_from(h.sh_offset).map_err(|_| ElfError::CorruptStringTable)?;
            let len = usize::try_from(h.sh_size).map_err(|_| ElfError::CorruptStringTable)?;
            let end = start.checked_add(len).ok_or(ElfError::CorruptStringTable)?;
            raw.get(start..end).ok_or(ElfError::CorruptStringTable)?
        }
        _ => &[],
    };

    let mut sections = Vec::with_capacity(section_headers.len());
    for header in &section_headers {
        if header.sh_type == 0 {
            continue; // SHT_NULL placeholder
        }
        let name = if shstrtab.is_empty() {
            String::new()
        } else {
            strtab_name(shstrtab, header.sh_name)?
        };
        sections.push(SectionRecord {
            name,
            vaddr: header.sh_addr,
            size: header.sh_size,
            flags: Perms::from_section_flags(header.sh_flags),
            file_offset: header.sh_offset,
        });
    }

    Ok(ElfImage {
        raw: raw.to_vec(),
        entry_point,
        program_headers,
        section_headers,
        sections,
        source_name: source_name.to_string(),
    })
}

/// One mapped region of the loaded image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapEntry {
    pub start_vaddr: u64,
    pub end_vaddr: u64,
    pub permissions: Perms,
    pub backing: String,
}

/// Sorted, non-overlapping view of the loadable segments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryMap {
    pub entries: Vec<MapEntry>,
}

pub fn build_memory_map(img: &ElfImage, base_vaddr: u64) -> Result<MemoryMap, ElfError> {
    let mut entries = Vec::new();
    for header in &img.program_headers {
        if header.p_type != PT_LOAD || header.p_memsz == 0 {
            continue;
        }
        let start = header
            .p_vaddr
            .checked_add(base_vaddr)
            .ok_or(ElfError::OutOfBoundsOffset("rebased segment start"))?;
        let end = start
            .checked_add(header.p_memsz)
            .ok_or(ElfError::OutOfBoundsOffset("rebased segment end"))?;
        entries.push(MapEntry {
            start_vaddr: start,
            end_vaddr: end,
            permissions: Perms::from_phdr_flags(header.p_flags),
            backing: img.source_name.clone(),
        });
    }
    entries.sort_by_key(|e| e.start_vaddr);
    for pair in entries.windows(2) {
        if pair[1].start_vaddr < pair[0].end_vaddr {
            return Err(ElfError::OverlappingSegments);
        }
    }
    Ok(MemoryMap { entries })
}

fn section_bytes<'a>(img: &'a ElfImage, header: &RawSectionHeader) -> Result<&'a [u8], ElfError> {
    let start = usize::try_from(header.sh_offset)
        .map_err(|_| ElfError::OutOfBoundsOffset("section offset"))?;
    let len =
        usize::try_from(header.sh_size).map_err(|_| ElfError::OutOfBoundsOffset("section size"))?;
    let end = start
        .checked_add(len)
        .ok_or(ElfError::OutOfBoundsOffset("section end"))?;
    img.raw
        .get(start..end)
        .ok_or(ElfError::OutOfBoundsOffset("section contents"))
}

/// Symbols in table order, names resolved through the linked string table.
/// A missing symbol table (statically linked, stripped) yields an empty list.
pub fn extract_symbols(img: &ElfImage) -> Result<Vec<SymbolRecord>, ElfError> {
    let mut out = Vec::new();
    for header in &img.section_headers {
        if header.sh_type != SHT_SYMTAB {
            continue;
        }
        let table = section_bytes(img, header)?;
        let strtab = match img.section_headers.get(header.sh_link as usize) {
            Some(h) if h.sh_type == SHT_STRTAB => section_bytes(img, h)?,
            _ => return Err(ElfError::CorruptStringTable),
        };
        let count = table.len() / SYM_SIZE;
        for i in 0..count {
            let off = i * SYM_SIZE;
            let name_index = read_u32(table, off).unwrap();
            let section_index = read_u16(table, off + 6).unwrap();
            let value = read_u64(table, off + 8).unwrap();
            let size = read_u64(table, off + 16).unwrap();
            let name = strtab_name(strtab, name_index)?;
            if name.is_empty() && value == 0 && size == 0 {
                continue; // the reserved null symbol entry
            }
            out.push(SymbolRecord {
                name,
                value,
                size,
                section_index,
            });
        }
    }
    Ok(out)
}

/// Relocations from every SHT_RELA section, in table order.
pub fn extract_relocations(img: &ElfImage) -> Result<Vec<RelocationRecord>, ElfError> {
    let mut out = Vec::new();
    for header in &img.section_headers {
        if header.sh_type != SHT_RELA {
            continue;
        }
        let table = section_bytes(img, header)?;
        let count = table.len() / RELA_SIZE;
        for i in 0..count {
            let off = i * RELA_SIZE;
            let offset = read_u64(table, off).unwrap();
            let info = read_u64(table, off + 8).unwrap();
            let addend = read_u64(table, off + 16).unwrap() as i64;
            out.push(RelocationRecord {
                offset,
                symbol_index: (info >> 32) as u32,
                reloc_type: (info & 0xffff_ffff) as u32,
                addend,
            });
        }
    }
    Ok(out)
}

/// SHA-256 of the `.text` file bytes.
pub fn text_section_hash(img: &ElfImage) -> Result<[u8; 32], ElfError> {
    for (record, header) in img
        .sections
        .iter()
        .zip(img.section_headers.iter().filter(|h| h.sh_type != 0))
    {
        if record.name == ".text" {
            return Ok(sha256(section_bytes(img, header)?));
        }
    }
    Err(ElfError::MissingTextSection)
}

/// `digest = H(symbols_hash || segments_hash || syscall_graph_hash)` over
/// canonical encodings; the three component hashes are kept for diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersistentReference {
    pub digest: [u8; 32],
    pub symbols_hash: [u8; 32],
    pub segments_hash: [u8; 32],
    pub syscall_graph_hash: [u8; 32],
}

impl PersistentReference {
    pub fn hex(&self) -> String {
        hex::encode(self.digest)
    }
}

/// Canonical symbol encoding: u32-LE count, then records sorted by
/// (value, name), each `u32-LE name-len || name || u64-LE value ||
/// u64-LE size || u16-LE section-index`.
pub fn symbols_canonical_bytes(symbols: &[SymbolRecord]) -> Vec<u8> {
    let mut sorted: Vec<&SymbolRecord> = symbols.iter().collect();
    sorted.sort_by(|a, b| (a.value, &a.name).cmp(&(b.value, &b.name)));
    let mut out = Vec::new();
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for s in sorted {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&s.value.to_le_bytes());
        out.extend_from_slice(&s.size.to_le_bytes());
        out.extend_from_slice(&s.section_index.to_le_bytes());
    }
    out
}

/// Canonical map encoding: u32-LE count, entries in address order, each
/// `u64-LE start || u64-LE end || perm-byte || u32-LE backing-len || backing`.
pub fn segments_canonical_bytes(map: &MemoryMap) -> Vec<u8> {
    let mut entries: Vec<&MapEntry> = map.entries.iter().collect();
    entries.sort_by_key(|e| (e.start_vaddr, e.end_vaddr));
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&e.start_vaddr.to_le_bytes());
        out.extend_from_slice(&e.end_vaddr.to_le_bytes());
        out.push(e.permissions.bits());
        out.extend_from_slice(&(e.backing.len() as u32).to_le_bytes());
        out.extend_from_slice(e.backing.as_bytes());
    }
    out
}

pub fn persistent_reference(
    symbols: &[SymbolRecord],
    segments: &MemoryMap,
    graph: &SysCallGraph,
) -> PersistentReference {
    let symbols_hash = sha256(&symbols_canonical_bytes(symbols));
    let segments_hash = sha256(&segments_canonical_bytes(segments));
    let syscall_graph_hash = sha256(&graph.canonical_bytes());
    let mut buf = Vec::with_capacity(96);
    buf.extend_from_slice(&symbols_hash);
    buf.extend_from_slice(&segments_hash);
    buf.extend_from_slice(&syscall_graph_hash);
    PersistentReference {
        digest: sha256(&buf),
        symbols_hash,
        segments_hash,
        syscall_graph_hash,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;

    const TEXT_FIXTURE: &str = "\
section .text 0x401000 0x20 r-x 554889e54883ec10c745fc00000000b8000000004883c4105dc3cccccccccccc
";

    #[test]
    fn parse_single_text_fixture() {
        let elf = fixture::generate_elf(&fixture::parse_description(TEXT_FIXTURE).unwrap());
        let img = parse_elf(&elf, "fixture.elf").unwrap();
        let text: Vec<_> = img.sections.iter().filter(|s| s.name == ".text").collect();
        assert_eq!(text.len(), 1);
        assert_eq!(text[0].vaddr, 0x401000);
        assert_eq!(text[0].size, 0x20);
        assert!(text[0].flags.execute);
        assert!(!text[0].flags.write);
        assert_eq!(img.entry_point, 0x401000);
    }

    #[test]
    fn zero_bytes_is_bad_magic() {
        assert_eq!(parse_elf(&[0u8; 64], "z").unwrap_err(), ElfError::BadMagic);
    }

    #[test]
    fn short_input_is_truncated() {
        let mut bytes = vec![0u8; 20];
        bytes[..4].copy_from_slice(&ELF_MAGIC);
        assert_eq!(
            parse_elf(&bytes, "t").unwrap_err(),
            ElfError::TruncatedHeader("file shorter than ELF64 header")
        );
    }

    #[test]
    fn elf32_rejected() {
        let elf = fixture::generate_elf(&fixture::parse_description(TEXT_FIXTURE).unwrap());
        let mut bytes = elf.clone();
        bytes[4] = 1; // EI_CLASS = 32-bit
        assert_eq!(
            parse_elf(&bytes, "c").unwrap_err(),
            ElfError::UnsupportedClass
        );
        let mut big = elf;
        big[5] = 2; // EI_DATA = big-endian
        assert_eq!(
            parse_elf(&big, "b").unwrap_err(),
            ElfError::UnsupportedClass
        );
    }

    #[test]
    fn section_offset_past_eof_rejected() {
        let elf = fixture::generate_elf(&fixture::parse_description(TEXT_FIXTURE).unwrap());
        let shoff = u64::from_le_bytes(elf[40..48].try_into().unwrap()) as usize;
        let mut bytes = elf;
        // sh_offset of section 1 (after the null section) -> absurd value
        let victim = shoff + SHDR_SIZE + 24;
        bytes[victim..victim + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            parse_elf(&bytes, "o").unwrap_err(),
            ElfError::OutOfBoundsOffset(_)
        ));
    }

    #[test]
    fn memory_map_two_segments() {
        let desc = "\
section .text 0x401000 0x1000 r-x 90
section .data 0x402000 0x1000 rw- 00
";
        let elf = fixture::generate_elf(&fixture::parse_description(desc).unwrap());
        let img = parse_elf(&elf, "two.elf").unwrap();
        let map = build_memory_map(&img, 0).unwrap();
        assert_eq!(map.entries.len(), 2);
        assert_eq!(map.entries[0].start_vaddr, 0x401000);
        assert_eq!(map.entries[0].end_vaddr, 0x402000);
        assert_eq!(map.entries[0].permissions.render(), "r-x");
        assert_eq!(map.entries[1].start_vaddr, 0x402000);
        assert_eq!(map.entries[1].permissions.render(), "rw-");
        assert_eq!(map.entries[0].backing, "two.elf");

        // Rebasing shifts every entry, preserving order.
        let shifted = build_memory_map(&img, 0x10000).unwrap();
        assert_eq!(shifted.entries[0].start_vaddr, 0x411000);
        assert_eq!(shifted.entries[1].start_vaddr, 0x412000);
    }

    #[test]
    fn memory_map_detects_overlap() {
        let desc = "\
section .a 0x401000 0x2000 r-x 90
section .b 0x402000 0x1000 rw- 00
";
        let elf = fixture::generate_elf(&fixture::parse_description(desc).unwrap());
        let img = parse_elf(&elf, "overlap.elf").unwrap();
        assert_eq!(
            build_memory_map(&img, 0).unwrap_err(),
            ElfError::OverlappingSegments
        );
    }

    #[test]
    fn memory_map_empty_when_no_loadable() {
        let img = ElfImage {
            raw: Vec::new(),
            entry_point: 0,
            program_headers: Vec::new(),
            section_headers: Vec::new(),
            sections: Vec::new(),
            source_name: "none".into(),
        };
        assert!(build_memory_map(&img, 0).unwrap().entries.is_empty());
    }

    #[test]
    fn symbols_extracted_in_table_order() {
        let desc = "\
section .text 0x401000 0x20 r-x 9090909090909090909090909090909090909090909090909090909090909090
symbol main 0x401000 0x10 .text
symbol helper 0x401010 0x10 .text
";
        let elf = fixture::generate_elf(&fixture::parse_description(desc).unwrap());
        let img = parse_elf(&elf, "syms.elf").unwrap();
        let symbols = extract_symbols(&img).unwrap();
        assert_eq!(symbols.len(), 2);
        assert_eq!(symbols[0].name, "main");
        assert_eq!(symbols[0].value, 0x401000);
        assert_eq!(symbols[0].size, 0x10);
        assert_eq!(symbols[1].name, "helper");
        assert_eq!(symbols[1].value, 0x401010);
    }

    #[test]
    fn stripped_binary_yields_empty_tables() {
        let elf = fixture::generate_elf(&fixture::parse_description(TEXT_FIXTURE).unwrap());
        let img = parse_elf(&elf, "stripped.elf").unwrap();
        assert!(extract_symbols(&img).unwrap().is_empty());
        assert!(extract_relocations(&img).unwrap().is_empty());
    }

    #[test]
    fn string_table_overflow_detected() {
        let desc = "\
section .text 0x401000 0x10 r-x 90909090909090909090909090909090
symbol main 0x401000 0x10 .text
";
        let elf = fixture::generate_elf(&fixture::parse_description(desc).unwrap());
        let img = parse_elf(&elf, "bad.elf").unwrap();
        // Corrupt the symbol's name index past the string table end.
        let mut raw = img.raw.clone();
        let symtab = img
            .section_headers
            .iter()
            .find(|h| h.sh_type == SHT_SYMTAB)
            .expect("fixture has a symtab");
        let sym_off = symtab.sh_offset as usize + SYM_SIZE; // entry 1 (0 is the null symbol)
        raw[sym_off..sym_off + 4].copy_from_slice(&0xffff_0000u32.to_le_bytes());
        let img = parse_elf(&raw, "bad.elf").unwrap();
        assert_eq!(
            extract_symbols(&img).unwrap_err(),
            ElfError::CorruptStringTable
        );
    }

    #[test]
    fn text_hash_tracks_content() {
        let elf = fixture::generate_elf(&fixture::parse_description(TEXT_FIXTURE).unwrap());
        let img = parse_elf(&elf, "h.elf").unwrap();
        let expected = sha256(
            &hex::decode("554889e54883ec10c745fc00000000b8000000004883c4105dc3cccccccccccc")
                .unwrap(),
        );
        assert_eq!(text_section_hash(&img).unwrap(), expected);

        let other = TEXT_FIXTURE.replace("554889e5", "554889e6");
        let elf2 = fixture::generate_elf(&fixture::parse_description(&other).unwrap());
        let img2 = parse_elf(&elf2, "h2.elf").unwrap();
        assert_ne!(text_section_hash(&img2).unwrap(), expected);

        let no_text = "section .data 0x402000 0x8 rw- 0011223344556677\n";
        let elf3 = fixture::generate_elf(&fixture::parse_description(no_text).unwrap());
        let img3 = parse_elf(&elf3, "h3.elf").unwrap();
        assert_eq!(
            text_section_hash(&img3).unwrap_err(),
            ElfError::MissingTextSection
        );
    }

    #[test]
    fn reference_is_permutation_invariant_and_mutation_sensitive() {
        let a = SymbolRecord {
            name: "a".into(),
            value: 1,
            size: 0,
            section_index: 1,
        };
        let b = SymbolRecord {
            name: "b".into(),
            value: 2,
            size: 0,
            section_index: 1,
        };
        let map = MemoryMap {
            entries: vec![MapEntry {
                start_vaddr: 0x1000,
                end_vaddr: 0x2000,
                permissions: Perms {
                    read: true,
                    write: false,
                    execute: true,
                },
                backing: "x".into(),
            }],
        };
        let mut graph = SysCallGraph::new();
        graph.insert_edge("open", "read");

        let r1 = persistent_reference(&[a.clone(), b.clone()], &map, &graph);
        let r2 = persistent_reference(&[b.clone(), a.clone()], &map, &graph);
        assert_eq!(r1, r2);

        let renamed = SymbolRecord {
            name: "c".into(),
            ..a
        };
        let r3 = persistent_reference(&[renamed, b], &map, &graph);
        assert_ne!(r1.digest, r3.digest);
    }

    #[test]
    fn reference_empty_inputs_pinned() {
        // Regression constant computed with an independent hash oracle over
        // the canonical encodings (4 zero bytes, 4 zero bytes, 8 zero bytes).
        let r = persistent_reference(&[], &MemoryMap::default(), &SysCallGraph::new());
        assert_eq!(
            hex::encode(r.digest),
            "0cb2ccb72ba9e1fb4047dd7acb1a15fa8c8bbca750855e18552463ac47854cba"
        );
        assert_eq!(
            hex::encode(r.symbols_hash),
            "df3f619804a92fdb4057192dc43dd748ea778adc52bc498ce80524c014b81119"
        );
        assert_eq!(
            hex::encode(r.syscall_graph_hash),
            "af5570f5a1810b7af78caf4bc70a660f0df51e42baf91d4de5b2328de0e83dfc"
        );
    }
}
