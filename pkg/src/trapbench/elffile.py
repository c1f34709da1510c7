"""Minimal ELF64 reader: headers, program headers, and symbol tables.

Only the pieces the toolkit needs: entry point, PT_LOAD segments (to map
virtual addresses to file offsets), and .symtab/.strtab for symbol lookup.
Little-endian x86-64 objects only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import SymbolError

PT_LOAD = 1
SHT_SYMTAB = 2
SHN_UNDEF = 0

_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")
_SHDR = struct.Struct("<IIQQQQIIQQ")
_SYM = struct.Struct("<IBBHQQ")


@dataclass(frozen=True)
class Segment:
    vaddr: int
    offset: int
    filesz: int
    memsz: int
    flags: int


@dataclass(frozen=True)
class Symbol:
    name: str
    value: int
    size: int
    info: int
    shndx: int

    @property
    def defined(self) -> bool:
        return self.shndx != SHN_UNDEF

    @property
    def bind(self) -> int:
        return self.info >> 4


class ElfFile:
    """Parsed view of an on-disk ELF64 executable."""

    def __init__(self, path: str):
        self.path = path
        with open(path, "rb") as f:
            self._data = f.read()
        if self._data[:4] != b"\x7fELF" or self._data[4] != 2:
            raise SymbolError(f"{path}: not a 64-bit ELF file")
        (_, self.etype, self.machine, _, self.entry, phoff, shoff, _,
         _, phentsize, phnum, shentsize, shnum, shstrndx) = _EHDR.unpack_from(self._data, 0)
        self.segments = [
            Segment(p[3], p[2], p[5], p[6], p[1])
            for p in (_PHDR.unpack_from(self._data, phoff + i * phentsize)
                      for i in range(phnum))
            if p[0] == PT_LOAD
        ]
        self._sections = [
            _SHDR.unpack_from(self._data, shoff + i * shentsize)
            for i in range(shnum)
        ]

    def vaddr_to_offset(self, vaddr: int) -> int:
        """File offset backing a virtual address, via PT_LOAD segments."""
        for seg in self.segments:
            if seg.vaddr <= vaddr < seg.vaddr + seg.filesz:
                return seg.offset + (vaddr - seg.vaddr)
        raise SymbolError(f"vaddr {vaddr:#x} not backed by any PT_LOAD segment")

    def bytes_at_vaddr(self, vaddr: int, length: int) -> bytes:
        off = self.vaddr_to_offset(vaddr)
        return self._data[off:off + length]

    def min_load_vaddr(self) -> int:
        if not self.segments:
            raise SymbolError(f"{self.path}: no PT_LOAD segments")
        return min(seg.vaddr for seg in self.segments)

    def symbols(self) -> list[Symbol]:
        """All symbols from every SHT_SYMTAB section, file order."""
        out: list[Symbol] = []
        for sh in self._sections:
            sh_type, link, offset, size, entsize = sh[1], sh[6], sh[4], sh[5], sh[9]
            if sh_type != SHT_SYMTAB or entsize == 0:
                continue
            strtab = self._sections[link]
            str_off, str_size = strtab[4], strtab[5]
            names = self._data[str_off:str_off + str_size]
            for i in range(size // entsize):
                name_off, info, _, shndx, value, sym_size = _SYM.unpack_from(
                    self._data, offset + i * entsize)
                end = names.find(b"\x00", name_off)
                name = names[name_off:end].decode("latin-1")
                out.append(Symbol(name, value, sym_size, info, shndx))
        return out

    def lookup(self, name: str) -> Symbol:
        """First defined symbol with this name; undefined imports are skipped."""
        found = None
        for sym in self.symbols():
            if sym.name == name and sym.defined:
                found = sym
                break
        if found is None:
            raise SymbolError(f"{self.path}: no defined symbol {name!r}")
        return found
