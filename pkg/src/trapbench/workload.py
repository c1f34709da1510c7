"""Synthetic x86-64 workload generator with exact-by-construction event counts.

Emits minimal static executables (fixed base, no relocation, no libc) whose
dynamic instruction count between `main` and `prog_exit` and whose per-address
execution/access frequencies are known exactly.  Each program prints a 16-digit
hex checksum of its work plus a newline and exits 0, so instrumented runs can
be diffed byte-for-byte against native runs.

Layout (all addresses fixed):
  0x401000  code page 0: main, memory loops, filler, checksum, exit
  0x402000  code page 1: the hot execution loop, isolated so that
            execute-permission page traps fault only 3 times per iteration
  0x403000  data page A: hex digit table + output buffer
  0x404000  data page B: hot_cell (+0), second_cell (+256),
            strided landing area (+2048 .. +4096)

The hot instruction is a 5-byte `add eax, imm32`: straight-line, no
pc-relative operand, so it is always eligible for probe injection.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from .errors import ParamError, UnknownTarget
from . import primitives as prim

BASE = 0x400000
CODE0 = 0x401000
HOT_PAGE = 0x402000
DATA_A = 0x403000
DATA_B = 0x404000
PAGE = 0x1000

HOT_CELL_OFF = 0
SECOND_CELL_OFF = 256
STRIDE_REGION_OFF = 2048
STRIDE_STEP = 64
STRIDE_SLOTS = 2048 // STRIDE_STEP

GOLDEN = 0x9E3779B9
GOLDEN2 = 0x85EBCA6B

PATTERNS = ("tight-loop", "strided", "two-cells-one-page")

_FILLER_BODY = 7            # nops per filler iteration (plus dec + jnz)

# register numbers for encoding
RAX, RCX, RDX, RBX, RSP, RBP, RSI, RDI = range(8)

_MAX_IMM32 = (1 << 31) - 1


@dataclass
class WorkloadParams:
    """Event frequencies and total window length of a generated workload.

    total_instr is the exact number of dynamic instructions executed from
    `main` (inclusive) up to `prog_exit` (exclusive).  k_exec is how often
    the hot instruction runs; k_read/k_write count 4-byte accesses to the
    hot data cell.  k_second accesses the second cell (two-cells-one-page
    pattern).  The strided pattern adds k_read extra reads walking the
    upper half of the hot data page in 64-byte steps.
    """

    total_instr: int
    k_exec: int = 0
    k_read: int = 0
    k_write: int = 0
    k_second: int = 0
    pattern: str = "tight-loop"


@dataclass
class MemSite:
    """One statically-known data access site: addr/width plus exact counts."""

    addr: int
    width: int
    reads: int
    writes: int


@dataclass
class WorkloadMetadata:
    entry_addr: int
    main_addr: int
    exit_addr: int
    hot_insn_addr: int
    hot_cell_addr: int
    second_cell_addr: int | None
    params: WorkloadParams
    # (addr, length, class) for every emitted instruction, address order
    encoding_table: list[tuple[int, int, str]] = field(default_factory=list)
    # exact dynamic execution count per instruction inside the main->exit window
    window_counts: dict[int, int] = field(default_factory=dict)
    mem_sites: list[MemSite] = field(default_factory=list)

    @property
    def total_instr(self) -> int:
        return self.params.total_instr

    def hot_page(self) -> int:
        return self.hot_insn_addr & ~(PAGE - 1)

    def to_json(self) -> str:
        d = {
            "entry_addr": self.entry_addr,
            "main_addr": self.main_addr,
            "exit_addr": self.exit_addr,
            "hot_insn_addr": self.hot_insn_addr,
            "hot_cell_addr": self.hot_cell_addr,
            "second_cell_addr": self.second_cell_addr,
            "params": vars(self.params),
            "encoding_table": self.encoding_table,
            "window_counts": {str(k): v for k, v in self.window_counts.items()},
            "mem_sites": [vars(s) for s in self.mem_sites],
        }
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "WorkloadMetadata":
        d = json.loads(text)
        return cls(
            entry_addr=d["entry_addr"],
            main_addr=d["main_addr"],
            exit_addr=d["exit_addr"],
            hot_insn_addr=d["hot_insn_addr"],
            hot_cell_addr=d["hot_cell_addr"],
            second_cell_addr=d["second_cell_addr"],
            params=WorkloadParams(**d["params"]),
            encoding_table=[tuple(e) for e in d["encoding_table"]],
            window_counts={int(k): v for k, v in d["window_counts"].items()},
            mem_sites=[MemSite(**s) for s in d["mem_sites"]],
        )


class Assembler:
    """Single-pass emitter with label fixups; all jumps use rel32 forms.

    Every instruction records its class and its dynamic execution count
    inside the measurement window, so analytic totals need no hand algebra.
    """

    def __init__(self, org: int):
        self.org = org
        self.buf = bytearray()
        self.insns: list[tuple[int, int, str, int]] = []  # addr, len, cls, count
        self.labels: dict[str, int] = {}
        self.fixups: list[tuple[int, str]] = []  # patch site (4 bytes), label

    @property
    def pc(self) -> int:
        return self.org + len(self.buf)

    def label(self, name: str) -> int:
        self.labels[name] = self.pc
        return self.pc

    def _emit(self, bs: bytes, cls: str, count: int) -> int:
        addr = self.pc
        self.insns.append((addr, len(bs), cls, count))
        self.buf += bs
        return addr

    # -- vocabulary ---------------------------------------------------------

    def mov_ri(self, reg: int, imm: int, count: int) -> int:
        return self._emit(bytes([0xB8 + reg]) + struct.pack("<I", imm & 0xFFFFFFFF), "mov", count)

    def add_eax_imm(self, imm: int, count: int) -> int:
        return self._emit(b"\x05" + struct.pack("<I", imm & 0xFFFFFFFF), "alu", count)

    def add_ri(self, reg: int, imm: int, count: int) -> int:
        return self._emit(bytes([0x81, 0xC0 + reg]) + struct.pack("<I", imm & 0xFFFFFFFF), "alu", count)

    def add_ri8(self, reg: int, imm: int, count: int) -> int:
        return self._emit(bytes([0x83, 0xC0 + reg, imm & 0xFF]), "alu", count)

    def and_ri(self, reg: int, imm: int, count: int) -> int:
        return self._emit(bytes([0x81, 0xE0 + reg]) + struct.pack("<I", imm & 0xFFFFFFFF), "alu", count)

    def xor_rr(self, dst: int, src: int, count: int) -> int:
        return self._emit(bytes([0x31, 0xC0 | (src << 3) | dst]), "alu", count)

    def add_rr(self, dst: int, src: int, count: int) -> int:
        return self._emit(bytes([0x01, 0xC0 | (src << 3) | dst]), "alu", count)

    def add_rr64(self, dst: int, src: int, count: int) -> int:
        return self._emit(bytes([0x48, 0x01, 0xC0 | (src << 3) | dst]), "alu", count)

    def mov_rr(self, dst: int, src: int, count: int) -> int:
        return self._emit(bytes([0x89, 0xC0 | (src << 3) | dst]), "mov", count)

    def rol_rax64(self, imm8: int, count: int) -> int:
        return self._emit(bytes([0x48, 0xC1, 0xC0, imm8]), "alu", count)

    def test_rr64(self, reg: int, count: int) -> int:
        return self._emit(bytes([0x48, 0x85, 0xC0 | (reg << 3) | reg]), "alu", count)

    def dec_r64(self, reg: int, count: int) -> int:
        return self._emit(bytes([0x48, 0xFF, 0xC8 + reg]), "alu", count)

    def load_abs(self, reg: int, addr: int, count: int) -> int:
        # mov r32, [abs32]  (ModRM 00 reg 100 + SIB 00 100 101)
        return self._emit(bytes([0x8B, 0x04 | (reg << 3), 0x25]) + struct.pack("<I", addr), "load", count)

    def store_abs(self, addr: int, reg: int, count: int) -> int:
        return self._emit(bytes([0x89, 0x04 | (reg << 3), 0x25]) + struct.pack("<I", addr), "store", count)

    def load_bx_disp(self, reg: int, disp: int, count: int) -> int:
        # mov r32, [rbx + disp32]
        return self._emit(bytes([0x8B, 0x83 | (reg << 3)]) + struct.pack("<i", disp), "load", count)

    def load_cl_bx_disp(self, disp: int, count: int) -> int:
        # mov cl, [rbx + disp32]
        return self._emit(bytes([0x8A, 0x8B]) + struct.pack("<i", disp), "load", count)

    def store_abs_cl(self, addr: int, count: int) -> int:
        # mov [abs32], cl
        return self._emit(bytes([0x88, 0x0C, 0x25]) + struct.pack("<I", addr), "store", count)

    def store_abs_imm8(self, addr: int, imm8: int, count: int) -> int:
        # mov byte [abs32], imm8
        return self._emit(bytes([0xC6, 0x04, 0x25]) + struct.pack("<I", addr) + bytes([imm8]), "store", count)

    def nop(self, count: int) -> int:
        return self._emit(b"\x90", "nop", count)

    def syscall(self, count: int) -> int:
        return self._emit(b"\x0f\x05", "syscall", count)

    def _jump(self, opcode: bytes, target: str, cls: str, count: int) -> int:
        addr = self._emit(opcode + b"\x00\x00\x00\x00", cls, count)
        self.fixups.append((addr + len(opcode) - self.org, target))
        return addr

    def jmp(self, target: str, count: int) -> int:
        return self._jump(b"\xE9", target, "branch", count)

    def jz(self, target: str, count: int) -> int:
        return self._jump(b"\x0F\x84", target, "branch", count)

    def jnz(self, target: str, count: int) -> int:
        return self._jump(b"\x0F\x85", target, "branch", count)

    def resolve(self, external: dict[str, int] | None = None) -> bytes:
        names = dict(self.labels)
        if external:
            names.update(external)
        for off, target in self.fixups:
            rel = names[target] - (self.org + off + 4)
            self.buf[off:off + 4] = struct.pack("<i", rel)
        return bytes(self.buf)


def _counted_loop(a: Assembler, name: str, k: int, body, in_window: bool = True) -> None:
    """mov ecx,k ; test ; jz end ; body ; dec ; jnz — exact count 3 + (b+2)k."""
    one = 1 if in_window else 0
    per = k if in_window else 0
    a.mov_ri(RCX, k, one)
    a.test_rr64(RCX, one)
    a.jz(f"{name}_end", one)
    a.label(f"{name}_loop")
    body(per)
    a.dec_r64(RCX, per)
    a.jnz(f"{name}_loop", per)
    a.label(f"{name}_end")


# --- ELF64 writer -----------------------------------------------------------

ELF_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
ELF_PHDR = struct.Struct("<IIQQQQQQ")
ELF_SHDR = struct.Struct("<IIQQQQIIQQ")
ELF_SYM = struct.Struct("<IBBHQQ")

STT_FUNC, STT_OBJECT = 2, 1
STB_GLOBAL = 1


def build_elf(text_image: bytes, data_image: bytes, entry: int,
              symbols: list[tuple[str, int, bool]]) -> bytes:
    """Assemble a two-segment static ELF64 with a symbol table.

    text_image is loaded at CODE0 (r-x), data_image at DATA_A (rw-).
    symbols are (name, vaddr, is_code) triples, all STB_GLOBAL.
    """
    text_sz = (len(text_image) + PAGE - 1) & ~(PAGE - 1)
    data_sz = (len(data_image) + PAGE - 1) & ~(PAGE - 1)
    off_text, off_data = PAGE, PAGE + text_sz
    off_tables = off_data + data_sz

    strtab = bytearray(b"\x00")
    syms = bytearray(ELF_SYM.size)  # null symbol
    for name, vaddr, is_code in symbols:
        name_off = len(strtab)
        strtab += name.encode() + b"\x00"
        info = (STB_GLOBAL << 4) | (STT_FUNC if is_code else STT_OBJECT)
        shndx = 1 if is_code else 2
        syms += ELF_SYM.pack(name_off, info, 0, shndx, vaddr, 0)

    shstrtab = b"\x00.text\x00.data\x00.symtab\x00.strtab\x00.shstrtab\x00"
    n_text, n_data, n_symtab, n_strtab, n_shstr = 1, 7, 13, 21, 29

    off_symtab = off_tables
    off_strtab = off_symtab + len(syms)
    off_shstr = off_strtab + len(strtab)
    off_shdrs = (off_shstr + len(shstrtab) + 7) & ~7

    shdrs = b"".join([
        ELF_SHDR.pack(0, 0, 0, 0, 0, 0, 0, 0, 0, 0),
        ELF_SHDR.pack(n_text, 1, 6, CODE0, off_text, text_sz, 0, 0, PAGE, 0),
        ELF_SHDR.pack(n_data, 1, 3, DATA_A, off_data, data_sz, 0, 0, PAGE, 0),
        ELF_SHDR.pack(n_symtab, 2, 0, 0, off_symtab, len(syms), 4, 1, 8, ELF_SYM.size),
        ELF_SHDR.pack(n_strtab, 3, 0, 0, off_strtab, len(strtab), 0, 0, 1, 0),
        ELF_SHDR.pack(n_shstr, 3, 0, 0, off_shstr, len(shstrtab), 0, 0, 1, 0),
    ])

    ehdr = ELF_EHDR.pack(
        b"\x7fELF\x02\x01\x01" + b"\x00" * 9,
        2, 0x3E, 1, entry,
        ELF_EHDR.size, off_shdrs, 0,
        ELF_EHDR.size, ELF_PHDR.size, 2,
        ELF_SHDR.size, 6, 5)
    phdrs = (
        ELF_PHDR.pack(1, 5, off_text, CODE0, CODE0, text_sz, text_sz, PAGE) +
        ELF_PHDR.pack(1, 6, off_data, DATA_A, DATA_A, data_sz, data_sz, PAGE))

    img = bytearray(off_shdrs + len(shdrs))
    img[0:len(ehdr)] = ehdr
    img[ELF_EHDR.size:ELF_EHDR.size + len(phdrs)] = phdrs
    img[off_text:off_text + len(text_image)] = text_image
    img[off_data:off_data + len(data_image)] = data_image
    img[off_symtab:off_symtab + len(syms)] = syms
    img[off_strtab:off_strtab + len(strtab)] = strtab
    img[off_shstr:off_shstr + len(shstrtab)] = shstrtab
    img[off_shdrs:] = shdrs
    return bytes(img)


# --- the generator ----------------------------------------------------------

def _strided_slot_counts(k: int) -> dict[int, int]:
    """Exact hit count per strided slot offset for k strided accesses.

    The offset register starts at 0; each access uses
    off = (prev + 64) & 0x7ff, so access i (1-based) lands on slot
    (i mod 32) * 64, where slot index 0 corresponds to offset 0.
    """
    counts: dict[int, int] = {}
    full, rem = divmod(k, STRIDE_SLOTS)
    for m in range(STRIDE_SLOTS):
        slot = (m + 1) % STRIDE_SLOTS
        hits = full + (1 if m < rem else 0)
        off = STRIDE_REGION_OFF + slot * STRIDE_STEP
        if hits:
            counts[off] = counts.get(off, 0) + hits
    return counts


def _assemble(p: WorkloadParams, filler_iters: int, filler_rem: int):
    hot_cell = DATA_B + HOT_CELL_OFF
    second_cell = DATA_B + SECOND_CELL_OFF
    hexdigits = DATA_A + 0
    outbuf = DATA_A + 16

    a = Assembler(CODE0)
    h = Assembler(HOT_PAGE)

    a.label("_start")
    for reg in (RAX, RBX, RCX, RDX, RSI, RDI, RBP):
        a.xor_rr(reg, reg, 0)           # outside window
    main = a.label("main")
    a.jmp("hot_entry", 1)
    a.label("back_from_hot")

    _counted_loop(a, "read", p.k_read,
                  lambda c: (a.load_abs(RBX, hot_cell, c), a.add_rr(RSI, RBX, c)))
    _counted_loop(a, "write", p.k_write,
                  lambda c: (a.add_ri(RDI, GOLDEN, c), a.store_abs(hot_cell, RDI, c)))
    if p.pattern == "two-cells-one-page":
        _counted_loop(a, "second", p.k_second,
                      lambda c: (a.add_ri(RDI, GOLDEN2, c), a.store_abs(second_cell, RDI, c)))
    if p.pattern == "strided":
        a.xor_rr(RBX, RBX, 1)
        _counted_loop(a, "stride", p.k_read,
                      lambda c: (a.add_ri8(RBX, STRIDE_STEP, c),
                                 a.and_ri(RBX, 0x7FF, c),
                                 a.load_bx_disp(RDX, DATA_B + STRIDE_REGION_OFF, c),
                                 a.add_rr(RSI, RDX, c)))

    # Wide filler body keeps branch density low, which matters when the
    # window is driven by a single-step plan (branches cost a register read).
    _counted_loop(a, "filler", filler_iters,
                  lambda c: [a.nop(c) for _ in range(_FILLER_BODY)])
    for _ in range(filler_rem):
        a.nop(1)

    # digest: fold work registers into rax, then hexify
    a.rol_rax64(13, 1)
    a.add_rr64(RAX, RSI, 1)
    a.rol_rax64(13, 1)
    a.add_rr64(RAX, RDI, 1)
    for i in range(16):
        a.rol_rax64(4, 1)
        a.mov_rr(RBX, RAX, 1)
        a.and_ri(RBX, 0xF, 1)
        a.load_cl_bx_disp(hexdigits, 1)
        a.store_abs_cl(outbuf + i, 1)
    a.store_abs_imm8(outbuf + 16, ord("\n"), 1)
    a.mov_ri(RAX, 1, 1)                 # write(1, outbuf, 17)
    a.mov_ri(RDI, 1, 1)
    a.mov_ri(RSI, outbuf, 1)
    a.mov_ri(RDX, 17, 1)
    a.syscall(1)
    prog_exit = a.label("prog_exit")    # window ends here (exclusive)
    a.mov_ri(RAX, 60, 0)
    a.mov_ri(RDI, 0, 0)
    a.syscall(0)

    h.label("hot_entry")
    h.mov_ri(RCX, p.k_exec, 1)
    h.test_rr64(RCX, 1)
    h.jz("hot_exit", 1)
    h.label("hot_loop")
    hot_insn = h.add_eax_imm(GOLDEN, p.k_exec)
    h.dec_r64(RCX, p.k_exec)
    h.jnz("hot_loop", p.k_exec)
    h.label("hot_exit")
    h.jmp("back_from_hot", 1)

    code0 = a.resolve(external=h.labels)
    hot = h.resolve(external=a.labels)
    if len(code0) > PAGE or len(hot) > PAGE:
        raise ParamError("generated code exceeds its page")
    return a, h, code0, hot, main, prog_exit, hot_insn


def emit_workload(p: WorkloadParams) -> tuple[bytes, WorkloadMetadata]:
    if p.pattern not in PATTERNS:
        raise ParamError(f"unknown pattern {p.pattern!r}")
    for name in ("k_exec", "k_read", "k_write", "k_second", "total_instr"):
        v = getattr(p, name)
        if not isinstance(v, int) or v < 0:
            raise ParamError(f"{name} must be a non-negative integer")
        if name != "total_instr" and v > _MAX_IMM32:
            raise ParamError(f"{name} exceeds the 31-bit loop counter limit")
    if p.k_second and p.pattern != "two-cells-one-page":
        raise ParamError("k_second requires the two-cells-one-page pattern")

    # First pass with zero filler to learn the fixed window cost.
    a, h, *_ = _assemble(p, 0, 0)
    base_count = sum(c for *_x, c in a.insns) + sum(c for *_x, c in h.insns)
    need = p.total_instr - base_count
    if need < 0:
        raise ParamError(
            f"total_instr={p.total_instr} below the minimum {base_count} "
            f"for these event counts")
    filler_iters, filler_rem = divmod(need, _FILLER_BODY + 2)
    if filler_iters > _MAX_IMM32:
        raise ParamError("total_instr exceeds the filler loop capacity")

    a, h, code0, hot, main, prog_exit, hot_insn = _assemble(p, filler_iters, filler_rem)
    window = sum(c for *_x, c in a.insns) + sum(c for *_x, c in h.insns)
    assert window == p.total_instr, (window, p.total_instr)

    text_image = bytearray(2 * PAGE)
    text_image[:len(code0)] = code0
    text_image[PAGE:PAGE + len(hot)] = hot

    data_image = bytearray(2 * PAGE)
    data_image[0:16] = b"0123456789abcdef"
    hot_init = 0xDEADBEEF
    data_image[PAGE + HOT_CELL_OFF:PAGE + HOT_CELL_OFF + 8] = struct.pack("<Q", hot_init)
    for j in range(STRIDE_SLOTS):
        off = PAGE + STRIDE_REGION_OFF + j * STRIDE_STEP
        data_image[off:off + 4] = struct.pack("<I", (GOLDEN * (j + 1)) & 0xFFFFFFFF)

    hot_cell = DATA_B + HOT_CELL_OFF
    second_cell = DATA_B + SECOND_CELL_OFF if p.pattern == "two-cells-one-page" else None

    symbols = [
        ("_start", CODE0, True),
        ("main", main, True),
        ("hot_insn", hot_insn, True),
        ("prog_exit", prog_exit, True),
        ("hot_cell", hot_cell, False),
    ]
    if second_cell is not None:
        symbols.append(("second_cell", second_cell, False))
    image = build_elf(bytes(text_image), bytes(data_image), CODE0, symbols)

    table = sorted(
        [(addr, ln, cls) for addr, ln, cls, _ in a.insns + h.insns])
    counts = {addr: c for addr, _ln, _cls, c in a.insns + h.insns}

    sites = [MemSite(hot_cell, 4, p.k_read, p.k_write)]
    if second_cell is not None:
        sites.append(MemSite(second_cell, 4, 0, p.k_second))
    if p.pattern == "strided":
        for off, hits in sorted(_strided_slot_counts(p.k_read).items()):
            sites.append(MemSite(DATA_B + off, 4, hits, 0))

    meta = WorkloadMetadata(
        entry_addr=CODE0,
        main_addr=main,
        exit_addr=prog_exit,
        hot_insn_addr=hot_insn,
        hot_cell_addr=hot_cell,
        second_cell_addr=second_cell,
        params=p,
        encoding_table=table,
        window_counts=counts,
        mem_sites=sites,
    )
    return image, meta


def expected_counts(m: WorkloadMetadata, p: "prim.Primitive") -> int:
    """Exact expected event count for a primitive, derived without execution."""
    if isinstance(p, prim.ExecSingle):
        if p.addr not in m.window_counts:
            raise UnknownTarget(f"no emitted instruction at {p.addr:#x}")
        return m.window_counts[p.addr]
    if isinstance(p, prim.ExecRange):
        return sum(c for addr, c in m.window_counts.items() if p.lo <= addr < p.hi)
    if isinstance(p, prim.ExecAll):
        return m.params.total_instr
    if isinstance(p, prim.ExecType):
        by_addr = {addr: cls for addr, _ln, cls in m.encoding_table}
        return sum(c for addr, c in m.window_counts.items()
                   if by_addr[addr] in p.classes)
    if isinstance(p, prim.RwSingle):
        hits = [s for s in m.mem_sites if s.addr <= p.addr < s.addr + s.width]
        if not hits:
            raise UnknownTarget(f"no known access site covers {p.addr:#x}")
        return sum(s.reads + s.writes for s in hits)
    if isinstance(p, prim.RwRange):
        return sum(s.reads + s.writes for s in m.mem_sites
                   if s.addr < p.hi and p.lo < s.addr + s.width)
    raise UnknownTarget(f"unsupported primitive {p!r}")
