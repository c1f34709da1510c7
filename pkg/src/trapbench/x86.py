"""x86-64 instruction length decoder over the subset this toolkit meets.

Covers the workload generator's fixed vocabulary plus the encodings gcc -O0
produces for the fixture corpus (integer/FP arithmetic, moves, stack ops,
SSE scalar math, branches).  Deliberately not a full disassembler: anything
outside the tables decodes to None and probe planning rejects the site.

decode_one() returns enough structure for the three consumers:
  - probe planning needs length / control_transfer / pc_relative,
  - access-fault classification needs reads_mem / writes_mem,
  - the instruction-type filter needs cls.
"""

from __future__ import annotations

from dataclasses import dataclass

TRAP_OPCODE = 0xCC        # single-byte trap instruction
JMP_REL32 = 0xE9
JMP_REL32_LEN = 5

_LEGACY_PREFIXES = frozenset([0x66, 0x67, 0xF0, 0xF2, 0xF3,
                              0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65])

# Branch-ish opcode classes used by the instruction-type execution filter.
BRANCH_CLASSES = frozenset({"branch", "call", "ret"})


@dataclass(frozen=True)
class Insn:
    length: int
    cls: str
    control_transfer: bool = False
    pc_relative: bool = False
    reads_mem: bool = False
    writes_mem: bool = False


# One-byte opcode table: opcode -> (modrm, imm, cls, ct, mem)
#   imm: None | "ib" | "iw" | "iz" | "iv" | "rel8" | "rel32" | "grp3"
#   mem: memory role when ModRM selects a memory operand:
#        None | "r" (read) | "w" (write) | "rw" | "grp"(decided by /reg)
_ONE: dict[int, tuple[bool, str | None, str, bool, str | None]] = {}

for hi, name in enumerate(["add", "or", "adc", "sbb", "and", "sub", "xor", "cmp"]):
    base = hi * 8
    rmw = "r" if name == "cmp" else "rw"
    _ONE[base + 0] = (True, None, "alu", False, rmw)    # r/m8, r8
    _ONE[base + 1] = (True, None, "alu", False, rmw)    # r/m, r
    _ONE[base + 2] = (True, None, "alu", False, "r")    # r8, r/m8
    _ONE[base + 3] = (True, None, "alu", False, "r")    # r, r/m
    _ONE[base + 4] = (False, "ib", "alu", False, None)  # al, ib
    _ONE[base + 5] = (False, "iz", "alu", False, None)  # eax, iz

for op in range(0x50, 0x58):
    _ONE[op] = (False, None, "push", False, None)
for op in range(0x58, 0x60):
    _ONE[op] = (False, None, "pop", False, None)
_ONE[0x63] = (True, None, "mov", False, "r")            # movsxd
_ONE[0x68] = (False, "iz", "push", False, None)
_ONE[0x69] = (True, "iz", "alu", False, "r")            # imul r, r/m, iz
_ONE[0x6A] = (False, "ib", "push", False, None)
_ONE[0x6B] = (True, "ib", "alu", False, "r")
for op in range(0x70, 0x80):
    _ONE[op] = (False, "rel8", "branch", True, None)
_ONE[0x80] = (True, "ib", "alu", False, "grp1")
_ONE[0x81] = (True, "iz", "alu", False, "grp1")
_ONE[0x83] = (True, "ib", "alu", False, "grp1")
_ONE[0x84] = (True, None, "alu", False, "r")            # test
_ONE[0x85] = (True, None, "alu", False, "r")
_ONE[0x86] = (True, None, "mov", False, "rw")           # xchg
_ONE[0x87] = (True, None, "mov", False, "rw")
_ONE[0x88] = (True, None, "store", False, "w")
_ONE[0x89] = (True, None, "store", False, "w")
_ONE[0x8A] = (True, None, "load", False, "r")
_ONE[0x8B] = (True, None, "load", False, "r")
_ONE[0x8D] = (True, None, "lea", False, None)           # no memory access
_ONE[0x8F] = (True, None, "pop", False, "w")
_ONE[0x90] = (False, None, "nop", False, None)
_ONE[0x98] = (False, None, "alu", False, None)          # cwde/cdqe
_ONE[0x99] = (False, None, "alu", False, None)          # cdq/cqo
_ONE[0x9C] = (False, None, "flags", False, None)        # pushfq
_ONE[0x9D] = (False, None, "flags", False, None)        # popfq
_ONE[0xA4] = (False, None, "string", False, None)       # movsb
_ONE[0xA5] = (False, None, "string", False, None)
_ONE[0xA8] = (False, "ib", "alu", False, None)
_ONE[0xA9] = (False, "iz", "alu", False, None)
_ONE[0xAA] = (False, None, "string", False, None)       # stosb
_ONE[0xAB] = (False, None, "string", False, None)
for op in range(0xB0, 0xB8):
    _ONE[op] = (False, "ib", "mov", False, None)
for op in range(0xB8, 0xC0):
    _ONE[op] = (False, "iv", "mov", False, None)
_ONE[0xC0] = (True, "ib", "alu", False, "rw")           # shift grp2
_ONE[0xC1] = (True, "ib", "alu", False, "rw")
_ONE[0xC2] = (False, "iw", "ret", True, None)
_ONE[0xC3] = (False, None, "ret", True, None)
_ONE[0xC6] = (True, "ib", "store", False, "w")
_ONE[0xC7] = (True, "iz", "store", False, "w")
_ONE[0xC8] = (False, "iw_ib", "other", False, None)     # enter
_ONE[0xC9] = (False, None, "other", False, None)        # leave
_ONE[0xCC] = (False, None, "int3", True, None)
_ONE[0xCD] = (False, "ib", "int3", True, None)
for op in range(0xD0, 0xD4):
    _ONE[op] = (True, None, "alu", False, "rw")         # shift grp2, 1/cl
_ONE[0xE8] = (False, "rel32", "call", True, None)
_ONE[0xE9] = (False, "rel32", "branch", True, None)
_ONE[0xEB] = (False, "rel8", "branch", True, None)
_ONE[0xF4] = (False, None, "sys", False, None)          # hlt
_ONE[0xF6] = (True, "grp3", "alu", False, "grp3")
_ONE[0xF7] = (True, "grp3", "alu", False, "grp3")
_ONE[0xFE] = (True, None, "alu", False, "rw")           # inc/dec r/m8
_ONE[0xFF] = (True, None, "alu", False, "grp5")

# Two-byte (0F xx) table, same shape.
_TWO: dict[int, tuple[bool, str | None, str, bool, str | None]] = {
    0x05: (False, None, "syscall", True, None),
    0x0B: (False, None, "sys", True, None),             # ud2
    0x10: (True, None, "load", False, "r"),             # movups/ss/sd
    0x11: (True, None, "store", False, "w"),
    0x12: (True, None, "load", False, "r"),
    0x13: (True, None, "store", False, "w"),
    0x14: (True, None, "fp", False, "r"),               # unpcklps
    0x16: (True, None, "load", False, "r"),
    0x17: (True, None, "store", False, "w"),
    0x1E: (True, None, "nop", False, None),             # endbr64 (F3 0F 1E FA)
    0x1F: (True, None, "nop", False, None),             # multi-byte nop
    0x28: (True, None, "load", False, "r"),             # movaps
    0x29: (True, None, "store", False, "w"),
    0x2A: (True, None, "fp", False, "r"),               # cvtsi2ss/sd
    0x2C: (True, None, "fp", False, "r"),               # cvttss/sd2si
    0x2D: (True, None, "fp", False, "r"),
    0x2E: (True, None, "fp", False, "r"),               # ucomiss/sd
    0x2F: (True, None, "fp", False, "r"),
    0x51: (True, None, "fp", False, "r"),               # sqrt
    0x54: (True, None, "fp", False, "r"),               # andps
    0x57: (True, None, "fp", False, "r"),               # xorps
    0x58: (True, None, "fp", False, "r"),               # adds
    0x59: (True, None, "fp", False, "r"),               # muls
    0x5A: (True, None, "fp", False, "r"),               # cvt ss<->sd
    0x5C: (True, None, "fp", False, "r"),               # subs
    0x5D: (True, None, "fp", False, "r"),               # mins
    0x5E: (True, None, "fp", False, "r"),               # divs
    0x5F: (True, None, "fp", False, "r"),               # maxs
    0x6E: (True, None, "load", False, "r"),             # movd/movq
    0x6F: (True, None, "load", False, "r"),
    0x7E: (True, None, "load", False, "r"),
    0x7F: (True, None, "store", False, "w"),
    0xA2: (False, None, "sys", False, None),            # cpuid
    0xA3: (True, None, "alu", False, "r"),              # bt
    0xAB: (True, None, "alu", False, "rw"),             # bts
    0xAF: (True, None, "alu", False, "r"),              # imul r, r/m
    0xB0: (True, None, "alu", False, "rw"),             # cmpxchg
    0xB1: (True, None, "alu", False, "rw"),
    0xB6: (True, None, "load", False, "r"),             # movzx
    0xB7: (True, None, "load", False, "r"),
    0xBE: (True, None, "load", False, "r"),             # movsx
    0xBF: (True, None, "load", False, "r"),
    0xC6: (True, "ib", "fp", False, "r"),               # shufps
    0xD6: (True, None, "store", False, "w"),            # movq
}
for op in range(0x80, 0x90):
    _TWO[op] = (False, "rel32", "branch", True, None)
for op in range(0x90, 0xA0):
    _TWO[op] = (True, None, "store", False, "w")        # setcc
for op in range(0x40, 0x50):
    _TWO[op] = (True, None, "load", False, "r")         # cmovcc


def _imm_len(kind: str | None, opsize16: bool, rexw: bool) -> int:
    if kind is None:
        return 0
    if kind == "ib":
        return 1
    if kind == "iw":
        return 2
    if kind == "iz":
        return 2 if opsize16 else 4
    if kind == "iv":
        return 8 if rexw else (2 if opsize16 else 4)
    if kind == "rel8":
        return 1
    if kind == "rel32":
        return 4
    if kind == "iw_ib":
        return 3
    raise AssertionError(kind)


def decode_one(code: bytes, offset: int = 0) -> Insn | None:
    """Decode the instruction starting at code[offset]; None if unsupported."""
    i = offset
    n = len(code)
    opsize16 = False
    rexw = False
    while i < n and code[i] in _LEGACY_PREFIXES:
        if code[i] == 0x66:
            opsize16 = True
        i += 1
    if i < n and 0x40 <= code[i] <= 0x4F:
        rexw = bool(code[i] & 0x08)
        i += 1
    if i >= n:
        return None

    op = code[i]
    i += 1
    if op == 0x0F:
        if i >= n:
            return None
        op2 = code[i]
        i += 1
        spec = _TWO.get(op2)
    else:
        spec = _ONE.get(op)
    if spec is None:
        return None
    modrm, imm, cls, ct, mem = spec

    pc_rel = imm in ("rel8", "rel32")
    reads = writes = False
    reg_field = 0
    if modrm:
        if i >= n:
            return None
        m = code[i]
        mod, reg_field, rm = m >> 6, (m >> 3) & 7, m & 7
        i += 1
        if mod != 3:
            if rm == 4:
                if i >= n:
                    return None
                sib_base = code[i] & 7
                i += 1
                if mod == 0 and sib_base == 5:
                    i += 4
            elif mod == 0 and rm == 5:
                i += 4
                pc_rel = True               # RIP-relative addressing
            if mod == 1:
                i += 1
            elif mod == 2:
                i += 4
            role = mem
            if role == "grp1":              # cmp (/7) only reads
                role = "r" if reg_field == 7 else "rw"
            elif role == "grp3":            # test reads; not/neg/mul/div rmw-ish
                role = "r" if reg_field in (0, 1) else "rw"
            elif role == "grp5":
                if reg_field in (2, 3, 4, 5):   # call/jmp r/m
                    cls, ct = ("call" if reg_field in (2, 3) else "branch"), True
                    role = "r"
                elif reg_field == 6:            # push r/m
                    role = "r"
                else:                           # inc/dec
                    role = "rw"
            if role in ("r", "rw"):
                reads = True
            if role in ("w", "rw"):
                writes = True
        else:
            if mem == "grp5":
                if reg_field in (2, 3, 4, 5):
                    cls, ct = ("call" if reg_field in (2, 3) else "branch"), True

    if imm == "grp3":
        imm = ("ib" if op == 0xF6 else "iz") if reg_field in (0, 1) else None
    i += _imm_len(imm, opsize16, rexw)
    if i > n:
        return None
    return Insn(length=i - offset, cls=cls, control_transfer=ct,
                pc_relative=pc_rel, reads_mem=reads, writes_mem=writes)


def classify_data_access(code: bytes) -> str:
    """Best-effort read/write classification of a faulting data access."""
    insn = decode_one(code)
    if insn is None:
        return "read"
    if insn.writes_mem:
        return "write"
    return "read"
