"""Exception hierarchy for the toolkit.

Every error raised by trapbench derives from TrapbenchError so callers can
catch the whole family with one clause.  The leaf classes match the error
contracts of the individual operations.
"""

from __future__ import annotations


class TrapbenchError(Exception):
    """Base class for all toolkit errors."""


# --- target control

class SpawnError(TrapbenchError):
    """Target executable missing, not executable, or exec failed."""


class StateError(TrapbenchError):
    """Operation issued while the target is in the wrong state."""


class MemoryAccessError(TrapbenchError):
    """Target memory range unmapped or inaccessible."""


class WaitError(TrapbenchError):
    """The target vanished or the debug interface failed mid-wait."""


class SymbolError(TrapbenchError):
    """Symbol absent from the target's symbol table."""


class SnapshotError(TrapbenchError):
    """/proc files of the target could not be read."""


# --- trap techniques

class AlreadyArmed(TrapbenchError):
    """A breakpoint is already armed at this address."""


class NotOurTrap(TrapbenchError):
    """Trap delivered at an address with no armed breakpoint."""


class NoFreeSlot(TrapbenchError):
    """All four hardware debug slots are in use."""


class BadLength(TrapbenchError):
    """Unsupported hardware watch length (must be 1, 2, 4, or 8)."""


class BadAlignment(TrapbenchError):
    """Watch address not aligned to the watch length."""


class InjectError(TrapbenchError):
    """Remote syscall or code injection failed."""


class OverlappingTrap(TrapbenchError):
    """Requested pages overlap an existing page trap or breakpoint."""


# --- probe injection

class UnsupportedSite(TrapbenchError):
    """Probe window contains a branch, pc-relative, or undecodable instruction."""


class PcInWindow(TrapbenchError):
    """Target stopped inside the probe window or stub; removal unsafe."""


# --- primitives

class CapabilityError(TrapbenchError):
    """The technique cannot implement the requested primitive."""


class PlatformError(TrapbenchError):
    """Capability exists in principle but not on this platform."""


class HwDebugUnavailable(PlatformError):
    """The kernel accepts but does not implement debug registers."""


# --- workload generation

class ParamError(TrapbenchError):
    """Inconsistent workload parameters."""


class UnknownTarget(TrapbenchError):
    """Primitive targets an address the workload metadata does not describe."""


# --- harness

class TransparencyError(TrapbenchError):
    """Instrumented run diverged from the native run."""


class AdapterError(TrapbenchError):
    """External tool produced missing or malformed output."""


# --- analysis

class EmptyInput(TrapbenchError):
    """Statistic requested over an empty sample."""


class BadCount(TrapbenchError):
    """Instruction count must be positive."""


class BadBaseline(TrapbenchError):
    """Native reference time must be positive."""


class DegenerateInput(TrapbenchError):
    """Regression needs at least two points with varying x."""
