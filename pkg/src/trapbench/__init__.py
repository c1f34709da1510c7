"""trapbench: process-level trap-and-probe instrumentation with a
comparative overhead benchmark harness.  Linux x86-64 only."""

from .analysis import (CuttingPoint, RegressionFit, cutting_point, linfit,
                       mean_std, normalize_per_100m, overhead_ratio)
from .elffile import ElfFile
from .errors import TrapbenchError
from .harness import (ExperimentSpec, ResultStore, RunRecord, run_experiment,
                      run_matrix)
from .primitives import (Capability, CapabilityLevel, Caps, ExecAll,
                         ExecRange, ExecSingle, ExecType, RwRange, RwSingle,
                         TechniqueKind, build_plan, capability)
from .probes import inject_probe, plan_probe_site, read_counter, remove_probe
from .target import (ClockSample, ProcSnapshot, RegisterFile, State,
                     StopEvent, StopKind, TargetProcess, spawn_stopped)
from .traps import (FaultOutcome, HwSlot, PageTrap, SoftBreakpoint,
                    StepReport, arm_hw_slot, arm_sw_breakpoint, clear_hw_slot,
                    disarm_sw_breakpoint, drive_single_step,
                    handle_access_fault, handle_sw_hit, inject_syscall,
                    protect_range, teardown)
from .workload import (WorkloadMetadata, WorkloadParams, emit_workload,
                       expected_counts)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
