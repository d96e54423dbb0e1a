"""Virtual-cycle prices used by the simulated machine.

The absolute values are arbitrary; what matters is their ratio. A
coherence transfer is an order of magnitude dearer than a cached atomic,
and a monitored system call (a ptrace round trip) dwarfs both.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CostModel:
    op: int = 2                     # atomic on a line the task already owns
    line_miss: int = 30             # coherence transfer of a contended line
    log: int = 2                    # writing one ring slot
    scan: int = 1                   # inspecting one lookahead entry (PO)
    slot_read: int = 8              # pulling a freshly published slot into a consumer
    wake: int = 10                  # spin-then-yield latency after a condition flips
    local: int = 1                  # register/branch bookkeeping
    syscall_native: int = 60
    syscall_monitored: int = 600
    compute_jitter: float = 0.10    # relative noise on Compute(units)


DEFAULT_COSTS = CostModel()
