"""Seeded verification trials and replay-order checks."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any

from mvee.agents import DEFAULT_CLOCKS, Strategy, clock_of
from mvee.buffers import DEFAULT_CAPACITY
from mvee.runtime import DIVERGENCE, EQUIVALENT, Session, SessionConfig, SessionResult
from mvee.workload import Workload

OUTCOME_NAMES = {EQUIVALENT: "Equivalent", DIVERGENCE: "Divergence", "deadlock": "Deadlock"}


@dataclass
class TrialReport:
    workload: str
    strategy: str
    replicae: int
    threads: int
    seed: int
    outcome: str
    report: dict | None = None
    error: str | None = None
    stats: list[dict] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.outcome == EQUIVALENT

    def as_json(self) -> dict[str, Any]:
        return {
            "workload": self.workload,
            "strategy": self.strategy,
            "replicae": self.replicae,
            "threads": self.threads,
            "seed": self.seed,
            "outcome": OUTCOME_NAMES.get(self.outcome, self.outcome),
            "report": self.report,
            "error": self.error,
            "violations": self.violations,
            "stats": self.stats,
        }

    def csv_row(self) -> dict[str, Any]:
        master = self.stats[0] if self.stats else {}
        return {
            "workload": self.workload, "strategy": self.strategy, "replicae": self.replicae,
            "threads": self.threads, "seed": self.seed,
            "outcome": OUTCOME_NAMES.get(self.outcome, self.outcome),
            "sync_ops": master.get("sync_ops", 0), "stall": master.get("stall", 0),
            "futex_waits": master.get("futex_waits", 0),
            "wall_time": max((s.get("wall_time", 0) for s in self.stats), default=0),
        }


def _grouped(trace, key) -> dict:
    groups: dict = defaultdict(list)
    for entry in trace:
        groups[key(entry)].append(entry)
    return groups


def replay_order_violations(master: list, slave: list, strategy: Strategy | None,
                            clock_of_var=None) -> list[str]:
    """Compare a slave's performed sync-op order with the master's.

    Entries are ``(thread, var, kind)``. Every strategy must preserve the
    per-thread and per-variable subsequences; total order must reproduce the
    whole sequence, and wall of clocks the per-clock subsequences.
    """
    problems = []
    if len(master) != len(slave):
        problems.append(f"op count differs: master {len(master)}, slave {len(slave)}")
    if strategy is Strategy.TOTAL_ORDER and master != slave:
        problems.append("total order not reproduced")
    checks = [("thread", lambda e: e[0]), ("var", lambda e: e[1])]
    if strategy is not None and strategy.uses_clocks and clock_of_var is not None:
        checks.append(("clock", lambda e: clock_of_var(e[1])))
    for label, key in checks:
        mg, sg = _grouped(master, key), _grouped(slave, key)
        for k in sorted(set(mg) | set(sg)):
            if mg.get(k) != sg.get(k):
                problems.append(f"per-{label} order differs for {label} {k}")
                break
    return problems


def check_result(result: SessionResult, strategy: Strategy | None, clocks: int,
                 master_addresses) -> list[str]:
    if not result.traces or len(result.traces) < 2:
        return []
    cache: dict[int, int] = {}

    def clock_of_var(v: int) -> int:
        c = cache.get(v)
        if c is None:
            c = cache[v] = clock_of(master_addresses[v], clocks)
        return c

    master = result.traces[0]
    out = []
    for r, slave in enumerate(result.traces[1:], start=1):
        out += [f"replica {r}: {p}" for p in
                replay_order_violations(master, slave, strategy, clock_of_var)]
    return out


def run_trial(workload: Workload, strategy: Strategy | None, replicae: int = 2, seed: int = 0,
              *, clocks: int = DEFAULT_CLOCKS, ring_capacity: int = DEFAULT_CAPACITY,
              arbitrate: bool = True, check_order: bool = True, **kw) -> TrialReport:
    cfg = SessionConfig(strategy=strategy, replicae=replicae, seed=seed, clocks=clocks,
                        ring_capacity=ring_capacity, arbitrate=arbitrate, trace=check_order,
                        **kw)
    session = Session(workload, cfg)
    result = session.run()
    violations: list[str] = []
    outcome = result.outcome
    if check_order and outcome == EQUIVALENT:
        violations = check_result(result, strategy, clocks,
                                  session.replicae[0].memory.var_addresses)
        if violations:
            outcome = DIVERGENCE
    return TrialReport(
        workload=workload.name, strategy=strategy.value if strategy else "none",
        replicae=replicae, threads=workload.workers(), seed=seed, outcome=outcome,
        report=result.report.as_json() if result.report else None, error=result.error,
        stats=[s.as_json() for s in result.stats], violations=violations)


def cmd_verify(workload: Workload, strategy: Strategy, replicae: int = 2, trials: int = 100,
               *, seed: int = 0, **kw) -> list[TrialReport]:
    """``trials`` seeded runs starting at ``seed``."""
    if replicae < 2:
        raise ValueError("verification needs at least two replicae")
    return [run_trial(workload, strategy, replicae, seed + i, **kw) for i in range(trials)]
