"""Overhead benchmarks against an agent-free, unmonitored baseline.

Each configuration runs five times with consecutive seeds; the first run is
discarded as warm-up and the median of the rest is reported. Times are the
simulated makespan in virtual cycles, so results do not depend on the host.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from mvee.agents import DEFAULT_CLOCKS, Strategy
from mvee.buffers import DEFAULT_CAPACITY
from mvee.runtime import EQUIVALENT, SessionConfig, run_session
from mvee.workload import Workload

RUNS = 5
WARMUP = 1

# sizes at which monitored calls no longer dominate the makespan
BENCH_PARAMS: dict[str, dict[str, int]] = {
    "independent": {"work": 100_000},
    "finegrain": {"ops": 200, "budget": 25_000},
    "alloc-lock": {"ops": 100, "work": 30_000},
    "pipeline": {"items": 24, "work": 2_000},
    "syscall-heavy": {},
}


@dataclass
class BenchRow:
    workload: str
    strategy: str
    threads: int
    replicae: int
    median_wall: float
    native_wall: float
    overhead: float
    sync_ops: int
    density: float          # sync ops per million compute cycles
    runs: list[int] = field(default_factory=list)
    all_equivalent: bool = True

    def as_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def row(self, workload: str, strategy: str, threads: int | None = None,
            replicae: int | None = None) -> BenchRow:
        for r in self.rows:
            if r.workload == workload and r.strategy == strategy and \
                    (threads is None or r.threads == threads) and \
                    (replicae is None or r.replicae == replicae):
                return r
        raise KeyError((workload, strategy, threads, replicae))

    def as_json(self) -> dict[str, Any]:
        return {"runs": RUNS, "discarded": WARMUP, "rows": [r.as_json() for r in self.rows]}

    CSV_FIELDS = ("workload", "strategy", "threads", "replicae", "median_wall", "native_wall",
                  "overhead", "sync_ops", "density")


def _median_of(walls: list[int]) -> float:
    return float(statistics.median(walls[WARMUP:]))


def native_time(workload: Workload, seed: int = 0, runs: int = RUNS) -> tuple[float, int, int]:
    """Median native makespan plus sync-op and compute totals of the kept runs."""
    walls, ops, work = [], 0, 0
    for i in range(runs):
        res = run_session(workload, SessionConfig.native(seed=seed + i))
        walls.append(res.makespan)
        if i >= WARMUP:
            ops += res.stats[0].sync_ops
            work += res.stats[0].compute
    return _median_of(walls), ops // max(1, runs - WARMUP), work // max(1, runs - WARMUP)


def bench_one(workload: Workload, strategy: Strategy, replicae: int = 2, *, seed: int = 0,
              clocks: int = DEFAULT_CLOCKS, ring_capacity: int = DEFAULT_CAPACITY,
              native: tuple[float, int, int] | None = None) -> BenchRow:
    base, ops, work = native or native_time(workload, seed)
    walls, ok = [], True
    for i in range(RUNS):
        res = run_session(workload, SessionConfig(strategy=strategy, replicae=replicae,
                                                  seed=seed + i, clocks=clocks,
                                                  ring_capacity=ring_capacity))
        ok = ok and res.outcome == EQUIVALENT
        walls.append(res.makespan)
    med = _median_of(walls)
    return BenchRow(workload=workload.name, strategy=strategy.value, threads=workload.workers(),
                    replicae=replicae, median_wall=med, native_wall=base,
                    overhead=med / base if base else float("nan"), sync_ops=ops,
                    density=1e6 * ops / work if work else 0.0, runs=walls, all_equivalent=ok)


def cmd_bench(factories: dict[str, Callable[..., Workload]], strategies: Iterable[Strategy],
              threads: Iterable[int] = (4,), replicae: Iterable[int] = (2,), *, seed: int = 0,
              params: dict[str, Any] | None = None, **kw) -> BenchReport:
    report = BenchReport()
    strategies = list(strategies)
    for name, factory in factories.items():
        for t in threads:
            w = factory(threads=t, **(params if params is not None else BENCH_PARAMS.get(name, {})))
            base = native_time(w, seed)
            for r in replicae:
                for s in strategies:
                    report.rows.append(bench_one(w, s, r, seed=seed, native=base, **kw))
    return report
