"""Exhaustive interleaving enumeration for small workloads.

The master's schedule is enumerated by stateless depth-first search: every
run follows a recorded prefix of decisions and reports the branching it met,
and the next run flips the deepest decision that still has untried options.
A decision is made whenever the master is about to start its next visible
operation (an atomic effect, an unprotected access or a futex call) and
more than one master thread could perform it, and whenever the master's
kernel has to pick one of several futex waiters. Other monitored calls touch
no shared memory and commute with everything else, so they are not branch
points.

Slaves are not enumerated. They run only when no master thread can, or when
the master waits for them at a monitored call, so they lag behind the
master and see several published records at once. Each slave uses a fixed
thread priority; with three replicae the two slaves use opposite
priorities, so an agent that permits reordering gets the chance to show it.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from mvee.agents import Strategy
from mvee.errors import InstanceTooLarge
from mvee.harness.trials import check_result
from mvee.runtime import EQUIVALENT, Session, SessionConfig
from mvee.sim import Preemption
from mvee.workload import Workload, parse_workload, print_workload

MAX_THREADS = 3
MAX_SYNC_OPS = 8
MAX_INTERLEAVINGS = 200_000


class _DfsChooser:
    def __init__(self, prefix: list[int], slave_priority: dict[int, int]) -> None:
        self.prefix = prefix
        self.monitor = None
        self.trail: list[tuple[int, int]] = []
        self.running = None
        self.slave_priority = slave_priority

    def decide(self, n: int) -> int:
        k = len(self.trail)
        c = self.prefix[k] if k < len(self.prefix) else 0
        self.trail.append((c, n))
        return c

    def __call__(self, ready, current):
        masters = [t for t in ready if t.replica.ordinal == 0]
        if not masters or (len(masters) != len(ready) and self.monitor.master_waiting()):
            slaves = [t for t in ready if t.replica.ordinal != 0]
            return min(slaves, key=lambda t: (t.replica.ordinal,
                                              self.slave_priority[t.replica.ordinal] * t.tid))
        running = self.running
        if running is not None and not running.visible and running in masters:
            return running
        if len(masters) == 1:
            chosen = masters[0]
        else:
            chosen = masters[self.decide(len(masters))]
        chosen.visible = False
        self.running = chosen
        return chosen

    def pick(self, n: int) -> int:
        return self.decide(n)


@dataclass
class Counterexample:
    decisions: list[int]
    reason: str


@dataclass
class OracleVerdict:
    workload: str
    strategy: str
    interleavings: int = 0
    reordered: int = 0          # runs where some slave deviated from the master's total order
    counterexamples: list[Counterexample] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.counterexamples

    def as_json(self) -> dict:
        return {
            "workload": self.workload, "strategy": self.strategy,
            "interleavings": self.interleavings, "reordered": self.reordered,
            "passed": self.passed,
            "counterexamples": [{"decisions": c.decisions, "reason": c.reason}
                                for c in self.counterexamples],
        }


def check_size(workload: Workload) -> None:
    if workload.n_threads > MAX_THREADS:
        raise InstanceTooLarge(f"{workload.n_threads} threads; at most {MAX_THREADS} allowed")
    n = workload.sync_statement_count()
    if n > MAX_SYNC_OPS:
        raise InstanceTooLarge(f"{n} sync statements; at most {MAX_SYNC_OPS} allowed")


def _next_prefix(trail: list[tuple[int, int]]) -> list[int] | None:
    for i in range(len(trail) - 1, -1, -1):
        c, n = trail[i]
        if c + 1 < n:
            return [x for x, _ in trail[:i]] + [c + 1]
    return None


def brute_force_oracle(workload: Workload, strategy: Strategy, *, replicae: int = 3,
                       clocks: int = 4096, seed: int = 0,
                       max_interleavings: int = MAX_INTERLEAVINGS,
                       stop_at_first: bool = False) -> OracleVerdict:
    """Replay every master interleaving of ``workload`` and check each one."""
    check_size(workload)
    priority = {r: (1 if r % 2 else -1) for r in range(1, replicae)}
    verdict = OracleVerdict(workload.name, strategy.value)
    prefix: list[int] | None = []
    while prefix is not None:
        if verdict.interleavings >= max_interleavings:
            raise InstanceTooLarge(f"more than {max_interleavings} interleavings")
        chooser = _DfsChooser(prefix, priority)
        cfg = SessionConfig(strategy=strategy, replicae=replicae, seed=seed, clocks=clocks,
                            ring_capacity=64, map_capacity=64, trace=True, chooser=chooser,
                            futex_picker=chooser.pick, preemption=Preemption(1, 1, 0),
                            max_steps=200_000, host_timeout=None)
        session = Session(workload, cfg)
        chooser.monitor = session.monitor
        result = session.run()
        verdict.interleavings += 1
        decisions = [c for c, _ in chooser.trail]
        reason = None
        if result.outcome != EQUIVALENT:
            reason = f"{result.outcome}: {result.error}"
        else:
            problems = check_result(result, strategy, clocks,
                                    session.replicae[0].memory.var_addresses)
            if problems:
                reason = "; ".join(problems)
        if reason is not None:
            verdict.counterexamples.append(Counterexample(decisions, reason))
            if stop_at_first:
                break
        if any(t != result.traces[0] for t in result.traces[1:]):
            verdict.reordered += 1
        prefix = _next_prefix(chooser.trail)
    return verdict


def generate_family(count: int = 60, seed: int = 2024) -> list[Workload]:
    """Seeded small data-race-free workloads: three threads, at most 8 sync statements."""
    rng = random.Random(seed)
    out = []
    for i in range(count):
        n_vars = rng.randint(1, 2)
        mutexes = [f"m{k}" for k in range(n_vars)]
        data = [f"x{k}" for k in range(n_vars)]
        budget = rng.randint(2, MAX_SYNC_OPS)
        bodies: list[list[str]] = [[], []]
        used = 0
        while used < budget:
            t = rng.randrange(2)
            k = rng.randrange(n_vars)
            choice = rng.random()
            if choice < 0.45 and used + 2 <= budget:
                inner = []
                if used + 3 <= budget and rng.random() < 0.5:
                    inner = [rng.choice([f"add {data[k]} 1", f"store {data[k]} {t + 1}",
                                         f"load {data[k]}"])]
                bodies[t] += [f"lock {mutexes[k]}"] + inner + [f"unlock {mutexes[k]}"]
                used += 2 + len(inner)
                if inner and inner[0].startswith("load") and rng.random() < 0.5:
                    bodies[t].append("syscall write r")
            elif choice < 0.75:
                bodies[t].append(f"add {data[k]} {rng.randint(1, 3)}")
                used += 1
            else:
                bodies[t] += [f"load {data[k]}", "syscall write r"] if rng.random() < 0.3 \
                    else [f"add {data[k]} 1"]
                used += 1
        lines = [f"workload fam{i:03d}", "vars " + " ".join(f"{v}=0" for v in mutexes + data),
                 "thread 0:", "    spawn 1", "    spawn 2", "    join 1", "    join 2"]
        for t, body in enumerate(bodies, start=1):
            lines.append(f"thread {t}:")
            lines += ["    " + s for s in (body or ['syscall getpid'])]
        w = parse_workload("\n".join(lines) + "\n")
        assert parse_workload(print_workload(w)) == w
        out.append(w)
    return out

