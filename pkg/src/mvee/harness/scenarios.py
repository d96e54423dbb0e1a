"""Agent-level record and replay of a scripted two-mutex scenario.

Master threads 1 and 2 perform, in this global order::

    M1 lock A, M1 unlock A, M2 lock B, M2 unlock B, M1 lock B

The record step returns what every ring holds afterwards. The replay step
starts slave thread 2 first and slave thread 1 later, and reports when each
slave op could run, so a test can see which strategies let thread 2 go ahead.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from mvee.agents import FLAG_ENABLED, Agent, ReplicationChannel, Strategy, clock_of
from mvee.core import AddressMap, OpKind, replica_ids
from mvee.monitor import HiddenRegistry
from mvee.runtime import Memory
from mvee.sim import Channel, Engine, Preemption, Task, Wait

SCRIPT: tuple[tuple[int, str, OpKind], ...] = (
    (1, "A", OpKind.COMPARE_AND_SWAP),
    (1, "A", OpKind.EXCHANGE),
    (2, "B", OpKind.COMPARE_AND_SWAP),
    (2, "B", OpKind.EXCHANGE),
    (1, "B", OpKind.COMPARE_AND_SWAP),
)
VARS = ("A", "B")
SLAVE_DELAY = 1000


@dataclass
class ReplayStep:
    thread: int
    var: str
    arrived: int
    performed: int

    @property
    def waited(self) -> int:
        return self.performed - self.arrived


@dataclass
class ScenarioResult:
    strategy: Strategy
    clocks: dict[str, int]                    # var -> clock (clock strategies only)
    rings: list[list[tuple]]                  # per ring, published records in order
    thread_rings: dict[int, list[tuple]]      # per master thread (clock strategies only)
    final_wall: dict[str, int]
    replay: list[ReplayStep] = field(default_factory=list)

    def first(self, thread: int) -> ReplayStep:
        return next(s for s in self.replay if s.thread == thread)


def _perform(cells: dict, addr: int, kind: OpKind):
    def run() -> int:
        old = cells[addr]
        cells[addr] = 1 if kind is OpKind.COMPARE_AND_SWAP and old == 0 else 0
        return old
    return run


def run_two_mutex_scenario(strategy: Strategy, *, clocks: int = 4096, seed: int = 1,
                           slave_delay: int = SLAVE_DELAY,
                           script: tuple[tuple[int, str, OpKind], ...] = SCRIPT) -> ScenarioResult:
    """Record ``script`` with master threads 1 and 2, then replay it."""
    engine = Engine(seed=seed, preemption=Preemption(1000, 1000, 0))
    channel = ReplicationChannel(strategy, threads=3, replicae=2, capacity=16, clocks=clocks)
    registry = HiddenRegistry(seed)
    reps = []
    for rid in replica_ids(2):
        addresses = AddressMap(len(VARS), rid, seed)
        memory = Memory(addresses, [0] * len(VARS))
        agent = Agent(strategy, rid, channel, engine, memory, registry)
        memory.cells[agent.flags_address] |= FLAG_ENABLED
        reps.append((addresses, memory, agent))

    def words(r: int) -> dict[str, int]:
        return {v: reps[r][0].address(i) for i, v in enumerate(VARS)}

    # master: enforce the scripted global order
    turn = [0]
    order = Channel("turn")
    m_words, m_cells, m_agent = words(0), reps[0][1].cells, reps[0][2]

    def master(task: Task):
        for k, (tid, var, kind) in enumerate(script):
            if tid != task.tid:
                continue
            yield Wait(order, lambda k=k: turn[0] == k)
            addr = m_words[var]
            yield from m_agent.sync(task, addr, kind, _perform(m_cells, addr, kind))
            turn[0] += 1
            engine.notify(order)

    # slave: thread 2 starts at once, thread 1 only after a delay
    steps: list[ReplayStep] = []
    s_words, s_cells, s_agent = words(1), reps[1][1].cells, reps[1][2]

    def slave(task: Task):
        for tid, var, kind in script:
            if tid != task.tid:
                continue
            arrived = task.time
            addr = s_words[var]
            yield from s_agent.sync(task, addr, kind, _perform(s_cells, addr, kind))
            steps.append(ReplayStep(tid, var, arrived, task.time))

    for tid in (1, 2):
        engine.add(Task(f"m.t{tid}", tid, 0, None, random.Random(tid)))
        engine.tasks[-1].gen = master(engine.tasks[-1])
    engine.run()
    for tid, start in ((2, 0), (1, slave_delay)):
        start += max(t.time for t in engine.tasks)
        engine.add(Task(f"s.t{tid}", tid, 1, None, random.Random(10 + tid), start))
        engine.tasks[-1].gen = slave(engine.tasks[-1])
    engine.run()

    rings = [[tuple(rec) for rec in ring.snapshot()] for ring in channel.rings]
    clock_ids, thread_rings, final_wall = {}, {}, {}
    if strategy.uses_clocks:
        clock_ids = {v: clock_of(m_words[v], clocks) for v in VARS}
        thread_rings = {t: rings[t] for t in (1, 2)}
        final_wall = {v: channel.master_wall[clock_ids[v]] for v in VARS}
    return ScenarioResult(strategy, clock_ids, rings, thread_rings, final_wall, steps)
