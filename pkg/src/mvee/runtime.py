"""Replica execution: memory arenas, thread interpreters, and sessions.

A :class:`Session` runs every replica of one workload inside a single
discrete-event engine. Each replica owns an isolated memory arena laid out
by its own :class:`AddressMap`, a virtual futex table, and (optionally) a
replication agent. Threads interpret their lowered programs; atomic word
operations go through the agent, system calls go through the monitor.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any, Callable

from mvee.agents import (DEFAULT_CLOCKS, DEFAULT_MAP_CAPACITY, DEFAULT_WINDOW, Agent,
                         AllocationCounter, ReplicationChannel, Strategy, clock_of)
from mvee.buffers import DEFAULT_CAPACITY
from mvee.core import AddressMap, Call, EventStream, ReplicaId, RvpEvent, replica_ids
from mvee.costs import DEFAULT_COSTS, CostModel
from mvee.errors import (DeadlockDetected, DivergenceDetected, RendezvousTimeout,
                         ReplayMismatch)
from mvee.kernel import VirtualFutexTable
from mvee.lowering import (ADD, ATOMIC_KINDS, BRANCH, CAS, COMPUTE, FUTEX_WAIT, FUTEX_WAKE,
                           JOIN, JUMP, LOAD, PLOAD, PSTORE, SPAWN, STORE, SYSCALL, XCHG, R,
                           lower_workload)
from mvee.lowering import holds as _holds
from mvee.monitor import DivergenceReport, HiddenRegistry, Monitor
from mvee.sim import Channel, Engine, Line, Preemption, Task, Wait
from mvee.workload import Workload

EQUIVALENT = "equivalent"
DIVERGENCE = "divergence"
DEADLOCK = "deadlock"

_VAR_OPS = frozenset(ATOMIC_KINDS) | {FUTEX_WAIT, FUTEX_WAKE, PSTORE, PLOAD}
_CALLS = {"write": Call.WRITE, "read": Call.READ, "open": Call.OPEN, "getpid": Call.GETPID}


@dataclass(frozen=True)
class Schedule:
    """Seed plus preemption policy; fixes the master's interleaving."""

    seed: int = 0
    preemption: Preemption = Preemption()


@dataclass
class SessionConfig:
    strategy: Strategy | None = Strategy.WALL_OF_CLOCKS
    replicae: int = 2
    seed: int = 0
    diversity_seed: int | None = None
    clocks: int = DEFAULT_CLOCKS
    ring_capacity: int = DEFAULT_CAPACITY
    window: int = DEFAULT_WINDOW
    map_capacity: int = DEFAULT_MAP_CAPACITY
    arbitrate: bool = True
    monitored: bool = True
    costs: CostModel = DEFAULT_COSTS
    preemption: Preemption = Preemption()
    trace: bool = False
    max_steps: int = 20_000_000
    host_timeout: float | None = 10.0
    record_tamper: Callable | None = None
    event_tamper: Callable | None = None
    on_step: Callable | None = None
    allocator: AllocationCounter | None = None
    chooser: Callable | None = None
    futex_picker: Callable | None = None

    @classmethod
    def native(cls, seed: int = 0, **kw) -> SessionConfig:
        """One unmonitored replica without an agent: the baseline."""
        return cls(strategy=None, replicae=1, seed=seed, monitored=False, **kw)


@dataclass
class ReplicaStats:
    sync_ops: int = 0
    recorded: int = 0
    replayed: int = 0
    stall: int = 0
    futex_waits: int = 0
    futex_wakes: int = 0
    syscalls: int = 0
    compute: int = 0
    wall_time: int = 0
    window_stalls: int = 0

    def as_json(self) -> dict:
        return dict(self.__dict__)


class Memory:
    """A replica's isolated arena: word cells plus cache-line models.

    Only variables that the program actually references are materialized;
    declared but untouched variables never need an address.
    """

    def __init__(self, addresses: AddressMap, initial: list[int],
                 used: set[int] | None = None) -> None:
        self.cells: dict[int, int] = {}
        n = len(initial)
        self.lines: list[Line | None] = [None] * n
        self.var_addresses: list[int | None] = [None] * n
        for v in (range(n) if used is None else sorted(used)):
            addr = addresses.address(v)
            self.var_addresses[v] = addr
            self.lines[v] = Line()
            self.cells[addr] = initial[v]

    def values(self) -> set[int]:
        return set(self.cells.values())


class Replica:
    def __init__(self, session: Session, rid: ReplicaId, diversity_seed: int) -> None:
        w = session.workload
        self.session = session
        self.id = rid
        self.ordinal = rid.ordinal
        self.addresses = AddressMap(len(w.vars), rid, diversity_seed)
        self.memory = Memory(self.addresses, [v for _, v in w.vars], session.used_vars)
        picker = session.config.futex_picker if rid.is_master else None
        self.kernel = VirtualFutexTable(session.config.seed * 7919 + rid.ordinal * 104729 + 1,
                                        picker)
        self.stream = EventStream()
        self.stats = ReplicaStats()
        self.agent: Agent | None = None
        self.tasks: dict[int, Task] = {}
        self.done = [False] * w.n_threads
        self.exit_channel = Channel(f"exit{rid.ordinal}")
        self.event_index = [0] * w.n_threads
        self.trace: list[tuple[int, int, int]] = []

    def start_thread(self, tid: int, at: int) -> Task:
        s = self.session
        rng = random.Random((s.config.seed << 20) ^ (self.ordinal << 10) ^ tid)
        task = Task(f"r{self.ordinal}.t{tid}", tid, self, None, rng, at)
        task.gen = s._thread(self, task)
        self.tasks[tid] = task
        s.engine.add(task)
        return task


@dataclass
class SessionResult:
    outcome: str
    streams: list[EventStream]
    stats: list[ReplicaStats]
    external: list[tuple[int, bytes]]
    makespan: int
    report: DivergenceReport | None = None
    error: str | None = None
    traces: list[list] = field(default_factory=list)
    address_maps: list[AddressMap] = field(default_factory=list)
    steps: int = 0

    @property
    def equivalent(self) -> bool:
        return self.outcome == EQUIVALENT


class Session:
    """All replicae of one run, sharing an engine and a monitor."""

    def __init__(self, workload: Workload, config: SessionConfig | None = None) -> None:
        self.workload = workload
        self.config = cfg = config or SessionConfig()
        self.code = lower_workload(workload)
        self.used_vars = {ins[1] for body in self.code for ins in body
                          if ins[0] in _VAR_OPS}
        self.engine = Engine(seed=cfg.seed, wake_latency=cfg.costs.wake,
                             preemption=cfg.preemption, chooser=cfg.chooser,
                             max_steps=cfg.max_steps, host_timeout=cfg.host_timeout,
                             on_step=cfg.on_step)
        dseed = cfg.diversity_seed if cfg.diversity_seed is not None else cfg.seed
        self.replicae = [Replica(self, rid, dseed) for rid in replica_ids(cfg.replicae)]
        self.registry = HiddenRegistry(cfg.seed)
        self.monitor = Monitor(self.engine, self.replicae, arbitrate=cfg.arbitrate,
                               monitored=cfg.monitored, costs=cfg.costs,
                               registry=self.registry, event_tamper=cfg.event_tamper)
        self.engine.on_stuck = self.monitor.stuck
        self.channel: ReplicationChannel | None = None
        if cfg.strategy is not None:
            self.channel = ReplicationChannel(
                cfg.strategy, workload.n_threads, cfg.replicae, capacity=cfg.ring_capacity,
                clocks=cfg.clocks, allocator=cfg.allocator)
            for rep in self.replicae:
                rep.agent = Agent(cfg.strategy, rep.id, self.channel, self.engine, rep.memory,
                                  self.registry, costs=cfg.costs, window=cfg.window,
                                  map_capacity=cfg.map_capacity, allocator=cfg.allocator,
                                  record_tamper=cfg.record_tamper if rep.id.is_master else None)

    # thread interpreter

    def _thread(self, rep: Replica, task: Task):
        tid = task.tid
        code = self.code[tid]
        costs = self.config.costs
        op_cost, miss = costs.op, costs.line_miss
        cells = rep.memory.cells
        lines = rep.memory.lines
        addrs = rep.memory.var_addresses
        agent = rep.agent
        stats = rep.stats
        monitor = self.monitor
        tracing = self.config.trace
        trace = rep.trace
        regs = [0, 0, 0]

        if tid == 0 and agent is not None:
            yield from monitor.rendezvous(rep, task, agent.agent_register(0))

        pc = 0
        n = len(code)
        while pc < n:
            ins = code[pc]
            op = ins[0]
            pc += 1
            if op in ATOMIC_KINDS:
                v = ins[1]
                addr = addrs[v]
                yield lines[v].cost(task, op_cost, miss)
                if op is CAS:
                    expect, new = ins[2], ins[3]

                    def perform(addr=addr, expect=expect, new=new):
                        old = cells[addr]
                        if old == expect:
                            cells[addr] = new
                        return old
                elif op is XCHG:
                    def perform(addr=addr, new=ins[2]):
                        old = cells[addr]
                        cells[addr] = new
                        return old
                elif op is STORE:
                    value = ins[2]
                    value = regs[value[1]] if value.__class__ is tuple else value

                    def perform(addr=addr, value=value):
                        cells[addr] = value
                        return 0
                elif op is LOAD:
                    def perform(addr=addr):
                        return cells[addr]
                else:
                    def perform(addr=addr, amount=ins[2]):
                        old = cells[addr]
                        cells[addr] = old + amount
                        return old
                kind = ATOMIC_KINDS[op]
                if agent is None:
                    result = perform()
                else:
                    result = yield from agent.sync(task, addr, kind, perform)
                stats.sync_ops += 1
                task.visible = True
                if tracing:
                    trace.append((tid, v, int(kind)))
                if op is not STORE:
                    regs[ins[-1]] = result
            elif op is BRANCH:
                if _holds(regs[ins[1]], ins[2], ins[3]):
                    pc = ins[4]
            elif op is JUMP:
                pc = ins[1]
            elif op is FUTEX_WAIT or op is FUTEX_WAKE:
                v = ins[1]
                arg = ins[2]
                arg = regs[arg[1]] if arg.__class__ is tuple else arg
                call = Call.FUTEX_WAIT if op is FUTEX_WAIT else Call.FUTEX_WAKE
                yield from monitor.rendezvous(rep, task, RvpEvent(tid, call, (addrs[v], arg)))
            elif op is COMPUTE:
                units = ins[1]
                if units:
                    jitter = costs.compute_jitter
                    cycles = max(1, round(units * (1 + jitter * (2 * task.rng.random() - 1))))
                    stats.compute += cycles
                    yield cycles
            elif op is SYSCALL:
                payload = ins[2]
                if payload.__class__ is tuple:
                    payload = str(regs[payload[1]]).encode()
                args = () if payload is None else (payload,)
                result = yield from monitor.rendezvous(rep, task,
                                                       RvpEvent(tid, _CALLS[ins[1]], args))
                regs[R] = result if isinstance(result, int) else 0
            elif op is SPAWN:
                yield from monitor.rendezvous(rep, task, RvpEvent(tid, Call.SPAWN, (ins[1],)))
            elif op is JOIN:
                child = ins[1]
                done = rep.done
                if not done[child]:
                    yield Wait(rep.exit_channel, lambda: done[child])
                yield from monitor.rendezvous(rep, task, RvpEvent(tid, Call.JOIN, (child,)))
            elif op is PSTORE:
                v = ins[1]
                value = ins[2]
                yield lines[v].cost(task, op_cost, miss)
                cells[addrs[v]] = regs[value[1]] if value.__class__ is tuple else value
                task.visible = True
            elif op is PLOAD:
                v = ins[1]
                yield lines[v].cost(task, op_cost, miss)
                regs[ins[2]] = cells[addrs[v]]
                task.visible = True
            else:
                raise ValueError(f"unknown primitive {op!r}")
        rep.done[tid] = True
        self.engine.notify(rep.exit_channel)

    # driver

    def run(self) -> SessionResult:
        for rep in self.replicae:
            rep.start_thread(0, 0)
        outcome, report, error = EQUIVALENT, None, None
        try:
            self.engine.run()
        except DivergenceDetected as exc:
            outcome, report, error = DIVERGENCE, exc.report, str(exc)
        except ReplayMismatch as exc:
            outcome, error = DIVERGENCE, str(exc)
            report = DivergenceReport(exc.replica, exc.thread, -1, exc.field,
                                      exc.master_value, exc.deviant_value, "replay mismatch")
        except (DeadlockDetected, RendezvousTimeout) as exc:
            outcome, error = DEADLOCK, f"{type(exc).__name__}: {exc}"
        for rep in self.replicae:
            st = rep.stats
            st.wall_time = max((t.time for t in rep.tasks.values()), default=0)
            st.stall = sum(t.stall for t in rep.tasks.values())
            if rep.agent is not None:
                st.recorded = rep.agent.recorded
                st.replayed = rep.agent.replayed
                st.window_stalls = rep.agent.window_stalls
        streams = [rep.stream for rep in self.replicae]
        if outcome == EQUIVALENT and any(s != streams[0] for s in streams[1:]):
            outcome = DIVERGENCE
            error = "event streams differ"
        return SessionResult(
            outcome=outcome, streams=streams, stats=[r.stats for r in self.replicae],
            external=list(self.monitor.external),
            makespan=max(r.stats.wall_time for r in self.replicae), report=report,
            error=error, traces=[r.trace for r in self.replicae],
            address_maps=[r.addresses for r in self.replicae], steps=self.engine.steps)

    def clock_trace(self, replica: int = 0) -> list[tuple[int, int, int]]:
        """(thread, var, clock) per traced op; clocks follow the master's addresses."""
        cfg = self.config
        master = self.replicae[0].memory.var_addresses
        return [(t, v, clock_of(master[v], cfg.clocks)) for t, v, _ in self.replicae[replica].trace]


def run_session(workload: Workload, config: SessionConfig | None = None) -> SessionResult:
    return Session(workload, config).run()


def run_replica(workload: Workload, replica: int | ReplicaId,
                strategy: Strategy | None, schedule: Schedule = Schedule(), *,
                replicae: int = 2, **kw: Any) -> tuple[EventStream, ReplicaStats]:
    """Run a full session and return one replica's event stream and statistics.

    Slaves cannot run without a master to replay, so the whole set runs
    together; this simply selects one replica's view.
    """
    ordinal = replica.ordinal if isinstance(replica, ReplicaId) else replica
    cfg = SessionConfig(strategy=strategy, replicae=max(replicae, ordinal + 1),
                        seed=schedule.seed, preemption=schedule.preemption, **kw)
    result = run_session(workload, cfg)
    if result.outcome == DIVERGENCE and result.report is not None:
        raise DivergenceDetected(result.report)
    if result.outcome == DEADLOCK:
        raise DeadlockDetected(result.error or "deadlock")
    return result.streams[ordinal], result.stats[ordinal]
