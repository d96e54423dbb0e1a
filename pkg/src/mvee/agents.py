"""Synchronization replication agents.

The master agent logs every sync op before performing it; slave agents
consult the log to perform the same ops in an equivalent order. Four
strategies share one interface:

* total order (TO): one ring, slaves consume strictly in log order;
* partial order (PO): one ring, slaves may overtake entries on other words;
* wall of clocks (WoC): per-thread rings of (clock, time) pairs, where each
  word hashes onto one of a fixed number of logical clocks;
* secured WoC (SWoC): WoC whose ring location is only reachable through a
  monitor-issued capability and never stored in replica memory.

Agents allocate all of their storage when constructed. Record and replay
paths only touch preallocated arrays, which the allocation counter checks.
"""

from __future__ import annotations

import enum
from typing import Callable, NamedTuple

from mvee.buffers import DEFAULT_CAPACITY, ReplicationRing
from mvee.core import Address, Call, OpKind, ReplicaId, ReplicaLocal, RvpEvent
from mvee.costs import DEFAULT_COSTS, CostModel
from mvee.errors import CapacityExhausted, DoubleRegistration, ReplayMismatch, WindowExhausted
from mvee.sim import Channel, Engine, Line, SimLock, Task, Wait

DEFAULT_CLOCKS = 4096
DEFAULT_WINDOW = 256
DEFAULT_MAP_CAPACITY = 8192

FLAG_ENABLED = 1
FLAG_SLAVE = 2

AGENT_AREA = 0x5000_0000_0000
_TLS_OFFSET = 0x1000
_GOLDEN64 = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class Strategy(enum.Enum):
    TOTAL_ORDER = "to"
    PARTIAL_ORDER = "po"
    WALL_OF_CLOCKS = "woc"
    SECURED_WALL_OF_CLOCKS = "swoc"

    @property
    def uses_clocks(self) -> bool:
        return self in (Strategy.WALL_OF_CLOCKS, Strategy.SECURED_WALL_OF_CLOCKS)

    @classmethod
    def parse(cls, text: str) -> Strategy:
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown strategy {text!r}; expected one of "
                             f"{', '.join(s.value for s in cls)}") from None


class SyncOpRecord(NamedTuple):
    thread: int
    word: int
    kind: int


class WocRecord(NamedTuple):
    clock: int
    time: int


def clock_of(word: int, clocks: int) -> int:
    """Fibonacci hash of the word address, reduced to ``[0, clocks)``.

    The top bits of the 64-bit product select the clock, so the reduction
    works for any clock count, not only powers of two.
    """
    if clocks < 1:
        raise ValueError("clock count must be positive")
    h = ((word >> 3) * _GOLDEN64) & _MASK64
    return (h * clocks) >> 64


class AllocationCounter:
    """Test hook counting every storage acquisition made by agent code."""

    def __init__(self) -> None:
        self.count = 0
        self.cells = 0

    def note(self, cells: int) -> None:
        self.count += 1
        self.cells += cells


class FixedMap:
    """Open-addressing integer map whose size is fixed at construction."""

    __slots__ = ("_keys", "_vals", "_mask", "size")
    _EMPTY = -1

    def __init__(self, capacity: int, allocator: AllocationCounter | None = None) -> None:
        cap = 1
        while cap < 2 * capacity:
            cap <<= 1
        self._keys = [self._EMPTY] * cap
        self._vals = [0] * cap
        self._mask = cap - 1
        self.size = 0
        if allocator is not None:
            allocator.note(2 * cap)

    def _slot(self, key: int) -> int:
        mask = self._mask
        i = (key * _GOLDEN64 >> 13) & mask
        keys = self._keys
        while keys[i] != self._EMPTY and keys[i] != key:
            i = (i + 1) & mask
        return i

    def get(self, key: int, default=None):
        i = self._slot(key)
        return self._vals[i] if self._keys[i] == key else default

    def put(self, key: int, value: int) -> None:
        i = self._slot(key)
        if self._keys[i] != key:
            if 2 * (self.size + 1) > len(self._keys):
                raise CapacityExhausted("correspondence table is full")
            self._keys[i] = key
            self.size += 1
        self._vals[i] = value


class HiddenHandle:
    """Opaque capability naming a hidden ring array. Compares by identity of token."""

    __slots__ = ("_token",)

    def __init__(self, token: int) -> None:
        self._token = token

    def __eq__(self, other: object) -> bool:
        return isinstance(other, HiddenHandle) and other._token == self._token

    def __hash__(self) -> int:
        return hash(self._token)

    def __repr__(self) -> str:
        return "HiddenHandle(<opaque>)"


class ReplicationChannel:
    """Everything the master shares with the slaves: rings plus master-only locks."""

    def __init__(self, strategy: Strategy, threads: int, replicae: int, *,
                 capacity: int = DEFAULT_CAPACITY, clocks: int = DEFAULT_CLOCKS,
                 allocator: AllocationCounter | None = None) -> None:
        self.strategy = strategy
        self.threads = threads
        self.clocks = clocks
        consumers = range(1, replicae)
        if strategy.uses_clocks:
            self.rings = [ReplicationRing(WocRecord, capacity, consumers, allocator)
                          for _ in range(threads)]
            self.master_wall = [0] * clocks
            self.clock_owner: list = [None] * clocks
            self.clock_line_owner: list = [None] * clocks
            self.clock_busy = [0] * clocks
            self.clock_channel = Channel("clock-regions")
            if allocator is not None:
                allocator.note(4 * clocks)
        else:
            self.rings = [ReplicationRing(SyncOpRecord, capacity, consumers, allocator)]
            self.log_lock = SimLock("logging-region")
        self.ring_channels = [Channel(f"ring{i}") for i in range(len(self.rings))]
        # one shared progress line per (ring, replica): written by every slave thread
        self.progress_lines = [[Line() for _ in range(replicae)] for _ in self.rings]
        self.ring_bytes = capacity * 32

    @property
    def span(self) -> int:
        return len(self.rings) * self.ring_bytes


RecordTamper = Callable[[int, tuple], tuple]


class Agent:
    """The replication agent instance living in one replica."""

    def __init__(self, strategy: Strategy, replica: ReplicaId, channel: ReplicationChannel,
                 engine: Engine, memory, registry, *, costs: CostModel = DEFAULT_COSTS,
                 window: int = DEFAULT_WINDOW, map_capacity: int = DEFAULT_MAP_CAPACITY,
                 allocator: AllocationCounter | None = None,
                 record_tamper: RecordTamper | None = None) -> None:
        self.strategy = strategy
        self.replica = replica
        self.ordinal = replica.ordinal
        self.channel = channel
        self.engine = engine
        self.memory = memory
        self.costs = costs
        self.window = window
        self.record_tamper = record_tamper
        self.registered = False
        self.recorded = 0
        self.replayed = 0
        self.window_stalls = 0

        self.flags_address = Address(AGENT_AREA + self.ordinal * 0x10_0000)
        memory.cells[self.flags_address] = 0 if replica.is_master else FLAG_SLAVE

        # map the shared rings into this replica at a randomized location
        self.handle: HiddenHandle | None = None
        if strategy is Strategy.SECURED_WALL_OF_CLOCKS:
            self.handle = registry.allocate_hidden_buffer(self.ordinal, channel.span)
            base = registry.resolve_base(self.handle)
        else:
            base = registry.place(self.ordinal, channel.span)
        self._registry = registry
        self._rings_by_location = {base + i * channel.ring_bytes: i
                                   for i in range(len(channel.rings))}
        if strategy is not Strategy.SECURED_WALL_OF_CLOCKS:
            # the unsecured agents keep a thread-local pointer to their ring
            for t in range(channel.threads):
                ring_index = t if strategy.uses_clocks else 0
                memory.cells[self._tls_address(t)] = base + ring_index * channel.ring_bytes
        del base

        if not replica.is_master:
            if strategy.uses_clocks:
                self.local_wall = [0] * channel.clocks
                self.local_clock_owner: list = [None] * channel.clocks
                self.local_clock_busy = [0] * channel.clocks
                self.word_clock = FixedMap(map_capacity, allocator)
                self.wall_channel = Channel(f"wall{self.ordinal}")
                if allocator is not None:
                    allocator.note(3 * channel.clocks)
            else:
                self.master_to_local = FixedMap(map_capacity, allocator)
                self.local_to_master = FixedMap(map_capacity, allocator)
                if strategy is Strategy.PARTIAL_ORDER:
                    cap = channel.rings[0].capacity
                    self.consumed = bytearray(cap)
                    self.po_version = 0
                    if allocator is not None:
                        allocator.note(cap)

    def _tls_address(self, thread: int) -> Address:
        return Address(AGENT_AREA + self.ordinal * 0x10_0000 + _TLS_OFFSET + 8 * thread)

    def agent_register(self, thread: int = 0) -> RvpEvent:
        """The one rendezvous an agent ever causes: hand the flag cell to the monitor."""
        if self.registered:
            raise DoubleRegistration(f"replica {self.ordinal} registered its agent twice")
        self.registered = True
        return RvpEvent(thread, Call.AGENT_REGISTER,
                        (ReplicaLocal(self.flags_address, "agent-flags"),))

    # flags written by the monitor

    @property
    def enabled(self) -> bool:
        return bool(self.memory.cells[self.flags_address] & FLAG_ENABLED)

    @property
    def is_master(self) -> bool:
        return not self.memory.cells[self.flags_address] & FLAG_SLAVE

    def ring_locations(self) -> list[int]:
        return list(self._rings_by_location)

    def resolve_hidden(self, handle: HiddenHandle, thread: int) -> int:
        """Location of ``thread``'s ring, obtained through the capability."""
        base = self._registry.resolve_base(handle)
        return base + thread * self.channel.ring_bytes

    def _ring_index(self, task: Task) -> int:
        if self.handle is not None:
            location = self.resolve_hidden(self.handle, task.tid)
        else:
            location = self.memory.cells[self._tls_address(task.tid)]
        return self._rings_by_location[location]

    # dispatch

    def sync(self, task: Task, word: int, kind: OpKind, perform: Callable[[], int]):
        """Record or replay one sync op; generator returning the op's result."""
        if not self.enabled:
            return perform()
        if self.is_master:
            return (yield from self.record(task, word, kind, perform))
        if self.strategy is Strategy.TOTAL_ORDER:
            return (yield from self.replay_total_order(task, word, kind, perform))
        if self.strategy is Strategy.PARTIAL_ORDER:
            return (yield from self.replay_partial_order(task, word, kind, perform))
        return (yield from self.replay_wall_of_clocks(task, word, kind, perform))

    # master side

    def record(self, task: Task, word: int, kind: OpKind, perform: Callable[[], int]):
        if self.strategy.uses_clocks:
            return (yield from self._record_clocked(task, word, kind, perform))
        return (yield from self._record_serialized(task, word, kind, perform))

    def _publish(self, task: Task, ring_index: int, record: tuple):
        ring = self.channel.rings[ring_index]
        if self.record_tamper is not None:
            record = self.record_tamper(ring.head, record)
        index = ring.try_publish(record)
        while index is None:
            yield Wait(self.channel.ring_channels[ring_index], lambda: not ring.is_full())
            index = ring.try_publish(record)
        self.recorded += 1
        self.engine.notify(self.channel.ring_channels[ring_index])
        return index

    def _record_serialized(self, task, word, kind, perform):
        costs = self.costs
        lock = self.channel.log_lock
        yield from lock.acquire(task, costs.op, costs.line_miss)
        yield costs.log
        yield from self._publish(task, self._ring_index(task),
                                 SyncOpRecord(task.tid, word, int(kind)))
        result = perform()
        lock.release(self.engine, task)
        return result

    def _record_clocked(self, task, word, kind, perform):
        ch = self.channel
        costs = self.costs
        clock = clock_of(word, ch.clocks)
        owner = ch.clock_owner
        while owner[clock] is not None:
            yield Wait(ch.clock_channel, lambda: owner[clock] is None)
        owner[clock] = task
        cost = _line_cost(ch.clock_line_owner, ch.clock_busy, clock, task, costs.op,
                          costs.line_miss) + costs.log
        yield cost
        time = ch.master_wall[clock]
        yield from self._publish(task, self._ring_index(task), WocRecord(clock, time))
        ch.master_wall[clock] = time + 1
        result = perform()
        owner[clock] = None
        self.engine.notify(ch.clock_channel)
        return result

    # slave side

    def _check_correspondence(self, task: Task, record: SyncOpRecord, word: int,
                              kind: OpKind) -> None:
        if record.kind != kind:
            raise ReplayMismatch(
                f"replica {self.ordinal} thread {task.tid}: log says {OpKind(record.kind).name}, "
                f"program performs {OpKind(kind).name}",
                replica=self.ordinal, thread=task.tid, field="sync-op.kind",
                master_value=record.kind, deviant_value=int(kind))
        local = self.master_to_local.get(record.word)
        master = self.local_to_master.get(word)
        if local is None and master is None:
            self.master_to_local.put(record.word, word)
            self.local_to_master.put(word, record.word)
        elif local != word or master != record.word:
            raise ReplayMismatch(
                f"replica {self.ordinal} thread {task.tid}: master word {record.word:#x} "
                f"does not correspond to local word {word:#x}",
                replica=self.ordinal, thread=task.tid, field="sync-op.word",
                master_value=record.word, deviant_value=word)

    def _consume_cost(self, task: Task, ring_index: int) -> int:
        costs = self.costs
        line = self.channel.progress_lines[ring_index][self.ordinal]
        return line.cost(task, costs.op, costs.line_miss) + costs.slot_read

    def replay_total_order(self, task, word, kind, perform):
        ring_index = self._ring_index(task)
        ring = self.channel.rings[ring_index]
        chan = self.channel.ring_channels[ring_index]
        r = self.ordinal
        tid = task.tid
        progress = ring.progress
        while True:
            pos = progress[r]
            if ring.is_published(pos):
                if ring.field(pos, 0) == tid:
                    break
                yield Wait(chan, lambda: progress[r] != pos)
            else:
                yield Wait(chan, lambda: ring.is_published(pos))
        yield self._consume_cost(task, ring_index)
        record = ring.read_slot(pos)
        self._check_correspondence(task, record, word, kind)
        result = perform()
        ring.advance_progress(r, pos + 1)
        self.replayed += 1
        self.engine.notify(chan)
        return result

    def _po_candidate(self, ring: ReplicationRing, tid: int) -> int:
        """Earliest eligible entry of ``tid``; -1 when it must wait.

        Raises :class:`WindowExhausted` when the lookahead window is full of
        other threads' entries.
        """
        consumed = self.consumed
        mask = ring.capacity - 1
        prefix = ring.progress[self.ordinal]
        head = ring.head
        limit = min(head, prefix + self.window)
        i = prefix
        while i < limit:
            if not consumed[i & mask] and ring.field(i, 0) == tid:
                break
            i += 1
        else:
            if head >= prefix + self.window:
                raise WindowExhausted(f"thread {tid} not within {self.window} entries")
            return -1
        w = ring.field(i, 1)
        for j in range(prefix, i):
            if not consumed[j & mask] and ring.field(j, 1) == w:
                return -1
        return i

    def replay_partial_order(self, task, word, kind, perform):
        ring = self.channel.rings[self._ring_index(task)]
        chan = self.channel.ring_channels[0]
        r = self.ordinal
        tid = task.tid
        while True:
            try:
                entry = self._po_candidate(ring, tid)
            except WindowExhausted:
                self.window_stalls += 1
                entry = -1
            if entry >= 0:
                break
            head, version = ring.head, self.po_version
            yield Wait(chan, lambda: ring.head != head or self.po_version != version)
        scanned = entry - ring.progress[r] + 1
        yield self._consume_cost(task, 0) + scanned * self.costs.scan
        record = ring.read_slot(entry)
        self._check_correspondence(task, record, word, kind)
        result = perform()
        consumed = self.consumed
        mask = ring.capacity - 1
        consumed[entry & mask] = 1
        prefix = start = ring.progress[r]
        while prefix < ring.head and consumed[prefix & mask]:
            consumed[prefix & mask] = 0
            prefix += 1
        if prefix != start:
            ring.advance_progress(r, prefix)
        self.po_version += 1
        self.replayed += 1
        self.engine.notify(chan)
        return result

    def replay_wall_of_clocks(self, task, word, kind, perform):
        ring_index = self._ring_index(task)
        ring = self.channel.rings[ring_index]
        chan = self.channel.ring_channels[ring_index]
        r = self.ordinal
        pos = ring.progress[r]
        if not ring.is_published(pos):
            yield Wait(chan, lambda: ring.is_published(pos))
        yield self._consume_cost(task, ring_index)
        clock, time = ring.read_slot(pos)
        if not 0 <= clock < self.channel.clocks:
            raise ReplayMismatch(f"replica {r} thread {task.tid}: clock {clock} out of range",
                                 replica=r, thread=task.tid, field="sync-op.clock",
                                 master_value=clock, deviant_value=None)
        known = self.word_clock.get(word)
        if known is None:
            self.word_clock.put(word, clock)
        elif known != clock:
            raise ReplayMismatch(
                f"replica {r} thread {task.tid}: word {word:#x} previously replayed on "
                f"clock {known}, log now says {clock}",
                replica=r, thread=task.tid, field="sync-op.clock",
                master_value=clock, deviant_value=known)
        wall = self.local_wall
        if wall[clock] != time:
            if wall[clock] < time:
                yield Wait(self.wall_channel, lambda: wall[clock] >= time)
            if wall[clock] != time:
                raise ReplayMismatch(
                    f"replica {r} thread {task.tid}: clock {clock} already at {wall[clock]}, "
                    f"log expects {time}", replica=r, thread=task.tid, field="sync-op.time",
                    master_value=time, deviant_value=wall[clock])
        yield _line_cost(self.local_clock_owner, self.local_clock_busy, clock, task,
                         self.costs.op, self.costs.line_miss)
        result = perform()
        wall[clock] = time + 1
        ring.advance_progress(r, pos + 1)
        self.replayed += 1
        self.engine.notify(self.wall_channel)
        self.engine.notify(chan)
        return result


def _line_cost(owners: list, busy: list, index: int, task: Task, hit: int, miss: int) -> int:
    if owners[index] is task:
        start, dur = task.time, hit
    else:
        start, dur = max(task.time, busy[index]), miss
        owners[index] = task
    busy[index] = start + dur
    return start + dur - task.time
