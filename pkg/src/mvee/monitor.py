"""Lock-step monitor: rendezvous, comparison, futex arbitration, agent control.

Every monitor-visible event of a replica thread is submitted to a
rendezvous slot keyed by (thread, per-thread event index). The last replica
to arrive completes the slot: the normalized events are compared, and on a
match the call is executed once, on behalf of the master, and its result is
handed to every replica. On a mismatch the whole run stops before the call
takes effect.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, Sequence, Union

from mvee.agents import FLAG_ENABLED, FLAG_SLAVE, HiddenHandle
from mvee.core import (AddressMap, Call, NormalizedEvent, ReplicaLocal, Role,
                       RvpEvent, normalize_event)
from mvee.costs import DEFAULT_COSTS, CostModel
from mvee.errors import (DeadlockDetected, DivergenceDetected, InvalidCapability,
                         RendezvousTimeout, UnknownAddress, UnknownReplica,
                         UnsupportedTransition)
from mvee.kernel import WOULD_BLOCK
from mvee.sim import PARK

MASTER_PID = 4242
PAGE = 4096
HIDDEN_LOW = 0x1000_0000_0000
HIDDEN_HIGH = 0x4000_0000_0000


@dataclass(frozen=True)
class DivergenceReport:
    replica: int
    thread: int
    event_index: int
    field: str
    master_value: Any
    deviant_value: Any
    reason: str = "event mismatch"

    def as_json(self) -> dict:
        return {
            "replica": self.replica,
            "thread": self.thread,
            "event_index": self.event_index,
            "field": self.field,
            "master_value": _plain(self.master_value),
            "deviant_value": _plain(self.deviant_value),
            "reason": self.reason,
        }

    def __str__(self) -> str:
        return (f"divergence in replica {self.replica}, thread {self.thread}, event "
                f"{self.event_index}: {self.field} master={self.master_value!r} "
                f"deviant={self.deviant_value!r} ({self.reason})")


def _plain(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.decode("latin-1")
    if isinstance(value, (int, float, str)) or value is None:
        return value
    return repr(value)


@dataclass(frozen=True)
class Allow:
    result: Any = None


@dataclass(frozen=True)
class Divergence:
    report: DivergenceReport


Verdict = Union[Allow, Divergence]


def first_difference(master: NormalizedEvent, other: NormalizedEvent):
    """``(field, master_value, deviant_value)`` of the first mismatch, or None."""
    if master.call != other.call:
        return "call", master.call.value, other.call.value
    if len(master.args) != len(other.args):
        return "args.length", len(master.args), len(other.args)
    for i, (a, b) in enumerate(zip(master.args, other.args)):
        if a == b:
            continue
        if isinstance(a, bytes) and isinstance(b, bytes):
            for j, (x, y) in enumerate(zip(a, b)):
                if x != y:
                    return f"args[{i}][{j}]", bytes([x]), bytes([y])
            return f"args[{i}].length", len(a), len(b)
        return f"args[{i}]", a, b
    return None


def lockstep_step(events: Sequence[RvpEvent | NormalizedEvent],
                  address_maps: Sequence[AddressMap] | None = None, *,
                  event_index: int = 0, master_result: Any = None) -> Verdict:
    """Compare one event per replica (master first) and decide.

    Raw events are normalized with the given per-replica address maps; an
    address outside the declared variables counts as divergence.
    """
    normalized: list[NormalizedEvent] = []
    for r, ev in enumerate(events):
        if isinstance(ev, RvpEvent):
            try:
                ev = normalize_event(ev, address_maps[r])
            except UnknownAddress as exc:
                return Divergence(DivergenceReport(r, ev.thread, event_index, "address",
                                                   None, str(exc), "unknown address"))
        normalized.append(ev)
    master = normalized[0]
    for r in range(1, len(normalized)):
        diff = first_difference(master, normalized[r])
        if diff is not None:
            return Divergence(DivergenceReport(r, master.thread, event_index, *diff))
    return Allow(master_result)


class HiddenRegistry:
    """Monitor-side table of hidden ring locations.

    Locations are page aligned and drawn independently per replica from a
    large randomized range. Capabilities are random 128-bit tokens; only
    tokens issued here resolve.
    """

    def __init__(self, seed: int = 0) -> None:
        self._rng = random.Random(seed ^ 0x5EC0_0ED)
        self._table: dict[int, tuple[int, int]] = {}
        self._placed: dict[int, list[int]] = {}

    def _location(self, span: int) -> int:
        pages = (HIDDEN_HIGH - HIDDEN_LOW - span) // PAGE
        return HIDDEN_LOW + self._rng.randrange(pages) * PAGE

    def place(self, replica: int, span: int = PAGE) -> int:
        loc = self._location(span)
        self._placed.setdefault(replica, []).append(loc)
        return loc

    def allocate_hidden_buffer(self, replica: int, span: int = PAGE) -> HiddenHandle:
        loc = self.place(replica, span)
        token = self._rng.getrandbits(128)
        self._table[token] = (replica, loc)
        return HiddenHandle(token)

    def resolve_base(self, handle: HiddenHandle) -> int:
        entry = self._table.get(getattr(handle, "_token", None))
        if entry is None:
            raise InvalidCapability("capability was not issued by this monitor")
        return entry[1]

    def locations(self, replica: int) -> tuple[int, ...]:
        return tuple(self._placed.get(replica, ()))


class _Slot:
    __slots__ = ("key", "events", "raw", "tasks", "arrivals", "time")

    def __init__(self, key, n: int) -> None:
        self.key = key
        self.events: list = [None] * n
        self.raw: list = [None] * n
        self.tasks: list = [None] * n
        self.arrivals = 0
        self.time = 0


class Monitor:
    """Rendezvous point for all replicae of one session.

    ``replicae`` are runtime replica objects exposing ``ordinal``,
    ``addresses``, ``memory``, ``kernel``, ``stream``, ``stats`` and
    ``start_thread``. With ``monitored=False`` (a single replica run natively)
    calls cost the native price and nothing is compared.
    """

    def __init__(self, engine, replicae: Sequence, *, arbitrate: bool = True,
                 monitored: bool = True, costs: CostModel = DEFAULT_COSTS,
                 registry: HiddenRegistry | None = None, event_tamper=None) -> None:
        self.engine = engine
        self.replicae = list(replicae)
        self.n = len(self.replicae)
        self.arbitrate = arbitrate
        self.monitored = monitored
        self.costs = costs
        self.registry = registry or HiddenRegistry()
        self.event_tamper = event_tamper
        self.slots: dict[tuple[int, int], _Slot] = {}
        self.flags: dict[int, int] = {}
        self.roles: dict[int, Role] = {}
        self.live_workers = 0
        self.external: list[tuple[int, bytes]] = []
        self.opened = 0
        self.divergence: DivergenceReport | None = None
        self._call_cost = costs.syscall_monitored if monitored else costs.syscall_native

    # agent control

    def register(self, replica: int, flags_address: int) -> None:
        self.flags[replica] = flags_address
        self.roles[replica] = Role.MASTER if replica == 0 else Role.SLAVE
        self.set_agent_state(replica, self.roles[replica], False)

    def set_agent_state(self, replica: int, role: Role, enabled: bool) -> None:
        if replica not in self.flags:
            raise UnknownReplica(f"replica {replica} has not registered an agent")
        if role is not self.roles[replica]:
            raise UnsupportedTransition(
                f"replica {replica} cannot change role from {self.roles[replica].value} "
                f"to {role.value} while running")
        value = (FLAG_ENABLED if enabled else 0) | (FLAG_SLAVE if role is Role.SLAVE else 0)
        self.replicae[replica].memory.cells[self.flags[replica]] = value

    def _set_all_enabled(self, enabled: bool) -> None:
        for r in self.flags:
            self.set_agent_state(r, self.roles[r], enabled)

    # rendezvous

    def stuck(self, tasks) -> Exception:
        pending = [s for s in self.slots.values() if s.arrivals < self.n]
        if pending:
            s = pending[0]
            missing = [r for r in range(self.n) if s.events[r] is None]
            return RendezvousTimeout(
                f"replicae {missing} never reached event {s.key[1]} of thread {s.key[0]} "
                f"({len(pending)} rendezvous pending, {len(tasks)} contexts blocked)")
        return DeadlockDetected(f"{len(tasks)} contexts blocked: "
                                + ", ".join(t.name for t in tasks[:6]))

    def rendezvous(self, replica, task, event: RvpEvent):
        """Generator run by a replica thread at an RVP; returns the call's result."""
        tid = event.thread
        index = replica.event_index[tid]
        replica.event_index[tid] = index + 1
        if self.event_tamper is not None:
            event = self.event_tamper(replica.ordinal, tid, index, event)
        replica.stats.syscalls += 1
        if event.call is Call.FUTEX_WAIT or event.call is Call.FUTEX_WAKE:
            # other calls commute with every other thread's memory effects
            task.visible = True
        try:
            normalized = normalize_event(event, replica.addresses)
        except UnknownAddress as exc:
            self._diverge(DivergenceReport(replica.ordinal, tid, index, "address", None,
                                           str(exc), "unknown address"))
        key = (tid, index)
        slot = self.slots.get(key)
        if slot is None:
            slot = self.slots[key] = _Slot(key, self.n)
        r = replica.ordinal
        slot.events[r] = normalized
        slot.raw[r] = event
        slot.tasks[r] = task
        slot.arrivals += 1
        if task.time > slot.time:
            slot.time = task.time
        if slot.arrivals < self.n:
            value = yield PARK
            return value
        del self.slots[key]
        own = self._complete(slot, r)
        if own is PARK:
            value = yield PARK
            return value
        value, at = own
        if at > task.time:
            yield at - task.time
        return value

    def _diverge(self, report: DivergenceReport):
        self.divergence = report
        raise DivergenceDetected(report)

    def _complete(self, slot: _Slot, current: int):
        if self.n > 1:
            verdict = lockstep_step(slot.events, event_index=slot.key[1])
            if isinstance(verdict, Divergence):
                self._diverge(verdict.report)
        call = slot.events[0].call
        at = slot.time + self._call_cost
        if call is Call.FUTEX_WAIT or call is Call.FUTEX_WAKE:
            if self.arbitrate or self.n == 1:
                return self.arbitrate_futex(slot, current, at)
            return self._futex_unarbitrated(slot, current, at)
        result = self._execute(slot, at)
        return self._release(slot, result, at, current)

    def _release(self, slot: _Slot, result, at: int, current: int | None,
                 replicas: Sequence[int] | None = None):
        own = None
        for r in (range(self.n) if replicas is None else replicas):
            rep = self.replicae[r]
            rep.stream.append(slot.events[r].with_result(result))
            if r == current:
                own = (result, at)
            else:
                self.engine.wake(slot.tasks[r], result, at)
        return own

    def _execute(self, slot: _Slot, at: int):
        """Perform a non-futex call once, for the master; returns its result."""
        ev = slot.raw[0]
        call = ev.call
        if call is Call.WRITE:
            payload = ev.args[0] if ev.args else b""
            self.external.append((ev.thread, payload))
            return len(payload)
        if call is Call.READ:
            return 0
        if call is Call.OPEN:
            self.opened += 1
            return 2 + self.opened
        if call is Call.GETPID:
            return MASTER_PID
        if call is Call.SPAWN:
            child = ev.args[0]
            for rep in self.replicae:
                rep.start_thread(child, at)
            self.live_workers += 1
            if self.live_workers == 1:
                self._set_all_enabled(True)
            return child
        if call is Call.JOIN:
            self.live_workers -= 1
            if self.live_workers == 0:
                self._set_all_enabled(False)
            return 0
        if call is Call.AGENT_REGISTER:
            for r, raw in enumerate(slot.raw):
                flag = raw.args[0]
                self.register(r, flag.value if isinstance(flag, ReplicaLocal) else flag)
            return 0
        raise ValueError(f"unsupported call {call}")

    # futexes

    def arbitrate_futex(self, slot: _Slot, current: int, at: int):
        """Run the master's futex call; slaves only mirror its outcome."""
        master = self.replicae[0]
        ev = slot.raw[0]
        address = ev.args[0]
        for rep in self.replicae:
            if ev.call is Call.FUTEX_WAIT:
                rep.stats.futex_waits += 1
            else:
                rep.stats.futex_wakes += 1
        if ev.call is Call.FUTEX_WAIT:
            res = master.kernel.wait(slot, address, ev.args[1], master.memory.cells[address])
            if res == WOULD_BLOCK:
                return self._release(slot, WOULD_BLOCK, at, current)
            return PARK  # every replica's thread stays parked until the master wakes
        woken = master.kernel.wake(address, ev.args[1])
        own = self._release(slot, len(woken), at, current)
        for waiter in woken:
            self._release(waiter, 0, at + self.costs.wake, None)
        return own

    def _futex_unarbitrated(self, slot: _Slot, current: int, at: int):
        """Test-only mode: every replica runs its own kernel and keeps its own result."""
        own = None
        for r, rep in enumerate(self.replicae):
            ev = slot.raw[r]
            address = ev.args[0]
            if ev.call is Call.FUTEX_WAIT:
                rep.stats.futex_waits += 1
                res = rep.kernel.wait((slot, r), address, ev.args[1], rep.memory.cells[address])
                if res == WOULD_BLOCK:
                    got = self._release(slot, WOULD_BLOCK, at, current, (r,))
                    own = got if got is not None else own
                elif r == current:
                    own = PARK
            else:
                rep.stats.futex_wakes += 1
                woken = rep.kernel.wake(address, ev.args[1])
                got = self._release(slot, len(woken), at, current, (r,))
                own = got if got is not None else own
                for waiter, wr in woken:
                    self._release(waiter, 0, at + self.costs.wake, None, (wr,))
        return own

    def pending(self) -> int:
        return len(self.slots)

    def master_waiting(self) -> bool:
        """True while some call the master has reached still lacks a slave."""
        return any(s.tasks[0] is not None for s in self.slots.values())

