"""Identifiers, diversified address layout, and address-agnostic events.

Every replica places each shared variable at its own pseudo-random address.
Events that cross the monitor boundary are compared only after
:func:`normalize_event` has replaced those addresses by variable ids.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any

from mvee.errors import UnknownAddress

ThreadId = int
VarId = int

ADDRESS_BASE = 0x7000_0000_0000
SLOT_STRIDE = 64
_SLOT_BITS = 32
_HALF_BITS = _SLOT_BITS // 2
_HALF_MASK = (1 << _HALF_BITS) - 1
_MASK64 = (1 << 64) - 1
_FEISTEL_ROUNDS = 4


class Role(enum.Enum):
    MASTER = "master"
    SLAVE = "slave"


@dataclass(frozen=True)
class ReplicaId:
    ordinal: int
    role: Role

    @property
    def is_master(self) -> bool:
        return self.role is Role.MASTER


def replica_ids(count: int) -> tuple[ReplicaId, ...]:
    """Dense ordinals ``0..count-1``; ordinal 0 is the master."""
    if count < 1:
        raise ValueError("need at least one replica")
    return tuple(ReplicaId(i, Role.MASTER if i == 0 else Role.SLAVE) for i in range(count))


class OpKind(enum.IntEnum):
    COMPARE_AND_SWAP = 0
    EXCHANGE = 1
    ATOMIC_STORE = 2
    ATOMIC_LOAD = 3
    ATOMIC_ADD_SUB = 4
    BARRIER_STORE = 5
    UNPROTECTED_LOAD = 6
    UNPROTECTED_STORE = 7


class Call(enum.Enum):
    WRITE = "write"
    READ = "read"
    OPEN = "open"
    GETPID = "getpid"
    FUTEX_WAIT = "futex_wait"
    FUTEX_WAKE = "futex_wake"
    SPAWN = "spawn"
    JOIN = "join"
    AGENT_REGISTER = "agent_register"


class Address(int):
    """A synthetic virtual address inside one replica."""

    def __repr__(self) -> str:
        return f"Address({int(self):#x})"


@dataclass(frozen=True)
class ReplicaLocal:
    """A value that legitimately differs between replicae (pids, flag cells)."""

    value: Any
    token: str = "replica-local"


@dataclass(frozen=True)
class VarRef:
    """Normalized stand-in for an :class:`Address`."""

    var: VarId

    def __repr__(self) -> str:
        return f"var{self.var}"


@dataclass(frozen=True)
class Token:
    name: str

    def __repr__(self) -> str:
        return f"<{self.name}>"


@dataclass(frozen=True)
class RvpEvent:
    thread: ThreadId
    call: Call
    args: tuple = ()

    @property
    def addresses(self) -> tuple[Address, ...]:
        return tuple(a for a in self.args if isinstance(a, Address))


@dataclass(frozen=True)
class NormalizedEvent:
    thread: ThreadId
    call: Call
    args: tuple = ()
    result: Any = None

    def with_result(self, result: Any) -> NormalizedEvent:
        return replace(self, result=result)

    def as_json(self) -> dict:
        return {
            "thread": self.thread,
            "call": self.call.value,
            "args": [_jsonable(a) for a in self.args],
            "result": _jsonable(self.result),
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.decode("latin-1")
    if isinstance(value, (VarRef, Token)):
        return repr(value)
    return value


def _mix64(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _round_keys(replica: int, seed: int) -> tuple[int, ...]:
    base = _mix64(seed * 0x9E3779B97F4A7C15 + replica * 0xD1B54A32D192ED03 + 1)
    return tuple(_mix64(base + i) for i in range(_FEISTEL_ROUNDS))


def _permute(value: int, keys: tuple[int, ...]) -> int:
    left, right = value >> _HALF_BITS, value & _HALF_MASK
    for k in keys:
        left, right = right, left ^ (_mix64(right ^ k) & _HALF_MASK)
    return (left << _HALF_BITS) | right


def _unpermute(value: int, keys: tuple[int, ...]) -> int:
    left, right = value >> _HALF_BITS, value & _HALF_MASK
    for k in reversed(keys):
        left, right = right ^ (_mix64(left ^ k) & _HALF_MASK), left
    return (left << _HALF_BITS) | right


def diversify_address(var: VarId, replica: ReplicaId | int, seed: int) -> Address:
    """Address of ``var`` in ``replica`` under diversification ``seed``.

    A keyed 4-round Feistel network permutes the 2**32 variable slots, so the
    mapping is a bijection for every (replica, seed) pair. Slots are 64 bytes
    apart, which keeps distinct variables on distinct cache lines.
    """
    if not 0 <= var < (1 << _SLOT_BITS):
        raise ValueError(f"variable id out of range: {var}")
    ordinal = replica.ordinal if isinstance(replica, ReplicaId) else replica
    slot = _permute(var, _round_keys(ordinal, seed))
    return Address(ADDRESS_BASE + slot * SLOT_STRIDE)


class AddressMap:
    """The VarId <-> Address layout of one replica, computed on demand."""

    def __init__(self, n_vars: int, replica: ReplicaId | int, seed: int) -> None:
        self.n_vars = n_vars
        self.replica = replica.ordinal if isinstance(replica, ReplicaId) else replica
        self.seed = seed
        self._keys = _round_keys(self.replica, seed)
        self._cache: dict[int, Address] = {}

    def address(self, var: VarId) -> Address:
        addr = self._cache.get(var)
        if addr is None:
            if not 0 <= var < self.n_vars:
                raise ValueError(f"undeclared variable {var}")
            addr = Address(ADDRESS_BASE + _permute(var, self._keys) * SLOT_STRIDE)
            self._cache[var] = addr
        return addr

    def var_of(self, address: int) -> VarId:
        offset = address - ADDRESS_BASE
        if offset < 0 or offset % SLOT_STRIDE:
            raise UnknownAddress(f"{address:#x} is not a shared-variable slot")
        slot = offset // SLOT_STRIDE
        if slot >> _SLOT_BITS:
            raise UnknownAddress(f"{address:#x} is outside the shared region")
        var = _unpermute(slot, self._keys)
        if var >= self.n_vars:
            raise UnknownAddress(f"{address:#x} maps to undeclared variable slot")
        return var

    def contains(self, address: int) -> bool:
        try:
            self.var_of(address)
        except UnknownAddress:
            return False
        return True


_CANONICAL: dict[str, Token] = {}


def _canonical(token: str) -> Token:
    tok = _CANONICAL.get(token)
    if tok is None:
        tok = _CANONICAL[token] = Token(token)
    return tok


def normalize_value(value: Any, addresses: AddressMap) -> Any:
    if isinstance(value, Address):
        return VarRef(addresses.var_of(value))
    if isinstance(value, ReplicaLocal):
        return _canonical(value.token)
    return value


def normalize_event(event: RvpEvent, addresses: AddressMap) -> NormalizedEvent:
    """Replace replica-specific values in ``event`` by comparable stand-ins.

    Raises :class:`UnknownAddress` when the event points outside the
    replica's declared shared variables.
    """
    args = tuple(normalize_value(a, addresses) for a in event.args)
    return NormalizedEvent(event.thread, event.call, args)


@dataclass
class EventStream:
    """Per-thread ordered normalized events of one replica."""

    threads: dict[int, list[NormalizedEvent]] = field(default_factory=dict)

    def append(self, event: NormalizedEvent) -> int:
        seq = self.threads.setdefault(event.thread, [])
        seq.append(event)
        return len(seq) - 1

    def canonical(self) -> tuple[tuple[int, tuple[NormalizedEvent, ...]], ...]:
        return tuple((t, tuple(evs)) for t, evs in sorted(self.threads.items()))

    def without(self, *calls: Call) -> EventStream:
        return EventStream({t: [e for e in evs if e.call not in calls]
                            for t, evs in self.threads.items()})

    def is_prefix_of(self, other: EventStream) -> bool:
        for t, evs in self.threads.items():
            ref = other.threads.get(t, [])
            if len(evs) > len(ref) or ref[:len(evs)] != evs:
                return False
        return True

    def __len__(self) -> int:
        return sum(len(v) for v in self.threads.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return self.canonical() == other.canonical()

    def as_json(self) -> dict:
        return {str(t): [e.as_json() for e in evs] for t, evs in sorted(self.threads.items())}
