"""Bounded replication rings with sequence-numbered slots.

A ring has exactly one logical producer stream. Each slot carries a
sequence word next to the payload fields; the producer marks the slot odd
while writing and even once the fields are complete, so a consumer can
validate a slot without looking at ``head``. Consumers report how far they
got through per-replica progress cells, and the producer never reuses a
slot that some consumer still needs.
"""

from __future__ import annotations

import os
import time
from collections.abc import Iterable, Sequence
from typing import Any

from mvee.errors import NotYetPublished, Overwritten, Regression

DEFAULT_CAPACITY = 65536
SPIN_LIMIT = 1024


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


class ReplicationRing:
    """Single-producer ring read by any number of consumer replicae.

    ``record_type`` is a ``NamedTuple`` class; its fields are stored in
    preallocated parallel lists so that publishing never allocates.
    """

    def __init__(self, record_type: type, capacity: int = DEFAULT_CAPACITY,
                 consumers: Iterable[int] = (1,), allocator=None) -> None:
        if not _is_power_of_two(capacity):
            raise ValueError(f"capacity must be a power of two, got {capacity}")
        self.record_type = record_type
        self.capacity = capacity
        self._mask = capacity - 1
        self._fields: tuple[list, ...] = tuple([0] * capacity for _ in record_type._fields)
        self._seq = [0] * capacity
        self.head = 0
        self.consumers = tuple(sorted(set(consumers)))
        size = max(self.consumers, default=-1) + 1
        self.progress = [0] * size
        if allocator is not None:
            allocator.note(capacity * (len(self._fields) + 1) + size)

    # producer side

    def reuse_limit(self) -> int:
        """Highest head value the producer may reach right now."""
        if not self.consumers:
            return self.head + self.capacity
        return min(self.progress[c] for c in self.consumers) + self.capacity

    def is_full(self) -> bool:
        return self.head >= self.reuse_limit()

    def try_publish(self, record: Sequence[Any]) -> int | None:
        """Publish ``record`` unless the ring is full; return its position."""
        index = self.head
        if index >= self.reuse_limit():
            return None
        slot = index & self._mask
        seq = self._seq
        seq[slot] = 2 * index + 1
        for column, value in zip(self._fields, record):
            column[slot] = value
        seq[slot] = 2 * index + 2
        self.head = index + 1
        return index

    def publish(self, record: Sequence[Any], spin: int = SPIN_LIMIT) -> int:
        """Blocking publish for real threads: spin, then yield the CPU."""
        spins = 0
        while True:
            index = self.try_publish(record)
            if index is not None:
                return index
            spins += 1
            if spins >= spin:
                _yield_cpu()

    def overwrite(self, index: int, record: Sequence[Any]) -> None:
        """Rewrite an already published slot in place (attack simulation)."""
        slot = index & self._mask
        if self._seq[slot] != 2 * index + 2:
            raise Overwritten(f"position {index} is not live")
        self._seq[slot] = 2 * index + 1
        for column, value in zip(self._fields, record):
            column[slot] = value
        self._seq[slot] = 2 * index + 2

    # consumer side

    def is_published(self, index: int) -> bool:
        return self._seq[index & self._mask] >= 2 * index + 2

    def read_slot(self, index: int):
        slot = index & self._mask
        expected = 2 * index + 2
        before = self._seq[slot]
        if before < expected:
            raise NotYetPublished(f"position {index} not published (head {self.head})")
        if before != expected:
            raise Overwritten(f"position {index} was recycled")
        values = [column[slot] for column in self._fields]
        if self._seq[slot] != before:
            raise Overwritten(f"position {index} changed while being read")
        return self.record_type(*values)

    def field(self, index: int, column: int):
        """Read one payload field of a position known to be live."""
        return self._fields[column][index & self._mask]

    def advance_progress(self, replica: int, new_prefix: int) -> None:
        current = self.progress[replica]
        if new_prefix < current:
            raise Regression(f"replica {replica}: progress {current} -> {new_prefix}")
        if new_prefix > self.head:
            raise Regression(f"replica {replica}: progress {new_prefix} beyond head {self.head}")
        self.progress[replica] = new_prefix

    def snapshot(self, start: int = 0) -> list:
        """Published records from ``start`` that are still resident."""
        lo = max(start, self.head - self.capacity)
        return [self.read_slot(i) for i in range(lo, self.head)]


def _yield_cpu() -> None:
    if hasattr(os, "sched_yield"):
        os.sched_yield()
    else:  # pragma: no cover
        time.sleep(0)
