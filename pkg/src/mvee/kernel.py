"""Per-replica virtual kernel: futex wait queues."""

from __future__ import annotations

import random
from collections import deque

WOULD_BLOCK = -11  # mirrors -EWOULDBLOCK
BLOCKED = None


class VirtualFutexTable:
    """Map from word address to a FIFO of parked waiters.

    Wake picks its victims with a seeded generator, so which of several
    waiters is released depends on the replica's seed, exactly the freedom a
    real kernel has.
    """

    def __init__(self, seed: int = 0, picker=None) -> None:
        self.queues: dict[int, deque] = {}
        self.rng = random.Random(seed)
        self.picker = picker or self.rng.randrange
        self.waits = 0
        self.wakes = 0
        self._where: dict[object, int] = {}

    def wait(self, waiter, address: int, expected: int, current: int):
        """Enqueue ``waiter`` unless the word already changed."""
        self.waits += 1
        if current != expected:
            return WOULD_BLOCK
        if waiter in self._where:
            raise RuntimeError(f"{waiter!r} is already waiting on {self._where[waiter]:#x}")
        self.queues.setdefault(address, deque()).append(waiter)
        self._where[waiter] = address
        return BLOCKED

    def wake(self, address: int, count: int) -> list:
        """Dequeue up to ``count`` waiters; returns them in pick order."""
        self.wakes += 1
        queue = self.queues.get(address)
        woken = []
        while queue and len(woken) < count:
            victim = queue[self.picker(len(queue)) if len(queue) > 1 else 0]
            queue.remove(victim)
            del self._where[victim]
            woken.append(victim)
        if queue is not None and not queue:
            del self.queues[address]
        return woken

    def waiting(self, address: int) -> tuple:
        return tuple(self.queues.get(address, ()))

    def __len__(self) -> int:
        return len(self._where)


def virtual_futex(table: VirtualFutexTable, op: str, address: int, *, waiter=None,
                  val: int = 0, current: int = 0, count: int = 1):
    """Functional front-end: ``op`` is ``"wait"`` or ``"wake"``.

    Wait returns :data:`WOULD_BLOCK` or :data:`BLOCKED`; wake returns the
    number of waiters released.
    """
    if op == "wait":
        return table.wait(waiter, address, val, current)
    if op == "wake":
        return len(table.wake(address, count))
    raise ValueError(f"unknown futex op {op!r}")
