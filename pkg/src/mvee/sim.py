"""Cooperative discrete-event engine that drives every replica thread.

Each simulated thread is a generator. It yields an ``int`` to consume that
many virtual cycles before its next action, :class:`Wait` to spin on a
condition, or :data:`PARK` to sleep until something calls
:meth:`Engine.wake` on it. Effects performed after a cost yield therefore
happen at the task's updated virtual time.

Two scheduling modes exist. *Timed* mode always resumes the task with the
smallest virtual time, breaking ties and inserting preemptions from seeded
random streams. *Controlled* mode hands every decision to a chooser
callback, which is how exhaustive interleaving enumeration works.
"""

from __future__ import annotations

import heapq
import random
import time as _time
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

from mvee.errors import DeadlockDetected

RUNNABLE, WAITING, PARKED, DONE = range(4)
PARK = object()


class Channel:
    """A set of tasks spinning on conditions that share a wake-up source."""

    __slots__ = ("name", "waiters")

    def __init__(self, name: str = "") -> None:
        self.name = name
        self.waiters: list[Task] = []

    def __repr__(self) -> str:
        return f"Channel({self.name!r}, {len(self.waiters)} waiting)"


class Wait:
    __slots__ = ("channel", "ready")

    def __init__(self, channel: Channel, ready: Callable[[], bool]) -> None:
        self.channel = channel
        self.ready = ready


class Task:
    __slots__ = ("name", "tid", "replica", "gen", "time", "state", "inbox", "wait",
                 "since", "stall", "quantum", "visible", "rng", "parked_on", "order")

    def __init__(self, name: str, tid: int, replica: Any, gen, rng: random.Random,
                 start: int = 0) -> None:
        self.name = name
        self.tid = tid
        self.replica = replica
        self.gen = gen
        self.time = start
        self.state = RUNNABLE
        self.inbox: Any = None
        self.wait: Wait | None = None
        self.since = 0
        self.stall = 0
        self.quantum = 0
        self.visible = False
        self.rng = rng
        self.parked_on: Any = None
        self.order = 0

    def __repr__(self) -> str:
        return f"Task({self.name}, t={self.time}, state={self.state})"


@dataclass(frozen=True)
class Preemption:
    """Seeded preemption policy: a quantum of 1..16 ops, then a short delay."""

    min_ops: int = 1
    max_ops: int = 16
    max_delay: int = 8


class Engine:
    def __init__(self, *, seed: int = 0, wake_latency: int = 10,
                 preemption: Preemption = Preemption(),
                 chooser: Callable[[list[Task], Task | None], Task] | None = None,
                 max_steps: int = 20_000_000, host_timeout: float | None = None,
                 on_stuck: Callable[[list[Task]], Exception] | None = None,
                 on_step: Callable[[Task], None] | None = None) -> None:
        self.rng = random.Random(seed)
        self.wake_latency = wake_latency
        self.preemption = preemption
        self.chooser = chooser
        self.max_steps = max_steps
        self.host_timeout = host_timeout
        self.on_stuck = on_stuck
        self.on_step = on_step
        self.tasks: list[Task] = []
        self.current: Task | None = None
        self.steps = 0
        self._heap: list = []
        self._counter = 0
        self._runnable: dict[int, Task] = {}

    @property
    def controlled(self) -> bool:
        return self.chooser is not None

    @property
    def now(self) -> int:
        return self.current.time if self.current is not None else 0

    def add(self, task: Task) -> Task:
        task.order = len(self.tasks)
        task.quantum = task.rng.randint(self.preemption.min_ops, self.preemption.max_ops)
        self.tasks.append(task)
        self._make_runnable(task)
        return task

    def _make_runnable(self, task: Task) -> None:
        task.state = RUNNABLE
        if self.chooser is None:
            self._counter += 1
            heapq.heappush(self._heap, (task.time, self.rng.random(), self._counter, task))
        else:
            self._runnable[task.order] = task

    def _resume_at(self, task: Task, at: int) -> None:
        if at > task.time:
            task.time = at
        task.stall += task.time - task.since

    def notify(self, channel: Channel) -> None:
        """Re-check every waiter of ``channel``; resume those now satisfied."""
        waiters = channel.waiters
        if not waiters:
            return
        at = self.now + self.wake_latency
        keep = []
        for task in waiters:
            if task.wait.ready():
                task.wait = None
                self._resume_at(task, at)
                self._make_runnable(task)
            else:
                keep.append(task)
        channel.waiters = keep

    def wake(self, task: Task, value: Any = None, at: int | None = None) -> None:
        """Resume a task that yielded :data:`PARK`."""
        if task.state != PARKED:
            raise RuntimeError(f"{task} is not parked")
        task.inbox = value
        task.parked_on = None
        self._resume_at(task, self.now if at is None else at)
        self._make_runnable(task)

    def run(self) -> None:
        started = _time.monotonic()
        while True:
            task = self._next()
            if task is None:
                break
            self._step(task)
            self.steps += 1
            if self.steps >= self.max_steps:
                raise DeadlockDetected(f"step budget of {self.max_steps} exhausted (livelock?)")
            if self.host_timeout is not None and not self.steps & 4095:
                if _time.monotonic() - started > self.host_timeout:
                    raise DeadlockDetected("host wall-clock budget exhausted")
        stuck = [t for t in self.tasks if t.state != DONE]
        if stuck:
            if self.on_stuck is not None:
                raise self.on_stuck(stuck)
            raise DeadlockDetected(f"{len(stuck)} tasks blocked: {stuck[:4]}")

    def _next(self) -> Task | None:
        if self.chooser is None:
            heap = self._heap
            while heap:
                task = heapq.heappop(heap)[3]
                if task.state == RUNNABLE:
                    return task
            return None
        if not self._runnable:
            return None
        ready = sorted(self._runnable.values(), key=lambda t: t.order)
        task = self.chooser(ready, self.current)
        del self._runnable[task.order]
        return task

    def _step(self, task: Task) -> None:
        self.current = task
        if self.on_step is not None:
            self.on_step(task)
        inbox, task.inbox = task.inbox, None
        try:
            request = task.gen.send(inbox)
        except StopIteration:
            task.state = DONE
            return
        if request.__class__ is int:
            task.time += request
            task.quantum -= 1
            if task.quantum <= 0 and self.chooser is None:
                pre = self.preemption
                task.quantum = task.rng.randint(pre.min_ops, pre.max_ops)
                task.time += task.rng.randint(0, pre.max_delay)
            self._make_runnable(task)
        elif request is None:
            self._make_runnable(task)
        elif request is PARK:
            task.state = PARKED
            task.since = task.time
        elif request.__class__ is Wait:
            if request.ready():
                self._make_runnable(task)
            else:
                task.state = WAITING
                task.wait = request
                task.since = task.time
                request.channel.waiters.append(task)
        else:
            raise TypeError(f"{task.name} yielded unsupported request {request!r}")


class Line:
    """Cache-line ownership model for one shared word.

    Access from the last owner is cheap. Any other task pays a transfer and
    cannot start before the previous transfer finished, which serializes
    ping-ponging lines the way coherence traffic does on real hardware.
    """

    __slots__ = ("owner", "busy_until")

    def __init__(self) -> None:
        self.owner: Task | None = None
        self.busy_until = 0

    def cost(self, task: Task, hit: int, miss: int) -> int:
        if self.owner is task:
            start = task.time
            dur = hit
        else:
            start = max(task.time, self.busy_until)
            dur = miss
            self.owner = task
        self.busy_until = start + dur
        return start + dur - task.time


class SimLock:
    """A mutual-exclusion region whose waiters spin in virtual time."""

    __slots__ = ("owner", "channel", "line")

    def __init__(self, name: str = "lock") -> None:
        self.owner: Task | None = None
        self.channel = Channel(name)
        self.line = Line()

    def free(self) -> bool:
        return self.owner is None

    def acquire(self, task: Task, hit: int, miss: int):
        while True:
            if self.owner is None:
                self.owner = task
                cost = self.line.cost(task, hit, miss)
                if cost:
                    yield cost
                return
            yield Wait(self.channel, self.free)

    def release(self, engine: Engine, task: Task) -> None:
        if self.owner is not task:
            raise RuntimeError(f"{task.name} released a lock it does not own")
        self.owner = None
        engine.notify(self.channel)
