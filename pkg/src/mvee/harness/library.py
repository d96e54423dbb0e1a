"""Built-in workloads, generated as DSL text and parsed.

``threads`` always counts the worker threads that thread 0 spawns; thread 0
itself only forks, joins and reports. Each generator is deterministic in
its parameters.
"""

from __future__ import annotations

import random
from collections.abc import Callable

from mvee.workload import Workload, parse_workload


def _program(name: str, vars_: list[str], bodies: list[list[str]]) -> Workload:
    lines = [f"workload {name}"]
    for i in range(0, len(vars_), 16):
        lines.append("vars " + " ".join(vars_[i:i + 16]))
    for tid, body in enumerate(bodies):
        lines.append(f"thread {tid}:")
        lines.extend("    " + s for s in body)
    return parse_workload("\n".join(lines) + "\n")


def _fork_join(workers: int, tail: list[str] | None = None) -> list[str]:
    body = [f"spawn {t}" for t in range(1, workers + 1)]
    body += [f"join {t}" for t in range(1, workers + 1)]
    return body + (tail or [])


def independent(threads: int = 4, ops: int = 8, work: int = 4000) -> Workload:
    """Data-parallel kernel: each worker touches only its own counter."""
    vars_ = [f"p{t}=0" for t in range(1, threads + 1)]
    bodies = [_fork_join(threads, ['syscall write "done"'])]
    for t in range(1, threads + 1):
        body = []
        for _ in range(ops):
            body += [f"compute {work // ops}", f"add p{t} 1"]
        body += [f"load p{t}", "syscall write r"]
        bodies.append(body)
    return _program("independent", vars_, bodies)


def finegrain(threads: int = 4, ops: int = 8, mutexes: int = 1024,
              budget: int = 4000) -> Workload:
    """Many distinct mutexes, short critical sections, fork/join.

    The total compute per worker is fixed at ``budget`` cycles, so raising
    ``ops`` raises the sync-op density proportionally.
    """
    rng = random.Random(f"finegrain/{threads}/{ops}/{mutexes}")
    vars_ = [f"m{i}=0" for i in range(mutexes)] + [f"d{i}=0" for i in range(mutexes)]
    bodies = [_fork_join(threads, ['syscall write "done"'])]
    gap = max(1, budget // ops)
    for _ in range(threads):
        body = []
        for _ in range(ops):
            k = rng.randrange(mutexes)
            body += [f"compute {gap}", f"lock m{k}", f"add d{k} 1", f"unlock m{k}"]
        bodies.append(body)
    return _program("finegrain", vars_, bodies)


def alloc_lock(threads: int = 4, ops: int = 8, work: int = 3000) -> Workload:
    """Allocator-style hot lock: every worker keeps grabbing one global mutex."""
    vars_ = ["heap=0", "brk=0"] + [f"obj{t}=0" for t in range(1, threads + 1)]
    bodies = [_fork_join(threads, ["load brk", "syscall write r"])]
    for t in range(1, threads + 1):
        body = []
        for _ in range(ops):
            body += [f"compute {work // ops}", "lock heap", "add brk 1", "unlock heap",
                     f"add obj{t} 1"]
        bodies.append(body)
    return _program("alloc-lock", vars_, bodies)


def pipeline(threads: int = 4, items: int = 6, work: int = 300) -> Workload:
    """One producer, ``threads - 1`` consumers, a condvar-guarded queue count."""
    if threads < 2:
        raise ValueError("pipeline needs a producer and at least one consumer")
    consumers = threads - 1
    per = [items // consumers + (1 if i < items % consumers else 0) for i in range(consumers)]
    total = sum(per)
    vars_ = ["m=0", "cv=0", "count=0", "taken=0"]
    bodies = [_fork_join(threads, ["load taken", "syscall write r"])]
    producer = []
    for _ in range(total):
        producer += [f"compute {work}", "lock m", "add count 1", "signal cv", "unlock m"]
    bodies.append(producer)
    for n in per:
        body = []
        for _ in range(n):
            body += ["lock m", "wait cv m until count > 0", "add count -1", "add taken 1",
                     "unlock m", f"compute {work // 2}"]
        body.append('syscall write "consumed"')
        bodies.append(body)
    return _program("pipeline", vars_, bodies)


def syscall_heavy(threads: int = 4, ops: int = 6, work: int = 200) -> Workload:
    """High rendezvous density: most steps are monitored calls."""
    vars_ = ["m=0", "total=0"]
    bodies = [_fork_join(threads, ["load total", "syscall write r"])]
    for t in range(1, threads + 1):
        body = []
        for i in range(ops):
            body += [f"compute {work}", f'syscall write "t{t}:{i}"', "syscall getpid"]
            if i % 2 == 0:
                body += ["lock m", "add total 1", "unlock m"]
        bodies.append(body)
    return _program("syscall-heavy", vars_, bodies)


def serial(threads: int = 0, ops: int = 4) -> Workload:
    """Single-threaded program; ``threads`` is ignored."""
    body = []
    for i in range(ops):
        body += ["lock m", "add c 1", "unlock m", "cas flag 0 1", "store flag 0",
                 f'syscall write "step {i}"']
    body += ["load c", "syscall write r", "syscall getpid"]
    return _program("serial", ["m=0", "c=0", "flag=0"], [body])


def racy(threads: int = 2, ops: int = 12) -> Workload:
    """Unsynchronized writes feeding a system call: not data-race free."""
    vars_ = ["x=0"]
    bodies = [_fork_join(threads, ["plain_load x", "syscall write r"])]
    for t in range(1, threads + 1):
        # later spawns start later; stagger so that all workers overlap
        body = [f"compute {400 + 600 * (threads - t)}"]
        for i in range(ops):
            body += ["plain_load x", f"plain_store x {t * 100 + i}", "compute 5"]
        body += ["plain_load x", "syscall write r"]
        bodies.append(body)
    return _program("racy", vars_, bodies)


def two_locks(threads: int = 2) -> Workload:
    """Two workers: one uses mutex A then B, the other uses B once."""
    return parse_workload(
        "workload two-locks\n"
        "vars A=0 B=0\n"
        "thread 0:\n    spawn 1\n    spawn 2\n    join 1\n    join 2\n"
        "thread 1:\n    lock A\n    unlock A\n    lock B\n    unlock B\n"
        "thread 2:\n    lock B\n    unlock B\n")


BUILTINS: dict[str, Callable[..., Workload]] = {
    "independent": independent,
    "finegrain": finegrain,
    "alloc-lock": alloc_lock,
    "pipeline": pipeline,
    "syscall-heavy": syscall_heavy,
}

EXTRAS: dict[str, Callable[..., Workload]] = {
    "serial": serial,
    "racy": racy,
    "two-locks": two_locks,
}


def builtin(name: str, threads: int = 4, **params) -> Workload:
    factory = BUILTINS.get(name) or EXTRAS.get(name)
    if factory is None:
        known = ", ".join(sorted(BUILTINS) + sorted(EXTRAS))
        raise KeyError(f"unknown builtin workload {name!r} (known: {known})")
    return factory(threads=threads, **params)
