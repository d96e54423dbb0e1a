"""Attack scenarios against the monitor and the replication buffers.

``tamper-syscall-arg``
    One byte of one slave write payload is flipped just before the slave
    submits it. The lock-step check must report a divergence at exactly that
    event.
``tamper-buffer-payload``
    The master's agent publishes one fabricated record. Slaves may stall or
    reject the record, but no slave may ever emit an event that differs from
    what an untampered run emits.
``scan-for-buffer``
    At every scheduler point, every word of every replica's memory is
    compared with the ring locations. Under the secured strategy there must
    be no hit.
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field
from typing import Any

from mvee.agents import DEFAULT_CLOCKS, Strategy, SyncOpRecord, WocRecord
from mvee.core import Call
from mvee.harness.library import finegrain, syscall_heavy
from mvee.runtime import DIVERGENCE, EQUIVALENT, Session, SessionConfig, run_session
from mvee.workload import Syscall, Workload

SCENARIOS = ("tamper-syscall-arg", "tamper-buffer-payload", "scan-for-buffer")
MIN_SCAN_POINTS = 1000


def guess_probability(buffer_bytes: int, page_bytes: int = 4096, address_bits: int = 48) -> float:
    """Chance that one random page-aligned probe lands inside the hidden buffer.

    The buffer covers ``buffer_bytes / page_bytes`` pages out of the
    ``2**(address_bits - page_shift)`` page frames, minus the two that can
    never hold it (the null page and the topmost page).
    """
    if page_bytes <= 0 or page_bytes & (page_bytes - 1):
        raise ValueError("page size must be a positive power of two")
    if buffer_bytes <= 0 or buffer_bytes % page_bytes:
        raise ValueError("buffer size must be a positive multiple of the page size")
    shift = page_bytes.bit_length() - 1
    return (buffer_bytes // page_bytes) / (2 ** (address_bits - shift) - 2)


@dataclass
class AttackReport:
    scenario: str
    strategy: str
    trials: int
    detected: int = 0
    failures: list[str] = field(default_factory=list)
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures and self.detected == self.trials

    def as_json(self) -> dict[str, Any]:
        return {"scenario": self.scenario, "strategy": self.strategy, "trials": self.trials,
                "detected": self.detected, "passed": self.passed, "failures": self.failures,
                "details": self.details}


# tamper-syscall-arg

def _flip_payload(workload: Workload, seed: int) -> tuple[dict, Any]:
    """Event tamper that flips one byte of one slave-1 write, plus its target record."""
    rng = random.Random(f"flip/{seed}")
    writes = {t: sum(1 for s in body if isinstance(s, Syscall) and s.name == "write")
              for t, body in enumerate(workload.threads)}
    thread = rng.choice(sorted(t for t, n in writes.items() if n))
    nth = rng.randrange(writes[thread])
    target: dict = {"thread": thread, "nth": nth, "index": None, "payload": None}
    seen = [0]

    def tamper(ordinal: int, tid: int, index: int, event):
        if ordinal != 1 or tid != thread or event.call is not Call.WRITE:
            return event
        k = seen[0]
        seen[0] += 1
        if k != nth:
            return event
        payload = bytearray(event.args[0])
        j = rng.randrange(len(payload))
        payload[j] ^= 0x01
        target["index"], target["payload"] = index, bytes(payload)
        return dataclasses.replace(event, args=(bytes(payload),) + tuple(event.args[1:]))

    return target, tamper


def tamper_syscall_arg(strategy: Strategy, trials: int = 100, *, seed: int = 0,
                       replicae: int = 2, threads: int = 4, **kw) -> AttackReport:
    workload = syscall_heavy(threads=threads)
    report = AttackReport("tamper-syscall-arg", strategy.value, trials)
    for i in range(trials):
        target, tamper = _flip_payload(workload, seed + i)
        res = run_session(workload, SessionConfig(strategy=strategy, replicae=replicae,
                                                  seed=seed + i, event_tamper=tamper, **kw))
        rep = res.report
        where = (target["thread"], target["index"])
        if res.outcome != DIVERGENCE or rep is None:
            report.failures.append(f"seed {seed + i}: outcome {res.outcome}, expected divergence")
        elif (rep.replica, rep.thread, rep.event_index) != (1, *where):
            report.failures.append(
                f"seed {seed + i}: reported replica {rep.replica} thread {rep.thread} "
                f"event {rep.event_index}, tampered thread {where[0]} event {where[1]}")
        elif not rep.field.startswith("args"):
            report.failures.append(f"seed {seed + i}: reported field {rep.field!r}")
        else:
            report.detected += 1
        if sum(1 for t, _ in res.external if t == target["thread"]) > target["nth"]:
            report.failures.append(f"seed {seed + i}: the tampered write reached the outside")
    return report


# tamper-buffer-payload

def _fabricate(strategy: Strategy, seed: int, clocks: int):
    rng = random.Random(f"fabricate/{seed}")
    nth = rng.randrange(1, 12)
    count = [0]
    done = [False]

    def tamper(head: int, record: tuple) -> tuple:
        count[0] += 1
        if done[0] or count[0] != nth:
            return record
        done[0] = True
        if isinstance(record, WocRecord):
            # a time the clock will never reach
            return WocRecord(record.clock, record.time + 1000 + rng.randrange(1000))
        word = record.word ^ (8 * rng.randrange(1, 64))
        return SyncOpRecord(record.thread, word, record.kind)

    return tamper, done


def tamper_buffer_payload(strategy: Strategy, trials: int = 100, *, seed: int = 0,
                          replicae: int = 2, threads: int = 4,
                          clocks: int = DEFAULT_CLOCKS, **kw) -> AttackReport:
    workload = syscall_heavy(threads=threads)
    report = AttackReport("tamper-buffer-payload", strategy.value, trials)
    outcomes: dict[str, int] = {}
    for i in range(trials):
        s = seed + i
        clean = run_session(workload, SessionConfig(strategy=strategy, replicae=replicae,
                                                    seed=s, clocks=clocks, **kw))
        tamper, done = _fabricate(strategy, s, clocks)
        res = run_session(workload, SessionConfig(strategy=strategy, replicae=replicae, seed=s,
                                                  clocks=clocks, record_tamper=tamper,
                                                  host_timeout=None, **kw))
        outcomes[res.outcome] = outcomes.get(res.outcome, 0) + 1
        bad = [r for r, stream in enumerate(res.streams[1:], start=1)
               if not stream.is_prefix_of(clean.streams[r])]
        leaked = [e for e in res.external if e not in clean.external]
        if not done[0]:
            report.failures.append(f"seed {s}: no record was fabricated")
        elif bad:
            report.failures.append(f"seed {s}: slave streams {bad} deviate from the clean run")
        elif leaked:
            report.failures.append(f"seed {s}: unexpected external output {leaked[:3]}")
        elif res.outcome == EQUIVALENT:
            report.failures.append(f"seed {s}: fabricated record went unnoticed")
        else:
            report.detected += 1
    report.details["outcomes"] = outcomes
    return report


# scan-for-buffer

def scan_for_buffer(strategy: Strategy = Strategy.SECURED_WALL_OF_CLOCKS, trials: int = 1, *,
                    seed: int = 0, replicae: int = 2, threads: int = 4, **kw) -> AttackReport:
    """Scan all replica memory at every scheduler point for a ring location.

    A hit is any stored word that points into a mapped ring. The unsecured
    strategies keep such pointers in thread-local storage, so they serve as
    the positive control for the scanner.
    """
    workload = finegrain(threads=threads, ops=32)
    report = AttackReport("scan-for-buffer", strategy.value, trials)
    hits_total, points_total = 0, 0
    for i in range(trials):
        scan = {"points": 0, "hits": 0}
        session: Session | None = None
        ranges: list[tuple[int, int]] = []

        def on_step(task, scan=scan):
            scan["points"] += 1
            for rep in session.replicae:
                for value in rep.memory.cells.values():
                    for lo, hi in ranges:
                        if lo <= value < hi:
                            scan["hits"] += 1

        session = Session(workload, SessionConfig(strategy=strategy, replicae=replicae,
                                                  seed=seed + i, on_step=on_step, **kw))
        span = session.channel.span
        for rep in session.replicae:
            ranges += [(base, base + span) for base in session.registry.locations(rep.ordinal)]
        res = session.run()
        hits_total += scan["hits"]
        points_total += scan["points"]
        if res.outcome != EQUIVALENT:
            report.failures.append(f"seed {seed + i}: run ended {res.outcome}")
        if scan["points"] < MIN_SCAN_POINTS:
            report.failures.append(f"seed {seed + i}: only {scan['points']} scheduler points")
        if scan["hits"]:
            report.failures.append(f"seed {seed + i}: {scan['hits']} hits")
        else:
            report.detected += 1
    report.details.update(hits=hits_total, points=points_total)
    return report


def cmd_attack(scenario: str, strategy: Strategy | None = None, trials: int | None = None,
               **kw) -> AttackReport:
    if scenario == "tamper-syscall-arg":
        return tamper_syscall_arg(strategy or Strategy.WALL_OF_CLOCKS, trials or 100, **kw)
    if scenario == "tamper-buffer-payload":
        return tamper_buffer_payload(strategy or Strategy.WALL_OF_CLOCKS, trials or 100, **kw)
    if scenario == "scan-for-buffer":
        return scan_for_buffer(strategy or Strategy.SECURED_WALL_OF_CLOCKS, trials or 1, **kw)
    raise ValueError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
