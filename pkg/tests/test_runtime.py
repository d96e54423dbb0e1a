"""Virtual kernel, replica execution and sessions."""

import pytest

from mvee.agents import Strategy
from mvee.core import Call, OpKind
from mvee.errors import DeadlockDetected
from mvee.harness.library import finegrain, pipeline, racy, serial
from mvee.harness.oracle import _DfsChooser, _next_prefix
from mvee.kernel import BLOCKED, WOULD_BLOCK, VirtualFutexTable, virtual_futex
from mvee.runtime import (DEADLOCK, EQUIVALENT, Schedule, Session, SessionConfig,
                          run_replica, run_session)
from mvee.sim import Preemption
from mvee.workload import parse_workload

# kernel


def test_futex_wait_stale_value():
    table = VirtualFutexTable()
    assert virtual_futex(table, "wait", 0x40, waiter="a", val=2, current=1) == WOULD_BLOCK
    assert len(table) == 0


def test_futex_wake_empty():
    assert virtual_futex(VirtualFutexTable(), "wake", 0x40, count=1) == 0


def test_futex_wake_one_of_two_depends_on_seed():
    picked = set()
    for seed in range(20):
        table = VirtualFutexTable(seed)
        assert table.wait("a", 0x40, 2, 2) is BLOCKED
        assert table.wait("b", 0x40, 2, 2) is BLOCKED
        woken = table.wake(0x40, 1)
        assert len(woken) == 1 and len(table) == 1
        picked.add(woken[0])
    assert picked == {"a", "b"}


def test_waiter_in_one_queue_only():
    table = VirtualFutexTable()
    table.wait("a", 0x40, 0, 0)
    with pytest.raises(RuntimeError):
        table.wait("a", 0x80, 0, 0)
    assert table.waiting(0x40) == ("a",)
    with pytest.raises(ValueError):
        virtual_futex(table, "requeue", 0x40)


# lowering executed

def _solo(body: str, vars_: str = "m=0") -> str:
    return (f"workload solo\nvars {vars_}\nthread 0:\n    spawn 1\n    join 1\n"
            f"thread 1:\n{body}")


def test_uncontended_lock_records_one_op():
    w = parse_workload(_solo("    lock m\n"))
    res = run_session(w, SessionConfig(strategy=Strategy.TOTAL_ORDER, trace=True))
    assert res.outcome == EQUIVALENT
    assert res.traces[0] == [(1, 0, int(OpKind.COMPARE_AND_SWAP))]
    assert res.stats[0].recorded == 1 and res.stats[0].futex_waits == 0


def _contended_seed(w):
    for seed in range(200):
        res = run_session(w, SessionConfig(strategy=Strategy.WALL_OF_CLOCKS, seed=seed,
                                           trace=True))
        if res.stats[0].futex_waits:
            return res
    raise AssertionError("no contended schedule in 200 seeds")


def test_contended_lock_follows_protocol():
    w = parse_workload("workload duel\nvars m=0\nthread 0:\n    spawn 1\n    spawn 2\n"
                       "    join 1\n    join 2\n"
                       "thread 1:\n    lock m\n    compute 800\n    unlock m\n"
                       "thread 2:\n    lock m\n    compute 800\n    unlock m\n")
    res = _contended_seed(w)
    assert res.outcome == EQUIVALENT
    waits = [e for evs in res.streams[0].threads.values() for e in evs
             if e.call is Call.FUTEX_WAIT]
    wakes = [e for evs in res.streams[0].threads.values() for e in evs
             if e.call is Call.FUTEX_WAKE]
    loser = waits[0].thread
    winner = 3 - loser
    kinds = [k for t, _, k in res.traces[0] if t == loser]
    assert kinds[:2] == [OpKind.COMPARE_AND_SWAP, OpKind.EXCHANGE]
    assert waits[0].args[1] == 2
    assert any(e.thread == winner for e in wakes)


def test_broadcast_releases_all_waiters_in_every_replica():
    w = parse_workload(
        "workload bcast\nvars m=0 cv=0 go=0\nthread 0:\n"
        + "".join(f"    spawn {t}\n" for t in range(1, 5))
        + "".join(f"    join {t}\n" for t in range(1, 5))
        + "".join(f"thread {t}:\n    lock m\n    wait cv m until go == 1\n    unlock m\n"
                  for t in range(1, 4))
        + "thread 4:\n    compute 3000\n    lock m\n    store go 1\n    broadcast cv\n"
          "    unlock m\n")
    for replicae in (2, 3):
        res = run_session(w, SessionConfig(strategy=Strategy.PARTIAL_ORDER, replicae=replicae))
        assert res.outcome == EQUIVALENT
        wake = next(e for e in res.streams[0].threads[4] if e.call is Call.FUTEX_WAKE)
        assert wake.result == 3
        assert all(s == res.streams[0] for s in res.streams)


def test_mutual_exclusion_exhaustive():
    """2 threads x 2 critical sections; every interleaving keeps the owner intact."""
    section = "    lock m\n    plain_store x {t}\n    plain_load x\n    syscall write r\n" \
              "    unlock m\n"
    w = parse_workload("workload mutex\nvars m=0 x=0\nthread 0:\n    spawn 1\n    spawn 2\n"
                       "    join 1\n    join 2\n"
                       + "".join(f"thread {t}:\n" + section.format(t=t) * 2 for t in (1, 2)))
    prefix, runs = [], 0
    while prefix is not None:
        chooser = _DfsChooser(prefix, {})
        session = Session(w, SessionConfig(strategy=None, replicae=1, chooser=chooser,
                                           futex_picker=chooser.pick,
                                           preemption=Preemption(1, 1, 0), host_timeout=None))
        chooser.monitor = session.monitor
        res = session.run()
        runs += 1
        assert res.outcome == EQUIVALENT
        assert all(payload == str(t).encode() for t, payload in res.external if t)
        prefix = _next_prefix(chooser.trail)
    assert runs > 1000


# sessions

def test_serial_stream_matches_agent_off():
    w = serial()
    off = run_session(w, SessionConfig(strategy=None, replicae=1))
    for strategy in Strategy:
        stream, stats = run_replica(w, 1, strategy)
        assert stream.without(Call.AGENT_REGISTER) == off.streams[0]
        assert stats.replayed == 0


def test_finegrain_master_smoke():
    stream, stats = run_replica(finegrain(threads=4), 0, Strategy.WALL_OF_CLOCKS)
    assert stats.sync_ops > 0 and stats.recorded == stats.sync_ops
    assert len(stream) > 0


def test_master_determinism():
    w = pipeline(threads=3)
    a = run_session(w, SessionConfig(strategy=Strategy.TOTAL_ORDER, seed=11, trace=True))
    b = run_session(w, SessionConfig(strategy=Strategy.TOTAL_ORDER, seed=11, trace=True))
    assert a.streams[0] == b.streams[0] and a.traces[0] == b.traces[0]
    assert a.makespan == b.makespan


@pytest.mark.parametrize("strategy", list(Strategy))
def test_address_agnostic_across_diversity_seeds(strategy):
    w = finegrain(threads=3, ops=10, mutexes=16)
    streams = []
    for dseed in (1, 99):
        res = run_session(w, SessionConfig(strategy=strategy, replicae=3, seed=4,
                                           diversity_seed=dseed))
        assert res.outcome == EQUIVALENT
        streams.append(res.streams[0])
    assert streams[0] == streams[1]


def test_racy_workload_fails_somewhere():
    bad = [run_session(racy(), SessionConfig(strategy=s, seed=seed)).outcome
           for s in Strategy for seed in range(100)]
    assert sum(o != EQUIVALENT for o in bad) >= 1


def test_run_replica_raises_on_deadlock():
    w = parse_workload(_solo("    lock m\n    lock m\n"))
    res = run_session(w, SessionConfig(strategy=Strategy.WALL_OF_CLOCKS))
    assert res.outcome == DEADLOCK
    with pytest.raises(DeadlockDetected):
        run_replica(w, 0, Strategy.WALL_OF_CLOCKS, Schedule(seed=0))
