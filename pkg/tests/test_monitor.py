"""Lock-step comparison, futex arbitration and agent control."""

import dataclasses

import pytest

from mvee.agents import Strategy, WocRecord
from mvee.core import Address, AddressMap, Call, NormalizedEvent, Role, RvpEvent, VarRef
from mvee.errors import InvalidCapability, UnknownReplica, UnsupportedTransition
from mvee.kernel import WOULD_BLOCK
from mvee.monitor import (HIDDEN_HIGH, HIDDEN_LOW, MASTER_PID, PAGE, Allow, Divergence,
                          HiddenRegistry, first_difference, lockstep_step)
from mvee.agents import HiddenHandle
from mvee.harness.library import finegrain, pipeline, two_locks
from mvee.runtime import (DEADLOCK, DIVERGENCE, EQUIVALENT, Session, SessionConfig,
                          run_session)
from mvee.workload import parse_workload

HELLO = parse_workload('workload hello\nthread 0:\n    syscall write "hello"\n'
                       '    syscall getpid\n    syscall write r\n')


def test_matching_writes_allowed():
    ev = NormalizedEvent(0, Call.WRITE, (b"hello",))
    assert lockstep_step([ev, ev]) == Allow(None)


def test_mismatched_write_reports_byte():
    verdict = lockstep_step([NormalizedEvent(0, Call.WRITE, (b"hello",)),
                             NormalizedEvent(0, Call.WRITE, (b"hellp",))], event_index=3)
    assert isinstance(verdict, Divergence)
    rep = verdict.report
    assert (rep.replica, rep.thread, rep.event_index, rep.field) == (1, 0, 3, "args[0][4]")
    assert (rep.master_value, rep.deviant_value) == (b"o", b"p")
    assert rep.as_json()["master_value"] == "o"


def test_first_difference_fields():
    w = NormalizedEvent(0, Call.WRITE, (b"ab",))
    assert first_difference(w, NormalizedEvent(0, Call.READ, ()))[0] == "call"
    assert first_difference(w, NormalizedEvent(0, Call.WRITE, ()))[0] == "args.length"
    assert first_difference(w, NormalizedEvent(0, Call.WRITE, (b"abc",)))[0] == "args[0].length"
    assert first_difference(w, w) is None


def test_raw_events_are_normalized_with_maps():
    maps = [AddressMap(2, r, 1) for r in range(2)]
    evs = [RvpEvent(1, Call.FUTEX_WAKE, (m.address(1), 1)) for m in maps]
    assert isinstance(lockstep_step(evs, maps), Allow)
    bad = [evs[0], RvpEvent(1, Call.FUTEX_WAKE, (Address(0x1234), 1))]
    verdict = lockstep_step(bad, maps)
    assert isinstance(verdict, Divergence) and verdict.report.field == "address"


def test_session_writes_once_and_replicates_pid():
    res = run_session(HELLO, SessionConfig(strategy=None, replicae=3))
    assert res.outcome == EQUIVALENT
    assert res.external == [(0, b"hello"), (0, str(MASTER_PID).encode())]
    for stream in res.streams:
        pid = next(e for e in stream.threads[0] if e.call is Call.GETPID)
        assert pid.result == MASTER_PID


def test_session_divergence_stops_before_the_call():
    def tamper(ordinal, tid, index, event):
        if ordinal == 1 and event.call is Call.WRITE and index == 0:
            return dataclasses.replace(event, args=(b"hellp",))
        return event

    res = run_session(HELLO, SessionConfig(strategy=None, replicae=2, event_tamper=tamper))
    assert res.outcome == DIVERGENCE
    assert res.external == []
    assert res.report.field == "args[0][4]" and res.report.event_index == 0


# futex arbitration

WAKE_ONE = parse_workload(
    "workload wake-one\nvars m=0 cv=0\nthread 0:\n    spawn 1\n    spawn 2\n    spawn 3\n"
    "    join 1\n    join 2\n    join 3\n"
    "thread 1:\n    lock m\n    wait cv m\n    unlock m\n"
    "thread 2:\n    lock m\n    wait cv m\n    unlock m\n"
    "thread 3:\n    compute 3000\n    lock m\n    signal cv\n    unlock m\n"
    "    compute 50000\n    lock m\n    signal cv\n    unlock m\n")


def _woken_first(choice: int) -> int:
    """The thread the first signal releases; the same ordinal in every replica."""
    first: dict[int, int] = {}

    def on_step(task):
        rep = task.replica.ordinal
        if task.tid in (1, 2) and 5000 < task.time < 40000 and rep not in first:
            first[rep] = task.tid

    cfg = SessionConfig(strategy=Strategy.WALL_OF_CLOCKS, replicae=3, on_step=on_step,
                        futex_picker=lambda n: choice % n)
    res = run_session(WAKE_ONE, cfg)
    assert res.outcome == EQUIVALENT
    assert len(first) == 3 and len(set(first.values())) == 1
    return first[0]


def test_master_wake_choice_is_mirrored():
    assert {_woken_first(c) for c in (0, 1)} == {1, 2}


def test_would_block_is_replicated():
    for seed in range(100):
        res = run_session(pipeline(threads=4), SessionConfig(strategy=Strategy.PARTIAL_ORDER,
                                                             replicae=3, seed=seed))
        assert res.outcome == EQUIVALENT
        hits = [[e for evs in s.threads.values() for e in evs
                 if e.call is Call.FUTEX_WAIT and e.result == WOULD_BLOCK]
                for s in res.streams]
        if hits[0]:
            assert hits[1] == hits[0] == hits[2]
            return
    pytest.fail("no WouldBlock futex wait in 100 seeds")


# agent control

def _registered_session():
    session = Session(two_locks(), SessionConfig(strategy=Strategy.TOTAL_ORDER))
    session.run()
    return session


def test_set_agent_state_errors():
    session = _registered_session()
    mon = session.monitor
    with pytest.raises(UnknownReplica):
        mon.set_agent_state(7, Role.SLAVE, True)
    with pytest.raises(UnsupportedTransition):
        mon.set_agent_state(1, Role.MASTER, True)
    mon.set_agent_state(1, Role.SLAVE, True)
    assert session.replicae[1].agent.enabled and not session.replicae[1].agent.is_master


def test_disabled_after_final_join():
    session = _registered_session()
    assert session.monitor.live_workers == 0
    assert not any(rep.agent.enabled for rep in session.replicae)


def test_unregistered_monitor_without_agents():
    session = Session(two_locks(), SessionConfig(strategy=None))
    session.run()
    with pytest.raises(UnknownReplica):
        session.monitor.set_agent_state(0, Role.MASTER, True)


def test_stalled_slave_reported_as_rendezvous_timeout():
    def future(head, record):
        return WocRecord(record.clock, record.time + 1000) if head == 0 else record

    res = run_session(finegrain(threads=2, ops=4),
                      SessionConfig(strategy=Strategy.WALL_OF_CLOCKS, record_tamper=future,
                                    host_timeout=None))
    assert res.outcome == DEADLOCK
    assert "RendezvousTimeout" in res.error and res.external == []


# hidden registry

def test_registry_placement_and_capabilities():
    reg = HiddenRegistry(seed=5)
    h0 = reg.allocate_hidden_buffer(0, 8 * PAGE)
    h1 = reg.allocate_hidden_buffer(1, 8 * PAGE)
    b0, b1 = reg.resolve_base(h0), reg.resolve_base(h1)
    assert b0 != b1
    for base in (b0, b1):
        assert base % PAGE == 0 and HIDDEN_LOW <= base < HIDDEN_HIGH - 8 * PAGE
    assert reg.locations(0) == (b0,) and reg.locations(1) == (b1,)
    with pytest.raises(InvalidCapability):
        reg.resolve_base(HiddenHandle(0))
    with pytest.raises(InvalidCapability):
        HiddenRegistry(seed=5).resolve_base(h0)
