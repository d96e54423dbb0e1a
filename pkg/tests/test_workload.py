"""Workload language: parsing, validation, printing and lowering."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvee.errors import ParseError, ValidationError
from mvee.harness.library import BUILTINS, EXTRAS
from mvee.harness.oracle import generate_family
from mvee.lowering import CAS, FUTEX_WAIT, FUTEX_WAKE, WAKE_ALL, XCHG, lower
from mvee.workload import (Broadcast, Workload, Lock, Predicate, Signal, Syscall, Unlock, Wait,
                           parse_workload, print_workload)

TWO_THREADS = """\
workload pair
vars m=0 x=0   # a mutex and its data
thread 0:
    spawn 1
    lock m
    add x 1
    unlock m
    join 1
thread 1:
    lock m
    store x 7
    unlock m
"""


def test_parse_two_threads():
    w = parse_workload(TWO_THREADS)
    assert w.name == "pair" and w.n_threads == 2 and w.workers() == 1
    assert w.vars == (("m", 0), ("x", 0))
    assert w.threads[1][0] == Lock("m")
    assert w.sync_statement_count() == 6


def test_undeclared_variable():
    with pytest.raises(ValidationError, match="undeclared"):
        parse_workload("vars m=0\nthread 0:\n    lock q\n")


@pytest.mark.parametrize("text, line, column", [
    ("vars m=0\nthread 0:\n    frobnicate m\n", 3, 5),
    ("vars m\n", 1, 6),
    ("vars m=0\n    lock m\n", 2, 5),
    ("vars m=0\nthread 0:\n    cas m 0\n", 3, 5),
    ("vars m=0\nthread 0:\n  store m x\n", 3, 3),
])
def test_parse_error_position(text, line, column):
    with pytest.raises(ParseError) as info:
        parse_workload(text)
    assert (info.value.line, info.value.column) == (line, column)


@pytest.mark.parametrize("text, match", [
    ("vars m=0\nthread 0:\n    spawn 1\n    join 1\n", "unknown thread"),
    ("vars m=0\nthread 0:\n    spawn 1\nthread 1:\n    lock m\n", "never joins"),
    ("vars m=0\nthread 0:\n    lock m\nthread 1:\n    lock m\n", "never spawned"),
    ("vars m=0 m=1\nthread 0:\n    lock m\n", "duplicate"),
    ("vars m=0\nthread 0:\n    lock m\nthread 2:\n    lock m\n", "dense"),
])
def test_validation_errors(text, match):
    with pytest.raises(ValidationError, match=match):
        parse_workload(text)


def test_wait_predicate_and_payloads():
    w = parse_workload('vars cv=0 m=0 go=0\nthread 0:\n    wait cv m until go >= 2\n'
                       '    syscall write "a # b"\n    syscall write r\n    syscall getpid\n')
    body = w.threads[0]
    assert body[0] == Wait("cv", "m", Predicate("go", ">=", 2))
    assert body[1] == Syscall("write", b"a # b")
    assert body[2] == Syscall("write", "r") and body[3] == Syscall("getpid")


@pytest.mark.parametrize("name", sorted(BUILTINS) + sorted(EXTRAS))
@pytest.mark.parametrize("threads", [2, 4])
def test_round_trip_library(name, threads):
    factory = BUILTINS.get(name) or EXTRAS[name]
    w = factory(threads=threads)
    assert parse_workload(print_workload(w)) == w


def test_round_trip_generated_family():
    for w in generate_family(20, seed=5):
        assert parse_workload(print_workload(w)) == w


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=12))
def test_round_trip_arbitrary_payload(payload):
    if any(b < 32 for b in payload):
        return
    w = Workload("p", (), ((Syscall("write", payload),),))
    assert parse_workload(print_workload(w)) == w


# lowering

def test_lock_fast_path_is_one_cas():
    code = lower(Lock("m"))
    assert code[0][0] == CAS and code[0][2:4] == (0, 1)
    assert [ins[0] for ins in code] == [CAS, "br", XCHG, "br", FUTEX_WAIT, "jmp"]
    assert code[4][2] == 2


def test_unlock_wakes_only_when_contended():
    code = lower(Unlock("m"))
    assert [ins[0] for ins in code] == [XCHG, "br", FUTEX_WAKE]
    assert code[1][2:4] == ("!=", 2) and code[2][2] == 1


def test_condvar_lowering():
    ops = [ins[0] for ins in lower(Wait("cv", "m"))]
    assert ops.count(FUTEX_WAIT) == 2          # the condvar wait plus the mutex slow path
    assert lower(Signal("cv"))[-1] == (FUTEX_WAKE, "cv", 1)
    assert lower(Broadcast("cv"))[-1] == (FUTEX_WAKE, "cv", WAKE_ALL)
