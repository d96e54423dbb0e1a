"""The workload language: statements, parser, printer, and validation.

A workload is a small multithreaded program written in a line-oriented
text format::

    workload handoff
    vars m=0 cv=0 ready=0
    thread 0:
        spawn 1
        lock m
        wait cv m until ready == 1
        unlock m
        join 1
    thread 1:
        lock m
        store ready 1
        signal cv
        unlock m

Every thread has one integer register ``r``. ``load``, ``cas``, ``add``,
``plain_load`` and ``syscall`` write their result into it; ``store``,
``plain_store`` and ``syscall`` can read it back.
"""

from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field
from typing import Union

from mvee.errors import ParseError, ValidationError

REGISTER = "r"
COMPARISONS = ("==", "!=", "<=", ">=", "<", ">")
SYSCALLS = ("write", "read", "open", "getpid")

Value = Union[int, str]  # an integer literal or the register name


@dataclass(frozen=True)
class Lock:
    var: str


@dataclass(frozen=True)
class Unlock:
    var: str


@dataclass(frozen=True)
class CasLoop:
    var: str
    expect: int
    new: int


@dataclass(frozen=True)
class Store:
    var: str
    value: Value


@dataclass(frozen=True)
class Load:
    var: str


@dataclass(frozen=True)
class Add:
    var: str
    amount: int


@dataclass(frozen=True)
class Predicate:
    var: str
    op: str
    value: int

    def holds(self, current: int) -> bool:
        return compare(current, self.op, self.value)


@dataclass(frozen=True)
class Wait:
    cv: str
    mutex: str
    until: Predicate | None = None


@dataclass(frozen=True)
class Signal:
    cv: str


@dataclass(frozen=True)
class Broadcast:
    cv: str


@dataclass(frozen=True)
class Syscall:
    name: str
    payload: bytes | str | None = None  # literal bytes, or REGISTER


@dataclass(frozen=True)
class Compute:
    units: int


@dataclass(frozen=True)
class Spawn:
    thread: int


@dataclass(frozen=True)
class Join:
    thread: int


@dataclass(frozen=True)
class PlainStore:
    var: str
    value: Value


@dataclass(frozen=True)
class PlainLoad:
    var: str


Statement = Union[Lock, Unlock, CasLoop, Store, Load, Add, Wait, Signal, Broadcast,
                  Syscall, Compute, Spawn, Join, PlainStore, PlainLoad]

SYNC_STATEMENTS = (Lock, Unlock, CasLoop, Store, Load, Add, Wait, Signal, Broadcast)


@dataclass(frozen=True)
class Workload:
    name: str
    vars: tuple[tuple[str, int], ...]
    threads: tuple[tuple[Statement, ...], ...]
    _index: dict = field(default=None, compare=False, repr=False, hash=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {n: i for i, (n, _) in enumerate(self.vars)})

    def var_id(self, name: str) -> int:
        return self._index[name]

    @property
    def var_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.vars)

    @property
    def n_threads(self) -> int:
        return len(self.threads)

    def workers(self) -> int:
        """Threads other than the initial one."""
        return len(self.threads) - 1

    def sync_statement_count(self) -> int:
        return sum(isinstance(s, SYNC_STATEMENTS) for body in self.threads for s in body)


def compare(a: int, op: str, b: int) -> bool:
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    raise ValueError(f"unknown comparison {op!r}")


# parsing

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_THREAD = re.compile(r"thread\s+(\d+)\s*:\s*\Z")


def _strip_comment(line: str) -> str:
    out = []
    quoted = False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out).rstrip()


def _int(tok: str, lineno: int, column: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(f"expected an integer, got {tok!r}", lineno, column) from None


def _value(tok: str, lineno: int, column: int) -> Value:
    return REGISTER if tok == REGISTER else _int(tok, lineno, column)


def _name(tok: str, lineno: int, column: int) -> str:
    if not _NAME.match(tok) or tok == REGISTER:
        raise ParseError(f"invalid variable name {tok!r}", lineno, column)
    return tok


_ARITY = {
    "lock": 1, "unlock": 1, "cas": 3, "store": 2, "load": 1, "add": 2, "signal": 1,
    "broadcast": 1, "compute": 1, "spawn": 1, "join": 1, "plain_store": 2, "plain_load": 1,
}


def _bytes(text: str) -> bytes:
    # latin-1 maps code points below 256 to single bytes, matching the printer
    try:
        return text.encode("latin-1")
    except UnicodeEncodeError:
        return text.encode()


def _statement(text: str, lineno: int, column: int) -> Statement:
    try:
        toks = shlex.split(text, posix=True)
    except ValueError as exc:
        raise ParseError(str(exc), lineno, column) from None
    word, args = toks[0], toks[1:]
    if word == "syscall":
        if not args or len(args) > 2:
            raise ParseError("syscall takes a name and an optional payload", lineno, column)
        if args[0] not in SYSCALLS:
            raise ParseError(f"unknown syscall {args[0]!r}", lineno, column)
        payload = None
        if len(args) == 2:
            raw_literal = '"' in text
            payload = REGISTER if args[1] == REGISTER and not raw_literal else _bytes(args[1])
        return Syscall(args[0], payload)
    if word == "wait":
        if len(args) == 2:
            return Wait(_name(args[0], lineno, column), _name(args[1], lineno, column))
        if len(args) == 6 and args[2] == "until" and args[4] in COMPARISONS:
            pred = Predicate(_name(args[3], lineno, column), args[4],
                             _int(args[5], lineno, column))
            return Wait(_name(args[0], lineno, column), _name(args[1], lineno, column), pred)
        raise ParseError("expected 'wait CV MUTEX [until VAR OP INT]'", lineno, column)
    arity = _ARITY.get(word)
    if arity is None:
        raise ParseError(f"unknown statement {word!r}", lineno, column)
    if len(args) != arity:
        raise ParseError(f"{word} takes {arity} operand(s), got {len(args)}", lineno, column)
    if word == "lock":
        return Lock(_name(args[0], lineno, column))
    if word == "unlock":
        return Unlock(_name(args[0], lineno, column))
    if word == "cas":
        return CasLoop(_name(args[0], lineno, column), _int(args[1], lineno, column),
                       _int(args[2], lineno, column))
    if word == "store":
        return Store(_name(args[0], lineno, column), _value(args[1], lineno, column))
    if word == "load":
        return Load(_name(args[0], lineno, column))
    if word == "add":
        return Add(_name(args[0], lineno, column), _int(args[1], lineno, column))
    if word == "signal":
        return Signal(_name(args[0], lineno, column))
    if word == "broadcast":
        return Broadcast(_name(args[0], lineno, column))
    if word == "compute":
        return Compute(_int(args[0], lineno, column))
    if word == "spawn":
        return Spawn(_int(args[0], lineno, column))
    if word == "join":
        return Join(_int(args[0], lineno, column))
    if word == "plain_store":
        return PlainStore(_name(args[0], lineno, column), _value(args[1], lineno, column))
    return PlainLoad(_name(args[0], lineno, column))


def parse_workload(text: str, name: str = "workload") -> Workload:
    """Parse and validate workload source text."""
    vars_: list[tuple[str, int]] = []
    bodies: dict[int, list[Statement]] = {}
    current: list[Statement] | None = None
    # only "\n" ends a line: payloads may hold other Unicode line separators
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = _strip_comment(raw.rstrip("\r"))
        if not line.strip():
            continue
        indent = len(line) - len(line.lstrip())
        body = line.strip()
        column = indent + 1
        if indent == 0:
            current = None
            head = body.split(None, 1)[0]
            if head == "workload":
                parts = body.split()
                if len(parts) != 2:
                    raise ParseError("expected 'workload NAME'", lineno, column)
                name = parts[1]
            elif head == "vars":
                for tok in body.split()[1:]:
                    var, eq, init = tok.partition("=")
                    col = line.index(tok) + 1
                    if not eq:
                        raise ParseError(f"expected NAME=INT, got {tok!r}", lineno, col)
                    vars_.append((_name(var, lineno, col), _int(init, lineno, col)))
            elif head == "thread":
                m = _THREAD.match(body)
                if not m:
                    raise ParseError("expected 'thread N:'", lineno, column)
                tid = int(m.group(1))
                if tid in bodies:
                    raise ParseError(f"thread {tid} defined twice", lineno, column)
                current = bodies[tid] = []
            else:
                raise ParseError(f"unexpected top-level line {body!r}", lineno, column)
        else:
            if current is None:
                raise ParseError("statement outside a thread block", lineno, column)
            current.append(_statement(body, lineno, column))
    if sorted(bodies) != list(range(len(bodies))):
        raise ValidationError(f"thread ids must be dense from 0, got {sorted(bodies)}")
    workload = Workload(name, tuple(vars_), tuple(tuple(bodies[t]) for t in range(len(bodies))))
    validate(workload)
    return workload


# validation


def _vars_of(stmt: Statement) -> tuple[str, ...]:
    if isinstance(stmt, Wait):
        extra = (stmt.until.var,) if stmt.until else ()
        return (stmt.cv, stmt.mutex) + extra
    v = getattr(stmt, "var", None) or getattr(stmt, "cv", None)
    return (v,) if v else ()


def validate(w: Workload) -> None:
    """Check names and the spawn/join forest; raise :class:`ValidationError`."""
    if not w.threads:
        raise ValidationError("a workload needs at least thread 0")
    names = [n for n, _ in w.vars]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate variable declaration")
    declared = set(names)
    spawner: dict[int, int] = {}
    for tid, body in enumerate(w.threads):
        spawned_here: set[int] = set()
        joined_here: set[int] = set()
        for stmt in body:
            for v in _vars_of(stmt):
                if v not in declared:
                    raise ValidationError(f"thread {tid}: undeclared variable {v!r}")
            if isinstance(stmt, Spawn):
                c = stmt.thread
                if not 0 < c < len(w.threads):
                    raise ValidationError(f"thread {tid}: spawn of unknown thread {c}")
                if c in spawner:
                    raise ValidationError(f"thread {c} spawned more than once")
                spawner[c] = tid
                spawned_here.add(c)
            elif isinstance(stmt, Join):
                c = stmt.thread
                if c not in spawned_here or c in joined_here:
                    raise ValidationError(f"thread {tid}: join {c} without a preceding spawn")
                joined_here.add(c)
            elif isinstance(stmt, Compute) and stmt.units < 0:
                raise ValidationError(f"thread {tid}: negative compute")
        if spawned_here - joined_here:
            raise ValidationError(f"thread {tid} never joins {sorted(spawned_here - joined_here)}")
    missing = [t for t in range(1, len(w.threads)) if t not in spawner]
    if missing:
        raise ValidationError(f"threads never spawned: {missing}")
    # spawn edges must form a tree rooted at thread 0
    for t in range(1, len(w.threads)):
        seen = {t}
        p = spawner[t]
        while p != 0:
            if p in seen:
                raise ValidationError(f"spawn cycle through thread {t}")
            seen.add(p)
            p = spawner[p]


# printing


def _fmt_value(v: Value) -> str:
    return str(v)


def _fmt_payload(p: bytes | str | None) -> str:
    if p is None:
        return ""
    if p == REGISTER:
        return " r"
    text = p.decode("latin-1")
    return " " + '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_statement(s: Statement) -> str:
    if isinstance(s, Lock):
        return f"lock {s.var}"
    if isinstance(s, Unlock):
        return f"unlock {s.var}"
    if isinstance(s, CasLoop):
        return f"cas {s.var} {s.expect} {s.new}"
    if isinstance(s, Store):
        return f"store {s.var} {_fmt_value(s.value)}"
    if isinstance(s, Load):
        return f"load {s.var}"
    if isinstance(s, Add):
        return f"add {s.var} {s.amount}"
    if isinstance(s, Wait):
        tail = f" until {s.until.var} {s.until.op} {s.until.value}" if s.until else ""
        return f"wait {s.cv} {s.mutex}{tail}"
    if isinstance(s, Signal):
        return f"signal {s.cv}"
    if isinstance(s, Broadcast):
        return f"broadcast {s.cv}"
    if isinstance(s, Syscall):
        return f"syscall {s.name}{_fmt_payload(s.payload)}"
    if isinstance(s, Compute):
        return f"compute {s.units}"
    if isinstance(s, Spawn):
        return f"spawn {s.thread}"
    if isinstance(s, Join):
        return f"join {s.thread}"
    if isinstance(s, PlainStore):
        return f"plain_store {s.var} {_fmt_value(s.value)}"
    if isinstance(s, PlainLoad):
        return f"plain_load {s.var}"
    raise TypeError(f"not a statement: {s!r}")


def print_workload(w: Workload, per_line: int = 16) -> str:
    lines = [f"workload {w.name}"]
    for i in range(0, len(w.vars), per_line):
        chunk = w.vars[i:i + per_line]
        lines.append("vars " + " ".join(f"{n}={v}" for n, v in chunk))
    for tid, body in enumerate(w.threads):
        lines.append(f"thread {tid}:")
        lines.extend("    " + format_statement(s) for s in body)
    return "\n".join(lines) + "\n"
