"""Lowering of workload statements to primitive operations.

The primitives mirror what a futex-based threading library compiles to:
atomic word operations (each of which is a sync op), futex system calls,
conditional branches on registers, and the remaining virtual syscalls.
Mutexes follow the three-state protocol (0 free, 1 locked, 2 locked with
possible waiters); condition variables are a sequence counter.

An instruction is a plain tuple whose first element is its opcode. Branch
targets are absolute indices into the thread's lowered program.
"""

from __future__ import annotations

from mvee.core import OpKind
from mvee.workload import (REGISTER, Add, Broadcast, CasLoop, Compute, Join, Load, Lock,
                           PlainLoad, PlainStore, Signal, Spawn, Statement, Store, Syscall,
                           Unlock, Wait, Workload, compare)

holds = compare

# registers
R, T, S = 0, 1, 2

# opcodes
CAS = "cas"            # (CAS, var, expect, new, dst)
XCHG = "xchg"          # (XCHG, var, value, dst)
STORE = "store"        # (STORE, var, value)           value: int or ("reg", r)
LOAD = "load"          # (LOAD, var, dst)
ADD = "add"            # (ADD, var, amount, dst)
PSTORE = "pstore"      # (PSTORE, var, value)
PLOAD = "pload"        # (PLOAD, var, dst)
FUTEX_WAIT = "futex_wait"  # (FUTEX_WAIT, var, reg_or_int)
FUTEX_WAKE = "futex_wake"  # (FUTEX_WAKE, var, count)
BRANCH = "br"          # (BRANCH, reg, op, value, target): jump when reg OP value
JUMP = "jmp"           # (JUMP, target)
SYSCALL = "sys"        # (SYSCALL, name, payload)      payload: bytes, ("reg", r) or None
COMPUTE = "compute"    # (COMPUTE, units)
SPAWN = "spawn"        # (SPAWN, thread)
JOIN = "join"          # (JOIN, thread)

WAKE_ALL = 2**31 - 1

ATOMIC_KINDS = {
    CAS: OpKind.COMPARE_AND_SWAP,
    XCHG: OpKind.EXCHANGE,
    STORE: OpKind.ATOMIC_STORE,
    LOAD: OpKind.ATOMIC_LOAD,
    ADD: OpKind.ATOMIC_ADD_SUB,
}


def _val(v):
    return ("reg", R) if v == REGISTER else v


class _Emitter:
    def __init__(self, var_id) -> None:
        self.code: list[tuple] = []
        self.var_id = var_id

    def here(self) -> int:
        return len(self.code)

    def emit(self, *ins) -> int:
        self.code.append(ins)
        return len(self.code) - 1

    def patch(self, at: int, target: int) -> None:
        ins = self.code[at]
        self.code[at] = ins[:-1] + (target,)

    def lock(self, v: int) -> None:
        self.emit(CAS, v, 0, 1, T)
        fast = self.emit(BRANCH, T, "==", 0, None)
        loop = self.emit(XCHG, v, 2, T)
        done = self.emit(BRANCH, T, "==", 0, None)
        self.emit(FUTEX_WAIT, v, 2)
        self.emit(JUMP, loop)
        self.patch(fast, self.here())
        self.patch(done, self.here())

    def unlock(self, v: int) -> None:
        self.emit(XCHG, v, 0, T)
        skip = self.emit(BRANCH, T, "!=", 2, None)
        self.emit(FUTEX_WAKE, v, 1)
        self.patch(skip, self.here())

    def cond_wait(self, st: Wait) -> None:
        cv, m = self.var_id(st.cv), self.var_id(st.mutex)
        skip = None
        top = self.here()
        if st.until is not None:
            self.emit(LOAD, self.var_id(st.until.var), S)
            skip = self.emit(BRANCH, S, st.until.op, st.until.value, None)
        self.emit(LOAD, cv, S)
        self.unlock(m)
        self.emit(FUTEX_WAIT, cv, ("reg", S))
        self.lock(m)
        if st.until is not None:
            self.emit(JUMP, top)
            self.patch(skip, self.here())

    def statement(self, st: Statement) -> None:
        vid = self.var_id
        if isinstance(st, Lock):
            self.lock(vid(st.var))
        elif isinstance(st, Unlock):
            self.unlock(vid(st.var))
        elif isinstance(st, CasLoop):
            top = self.emit(CAS, vid(st.var), st.expect, st.new, R)
            self.emit(BRANCH, R, "!=", st.expect, top)
        elif isinstance(st, Store):
            self.emit(STORE, vid(st.var), _val(st.value))
        elif isinstance(st, Load):
            self.emit(LOAD, vid(st.var), R)
        elif isinstance(st, Add):
            self.emit(ADD, vid(st.var), st.amount, R)
        elif isinstance(st, Wait):
            self.cond_wait(st)
        elif isinstance(st, Signal):
            self.emit(ADD, vid(st.cv), 1, T)
            self.emit(FUTEX_WAKE, vid(st.cv), 1)
        elif isinstance(st, Broadcast):
            self.emit(ADD, vid(st.cv), 1, T)
            self.emit(FUTEX_WAKE, vid(st.cv), WAKE_ALL)
        elif isinstance(st, Syscall):
            self.emit(SYSCALL, st.name, _val(st.payload))
        elif isinstance(st, Compute):
            self.emit(COMPUTE, st.units)
        elif isinstance(st, Spawn):
            self.emit(SPAWN, st.thread)
        elif isinstance(st, Join):
            self.emit(JOIN, st.thread)
        elif isinstance(st, PlainStore):
            self.emit(PSTORE, vid(st.var), _val(st.value))
        elif isinstance(st, PlainLoad):
            self.emit(PLOAD, vid(st.var), R)
        else:
            raise TypeError(f"cannot lower {st!r}")


def lower(stmt: Statement, var_id=None) -> list[tuple]:
    """Primitive ops for one statement, with branch targets relative to its start."""
    em = _Emitter(var_id or (lambda name: name))
    em.statement(stmt)
    return em.code


def lower_thread(body, var_id) -> tuple[tuple, ...]:
    em = _Emitter(var_id)
    for st in body:
        em.statement(st)
    return tuple(em.code)


def lower_workload(w: Workload) -> tuple[tuple[tuple, ...], ...]:
    return tuple(lower_thread(body, w.var_id) for body in w.threads)

