"""Static identification of sync ops in a symbolic instruction listing.

A listing holds one instruction per line, ``ADDR: [PREFIX ...] MNEMONIC
operand[, operand]``, with memory operands written as ``[symbol]`` or
``[symbol+offset]``. A line ``name:`` without an address opens a new function
region, ``;`` starts a comment, and a comment naming a call (``; call
pthread_mutex_lock``) records which library routine the instruction was
inlined from. A separate debug map holds lines ``ADDR file:line``.

Classification:

* ``EXPLICIT_ATOMIC``: LOCK-prefixed instructions and XCHG with a memory
  operand.
* ``BARRIER_ADJACENT_STORE``: a store that is the next instruction after a
  barrier (MFENCE, SFENCE, BARRIER) in the same region.
* ``UNPROTECTED_ACCESS``: any other instruction that references a memory
  symbol referenced by an already classified instruction, to a fixed point.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from mvee.errors import DuplicateIntrinsic, ParseError

BARRIERS = frozenset({"MFENCE", "SFENCE", "BARRIER"})
PREFIXES = frozenset({"LOCK", "REP", "REPE", "REPZ", "REPNE", "REPNZ"})
# dest written, not read
_WRITE_ONLY = frozenset({"MOV", "MOVZX", "MOVSX", "MOVSXD", "LEA", "POP", "SETE", "SETNE",
                         "SETZ", "SETNZ", "MOVNTI"})
# no operand is written
_READ_ONLY = frozenset({"CMP", "TEST", "PUSH", "BT", "JMP", "CALL", "JE", "JNE", "JZ", "JNZ",
                        "PREFETCH"})
# both operands written
_SWAPS = frozenset({"XCHG", "XADD"})
# standard threading-library routines: the only ops weak determinism orders
STANDARD_SYNC_CALLS = frozenset({
    "pthread_mutex_lock", "pthread_mutex_trylock", "pthread_mutex_unlock",
    "pthread_cond_wait", "pthread_cond_timedwait", "pthread_cond_signal",
    "pthread_cond_broadcast", "pthread_rwlock_rdlock", "pthread_rwlock_wrlock",
    "pthread_rwlock_unlock", "pthread_barrier_wait", "pthread_spin_lock",
    "pthread_spin_unlock", "sem_wait", "sem_post",
})


class SyncOpClass(Enum):
    EXPLICIT_ATOMIC = "ExplicitAtomic"
    BARRIER_ADJACENT_STORE = "BarrierAdjacentStore"
    UNPROTECTED_ACCESS = "UnprotectedAccess"


class Action(Enum):
    WRAP_CALL = "wrap-call"
    INCLUDE_HEADER = "include-header"
    MANUAL_REVIEW = "manual-review"


@dataclass(frozen=True)
class Operand:
    kind: str           # "mem", "reg" or "imm"
    name: str           # symbol, register name or literal text
    read: bool = True
    write: bool = False

    @property
    def is_memory(self) -> bool:
        return self.kind == "mem"


@dataclass(frozen=True)
class Instr:
    address: int
    mnemonic: str
    operands: tuple[Operand, ...] = ()
    prefixes: frozenset[str] = frozenset()
    region: str = ""
    origin: str | None = None                   # library routine named in the comment
    source_line: tuple[str, int] | None = None
    line_no: int = 0                            # position in the listing text

    @property
    def symbols(self) -> frozenset[str]:
        return frozenset(o.name for o in self.operands if o.is_memory)

    @property
    def is_store(self) -> bool:
        return any(o.is_memory and o.write for o in self.operands)

    @property
    def memory_ops(self) -> int:
        return sum(1 for o in self.operands if o.is_memory)


_ADDR_LINE = re.compile(r"^\s*([0-9A-Fa-f]+)\s*:\s*(.*)$")
_REGION = re.compile(r"^\s*([A-Za-z_.$][\w.$@]*)\s*:\s*$")
_MEM = re.compile(r"^\[\s*([A-Za-z_.$][\w.$]*)\s*(?:[+-]\s*\w+\s*)?\]$")
_IDENT = re.compile(r"^[A-Za-z_][\w.]*$")
_IMM = re.compile(r"^[-+]?(0[xX][0-9A-Fa-f]+|\d+)$")
_CALL_NOTE = re.compile(r"\bcall\s+([A-Za-z_][\w@.]*)")


def _directions(mnemonic: str, index: int) -> tuple[bool, bool]:
    if mnemonic in _SWAPS:
        return True, True
    if index > 0 or mnemonic in _READ_ONLY:
        return True, False
    if mnemonic in _WRITE_ONLY:
        return False, True
    return True, True


def _operand(text: str, mnemonic: str, index: int, line: int, column: int) -> Operand:
    read, write = _directions(mnemonic, index)
    m = _MEM.match(text)
    if m:
        return Operand("mem", m.group(1), read, write)
    if _IMM.match(text):
        return Operand("imm", text, True, False)
    if _IDENT.match(text):
        return Operand("reg", text.lower(), read, write)
    raise ParseError(f"bad operand {text!r}", line, column)


def parse_listing(text: str) -> list[Instr]:
    """Parse a listing into instructions, in listing order."""
    out: list[Instr] = []
    seen: set[int] = set()
    region = ""
    for line_no, raw in enumerate(text.splitlines(), start=1):
        body, _, comment = raw.partition(";")
        if not body.strip():
            continue
        label = _REGION.match(body)
        if label and not any(ch.isdigit() for ch in label.group(1)) or \
                label and not _ADDR_LINE.match(body):
            # hex-looking names without digits ("add:") are labels too
            region = label.group(1)
            continue
        m = _ADDR_LINE.match(body)
        if m is None:
            raise ParseError("expected 'ADDR: MNEMONIC operands' or 'name:'", line_no)
        address = int(m.group(1), 16)
        if address in seen:
            raise ParseError(f"duplicate address {m.group(1)}", line_no)
        seen.add(address)
        rest = m.group(2).strip()
        column = m.start(2) + 1
        words = rest.split(None, 1)
        prefixes = set()
        while words and words[0].upper() in PREFIXES:
            prefixes.add(words[0].upper())
            words = words[1].split(None, 1) if len(words) > 1 else []
        if not words:
            raise ParseError("missing mnemonic", line_no, column)
        mnemonic = words[0].upper()
        if not _IDENT.match(mnemonic):
            raise ParseError(f"bad mnemonic {words[0]!r}", line_no, column)
        operands = []
        if len(words) > 1:
            for i, part in enumerate(words[1].split(",")):
                part = part.strip()
                if not part:
                    raise ParseError("empty operand", line_no, column)
                operands.append(_operand(part, mnemonic, i, line_no, column))
        note = _CALL_NOTE.search(comment)
        out.append(Instr(address, mnemonic, tuple(operands), frozenset(prefixes), region,
                         note.group(1) if note else None, None, line_no))
    return out


def parse_debug_map(text: str) -> dict[int, tuple[str, int]]:
    """``ADDR file:line`` lines to a map from address to source position."""
    out: dict[int, tuple[str, int]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 2 or ":" not in parts[1]:
            raise ParseError("expected 'ADDR file:line'", line_no)
        file, _, num = parts[1].rpartition(":")
        try:
            out[int(parts[0], 16)] = (file, int(num))
        except ValueError:
            raise ParseError(f"bad debug map entry {body!r}", line_no) from None
    return out


def attach_debug_info(instrs: Iterable[Instr], debug_map: dict[int, tuple[str, int]]) -> list[Instr]:
    return [Instr(i.address, i.mnemonic, i.operands, i.prefixes, i.region, i.origin,
                  debug_map.get(i.address, i.source_line), i.line_no) for i in instrs]


def _is_explicit_atomic(ins: Instr) -> bool:
    return "LOCK" in ins.prefixes or (ins.mnemonic == "XCHG" and bool(ins.symbols))


def seed_sync_ops(instrs: Sequence[Instr]) -> dict[Instr, SyncOpClass]:
    """The first two categories, before closure."""
    out: dict[Instr, SyncOpClass] = {}
    for k, ins in enumerate(instrs):
        if _is_explicit_atomic(ins):
            out[ins] = SyncOpClass.EXPLICIT_ATOMIC
        elif k > 0 and instrs[k - 1].mnemonic in BARRIERS and ins.is_store \
                and instrs[k - 1].region == ins.region:
            out[ins] = SyncOpClass.BARRIER_ADJACENT_STORE
    return out


def classify(instrs: Sequence[Instr]) -> dict[Instr, SyncOpClass]:
    """Classify every sync op; instructions that are not sync ops are absent."""
    result = seed_sync_ops(instrs)
    symbols: set[str] = set()
    for ins in result:
        symbols |= ins.symbols
    changed = True
    while changed:
        changed = False
        for ins in instrs:
            if ins not in result and ins.symbols & symbols:
                result[ins] = SyncOpClass.UNPROTECTED_ACCESS
                symbols |= ins.symbols
                changed = True
    return result


@dataclass(frozen=True)
class PlanEntry:
    file: str | None
    line: int | None
    cls: SyncOpClass
    action: Action
    address: int

    def as_json(self) -> dict:
        return {"file": self.file, "line": self.line, "class": self.cls.value,
                "action": self.action.value, "address": f"{self.address:x}"}


@dataclass
class WrapPlan:
    entries: list[PlanEntry] = field(default_factory=list)

    def targets(self) -> list[tuple[str, int]]:
        """Distinct source positions that need a replication call."""
        return sorted({(e.file, e.line) for e in self.entries
                       if e.action is not Action.MANUAL_REVIEW})

    def manual_review(self) -> list[PlanEntry]:
        return [e for e in self.entries if e.action is Action.MANUAL_REVIEW]

    def as_json(self) -> dict:
        return {"entries": [e.as_json() for e in self.entries],
                "targets": [{"file": f, "line": n} for f, n in self.targets()]}


def plan_wrapping(classified: dict[Instr, SyncOpClass],
                  debug_map: dict[int, tuple[str, int]] | None = None,
                  intrinsics: Iterable[str] = ()) -> WrapPlan:
    """One entry per classified instruction, in address order.

    Atomics inlined from a known intrinsic are covered by the generated
    header; other sync ops need a call at their source line; sync ops
    without debug information need a human.
    """
    known = set(intrinsics)
    plan = WrapPlan()
    for ins in sorted(classified, key=lambda i: i.address):
        where = (debug_map or {}).get(ins.address, ins.source_line)
        cls = classified[ins]
        if where is None:
            plan.entries.append(PlanEntry(None, None, cls, Action.MANUAL_REVIEW, ins.address))
            continue
        action = Action.INCLUDE_HEADER if ins.origin in known and \
            cls is SyncOpClass.EXPLICIT_ATOMIC else Action.WRAP_CALL
        plan.entries.append(PlanEntry(where[0], where[1], cls, action, ins.address))
    return plan


def strong_determinism_count(instrs: Iterable[Instr]) -> int:
    """Memory accesses a strongly deterministic system must order: all of them."""
    return sum(i.memory_ops for i in instrs)


def weak_determinism_count(instrs: Iterable[Instr],
                           standard: frozenset[str] = STANDARD_SYNC_CALLS) -> int:
    """Operations a weakly deterministic system orders: standard library sync calls."""
    return sum(1 for i in instrs if i.origin in standard)


def parse_intrinsics(text: str) -> list[tuple[str, int]]:
    """``name arity`` per line; ``#`` comments."""
    out = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 2 or not _IDENT.match(parts[0]) or not parts[1].isdigit():
            raise ParseError("expected 'name arity'", line_no)
        out.append((parts[0], int(parts[1])))
    return out


def generate_wrapper_header(intrinsics: Sequence[tuple[str, int]],
                            guard: str = "MVEE_SYNC_WRAPPERS_H") -> str:
    """A C header overriding each intrinsic with a replicated version.

    Every override is a single macro line. The original is invoked as
    ``(name)(...)`` so the macro does not expand recursively. The first
    argument is taken to be the address the intrinsic operates on.
    """
    names = [n for n, _ in intrinsics]
    dups = sorted({n for n in names if names.count(n) > 1})
    if dups:
        raise DuplicateIntrinsic(", ".join(dups))
    lines = [f"#ifndef {guard}", f"#define {guard}", "",
             "void mvee_sync_enter(volatile void *word);", "void mvee_sync_leave(void);", ""]
    for name, arity in intrinsics:
        params = ", ".join(f"a{k}" for k in range(arity))
        word = "(a0)" if arity else "0"
        lines.append(
            f"#define {name}({params}) ({{ mvee_sync_enter((volatile void *){word}); "
            f"__typeof__(({name})({params})) mvee_r = ({name})({params}); "
            f"mvee_sync_leave(); mvee_r; }})")
    lines += ["", f"#endif /* {guard} */", ""]
    return "\n".join(lines)


def override_count(header: str) -> int:
    return sum(1 for line in header.splitlines() if line.startswith("#define ") and "(" in
               line.split()[1])


# A small worker routine (locals live in registers): a mutex-protected
# update (lines 2 to 5), a flag
# published after a full barrier (lines 6 and 7), unrelated copies (9 and
# 10), a spin on the flag (11) and an atomic reference count drop (13).
WORKER_SOURCE = """\
void worker(long n) {
    pthread_mutex_lock(&m);
    total = total + n;
    n = 0;
    pthread_mutex_unlock(&m);
    __sync_synchronize();
    done = 1;
    n = n * 2;
    a = b;
    c = d;
    while (!done) ;
    state = 3;
    if (__sync_sub_and_fetch(&refs, 1) == 0) release();
}
"""

WORKER_LISTING = """\
worker:
100: LOCK CMPXCHG [m], r1      ; call pthread_mutex_lock
104: MOV r2, [total]
108: ADD r2, r3
10c: MOV [total], r2
110: MOV r3, 0
114: XCHG [m], r4              ; call pthread_mutex_unlock
118: MFENCE                    ; call __sync_synchronize
11c: MOV [done], 1
120: SHL r3, 1
124: MOV r5, [b]
128: MOV [a], r5
12c: MOV r6, [d]
130: MOV [c], r6
134: MOV r7, [done]
138: TEST r7, r7
13c: MOV r8, 3
140: LOCK SUB [refs], 1        ; call __sync_sub_and_fetch
144: JZ release
"""

WORKER_DEBUG_MAP = """\
100 worker.c:2
104 worker.c:3
108 worker.c:3
10c worker.c:3
110 worker.c:4
114 worker.c:5
118 worker.c:6
11c worker.c:7
120 worker.c:8
124 worker.c:9
128 worker.c:9
12c worker.c:10
130 worker.c:10
134 worker.c:11
138 worker.c:11
13c worker.c:12
140 worker.c:13
144 worker.c:13
"""


def classify_report(listing: str, debug_map: str | None = None,
                    intrinsics: str | None = None) -> dict:
    instrs = parse_listing(listing)
    dmap = parse_debug_map(debug_map) if debug_map else {}
    instrs = attach_debug_info(instrs, dmap)
    intr = parse_intrinsics(intrinsics) if intrinsics else []
    classes = classify(instrs)
    plan = plan_wrapping(classes, dmap, [n for n, _ in intr])
    report = {
        "instructions": len(instrs),
        "sync_ops": [{"address": f"{i.address:x}", "mnemonic": i.mnemonic,
                      "class": c.value,
                      "source": f"{i.source_line[0]}:{i.source_line[1]}" if i.source_line
                      else None}
                     for i, c in sorted(classes.items(), key=lambda kv: kv[0].address)],
        "plan": plan.as_json(),
        "strong_determinism_ops": strong_determinism_count(instrs),
        "weak_determinism_ops": weak_determinism_count(instrs),
        "wrap_targets": len(plan.targets()),
    }
    if intr:
        header = generate_wrapper_header(intr)
        report["header"] = header
        report["header_overrides"] = override_count(header)
    return report


def add_classify_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("listing", help="instruction listing file")
    p.add_argument("--debug-map", help="address to file:line map")
    p.add_argument("--intrinsics", help="file of 'name arity' lines")
    p.add_argument("--out", help="JSON output path (default: stdout)")


def run_classify(args: argparse.Namespace) -> int:
    try:
        listing = Path(args.listing).read_text()
        dmap = Path(args.debug_map).read_text() if args.debug_map else None
        intr = Path(args.intrinsics).read_text() if args.intrinsics else None
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        report = classify_report(listing, dmap, intr)
    except (ParseError, DuplicateIntrinsic) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="syncid", description="sync-op identification")
    sub = parser.add_subparsers(dest="command", required=True)
    add_classify_arguments(sub.add_parser("classify", help="classify a listing"))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    return run_classify(args)


if __name__ == "__main__":
    sys.exit(main())
