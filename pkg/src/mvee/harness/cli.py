"""Command-line front end: ``mvee run|verify|bench|fuzz|attack|classify|guess-prob``.

Exit status: 0 when every check passed, 1 on a divergence or failed check,
2 on a usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from mvee import syncid
from mvee.agents import DEFAULT_CLOCKS, Strategy
from mvee.buffers import DEFAULT_CAPACITY
from mvee.errors import InstanceTooLarge, MveeError
from mvee.harness.attack import SCENARIOS, cmd_attack, guess_probability
from mvee.harness.bench import BENCH_PARAMS, BenchReport, cmd_bench
from mvee.harness.library import BUILTINS, EXTRAS, builtin
from mvee.harness.oracle import brute_force_oracle, generate_family
from mvee.harness.reports import FORMATS, emit
from mvee.harness.trials import cmd_verify, run_trial
from mvee.workload import Workload, parse_workload

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _params(items: list[str] | None) -> dict[str, int]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects KEY=VALUE, got {item!r}")
        try:
            out[key.replace("-", "_")] = int(value)
        except ValueError:
            raise UsageError(f"--param {key}: {value!r} is not an integer") from None
    return out


def load_workload(spec: str, threads: int, params: dict[str, int] | None = None) -> Workload:
    """``builtin:NAME`` or a path to a workload file."""
    if spec.startswith("builtin:"):
        try:
            return builtin(spec[len("builtin:"):], threads, **(params or {}))
        except KeyError as exc:
            raise UsageError(exc.args[0]) from None
        except TypeError as exc:
            raise UsageError(f"bad workload parameter: {exc}") from None
    path = Path(spec)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read workload {spec!r}: {exc.strerror}") from None
    try:
        return parse_workload(text, name=path.stem)
    except MveeError as exc:
        raise UsageError(f"{spec}: {exc}") from None


def _strategy(text: str | None, default: Strategy | None = Strategy.WALL_OF_CLOCKS):
    if text is None:
        return default
    try:
        return Strategy.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _strategies(text: str | None) -> list[Strategy]:
    return list(Strategy) if text is None else [_strategy(text)]


def _common(p: argparse.ArgumentParser, *, workload: bool = True) -> None:
    if workload:
        p.add_argument("--workload", default=None, help="file path or builtin:NAME")
        p.add_argument("--param", action="append", metavar="KEY=VALUE",
                       help="builtin workload parameter (repeatable)")
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--replicae", type=int, default=2)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--clocks", type=int, default=DEFAULT_CLOCKS)
    p.add_argument("--ring-capacity", type=int, default=DEFAULT_CAPACITY)
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("--format", choices=FORMATS, default="json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvee", description="multi-variant execution simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one session")
    _common(p)
    p.add_argument("--no-arbitrate", action="store_true",
                   help="testing only: let every replica run its own futex calls")

    p = sub.add_parser("verify", help="seeded replay-equivalence trials")
    _common(p)
    p.add_argument("--no-arbitrate", action="store_true",
                   help="testing only: let every replica run its own futex calls")

    p = sub.add_parser("bench", help="overhead against the native baseline")
    _common(p)

    p = sub.add_parser("fuzz", help="exhaustive interleaving oracle on small workloads")
    _common(p)
    p.set_defaults(replicae=3)

    p = sub.add_parser("attack", help="security scenarios")
    _common(p, workload=False)
    p.add_argument("--scenario", choices=SCENARIOS + ("all",), default="all")

    p = sub.add_parser("classify", help="sync-op identification in a listing")
    syncid.add_classify_arguments(p)

    p = sub.add_parser("guess-prob", help="chance of guessing the hidden buffer location")
    p.add_argument("--buffer-bytes", type=int, default=256 << 20)
    p.add_argument("--page-bytes", type=int, default=4096)
    p.add_argument("--address-bits", type=int, default=48)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=FORMATS, default="json")
    return parser


def _run(args) -> int:
    w = load_workload(args.workload or "builtin:finegrain", args.threads, _params(args.param))
    strategy = _strategy(args.strategy)
    if args.replicae < 1:
        raise UsageError("--replicae must be at least 1")
    report = run_trial(w, strategy, args.replicae, args.seed, clocks=args.clocks,
                       ring_capacity=args.ring_capacity, arbitrate=not args.no_arbitrate)
    emit(report.as_json(), [report.csv_row()], fmt=args.format, out=args.out)
    return EXIT_OK if report.passed else EXIT_FAIL


def _verify(args) -> int:
    w = load_workload(args.workload or "builtin:finegrain", args.threads, _params(args.param))
    strategy = _strategy(args.strategy)
    if args.replicae < 2:
        raise UsageError("verification needs --replicae of at least 2")
    reports = cmd_verify(w, strategy, args.replicae, args.trials or 100, seed=args.seed,
                         clocks=args.clocks, ring_capacity=args.ring_capacity,
                         arbitrate=not args.no_arbitrate)
    passed = sum(r.passed for r in reports)
    doc = {"workload": w.name, "strategy": strategy.value, "replicae": args.replicae,
           "threads": w.workers(), "trials": len(reports), "equivalent": passed,
           "results": [r.as_json() for r in reports]}
    emit(doc, [r.csv_row() for r in reports], fmt=args.format, out=args.out)
    return EXIT_OK if passed == len(reports) else EXIT_FAIL


def _bench(args) -> int:
    if args.workload is None:
        factories = dict(BUILTINS)
    elif args.workload.startswith("builtin:"):
        name = args.workload[len("builtin:"):]
        if name not in BUILTINS and name not in EXTRAS:
            raise UsageError(f"unknown builtin workload {name!r}")
        factories = {name: BUILTINS.get(name) or EXTRAS[name]}
    else:
        fixed = load_workload(args.workload, args.threads)
        factories = {fixed.name: lambda threads, **_: fixed}
    params = _params(args.param) or None
    if params is not None and len(factories) > 1:
        raise UsageError("--param needs a single --workload")
    try:
        report: BenchReport = cmd_bench(factories, _strategies(args.strategy), (args.threads,),
                                        (args.replicae,), seed=args.seed, params=params,
                                        clocks=args.clocks, ring_capacity=args.ring_capacity)
    except TypeError as exc:
        raise UsageError(f"bad workload parameter: {exc}") from None
    emit(report.as_json(), [r.as_json() for r in report.rows], fmt=args.format, out=args.out,
         fields=BenchReport.CSV_FIELDS)
    return EXIT_OK if all(r.all_equivalent for r in report.rows) else EXIT_FAIL


def _fuzz(args) -> int:
    if args.workload is not None:
        family = [load_workload(args.workload, args.threads, _params(args.param))]
    else:
        family = generate_family(args.trials or 60, seed=args.seed)
    verdicts = []
    try:
        for w in family:
            for s in _strategies(args.strategy):
                verdicts.append(brute_force_oracle(w, s, replicae=args.replicae,
                                                   clocks=args.clocks))
    except InstanceTooLarge as exc:
        raise UsageError(f"instance too large: {exc}") from None
    doc = {"instances": len(family), "verdicts": [v.as_json() for v in verdicts],
           "passed": all(v.passed for v in verdicts)}
    rows = [{k: v for k, v in x.as_json().items() if k != "counterexamples"} for x in verdicts]
    emit(doc, rows, fmt=args.format, out=args.out)
    return EXIT_OK if doc["passed"] else EXIT_FAIL


def _attack(args) -> int:
    scenarios = SCENARIOS if args.scenario == "all" else (args.scenario,)
    kw = dict(seed=args.seed, replicae=args.replicae, threads=args.threads)
    reports = [cmd_attack(s, _strategy(args.strategy, None), args.trials, **kw)
               for s in scenarios]
    doc = {"scenarios": [r.as_json() for r in reports], "passed": all(r.passed for r in reports)}
    rows = [{k: v for k, v in r.as_json().items() if k not in ("failures", "details")}
            for r in reports]
    emit(doc, rows, fmt=args.format, out=args.out)
    return EXIT_OK if doc["passed"] else EXIT_FAIL


def _guess(args) -> int:
    try:
        p = guess_probability(args.buffer_bytes, args.page_bytes, args.address_bits)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    doc = {"buffer_bytes": args.buffer_bytes, "page_bytes": args.page_bytes,
           "address_bits": args.address_bits, "probability": p}
    emit(doc, [doc], fmt=args.format, out=args.out)
    return EXIT_OK


COMMANDS = {"run": _run, "verify": _verify, "bench": _bench, "fuzz": _fuzz, "attack": _attack,
            "classify": syncid.run_classify, "guess-prob": _guess}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mvee {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
