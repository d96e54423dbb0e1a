"""Oracle, trials, benchmarks, attacks, reports and the command line."""

import csv
import io
import json

import pytest

from mvee.agents import Agent, Strategy
from mvee.errors import InstanceTooLarge
from mvee.harness import cli
from mvee.harness.attack import (AttackReport, cmd_attack, guess_probability, scan_for_buffer,
                                 tamper_buffer_payload, tamper_syscall_arg)
from mvee.harness.bench import bench_one, cmd_bench, native_time
from mvee.harness.library import BUILTINS, builtin, finegrain, independent, racy, serial, two_locks
from mvee.harness.oracle import brute_force_oracle, check_size, generate_family
from mvee.harness.reports import emit, to_csv, to_json
from mvee.harness.trials import cmd_verify, replay_order_violations, run_trial
from mvee.workload import parse_workload

LOCK_PAIR = parse_workload("workload lock-pair\nvars v=0\nthread 0:\n    spawn 1\n    spawn 2\n"
                           "    join 1\n    join 2\n"
                           "thread 1:\n    lock v\n    unlock v\n"
                           "thread 2:\n    lock v\n    unlock v\n")

# oracle


@pytest.mark.parametrize("strategy", list(Strategy))
def test_lock_pair_all_interleavings(strategy):
    verdict = brute_force_oracle(LOCK_PAIR, strategy)
    assert verdict.passed and verdict.interleavings > 1


def test_two_locks_reordering_by_strategy():
    verdicts = {s: brute_force_oracle(two_locks(), s) for s in Strategy}
    assert all(v.passed for v in verdicts.values())
    assert verdicts[Strategy.TOTAL_ORDER].reordered == 0
    assert verdicts[Strategy.PARTIAL_ORDER].reordered > 0
    assert verdicts[Strategy.WALL_OF_CLOCKS].reordered > 0


def test_too_large():
    with pytest.raises(InstanceTooLarge):
        check_size(finegrain(threads=3, ops=1))
    with pytest.raises(InstanceTooLarge):
        brute_force_oracle(finegrain(threads=2, ops=4), Strategy.TOTAL_ORDER)


def test_family_is_small_and_seeded():
    family = generate_family(50, seed=7)
    assert len(family) == 50 and len({w.name for w in family}) == 50
    for w in family:
        check_size(w)
    assert generate_family(50, seed=7) == family


def test_oracle_catches_broken_partial_order(monkeypatch):
    """A PO agent that ignores same-word dependencies must be caught."""

    def reckless(self, ring, tid):
        consumed, mask = self.consumed, ring.capacity - 1
        for i in range(ring.progress[self.ordinal], ring.head):
            if not consumed[i & mask] and ring.field(i, 0) == tid:
                return i
        return -1

    monkeypatch.setattr(Agent, "_po_candidate", reckless)
    verdict = brute_force_oracle(LOCK_PAIR, Strategy.PARTIAL_ORDER)
    assert not verdict.passed
    assert verdict.counterexamples[0].decisions is not None


def test_oracle_catches_clock_skipping(monkeypatch):
    original = Agent.replay_wall_of_clocks

    def impatient(self, task, word, kind, perform):
        self.local_wall[:] = [10**9] * len(self.local_wall)
        return (yield from original(self, task, word, kind, perform))

    monkeypatch.setattr(Agent, "replay_wall_of_clocks", impatient)
    assert not brute_force_oracle(LOCK_PAIR, Strategy.WALL_OF_CLOCKS,
                                  stop_at_first=True).passed


# trials

def test_replay_order_violations():
    master = [(1, 0, 0), (2, 1, 0), (1, 1, 0)]
    assert replay_order_violations(master, master, Strategy.TOTAL_ORDER) == []
    swapped = [(2, 1, 0), (1, 0, 0), (1, 1, 0)]
    assert replay_order_violations(master, swapped, Strategy.PARTIAL_ORDER) == []
    assert "total order not reproduced" in replay_order_violations(master, swapped,
                                                                   Strategy.TOTAL_ORDER)
    bad = [(1, 0, 0), (1, 1, 0), (2, 1, 0)]
    assert any("per-var" in p for p in
               replay_order_violations(master, bad, Strategy.PARTIAL_ORDER))


def test_verify_finegrain():
    reports = cmd_verify(finegrain(threads=4), Strategy.WALL_OF_CLOCKS, 2, 20)
    assert [r.seed for r in reports] == list(range(20))
    assert all(r.passed and not r.violations for r in reports)
    with pytest.raises(ValueError):
        cmd_verify(finegrain(), Strategy.WALL_OF_CLOCKS, 1, 1)


@pytest.mark.parametrize("strategy", list(Strategy))
def test_serial_records_nothing(strategy):
    report = run_trial(serial(), strategy, 2, 0)
    assert report.passed and report.stats[0]["recorded"] == 0
    assert report.stats[0]["sync_ops"] > 0


def test_racy_breaks_somewhere():
    outcomes = [run_trial(racy(), Strategy.WALL_OF_CLOCKS, 2, s).outcome for s in range(100)]
    assert any(o != "equivalent" for o in outcomes)


def test_trial_report_json():
    doc = run_trial(two_locks(), Strategy.TOTAL_ORDER, 2, 3).as_json()
    assert doc["outcome"] == "Equivalent" and doc["threads"] == 2
    json.dumps(doc)


# benchmarks

def test_density_linear_in_ops():
    densities = {}
    for ops in (10, 20, 40):
        _, n, work = native_time(finegrain(threads=2, ops=ops, budget=20_000))
        densities[ops] = 1e6 * n / work
    assert densities[20] == pytest.approx(2 * densities[10], rel=0.05)
    assert densities[40] == pytest.approx(4 * densities[10], rel=0.05)


def test_independent_overhead_near_one():
    w = independent(threads=4, work=100_000)
    base = native_time(w)
    for s in Strategy:
        row = bench_one(w, s, native=base)
        assert row.all_equivalent and 1.0 <= row.overhead < 1.1, (s, row.overhead)


def test_bench_report_shape():
    report = cmd_bench({"finegrain": BUILTINS["finegrain"]}, [Strategy.TOTAL_ORDER],
                       params={"ops": 8})
    row = report.row("finegrain", "to")
    assert row.threads == 4 and len(row.runs) == 5
    with pytest.raises(KeyError):
        report.row("finegrain", "po")


# attacks

def test_guess_probability_examples():
    assert guess_probability(256 << 20) == pytest.approx(9.53e-7, abs=0.01e-7)
    assert guess_probability(4096) == 1 / (2**36 - 2)
    assert guess_probability(512 << 20) == 2 * guess_probability(256 << 20)
    with pytest.raises(ValueError):
        guess_probability(1000)
    with pytest.raises(ValueError):
        guess_probability(4096, 3000)


def test_attack_scenarios_small():
    assert tamper_syscall_arg(Strategy.TOTAL_ORDER, 5).passed
    report = tamper_buffer_payload(Strategy.PARTIAL_ORDER, 5)
    assert report.passed, report.failures


def test_scan_positive_control():
    """The scanner must find the thread-local ring pointer of an unsecured agent."""
    report = scan_for_buffer(Strategy.WALL_OF_CLOCKS)
    assert report.details["hits"] > 0 and not report.passed


def test_cmd_attack_dispatch():
    assert cmd_attack("tamper-syscall-arg", trials=2).strategy == "woc"
    with pytest.raises(ValueError):
        cmd_attack("nope")
    assert AttackReport("x", "woc", 1, 1).passed


# reports

def test_reports(tmp_path, capsys):
    rows = [{"a": 1, "b": b"x"}, {"a": 2, "b": "y"}]
    assert list(csv.DictReader(io.StringIO(to_csv(rows)))) == [{"a": "1", "b": "x"},
                                                               {"a": "2", "b": "y"}]
    assert json.loads(to_json({"k": (b"v", 1)})) == {"k": ["v", 1]}
    emit({"k": 1}, rows, fmt="csv", out=str(tmp_path / "o.csv"), fields=["a"])
    assert (tmp_path / "o.csv").read_text() == "a\n1\n2\n"
    emit({"k": 1}, rows)
    assert json.loads(capsys.readouterr().out) == {"k": 1}
    with pytest.raises(ValueError):
        emit({}, [], fmt="xml")


# command line

def run_cli(args, capsys):
    code = cli.main(args)
    return code, capsys.readouterr()


def test_cli_run_and_verify(capsys):
    code, out = run_cli(["run", "--workload", "builtin:two-locks", "--strategy", "po"], capsys)
    assert code == 0 and json.loads(out.out)["outcome"] == "Equivalent"
    code, out = run_cli(["verify", "--workload", "builtin:finegrain", "--trials", "3",
                         "--format", "csv"], capsys)
    assert code == 0 and out.out.count("Equivalent") == 3


def test_cli_verify_failure_exit(capsys):
    code, _ = run_cli(["verify", "--workload", "builtin:racy", "--trials", "100",
                       "--threads", "2"], capsys)
    assert code == 1


def test_cli_workload_file(tmp_path, capsys):
    path = tmp_path / "w.mvee"
    path.write_text("workload f\nvars m=0\nthread 0:\n    spawn 1\n    join 1\n"
                    "thread 1:\n    lock m\n    unlock m\n")
    code, out = run_cli(["run", "--workload", str(path), "--strategy", "swoc",
                         "--replicae", "3"], capsys)
    assert code == 0 and json.loads(out.out)["workload"] == "f"


@pytest.mark.parametrize("args", [
    ["run", "--workload", "builtin:nope"],
    ["run", "--workload", "/no/such/file"],
    ["run", "--param", "ops"],
    ["run", "--param", "ops=many"],
    ["run", "--param", "colour=3"],
    ["run", "--replicae", "0"],
    ["verify", "--replicae", "1"],
    ["run", "--strategy", "xx"],
    ["frobnicate"],
    ["fuzz", "--workload", "builtin:finegrain"],
    ["guess-prob", "--buffer-bytes", "100"],
    ["bench", "--param", "ops=3"],
])
def test_cli_usage_errors(args, capsys):
    code, _ = run_cli(args, capsys)
    assert code == 2


def test_cli_parse_error_in_file(tmp_path, capsys):
    path = tmp_path / "bad.mvee"
    path.write_text("thread 0:\n    lock q\n")
    code, out = run_cli(["run", "--workload", str(path)], capsys)
    assert code == 2 and "undeclared" in out.err


def test_cli_guess_prob(capsys):
    code, out = run_cli(["guess-prob"], capsys)
    assert code == 0
    assert json.loads(out.out)["probability"] == pytest.approx(9.53e-7, abs=0.01e-7)


def test_cli_fuzz_and_attack(tmp_path, capsys):
    out = tmp_path / "fuzz.json"
    code, _ = run_cli(["fuzz", "--trials", "3", "--strategy", "woc", "--out", str(out)], capsys)
    assert code == 0 and json.loads(out.read_text())["instances"] == 3
    code, res = run_cli(["attack", "--scenario", "tamper-syscall-arg", "--trials", "3",
                         "--format", "csv"], capsys)
    assert code == 0 and "tamper-syscall-arg" in res.out
    code, _ = run_cli(["attack", "--scenario", "scan-for-buffer", "--strategy", "woc"], capsys)
    assert code == 1


def test_cli_bench_single(capsys):
    code, out = run_cli(["bench", "--workload", "builtin:independent", "--strategy", "woc",
                         "--param", "work=20000", "--format", "csv"], capsys)
    assert code == 0 and out.out.splitlines()[0].startswith("workload,strategy")


def test_cli_classify(tmp_path, capsys):
    from mvee.syncid import WORKER_DEBUG_MAP, WORKER_LISTING
    (tmp_path / "l").write_text(WORKER_LISTING)
    (tmp_path / "m").write_text(WORKER_DEBUG_MAP)
    code, out = run_cli(["classify", str(tmp_path / "l"), "--debug-map", str(tmp_path / "m")],
                        capsys)
    assert code == 0 and json.loads(out.out)["wrap_targets"] == 5


def test_builtin_lookup():
    with pytest.raises(KeyError):
        builtin("nope")
    assert builtin("two-locks").name == "two-locks"
