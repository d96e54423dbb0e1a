"""Replication rings: publication, reads, progress and back-pressure."""

import threading
import zlib
from typing import NamedTuple

import pytest

from mvee.agents import AllocationCounter, SyncOpRecord
from mvee.buffers import ReplicationRing
from mvee.errors import NotYetPublished, Overwritten, Regression


class Checked(NamedTuple):
    a: int
    b: int
    checksum: int


def checked(i: int) -> Checked:
    a, b = i, (i * 2654435761) & 0xFFFFFFFF
    return Checked(a, b, zlib.crc32(f"{a}:{b}".encode()))


def test_first_publish():
    ring = ReplicationRing(SyncOpRecord, 4)
    assert ring.try_publish(SyncOpRecord(1, 0x40, 0)) == 0
    assert ring.head == 1
    assert ring.read_slot(0) == SyncOpRecord(1, 0x40, 0)


def test_read_unpublished():
    ring = ReplicationRing(SyncOpRecord, 4)
    ring.try_publish(SyncOpRecord(1, 0x40, 0))
    with pytest.raises(NotYetPublished):
        ring.read_slot(1)


def test_capacity_must_be_power_of_two():
    with pytest.raises(ValueError):
        ReplicationRing(SyncOpRecord, 6)


def test_backpressure_blocks_until_progress():
    ring = ReplicationRing(SyncOpRecord, 4)
    for i in range(4):
        assert ring.try_publish(SyncOpRecord(0, i, 0)) == i
    assert ring.is_full()
    assert ring.try_publish(SyncOpRecord(0, 9, 0)) is None
    assert ring.head == 4
    ring.advance_progress(1, 1)
    assert ring.try_publish(SyncOpRecord(0, 9, 0)) == 4
    with pytest.raises(Overwritten):
        ring.read_slot(0)
    assert ring.read_slot(4).word == 9


def test_progress_monotone():
    ring = ReplicationRing(SyncOpRecord, 8)
    for i in range(5):
        ring.try_publish(SyncOpRecord(0, i, 0))
    ring.advance_progress(1, 2)
    assert ring.progress[1] == 2
    ring.advance_progress(1, 5)
    with pytest.raises(Regression):
        ring.advance_progress(1, 3)
    with pytest.raises(Regression):
        ring.advance_progress(1, 6)


def test_reuse_limit_is_min_rule():
    ring = ReplicationRing(SyncOpRecord, 8, consumers=(1, 2))
    for i in range(4):
        ring.try_publish(SyncOpRecord(0, i, 0))
    ring.advance_progress(1, 3)
    ring.advance_progress(2, 1)
    assert ring.reuse_limit() == 1 + 8


def test_no_consumers_never_blocks():
    ring = ReplicationRing(SyncOpRecord, 2, consumers=())
    for i in range(10):
        assert ring.try_publish(SyncOpRecord(0, i, 0)) == i


def test_overwrite_in_place():
    ring = ReplicationRing(SyncOpRecord, 4)
    ring.try_publish(SyncOpRecord(0, 1, 0))
    ring.overwrite(0, SyncOpRecord(0, 2, 0))
    assert ring.read_slot(0).word == 2
    with pytest.raises(Overwritten):
        ring.overwrite(3, SyncOpRecord(0, 2, 0))


def test_snapshot_and_allocation_note():
    counter = AllocationCounter()
    ring = ReplicationRing(SyncOpRecord, 4, allocator=counter)
    assert counter.count == 1 and counter.cells == 4 * 4 + 2
    for i in range(3):
        ring.try_publish(SyncOpRecord(0, i, 0))
    assert [r.word for r in ring.snapshot(1)] == [1, 2]


def test_four_producers_under_lock():
    ring = ReplicationRing(SyncOpRecord, 1 << 16, consumers=())
    lock = threading.Lock()
    tally = [0]
    per = 5000

    def produce(tid):
        for i in range(per):
            with lock:
                ring.publish(SyncOpRecord(tid, i, 0))
                tally[0] += 1

    threads = [threading.Thread(target=produce, args=(t,)) for t in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ring.head == tally[0] == 4 * per
    records = ring.snapshot()
    assert len(set(records)) == len(records) == 4 * per
    for tid in range(4):
        assert [r.word for r in records if r.thread == tid] == list(range(per))


def test_concurrent_reader_never_sees_torn_record():
    total = 1_000_000
    ring = ReplicationRing(Checked, 1024)
    errors: list[str] = []

    def producer():
        for i in range(total):
            ring.publish(checked(i), spin=64)

    def consumer():
        pos = 0
        while pos < total:
            try:
                rec = ring.read_slot(pos)
            except NotYetPublished:
                continue
            if rec.checksum != zlib.crc32(f"{rec.a}:{rec.b}".encode()) or rec.a != pos:
                errors.append(f"torn record at {pos}: {rec}")
                return
            pos += 1
            ring.advance_progress(1, pos)

    threads = [threading.Thread(target=producer), threading.Thread(target=consumer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert ring.head == total and ring.progress[1] == total
