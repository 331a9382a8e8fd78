"""Twin-copy durable transactions.

User code mutates ``main`` in place; ``back`` holds the last committed
snapshot.  A volatile log of modified ranges drives the commit-time copy
main -> back.  Fences per committed transaction: exactly four.

    begin:  state=MUTATING, pwb, fence          (1)
    end:    fence                               (2)
            state=COPYING, pwb, fence           (3)
            copy logged ranges main -> back, pwb, fence   (4)
            state=IDLE, pwb    (made durable by the next fence)

Recovery looks only at the durable state flag: MUTATING restores main
from back, COPYING redoes the main -> back copy.
"""

from __future__ import annotations

import bisect
import contextlib
from dataclasses import dataclass, field

from .heap import (
    ALLOC_HEAD_OFFSET,
    ROOTS_OFFSET,
    SHADOW_DELTA,
    STATE_OFFSET,
    TXN_FIELDS_END,
    TXN_FIELDS_START,
    DEFAULT_LINE_SIZE,
    Heap,
    HeapError,
    OutOfBounds,
    OutOfMemory,
    PmRef,
    State,
    _U64,
    _align8,
)


class TxnError(HeapError):
    pass


@dataclass
class TxnLog:
    """Sorted, coalesced ``[start, end)`` ranges (absolute file offsets)."""

    entries: list = field(default_factory=list)
    open: bool = False

    def add(self, start: int, end: int) -> None:
        i = bisect.bisect_left(self.entries, start, key=lambda e: e[0])
        if i > 0 and self.entries[i - 1][1] >= start:
            i -= 1
        j = i
        while j < len(self.entries) and self.entries[j][0] <= end:
            start = min(start, self.entries[j][0])
            end = max(end, self.entries[j][1])
            j += 1
        self.entries[i:j] = [(start, end)]


def _set_state(h: Heap, state: State) -> None:
    h._write(STATE_OFFSET, bytes([state]))
    h._flush(STATE_OFFSET, 1)


def _twin(h: Heap, start: int) -> int:
    """Offset of the backup copy of absolute offset ``start``."""
    if start >= h.main_offset:
        return start + (h.back_offset - h.main_offset)
    return start + SHADOW_DELTA


def begin_txn(h: Heap) -> None:
    if h.log is not None and h.log.open:
        raise TxnError("nested transaction")
    _set_state(h, State.MUTATING)
    h.fence()
    h.log = TxnLog(open=True)


def _require_txn(h: Heap) -> TxnLog:
    if h.log is None or not h.log.open:
        raise TxnError("no open transaction")
    return h.log


def _store_abs(h: Heap, start: int, data) -> None:
    log = _require_txn(h)
    n = len(data)
    if n == 0:
        return
    h._write(start, data)
    h._flush(start, n)
    log.add(start, start + n)


def txn_store(h: Heap, ref: PmRef, data, at: int = 0) -> None:
    """Interposed store: write ``data`` at ``ref.offset + at``, log, pwb."""
    _require_txn(h)
    if at < 0 or at + len(data) > ref.length:
        raise OutOfBounds(f"{len(data)} bytes at +{at} exceed {ref}")
    start = h.main_offset + ref.offset + at
    h._check_main(start, len(data))
    if ref.offset + ref.length > h.alloc_head:
        raise OutOfBounds(f"{ref} beyond alloc_head {h.alloc_head}")
    _store_abs(h, start, data)


def store_u64(h: Heap, ref: PmRef, at: int, value: int) -> None:
    txn_store(h, ref, _U64.pack(value), at)


def end_txn(h: Heap) -> None:
    log = _require_txn(h)
    h.fence()
    _set_state(h, State.COPYING)
    h.fence()
    for start, end in log.entries:
        dst = _twin(h, start)
        h._write(dst, h._read(start, end - start))
        h._flush(dst, end - start)
    h.fence()
    _set_state(h, State.IDLE)
    h.log = None


@contextlib.contextmanager
def transaction(h: Heap):
    """``with transaction(h): ...`` commits on normal exit.

    There is no voluntary rollback: an exception leaves the transaction
    open and the handle must be discarded; reopening the file recovers it.
    """
    begin_txn(h)
    yield h
    end_txn(h)


def recover(h: Heap) -> State:
    """Bring the heap back to a consistent state.  Returns the state found."""
    if h.log is not None and h.log.open:
        raise TxnError("recover with an open transaction")
    found = h.layout.state_flag
    if found == State.IDLE:
        return found
    if found == State.MUTATING:
        src, dst = h.back_offset, h.main_offset
        fsrc, fdst = TXN_FIELDS_START + SHADOW_DELTA, TXN_FIELDS_START
    else:
        src, dst = h.main_offset, h.back_offset
        fsrc, fdst = TXN_FIELDS_START, TXN_FIELDS_START + SHADOW_DELTA
    nfields = TXN_FIELDS_END - TXN_FIELDS_START
    h._write(fdst, h._read(fsrc, nfields))
    h._flush(fdst, nfields)
    h._write(dst, h._read(src, h.region_size))
    h._flush(dst, h.region_size)
    h.fence()
    _set_state(h, State.IDLE)
    return found


def open_heap(path, line_size: int = DEFAULT_LINE_SIZE, track: bool = True) -> Heap:
    """Map an existing heap file and run recovery."""
    h = Heap._map(path, line_size, track)
    try:
        recover(h)
    except Exception:
        h.close()
        raise
    return h


def pm_alloc(h: Heap, length: int) -> PmRef:
    """Bump-allocate ``length`` bytes from main.  Transactional."""
    _require_txn(h)
    if length <= 0:
        raise ValueError("allocation length must be positive")
    head = h.alloc_head
    new_head = head + _align8(length)
    if new_head > h.region_size:
        raise OutOfMemory(f"need {length} bytes, {h.region_size - head} free")
    _store_abs(h, ALLOC_HEAD_OFFSET, _U64.pack(new_head))
    return PmRef(head, length)


def set_root(h: Heap, slot: int, ptr: int) -> None:
    h.root(slot)  # bounds check
    _store_abs(h, ROOTS_OFFSET + 8 * slot, _U64.pack(ptr))
