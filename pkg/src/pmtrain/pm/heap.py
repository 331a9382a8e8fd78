"""Emulated byte-addressable persistent memory over a memory-mapped file.

The file holds a 4 KiB header followed by two equal regions, ``main`` and
``back``.  All writes go through :meth:`Heap._write`, which feeds a
:class:`CrashModel` so that power-failure images can be generated at any
point: a crash image keeps every line that was durable at the last fence
and, for each line written since, either the old or the new contents.
"""

from __future__ import annotations

import itertools
import mmap
import os
import random
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Iterator, Optional, Union

MAGIC = b"PMTRHEAP"
VERSION = 1
HEADER_SIZE = 4096
MIN_REGION_SIZE = 4096
NUM_ROOTS = 8
DEFAULT_LINE_SIZE = 64

# magic, version, state, pad, region_size, main_offset, back_offset,
# alloc_head, root_table[8]
_HEADER = struct.Struct("<8sIB3xQQQQ8Q")
STATE_OFFSET = 12
ALLOC_HEAD_OFFSET = 40
ROOTS_OFFSET = 48
# Transactional header fields (alloc_head + roots) and their shadow copy,
# which plays the role of ``back`` for the header.
TXN_FIELDS_START = ALLOC_HEAD_OFFSET
TXN_FIELDS_END = ROOTS_OFFSET + 8 * NUM_ROOTS
SHADOW_OFFSET = TXN_FIELDS_END
SHADOW_DELTA = SHADOW_OFFSET - TXN_FIELDS_START

_U64 = struct.Struct("<Q")


class State(IntEnum):
    IDLE = 0
    MUTATING = 1
    COPYING = 2


class HeapError(Exception):
    """Base class for persistent-heap failures."""


class CorruptHeap(HeapError):
    pass


class OutOfMemory(HeapError):
    pass


class OutOfBounds(HeapError):
    pass


@dataclass(frozen=True)
class PmRef:
    """A persistent object: ``offset`` is relative to the start of main."""

    offset: int
    length: int

    def __post_init__(self):
        if self.length <= 0 or self.offset < 0:
            raise ValueError(f"invalid PmRef({self.offset}, {self.length})")

    def at(self, delta: int, length: int) -> "PmRef":
        """Sub-reference ``[offset + delta, offset + delta + length)``."""
        if delta < 0 or delta + length > self.length:
            raise OutOfBounds(f"sub-range {delta}+{length} outside {self}")
        return PmRef(self.offset + delta, length)


@dataclass(frozen=True)
class HeapLayout:
    magic: bytes
    version: int
    state_flag: State
    region_size: int
    main_offset: int
    back_offset: int
    alloc_head: int
    root_table: tuple

    @classmethod
    def unpack(cls, buf) -> "HeapLayout":
        fields = _HEADER.unpack_from(buf, 0)
        magic, version, state, region, main, back, head = fields[:7]
        if magic != MAGIC:
            raise CorruptHeap(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptHeap(f"unsupported version {version}")
        try:
            state = State(state)
        except ValueError:
            raise CorruptHeap(f"corrupt state flag {state}") from None
        return cls(magic, version, state, region, main, back, head, tuple(fields[7:]))

    def pack(self) -> bytes:
        return _HEADER.pack(
            self.magic,
            self.version,
            int(self.state_flag),
            self.region_size,
            self.main_offset,
            self.back_offset,
            self.alloc_head,
            *self.root_table,
        )


@dataclass
class CrashModel:
    """Tracks which cache lines may differ between the volatile view and
    the durable media.

    ``durable`` maps every line that is not known to be durable to the
    contents the media holds for it.  ``pending`` lines were stored and not
    flushed; ``flushed`` lines were flushed since the last fence (value is
    the snapshot taken at flush time).  A line stored again after a flush
    keeps its flushed snapshot in ``promised`` so the next fence makes that
    snapshot durable rather than the newer, unflushed bytes.
    """

    line_size: int = DEFAULT_LINE_SIZE
    durable: dict = field(default_factory=dict)
    pending: set = field(default_factory=set)
    flushed: dict = field(default_factory=dict)
    promised: dict = field(default_factory=dict)

    def lines(self, start: int, end: int) -> range:
        return range(start // self.line_size, (end - 1) // self.line_size + 1)

    def _line(self, buf, line: int) -> bytes:
        return bytes(buf[line * self.line_size : (line + 1) * self.line_size])

    def before_store(self, buf, start: int, end: int) -> None:
        for line in self.lines(start, end):
            if line not in self.durable:
                self.durable[line] = self._line(buf, line)
            snap = self.flushed.pop(line, None)
            if snap is not None:
                self.promised[line] = snap
            self.pending.add(line)

    def flush(self, buf, start: int, end: int) -> None:
        for line in self.lines(start, end):
            if line in self.pending:
                self.pending.discard(line)
                self.promised.pop(line, None)
                self.flushed[line] = self._line(buf, line)
            elif line in self.flushed:
                self.flushed[line] = self._line(buf, line)

    def fence(self) -> None:
        for line in self.flushed:
            self.durable.pop(line, None)
        self.flushed.clear()
        for line, snap in self.promised.items():
            self.durable[line] = snap
        self.promised.clear()

    @property
    def dirty_lines(self) -> list:
        return sorted(self.durable)

    def image(self, buf, persisted: Iterable[int]) -> bytearray:
        """Durable image where exactly the ``persisted`` dirty lines carry
        their volatile contents."""
        keep = set(persisted)
        out = bytearray(buf)
        for line, old in self.durable.items():
            if line not in keep:
                out[line * self.line_size : line * self.line_size + len(old)] = old
        return out


AdversaryChoice = Union[None, str, int, Iterable[int], Callable[[list], Iterable[int]]]


class Heap:
    """An open persistent heap.  Not thread-safe.

    ``track=False`` disables crash-model bookkeeping; the fence and flush
    counters stay live.  Use it for long runs that only need process-kill
    durability (the mapped file already holds every store).
    """

    def __init__(self, path, mm: mmap.mmap, fh, line_size: int, track: bool):
        self.path = os.fspath(path)
        self._mm = mm
        self._fh = fh
        layout = HeapLayout.unpack(mm)
        self.region_size = layout.region_size
        self.main_offset = layout.main_offset
        self.back_offset = layout.back_offset
        self.crash = CrashModel(line_size) if track else None
        self.fence_count = 0
        self.flush_count = 0
        self.read_count = 0
        self.observer: Optional[Callable[["Heap", str], None]] = None
        self.log = None  # set by txn.begin_txn

    # -- lifecycle -------------------------------------------------------

    @classmethod
    def _map(cls, path, line_size=DEFAULT_LINE_SIZE, track=True) -> "Heap":
        fh = open(path, "r+b")
        try:
            size = os.fstat(fh.fileno()).st_size
            if size < HEADER_SIZE:
                raise CorruptHeap(f"{path}: truncated ({size} bytes)")
            mm = mmap.mmap(fh.fileno(), size)
        except Exception:
            fh.close()
            raise
        try:
            heap = cls(path, mm, fh, line_size, track)
            if size != heap.back_offset + heap.region_size or (
                heap.back_offset != heap.main_offset + heap.region_size
            ):
                raise CorruptHeap(f"{path}: size {size} does not match header")
        except Exception:
            mm.close()
            fh.close()
            raise
        return heap

    def close(self) -> None:
        if self._mm is not None:
            self._mm.flush()
            self._mm.close()
            self._fh.close()
            self._mm = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def closed(self) -> bool:
        return self._mm is None

    # -- header ----------------------------------------------------------

    @property
    def layout(self) -> HeapLayout:
        return HeapLayout.unpack(self._mm)

    @property
    def state(self) -> State:
        return State(self._mm[STATE_OFFSET])

    @property
    def alloc_head(self) -> int:
        return _U64.unpack_from(self._mm, ALLOC_HEAD_OFFSET)[0]

    def root(self, slot: int) -> int:
        """Root pointer in ``slot`` as an absolute file offset, 0 = null."""
        if not 0 <= slot < NUM_ROOTS:
            raise IndexError(slot)
        return _U64.unpack_from(self._mm, ROOTS_OFFSET + 8 * slot)[0]

    # -- pointers --------------------------------------------------------

    def ptr(self, ref: Optional[PmRef]) -> int:
        """Persistent pointer (absolute file offset) for ``ref``; 0 = null."""
        return 0 if ref is None else self.main_offset + ref.offset

    def deref(self, ptr: int, length: int) -> Optional[PmRef]:
        if ptr == 0:
            return None
        ref = PmRef(ptr - self.main_offset, length)
        self._check_main(self.main_offset + ref.offset, ref.length)
        return ref

    # -- raw access ------------------------------------------------------

    def _check_main(self, start: int, length: int) -> None:
        if start < self.main_offset or start + length > self.main_offset + self.region_size:
            raise OutOfBounds(f"[{start}, {start + length}) outside main region")

    def _notify(self, event: str) -> None:
        if self.observer is not None:
            self.observer(self, event)

    def _write(self, start: int, data) -> None:
        """Store ``data`` at absolute ``start`` (volatile view)."""
        n = len(data)
        if n == 0:
            return
        if self.crash is not None:
            self.crash.before_store(self._mm, start, start + n)
        self._mm[start : start + n] = data
        self._notify("store")

    def _read(self, start: int, length: int) -> bytes:
        return self._mm[start : start + length]

    def _flush(self, start: int, length: int) -> None:
        if length <= 0:
            return
        self.flush_count += 1
        if self.crash is not None:
            self.crash.flush(self._mm, start, start + length)
        self._notify("flush")

    def raw_read(self, ref: PmRef) -> bytes:
        start = self.main_offset + ref.offset
        self._check_main(start, ref.length)
        self.read_count += 1
        return self._read(start, ref.length)

    def flush_range(self, ref: PmRef) -> None:
        self._flush(self.main_offset + ref.offset, ref.length)

    def fence(self) -> None:
        self.fence_count += 1
        if self.crash is not None:
            self.crash.fence()
        self._notify("fence")

    def region_bytes(self, which: str = "main") -> bytes:
        start = self.main_offset if which == "main" else self.back_offset
        return self._read(start, self.region_size)

    # -- crash images ----------------------------------------------------

    def dirty_lines(self) -> list:
        if self.crash is None:
            raise HeapError("crash tracking disabled on this handle")
        return self.crash.dirty_lines

    def crash_bytes(self, choice: AdversaryChoice = None) -> bytearray:
        """Bytes of a power-failure image.

        ``choice`` selects which dirty lines persist: ``None``/``"none"``
        keeps only fenced state, ``"all"`` the full volatile view, an
        ``int`` seeds a fair coin per line, an iterable lists line indices,
        a callable receives the sorted dirty lines and returns a subset.
        """
        dirty = self.dirty_lines()
        if choice is None or choice == "none":
            keep: Iterable[int] = ()
        elif choice == "all":
            keep = dirty
        elif isinstance(choice, int) and not isinstance(choice, bool):
            rng = random.Random(choice)
            keep = [line for line in dirty if rng.random() < 0.5]
        elif callable(choice):
            keep = choice(dirty)
        else:
            keep = choice
        return self.crash.image(self._mm, keep)

    def enumerate_crash_bytes(self) -> Iterator[bytearray]:
        """Every distinct image: one per subset of the dirty lines."""
        dirty = self.dirty_lines()
        for r in range(len(dirty) + 1):
            for subset in itertools.combinations(dirty, r):
                yield self.crash.image(self._mm, subset)


def _align8(n: int) -> int:
    return (n + 7) & ~7


def create_heap(path, region_size: int, line_size: int = DEFAULT_LINE_SIZE, track: bool = True) -> Heap:
    """Create a zero-filled heap file and return an open handle."""
    if region_size < MIN_REGION_SIZE:
        raise HeapError(f"region_size {region_size} < {MIN_REGION_SIZE}")
    region_size = _align8(region_size)
    if os.path.exists(path) and os.path.getsize(path) > 0:
        raise HeapError(f"{path} exists and is not empty")
    layout = HeapLayout(
        MAGIC,
        VERSION,
        State.IDLE,
        region_size,
        HEADER_SIZE,
        HEADER_SIZE + region_size,
        0,
        (0,) * NUM_ROOTS,
    )
    with open(path, "wb") as fh:
        fh.truncate(HEADER_SIZE + 2 * region_size)
        fh.write(layout.pack())
        fh.flush()
        os.fsync(fh.fileno())
    return Heap._map(path, line_size, track)


def write_image(path, image) -> None:
    """Write a crash image produced by :meth:`Heap.crash_bytes` to a file."""
    with open(path, "wb") as fh:
        fh.write(image)


def crash_image(h: Heap, path, choice: AdversaryChoice = None):
    """Write the power-failure image selected by ``choice`` to ``path``.
    The handle ``h`` is left untouched."""
    write_image(path, h.crash_bytes(choice))
    return path


def read_u64(h: Heap, ptr: int) -> int:
    return _U64.unpack_from(h._mm, ptr)[0]
