import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmtrain.pm import (
    CorruptHeap,
    CrashModel,
    HeapError,
    HeapLayout,
    OutOfBounds,
    OutOfMemory,
    PmRef,
    State,
    create_heap,
    open_heap,
    pm_alloc,
    set_root,
    transaction,
    txn_store,
)
from pmtrain.pm.heap import HEADER_SIZE, MAGIC


def test_fresh_header_layout(tmp_path):
    path = tmp_path / "h.pm"
    create_heap(path, 4096).close()
    raw = path.read_bytes()
    assert len(raw) == HEADER_SIZE + 2 * 4096
    assert raw[0:8] == b"PMTRHEAP"
    assert struct.unpack_from("<I", raw, 8)[0] == 1
    assert raw[12] == 0
    assert struct.unpack_from("<QQQQ", raw, 16) == (4096, 4096, 8192, 0)
    assert struct.unpack_from("<8Q", raw, 48) == (0,) * 8


def test_layout_roundtrip(tmp_path):
    with create_heap(tmp_path / "h.pm", 8192) as h:
        lay = h.layout
        assert HeapLayout.unpack(lay.pack()) == lay
        assert lay.magic == MAGIC and lay.state_flag is State.IDLE


def test_create_rejects_small_region_and_existing_file(tmp_path):
    with pytest.raises(HeapError):
        create_heap(tmp_path / "a.pm", 4095)
    path = tmp_path / "b.pm"
    create_heap(path, 4096).close()
    with pytest.raises(HeapError):
        create_heap(path, 4096)


def test_empty_existing_file_is_accepted(tmp_path):
    path = tmp_path / "c.pm"
    path.write_bytes(b"")
    create_heap(path, 4096).close()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b.__setitem__(slice(0, 8), b"NOTAHEAP"),
        lambda b: b.__setitem__(8, 7),
        lambda b: b.__setitem__(12, 9),
    ],
    ids=["magic", "version", "state"],
)
def test_open_rejects_corrupt_header(tmp_path, mutate):
    path = tmp_path / "h.pm"
    create_heap(path, 4096).close()
    raw = bytearray(path.read_bytes())
    mutate(raw)
    path.write_bytes(raw)
    with pytest.raises(CorruptHeap):
        open_heap(path)


def test_open_rejects_truncated_file(tmp_path):
    path = tmp_path / "h.pm"
    create_heap(path, 4096).close()
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(CorruptHeap):
        open_heap(path)


def test_alloc_alignment_and_reopen(tmp_path):
    path = tmp_path / "h.pm"
    with create_heap(path, 4096) as h:
        with transaction(h):
            a = pm_alloc(h, 100)
            b = pm_alloc(h, 100)
            txn_store(h, b, b"x" * 100)
            set_root(h, 3, h.ptr(b))
        assert (a.offset, b.offset) == (0, 104)
        assert h.alloc_head == 208
    with open_heap(path) as h:
        assert h.alloc_head == 208
        ref = h.deref(h.root(3), 100)
        assert h.raw_read(ref) == b"x" * 100


def test_alloc_out_of_memory(tmp_path):
    with create_heap(tmp_path / "h.pm", 4096) as h:
        with transaction(h):
            pm_alloc(h, 4000)
            with pytest.raises(OutOfMemory):
                pm_alloc(h, 100)


def test_pointer_null_and_bounds(tmp_path):
    with create_heap(tmp_path / "h.pm", 4096) as h:
        assert h.ptr(None) == 0 and h.deref(0, 8) is None
        with pytest.raises(OutOfBounds):
            h.raw_read(PmRef(4090, 16))
        with pytest.raises(IndexError):
            h.root(8)


def test_store_beyond_alloc_head_rejected(tmp_path):
    with create_heap(tmp_path / "h.pm", 4096) as h:
        with transaction(h):
            with pytest.raises(OutOfBounds):
                txn_store(h, PmRef(0, 8), b"12345678")


# -- crash model ---------------------------------------------------------


def _buf(n=4):
    return bytearray(16 * n)


def test_crash_model_store_flush_fence():
    cm = CrashModel(line_size=16)
    buf = _buf()
    cm.before_store(buf, 0, 4)
    buf[0:4] = b"abcd"
    assert cm.dirty_lines == [0]
    assert cm.image(buf, [])[0:4] == b"\0\0\0\0"
    assert cm.image(buf, [0])[0:4] == b"abcd"
    cm.flush(buf, 0, 4)
    assert cm.dirty_lines == [0]
    cm.fence()
    assert cm.dirty_lines == []


def test_crash_model_unflushed_store_survives_fence():
    cm = CrashModel(line_size=16)
    buf = _buf()
    cm.before_store(buf, 20, 21)
    buf[20] = 1
    cm.fence()
    assert cm.dirty_lines == [1]


def test_crash_model_store_after_flush_persists_flushed_snapshot():
    # store A, flush, store B (not flushed), fence: media holds A, B is volatile
    cm = CrashModel(line_size=16)
    buf = _buf()
    cm.before_store(buf, 0, 1)
    buf[0] = ord("A")
    cm.flush(buf, 0, 1)
    cm.before_store(buf, 0, 1)
    buf[0] = ord("B")
    cm.fence()
    assert cm.dirty_lines == [0]
    assert cm.image(buf, [])[0] == ord("A")
    assert cm.image(buf, [0])[0] == ord("B")


def test_crash_model_restore_then_reflush_is_clean():
    cm = CrashModel(line_size=16)
    buf = _buf()
    for v in (1, 2):
        cm.before_store(buf, 0, 1)
        buf[0] = v
        cm.flush(buf, 0, 1)
    cm.fence()
    assert cm.dirty_lines == []


@given(st.lists(st.tuples(st.sampled_from(["store", "flush", "fence"]), st.integers(0, 63)), max_size=40))
def test_crash_model_images_are_per_line_mixtures(ops):
    """Every image equals, per line, either the volatile line or the line's
    content at some earlier point."""
    cm = CrashModel(line_size=16)
    buf = _buf()
    history = {line: {bytes(16)} for line in range(4)}
    for n, (op, pos) in enumerate(ops):
        if op == "store":
            cm.before_store(buf, pos, pos + 1)
            buf[pos] = n % 251 + 1
            history[pos // 16].add(bytes(buf[pos // 16 * 16 : pos // 16 * 16 + 16]))
        elif op == "flush":
            cm.flush(buf, pos, pos + 1)
        else:
            cm.fence()
    for keep in ([], cm.dirty_lines):
        img = cm.image(buf, keep)
        for line in range(4):
            seg = bytes(img[16 * line : 16 * line + 16])
            assert seg in history[line]
            if line not in cm.dirty_lines:
                assert seg == bytes(buf[16 * line : 16 * line + 16])


def test_fully_fenced_heap_has_single_image(tmp_path):
    with create_heap(tmp_path / "h.pm", 4096) as h:
        with transaction(h):
            pm_alloc(h, 8)
        h.fence()
        assert h.dirty_lines() == []
        assert bytes(h.crash_bytes("none")) == bytes(h.crash_bytes("all"))


def test_untracked_handle_refuses_crash_images(tmp_path):
    with create_heap(tmp_path / "h.pm", 4096, track=False) as h:
        with pytest.raises(HeapError):
            h.crash_bytes()
