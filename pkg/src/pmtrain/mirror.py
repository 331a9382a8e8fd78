"""Encrypted persistent replica of a :class:`~pmtrain.nn.Model`.

Persistent layout (all integers little-endian u64, pointers are absolute
file offsets, 0 = null)::

    PmModel:  numL | iter | rng_cursor | head
    PmLayer:  buffer_count | {plaintext_len | envelope_ptr | envelope_len} * count | next

Envelope slots are allocated once and overwritten in place by every
mirror-out.  Only :class:`~pmtrain.envelope.Envelope` bytes are ever
stored in them.
"""

from __future__ import annotations

import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import envelope as env
from .nn import Model, ShapeError
from .pm import MODEL_ROOT, Heap, PmRef, pm_alloc, set_root, store_u64, transaction, txn_store

_U64 = struct.Struct("<Q")
MODEL_STRUCT = 32
_ITER, _CURSOR, _HEAD = 8, 16, 24


def _node_size(count: int) -> int:
    return 8 + 24 * count + 8


@dataclass
class PmSlot:
    plaintext_len: int
    ref: PmRef  # envelope slot, plaintext_len + 28 bytes


@dataclass
class PmLayer:
    ref: PmRef
    slots: list


@contextmanager
def _phase(timings: Optional[dict], name: str):
    t0 = time.perf_counter()
    yield
    if timings is not None:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


class PmModel:
    """Handle on a persistent model; scalar fields are read live."""

    def __init__(self, h: Heap, ref: PmRef):
        self.h = h
        self.ref = ref
        self.layers = self._walk()

    def _u64(self, at: int) -> int:
        return _U64.unpack(self.h._read(self.h.main_offset + self.ref.offset + at, 8))[0]

    @property
    def numL(self) -> int:
        return self._u64(0)

    @property
    def iter(self) -> int:
        return self._u64(_ITER)

    @property
    def rng_cursor(self) -> int:
        return self._u64(_CURSOR)

    def _walk(self) -> list:
        h = self.h
        layers = []
        ptr = self._u64(_HEAD)
        while ptr:
            count = _U64.unpack(h._read(ptr, 8))[0]
            size = _node_size(count)
            node = h.deref(ptr, size)
            raw = h._read(ptr, size)
            slots = []
            for i in range(count):
                plen, eptr, elen = struct.unpack_from("<QQQ", raw, 8 + 24 * i)
                slots.append(PmSlot(plen, h.deref(eptr, elen)))
            layers.append(PmLayer(node, slots))
            ptr = _U64.unpack_from(raw, size - 8)[0]
            if len(layers) > self.numL:
                raise ShapeError("persistent layer list longer than numL")
        if len(layers) != self.numL:
            raise ShapeError(f"persistent list has {len(layers)} layers, header says {self.numL}")
        return layers

    def buffer_count(self) -> int:
        return sum(len(layer.slots) for layer in self.layers)

    def envelope_overhead(self) -> int:
        """PM bytes spent on IVs and MACs, measured from the slot sizes."""
        return sum(s.ref.length - s.plaintext_len for layer in self.layers for s in layer.slots)

    def check_shape(self, m: Model) -> None:
        if m.numL != self.numL:
            raise ShapeError(f"model has {m.numL} layers, mirror {self.numL}")
        for i, (layer, pml) in enumerate(zip(m.layers, self.layers)):
            if [p.nbytes for p in layer.params] != [s.plaintext_len for s in pml.slots]:
                raise ShapeError(f"layer {i} buffer sizes differ from the mirror")


def mirror_exists(h: Heap) -> bool:
    return h.root(MODEL_ROOT) != 0


def load_mirror(h: Heap) -> Optional[PmModel]:
    ptr = h.root(MODEL_ROOT)
    if not ptr:
        return None
    return PmModel(h, h.deref(ptr, MODEL_STRUCT))


def _write_snapshot(h, pm_ref, slots, envelopes, iter_, rng_cursor):
    for slot, e in zip(slots, envelopes):
        txn_store(h, slot.ref, e.to_bytes())
    store_u64(h, pm_ref, _ITER, iter_)
    store_u64(h, pm_ref, _CURSOR, rng_cursor)


def alloc_mirror_model(h: Heap, m: Model, k: Optional[env.Key128] = None, rng_cursor: int = 0) -> PmModel:
    """Allocate the persistent layer list for ``m`` in one transaction.

    With a key, the initial parameters are also encrypted into the slots
    (as snapshot ``iter=0``), so a crash before the first mirror-out still
    leaves a decryptable replica.
    """
    if mirror_exists(h):
        raise ValueError("heap already holds a mirror model")
    envelopes = [env.encrypt(k, p.tobytes()) for p in m.parameters()] if k is not None else None
    with transaction(h):
        root = pm_alloc(h, MODEL_STRUCT)
        store_u64(h, root, 0, m.numL)
        prev, prev_at = root, _HEAD
        slots = []
        for layer in m.layers:
            count = len(layer.params)
            node = pm_alloc(h, _node_size(count))
            store_u64(h, node, 0, count)
            for i, p in enumerate(layer.params):
                slot = pm_alloc(h, p.nbytes + env.OVERHEAD)
                txn_store(h, node, struct.pack("<QQQ", p.nbytes, h.ptr(slot), slot.length), 8 + 24 * i)
                slots.append(PmSlot(p.nbytes, slot))
            store_u64(h, prev, prev_at, h.ptr(node))
            prev, prev_at = node, _node_size(count) - 8
        store_u64(h, prev, prev_at, 0)
        if envelopes is not None:
            _write_snapshot(h, root, slots, envelopes, 0, rng_cursor)
        else:
            store_u64(h, root, _CURSOR, rng_cursor)
        set_root(h, MODEL_ROOT, h.ptr(root))
    return PmModel(h, root)


def mirror_out(
    h: Heap,
    pm: PmModel,
    m: Model,
    iter: int,
    k: env.Key128,
    rng_cursor: Optional[int] = None,
    timings: Optional[dict] = None,
) -> None:
    """Encrypt every parameter buffer and store it, with ``iter`` and the
    sampler cursor, in a single transaction."""
    pm.check_shape(m)
    if rng_cursor is None:
        rng_cursor = pm.rng_cursor
    slots = [s for layer in pm.layers for s in layer.slots]
    with _phase(timings, "encrypt"):
        envelopes = [env.encrypt(k, p.tobytes()) for p in m.parameters()]
    with _phase(timings, "write"):
        with transaction(h):
            _write_snapshot(h, pm.ref, slots, envelopes, iter, rng_cursor)


def mirror_in(h: Heap, pm: PmModel, m: Model, k: env.Key128, sampler=None, timings: Optional[dict] = None) -> int:
    """Decrypt the replica into ``m``; returns the persisted iteration.

    All envelopes are verified before ``m`` is touched.  If ``sampler`` is
    given its cursor is restored too.
    """
    pm.check_shape(m)
    slots = [s for layer in pm.layers for s in layer.slots]
    with _phase(timings, "read"):
        raw = [h.raw_read(s.ref) for s in slots]
    with _phase(timings, "decrypt"):
        plain = [env.decrypt(k, env.Envelope.from_bytes(r)) for r in raw]
    for p, data in zip(m.parameters(), plain):
        p[...] = np.frombuffer(data, dtype=p.dtype).reshape(p.shape)
    if sampler is not None:
        sampler.cursor = pm.rng_cursor
    return pm.iter
