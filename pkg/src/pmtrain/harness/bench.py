"""Microbenchmarks.  Timings are reported, never asserted.

Every result is a :class:`BenchRow`; CSV columns are
``experiment, model_size_bytes, phase, value, unit, seed``.
"""

from __future__ import annotations

import csv
import os
import tempfile
import time
from dataclasses import astuple, dataclass, fields

import numpy as np

from .. import envelope as env
from ..mirror import alloc_mirror_model, mirror_in, mirror_out
from ..netconfig import ConnectedSpec, ConvSpec, MaxPoolSpec, NetConfig, SoftmaxSpec
from ..nn import Batch, build_model, train_iteration
from ..pm import Heap, PmRef, create_heap, open_heap, pm_alloc, transaction, txn_store, write_image
from ..pmdata import BatchSampler, decrypt_batch, load_matrix_to_pm
from .train import load_checkpoint, save_checkpoint

SPS_SIZES = (2, 8, 64, 512, 2048)


@dataclass
class BenchRow:
    experiment: str
    model_size_bytes: int
    phase: str
    value: float
    unit: str
    seed: int


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in fields(BenchRow)])
        w.writerows(astuple(r) for r in rows)


# -- SPS --------------------------------------------------------------------


class SpsArray:
    """An int64 array living in the heap."""

    def __init__(self, h: Heap, ref: PmRef):
        self.h = h
        self.ref = ref
        self.n = ref.length // 8

    @classmethod
    def create(cls, h: Heap, n: int) -> "SpsArray":
        with transaction(h):
            ref = pm_alloc(h, 8 * n)
            txn_store(h, ref, np.arange(n, dtype="<i8").tobytes())
        return cls(h, ref)

    def values(self) -> np.ndarray:
        return np.frombuffer(self.h.raw_read(self.ref), dtype="<i8")

    def swap_txn(self, pairs) -> None:
        h, ref = self.h, self.ref
        with transaction(h):
            for i, j in pairs:
                a = h.raw_read(ref.at(8 * i, 8))
                b = h.raw_read(ref.at(8 * j, 8))
                txn_store(h, ref, b, 8 * i)
                txn_store(h, ref, a, 8 * j)


def sps_heap_size(array_len: int) -> int:
    return max(4096, ((8 * array_len + 4095) // 4096) * 4096)


def bench_sps(heap_path, array_len: int, txn_sizes=SPS_SIZES, seconds: float = 1.0, seed: int = 0, track=False):
    """Swaps per second and fences per transaction for each transaction size."""
    rng = np.random.default_rng(seed)
    h = create_heap(heap_path, sps_heap_size(array_len), track=track)
    rows = []
    try:
        arr = SpsArray.create(h, array_len)
        for size in txn_sizes:
            txns = swaps = 0
            fences0 = h.fence_count
            t0 = time.perf_counter()
            while True:
                arr.swap_txn(rng.integers(0, array_len, size=(size, 2)))
                txns += 1
                swaps += size
                elapsed = time.perf_counter() - t0
                if elapsed >= seconds:
                    break
            fences = (h.fence_count - fences0) / txns
            rows.append(BenchRow("sps", 8 * array_len, f"swaps_per_txn={size}", swaps / elapsed, "swaps/s", seed))
            rows.append(BenchRow("sps", 8 * array_len, f"fences_per_txn={size}", fences, "fences", seed))
        final = arr.values()
        if not np.array_equal(np.sort(final), np.arange(array_len)):
            raise AssertionError("SPS array is no longer a permutation")
    finally:
        h.close()
    return rows


@dataclass
class CampaignResult:
    injections: int
    permutations: int
    states_seen: dict


def sps_crash_campaign(workdir, array_len=10_000, injections=1000, txn_sizes=SPS_SIZES, seed=0) -> CampaignResult:
    """Inject power failures at random points of random SPS transactions;
    recover every image and check the array is still a permutation."""
    rng = np.random.default_rng(seed)
    h = create_heap(os.path.join(workdir, "sps.pm"), sps_heap_size(array_len), line_size=64)
    expected = np.arange(array_len)
    ok = 0
    states: dict = {}
    image_path = os.path.join(workdir, "sps-crash.pm")
    try:
        arr = SpsArray.create(h, array_len)
        for _ in range(injections):
            size = int(rng.choice(txn_sizes))
            target = int(rng.integers(0, 8 * size + 12))
            adversary = int(rng.integers(0, 2**31))
            captured = []
            events = [0]

            def observer(heap, event):
                if events[0] == target:
                    captured.append(heap.crash_bytes(adversary))
                events[0] += 1

            h.observer = observer
            arr.swap_txn(rng.integers(0, array_len, size=(size, 2)))
            h.observer = None
            image = captured[0] if captured else h.crash_bytes(adversary)
            state = image[12]
            states[state] = states.get(state, 0) + 1
            write_image(image_path, image)
            with open_heap(image_path, track=False) as rec:
                values = np.frombuffer(rec.raw_read(arr.ref), dtype="<i8")
                ok += bool(np.array_equal(np.sort(values), expected))
    finally:
        h.close()
    return CampaignResult(injections, ok, states)


# -- mirroring vs. file checkpoints -------------------------------------------


def conv_stack_config(n_conv: int, filters: int = 16, side: int = 28, classes: int = 10) -> NetConfig:
    layers = [ConvSpec(filters, 3, 1, 1, "leaky", True) for _ in range(n_conv)]
    layers += [MaxPoolSpec(2, 2), ConnectedSpec(classes, "linear"), SoftmaxSpec()]
    return NetConfig(layers=layers, height=side, width=side, channels=1).validate()


def _percent_rows(experiment, size, timings, seed):
    total = sum(timings.values())
    rows = [BenchRow(experiment, size, phase, t, "s", seed) for phase, t in timings.items()]
    rows.append(BenchRow(experiment, size, "total", total, "s", seed))
    rows += [BenchRow(experiment, size, phase, 100 * t / total, "%", seed) for phase, t in timings.items()]
    return rows


def bench_mirror(layer_counts=range(1, 13), workdir=None, key=None, seed=0, repeats=5, filters=16):
    """Save/restore latency of PM mirroring vs. an fsync'ed checkpoint file,
    split per phase, for models with growing numbers of conv layers."""
    key = key or env.generate_key()
    rows = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for n in layer_counts:
            model = build_model(conv_stack_config(n, filters), seed)
            size = model.parameter_bytes()
            region = 2 * size + 64 * 1024
            heap_path = os.path.join(tmp, f"mirror{n}.pm")
            h = create_heap(heap_path, region, track=False)
            try:
                pm = alloc_mirror_model(h, model, key)
                save_pm, load_pm, save_ssd, load_ssd = {}, {}, {}, {}
                restored = build_model(conv_stack_config(n, filters), seed + 1)
                from_file = build_model(conv_stack_config(n, filters), seed + 2)
                ckpt = os.path.join(tmp, f"ckpt{n}.bin")
                for r in range(repeats):
                    mirror_out(h, pm, model, r + 1, key, timings=save_pm)
                    mirror_in(h, pm, restored, key, timings=load_pm)
                    save_checkpoint(ckpt, model, key, save_ssd)
                    load_checkpoint(ckpt, from_file, key, load_ssd)
            finally:
                h.close()
            for a, b in zip(restored.parameters(), from_file.parameters()):
                if not np.array_equal(a, b):
                    raise AssertionError("mirror and checkpoint restores disagree")
            avg = lambda t: {k: v / repeats for k, v in t.items()}  # noqa: E731
            rows += _percent_rows("pm_save", size, avg(save_pm), seed)
            rows += _percent_rows("pm_restore", size, avg(load_pm), seed)
            rows += _percent_rows("file_save", size, avg(save_ssd), seed)
            rows += _percent_rows("file_restore", size, avg(load_ssd), seed)
            speed = {
                "save_write": save_ssd["write"] / save_pm["write"],
                "save_total": sum(save_ssd.values()) / sum(save_pm.values()),
                "restore_read": load_ssd["read"] / load_pm["read"],
                "restore_total": sum(load_ssd.values()) / sum(load_pm.values()),
            }
            rows += [BenchRow("speedup", size, k, v, "x", seed) for k, v in speed.items()]
    return rows


# -- batch decryption overhead ----------------------------------------------


def bench_batch_decrypt(features, labels, classes, config: NetConfig, batch_sizes=(32, 64, 128), iters=20, seed=0):
    """Iteration time with encrypted PM rows vs. plaintext rows in PM."""
    key = env.generate_key()
    rows = []
    n, cols = features.shape
    row_bytes = 4 * (cols + classes)
    with tempfile.TemporaryDirectory() as tmp:
        region = n * (row_bytes + 64) + 8 * n + 64 * 1024
        h = create_heap(os.path.join(tmp, "enc.pm"), region, track=False)
        hp = create_heap(os.path.join(tmp, "plain.pm"), region, track=False)
        try:
            dm = load_matrix_to_pm(h, features, labels, classes, key)
            onehot = np.eye(classes, dtype="<f4")[labels]
            plain = np.concatenate([features.astype("<f4"), onehot], axis=1)
            with transaction(hp):
                pref = pm_alloc(hp, plain.nbytes)
                txn_store(hp, pref, plain.tobytes())
            for bs in batch_sizes:
                cfg = NetConfig(**{**config.__dict__, "batch_size": bs})
                model = build_model(cfg, seed)
                sampler = BatchSampler(seed)
                t0 = time.perf_counter()
                for _ in range(iters):
                    train_iteration(model, decrypt_batch(h, dm, key, bs, sampler), cfg.learning_rate)
                enc = (time.perf_counter() - t0) / iters
                model = build_model(cfg, seed)
                sampler = BatchSampler(seed)
                t0 = time.perf_counter()
                for _ in range(iters):
                    idx = sampler.draw(n, bs)
                    raw = [hp.raw_read(pref.at(int(i) * row_bytes, row_bytes)) for i in idx]
                    mat = np.frombuffer(b"".join(raw), dtype="<f4").reshape(bs, -1)
                    train_iteration(model, Batch(mat[:, :cols].copy(), mat[:, cols:].copy()), cfg.learning_rate)
                clear = (time.perf_counter() - t0) / iters
                rows.append(BenchRow("batch_encrypted", bs, "iteration", enc, "s", seed))
                rows.append(BenchRow("batch_plain", bs, "iteration", clear, "s", seed))
                rows.append(BenchRow("batch_overhead", bs, "ratio", enc / clear, "x", seed))
        finally:
            h.close()
            hp.close()
    return rows
