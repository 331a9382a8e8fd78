"""End-to-end training and inference over the encrypted persistent heap."""

from __future__ import annotations

import csv
import logging
import os
import secrets
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .. import envelope as env
from ..mirror import alloc_mirror_model, load_mirror, mirror_in, mirror_out
from ..netconfig import load_config
from ..nn import accuracy, build_model, train_iteration
from ..pm import create_heap, open_heap
from ..pmdata import BatchSampler, DatasetSource, decrypt_batch, load_dataset_to_pm, load_pm_data

log = logging.getLogger(__name__)

LOSS_HEADER = ("iter", "loss")


class RestartRequested(Exception):
    """Training stopped early on request, after committing a mirror."""

    def __init__(self, iter_: int):
        self.iter = iter_
        super().__init__(f"stopped at iteration {iter_}")


@dataclass
class TrainRun:
    config: str
    heap: str
    key: Optional[str] = None
    seed: int = 0
    mirror_frequency: int = 1
    loss_log: Optional[str] = None
    max_iter: Optional[int] = None
    images: Optional[str] = None
    labels: Optional[str] = None
    data_format: str = "idx"
    classes: int = 10
    # Create the heap with this region size when the file is missing.
    heap_size: Optional[int] = None
    # restore=False: never mirror (every restart trains from scratch).
    restore: bool = True
    # replay=False: on resume, draw a fresh sampler cursor instead of the
    # persisted one, so the batch sequence diverges from an uninterrupted run.
    replay: bool = True

    def __post_init__(self):
        if self.mirror_frequency < 1:
            raise ValueError("mirror_frequency must be >= 1")

    def source(self) -> Optional[DatasetSource]:
        if self.images is None:
            return None
        return DatasetSource(self.images, self.labels, self.data_format, classes=self.classes)


def read_loss_log(path) -> list:
    """``[(iter, loss), ...]``; a torn trailing line is ignored."""
    rows = []
    if not path or not os.path.exists(path):
        return rows
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row == list(LOSS_HEADER) or len(row) != 2:
                continue
            try:
                rows.append((int(row[0]), float(row[1])))
            except ValueError:
                continue
    return rows


def _open_loss_log(path, keep_below: Optional[int]):
    """Open the loss log for appending.  With ``keep_below`` set, rows for
    iterations at or past it (trained but never committed) are dropped."""
    if keep_below is not None:
        rows = [r for r in read_loss_log(path) if r[0] < keep_below]
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_HEADER)
            w.writerows((i, repr(v)) for i, v in rows)
        os.replace(tmp, path)
    elif not os.path.exists(path):
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOSS_HEADER)
    return open(path, "a", newline="")


def open_or_create(path, size: Optional[int]):
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        if size is None:
            raise FileNotFoundError(f"{path}: no heap (run `init` first)")
        h = create_heap(path, size, track=False)
        return h
    return open_heap(path, track=False)


def train_model(run: TrainRun, stop: Optional[Callable[[], bool]] = None):
    """Train per the persisted-state workflow; returns ``(model, losses)``
    where ``losses`` are the iterations executed by this call.

    ``stop`` is polled after every iteration; when it returns true the
    model is mirrored and :class:`RestartRequested` is raised.
    """
    cfg = load_config(run.config)
    max_iter = cfg.max_iter if run.max_iter is None else run.max_iter
    k = env.load_key(run.key)
    model = build_model(cfg, run.seed)
    h = open_or_create(run.heap, run.heap_size)
    try:
        dm = load_pm_data(h)
        if dm is None:
            src = run.source()
            if src is None:
                raise FileNotFoundError("training data not in PM and no --images given")
            log.info("loading %s into PM", src.images)
            dm = load_dataset_to_pm(h, src, k)
        if dm.classes != model.classes or dm.cols != model.input_dim:
            raise ValueError(
                f"data is {dm.cols} x {dm.classes} classes, model expects {model.input_dim} x {model.classes}"
            )

        sampler = BatchSampler(run.seed)
        it = 0
        pm = None
        if run.restore:
            pm = load_mirror(h)
            if pm is not None:
                it = mirror_in(h, pm, model, k, sampler)
                if not run.replay and it > 0:
                    sampler.cursor = secrets.randbits(63)
                log.info("resumed at iteration %d", it)
            else:
                pm = alloc_mirror_model(h, model, k, rng_cursor=sampler.cursor)

        losses = []
        logfh = _open_loss_log(run.loss_log, it if run.restore else None) if run.loss_log else None
        try:
            while it < max_iter:
                batch = decrypt_batch(h, dm, k, cfg.batch_size, sampler)
                loss = train_iteration(model, batch, cfg.learning_rate)
                losses.append(loss)
                if logfh is not None:
                    logfh.write(f"{it},{loss!r}\n")
                    logfh.flush()
                it += 1
                halt = stop is not None and it < max_iter and stop()
                if pm is not None and (halt or it % run.mirror_frequency == 0 or it == max_iter):
                    mirror_out(h, pm, model, it, k, sampler.cursor)
                if halt:
                    raise RestartRequested(it)
        finally:
            if logfh is not None:
                logfh.close()
    finally:
        h.close()
    return model, losses


def infer(heap, config, key, source: DatasetSource) -> float:
    """Accuracy of the mirrored model on ``source``."""
    cfg = load_config(config)
    k = env.load_key(key)
    model = build_model(cfg, 0)
    h = open_heap(heap, track=False)
    try:
        pm = load_mirror(h)
        if pm is None:
            raise LookupError(f"{heap}: no mirrored model")
        mirror_in(h, pm, model, k)
    finally:
        h.close()
    x, y = source.normalized()
    return accuracy(model, x, y)


def peek_iter(heap) -> int:
    """Committed iteration count of the heap's mirror (0 if none).  Runs
    recovery, so only call it while no worker has the heap open."""
    h = open_heap(heap, track=False)
    try:
        pm = load_mirror(h)
        return 0 if pm is None else pm.iter
    finally:
        h.close()


# -- file checkpoint baseline ---------------------------------------------


def save_checkpoint(path, model, k: env.Key128, timings: Optional[dict] = None) -> None:
    """Flat file: per buffer ``u64 plaintext_len || envelope``; written,
    flushed and fsync'ed."""
    t0 = time.perf_counter()
    blobs = [(p.nbytes, env.encrypt(k, p.tobytes()).to_bytes()) for p in model.parameters()]
    t1 = time.perf_counter()
    with open(path, "wb") as fh:
        for n, blob in blobs:
            fh.write(n.to_bytes(8, "little"))
            fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    t2 = time.perf_counter()
    if timings is not None:
        timings["encrypt"] = timings.get("encrypt", 0.0) + t1 - t0
        timings["write"] = timings.get("write", 0.0) + t2 - t1


def load_checkpoint(path, model, k: env.Key128, timings: Optional[dict] = None) -> None:
    t0 = time.perf_counter()
    with open(path, "rb") as fh:
        data = fh.read()
    t1 = time.perf_counter()
    pos = 0
    plain = []
    for p in model.parameters():
        n = int.from_bytes(data[pos : pos + 8], "little")
        if n != p.nbytes:
            raise ValueError("checkpoint does not match model shape")
        pos += 8
        e = env.Envelope.from_bytes(data[pos : pos + n + env.OVERHEAD])
        pos += n + env.OVERHEAD
        plain.append(env.decrypt(k, e))
    for p, raw in zip(model.parameters(), plain):
        p[...] = np.frombuffer(raw, dtype=p.dtype).reshape(p.shape)
    t2 = time.perf_counter()
    if timings is not None:
        timings["read"] = timings.get("read", 0.0) + t1 - t0
        timings["decrypt"] = timings.get("decrypt", 0.0) + t2 - t1
