"""Process-level failure injection: random kills and spot-price preemption.

The supervisor and the training worker share nothing but the heap file,
the loss log and the worker's exit code.  Kills are SIGKILL, never a
cooperative shutdown.
"""

from __future__ import annotations

import csv
import logging
import os
import random
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

from .train import TrainRun, peek_iter, read_loss_log

log = logging.getLogger(__name__)


class WatchdogError(RuntimeError):
    """The worker stopped making progress across consecutive kills."""


class WorkerFailed(RuntimeError):
    def __init__(self, returncode: int):
        self.returncode = returncode
        super().__init__(f"training worker exited with code {returncode}")


def worker_argv(run: TrainRun) -> list:
    argv = [sys.executable, "-m", "pmtrain", "train", "--heap", run.heap, "--config", run.config]
    opts = {
        "--key": run.key,
        "--seed": run.seed,
        "--max-iter": run.max_iter,
        "--mirror-freq": run.mirror_frequency,
        "--loss-log": run.loss_log,
        "--images": run.images,
        "--labels": run.labels,
        "--format": run.data_format,
        "--classes": run.classes,
        "--heap-size": run.heap_size,
    }
    for flag, value in opts.items():
        if value is not None:
            argv += [flag, str(value)]
    if not run.restore:
        argv.append("--no-restore")
    if not run.replay:
        argv.append("--no-replay")
    return argv


def _worker_env() -> dict:
    env = dict(os.environ)
    # Single-threaded BLAS keeps float reductions bit-reproducible.
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = "1"
    return env


def spawn_worker(run: TrainRun) -> subprocess.Popen:
    return subprocess.Popen(worker_argv(run), env=_worker_env(), stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)


def _kill(proc: subprocess.Popen) -> None:
    proc.kill()
    proc.wait()
    if proc.stderr:
        proc.stderr.close()


EXIT_RESTART = 3


def _finish(proc: subprocess.Popen) -> bool:
    """Reap the worker: True if training completed, False if it asked to
    be restarted."""
    _, err = proc.communicate()
    if proc.returncode == EXIT_RESTART:
        return False
    if proc.returncode != 0:
        log.error("worker stderr:\n%s", err.decode(errors="replace"))
        raise WorkerFailed(proc.returncode)
    return True


def _progress(run: TrainRun) -> int:
    if run.restore:
        return peek_iter(run.heap)
    return len(read_loss_log(run.loss_log))


@dataclass
class CrashReport:
    kills: int
    restarts: int
    final_iter: int
    executed_iterations: int
    kill_times_ms: list = field(default_factory=list)


def crash_test(
    run: TrainRun,
    kill_interval_ms=(1000, 3000),
    crashes: int = 9,
    seed: int = 0,
    watchdog: int = 5,
    snapshot_dir: Optional[str] = None,
) -> CrashReport:
    """Start the worker, SIGKILL it after a uniform-random delay, restart,
    until ``crashes`` kills have landed; then let it run to completion.

    With ``snapshot_dir``, the heap file as left by each kill is copied
    there (``kill01.pm``, ...) before recovery touches it.
    """
    rng = random.Random(seed)
    lo, hi = kill_interval_ms
    kills = restarts = stalled = 0
    last = _progress(run) if os.path.exists(run.heap) else 0
    times = []
    while True:
        proc = spawn_worker(run)
        restarts += 1
        if kills < crashes:
            delay = rng.uniform(lo, hi)
            try:
                proc.wait(timeout=delay / 1000)
            except subprocess.TimeoutExpired:
                _kill(proc)
                kills += 1
                times.append(delay)
                if snapshot_dir is not None:
                    shutil.copyfile(run.heap, os.path.join(snapshot_dir, f"kill{kills:02d}.pm"))
                now = _progress(run)
                stalled = stalled + 1 if now <= last else 0
                last = max(last, now)
                log.info("kill %d at %.0f ms, progress %d", kills, delay, now)
                if stalled >= watchdog:
                    raise WatchdogError(f"no progress after {stalled} consecutive kills")
                continue
        if _finish(proc):
            break
    final = peek_iter(run.heap) if run.restore else 0
    return CrashReport(kills, restarts - 1, final, len(read_loss_log(run.loss_log)), times)


# -- spot instances -------------------------------------------------------


@dataclass
class SpotTrace:
    timestamps: list
    prices: list

    def __post_init__(self):
        if len(self.timestamps) != len(self.prices):
            raise ValueError("timestamps and prices differ in length")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("trace timestamps must be strictly increasing")
        if any(p <= 0 for p in self.prices):
            raise ValueError("trace prices must be positive")


def _timestamp(text: str) -> float:
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text).timestamp()


def parse_trace(path) -> SpotTrace:
    ts, prices = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "price"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain timestamp,price")
        for lineno, row in enumerate(reader, start=2):
            try:
                ts.append(_timestamp(row["timestamp"]))
                prices.append(float(row["price"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return SpotTrace(ts, prices)


def spot_states(trace: SpotTrace, max_bid: float) -> list:
    """1 while ``max_bid > market_price``, else 0."""
    return [1 if max_bid > p else 0 for p in trace.prices]


def count_interruptions(states) -> int:
    return sum(1 for a, b in zip(states, states[1:]) if a == 1 and b == 0)


@dataclass
class SpotReport:
    states: list
    interruptions: int
    kills: int
    launches: int
    final_iter: int
    completed: bool


def simulate_spot(trace: SpotTrace, max_bid: float, run: TrainRun, step_ms: float = 1000, state_log=None) -> SpotReport:
    """Replay ``trace``, one step per ``step_ms`` of wall time.  The worker
    runs while the bid beats the market price and is killed otherwise."""
    states = spot_states(trace, max_bid)
    proc: Optional[subprocess.Popen] = None
    done = False
    kills = launches = 0
    rows = []
    for ts, price, state in zip(trace.timestamps, trace.prices, states):
        if proc is not None and proc.poll() is not None:
            done = _finish(proc)
            proc = None
        if state and proc is None and not done:
            proc = spawn_worker(run)
            launches += 1
        elif not state and proc is not None:
            _kill(proc)
            proc = None
            kills += 1
        rows.append((ts, price, state, int(proc is not None)))
        time.sleep(step_ms / 1000)
    if proc is not None:
        done = _finish(proc)
    if state_log:
        with open(state_log, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("timestamp", "price", "state", "worker_running"))
            w.writerows(rows)
    final = peek_iter(run.heap) if os.path.exists(run.heap) else 0
    return SpotReport(states, count_interruptions(states), kills, launches, final, done)
