"""Replay a spot-price trace against a training run.

Without ``--trace`` a synthetic 15-step trace is generated whose prices
cross the bid a few times.

    python3 scripts/spot_demo.py --workdir /tmp/spot-demo --max-bid 0.0955
"""

import argparse
import csv
import os

import numpy as np

from pmtrain import envelope as env
from pmtrain.harness.supervisor import parse_trace, simulate_spot
from pmtrain.harness.train import TrainRun
from pmtrain.toydata import OVERLAPPING, write_toy

HERE = os.path.dirname(os.path.abspath(__file__))


def synthetic_trace(path, steps=15, seed=0):
    rng = np.random.default_rng(seed)
    prices = 0.09 + 0.004 * rng.standard_normal(steps)
    prices[[4, 9]] = 0.11  # two guaranteed outbids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "price"])
        for i, p in enumerate(prices):
            w.writerow([1488326400 + 300 * i, f"{max(p, 0.001):.4f}"])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--trace")
    ap.add_argument("--max-bid", type=float, default=0.0955)
    ap.add_argument("--step-ms", type=float, default=1000)
    ap.add_argument("--max-iter", type=int, default=200)
    a = ap.parse_args()

    os.makedirs(a.workdir, exist_ok=True)
    trace_path = a.trace or os.path.join(a.workdir, "trace.csv")
    if not a.trace:
        synthetic_trace(trace_path)
    data = write_toy(os.path.join(a.workdir, "data"), OVERLAPPING)
    key = os.path.join(a.workdir, "key")
    if not os.path.exists(key):
        env.save_key(env.generate_key(), key)
    heap = os.path.join(a.workdir, "heap.pm")
    if os.path.exists(heap):
        os.unlink(heap)
    run = TrainRun(config=os.path.join(HERE, "..", "configs", "crash.cfg"), heap=heap, key=key,
                   images=data["train_images"], labels=data["train_labels"], heap_size=16 << 20,
                   max_iter=a.max_iter, loss_log=os.path.join(a.workdir, "loss.csv"))
    rep = simulate_spot(parse_trace(trace_path), a.max_bid, run, a.step_ms, os.path.join(a.workdir, "states.csv"))
    print(f"states {rep.states}")
    print(f"interruptions {rep.interruptions}, kills {rep.kills}, final iteration {rep.final_iter}, "
          f"completed {rep.completed}")


if __name__ == "__main__":
    main()
