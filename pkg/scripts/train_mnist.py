"""Encrypt MNIST into a persistent heap, train, and report test accuracy.

Expects the four IDX files (optionally gzipped) in ``--data`` or
``$MNIST_DIR``:
train-images-idx3-ubyte, train-labels-idx1-ubyte,
t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte.

    python3 scripts/train_mnist.py --data ~/mnist --workdir /tmp/mnist-run
"""

import argparse
import os
import sys
import time

from pmtrain import envelope as env
from pmtrain.harness.train import TrainRun, infer, train_model
from pmtrain.pmdata import DatasetSource

HERE = os.path.dirname(os.path.abspath(__file__))
STEMS = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def find(root, stem):
    for cand in (stem, stem + ".gz"):
        if os.path.exists(os.path.join(root, cand)):
            return os.path.join(root, cand)
    sys.exit(f"missing {stem} in {root}")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", default=os.environ.get("MNIST_DIR"))
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--config", default=os.path.join(HERE, "..", "configs", "mnist5.cfg"))
    ap.add_argument("--max-iter", type=int)
    a = ap.parse_args()
    if not a.data:
        sys.exit("pass --data or set MNIST_DIR")
    tri, trl, tei, tel = (find(a.data, s) for s in STEMS)
    os.makedirs(a.workdir, exist_ok=True)
    key = os.path.join(a.workdir, "key")
    if not os.path.exists(key):
        env.save_key(env.generate_key(), key)
    run = TrainRun(config=a.config, heap=os.path.join(a.workdir, "heap.pm"), key=key, images=tri, labels=trl,
                   heap_size=1 << 30, max_iter=a.max_iter, loss_log=os.path.join(a.workdir, "loss.csv"))
    t0 = time.perf_counter()
    train_model(run)  # resumes if the heap already holds a mirror
    acc = infer(run.heap, run.config, key, DatasetSource(tei, tel))
    print(f"test accuracy {acc:.4f} after {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
