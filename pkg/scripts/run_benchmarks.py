"""Write the SPS, mirroring and batch-decryption benchmark CSVs.

    python3 scripts/run_benchmarks.py --out results
"""

import argparse
import os
import tempfile
from dataclasses import replace

import numpy as np

from pmtrain.harness.bench import SPS_SIZES, bench_batch_decrypt, bench_mirror, bench_sps, write_rows
from pmtrain.netconfig import load_config
from pmtrain.toydata import SEPARABLE, make_toy

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=os.path.join(HERE, "..", "results"))
    ap.add_argument("--seconds", type=float, default=1.0, help="SPS time per transaction size")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    os.makedirs(a.out, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        rows = bench_sps(os.path.join(tmp, "sps.pm"), 10_000, SPS_SIZES, a.seconds, a.seed)
        write_rows(os.path.join(a.out, "sps.csv"), rows)
        for r in rows:
            print(f"sps {r.phase:>20} {r.value:12.1f} {r.unit}")

        rows = bench_mirror(range(1, 13), workdir=tmp, seed=a.seed, repeats=a.repeats)
        write_rows(os.path.join(a.out, "mirror_vs_checkpoint.csv"), rows)
        for r in rows:
            if r.experiment == "speedup":
                print(f"mirror {r.model_size_bytes:>9} B {r.phase:>14} {r.value:6.2f}x")

    tx, ty, _, _ = make_toy(replace(SEPARABLE, train_rows=1000, seed=a.seed))
    x = tx.reshape(len(tx), -1).astype(np.float32) / 255
    cfg = load_config(os.path.join(HERE, "..", "configs", "crash.cfg"))
    rows = bench_batch_decrypt(x, ty, 10, cfg, (32, 64, 128), iters=20, seed=a.seed)
    write_rows(os.path.join(a.out, "batch_decryption.csv"), rows)
    for r in rows:
        if r.experiment == "batch_overhead":
            print(f"batch {r.model_size_bytes:>4} decrypt overhead {r.value:.2f}x")


if __name__ == "__main__":
    main()
