"""Train on synthetic data under random SIGKILLs and compare the loss log
with an uninterrupted run.

    python3 scripts/crash_demo.py --workdir /tmp/crash-demo --crashes 9
"""

import argparse
import filecmp
import os
from dataclasses import replace

from pmtrain import envelope as env
from pmtrain.harness.supervisor import crash_test
from pmtrain.harness.train import TrainRun
from pmtrain.toydata import OVERLAPPING, write_toy

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--crashes", type=int, default=9)
    ap.add_argument("--seed", type=int, default=1, help="kill-schedule seed")
    ap.add_argument("--config", default=os.path.join(HERE, "..", "configs", "crash.cfg"))
    ap.add_argument("--no-replay", action="store_true")
    a = ap.parse_args()

    os.makedirs(a.workdir, exist_ok=True)
    data = write_toy(os.path.join(a.workdir, "data"), OVERLAPPING)
    key = os.path.join(a.workdir, "key")
    if not os.path.exists(key):
        env.save_key(env.generate_key(), key)
    base = TrainRun(config=a.config, heap="", key=key, images=data["train_images"], labels=data["train_labels"],
                    heap_size=16 << 20)
    runs = {}
    for name in ("oracle", "crashed"):
        d = os.path.join(a.workdir, name)
        os.makedirs(d, exist_ok=True)
        for f in ("heap.pm", "loss.csv"):
            if os.path.exists(os.path.join(d, f)):
                os.unlink(os.path.join(d, f))
        runs[name] = replace(base, heap=os.path.join(d, "heap.pm"), loss_log=os.path.join(d, "loss.csv"))

    crash_test(runs["oracle"], crashes=0)
    rep = crash_test(replace(runs["crashed"], replay=not a.no_replay), crashes=a.crashes, seed=a.seed)
    print(f"kills {rep.kills}, final iteration {rep.final_iter}")
    print("loss logs identical:", filecmp.cmp(runs["oracle"].loss_log, runs["crashed"].loss_log, shallow=False))


if __name__ == "__main__":
    main()
