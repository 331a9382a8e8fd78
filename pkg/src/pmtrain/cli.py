"""Command-line entry point: ``python -m pmtrain <command> ...``.

Exit codes: 0 success, 1 other error, 2 integrity failure, 3 restart
requested (the worker got SIGTERM and stopped after committing), 4 usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import tempfile
from dataclasses import asdict

from . import envelope as env
from .pm import HeapError, create_heap, open_heap

EXIT_OK, EXIT_ERROR, EXIT_INTEGRITY, EXIT_RESTART, EXIT_USAGE = 0, 1, 2, 3, 4

log = logging.getLogger("pmtrain")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list:
    """``"2,8,64"`` or ``"1..12"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list like 2,8,64 or a range like 1..12, got {text!r}")


def _emit(obj) -> None:
    print(json.dumps(obj, default=str))


# -- commands ------------------------------------------------------------------


def cmd_init(a):
    create_heap(a.heap, a.size, track=False).close()
    _emit({"heap": a.heap, "region_size": a.size})


def cmd_keygen(a):
    env.save_key(env.generate_key(), a.out)
    _emit({"key": a.out})


def cmd_load_data(a):
    from .pmdata import DatasetSource, load_dataset_to_pm

    k = env.load_key(a.key)
    with open_heap(a.heap, track=False) as h:
        dm = load_dataset_to_pm(h, DatasetSource(a.images, a.labels, a.format, classes=a.classes), k, a.batch_rows)
        _emit({"rows": dm.rows, "cols": dm.cols, "classes": dm.classes})


def _train_run(a, **over):
    from .harness.train import TrainRun

    fields = dict(
        config=a.config,
        heap=a.heap,
        key=a.key,
        seed=a.seed,
        mirror_frequency=a.mirror_freq,
        loss_log=a.loss_log,
        max_iter=a.max_iter,
        images=a.images,
        labels=a.labels,
        data_format=a.format,
        classes=a.classes,
        heap_size=a.heap_size,
        restore=not a.no_restore,
        replay=not a.no_replay,
    )
    fields.update(over)
    try:
        return TrainRun(**fields)
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_train(a):
    from .harness.train import train_model

    stop = {"flag": False}

    def on_term(signum, frame):
        stop["flag"] = True

    signal.signal(signal.SIGTERM, on_term)
    _, losses = train_model(_train_run(a), stop=lambda: stop["flag"])
    _emit({"iterations": len(losses), "last_loss": losses[-1] if losses else None})


def cmd_infer(a):
    from .harness.train import infer
    from .pmdata import DatasetSource

    acc = infer(a.heap, a.config, a.key, DatasetSource(a.test_images, a.test_labels, a.format, classes=a.classes))
    _emit({"accuracy": acc})


def cmd_bench_sps(a):
    from .harness.bench import bench_sps, sps_crash_campaign, write_rows

    rows = bench_sps(a.heap, a.array_len, a.txn_sizes, a.seconds, a.seed)
    if a.out:
        write_rows(a.out, rows)
    for r in rows:
        _emit(asdict(r))
    if a.crash_injections:
        with tempfile.TemporaryDirectory() as tmp:
            res = sps_crash_campaign(tmp, a.array_len, a.crash_injections, a.txn_sizes, a.seed)
        _emit(asdict(res))
        if res.permutations != res.injections:
            return EXIT_ERROR


def cmd_bench_mirror(a):
    from .harness.bench import bench_mirror, write_rows

    rows = bench_mirror(a.layers, repeats=a.repeats, filters=a.filters, seed=a.seed)
    write_rows(a.out, rows)
    _emit({"rows": len(rows), "out": a.out})


def cmd_bench_batch(a):
    from .harness.bench import bench_batch_decrypt, write_rows
    from .netconfig import load_config
    from .pmdata import DatasetSource

    x, y = DatasetSource(a.images, a.labels, a.format, classes=a.classes).normalized()
    if a.rows:
        x, y = x[: a.rows], y[: a.rows]
    rows = bench_batch_decrypt(x, y, a.classes, load_config(a.config), a.batch_sizes, a.iters, a.seed)
    write_rows(a.out, rows)
    _emit({"rows": len(rows), "out": a.out})


def cmd_crash_test(a):
    from .harness.supervisor import crash_test

    rep = crash_test(_train_run(a), (a.kill_min_ms, a.kill_max_ms), a.crashes, a.seed, a.watchdog)
    _emit(asdict(rep))


def cmd_spot_sim(a):
    from .harness.supervisor import parse_trace, simulate_spot

    trace = parse_trace(a.trace)
    rep = simulate_spot(trace, a.max_bid, _train_run(a), a.step_ms, a.state_log)
    _emit(asdict(rep))
    return EXIT_OK if rep.completed else EXIT_ERROR


def cmd_make_toy_data(a):
    from dataclasses import replace

    from .toydata import OVERLAPPING, SEPARABLE, write_toy

    spec = replace(OVERLAPPING if a.overlapping else SEPARABLE, seed=a.seed)
    _emit(write_toy(a.out, spec))


# -- parser ----------------------------------------------------------------


def _train_flags(p, required=True):
    p.add_argument("--heap", required=True)
    p.add_argument("--config", required=required)
    p.add_argument("--key", help="16-byte key file (default: $PMTRAIN_KEY hex)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--mirror-freq", type=int, default=1)
    p.add_argument("--loss-log")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--format", choices=("idx", "csv"), default="idx")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--heap-size", type=int, help="create the heap with this region size if missing")
    p.add_argument("--no-restore", action="store_true", help="never mirror; restarts train from scratch")
    p.add_argument("--no-replay", action="store_true", help="fresh batch sampler cursor on resume")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pmtrain", description="Crash-consistent encrypted training on an emulated persistent heap.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="create an empty heap file")
    p.add_argument("--heap", required=True)
    p.add_argument("--size", type=int, required=True, help="region size in bytes (file is 4096 + 2*size)")
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("keygen", help="write a fresh 16-byte key")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("load-data", help="encrypt a dataset into the heap")
    p.add_argument("--heap", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels")
    p.add_argument("--key")
    p.add_argument("--format", choices=("idx", "csv"), default="idx")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--batch-rows", type=int, default=1024)
    p.set_defaults(fn=cmd_load_data)

    p = sub.add_parser("train", help="train (or resume) a model")
    _train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="accuracy of the mirrored model")
    p.add_argument("--heap", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--key")
    p.add_argument("--test-images", required=True)
    p.add_argument("--test-labels")
    p.add_argument("--format", choices=("idx", "csv"), default="idx")
    p.add_argument("--classes", type=int, default=10)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("bench-sps", help="swaps-per-second benchmark")
    p.add_argument("--heap", required=True)
    p.add_argument("--array-len", type=int, default=10_000)
    p.add_argument("--txn-sizes", type=_int_list, default=[2, 8, 64, 512, 2048])
    p.add_argument("--seconds", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--crash-injections", type=int, default=0)
    p.set_defaults(fn=cmd_bench_sps)

    p = sub.add_parser("bench-mirror", help="mirroring vs. file checkpoint")
    p.add_argument("--layers", type=_int_list, default=list(range(1, 13)))
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--filters", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench_mirror)

    p = sub.add_parser("bench-batch", help="encrypted vs. plaintext batch iteration time")
    p.add_argument("--config", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels")
    p.add_argument("--format", choices=("idx", "csv"), default="idx")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--rows", type=int, help="use only the first N rows")
    p.add_argument("--batch-sizes", type=_int_list, default=[32, 64, 128])
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench_batch)

    p = sub.add_parser("crash-test", help="train under random SIGKILLs")
    _train_flags(p)
    p.add_argument("--kill-min-ms", type=float, default=1000)
    p.add_argument("--kill-max-ms", type=float, default=3000)
    p.add_argument("--crashes", type=int, default=9)
    p.add_argument("--watchdog", type=int, default=5)
    p.set_defaults(fn=cmd_crash_test)

    p = sub.add_parser("spot-sim", help="replay a spot price trace")
    _train_flags(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--max-bid", type=float, required=True)
    p.add_argument("--step-ms", type=float, default=1000)
    p.add_argument("--state-log")
    p.set_defaults(fn=cmd_spot_sim)

    p = sub.add_parser("make-toy-data", help="write synthetic IDX datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--overlapping", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_toy_data)
    return ap


def main(argv=None) -> int:
    from .harness.train import RestartRequested

    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = a.fn(a)
    except UsageError as exc:
        print(f"pmtrain: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except env.IntegrityError as exc:
        print(f"pmtrain: integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except RestartRequested as exc:
        print(f"pmtrain: {exc}; restart to resume", file=sys.stderr)
        return EXIT_RESTART
    except (OSError, ValueError, LookupError, RuntimeError, HeapError) as exc:
        print(f"pmtrain: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK if rc is None else rc
