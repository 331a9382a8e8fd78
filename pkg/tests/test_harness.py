import csv
import os
import signal
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import CONFIGS
from pmtrain import envelope as env
from pmtrain.cli import main
from pmtrain.harness.bench import (
    SPS_SIZES,
    BenchRow,
    bench_mirror,
    bench_sps,
    conv_stack_config,
    sps_crash_campaign,
    write_rows,
)
from pmtrain.harness.supervisor import (
    SpotTrace,
    count_interruptions,
    crash_test,
    parse_trace,
    simulate_spot,
    spot_states,
    worker_argv,
)
from pmtrain.harness.train import (
    TrainRun,
    infer,
    load_checkpoint,
    peek_iter,
    read_loss_log,
    save_checkpoint,
    train_model,
)
from pmtrain.nn import build_model
from pmtrain.pmdata import DatasetSource

TOY = os.path.join(CONFIGS, "toy.cfg")


def _run(tmp_path, key_file, data, **kw):
    fields = dict(
        config=TOY,
        heap=str(tmp_path / "h.pm"),
        key=key_file,
        images=data["train_images"],
        labels=data["train_labels"],
        heap_size=4 << 20,
        loss_log=str(tmp_path / "loss.csv"),
    )
    fields.update(kw)
    return TrainRun(**fields)


def test_trainrun_validates_frequency(tmp_path):
    with pytest.raises(ValueError):
        TrainRun(config=TOY, heap="x", mirror_frequency=0)


def test_fifty_iterations_then_noop(tmp_path, key_file, toy_separable):
    run = _run(tmp_path, key_file, toy_separable, max_iter=50)
    _, losses = train_model(run)
    assert len(losses) == 50 and peek_iter(run.heap) == 50
    assert [i for i, _ in read_loss_log(run.loss_log)] == list(range(50))
    _, again = train_model(run)
    assert again == [] and peek_iter(run.heap) == 50
    assert len(read_loss_log(run.loss_log)) == 50


def test_resume_equals_uninterrupted(tmp_path, key_file, toy_separable):
    os.makedirs(tmp_path / "a")
    os.makedirs(tmp_path / "b")
    a = _run(tmp_path / "a", key_file, toy_separable, max_iter=40)
    b = _run(tmp_path / "b", key_file, toy_separable, max_iter=40)
    model_a, _ = train_model(a)
    train_model(TrainRun(**{**b.__dict__, "max_iter": 15}))
    model_b, _ = train_model(b)
    with open(a.loss_log, "rb") as fa, open(b.loss_log, "rb") as fb:
        assert fa.read() == fb.read()
    assert all(np.array_equal(p, q) for p, q in zip(model_a.parameters(), model_b.parameters()))


def test_mirror_frequency_and_log_truncation(tmp_path, key_file, toy_separable):
    run = _run(tmp_path, key_file, toy_separable, max_iter=23, mirror_frequency=5)
    train_model(run)
    assert peek_iter(run.heap) == 23
    # uncommitted rows (a crash after iteration 12 with last mirror at 10)
    with open(run.loss_log, "a") as fh:
        fh.write("23,9.9\n24,9.9\n25,")
    train_model(TrainRun(**{**run.__dict__, "max_iter": 30}))
    rows = read_loss_log(run.loss_log)
    assert [i for i, _ in rows] == list(range(30))


def test_stop_request_commits_and_resumes(tmp_path, key_file, toy_separable):
    from pmtrain.harness.train import RestartRequested

    run = _run(tmp_path, key_file, toy_separable, max_iter=30, mirror_frequency=7)
    calls = [0]

    def stop():
        calls[0] += 1
        return calls[0] >= 10

    with pytest.raises(RestartRequested) as info:
        train_model(run, stop=stop)
    assert info.value.iter == 10 and peek_iter(run.heap) == 10
    train_model(run)
    assert peek_iter(run.heap) == 30 and len(read_loss_log(run.loss_log)) == 30


def test_no_restore_mode_never_mirrors(tmp_path, key_file, toy_separable):
    run = _run(tmp_path, key_file, toy_separable, max_iter=10, restore=False)
    train_model(run)
    train_model(run)
    assert peek_iter(run.heap) == 0
    assert len(read_loss_log(run.loss_log)) == 20


def test_data_shape_mismatch(tmp_path, key_file, toy_separable):
    with pytest.raises(ValueError):
        train_model(_run(tmp_path, key_file, toy_separable, max_iter=1, classes=12))
    os.makedirs(tmp_path / "x")
    run = _run(tmp_path / "x", key_file, toy_separable, images=None)
    with pytest.raises(FileNotFoundError):
        train_model(run)


def test_infer_after_training(tmp_path, key_file, toy_separable):
    src = DatasetSource(toy_separable["test_images"], toy_separable["test_labels"])
    run = _run(tmp_path, key_file, toy_separable, max_iter=300)
    train_model(run)
    assert infer(run.heap, TOY, key_file, src) == 1.0
    with pytest.raises(env.IntegrityError):
        infer(run.heap, TOY, _other_key(tmp_path), src)
    with pytest.raises(LookupError):
        empty = tmp_path / "empty.pm"
        from pmtrain.pm import create_heap

        create_heap(empty, 4096).close()
        infer(str(empty), TOY, key_file, src)


def _other_key(tmp_path):
    p = tmp_path / "other.key"
    env.save_key(env.generate_key(), p)
    return str(p)


def test_untrained_model_is_at_chance(toy_separable):
    from pmtrain.netconfig import load_config
    from pmtrain.nn import accuracy

    x, y = DatasetSource(toy_separable["test_images"], toy_separable["test_labels"]).normalized()
    accs = [accuracy(build_model(load_config(TOY), s), x, y) for s in range(10)]
    assert abs(np.mean(accs) - 0.1) <= 0.05


def test_checkpoint_file_matches_mirror(tmp_path, key):
    m = build_model(conv_stack_config(2, 4, side=8), 0)
    other = build_model(conv_stack_config(2, 4, side=8), 1)
    t_save, t_load = {}, {}
    save_checkpoint(tmp_path / "c.bin", m, key, t_save)
    load_checkpoint(tmp_path / "c.bin", other, key, t_load)
    assert all(np.array_equal(a, b) for a, b in zip(m.parameters(), other.parameters()))
    assert set(t_save) == {"encrypt", "write"} and set(t_load) == {"read", "decrypt"}
    raw = bytearray((tmp_path / "c.bin").read_bytes())
    raw[100] ^= 1
    (tmp_path / "c.bin").write_bytes(raw)
    with pytest.raises(env.IntegrityError):
        load_checkpoint(tmp_path / "c.bin", other, key)


# -- benchmarks -------------------------------------------------------------


def test_bench_sps_rows(tmp_path):
    rows = bench_sps(tmp_path / "s.pm", 1000, SPS_SIZES, seconds=0.02)
    sps = [r for r in rows if r.unit == "swaps/s"]
    fences = [r for r in rows if r.unit == "fences"]
    assert [r.phase for r in sps] == [f"swaps_per_txn={n}" for n in SPS_SIZES]
    assert all(r.value == 4 for r in fences)
    write_rows(tmp_path / "s.csv", rows)
    with open(tmp_path / "s.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["experiment", "model_size_bytes", "phase", "value", "unit", "seed"]


def test_sps_campaign_small(tmp_path):
    res = sps_crash_campaign(str(tmp_path), array_len=500, injections=40, txn_sizes=(2, 8), seed=3)
    assert res.permutations == res.injections == 40
    assert len(res.states_seen) >= 2


def test_bench_mirror_accounting(tmp_path):
    rows = bench_mirror([1, 2, 3], repeats=1, filters=2)
    sizes = sorted({r.model_size_bytes for r in rows})
    assert len(sizes) == 3
    for exp in ("pm_save", "pm_restore", "file_save", "file_restore"):
        for size in sizes:
            pct = [r.value for r in rows if r.experiment == exp and r.model_size_bytes == size and r.unit == "%"]
            total = [r.value for r in rows if r.experiment == exp and r.model_size_bytes == size and r.phase == "total"]
            parts = [r.value for r in rows if r.experiment == exp and r.model_size_bytes == size and r.unit == "s" and r.phase != "total"]
            assert abs(sum(pct) - 100) <= 1
            assert total[0] >= sum(parts) - 1e-9


def test_bench_mirror_sizes_monotone():
    sizes = [build_model(conv_stack_config(n, 16), 0).parameter_bytes() for n in range(1, 13)]
    assert sizes == sorted(sizes)


# -- spot traces ---------------------------------------------------------------


def test_spot_comparison_rule():
    trace = SpotTrace([0, 300, 600], [0.09, 0.10, 0.09])
    states = spot_states(trace, 0.0955)
    assert states == [1, 0, 1] and count_interruptions(states) == 1
    assert spot_states(trace, 0.01) == [0, 0, 0]
    assert spot_states(trace, 1.0) == [1, 1, 1]
    assert spot_states(SpotTrace([0], [0.0955]), 0.0955) == [0]


def test_trace_parsing(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("timestamp,price\n2017-03-01T00:00:00Z,0.09\n2017-03-01T00:05:00Z,0.1\n1488327000,0.2\n")
    t = parse_trace(p)
    assert t.prices == [0.09, 0.1, 0.2] and t.timestamps[1] - t.timestamps[0] == 300
    for bad in ("time,price\n1,1\n", "timestamp,price\n5,0.1\n5,0.2\n", "timestamp,price\n1,-1\n", "timestamp,price\nx,1\n"):
        p.write_text(bad)
        with pytest.raises(ValueError):
            parse_trace(p)


def test_spot_sim_all_below_bid_never_runs(tmp_path, key_file, toy_separable):
    run = _run(tmp_path, key_file, toy_separable, max_iter=5)
    rep = simulate_spot(SpotTrace([0, 1, 2], [0.5, 0.6, 0.7]), 0.1, run, step_ms=10, state_log=str(tmp_path / "s.csv"))
    assert rep.launches == 0 and not rep.completed and rep.final_iter == 0
    with open(tmp_path / "s.csv") as fh:
        assert [r["state"] for r in csv.DictReader(fh)] == ["0", "0", "0"]


def test_spot_sim_uninterrupted(tmp_path, key_file, toy_separable):
    run = _run(tmp_path, key_file, toy_separable, max_iter=20)
    rep = simulate_spot(SpotTrace([0, 1], [0.05, 0.05]), 0.0955, run, step_ms=50)
    assert rep.completed and rep.kills == 0 and rep.launches == 1 and rep.final_iter == 20


# -- process level --------------------------------------------------------


def _cli_env():
    e = dict(os.environ)
    e["PYTHONPATH"] = os.pathsep.join(filter(None, [os.path.join(os.path.dirname(CONFIGS), "src"), e.get("PYTHONPATH")]))
    return e


def test_zero_crashes_equals_in_process_training(tmp_path, key_file, toy_separable):
    os.makedirs(tmp_path / "a")
    os.makedirs(tmp_path / "b")
    a = _run(tmp_path / "a", key_file, toy_separable, max_iter=30, seed=4)
    b = _run(tmp_path / "b", key_file, toy_separable, max_iter=30, seed=4)
    train_model(a)
    rep = crash_test(b, crashes=0)
    assert rep.kills == 0 and rep.final_iter == 30
    assert read_loss_log(a.loss_log) == read_loss_log(b.loss_log)


def test_sigterm_exits_with_restart_code(tmp_path, key_file, toy_separable):
    run = _run(tmp_path, key_file, toy_separable, max_iter=100000, mirror_frequency=1000)
    proc = subprocess.Popen(worker_argv(run), env=_cli_env(), stderr=subprocess.PIPE)
    deadline = time.time() + 60
    while len(read_loss_log(run.loss_log)) < 20 and time.time() < deadline:
        time.sleep(0.05)
    proc.send_signal(signal.SIGTERM)
    _, err = proc.communicate(timeout=60)
    assert proc.returncode == 3, err
    committed = peek_iter(run.heap)
    assert committed >= 20
    assert len(read_loss_log(run.loss_log)) == committed


def test_cli_usage_and_integrity_codes(tmp_path, key_file, toy_separable, capsys):
    assert _cli(["train"]) == 4
    assert _cli(["bench-sps", "--heap", "x", "--txn-sizes", "a,b"]) == 4
    heap = str(tmp_path / "h.pm")
    assert main(["init", "--heap", heap, "--size", "4194304"]) == 0
    assert main(["load-data", "--heap", heap, "--images", toy_separable["train_images"], "--labels", toy_separable["train_labels"], "--key", key_file]) == 0
    assert main(["train", "--heap", heap, "--config", TOY, "--key", key_file, "--max-iter", "3"]) == 0
    args = ["infer", "--heap", heap, "--config", TOY, "--test-images", toy_separable["test_images"], "--test-labels", toy_separable["test_labels"]]
    assert main([*args, "--key", key_file]) == 0
    assert main([*args, "--key", _other_key(tmp_path)]) == 2
    assert main(["train", "--heap", heap, "--config", TOY, "--key", key_file, "--mirror-freq", "0"]) == 4
    assert main(["infer", "--heap", str(tmp_path / "missing.pm"), "--config", TOY, "--key", key_file, "--test-images", "x"]) == 1


def _cli(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    return info.value.code


def test_cli_module_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "pmtrain", "make-toy-data", "--out", str(tmp_path / "d")], env=_cli_env(), capture_output=True, text=True
    )
    assert out.returncode == 0 and "train_images" in out.stdout


def test_bench_row_is_csv_shaped():
    assert [f for f in BenchRow.__dataclass_fields__] == ["experiment", "model_size_bytes", "phase", "value", "unit", "seed"]
