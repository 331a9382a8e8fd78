"""Real handwritten digits through the full encrypted-PM pipeline.

The 8x8 scikit-learn digits set stands in for MNIST, which cannot be
fetched in every environment.  This does not satisfy AC11; it only shows
the pipeline learns real data.
"""

import os

import numpy as np
import pytest

from conftest import CONFIGS
from pmtrain.harness.train import TrainRun, infer, train_model
from pmtrain.pmdata import DatasetSource, write_idx

sklearn = pytest.importorskip("sklearn")
from sklearn.datasets import load_digits  # noqa: E402
from sklearn.model_selection import train_test_split  # noqa: E402


def _write_digits(outdir):
    d = load_digits()
    x = np.clip(np.rint(d.images * (255 / 16)), 0, 255).astype(np.uint8)
    y = d.target.astype(np.uint8)
    xtr, xte, ytr, yte = train_test_split(x, y, test_size=0.25, random_state=0, stratify=y)
    paths = {}
    for name, arr in (("train_images", xtr), ("train_labels", ytr), ("test_images", xte), ("test_labels", yte)):
        paths[name] = os.path.join(outdir, f"digits-{name}.idx")
        write_idx(paths[name], arr)
    return paths


def test_digits_accuracy(tmp_path, key_file):
    paths = _write_digits(tmp_path)
    run = TrainRun(
        config=os.path.join(CONFIGS, "toy.cfg"),
        heap=str(tmp_path / "digits.pm"),
        key=key_file,
        images=paths["train_images"],
        labels=paths["train_labels"],
        heap_size=8 << 20,
        max_iter=2000,
    )
    train_model(run)
    acc = infer(run.heap, run.config, key_file, DatasetSource(paths["test_images"], paths["test_labels"]))
    print(f"digits test accuracy {acc:.4f}")
    assert acc >= 0.95
