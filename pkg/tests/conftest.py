import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acnn.datasets import MNIST_FILES, LabeledImageSet, write_idx  # noqa: E402


def _write_mlxtend_subset(out_dir):
    """2,500 train / 2,500 test real MNIST digits from mlxtend's bundled subset.

    The source is sorted by class; interleaving makes every prefix balanced.
    """
    mlx = pytest.importorskip("mlxtend.data")
    x, y = mlx.mnist_data()
    order = np.argsort(y, kind="stable").reshape(10, -1).T.ravel()
    pixels = x[order].reshape(-1, 1, 28, 28).astype(np.uint8)
    labels = y[order].astype(np.int64)
    half = len(labels) // 2
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, sl in (("train", slice(0, half)), ("test", slice(half, None))):
        img, lbl = MNIST_FILES[split]
        write_idx(out_dir / img, out_dir / lbl, LabeledImageSet(pixels[sl], labels[sl], "mnist"))


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    """Directory with ``mnist/`` IDX files.

    Uses ``$ACNN_DATA_DIR`` when it holds MNIST, otherwise the mlxtend subset.
    """
    env = os.environ.get("ACNN_DATA_DIR")
    if env and (Path(env) / "mnist" / MNIST_FILES["train"][0]).exists():
        return Path(env)
    root = tmp_path_factory.mktemp("data")
    _write_mlxtend_subset(root / "mnist")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "REPORT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
