"""Write the 5,000-image MNIST subset bundled with mlxtend as IDX files.

The subset ships sorted by class (500 per digit). It is interleaved so any
prefix is class-balanced, then split into 2,500 train / 2,500 test images.

    python scripts/mnist_subset_to_idx.py DATA_DIR/mnist
"""
import argparse
from pathlib import Path

import numpy as np

from acnn.datasets import LabeledImageSet, MNIST_FILES, write_idx


def mnist_subset(out_dir):
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.argsort(y, kind="stable").reshape(10, -1).T.ravel()
    pixels = x[order].reshape(-1, 1, 28, 28).astype(np.uint8)
    labels = y[order].astype(np.int64)
    half = len(labels) // 2
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, sl in (("train", slice(0, half)), ("test", slice(half, None))):
        img, lbl = MNIST_FILES[split]
        write_idx(out_dir / img, out_dir / lbl, LabeledImageSet(pixels[sl], labels[sl], "mnist"))
    return out_dir


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    print(mnist_subset(ap.parse_args().out_dir))
