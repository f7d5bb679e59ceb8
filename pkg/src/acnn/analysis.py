"""Covariance-evolution reports, CSV export and filter images."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envelope import CovarianceSummary
from .trainer import covariance_summaries

METRICS_HEADER = ["epoch", "train_loss", "test_error_pct", "seconds"]
COVARIANCE_HEADER = ["epoch", "filter", "lambda_max", "lambda_min", "orientation_deg", "det"]


@dataclass
class CovarianceTrace:
    """Summaries indexed ``[epoch position][filter]``."""

    epochs: list = field(default_factory=list)
    summaries: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.epochs) != len(self.summaries):
            raise ValueError("one summary list per epoch required")
        if len({len(s) for s in self.summaries}) > 1:
            raise ValueError("every epoch must cover the same filters")
        for row in self.summaries:
            for s in row:
                if not s.determinant > 0:
                    raise ValueError(f"non-positive determinant {s.determinant}")

    @property
    def n_filters(self):
        return len(self.summaries[0]) if self.summaries else 0

    def append(self, epoch, summaries):
        self.epochs.append(epoch)
        self.summaries.append(list(summaries))

    def filter_series(self, f):
        return [row[f] for row in self.summaries]

    def lambda_max(self):
        """``[epochs, filters]`` array of largest eigenvalues."""
        return np.array([[s.lambda_max for s in row] for row in self.summaries])

    @classmethod
    def from_metrics(cls, metrics, initial_sigma=None):
        """Build a trace from trainer metrics, optionally led by the initial state as epoch 0."""
        trace = cls()
        if initial_sigma is not None:
            trace.append(0, covariance_summaries(initial_sigma))
        for m in metrics:
            if m.covariance:
                trace.append(m.epoch, m.covariance)
        return trace


def _fmt(x):
    return repr(float(x))


def export_metrics_csv(metrics, trace, out_dir):
    """Write ``metrics.csv`` and, when ``trace`` has entries, ``covariance.csv``."""
    out_dir = Path(out_dir)
    written = []
    try:
        path = out_dir / "metrics.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for m in metrics:
                w.writerow([m.epoch, _fmt(m.train_loss), _fmt(m.test_error_pct), _fmt(m.seconds)])
        written.append(path)
        if trace is not None and trace.summaries:
            path = out_dir / "covariance.csv"
            with open(path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(COVARIANCE_HEADER)
                for epoch, row in zip(trace.epochs, trace.summaries):
                    for i, s in enumerate(row):
                        w.writerow([epoch, i, _fmt(s.lambda_max), _fmt(s.lambda_min),
                                    _fmt(s.orientation_deg), _fmt(s.determinant)])
            written.append(path)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return written


def read_metrics_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if rows[0] != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


def read_covariance_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if rows[0] != COVARIANCE_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    trace = CovarianceTrace()
    for r in rows[1:]:
        epoch, filt = int(r[0]), int(r[1])
        if not trace.epochs or trace.epochs[-1] != epoch:
            trace.epochs.append(epoch)
            trace.summaries.append([])
        if filt != len(trace.summaries[-1]):
            raise ValueError(f"{path}: filters out of order at epoch {epoch}")
        trace.summaries[-1].append(CovarianceSummary(*(float(v) for v in r[2:])))
    return trace


def to_gray(img):
    """Min-max normalise to ``uint8``; constant images become all zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM export needs a 2D uint8 image")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval, then exactly one whitespace byte
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = data[m.end():]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: pixel payload is {len(pixels)} bytes, expected {w * h}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def export_filter_images(layer, out_dir, prefix=""):
    """Three images per filter: envelope, masked weights and raw weights.

    Weights are averaged over input channels before normalisation.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    envelopes = layer.envelopes()
    masked = layer.weights * envelopes.astype(layer.weights.dtype)[:, None]
    paths = []
    for f in range(layer.filters):
        for tag, img in (
            ("envelope", envelopes[f]),
            ("masked", masked[f].mean(axis=0)),
            ("raw", layer.weights[f].mean(axis=0)),
        ):
            path = out_dir / f"{prefix}filter{f:02d}_{tag}.pgm"
            write_pgm(path, to_gray(img))
            paths.append(path)
    return paths


def export_feature_maps(layer, image, out_dir, prefix=""):
    """One image per filter of the layer's response to a single ``[C,H,W]`` input."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out, _ = layer.forward(np.asarray(image, dtype=layer.weights.dtype))
    paths = []
    for f in range(out.shape[0]):
        path = out_dir / f"{prefix}filter{f:02d}_response.pgm"
        write_pgm(path, to_gray(out[f]))
        paths.append(path)
    return paths


@dataclass
class DriftReport:
    change_pct: list
    grown: int
    shrunk: int
    stable: int

    def lines(self):
        out = [f"filter {i}: lambda_max {c:+.1f}%" for i, c in enumerate(self.change_pct)]
        out.append(f"grown={self.grown} shrunk={self.shrunk} stable={self.stable}")
        return out


def scale_drift_report(trace, threshold_pct=20.0):
    """Relative change of each filter's ``lambda_max`` from first to last epoch."""
    if len(trace.epochs) < 2:
        raise ValueError("need at least two epochs")
    lam = trace.lambda_max()
    change = (lam[-1] - lam[0]) / lam[0] * 100.0
    grown = int(np.sum(change > threshold_pct))
    shrunk = int(np.sum(change < -threshold_pct))
    return DriftReport([float(c) for c in change], grown, shrunk, len(change) - grown - shrunk)


def covariance_table(sigma):
    rows = ["filter sigma_xx sigma_yy sigma_xy lambda_max lambda_min orientation_deg det"]
    for i, (s, cs) in enumerate(zip(np.asarray(sigma, dtype=np.float64), covariance_summaries(sigma))):
        rows.append(
            f"{i} {s[0]:.6g} {s[1]:.6g} {s[2]:.6g} {cs.lambda_max:.6g} {cs.lambda_min:.6g} "
            f"{cs.orientation_deg:.6g} {cs.determinant:.6g}"
        )
    return "\n".join(rows)
