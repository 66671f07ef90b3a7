"""Desk-scale datasets: two spirals, Gaussian blobs and small images from CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    """Samples shaped (N, C, H, W) with integer labels, normalised exactly once."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    mean: np.ndarray
    std: np.ndarray
    split: str

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return self.x.shape[1:]


def _split(x: np.ndarray, y: np.ndarray, num_classes: int, test_fraction: float, rng) -> tuple[Dataset, Dataset]:
    if not np.all((y >= 0) & (y < num_classes)):
        raise ValueError("labels must lie in [0, num_classes)")
    perm = rng.permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    mean = x[train_idx].mean(axis=(0, 2, 3))
    std = x[train_idx].std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    shape = (1, -1, 1, 1)

    def norm(idx):
        return (x[idx] - mean.reshape(shape)) / std.reshape(shape)

    return (
        Dataset(norm(train_idx), y[train_idx], num_classes, mean, std, "train"),
        Dataset(norm(test_idx), y[test_idx], num_classes, mean, std, "test"),
    )


def two_spirals(n: int = 2000, turns: float = 1.75, noise: float = 0.05, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaved Archimedean spirals, ``n`` points in total."""
    rng = rng if rng is not None else np.random.default_rng(0)
    half = n // 2
    theta = np.sqrt(rng.uniform(size=half)) * turns * 2 * np.pi
    r = theta / (turns * 2 * np.pi)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    a = pts + noise * rng.normal(size=pts.shape)
    b = -pts + noise * rng.normal(size=pts.shape)
    x = np.concatenate([a, b])
    y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return x.reshape(-1, 2, 1, 1), y


def gaussian_blobs(
    n: int = 1000, classes: int = 3, dim: int = 2, separation: float = 10.0, rng=None
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-variance blobs whose centres sit ``separation`` apart on a simplex-like layout."""
    rng = rng if rng is not None else np.random.default_rng(0)
    centres = np.zeros((classes, max(dim, classes)))
    centres[np.arange(classes), np.arange(classes)] = separation / np.sqrt(2)
    centres = centres[:, :dim] if dim >= classes else centres
    if dim < classes:
        # project onto the first `dim` principal directions of the centre set
        c = centres - centres.mean(axis=0)
        _, _, vt = np.linalg.svd(c, full_matrices=False)
        centres = c @ vt[:dim].T
    y = np.arange(n) % classes
    x = centres[y] + rng.normal(size=(n, dim))
    return x.reshape(n, dim, 1, 1), y.astype(np.int64)


def read_csv_images(path: str | Path, channels: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows are ``label, v_0, ..., v_{C*H*W-1}`` in (C, H, W) order; a header row is optional."""
    expected = channels * height * width + 1
    xs, ys = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and row[0].strip().lower() == "label":
                continue
            if len(row) != expected:
                raise ValueError(f"{path}:{lineno}: expected {expected} fields, got {len(row)}")
            try:
                label = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            ys.append(label)
            xs.append(vals)
    if not ys:
        raise ValueError(f"{path}: no samples")
    x = np.asarray(xs, dtype=np.float64).reshape(-1, channels, height, width)
    return x, np.asarray(ys, dtype=np.int64)


def write_csv_images(path: str | Path, x: np.ndarray, y: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = x.shape[0]
        w.writerow(["label"] + [f"v{i}" for i in range(x[0].size)])
        for i in range(n):
            w.writerow([int(y[i])] + [repr(float(v)) for v in x[i].ravel()])


def make_dataset(kind: str, params: dict | None = None, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Generate or load a dataset and split it into normalised train/test parts."""
    params = dict(params or {})
    test_fraction = params.pop("test_fraction", 0.2)
    rng = np.random.default_rng(seed)
    if kind == "two-spirals":
        x, y = two_spirals(rng=rng, **params)
        k = 2
    elif kind == "gaussian-blobs":
        x, y = gaussian_blobs(rng=rng, **params)
        k = params.get("classes", 3)
    elif kind == "csv-images":
        x, y = read_csv_images(params["path"], params["channels"], params["height"], params["width"])
        k = params.get("num_classes", int(y.max()) + 1)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return _split(x, y, k, test_fraction, rng)
