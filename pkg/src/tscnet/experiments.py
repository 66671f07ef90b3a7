"""Diagnostic experiments: input-noise robustness, depth sweeps and gradient profiles."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Dataset
from .resnet import Network, layer_gradient_profile
from .training import TrainConfig, evaluate, train


@dataclass
class NoiseRow:
    sigma: float
    accuracy: float
    loss: float
    accuracy_sd: float


def noise_sweep(
    network: Network,
    data: Dataset,
    noise_levels: Sequence[float],
    trials: int = 1,
    seed: int = 0,
) -> list[NoiseRow]:
    """Evaluate with zero-mean Gaussian noise of each standard deviation added to the normalised inputs."""
    rows = []
    for li, sigma in enumerate(noise_levels):
        accs, losses = [], []
        for k in range(trials if sigma > 0 else 1):
            rng = np.random.default_rng([seed, li, k])
            loss, acc = evaluate(network, data, noise_std=sigma, rng=rng)
            accs.append(acc)
            losses.append(loss)
        rows.append(
            NoiseRow(
                float(sigma),
                float(np.mean(accs)),
                float(np.mean(losses)),
                float(np.std(accs)),
            )
        )
    return rows


DEFAULT_VARIANTS = {
    "baseline": {"kind": "fixed", "fixed_value": 1.0},
    "tsc": {"kind": "lstm"},
}


@dataclass
class DepthCell:
    blocks_per_stage: int
    depth: int
    variant: str
    mean: float
    sd: float
    runs: int
    accuracies: list[float]


def depth_sweep(
    base: TrainConfig,
    depths: Sequence[int],
    seeds: Sequence[int],
    variants: dict[str, dict] | None = None,
) -> list[DepthCell]:
    """Train every (depth, variant, seed) and report mean and sd of final test accuracy.

    ``depths`` are blocks per stage; the reported ``depth`` is the
    conventional layer count ``2 * blocks * stages + 2`` for basic blocks.
    """
    variants = variants or DEFAULT_VARIANTS
    cells = []
    for L in depths:
        for name, ctrl in variants.items():
            accs = []
            for seed in seeds:
                cfg = replace(base, blocks_per_stage=L, controller=dict(ctrl), seed=seed)
                record, _ = train(cfg)
                accs.append(record.final["test_acc"])
            per_block = 3 if base.block_kind == "bottleneck" else (1 if base.block_kind == "plain" else 2)
            cells.append(
                DepthCell(
                    L,
                    per_block * L * len(base.widths) + 2,
                    name,
                    statistics.fmean(accs),
                    statistics.stdev(accs) if len(accs) > 1 else 0.0,
                    len(accs),
                    accs,
                )
            )
    return cells


def eq8_diagnostic(
    network: Network,
    batch,
    labels,
    scales: Sequence[float] = (0.0, 1e-3, 1e-2, 1e-1),
    training: bool = True,
) -> list[tuple[float, float]]:
    """Largest per-stage ``||dL/dy_n - dL/dy_D||`` with every step scaled by ``s``."""
    curve = []
    for s in scales:
        rows = layer_gradient_profile(network, batch, labels, training=training, dt_scale=s)
        devs = [r.deviation for r in rows if r.deviation is not None]
        curve.append((float(s), max(devs) if devs else 0.0))
    return curve
