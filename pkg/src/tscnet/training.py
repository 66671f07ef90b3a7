"""Joint training of network weights and step-size controllers."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .controllers import ControllerConfig, export_step_sizes
from .data import Dataset, make_dataset
from .optim import SGD
from .resnet import Network, NetworkSpec, build_network, preset, toy_spec

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {detail}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "two-spirals"})
    preset: str | None = None
    blocks_per_stage: int = 2
    widths: tuple[int, ...] = (8, 16, 32)
    block_kind: str = "basic"
    controller: dict = field(default_factory=lambda: {"kind": "lstm"})
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple[float, ...] = (0.5, 0.75)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    flip: bool = False
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.milestones = tuple(self.milestones)
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be increasing")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["milestones"] = list(self.milestones)
        return d

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(**self.controller)

    def network_spec(self, data: Dataset) -> NetworkSpec:
        if self.preset is not None:
            return preset(self.preset)
        c = data.sample_shape[0]
        return toy_spec(self.blocks_per_stage, self.widths, self.block_kind, c, data.num_classes)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for m in self.milestones:
            if epoch >= int(m * self.epochs):
                lr *= self.lr_factor
        return lr


@dataclass
class RunRecord:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    step_sizes: list[dict] = field(default_factory=list)
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(**d)

    def epochs_csv(self) -> str:
        if not self.epochs:
            return ""
        cols = list(self.epochs[0])
        lines = [",".join(cols)]
        for row in self.epochs:
            lines.append(",".join(repr(row[c]) for c in cols))
        return "\n".join(lines) + "\n"

    @property
    def final(self) -> dict:
        return self.epochs[-1]


def decay_mask(network: Network) -> list[bool]:
    """Weight decay applies to conv, fc and controller weight matrices only."""
    mask = []
    for name, t in network.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        is_bn = ".bn" in name or "proj_bn" in name or name.startswith("stem.bn")
        if is_bn or leaf.startswith("b_") or leaf == "bias" or leaf.startswith("free"):
            mask.append(False)
        else:
            mask.append(True)
    return mask


def evaluate(network: Network, data: Dataset, noise_std: float = 0.0, rng=None, batch_size: int = 512) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode, optionally with Gaussian input noise."""
    total_loss, correct = 0.0, 0
    n = len(data)
    with ad.no_grad():
        for start in range(0, n, batch_size):
            xb = data.x[start : start + batch_size]
            yb = data.y[start : start + batch_size]
            if noise_std > 0:
                xb = xb + noise_std * rng.normal(size=xb.shape)
            logits = network.forward(xb, training=False)
            total_loss += ad.cross_entropy(logits, yb).item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total_loss / n, correct / n


def train(
    config: TrainConfig,
    data: tuple[Dataset, Dataset] | None = None,
    network: Network | None = None,
) -> tuple[RunRecord, Network]:
    """Minimise softmax cross-entropy over network and controller parameters jointly."""
    t0 = time.perf_counter()
    if data is None:
        ds = dict(config.dataset)
        kind = ds.pop("kind")
        data = make_dataset(kind, ds, seed=ds.pop("seed", config.seed))
    train_set, test_set = data
    if network is None:
        network = build_network(config.network_spec(train_set), config.controller_config(), config.seed)
    params = network.parameters()
    opt = SGD(params, config.lr, config.momentum, config.weight_decay, decay_mask(network))
    rng = np.random.default_rng([config.seed, 2])
    record = RunRecord(config=config.to_dict())

    def log_epoch(epoch, lr, train_loss, train_acc, step=-1):
        try:
            test_loss, test_acc = evaluate(network, test_set)
        except FloatingPointError as exc:
            raise TrainingDiverged(epoch, step, f"evaluation: {exc}") from None
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": train_loss,
            "train_acc": train_acc,
            "test_loss": test_loss,
            "test_acc": test_acc,
            "evolution_time": network.evolution_time(),
        }
        record.epochs.append(row)
        logger.info("epoch %d lr %.4g train %.4f/%.3f test %.4f/%.3f T=%.3f", epoch, lr, train_loss, train_acc, test_loss, test_acc, row["evolution_time"])

    init_loss, init_acc = evaluate(network, train_set)
    log_epoch(0, config.lr_at(0), init_loss, init_acc)
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        opt.lr = config.lr_at(epoch - 1)
        perm = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            xb, yb = train_set.x[idx], train_set.y[idx]
            if config.flip:
                flips = rng.uniform(size=len(idx)) < 0.5
                xb = np.where(flips[:, None, None, None], xb[..., ::-1], xb)
            opt.zero_grad()
            try:
                logits = network.forward(xb, training=True)
                loss = ad.cross_entropy(logits, yb)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from None
            try:
                ad.backward(loss)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from None
            opt.step()
            bad = next((i for i, t in enumerate(params) if not np.isfinite(t.data).all()), None)
            if bad is not None:
                raise TrainingDiverged(epoch, step, f"update left parameter {bad} non-finite")
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        log_epoch(epoch, opt.lr, loss_sum / n, correct / n, step)
    record.step_sizes = [row.to_dict() for row in export_step_sizes(network)]
    record.wall_time = time.perf_counter() - t0
    return record, network
