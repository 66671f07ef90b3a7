"""Time-stepping controllers mapping block conv weights to per-channel step sizes.

Four controller kinds are available per size stage:

``lstm``
    one input fc, one LSTM cell and one output fc shared by every block in
    the stage; the cell state threads through the blocks in depth order.
``2fc``
    input and output fc layers, unshared (one pair per block), no memory.
``indp``
    a free parameter vector per block, squashed through a sigmoid.
``fixed``
    a constant step (``1.0`` recovers a plain ResNet); no parameters.

Every learnable kind ends in a sigmoid, so emitted steps lie in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("lstm", "2fc", "indp", "fixed")


@dataclass(frozen=True)
class ControllerConfig:
    kind: str = "lstm"
    reduction: int | None = None  # None -> 4 for basic/plain blocks, 8 for bottleneck
    fixed_value: float = 1.0
    zero_init: bool = False
    detach_projection: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"controller kind must be one of {KINDS}, got {self.kind!r}")
        if self.reduction is not None and self.reduction < 1:
            raise ValueError("reduction must be >= 1")

    def reduction_for(self, block_kind: str) -> int:
        if self.reduction is not None:
            return self.reduction
        return 8 if block_kind == "bottleneck" else 4

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "reduction": self.reduction,
            "fixed_value": self.fixed_value,
            "zero_init": self.zero_init,
            "detach_projection": self.detach_projection,
        }


def projection_dim(block_kind: str, channels: int, kernel: int = 3) -> int:
    """Length of the averaged weight vector fed to a controller."""
    if block_kind == "basic":
        return 2 * kernel * kernel * channels
    if block_kind == "bottleneck":
        return channels + channels // 4
    if block_kind == "plain":
        return kernel * kernel * channels
    raise ValueError(f"unsupported block kind {block_kind!r}")


class ProjectedWeights(NamedTuple):
    vector: Tensor
    provenance: tuple[str, ...]


def project_weights(block, detach: bool = False) -> ProjectedWeights:
    """Average each selected conv kernel over its input-channel axis and concatenate.

    Basic blocks use both 3x3 convs, bottleneck blocks the two 1x1 convs
    (first and third), plain blocks their single conv.
    """
    if block.kind == "basic":
        picks = (0, 1)
    elif block.kind == "bottleneck":
        picks = (0, 2)
    elif block.kind == "plain":
        picks = (0,)
    else:
        raise ValueError(f"unsupported block kind {block.kind!r}")
    parts = []
    for i in picks:
        w = block.convs[i]
        if detach:
            w = w.detach()
        avg = ad.mean(w, axis=1)
        parts.append(ad.reshape(avg, (avg.size,)))
    vec = parts[0] if len(parts) == 1 else ad.concat(parts)
    return ProjectedWeights(vec, tuple(f"{block.name}.conv{i + 1}" for i in picks))


def _fan_in_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ------------------------------------------------------------ functional cells


class LSTMState(NamedTuple):
    h: Tensor
    c: Tensor


def zero_state(width: int) -> LSTMState:
    return LSTMState(Tensor(np.zeros(width)), Tensor(np.zeros(width)))


def _affine(w: Tensor, x: Tensor, b: Tensor) -> Tensor:
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"controller input has length {x.shape[0]}, transform expects {w.shape[1]}")
    return ad.add(ad.matmul(w, x), b)


def indp_step(params: dict[str, Tensor], block_index: int) -> Tensor:
    return ad.sigmoid(params[f"free{block_index}"])


def twofc_step(params: dict[str, Tensor], wbar: Tensor) -> Tensor:
    x = ad.relu(_affine(params["w_in"], wbar, params["b_in"]))
    return ad.sigmoid(_affine(params["w_out"], x, params["b_out"]))


def lstm_step(params: dict[str, Tensor], state: LSTMState, wbar: Tensor) -> tuple[Tensor, LSTMState]:
    """Input fc + ReLU, one LSTM cell update, output fc + sigmoid."""
    if state.h.shape[0] != params["w_out"].shape[1]:
        raise ValueError("controller state width does not match the output transform")
    x = ad.relu(_affine(params["w_in"], wbar, params["b_in"]))
    hx = ad.concat([state.h, x])
    i = ad.sigmoid(_affine(params["w_i"], hx, params["b_i"]))
    f = ad.sigmoid(_affine(params["w_f"], hx, params["b_f"]))
    g = ad.tanh(_affine(params["w_g"], hx, params["b_g"]))
    o = ad.sigmoid(_affine(params["w_o"], hx, params["b_o"]))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    dt = ad.sigmoid(_affine(params["w_out"], h, params["b_out"]))
    return dt, LSTMState(h, c)


# --------------------------------------------------------- stage controllers


class StageController:
    """Produces one step-size vector per block of a size stage."""

    kind = "base"

    def __init__(self, channels: int, num_blocks: int):
        self.channels = channels
        self.num_blocks = num_blocks

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def run(self, blocks: Sequence, detach: bool = False) -> list[Tensor]:
        raise NotImplementedError

    def _check(self, blocks: Sequence) -> None:
        widths = {b.channels for b in blocks}
        if widths != {self.channels}:
            raise ValueError(f"stage blocks have channel widths {sorted(widths)}, controller expects {self.channels}")


class FixedController(StageController):
    kind = "fixed"

    def __init__(self, channels: int, num_blocks: int, value: float):
        super().__init__(channels, num_blocks)
        self.value = float(value)

    def run(self, blocks, detach=False):
        self._check(blocks)
        return [Tensor(np.full(self.channels, self.value)) for _ in blocks]


class BakedController(StageController):
    """Stored step vectors evaluated once from trained weights."""

    kind = "baked"

    def __init__(self, steps: Sequence[np.ndarray]):
        steps = [np.asarray(s, dtype=np.float64) for s in steps]
        super().__init__(len(steps[0]), len(steps))
        self.steps = steps

    def run(self, blocks, detach=False):
        self._check(blocks)
        return [Tensor(s) for s in self.steps]


class IndpController(StageController):
    kind = "indp"

    def __init__(self, channels: int, num_blocks: int):
        super().__init__(channels, num_blocks)
        self.params = {f"free{i}": _zeros(channels) for i in range(num_blocks)}

    def named_parameters(self):
        return list(self.params.items())

    def run(self, blocks, detach=False):
        self._check(blocks)
        return [indp_step(self.params, i) for i in range(len(blocks))]


class TwoFCController(StageController):
    kind = "2fc"

    def __init__(self, channels, num_blocks, in_dim, reduction, rng, zero_init=False):
        super().__init__(channels, num_blocks)
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.params = []
        for _ in range(num_blocks):
            p = {
                "w_in": _zeros(hidden, in_dim) if zero_init else _fan_in_uniform(rng, hidden, in_dim),
                "b_in": _zeros(hidden),
                "w_out": _zeros(channels, hidden),
                "b_out": _zeros(channels),
            }
            self.params.append(p)

    def named_parameters(self):
        return [(f"block{i}.{k}", v) for i, p in enumerate(self.params) for k, v in p.items()]

    def run(self, blocks, detach=False):
        self._check(blocks)
        return [twofc_step(p, project_weights(b, detach).vector) for p, b in zip(self.params, blocks)]


class LSTMController(StageController):
    kind = "lstm"

    def __init__(self, channels, num_blocks, in_dim, reduction, rng, zero_init=False):
        super().__init__(channels, num_blocks)
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        h = self.hidden = channels // reduction

        def mat(rows, cols):
            return _zeros(rows, cols) if zero_init else _fan_in_uniform(rng, rows, cols)

        self.params = {"w_in": mat(h, in_dim), "b_in": _zeros(h)}
        for gate in "ifgo":
            self.params[f"w_{gate}"] = mat(h, 2 * h)
            self.params[f"b_{gate}"] = _zeros(h)
        self.params["w_out"] = _zeros(channels, h)
        self.params["b_out"] = _zeros(channels)

    def named_parameters(self):
        return list(self.params.items())

    def run(self, blocks, detach=False):
        return stage_run(self, blocks, detach)


def stage_run(controller: LSTMController, blocks: Sequence, detach: bool = False) -> list[Tensor]:
    """Thread a zero-initialised LSTM state through ``blocks`` in depth order."""
    controller._check(blocks)
    state = zero_state(controller.hidden)
    steps = []
    for b in blocks:
        dt, state = lstm_step(controller.params, state, project_weights(b, detach).vector)
        steps.append(dt)
    return steps


def make_controller(cfg: ControllerConfig, block_kind: str, channels: int, num_blocks: int, rng) -> StageController:
    if cfg.kind == "fixed":
        return FixedController(channels, num_blocks, cfg.fixed_value)
    if cfg.kind == "indp":
        return IndpController(channels, num_blocks)
    r = cfg.reduction_for(block_kind)
    in_dim = projection_dim(block_kind, channels)
    cls = LSTMController if cfg.kind == "lstm" else TwoFCController
    return cls(channels, num_blocks, in_dim, r, rng, zero_init=cfg.zero_init)


@dataclass(frozen=True)
class StepSizeRow:
    stage: int
    block: int
    steps: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.steps))

    @property
    def min(self) -> float:
        return float(np.min(self.steps))

    @property
    def max(self) -> float:
        return float(np.max(self.steps))

    def to_dict(self) -> dict:
        return {"stage": self.stage, "block": self.block, "steps": list(self.steps), "mean": self.mean}


def export_step_sizes(network) -> list[StepSizeRow]:
    """One row per block (1-based stage and block indices) from the network's current weights."""
    with ad.no_grad():
        steps = network.step_sizes()
    return [
        StepSizeRow(si + 1, bi + 1, tuple(float(v) for v in dt.data))
        for si, stage in enumerate(steps)
        for bi, dt in enumerate(stage)
    ]


def step_sizes_csv(rows: Sequence[StepSizeRow]) -> str:
    lines = ["stage,block,mean,min,max"]
    lines += [f"{r.stage},{r.block},{r.mean!r},{r.min!r},{r.max!r}" for r in rows]
    return "\n".join(lines) + "\n"
