"""Staged residual networks whose residual branches are scaled by per-channel step sizes.

A block computes ``shortcut(y) + F(y) * dt`` where ``dt`` is a channel
vector produced by the stage's controller (or stored after baking). The
shortcut is the identity unless the block changes shape, in which case it is
a strided 1x1 conv (+ BN for non-plain kinds).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .controllers import (
    BakedController,
    ControllerConfig,
    StageController,
    make_controller,
)

BLOCK_KINDS = ("plain", "basic", "bottleneck")


class NonFiniteActivation(FloatingPointError):
    def __init__(self, message: str, block_index: int | None):
        super().__init__(message)
        self.block_index = block_index


@dataclass(frozen=True)
class StageSpec:
    num_blocks: int
    channels: int
    block_kind: str = "basic"
    downsample_entry: bool = False

    def __post_init__(self):
        if self.num_blocks < 1 or self.channels < 1:
            raise ValueError("stages need at least one block and one channel")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block kind must be one of {BLOCK_KINDS}")
        if self.block_kind == "bottleneck" and self.channels % 4:
            raise ValueError("bottleneck channels must be divisible by 4")


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple[StageSpec, ...]
    input_channels: int = 3
    num_classes: int = 10
    stem: str = "cifar"
    stem_channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("network needs at least one stage")
        if self.stem not in ("cifar", "imagenet"):
            raise ValueError("stem must be 'cifar' or 'imagenet'")
        if self.input_channels < 1 or self.num_classes < 1:
            raise ValueError("input_channels and num_classes must be positive")

    @property
    def stem_width(self) -> int:
        if self.stem_channels is not None:
            return self.stem_channels
        first = self.stages[0]
        return first.channels // 4 if first.block_kind == "bottleneck" else first.channels

    @property
    def depth(self) -> int:
        return sum(s.num_blocks for s in self.stages)

    @property
    def plain(self) -> bool:
        return all(s.block_kind == "plain" for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "stages": [
                {
                    "num_blocks": s.num_blocks,
                    "channels": s.channels,
                    "block_kind": s.block_kind,
                    "downsample_entry": s.downsample_entry,
                }
                for s in self.stages
            ],
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "stem": self.stem,
            "stem_channels": self.stem_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        return cls(**d)


def _imagenet(kind: str, blocks: Sequence[int]) -> NetworkSpec:
    widths = (256, 512, 1024, 2048) if kind == "bottleneck" else (64, 128, 256, 512)
    stages = tuple(
        StageSpec(n, c, kind, downsample_entry=i > 0) for i, (n, c) in enumerate(zip(blocks, widths))
    )
    return NetworkSpec(stages, input_channels=3, num_classes=1000, stem="imagenet", stem_channels=64)


PRESETS = {
    "resnet18": lambda: _imagenet("basic", (2, 2, 2, 2)),
    "resnet34": lambda: _imagenet("basic", (3, 4, 6, 3)),
    "resnet50": lambda: _imagenet("bottleneck", (3, 4, 6, 3)),
    "resnet101": lambda: _imagenet("bottleneck", (3, 4, 23, 3)),
}


def preset(name: str) -> NetworkSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def toy_spec(
    blocks_per_stage: int = 2,
    widths: Sequence[int] = (8, 16, 32),
    block_kind: str = "basic",
    input_channels: int = 2,
    num_classes: int = 2,
) -> NetworkSpec:
    """CIFAR-style layout used for desk-scale experiments."""
    stages = tuple(
        StageSpec(blocks_per_stage, c, block_kind, downsample_entry=i > 0) for i, c in enumerate(widths)
    )
    return NetworkSpec(stages, input_channels=input_channels, num_classes=num_classes)


# --------------------------------------------------------------------- layers


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> Tensor:
    std = np.sqrt(2.0 / (c_in * k * k))
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)


class BatchNorm:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        return ad.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, update_stats=update_stats
        )


@dataclass
class _Ctx:
    training: bool
    update_stats: bool = True


class Block:
    """One residual block; ``convs`` are ordered as they appear in the branch."""

    def __init__(self, name: str, kind: str, in_channels: int, channels: int, stride: int, rng):
        self.name = name
        self.kind = kind
        self.in_channels = in_channels
        self.channels = channels
        self.stride = stride
        if kind == "plain":
            self.convs = [_he_conv(rng, channels, in_channels, 3)]
            self.bns: list[BatchNorm] = []
        elif kind == "basic":
            self.convs = [_he_conv(rng, channels, in_channels, 3), _he_conv(rng, channels, channels, 3)]
            self.bns = [BatchNorm(channels), BatchNorm(channels)]
        elif kind == "bottleneck":
            inner = channels // 4
            self.convs = [
                _he_conv(rng, inner, in_channels, 1),
                _he_conv(rng, inner, inner, 3),
                _he_conv(rng, channels, inner, 1),
            ]
            self.bns = [BatchNorm(inner), BatchNorm(inner), BatchNorm(channels)]
        else:
            raise ValueError(f"unsupported block kind {kind!r}")
        self.proj: Tensor | None = None
        self.proj_bn: BatchNorm | None = None
        if stride != 1 or in_channels != channels:
            self.proj = _he_conv(rng, channels, in_channels, 1)
            if kind != "plain":
                self.proj_bn = BatchNorm(channels)

    @property
    def identity_shortcut(self) -> bool:
        return self.proj is None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"{self.name}.conv{i + 1}.weight", w) for i, w in enumerate(self.convs)]
        for i, bn in enumerate(self.bns):
            out += [(f"{self.name}.bn{i + 1}.weight", bn.gamma), (f"{self.name}.bn{i + 1}.bias", bn.beta)]
        if self.proj is not None:
            out.append((f"{self.name}.proj.weight", self.proj))
        if self.proj_bn is not None:
            out += [(f"{self.name}.proj_bn.weight", self.proj_bn.gamma), (f"{self.name}.proj_bn.bias", self.proj_bn.beta)]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        bns = [(f"bn{i + 1}", bn) for i, bn in enumerate(self.bns)]
        if self.proj_bn is not None:
            bns.append(("proj_bn", self.proj_bn))
        for tag, bn in bns:
            out += [(f"{self.name}.{tag}.running_mean", bn.running_mean), (f"{self.name}.{tag}.running_var", bn.running_var)]
        return out

    def branch(self, y: Tensor, ctx: _Ctx | None = None) -> Tensor:
        """Residual function F(y); eval-mode normalisation unless ``ctx`` says otherwise."""
        ctx = ctx or _Ctx(False)
        if self.kind == "plain":
            return ad.relu(ad.conv2d(y, self.convs[0], self.stride, 1))
        if self.kind == "basic":
            z = ad.relu(self.bns[0](ad.conv2d(y, self.convs[0], self.stride, 1), ctx.training, ctx.update_stats))
            return self.bns[1](ad.conv2d(z, self.convs[1], 1, 1), ctx.training, ctx.update_stats)
        # stride sits on the first 1x1 conv, as in the original bottleneck layout
        z = ad.relu(self.bns[0](ad.conv2d(y, self.convs[0], self.stride, 0), ctx.training, ctx.update_stats))
        z = ad.relu(self.bns[1](ad.conv2d(z, self.convs[1], 1, 1), ctx.training, ctx.update_stats))
        return self.bns[2](ad.conv2d(z, self.convs[2], 1, 0), ctx.training, ctx.update_stats)

    def shortcut(self, y: Tensor, ctx: _Ctx | None = None) -> Tensor:
        ctx = ctx or _Ctx(False)
        if self.proj is None:
            return y
        s = ad.conv2d(y, self.proj, self.stride, 0)
        return self.proj_bn(s, ctx.training, ctx.update_stats) if self.proj_bn is not None else s


def block_forward(y: Tensor, block: Block, dt, training: bool = False, update_stats: bool = True) -> Tensor:
    """``shortcut(y) + F(y) * dt`` with ``dt`` multiplied channel-wise."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    if y.shape[-3] != block.in_channels:
        raise ValueError(f"{block.name}: input has {y.shape[-3]} channels, block expects {block.in_channels}")
    ctx = _Ctx(training, update_stats)
    return ad.add(block.shortcut(y, ctx), ad.channel_mul(block.branch(y, ctx), dt))


@dataclass
class ForwardRecord:
    """Intermediate tensors captured during a forward pass."""

    block_inputs: list[Tensor] = field(default_factory=list)
    stage_outputs: list[Tensor] = field(default_factory=list)
    steps: list[Tensor] = field(default_factory=list)


class Network:
    def __init__(self, spec: NetworkSpec, controller: ControllerConfig, seed: int = 0):
        self.spec = spec
        self.controller_config = controller
        self.freeze_bn = False
        self.detach_projection = controller.detach_projection
        rng = np.random.default_rng(seed)
        stem_k = 7 if spec.stem == "imagenet" else 3
        self.stem_conv = _he_conv(rng, spec.stem_width, spec.input_channels, stem_k)
        self.stem_bn = None if spec.plain else BatchNorm(spec.stem_width)
        self.stages: list[list[Block]] = []
        c_in = spec.stem_width
        for si, st in enumerate(spec.stages):
            blocks = []
            for bi in range(st.num_blocks):
                stride = 2 if (bi == 0 and st.downsample_entry) else 1
                blocks.append(Block(f"stage{si + 1}.block{bi + 1}", st.block_kind, c_in, st.channels, stride, rng))
                c_in = st.channels
            self.stages.append(blocks)
        crng = np.random.default_rng([seed, 1])
        self.controllers: list[StageController] = [
            make_controller(controller, st.block_kind, st.channels, st.num_blocks, crng) for st in spec.stages
        ]
        bound = 1.0 / np.sqrt(c_in)
        self.fc_weight = Tensor(rng.uniform(-bound, bound, size=(spec.num_classes, c_in)), requires_grad=True)
        self.fc_bias = Tensor(np.zeros(spec.num_classes), requires_grad=True)

    # -- introspection

    @property
    def blocks(self) -> list[Block]:
        return [b for stage in self.stages for b in stage]

    @property
    def baked(self) -> bool:
        return all(isinstance(c, BakedController) for c in self.controllers)

    def named_parameters(self, include_controller: bool = True) -> list[tuple[str, Tensor]]:
        out = [("stem.conv.weight", self.stem_conv)]
        if self.stem_bn is not None:
            out += [("stem.bn.weight", self.stem_bn.gamma), ("stem.bn.bias", self.stem_bn.beta)]
        for b in self.blocks:
            out += b.named_parameters()
        out += [("fc.weight", self.fc_weight), ("fc.bias", self.fc_bias)]
        if include_controller:
            for si, c in enumerate(self.controllers):
                out += [(f"controller{si + 1}.{n}", t) for n, t in c.named_parameters()]
        return out

    def parameters(self, include_controller: bool = True) -> list[Tensor]:
        return [t for _, t in self.named_parameters(include_controller)]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        if self.stem_bn is not None:
            out += [("stem.bn.running_mean", self.stem_bn.running_mean), ("stem.bn.running_var", self.stem_bn.running_var)]
        for b in self.blocks:
            out += b.named_buffers()
        return out

    def count_params(self, include_controller: bool = True) -> int:
        n = sum(t.size for t in self.parameters(include_controller))
        if include_controller:
            n += sum(s.size for c in self.controllers if isinstance(c, BakedController) for s in c.steps)
        return n

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    # -- step sizes

    def step_sizes(self) -> list[list[Tensor]]:
        """Per-stage list of step vectors, evaluated from the current weights."""
        return [c.run(blocks, self.detach_projection) for c, blocks in zip(self.controllers, self.stages)]

    def evolution_time(self) -> float:
        with ad.no_grad():
            return float(sum(dt.data.mean() for stage in self.step_sizes() for dt in stage))

    # -- forward

    def forward(
        self,
        x,
        training: bool = False,
        dt_scale: float | None = None,
        dt_override: Sequence[np.ndarray] | None = None,
        record: ForwardRecord | None = None,
    ) -> Tensor:
        """Logits for a batch ``x`` of shape (N, C, H, W).

        ``dt_scale`` multiplies every step vector, ``dt_override`` replaces
        them (one array per block in depth order); both are diagnostics.
        """
        if self.spec.stem == "imagenet":
            raise NotImplementedError("the ImageNet stem is supported for parameter counting only")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(f"expected batch (N, {self.spec.input_channels}, H, W), got {x.shape}")
        ctx = _Ctx(training, not self.freeze_bn)
        y = ad.conv2d(x, self.stem_conv, 1, 1)
        if self.stem_bn is not None:
            y = self.stem_bn(y, ctx.training, ctx.update_stats)
        y = ad.relu(y)
        steps = self.step_sizes()
        flat = 0
        for stage, stage_steps in zip(self.stages, steps):
            for block, dt in zip(stage, stage_steps):
                if dt_override is not None:
                    dt = Tensor(np.asarray(dt_override[flat], dtype=np.float64))
                if dt_scale is not None:
                    dt = ad.mul(dt, dt_scale)
                if record is not None:
                    record.block_inputs.append(y)
                    record.steps.append(dt)
                try:
                    y = ad.add(block.shortcut(y, ctx), ad.channel_mul(block.branch(y, ctx), dt))
                except ad.NonFiniteError as exc:
                    raise NonFiniteActivation(f"{block.name}: {exc}", flat) from None
                flat += 1
            if record is not None:
                record.stage_outputs.append(y)
        pooled = ad.mean(y, axis=(2, 3))
        return ad.add(ad.matmul(pooled, _transpose(self.fc_weight)), self.fc_bias)

    __call__ = forward


def _transpose(w: Tensor) -> Tensor:
    out = Tensor(w.data.T)
    out.op = "transpose"
    if w.requires_grad and ad.is_recording():
        out.requires_grad = True
        out._parents = (w,)
        out._backward = lambda g: (g.T,)
    return out


def build_network(spec: NetworkSpec, controller: ControllerConfig | None = None, seed: int = 0) -> Network:
    return Network(spec, controller or ControllerConfig(), seed)


def network_forward(network: Network, batch, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    return network.forward(batch, training=mode == "train")


def bake(network: Network) -> Network:
    """Copy of ``network`` whose controllers are replaced by their evaluated step vectors."""
    with ad.no_grad():
        steps = network.step_sizes()
    baked = copy.copy(network)
    baked.controllers = [BakedController([dt.data.copy() for dt in stage]) for stage in steps]
    baked.controller_config = replace(network.controller_config)
    return baked


# ---------------------------------------------------------- gradient profile


@dataclass
class GradientProfileRow:
    stage: int
    block: int
    grad_norm: float
    deviation: float | None  # None where the path to the stage output is not identity-shortcut


def layer_gradient_profile(
    network: Network,
    batch,
    labels,
    training: bool = True,
    dt_scale: float | None = None,
    dt_override: Sequence[np.ndarray] | None = None,
) -> list[GradientProfileRow]:
    """Per-block ``||dL/dy_n||`` and ``||dL/dy_n - dL/dy_D||``.

    ``y_D`` is the output of the block's size stage; the deviation is only
    defined for blocks whose own and all later shortcuts in the stage are
    identities, so that the two gradients share a shape.
    """
    freeze = network.freeze_bn
    network.freeze_bn = True
    try:
        rec = ForwardRecord()
        x = Tensor(np.asarray(batch, dtype=np.float64), requires_grad=True)
        loss = ad.cross_entropy(network.forward(x, training, dt_scale, dt_override, rec), labels)
        ad.backward(loss)
    finally:
        network.freeze_bn = freeze
    rows = []
    flat = 0
    for si, stage in enumerate(network.stages):
        g_out = rec.stage_outputs[si].grad
        for bi, block in enumerate(stage):
            g = rec.block_inputs[flat].grad
            identity_tail = all(b.identity_shortcut for b in stage[bi:])
            dev = float(np.linalg.norm(g - g_out)) if identity_tail else None
            rows.append(GradientProfileRow(si, bi, float(np.linalg.norm(g)), dev))
            flat += 1
    network.zero_grad()
    return rows
