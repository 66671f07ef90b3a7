"""Closed-form parameter and FLOP accounting for step-controlled ResNets.

Two overhead counters live here on purpose. :func:`table1_estimate` evaluates
the closed-form symbolic formulas verbatim (no biases, single projected conv).
:func:`exact_overhead` counts the actual transform shapes including biases,
and is the one that matches a built network.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

from .controllers import projection_dim
from .resnet import NetworkSpec
from .autodiff import conv_output_size

__all__ = [
    "ComplexityReport",
    "table1_estimate",
    "exact_overhead",
    "inference_overhead",
    "resnet_params",
    "resnet_flops",
    "appendix_b_table",
    "complexity_report",
]


def table1_estimate(
    kind: str,
    blocks: Sequence[int],
    channels: Sequence[int],
    r: int = 4,
    k1: int = 3,
    k2: int = 3,
    concat: int = 1,
):
    """Training-phase parameter estimate from the symbolic complexity table.

    ``concat`` multiplies the ``k1*k2`` input term; the symbolic formulas
    use 1 even though basic blocks feed two projected convs. Returns an
    ``int`` when the formula is integral and a :class:`Fraction` otherwise.
    """
    if len(blocks) != len(channels):
        raise ValueError("blocks and channels must have one entry per stage")
    if any(v <= 0 for v in (*blocks, *channels, r, k1, k2, concat)):
        raise ValueError("all arguments must be positive")
    kk = concat * k1 * k2
    total = Fraction(0)
    for L, C in zip(blocks, channels):
        if kind == "indp":
            total += L * C
            continue
        if C % r:
            raise ValueError(f"channels {C} not divisible by reduction {r}")
        c2r = Fraction(C * C, r)
        if kind == "2fc":
            total += L * c2r * (1 + kk)
        elif kind == "lstm":
            total += c2r * (1 + Fraction(8, r) + kk)
        else:
            raise ValueError(f"unknown controller kind {kind!r}")
    return int(total) if total.denominator == 1 else total


def _stage_transforms(kind: str, block_kind: str, C: int, r: int) -> list[tuple[int, int]]:
    """(fan_in, fan_out) of every fc layer in one stage's controller, per instance."""
    h = C // r
    shapes = [(projection_dim(block_kind, C), h)]
    if kind == "lstm":
        shapes += [(2 * h, h)] * 4
    shapes.append((h, C))
    return shapes


def exact_overhead(kind: str, spec: NetworkSpec, r: int | None = None, phase: str = "train") -> int:
    """Exact controller parameter count (weights and biases) for ``spec``.

    At inference every kind reduces to one stored step vector per block.
    """
    if kind not in ("lstm", "2fc", "indp", "fixed"):
        raise ValueError(f"unknown controller kind {kind!r}")
    if phase not in ("train", "infer"):
        raise ValueError("phase must be 'train' or 'infer'")
    if kind == "fixed":
        return 0
    if phase == "infer" or kind == "indp":
        return inference_overhead(spec)
    total = 0
    for st in spec.stages:
        rr = r if r is not None else (8 if st.block_kind == "bottleneck" else 4)
        if st.channels % rr:
            raise ValueError(f"channels {st.channels} not divisible by reduction {rr}")
        per = sum(i * o + o for i, o in _stage_transforms(kind, st.block_kind, st.channels, rr))
        total += per if kind == "lstm" else st.num_blocks * per
    return total


def inference_overhead(spec: NetworkSpec) -> int:
    return sum(st.num_blocks * st.channels for st in spec.stages)


def _block_convs(kind: str, c_in: int, C: int, stride: int) -> list[tuple[int, int, int, int]]:
    """(c_out, c_in, k, stride) for each conv of a block's residual branch."""
    if kind == "plain":
        return [(C, c_in, 3, stride)]
    if kind == "basic":
        return [(C, c_in, 3, stride), (C, C, 3, 1)]
    inner = C // 4
    return [(inner, c_in, 1, stride), (inner, inner, 3, 1), (C, inner, 1, 1)]


def _walk(spec: NetworkSpec):
    """Yield (stage_index, block_kind, c_in, C, stride, has_projection)."""
    c_in = spec.stem_width
    for si, st in enumerate(spec.stages):
        for bi in range(st.num_blocks):
            stride = 2 if (bi == 0 and st.downsample_entry) else 1
            yield si, st.block_kind, c_in, st.channels, stride, stride != 1 or c_in != st.channels
            c_in = st.channels


def resnet_params(spec: NetworkSpec) -> int:
    """Network parameters excluding any controller: bias-free convs, BN affine pairs, fc with bias."""
    stem_k = 7 if spec.stem == "imagenet" else 3
    bn = not spec.plain
    n = spec.stem_width * spec.input_channels * stem_k * stem_k + (2 * spec.stem_width if bn else 0)
    c_last = spec.stem_width
    for _, kind, c_in, C, stride, proj in _walk(spec):
        for co, ci, k, _s in _block_convs(kind, c_in, C, stride):
            n += co * ci * k * k + (2 * co if kind != "plain" else 0)
        if proj:
            n += C * c_in + (2 * C if kind != "plain" else 0)
        c_last = C
    return n + spec.num_classes * c_last + spec.num_classes


def resnet_flops(spec: NetworkSpec, input_size: int | tuple[int, int] = 224) -> int:
    """Multiply-accumulate count of convs and the final fc (1 MAC = 1 FLOP)."""
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    total = 0

    def conv(co, ci, k, stride, pad):
        nonlocal h, w, total
        h, w = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
        total += co * ci * k * k * h * w

    if spec.stem == "imagenet":
        conv(spec.stem_width, spec.input_channels, 7, 2, 3)
        h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)  # max pool
    else:
        conv(spec.stem_width, spec.input_channels, 3, 1, 1)
    c_last = spec.stem_width
    for _, kind, c_in, C, stride, proj in _walk(spec):
        h0, w0 = h, w
        for co, ci, k, s in _block_convs(kind, c_in, C, stride):
            conv(co, ci, k, s, k // 2)
        if proj:
            total += C * c_in * conv_output_size(h0, 1, stride, 0) * conv_output_size(w0, 1, stride, 0)
        c_last = C
    return total + spec.num_classes * c_last


def appendix_b_table(spec: NetworkSpec, r: int | None = None) -> list[list[str]]:
    """Per-stage LSTM-controller fc shapes in bracket notation.

    Each stage yields three rows: the input transform, the four gate
    transforms and the output transform, e.g. ``[320,32]x1``.
    """
    rows = []
    for st in spec.stages:
        rr = r if r is not None else (8 if st.block_kind == "bottleneck" else 4)
        h = st.channels // rr
        if st.block_kind == "basic":
            fan_in = f"3×3×{2 * st.channels}"
        else:
            fan_in = str(projection_dim(st.block_kind, st.channels))
        rows.append([f"[{fan_in},{h}]×1", f"[{2 * h},{h}]×4", f"[{h},{st.channels}]×1"])
    return rows


@dataclass
class ComplexityReport:
    kind: str
    params_base: int
    params_train: int
    params_infer: int
    flops_infer: int
    controller_overhead_train: int
    controller_overhead_infer: int
    per_stage: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def complexity_report(spec: NetworkSpec, kind: str = "lstm", r: int | None = None, input_size: int = 224) -> ComplexityReport:
    base = resnet_params(spec)
    train = exact_overhead(kind, spec, r)
    infer = exact_overhead(kind, spec, r, phase="infer")
    per_stage = []
    for si, st in enumerate(spec.stages):
        sub = NetworkSpec((st,), spec.input_channels, spec.num_classes, spec.stem, spec.stem_width)
        per_stage.append(
            {
                "stage": si + 1,
                "blocks": st.num_blocks,
                "channels": st.channels,
                "block_kind": st.block_kind,
                "overhead_train": exact_overhead(kind, sub, r),
                "overhead_infer": exact_overhead(kind, sub, r, phase="infer"),
            }
        )
    return ComplexityReport(
        kind=kind,
        params_base=base,
        params_train=base + train,
        params_infer=base + infer,
        flops_infer=resnet_flops(spec, input_size),
        controller_overhead_train=train,
        controller_overhead_infer=infer,
        per_stage=per_stage,
    )
