"""Central finite-difference checks for recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class GradCheckResult:
    name: str
    size: int
    max_rel_error: float
    max_abs_error: float

    def ok(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_error <= rtol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` element-wise.

    The floor keeps entries whose true gradient is zero from dividing
    finite-difference round-off by zero.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f: Callable[[], float], t: Tensor, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
    floor: float = 1e-7,
) -> list[GradCheckResult]:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be a pure function of the parameter values (no running
    statistic updates, no fresh randomness).
    """
    for _, t in params:
        t.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params}

    def f() -> float:
        with ad.no_grad():
            return loss_fn().item()

    results = []
    for name, t in params:
        num = numerical_gradient(f, t, step)
        a = analytic[name]
        results.append(
            GradCheckResult(
                name,
                t.size,
                float(relative_error(a, num, floor).max()),
                float(np.abs(a - num).max()),
            )
        )
    for _, t in params:
        t.zero_grad()
    return results


def toy_problem(kind: str, blocks: int = 2, seed: int = 0, controller_scale: float = 0.5):
    """A small BN-frozen basic net at a generic point, plus its loss closure.

    Controller weights are pushed well away from their near-zero init: there
    the controller gradients are ~1e-8 and central differences lose most of
    their digits to round-off, so the check would measure FD noise.
    """
    from .controllers import ControllerConfig
    from .resnet import build_network, toy_spec

    spec = toy_spec(blocks, (4, 8), "basic", input_channels=2, num_classes=3)
    net = build_network(spec, ControllerConfig(kind=kind), seed=seed)
    rng = np.random.default_rng(seed)
    for name, t in net.named_parameters():
        scale = controller_scale if name.startswith("controller") else 0.1
        t.data = t.data + scale * rng.normal(size=t.shape)
    net.freeze_bn = True
    x = rng.normal(size=(6, 2, 3, 3))
    y = rng.integers(0, 3, size=6)
    return net, lambda: ad.cross_entropy(net.forward(x, training=True), y)
