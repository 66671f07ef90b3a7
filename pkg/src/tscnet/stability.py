"""Stability quantities for Euler steps and step-scaled residual networks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .resnet import Block, Network


def linear_stability_factor(lam: float, h: float) -> float:
    """Per-step amplification ``|1 + h*lam|`` of forward Euler on ``y' = lam*y``."""
    return abs(1.0 + h * lam)


@dataclass
class SpectralEstimate:
    value: float
    iterations: int
    residual: float


def spectral_norm(
    w,
    max_iters: int = 10000,
    tol: float = 1e-13,
    seed: int = 0,
) -> SpectralEstimate:
    """Largest singular value by power iteration on ``W^T W``.

    Iteration stops once successive estimates differ by at most ``tol``
    relative to the current estimate. ``residual`` is that final difference.
    """
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    if w.size == 0:
        raise ValueError("spectral_norm of an empty matrix")
    if not np.any(w):
        return SpectralEstimate(0.0, 0, 0.0)
    v = np.random.default_rng(seed).normal(size=w.shape[1])
    v /= np.linalg.norm(v)
    est, diff = 0.0, np.inf
    for it in range(1, max_iters + 1):
        u = w @ v
        z = w.T @ u
        nz = np.linalg.norm(z)
        if nz == 0.0:
            # start vector landed in the null space; reseed deterministically
            v = np.random.default_rng(seed + it).normal(size=w.shape[1])
            v /= np.linalg.norm(v)
            continue
        new = np.sqrt(nz)  # ||W^T W v|| -> sigma_max^2 for unit v at convergence
        v = z / nz
        diff = abs(new - est)
        est = new
        if diff <= tol * est:
            break
    value = float(np.linalg.norm(w @ v))
    return SpectralEstimate(value, it, float(diff))


def frobenius_norm(w) -> float:
    return float(np.linalg.norm(np.asarray(w, dtype=np.float64)))


def prop1_bound(weight_norms: Sequence[float], steps: Sequence, epsilon: float) -> float:
    """``epsilon * prod(1 + sigma_j * dt_j)``.

    A step given as a channel vector is scalarised by its maximum entry,
    which dominates the channel-wise product.
    """
    if len(weight_norms) != len(steps):
        raise ValueError("need one step per weight norm")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    bound = float(epsilon)
    for sigma, dt in zip(weight_norms, steps):
        dt = float(np.max(dt))
        if sigma < 0 or dt < 0:
            raise ValueError("weight norms and step sizes must be non-negative")
        bound *= 1.0 + sigma * dt
    return bound


def conv_operator_matrix(weight, in_shape: tuple[int, int, int], stride: int = 1, pad: int = 1) -> np.ndarray:
    """Dense matrix of the linear map ``x -> conv2d(x, weight)`` on (C, H, W) inputs."""
    c, h, w = in_shape
    n = c * h * w
    basis = np.eye(n).reshape(n, c, h, w)
    with ad.no_grad():
        out = ad.conv2d(basis, weight, stride, pad).data
    return out.reshape(n, -1).T


def block_operator_norm(block: Block, in_shape: tuple[int, int, int]) -> float:
    if block.kind != "plain":
        raise ValueError("operator norms are only defined here for plain blocks")
    return spectral_norm(conv_operator_matrix(block.convs[0].data, in_shape, block.stride, 1)).value


@dataclass
class PerturbationReport:
    epsilon: float
    trials: int
    amplification_max: float
    amplification_mean: float
    bound: float
    slack: float
    sigmas: list[float] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _require_plain(network: Network) -> None:
    if not network.spec.plain:
        raise ValueError(
            "perturbation bound is only established for plain y + dt*ReLU(W y) blocks; "
            "batch-normalised blocks are not covered"
        )
    if any(not b.identity_shortcut for b in network.blocks):
        raise ValueError("perturbation bound requires identity shortcuts (no projection blocks)")


def _blocks_forward(network: Network, y: np.ndarray, steps: Sequence[np.ndarray]) -> np.ndarray:
    with ad.no_grad():
        t = ad.Tensor(y)
        for block, dt in zip(network.blocks, steps):
            t = ad.add(t, ad.channel_mul(block.branch(t), dt))
    return t.data


def sphere_sample(rng: np.random.Generator, n: int, shape: tuple[int, ...], radius: float) -> np.ndarray:
    """``n`` points drawn uniformly on the sphere of ``radius`` in R^prod(shape)."""
    g = rng.normal(size=(n, int(np.prod(shape))))
    g *= radius / np.linalg.norm(g, axis=1, keepdims=True)
    return g.reshape((n,) + tuple(shape))


def measure_amplification(
    network: Network,
    y0,
    epsilon: float,
    trials: int = 1000,
    seed: int = 0,
) -> PerturbationReport:
    """Measure ``||y_D(y0 + delta) - y_D(y0)||`` over the residual blocks.

    ``y0`` is a single (C, H, W) block-stack input; each trial draws
    ``delta`` uniformly on the sphere of radius ``epsilon``. The bound uses
    the exact operator norm of every block's convolution.
    """
    _require_plain(network)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    y0 = np.asarray(y0, dtype=np.float64)
    with ad.no_grad():
        steps = [dt.data for stage in network.step_sizes() for dt in stage]
    shape = y0.shape
    sigmas = [block_operator_norm(b, shape) for b in network.blocks]
    dt_max = [float(np.max(s)) for s in steps]
    bound = prop1_bound(sigmas, dt_max, epsilon)
    rng = np.random.default_rng(seed)
    delta = sphere_sample(rng, trials, shape, epsilon)
    base = _blocks_forward(network, y0[None], steps)
    pert = _blocks_forward(network, y0[None] + delta, steps)
    amp = np.linalg.norm((pert - base).reshape(trials, -1), axis=1)
    return PerturbationReport(
        epsilon=float(epsilon),
        trials=trials,
        amplification_max=float(amp.max()),
        amplification_mean=float(amp.mean()),
        bound=bound,
        slack=bound - float(amp.max()),
        sigmas=sigmas,
        steps=dt_max,
    )


def finite_difference_jacobian(rhs: Callable, y, step: float = 1e-6, t: float = 0.0) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    n = y.size
    jac = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        fp = np.asarray(rhs(t, y + e), dtype=np.float64)
        fm = np.asarray(rhs(t, y - e), dtype=np.float64)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError("non-finite right-hand side while building the Jacobian")
        jac[:, i] = (fp - fm) / (2 * step)
    return jac


def spectral_radius_gelfand(
    a: np.ndarray,
    iters: int = 200,
    window: int = 10,
    probes: int = 8,
    seed: int = 0,
) -> float:
    """Spectral radius from ``||A^k v|| / ||A^(k-1) v||`` ratios.

    The last ``window`` log-ratios are averaged (a geometric mean), which
    damps the oscillation a complex dominant pair causes; the result is the
    maximum over ``probes`` random start vectors.
    """
    rng = np.random.default_rng(seed)
    n = a.shape[0]
    best = 0.0
    for _ in range(probes):
        v = rng.normal(size=n)
        v /= np.linalg.norm(v)
        logs = []
        for _ in range(iters):
            v = a @ v
            nv = np.linalg.norm(v)
            if nv == 0.0:
                logs = [-np.inf]
                break
            logs.append(np.log(nv))
            v /= nv
        est = float(np.exp(np.mean(logs[-window:])))
        best = max(best, est)
    return best


def euler_stability_check(
    rhs: Callable,
    y,
    h: float,
    probes: int = 8,
    iters: int = 200,
    window: int = 10,
    fd_step: float = 1e-6,
    seed: int = 0,
) -> float:
    """Estimate ``max_i |1 + h*lambda_i(J)|`` for the Jacobian of ``rhs`` at ``y``."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.size > 256:
        raise ValueError("state dimension above 256 is outside the supported range")
    jac = finite_difference_jacobian(rhs, y, fd_step)
    return spectral_radius_gelfand(np.eye(y.size) + h * jac, iters, window, probes, seed)
