"""JSON checkpoint container for networks, controllers and baked step sizes.

Schema (version 1)::

    {
      "format": "tscnet-checkpoint",
      "version": 1,
      "spec": {...},                 # NetworkSpec.to_dict()
      "controller": {...},           # ControllerConfig.to_dict()
      "baked": false,
      "parameters": {name: {"shape": [...], "data": [...]}},
      "buffers": {name: {"shape": [...], "data": [...]}},
      "step_sizes": null | [[[float, ...], ...], ...],   # per stage, per block
      "metadata": {...}
    }

Parameter names are those of :meth:`Network.named_parameters`. Floats are
written with ``repr`` precision, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .controllers import BakedController, ControllerConfig
from .resnet import Network, NetworkSpec, build_network

FORMAT = "tscnet-checkpoint"
VERSION = 1


def _pack(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unpack(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def to_dict(network: Network, metadata: dict | None = None) -> dict:
    baked = network.baked
    return {
        "format": FORMAT,
        "version": VERSION,
        "spec": network.spec.to_dict(),
        "controller": network.controller_config.to_dict(),
        "baked": baked,
        "parameters": {n: _pack(t.data) for n, t in network.named_parameters()},
        "buffers": {n: _pack(b) for n, b in network.named_buffers()},
        "step_sizes": [[s.tolist() for s in c.steps] for c in network.controllers] if baked else None,
        "metadata": metadata or {},
    }


def from_dict(d: dict) -> Network:
    if d.get("format") != FORMAT:
        raise ValueError("not a tscnet checkpoint")
    if d.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    net = build_network(NetworkSpec.from_dict(d["spec"]), ControllerConfig(**d["controller"]))
    if d["baked"]:
        net.controllers = [BakedController(stage) for stage in d["step_sizes"]]
    params = dict(net.named_parameters())
    if set(params) != set(d["parameters"]):
        missing = set(params) ^ set(d["parameters"])
        raise ValueError(f"checkpoint parameters do not match the network: {sorted(missing)[:5]}")
    for name, t in params.items():
        arr = _unpack(d["parameters"][name])
        if arr.shape != t.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
        t.data = arr
    for name, buf in net.named_buffers():
        buf[...] = _unpack(d["buffers"][name])
    return net


def save(network: Network, path: str | Path, metadata: dict | None = None) -> None:
    Path(path).write_text(json.dumps(to_dict(network, metadata)))


def load(path: str | Path) -> Network:
    return from_dict(json.loads(Path(path).read_text()))


def metadata(path: str | Path) -> dict:
    return json.loads(Path(path).read_text()).get("metadata", {})
