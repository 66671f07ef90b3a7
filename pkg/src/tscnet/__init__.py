"""Residual networks with self-adaptive time stepping, plus ODE and stability tooling."""

from .controllers import ControllerConfig, export_step_sizes
from .resnet import Network, NetworkSpec, StageSpec, bake, build_network, preset, toy_spec

__all__ = [
    "ControllerConfig",
    "Network",
    "NetworkSpec",
    "StageSpec",
    "bake",
    "build_network",
    "export_step_sizes",
    "preset",
    "toy_spec",
]
__version__ = "0.1.0"
