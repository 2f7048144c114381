"""Diffeomorphic registration and atlas estimation with coarse-to-fine Haar optimization."""

__version__ = "0.1.0"

from .geodesic import ControlPointGrid, KernelConfig, deform, integrate_flow, shoot  # noqa: E402
from .haar import WaveletPyramid, fwt, iwt  # noqa: E402
from .optimizer import OptimizerConfig, estimate_atlas, register, run  # noqa: E402

__all__ = [
    "ControlPointGrid", "KernelConfig", "OptimizerConfig", "WaveletPyramid",
    "deform", "estimate_atlas", "fwt", "integrate_flow", "iwt", "register", "run", "shoot",
]
