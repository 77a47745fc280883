"""Monocular depth adaptation and scene reconstruction at desk scale.

Subpackages cover a minimal autodiff engine, pinhole warping, the
self-supervised losses, a gated low-rank adaptation toy network, affine
depth alignment, the joint reconstruction optimizer, TSDF fusion, the
evaluation metric suite, a synthetic-scene oracle, and the CLI.
"""

from .config import RunConfig
from .fusion import PointCloud, TsdfVolume
from .geometry import DepthMap, Image, Intrinsics, PoseSE3
from .losses import LossWeights

__version__ = "0.1.0"

__all__ = [
    "DepthMap",
    "Image",
    "Intrinsics",
    "LossWeights",
    "PointCloud",
    "PoseSE3",
    "RunConfig",
    "TsdfVolume",
    "__version__",
]
