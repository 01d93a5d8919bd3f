"""Self-supervised depth from a monocular camera and a few-beam LiDAR.

Submodules: ``geometry`` (camera model and warping), ``lidar`` (beam
handling), ``losses`` (objectives and gradients), ``pose`` (PnP),
``optimizer`` (direct depth fitting), ``synthetic`` (renderer and LiDAR
simulator), ``eval`` (metrics), ``io`` and ``cli``.
"""

from .geometry import CameraIntrinsics, PoseSE3
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "PoseSE3", "BACKEND", "__version__"]
