"""Optimisable depth parameterisation.

Depth is decoded as ``1 / (a * sigmoid(z) + b)`` so it always stays inside
``[min_depth, max_depth]``. With several levels, ``z`` is the sum of a
full-resolution grid and bilinearly upsampled coarser grids (1:2, 1:4, 1:8);
the depth "at level l" uses only the grids of level l and coarser.
"""

from __future__ import annotations

import numpy as np


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation matrix, end points aligned."""
    M = np.zeros((n_out, n_in))
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    pos = np.arange(n_out) * (n_in - 1) / max(n_out - 1, 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    f = pos - i0
    M[np.arange(n_out), i0] = 1.0 - f
    M[np.arange(n_out), i0 + 1] = f
    return M


def level_shape(shape, level: int) -> tuple[int, int]:
    H, W = shape
    s = 2**level
    return (-(-H // s), -(-W // s))


class DepthField:
    def __init__(
        self,
        shape,
        levels: int = 1,
        init_depth: float = 20.0,
        min_depth: float = 0.1,
        max_depth: float = 100.0,
        learn_translation_scale: bool = False,
    ):
        if not 1 <= levels <= 4:
            raise ValueError("levels must be in 1..4")
        if not min_depth < init_depth < max_depth:
            raise ValueError("init_depth outside the decodable range")
        self.shape = tuple(shape)
        self.levels = levels
        self.min_depth = min_depth
        self.max_depth = max_depth
        self.b = 1.0 / max_depth
        self.a = 1.0 / min_depth - 1.0 / max_depth
        self.learn_translation_scale = learn_translation_scale
        self.log_translation_scale = 0.0
        self.grids = [np.zeros(level_shape(self.shape, l)) for l in range(levels)]
        self.grids[-1][:] = self.encode(init_depth)
        self._up = [None] + [
            (_interp_matrix(self.shape[0], g.shape[0]), _interp_matrix(self.shape[1], g.shape[1])) for g in self.grids[1:]
        ]

    # -- parameter vector -------------------------------------------------
    @property
    def size(self) -> int:
        return sum(g.size for g in self.grids) + int(self.learn_translation_scale)

    def get_flat(self) -> np.ndarray:
        parts = [g.ravel() for g in self.grids]
        if self.learn_translation_scale:
            parts.append(np.array([self.log_translation_scale]))
        return np.concatenate(parts)

    def set_flat(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.size,):
            raise ValueError("parameter vector has the wrong size")
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite depth parameters")
        k = 0
        for g in self.grids:
            g[:] = x[k : k + g.size].reshape(g.shape)
            k += g.size
        if self.learn_translation_scale:
            self.log_translation_scale = float(x[k])

    def copy(self) -> "DepthField":
        other = DepthField.__new__(DepthField)
        other.__dict__.update(self.__dict__)
        other.grids = [g.copy() for g in self.grids]
        return other

    # -- decoding ---------------------------------------------------------
    def encode(self, depth):
        s = (1.0 / np.asarray(depth, dtype=np.float64) - self.b) / self.a
        return np.log(s) - np.log1p(-s)

    def decode(self, z):
        return 1.0 / (self.a / (1.0 + np.exp(-z)) + self.b)

    def decode_derivative(self, z, depth=None):
        sig = 1.0 / (1.0 + np.exp(-z))
        if depth is None:
            depth = 1.0 / (self.a * sig + self.b)
        return -depth * depth * self.a * sig * (1.0 - sig)

    def upsample(self, level: int, grid):
        if level == 0:
            return grid
        My, Mx = self._up[level]
        return My @ grid @ Mx.T

    def upsample_adjoint(self, level: int, g):
        if level == 0:
            return g
        My, Mx = self._up[level]
        return My.T @ g @ Mx

    def logits(self, level: int = 0) -> np.ndarray:
        z = np.zeros(self.shape)
        for k in range(level, self.levels):
            z = z + self.upsample(k, self.grids[k])
        return z

    def depth(self, level: int = 0) -> np.ndarray:
        return self.decode(self.logits(level))

    @property
    def translation_scale(self) -> float:
        return float(np.exp(self.log_translation_scale))

    def flatten_gradient(self, level_grads, scale_grad: float = 0.0) -> np.ndarray:
        """Pack gradients w.r.t. full-resolution logits of each level.

        ``level_grads[l]`` is dLoss/dz_l at full resolution; grid ``k``
        receives the adjoint upsampling of every level ``l <= k``.
        """
        parts = []
        for k in range(self.levels):
            acc = np.zeros(self.shape)
            for l in range(k + 1):
                if level_grads[l] is not None:
                    acc = acc + level_grads[l]
            parts.append(self.upsample_adjoint(k, acc).ravel())
        if self.learn_translation_scale:
            parts.append(np.array([scale_grad]))
        return np.concatenate(parts)
