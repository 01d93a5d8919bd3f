"""Finite-difference oracle shared by the loss tests and the acceptance suite."""

import numpy as np
from scipy import ndimage

from fewbeam.field import DepthField
from fewbeam.geometry import CameraIntrinsics, PoseSE3
from fewbeam.losses import LossConfig, LossInputs, total_loss_and_gradient

SIZE = 16


def random_problem(seed: int):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(14.0, 14.0, 7.5, 7.5, SIZE, SIZE)

    def img():
        x = ndimage.gaussian_filter(rng.random((SIZE, SIZE, 3)), (1, 1, 0))
        return np.clip(2 * x - 0.5, 0, 1)

    target, sources = img(), [img(), img()]
    poses = [PoseSE3.from_rotvec(rng.normal(0, 0.02, 3), rng.normal(0, 0.3, 3)) for _ in range(2)]
    lidar = np.where(rng.random((SIZE, SIZE)) < 0.2, rng.uniform(3, 10, (SIZE, SIZE)), 0.0)
    return rng, LossInputs(target, sources, poses, K, lidar)


def gradient_error(seed: int, variant: str, levels: int, n_coords: int = 40, h: float = 1e-4):
    """Relative error ||g - g_fd|| / ||g_fd|| over sampled parameters.

    Coordinates whose +-h perturbation changes a discrete choice of the
    objective (bilinear cell, min-over-sources winner, masks, L1 sign) sit
    on a kink where the central difference is not a derivative; they are
    skipped. Returns (error, number of coordinates used).
    """
    rng, inputs = random_problem(seed)
    field = DepthField((SIZE, SIZE), levels=levels, init_depth=6.0, learn_translation_scale=True)
    x = field.get_flat() + rng.normal(0, 0.3, field.size)
    field.set_flat(x)
    cfg = LossConfig(lidar_variant=variant, multiscale_levels=levels, smooth_weight=0.1, automask=True)
    _, g, _ = total_loss_and_gradient(field, inputs, cfg)
    idx = np.append(rng.choice(field.size - 1, n_coords, replace=False), field.size - 1)
    ga, gf = [], []
    for i in idx:
        sig = []
        vals = []
        for step in (h, -h):
            xp = x.copy()
            xp[i] += step
            field.set_flat(xp)
            rec = []
            vals.append(total_loss_and_gradient(field, inputs, cfg, want_grad=False, record=rec)[0])
            sig.append(rec)
        field.set_flat(x)
        same = all(np.array_equal(a, b) for sa, sb in zip(*sig) for a, b in zip(sa, sb))
        if same:
            ga.append(g[i])
            gf.append((vals[0] - vals[1]) / (2 * h))
    ga, gf = np.array(ga), np.array(gf)
    return float(np.linalg.norm(ga - gf) / np.linalg.norm(gf)), len(ga)
