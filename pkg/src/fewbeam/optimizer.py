"""Direct per-pixel depth optimisation under the self-supervision objectives.

A :class:`~fewbeam.field.DepthField` takes the place of a depth network:
its parameters are updated with Adam against
:func:`~fewbeam.losses.total_loss_and_gradient`. Which supervision signal is
active (photometric only, or photometric plus one of the LiDAR variants) is
the experimental knob.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .field import DepthField
from .geometry import CameraIntrinsics, PoseSE3
from .lidar import dilate_sparse_depth
from .losses import LossConfig, LossInputs, total_loss_and_gradient

logger = logging.getLogger(__name__)

SUPERVISIONS = ("photometric", "naive", "masked", "hinted")
POSE_SOURCES = ("given", "pnp")


class OptimizationDiverged(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class OptimizeConfig:
    learning_rate: float = 1e-4
    steps: int = 2000
    multiscale_levels: int = 1
    pose_source: str = "given"
    supervision: str = "masked"
    pose_scale_divisor: float = 1.0
    alpha: float = 0.85
    smooth_weight: float = 1e-3
    lidar_weight: float = 1.0
    automask: bool = True
    init_depth: float = 20.0
    min_depth: float = 0.1
    max_depth: float = 100.0
    halve_lr_at_midpoint: bool = True
    learn_translation_scale: bool = False
    dilate_kernel: int = 0
    dilate_iterations: int = 0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    blur_sigmas: tuple = ()

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.supervision not in SUPERVISIONS:
            raise ValueError(f"supervision must be one of {SUPERVISIONS}")
        if self.pose_source not in POSE_SOURCES:
            raise ValueError(f"pose_source must be one of {POSE_SOURCES}")
        if not self.pose_scale_divisor > 0:
            raise ValueError("pose_scale_divisor must be positive")
        self.blur_sigmas = tuple(float(b) for b in self.blur_sigmas)
        if any(not b > 0 for b in self.blur_sigmas):
            raise ValueError("blur sigmas must be positive")

    def loss_config(self) -> LossConfig:
        variant = "none" if self.supervision == "photometric" else self.supervision
        return LossConfig(self.alpha, self.smooth_weight, self.lidar_weight, variant, self.multiscale_levels, self.automask)


@dataclass
class LossTrace:
    records: list = field(default_factory=list)

    COLUMNS = ("step", "total", "photometric", "lidar", "smoothness", "learning_rate", "translation_scale")

    def append(self, step, total, terms, lr, scale=1.0):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("trace steps must increase")
        self.records.append(
            {"step": step, "total": total, **{k: terms[k] for k in ("photometric", "lidar", "smoothness")}, "learning_rate": lr, "translation_scale": scale}
        )

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def __len__(self):
        return len(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r["step"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])


@dataclass
class OptimizeResult:
    depth: np.ndarray
    trace: LossTrace
    field: DepthField
    poses: list
    depth_multiplier: float = 1.0


def apply_pose_scaling(poses, alpha_pose: float):
    """Divide every translation by ``alpha_pose``.

    Returns the scaled poses and the factor the optimised depth must be
    multiplied by to return to the original units.
    """
    if not alpha_pose > 0:
        raise ValueError("alpha_pose must be positive")
    return [PoseSE3(p.R, p.r / alpha_pose) for p in poses], float(alpha_pose)


def estimate_poses_pnp(I_t, sources, H_t, K: CameraIntrinsics, seed: int = 0):
    """Metric target-to-source poses from keypoints placed on LiDAR pixels."""
    from .pose import attach_depth, detect_and_match, pnp_ransac

    lidar_mask = np.asarray(H_t) > 0
    poses = []
    for i, I_s in enumerate(sources):
        matches = detect_and_match(I_t, I_s, mask=lidar_mask)
        corr = attach_depth(matches, H_t)
        res = pnp_ransac(corr, K, seed=seed + i)
        poses.append(res.pose)
    return poses


def blur_stage(step: int, steps: int, sigmas) -> int:
    """Index into ``sigmas`` active at ``step``; ``len(sigmas)`` means unblurred.

    The run is split into ``len(sigmas) + 1`` equal stages.
    """
    n = len(sigmas)
    if n == 0 or steps == 0:
        return n
    return min(step * (n + 1) // steps, n)


def _blurred(img, sigma):
    img = np.asarray(img, dtype=np.float64)
    sig = (sigma, sigma) + (0,) * (img.ndim - 2)
    return ndimage.gaussian_filter(img, sig, mode="nearest")


def _adam(config: OptimizeConfig):
    b1, b2, eps = config.beta1, config.beta2, 1e-8
    state = {"m": None, "v": None, "t": 0}

    def step(x, g, lr):
        if state["m"] is None:
            state["m"] = np.zeros_like(x)
            state["v"] = np.zeros_like(x)
        state["t"] += 1
        t = state["t"]
        state["m"] = b1 * state["m"] + (1 - b1) * g
        state["v"] = b2 * state["v"] + (1 - b2) * g * g
        mhat = state["m"] / (1 - b1**t)
        vhat = state["v"] / (1 - b2**t)
        return x - lr * mhat / (np.sqrt(vhat) + eps)

    return step


def optimize_depth(I_t, sources, H_t, poses, config: OptimizeConfig, K: CameraIntrinsics, callback=None) -> OptimizeResult:
    """Fit a depth map to the target frame by gradient descent.

    ``H_t`` may be ``None`` for photometric-only runs. ``poses`` map the
    target camera into each source camera and are ignored when
    ``config.pose_source == "pnp"``.
    """
    if len(sources) == 0:
        raise ValueError("at least one source frame is required")
    if config.pose_source == "pnp":
        if H_t is None:
            raise ValueError("PnP poses need a sparse depth image")
        poses = estimate_poses_pnp(I_t, sources, H_t, K, config.seed)
    poses = list(poses)
    poses, multiplier = apply_pose_scaling(poses, config.pose_scale_divisor)
    lidar = None
    if config.supervision != "photometric":
        if H_t is None:
            raise ValueError(f"{config.supervision} supervision needs a sparse depth image")
        lidar = np.asarray(H_t, dtype=np.float64) / multiplier
        if config.dilate_iterations > 0:
            lidar = dilate_sparse_depth(lidar, config.dilate_kernel, config.dilate_iterations)
    sharp = LossInputs(I_t, list(sources), poses, K, lidar)
    stages = {}

    def inputs_at(step):
        k = blur_stage(step, config.steps, config.blur_sigmas)
        if k == len(config.blur_sigmas):
            return sharp
        if k not in stages:
            stages.clear()
            sig = config.blur_sigmas[k]
            stages[k] = LossInputs(_blurred(I_t, sig), [_blurred(src, sig) for src in sources], poses, K, lidar)
        return stages[k]

    loss_cfg = config.loss_config()
    state = DepthField(
        K.shape,
        levels=config.multiscale_levels,
        init_depth=config.init_depth / multiplier,
        min_depth=config.min_depth,
        max_depth=config.max_depth,
        learn_translation_scale=config.learn_translation_scale,
    )
    trace = LossTrace()
    adam = _adam(config)
    x = state.get_flat()
    for step in range(config.steps + 1):
        last = step == config.steps
        loss, grad, terms = total_loss_and_gradient(state, inputs_at(step), loss_cfg, want_grad=not last)
        lr = config.learning_rate
        if config.halve_lr_at_midpoint and step >= config.steps // 2:
            lr = lr / 2
        trace.append(step, loss, terms, lr, state.translation_scale)
        if not np.isfinite(loss) or (grad is not None and not np.all(np.isfinite(grad))):
            raise OptimizationDiverged(f"non-finite loss at step {step}", trace)
        if callback is not None:
            callback(step, state, loss, terms)
        if last:
            break
        x = adam(x, grad, lr)
        state.set_flat(x)
    scaled = [p.with_translation(p.r * state.translation_scale) for p in poses]
    return OptimizeResult(state.depth(0) * multiplier, trace, state, scaled, multiplier)


# ---------------------------------------------------------------------------
# co-moving object scenario


@dataclass
class ScenarioConfig:
    """Co-moving box scenario: the box travels with the camera, so it shows no parallax."""

    seed: int = 0
    height: int = 96
    width: int = 320
    ego_translation: tuple = (1.0, 0.0, 0.0)
    with_box: bool = True
    steps: int = 300
    learning_rate: float = 0.02
    multiscale_levels: int = 4
    automask: bool = True
    blur_sigmas: tuple = ()
    smooth_weight: float = 1e-3
    supervisions: tuple = ("photometric", "masked")


@dataclass
class ScenarioResult:
    gt_depth: np.ndarray
    box_mask: np.ndarray
    lidar: np.ndarray
    depth_photometric: np.ndarray
    depth_masked: np.ndarray
    r_box_photometric: float | None
    r_box_masked: float | None

    @property
    def lidar_pixels_on_box(self) -> int:
        return int(((self.lidar > 0) & self.box_mask).sum())


def run_infinite_depth_scenario(config: ScenarioConfig | None = None) -> ScenarioResult:
    """Photometric-only and masked-LiDAR fits of the same co-moving-box triplet.

    Poses are the renderer's metric ground truth. ``r_box_*`` is the signed
    relative depth error on the box mask (None without a box).
    """
    from . import synthetic as sy
    from .eval import instance_signed_error

    config = config or ScenarioConfig()
    K = sy.default_intrinsics(config.height, config.width)
    ego = sy.EgoMotion(tuple(config.ego_translation))
    scene = sy.co_moving_scene(config.seed, velocity=ego.translation, with_box=config.with_box)
    t = sy.make_triplet(scene, K, ego, sy.four_beam_spec(), seed=config.seed)
    box = t.box_mask(0) if config.with_box else np.zeros(K.shape, dtype=bool)
    depths = {}
    for supervision in config.supervisions:
        cfg = OptimizeConfig(
            smooth_weight=config.smooth_weight,
            learning_rate=config.learning_rate,
            steps=config.steps,
            multiscale_levels=config.multiscale_levels,
            supervision=supervision,
            automask=config.automask,
            blur_sigmas=config.blur_sigmas,
            seed=config.seed,
        )
        depths[supervision] = optimize_depth(t.target, t.sources, t.lidar, t.poses, cfg, K).depth
    r = {k: instance_signed_error(d, t.depth, box) if box.any() else None for k, d in depths.items()}
    return ScenarioResult(t.depth, box, t.lidar, depths.get("photometric"), depths.get("masked"), r.get("photometric"), r.get("masked"))
