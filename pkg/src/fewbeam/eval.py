"""Depth evaluation: Eigen metrics, GT rescaling and the catastrophic distance rate.

The catastrophic distance rate (CDR) counts how often the mean signed
relative depth error on a front-vehicle instance exceeds a threshold, so
it isolates gross over-estimation (objects pushed towards infinity) from
ordinary depth noise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from skimage import measure

DEFAULT_CAP = 80.0
DELTA_BASE = 1.25

# instance filtering constants
CENTRAL_BAND_FRACTION = 0.2
MIN_MASK_PIXELS = 20
DILATION_KERNEL = 10
DILATION_ITERATIONS = 4
DP_EPSILON_FRACTION = 0.02
CONVEXITY_SLACK = 0.05


# ---------------------------------------------------------------------------
# Eigen metrics


@dataclass
class EvalReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float
    count: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _valid_pixels(pred, gt, cap):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in resolution")
    valid = (gt > 0) & (gt <= cap)
    if not valid.any():
        raise ValueError("no valid ground-truth pixels")
    d, g = pred[valid], gt[valid]
    if np.any(~(d > 0)) or not np.all(np.isfinite(d)):
        raise ValueError("predictions must be positive and finite on evaluated pixels")
    return d, g


def eigen_metrics(pred, gt, cap: float = DEFAULT_CAP) -> EvalReport:
    """Standard monocular depth metrics over pixels with ``0 < gt <= cap``."""
    d, g = _valid_pixels(pred, gt, cap)
    ratio = np.maximum(d / g, g / d)
    diff = d - g
    log_diff = np.log(d) - np.log(g)
    return EvalReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean(log_diff * log_diff))),
        a1=float(np.mean(ratio < DELTA_BASE)),
        a2=float(np.mean(ratio < DELTA_BASE**2)),
        a3=float(np.mean(ratio < DELTA_BASE**3)),
        count=int(d.size),
    )


def average_reports(reports) -> EvalReport:
    """Per-frame average (each frame weighted equally); ``count`` is summed."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    keys = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return EvalReport(**means, count=int(sum(r.count for r in reports)))


def rescale_to_gt(pred, gt, mode: str = "median", cap: float = DEFAULT_CAP) -> np.ndarray:
    """Scale ``pred`` so its median (or mean) matches the GT's on valid pixels."""
    if mode not in ("median", "mean"):
        raise ValueError("mode must be 'median' or 'mean'")
    d, g = _valid_pixels(pred, gt, cap)
    stat = np.median if mode == "median" else np.mean
    return np.asarray(pred, dtype=np.float64) * (stat(g) / stat(d))


# ---------------------------------------------------------------------------
# instance masks


@dataclass
class InstanceMask:
    mask: np.ndarray
    instance_id: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("instance mask must be 2-D")


def douglas_peucker(points: np.ndarray, epsilon: float) -> np.ndarray:
    """Simplify an open polyline, keeping both endpoints."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return pts.copy()
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        a, b = pts[i], pts[j]
        seg = b - a
        length = np.hypot(*seg)
        rel = pts[i + 1 : j] - a
        if length < 1e-12:
            dist = np.hypot(rel[:, 0], rel[:, 1])
        else:
            dist = np.abs(seg[0] * rel[:, 1] - seg[1] * rel[:, 0]) / length
        k = int(np.argmax(dist))
        if dist[k] > epsilon:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return pts[keep]


def simplify_closed(contour: np.ndarray, epsilon: float) -> np.ndarray:
    """Douglas-Peucker on a closed contour, split at the point farthest from the start."""
    pts = np.asarray(contour, dtype=np.float64)
    if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) < 4:
        return pts
    far = int(np.argmax(np.hypot(*(pts - pts[0]).T)))
    first = douglas_peucker(pts[: far + 1], epsilon)
    second = douglas_peucker(np.vstack([pts[far:], pts[:1]]), epsilon)
    return np.vstack([first[:-1], second[:-1]])


def is_convex(polygon: np.ndarray, slack: float = CONVEXITY_SLACK) -> bool:
    """Turn direction test with tolerance.

    Cross products of consecutive edges must share the polygon's
    orientation, except for ones whose magnitude is within ``slack`` of the
    largest cross product.
    """
    P = np.asarray(polygon, dtype=np.float64)
    if len(P) < 3:
        return False
    e1 = np.roll(P, -1, axis=0) - P
    e2 = np.roll(P, -2, axis=0) - np.roll(P, -1, axis=0)
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    scale = np.abs(cross).max()
    if scale == 0:
        return False
    orient = np.sign(cross.sum())
    return bool(np.all(orient * cross >= -slack * scale))


def mask_polygon(mask: np.ndarray) -> np.ndarray:
    """Simplified outer contour of a binary mask, (row, col) vertices."""
    padded = np.pad(mask.astype(np.float64), 1)
    contours = measure.find_contours(padded, 0.5)
    if not contours:
        return np.zeros((0, 2))
    outer = max(contours, key=len) - 1.0
    perimeter = np.hypot(*np.diff(outer, axis=0).T).sum()
    return simplify_closed(outer, DP_EPSILON_FRACTION * perimeter)


@dataclass
class FilterResult:
    kept: list
    stage_counts: dict


def filter_instance_masks(masks, image_width: int) -> FilterResult:
    """Keep unoccluded vehicles in front of the camera.

    Stages: centroid inside the central band, at least 20 pixels, then
    dilation smoothing and an approximate-convexity test on the
    simplified outline.
    """
    counts = {"input": 0, "central": 0, "size": 0, "convex": 0}
    lo = image_width * (0.5 - CENTRAL_BAND_FRACTION / 2)
    hi = image_width * (0.5 + CENTRAL_BAND_FRACTION / 2)
    structure = np.ones((DILATION_KERNEL, DILATION_KERNEL), dtype=bool)
    kept = []
    for m in masks:
        counts["input"] += 1
        rows, cols = np.nonzero(m.mask)
        if cols.size == 0:
            continue
        centroid_u = cols.mean() + 0.5
        if not lo <= centroid_u <= hi:
            continue
        counts["central"] += 1
        if cols.size < MIN_MASK_PIXELS:
            continue
        counts["size"] += 1
        pad = DILATION_KERNEL * DILATION_ITERATIONS
        smooth = ndimage.binary_dilation(np.pad(m.mask, pad), structure=structure, iterations=DILATION_ITERATIONS)
        if not is_convex(mask_polygon(smooth)):
            continue
        counts["convex"] += 1
        kept.append(m)
    return FilterResult(kept, counts)


# ---------------------------------------------------------------------------
# catastrophic distance rate


def instance_signed_error(pred, gt, mask: InstanceMask) -> float | None:
    """Mean of (pred - gt) / gt over the mask's GT pixels; None when there are none."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = mask.mask if isinstance(mask, InstanceMask) else np.asarray(mask, dtype=bool)
    if not (pred.shape == gt.shape == m.shape):
        raise ValueError("prediction, ground truth and mask differ in resolution")
    v = m & (gt > 0)
    if not v.any():
        return None
    return float(np.mean((pred[v] - gt[v]) / gt[v]))


def cdr(errors, tau: float) -> float:
    """Fraction of instances whose signed error exceeds ``tau``."""
    e = np.asarray(list(errors), dtype=np.float64)
    if e.size == 0:
        raise ValueError("CDR needs at least one instance")
    return float(np.mean(e > tau))


def cdr_curve(errors, taus) -> np.ndarray:
    e = np.asarray(list(errors), dtype=np.float64)
    if e.size == 0:
        raise ValueError("CDR needs at least one instance")
    return np.array([np.mean(e > t) for t in taus], dtype=np.float64)


@dataclass
class CDRReport:
    instance_ids: list
    errors: list
    taus: list
    cdr: list
    stage_counts: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write_instances_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "signed_error"])
            for k, e in zip(self.instance_ids, self.errors):
                w.writerow([k, repr(float(e))])

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "cdr"])
            for t, c in zip(self.taus, self.cdr):
                w.writerow([repr(float(t)), repr(float(c))])


def cdr_report(frames, taus, image_width: int | None = None) -> CDRReport:
    """CDR over ``frames = [(pred, gt, masks), ...]``.

    Masks pass through :func:`filter_instance_masks` first; instances with
    no GT pixel are listed in ``skipped``. ``instance_ids`` are
    ``"<frame>:<id>"`` strings.
    """
    ids, errs, skipped = [], [], []
    totals: dict = {}
    for f, (pred, gt, masks) in enumerate(frames):
        width = image_width or np.asarray(gt).shape[1]
        res = filter_instance_masks(masks, width)
        for k, v in res.stage_counts.items():
            totals[k] = totals.get(k, 0) + v
        for m in res.kept:
            e = instance_signed_error(pred, gt, m)
            tag = f"{f}:{m.instance_id}"
            if e is None:
                skipped.append(tag)
            else:
                ids.append(tag)
                errs.append(e)
    taus = [float(t) for t in taus]
    curve = cdr_curve(errs, taus).tolist() if errs else [float("nan")] * len(taus)
    return CDRReport(ids, errs, taus, curve, totals, skipped)
