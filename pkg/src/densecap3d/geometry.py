"""Axis-aligned 3D boxes: IoU, NMS, KNN topology, orientation bins, cameras."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from densecap3d.errors import ArgumentError, PlacementError, ValidationError, VisibilityError

NUM_ORIENTATION_BINS = 6
CAMERA_HEIGHT = 1.70
VIEW_RADIUS = 0.99
MAX_VIEW_ATTEMPTS = 64


@dataclass(frozen=True)
class Box3:
    center: tuple[float, float, float]
    lengths: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "lengths", tuple(float(v) for v in self.lengths))
        if len(self.center) != 3 or len(self.lengths) != 3:
            raise ValidationError("boxes need 3 center and 3 length values")
        if any(not v > 0 for v in self.lengths):
            raise ValidationError("box lengths must be positive", "lengths")

    @property
    def min_corner(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.lengths) / 2

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.lengths) / 2

    def corners(self) -> np.ndarray:
        lo, hi = self.min_corner, self.max_corner
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                         for z in (lo[2], hi[2])])

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= self.min_corner) and np.all(p <= self.max_corner))


def pairwise_iou(centers_a, lengths_a, centers_b, lengths_b) -> np.ndarray:
    """IoU matrix between two sets of axis-aligned boxes given as arrays."""
    ca, la = np.asarray(centers_a, float).reshape(-1, 3), np.asarray(lengths_a, float).reshape(-1, 3)
    cb, lb = np.asarray(centers_b, float).reshape(-1, 3), np.asarray(lengths_b, float).reshape(-1, 3)
    lo_a, hi_a = ca - la / 2, ca + la / 2
    lo_b, hi_b = cb - lb / 2, cb + lb / 2
    vol_a = np.prod(hi_a - lo_a, axis=1)
    vol_b = np.prod(hi_b - lo_b, axis=1)
    overlap = np.minimum(hi_a[:, None], hi_b[None]) - np.maximum(lo_a[:, None], lo_b[None])
    inter = np.prod(np.clip(overlap, 0, None), axis=2)
    union = vol_a[:, None] + vol_b[None] - inter
    return inter / union


def box_iou(a: Box3, b: Box3) -> float:
    return float(pairwise_iou(a.center, a.lengths, b.center, b.lengths)[0, 0])


def nms(boxes: Sequence[Box3], scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy suppression; returns kept indices in descending score order.

    A box survives iff its IoU with every previously kept box is below the
    threshold.  Equal scores are visited lower index first.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ArgumentError(f"IoU threshold must lie in [0, 1], got {iou_threshold}")
    if len(boxes) != len(scores):
        raise ArgumentError("boxes and scores differ in length")
    if not boxes:
        return []
    ious = pairwise_iou([b.center for b in boxes], [b.lengths for b in boxes],
                        [b.center for b in boxes], [b.lengths for b in boxes])
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(ious[i, k] < iou_threshold for k in kept):
            kept.append(i)
    return kept


def knn_graph(centers, k: int) -> np.ndarray:
    """Directed edges ``i -> j`` to each node's ``min(k, M-1)`` nearest others.

    Returns an (E, 2) int array grouped by source node, nearest first; equal
    distances go to the lower index.
    """
    pts = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    m = len(pts)
    if m == 0:
        raise ArgumentError("knn_graph needs at least one point")
    if k < 1:
        raise ArgumentError("K must be at least 1")
    deg = min(k, m - 1)
    if deg == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    edges = []
    for i in range(m):
        row = d2[i].copy()
        row[i] = np.inf
        nearest = np.argsort(row, kind="stable")[:deg]
        edges.extend((i, int(j)) for j in nearest)
    return np.array(edges, dtype=np.int64)


def orientation_bin(angle_deg: float) -> int:
    if not 0.0 <= angle_deg < 180.0:
        raise ArgumentError(f"angle must lie in [0, 180), got {angle_deg}")
    return min(int(angle_deg // 30.0), NUM_ORIENTATION_BINS - 1)


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 577.870605
    fy: float = 577.870605
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480


@dataclass(frozen=True)
class CameraPose:
    origin: tuple[float, float, float]
    look_at: tuple[float, float, float]
    intrinsics: Intrinsics = Intrinsics()

    def __post_init__(self):
        if np.allclose(self.origin, self.look_at, rtol=0, atol=0):
            raise ValidationError("camera origin and look-at point coincide")
        if self.intrinsics.fx <= 0 or self.intrinsics.fy <= 0:
            raise ValidationError("focal lengths must be positive")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right, down and forward unit vectors in world coordinates (z up)."""
        fwd = np.asarray(self.look_at, float) - np.asarray(self.origin, float)
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        if abs(fwd @ up) > 1 - 1e-9:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return right, down, fwd

    def to_camera(self, points) -> np.ndarray:
        right, down, fwd = self.basis()
        q = np.asarray(points, float).reshape(-1, 3) - np.asarray(self.origin, float)
        return np.stack([q @ right, q @ down, q @ fwd], axis=1)


def _in_view(box: Box3, cam: CameraPose) -> bool:
    x, y, z = cam.to_camera(box.center)[0]
    if z <= 0:
        return False
    k = cam.intrinsics
    u, v = k.fx * x / z + k.cx, k.fy * y / z + k.cy
    return 0 <= u <= k.width and 0 <= v <= k.height


def estimate_viewpoint(target: Box3, scene_bounds: Box3, seed: int,
                       intrinsics: Intrinsics = Intrinsics(), radius: float = VIEW_RADIUS,
                       height: float = CAMERA_HEIGHT, max_attempts: int = MAX_VIEW_ATTEMPTS) -> CameraPose:
    """Sample a camera on a horizontal circle around the target, looking at it.

    The origin sits ``radius`` meters from the target center horizontally at
    absolute height ``height``.  Samples are redrawn until the origin lies
    inside ``scene_bounds`` and the target center falls inside the frustum.
    """
    if not scene_bounds.contains(target.center):
        raise ArgumentError("target center lies outside the scene bounds")
    rng = np.random.default_rng(seed)
    cx, cy, _ = target.center
    for _ in range(max_attempts):
        theta = rng.uniform(0.0, 2 * math.pi)
        origin = (cx + radius * math.cos(theta), cy + radius * math.sin(theta), height)
        if not scene_bounds.contains(origin):
            continue
        cam = CameraPose(origin, target.center, intrinsics)
        if _in_view(target, cam):
            return cam
    raise PlacementError(f"no valid viewpoint found in {max_attempts} attempts")


@dataclass(frozen=True)
class Rect:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    @property
    def center(self) -> tuple[float, float]:
        return ((self.u_min + self.u_max) / 2, (self.v_min + self.v_max) / 2)


def project_box(box: Box3, cam: CameraPose, near: float = 1e-3) -> Rect:
    """Pixel bounding rectangle of the box's 8 projected corners, clamped to the image.

    Corners closer than ``near`` along the viewing axis are pushed onto the
    near plane.
    """
    if cam.to_camera(box.center)[0, 2] <= 0:
        raise VisibilityError("box center is behind the camera")
    pts = cam.to_camera(box.corners())
    z = np.maximum(pts[:, 2], near)
    k = cam.intrinsics
    u = k.fx * pts[:, 0] / z + k.cx
    v = k.fy * pts[:, 1] / z + k.cy
    return Rect(float(np.clip(u.min(), 0, k.width)), float(np.clip(v.min(), 0, k.height)),
                float(np.clip(u.max(), 0, k.width)), float(np.clip(v.max(), 0, k.height)))
