"""Human/scene prior masks from body keypoints and an edge-difference map."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import DegenerateInputError, InvalidInputError
from .imaging import BinaryMask, ImageTensor, max_pool, rgb_to_y, sobel_edges, zero_outside_bbox

N_KEYPOINTS = 14

# LSP joint order.
JOINT_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    "neck", "head_top",
)

SKELETON = (
    (0, 1), (1, 2), (3, 4), (4, 5),          # legs
    (6, 7), (7, 8), (9, 10), (10, 11),       # arms
    (2, 3), (8, 9), (2, 8), (3, 9),          # hips, shoulders, torso sides
    (8, 12), (9, 12), (12, 13),              # neck and head
)


@dataclass(frozen=True)
class PriorConfig:
    edge_threshold: float = 0.05
    pool_kernel: int = 7
    line_thickness: float = 3.0


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """14 (row, col) points with a validity flag each."""
    points: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_KEYPOINTS, 2):
            raise InvalidInputError(f"expected {N_KEYPOINTS} x 2 keypoints, got {pts.shape}")
        valid = np.ones(N_KEYPOINTS, bool) if self.valid is None else np.asarray(self.valid, bool)
        if valid.shape != (N_KEYPOINTS,):
            raise InvalidInputError("validity flags must have one entry per keypoint")
        pts.flags.writeable = False
        valid = valid.copy()
        valid.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @property
    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def check_bounds(self, shape: tuple[int, int]) -> None:
        h, w = shape[0], shape[1]
        p = self.valid_points
        if p.size and (p[:, 0].min() < 0 or p[:, 1].min() < 0
                       or p[:, 0].max() > h - 1 or p[:, 1].max() > w - 1):
            raise InvalidInputError(f"valid keypoints fall outside a {h}x{w} image")

    def translate(self, drow: float, dcol: float) -> "KeypointSet":
        return KeypointSet(self.points + np.array([drow, dcol]), self.valid)

    def scale(self, factor: float) -> "KeypointSet":
        return KeypointSet(self.points * factor, self.valid)

    def bbox(self, shape: tuple[int, int]) -> tuple[int, int, int, int] | None:
        """Inclusive pixel bounding box of the valid points as (top, left, bottom, right) with exclusive ends."""
        p = self.valid_points
        if not len(p):
            return None
        h, w = shape[0], shape[1]
        top = int(np.clip(np.floor(p[:, 0].min()), 0, h - 1))
        left = int(np.clip(np.floor(p[:, 1].min()), 0, w - 1))
        bottom = int(np.clip(np.ceil(p[:, 0].max()), 0, h - 1)) + 1
        right = int(np.clip(np.ceil(p[:, 1].max()), 0, w - 1)) + 1
        return top, left, bottom, right

    def to_text(self) -> str:
        return "".join(f"{r:.4f} {c:.4f} {int(v)}\n" for (r, c), v in zip(self.points, self.valid))

    @classmethod
    def from_text(cls, text: str) -> "KeypointSet":
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if len(rows) != N_KEYPOINTS or any(len(r) != 3 for r in rows):
            raise InvalidInputError(f"keypoint text needs {N_KEYPOINTS} lines of 'row col valid'")
        pts = np.array([[float(r[0]), float(r[1])] for r in rows])
        valid = np.array([int(r[2]) != 0 for r in rows])
        return cls(pts, valid)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "KeypointSet":
        return cls.from_text(Path(path).read_text())

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return np.array_equal(self.points, other.points) and np.array_equal(self.valid, other.valid)

    __hash__ = None


class KeypointProvider(Protocol):
    def __call__(self, img: ImageTensor) -> KeypointSet: ...


class FixedKeypoints:
    """Provider returning known keypoints regardless of the image (synthetic scenes)."""

    def __init__(self, kps: KeypointSet):
        self.kps = kps

    def __call__(self, img: ImageTensor) -> KeypointSet:
        return self.kps


# ---------------------------------------------------------------------------
# rasterization


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull (Andrew's monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64))))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _pixel_grid(shape):
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    return rr.astype(np.float64), cc.astype(np.float64)


def fill_convex_polygon(hull: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Pixels whose centers lie inside (or on) a convex polygon."""
    if len(hull) < 3:
        return np.zeros(shape, bool)
    rr, cc = _pixel_grid(shape)
    inside = np.ones(shape, bool)
    # hull is CCW in (row, col) coordinates: inside means cross >= 0 for each edge
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        cross = (b[0] - a[0]) * (cc - a[1]) - (b[1] - a[1]) * (rr - a[0])
        inside &= cross >= -1e-9
    return inside


def segment_distance(shape: tuple[int, int], a, b) -> np.ndarray:
    """Distance from every pixel center to the segment ab."""
    rr, cc = _pixel_grid(shape)
    a = np.asarray(a, np.float64)
    d = np.asarray(b, np.float64) - a
    denom = float(d @ d)
    if denom == 0.0:
        t = np.zeros(shape)
    else:
        t = np.clip(((rr - a[0]) * d[0] + (cc - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(rr - (a[0] + t * d[0]), cc - (a[1] + t * d[1]))


def draw_thick_segment(shape, a, b, thickness: float) -> np.ndarray:
    return segment_distance(shape, a, b) <= thickness / 2.0


def body_joint_map(kps: KeypointSet, shape: tuple[int, int], thickness: float = 3.0) -> BinaryMask:
    """Skeleton lines of the given thickness united with the filled keypoint hull."""
    shape = (int(shape[0]), int(shape[1]))
    valid = kps.valid_points
    if len(valid) < 3:
        raise DegenerateInputError(f"need at least 3 valid keypoints, got {len(valid)}")
    mask = fill_convex_polygon(convex_hull(valid), shape)
    for i, j in SKELETON:
        if kps.valid[i] and kps.valid[j]:
            mask |= draw_thick_segment(shape, kps.points[i], kps.points[j], thickness)
    return BinaryMask(mask)


def difference_map(D: ImageTensor, R: ImageTensor, kps: KeypointSet,
                   threshold: float = 0.05, pool_kernel: int = 7) -> BinaryMask:
    """Thresholded Sobel edge difference of the lumas, max-pooled and limited to the keypoint box."""
    if D.shape != R.shape:
        raise InvalidInputError(f"shape mismatch: {D.shape} vs {R.shape}")
    ed = sobel_edges(rgb_to_y(D.to_unit()))
    er = sobel_edges(rgb_to_y(R.to_unit()))
    hits = (np.abs(ed - er) > threshold).astype(np.uint8)
    mask = BinaryMask(max_pool(hits, pool_kernel))
    box = kps.bbox(mask.shape)
    if box is None:
        return BinaryMask.zeros(mask.shape)
    return zero_outside_bbox(mask, box)


def human_prior(D: ImageTensor, R: ImageTensor, kps: KeypointSet,
                config: PriorConfig = PriorConfig()) -> tuple[BinaryMask, BinaryMask]:
    """Body mask ``Mu`` (inside and near the body) and its complement ``Mv``."""
    joints = body_joint_map(kps, D.shape[:2], config.line_thickness)
    diff = difference_map(D, R, kps, config.edge_threshold, config.pool_kernel)
    mu = joints | diff
    return mu, mu.invert()


# ---------------------------------------------------------------------------
# synthetic stick figure


def stick_figure_joints(center, scale: float, angles) -> np.ndarray:
    """14 joint positions of a 2-D stick figure.

    ``center`` is the pelvis (row, col); ``scale`` the torso length in px.
    ``angles`` holds 8 radians: (r upper arm, r forearm, l upper arm,
    l forearm, r thigh, r shin, l thigh, l shin). Upper-limb angles are
    measured from straight down; lower-limb angles are relative to the
    parent limb.
    """
    c = np.asarray(center, np.float64)
    s = float(scale)
    a = np.asarray(angles, np.float64)
    if a.shape != (8,):
        raise InvalidInputError("stick figure needs 8 limb angles")

    def limb(origin, ang, length):
        return origin + length * np.array([np.cos(ang), np.sin(ang)])

    j = np.zeros((N_KEYPOINTS, 2))
    j[2] = c + [0.0, -0.22 * s]           # r_hip (image-left)
    j[3] = c + [0.0, 0.22 * s]
    j[12] = c + [-s, 0.0]                  # neck
    j[13] = j[12] + [-0.45 * s, 0.0]
    j[8] = j[12] + [0.1 * s, -0.32 * s]
    j[9] = j[12] + [0.1 * s, 0.32 * s]
    j[7] = limb(j[8], a[0], 0.45 * s)
    j[6] = limb(j[7], a[0] + a[1], 0.40 * s)
    j[10] = limb(j[9], a[2], 0.45 * s)
    j[11] = limb(j[10], a[2] + a[3], 0.40 * s)
    j[1] = limb(j[2], a[4], 0.55 * s)
    j[0] = limb(j[1], a[4] + a[5], 0.50 * s)
    j[4] = limb(j[3], a[6], 0.55 * s)
    j[5] = limb(j[4], a[6] + a[7], 0.50 * s)
    return j


def synthetic_keypoints(params) -> KeypointSet:
    """Keypoints of the middle (sharp) frame of a synthetic scene.

    Stands in for a pretrained body-joint predictor: the scene parameters
    fully determine where the figure is drawn.
    """
    mid = params.n_frames // 2
    pts = stick_figure_joints(params.figure_center, params.figure_scale, params.frame_angles(mid))
    h, w = params.size
    valid = (pts[:, 0] >= 0) & (pts[:, 0] <= h - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= w - 1)
    return KeypointSet(pts, valid)
