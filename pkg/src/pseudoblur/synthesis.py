"""Synthetic human/scene motion blur pairs built by frame averaging.

Each scene is a textured background translated by an integer number of
pixels per frame plus an articulated stick figure whose limb angles change
per frame. The sharp image is the middle frame; the blurry image is the
mean of all frames.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidInputError
from .imaging import UNIT, ImageTensor, average_frames, downsample_2x, read_png, write_png
from .priors import SKELETON, KeypointSet, segment_distance, stick_figure_joints, synthetic_keypoints

DEFAULT_FRAMES = 7


@dataclass(frozen=True)
class SceneParams:
    size: tuple[int, int] = (128, 128)
    background_seed: int = 0
    shift: tuple[int, int] = (0, 0)             # background (drow, dcol) px/frame
    n_frames: int = DEFAULT_FRAMES
    figure_center: tuple[float, float] = (80.0, 64.0)
    figure_scale: float = 30.0
    base_angles: tuple[float, ...] = (0.3, -0.4, -0.3, 0.4, 0.15, 0.1, -0.15, -0.1)
    angle_deltas: tuple[float, ...] = (0.0,) * 8  # radians per frame
    figure_color: tuple[float, float, float] = (0.85, 0.3, 0.2)

    def __post_init__(self):
        if self.n_frames < 2:
            raise InvalidInputError(f"need at least 2 frames, got {self.n_frames}")
        if len(self.base_angles) != 8 or len(self.angle_deltas) != 8:
            raise InvalidInputError("scene needs 8 base angles and 8 angle deltas")

    @property
    def margin(self) -> int:
        mid = self.n_frames // 2
        return max(abs(self.shift[0]), abs(self.shift[1])) * max(mid, self.n_frames - 1 - mid)

    def frame_angles(self, k: int) -> np.ndarray:
        off = k - self.n_frames // 2
        return np.asarray(self.base_angles) + off * np.asarray(self.angle_deltas)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SceneParams":
        d = json.loads(text)
        for k in ("size", "shift", "figure_center", "base_angles", "angle_deltas", "figure_color"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass(eq=False)
class BlurPair:
    B: ImageTensor
    S: ImageTensor
    keypoints: KeypointSet | None = None
    mask_u: np.ndarray | None = None
    params: SceneParams | None = None

    def __post_init__(self):
        if self.B.shape != self.S.shape:
            raise InvalidInputError(f"B {self.B.shape} and S {self.S.shape} differ")


def random_scene_params(rng: np.random.Generator, size: int | tuple[int, int] = 128,
                        n_frames: int = DEFAULT_FRAMES, max_shift: int | None = None) -> SceneParams:
    """Random scene; background motion defaults to +-4 px/frame at 128 px, scaled with size."""
    h, w = (size, size) if isinstance(size, int) else size
    if max_shift is None:
        max_shift = max(1, round(4 * min(h, w) / 128))
    shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    scale = float(rng.uniform(0.22, 0.3) * h)
    center = (float(rng.uniform(0.52, 0.6) * h), float(rng.uniform(0.4, 0.6) * w))
    base = rng.uniform(-0.5, 0.5, size=8)
    deltas = rng.uniform(-0.12, 0.12, size=8)
    color = tuple(float(v) for v in rng.uniform(0.1, 0.9, size=3))
    return SceneParams(
        size=(h, w), background_seed=int(rng.integers(0, 2**31 - 1)), shift=shift,
        n_frames=n_frames, figure_center=center, figure_scale=scale,
        base_angles=tuple(float(v) for v in base), angle_deltas=tuple(float(v) for v in deltas),
        figure_color=color,
    )


def background_canvas(seed: int, shape: tuple[int, int]) -> np.ndarray:
    """Textured RGB canvas in [0.05, 0.95]: smooth gradient, sinusoid and hard-edged blocks."""
    rng = np.random.default_rng(seed)
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    base = rng.uniform(0.3, 0.7, size=3)
    grad = rng.uniform(-0.3, 0.3, size=(2, 3))
    for c in range(3):
        img[:, :, c] = base[c] + grad[0, c] * rr / h + grad[1, c] * cc / w
    freq = rng.uniform(0.05, 0.25, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    img += 0.08 * np.sin(freq[0] * rr + freq[1] * cc + phase)[:, :, None]
    for _ in range(int(rng.integers(6, 14))):
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        bh, bw = rng.integers(3, max(4, h // 4)), rng.integers(3, max(4, w // 4))
        img[r0:r0 + bh, c0:c0 + bw] = rng.uniform(0.05, 0.95, size=3)
    return np.clip(img, 0.05, 0.95)


def _figure_coverage(joints: np.ndarray, shape: tuple[int, int], scale: float) -> np.ndarray:
    """Anti-aliased coverage of limbs, torso and head in [0, 1]."""
    half = max(1.0, 0.07 * scale)
    dist = np.full(shape, np.inf)
    for i, j in SKELETON:
        dist = np.minimum(dist, segment_distance(shape, joints[i], joints[j]))
    pelvis = (joints[2] + joints[3]) / 2
    cov = np.clip(half + 0.5 - dist, 0.0, 1.0)
    torso = np.clip(2.2 * half + 0.5 - segment_distance(shape, pelvis, joints[12]), 0.0, 1.0)
    head = np.clip(0.2 * scale + 0.5 - segment_distance(shape, joints[13], joints[13]), 0.0, 1.0)
    return np.maximum(np.maximum(cov, torso), head)


def render_sequence(params: SceneParams) -> list[ImageTensor]:
    h, w = params.size
    m = params.margin
    canvas = background_canvas(params.background_seed, (h + 2 * m, w + 2 * m))
    color = np.asarray(params.figure_color)
    mid = params.n_frames // 2
    frames = []
    for k in range(params.n_frames):
        off = k - mid
        r0, c0 = m + off * params.shift[0], m + off * params.shift[1]
        bg = canvas[r0:r0 + h, c0:c0 + w]
        joints = stick_figure_joints(params.figure_center, params.figure_scale, params.frame_angles(k))
        cov = _figure_coverage(joints, (h, w), params.figure_scale)[:, :, None]
        frames.append(ImageTensor((bg * (1.0 - cov) + color * cov).astype(np.float32), UNIT))
    return frames


def make_blur_pair(params: SceneParams) -> BlurPair:
    frames = render_sequence(params)
    return BlurPair(B=average_frames(frames), S=frames[params.n_frames // 2],
                    keypoints=synthetic_keypoints(params), params=params)


# ---------------------------------------------------------------------------
# on-disk dataset


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_pair(seed: int, index: int, size: int = 128, n_frames: int = DEFAULT_FRAMES,
                  max_shift: int | None = None) -> BlurPair:
    return make_blur_pair(random_scene_params(pair_rng(seed, index), size, n_frames, max_shift))


def build_dataset(n: int, seed: int, out_dir: str | Path, size: int = 128,
                  n_frames: int = DEFAULT_FRAMES, max_shift: int | None = None) -> Path:
    """Write ``n`` pairs as PNG plus keypoint text; returns the manifest path."""
    if n < 1:
        raise InvalidInputError(f"dataset size must be >= 1, got {n}")
    out = Path(out_dir)
    for sub in ("blur", "sharp", "keypoints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        pair = generate_pair(seed, i, size, n_frames, max_shift)
        name = f"{i:04d}"
        write_png(pair.B, out / "blur" / f"{name}.png")
        write_png(pair.S, out / "sharp" / f"{name}.png")
        pair.keypoints.save(out / "keypoints" / f"{name}.txt")
        lines.append(f"{name}\t{seed}\t{pair.params.to_json()}\n")
    manifest = out / "manifest.txt"
    manifest.write_text("".join(lines))
    return manifest


@dataclass
class PairDataset:
    """Stacked unit-range pairs: ``B`` and ``S`` are N x H x W x 3 float32."""
    B: np.ndarray
    S: np.ndarray
    keypoints: list[KeypointSet | None] = field(default_factory=list)

    def __post_init__(self):
        if self.B.shape != self.S.shape or self.B.ndim != 4:
            raise InvalidInputError("B and S must be matching N x H x W x 3 stacks")
        if not self.keypoints:
            self.keypoints = [None] * len(self.B)

    def __len__(self) -> int:
        return len(self.B)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.B.shape[1], self.B.shape[2]

    def pair(self, i: int) -> BlurPair:
        return BlurPair(ImageTensor(self.B[i], UNIT), ImageTensor(self.S[i], UNIT), self.keypoints[i])

    def subset(self, idx: Sequence[int]) -> "PairDataset":
        idx = list(idx)
        return PairDataset(self.B[idx], self.S[idx], [self.keypoints[i] for i in idx])

    def split(self, n_holdout: int) -> tuple["PairDataset", "PairDataset"]:
        n = len(self)
        if not 0 < n_holdout < n:
            raise InvalidInputError(f"holdout {n_holdout} must be inside (0, {n})")
        return self.subset(range(n - n_holdout)), self.subset(range(n - n_holdout, n))

    @classmethod
    def from_pairs(cls, pairs: Sequence[BlurPair], quantize: bool = True) -> "PairDataset":
        B = np.stack([p.B.to_unit().data for p in pairs])
        S = np.stack([p.S.to_unit().data for p in pairs])
        if quantize:
            B = (np.round(B * 255.0) / 255.0).astype(np.float32)
            S = (np.round(S * 255.0) / 255.0).astype(np.float32)
        return cls(B, S, [p.keypoints for p in pairs])


def generate_dataset(n: int, seed: int, size: int = 128, n_frames: int = DEFAULT_FRAMES,
                     max_shift: int | None = None) -> PairDataset:
    """In-memory twin of :func:`build_dataset` (8-bit quantized like the PNGs)."""
    return PairDataset.from_pairs([generate_pair(seed, i, size, n_frames, max_shift) for i in range(n)])


def load_dataset(root: str | Path) -> PairDataset:
    root = Path(root)
    manifest = root / "manifest.txt"
    if manifest.exists():
        names = [ln.split("\t", 1)[0] for ln in manifest.read_text().splitlines() if ln.strip()]
    else:
        names = sorted(p.stem for p in (root / "blur").glob("*.png"))
    if not names:
        raise InvalidInputError(f"no pairs found under {root}")
    pairs = []
    for name in names:
        kp_path = root / "keypoints" / f"{name}.txt"
        kps = KeypointSet.load(kp_path) if kp_path.exists() else None
        pairs.append(BlurPair(read_png(root / "blur" / f"{name}.png"),
                              read_png(root / "sharp" / f"{name}.png"), kps))
    return PairDataset.from_pairs(pairs, quantize=False)


# ---------------------------------------------------------------------------
# patches, augmentation, task batches


def patch_offset(shape: tuple[int, int], size: int, rng: np.random.Generator) -> tuple[int, int]:
    h, w = shape
    if h < size or w < size:
        raise InvalidInputError(f"image {h}x{w} smaller than patch {size}")
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def sample_patches(pair: BlurPair, size: int = 128, seed: int = 0) -> BlurPair:
    """Co-located ``size`` x ``size`` crops of B and S (and keypoints/mask) at a seeded offset."""
    if size % 16:
        raise InvalidInputError(f"patch size {size} must be divisible by 16")
    r, c = patch_offset(pair.B.shape[:2], size, np.random.default_rng(seed))
    sl = (slice(r, r + size), slice(c, c + size))
    kps = pair.keypoints.translate(-r, -c) if pair.keypoints is not None else None
    if kps is not None:
        p = kps.points
        inside = (p[:, 0] >= 0) & (p[:, 0] <= size - 1) & (p[:, 1] >= 0) & (p[:, 1] <= size - 1)
        kps = KeypointSet(p, kps.valid & inside)
    mask = pair.mask_u[sl] if pair.mask_u is not None else None
    return BlurPair(ImageTensor(pair.B.data[sl], pair.B.range_tag),
                    ImageTensor(pair.S.data[sl], pair.S.range_tag), kps, mask)


def augment_downsample(pair: BlurPair) -> BlurPair:
    """2x box downsampling of both images; keypoints follow, the mask is dropped."""
    kps = pair.keypoints.scale(0.5) if pair.keypoints is not None else None
    return BlurPair(downsample_2x(pair.B), downsample_2x(pair.S), kps)


def downsample_batch(x: torch.Tensor) -> torch.Tensor:
    """Tensor twin of :func:`downsample_2x` for N x C x H x W batches."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise InvalidInputError(f"downsample needs even dimensions, got {tuple(x.shape[-2:])}")
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def to_batch(stack: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """N x H x W x 3 unit-range stack -> N x 3 x H x W signed tensor."""
    x = torch.as_tensor(np.ascontiguousarray(stack.transpose(0, 3, 1, 2)), dtype=dtype)
    return x * 2.0 - 1.0


def random_patch_batch(ds: PairDataset, idx: Sequence[int], size: int,
                       rng: np.random.Generator, dtype: torch.dtype = torch.float32,
                       return_offsets: bool = False):
    """(B, S) tensors of co-located random patches for the given pair indices."""
    bs, ss, offsets = [], [], []
    for i in idx:
        r, c = patch_offset(ds.image_size, size, rng)
        bs.append(ds.B[i, r:r + size, c:c + size])
        ss.append(ds.S[i, r:r + size, c:c + size])
        offsets.append((r, c))
    out = to_batch(np.stack(bs), dtype), to_batch(np.stack(ss), dtype)
    return (*out, offsets) if return_offsets else out


@dataclass
class TaskBatch:
    """Paired meta-learning tasks: task ``i`` adapts on ``train[i]`` and is scored on ``test[i]``."""
    train: list[tuple[torch.Tensor, torch.Tensor]]
    test: list[tuple[torch.Tensor, torch.Tensor]]
    train_indices: list[list[int]]
    test_indices: list[list[int]]


def sample_task_batch(ds: PairDataset, seed: int, n_tasks: int = 4, task_size: int = 1,
                      patch: int | None = None, dtype: torch.dtype = torch.float32) -> TaskBatch:
    """Draw ``2 * n_tasks * task_size`` distinct pairs split evenly into train/test tasks."""
    need = 2 * n_tasks * task_size
    if len(ds) < need:
        raise InvalidInputError(f"task batch needs {need} pairs, dataset has {len(ds)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ds), size=need, replace=False)
    groups = [sorted(int(v) for v in chosen[k * task_size:(k + 1) * task_size]) for k in range(2 * n_tasks)]
    tr_idx, te_idx = groups[:n_tasks], groups[n_tasks:]
    size = patch or min(ds.image_size)

    def load(idx):
        return random_patch_batch(ds, idx, size, rng, dtype)

    return TaskBatch([load(g) for g in tr_idx], [load(g) for g in te_idx], tr_idx, te_idx)
