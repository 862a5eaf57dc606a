"""Clip preprocessing: frame embedding, keyframe reduction, subject crop.

A clip of n frames is reduced to k representative frames by clustering
per-frame feature vectors (k-means++ seeded Lloyd iterations) and taking,
per cluster, the frame nearest its centroid. The subject is located once
per clip from temporal motion energy, cropped, and bilinearly resized to
the model input resolution.

The frame embedding is a deterministic grid patch-statistics descriptor
(per-cell mean and standard deviation of pixel intensities). Any other
extractor producing fixed-length vectors can be swapped in; the
clustering is agnostic to it. Likewise the energy-based detector stands
behind the same interface a learned person detector would use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .rng import Rng


@dataclass
class VideoClip:
    """Fixed-shape frame sequence with its capture distance and label."""

    frames: np.ndarray            # (n, C, H, W) float32
    distance_m: float
    label: int
    fps: float = 21.0

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (n, C, H, W) with n >= 1, got {self.frames.shape}")
        if not self.distance_m > 0:
            raise ValueError(f"distance_m must be positive, got {self.distance_m}")

    @property
    def n(self) -> int:
        return self.frames.shape[0]


@dataclass
class FrameFeature:
    vector: np.ndarray
    frame_index: int


@dataclass
class KeyframeSelection:
    """Chosen frame indices plus clustering diagnostics."""

    indices: list[int]
    assignments: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class BBox:
    """Pixel box, exclusive upper bounds: columns [x0, x1), rows [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        self.x0, self.y0 = int(self.x0), int(self.y0)
        self.x1, self.y1 = int(self.x1), int(self.y1)
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


@dataclass
class PreprocConfig:
    k: int = 8
    grid: int = 2
    kmeans_max_iter: int = 50
    kmeans_restarts: int = 4
    theta: float = 0.2
    rho: float = 0.15
    out_hw: tuple[int, int] = (32, 32)
    detect_mode: str = "auto"
    seed: int = 0


def _pad_to_multiple(frame: np.ndarray, grid: int) -> np.ndarray:
    C, H, W = frame.shape
    ph = (-H) % grid
    pw = (-W) % grid
    if ph or pw:
        frame = np.pad(frame, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return frame


def embed_frames(frames: np.ndarray, grid: int) -> np.ndarray:
    """Grid patch statistics for a stack of frames, shape (n, 2*C*grid^2).

    Per channel and per cell of a grid x grid partition (row-major), the
    feature holds the cell's mean followed by its population standard
    deviation. Frames are edge-padded so the grid divides evenly.
    """
    if grid < 1:
        raise ValueError(f"grid must be positive, got {grid}")
    if frames.size == 0:
        raise ValueError("cannot embed an empty frame stack")
    n, C, H, W = frames.shape
    padded = np.stack([_pad_to_multiple(f, grid) for f in frames]) if ((-H) % grid or (-W) % grid) \
        else frames
    _, _, Hp, Wp = padded.shape
    cells = padded.reshape(n, C, grid, Hp // grid, grid, Wp // grid)
    cells = cells.transpose(0, 1, 2, 4, 3, 5).reshape(n, C, grid * grid, -1)
    means = cells.mean(axis=-1)
    stds = cells.std(axis=-1)
    feats = np.stack([means, stds], axis=-1)          # (n, C, cells, 2)
    return feats.reshape(n, 2 * C * grid * grid).astype(np.float32)


def embed_frame(frame: np.ndarray, grid: int, frame_index: int = 0) -> FrameFeature:
    """Embed a single (C, H, W) frame; see :func:`embed_frames`."""
    vec = embed_frames(frame[None], grid)[0]
    return FrameFeature(vector=vec, frame_index=frame_index)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws from the data points."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=x.dtype)
    first = int(rng.integers(0, n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            r = rng.uniform(0.0, float(total))
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        centers[c] = x[idx]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))
    return centers

def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int):
    """Lloyd iterations until the assignment fixpoint or max_iter.

    Empty clusters are re-seeded at the point currently farthest from its
    centroid (lowest index on ties). Returns (assignments, inertia,
    iterations, inertia_history).
    """
    k = centers.shape[0]
    assign = None
    history = []
    iters = 0
    for _ in range(max_iter):
        iters += 1
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for c in range(k):
            members = new_assign == c
            if not members.any():
                far = int(dists[np.arange(x.shape[0]), new_assign].argmax())
                new_assign[far] = c
                members = new_assign == c
            centers[c] = x[members].mean(axis=0)
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        history.append(float(dists[np.arange(x.shape[0]), new_assign].sum()))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
    inertia = history[-1]
    return assign, centers, inertia, iters, history


def select_keyframes(features, k: int, rng: Rng, max_iter: int = 50,
                     restarts: int = 4) -> KeyframeSelection:
    """Pick k representative frame indices by clustering frame features.

    Runs k-means++ seeded Lloyd clustering (``restarts`` independent
    seedings, best inertia wins) and selects, per cluster, the member
    frame nearest the centroid (lowest frame index on ties). Indices are
    returned sorted ascending so downstream consumers keep chronological
    order. With k == n the selection is the identity.
    """
    if isinstance(features, np.ndarray):
        x = np.asarray(features, dtype=np.float64)
        frame_ids = np.arange(x.shape[0])
    else:
        x = np.stack([np.asarray(f.vector, dtype=np.float64) for f in features])
        frame_ids = np.array([f.frame_index for f in features])
    n = x.shape[0]
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > n:
        raise ValueError(f"cannot select {k} keyframes from {n} frames")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if k == n:
        order = np.argsort(frame_ids, kind="stable")
        return KeyframeSelection(indices=[int(frame_ids[i]) for i in order],
                                 assignments=np.arange(n)[np.argsort(order)],
                                 inertia=0.0, iterations=0, inertia_history=[0.0])

    best = None
    for _ in range(max(1, restarts)):
        init = _kmeans_pp_init(x, k, rng)
        assign, centers, inertia, iters, history = _lloyd(x, init.copy(), max_iter)
        if best is None or inertia < best[2]:
            best = (assign, centers, inertia, iters, history)
    assign, centers, inertia, iters, history = best

    indices = []
    for c in range(k):
        members = np.flatnonzero(assign == c)
        d = ((x[members] - centers[c]) ** 2).sum(axis=1)
        rep = members[int(d.argmin())]            # argmin takes the first of ties
        indices.append(int(frame_ids[rep]))
    indices.sort()
    return KeyframeSelection(indices=indices, assignments=assign.astype(np.int64),
                             inertia=float(inertia), iterations=iters,
                             inertia_history=history)


def _energy_box(energy: np.ndarray, theta: float, rho: float) -> BBox:
    H, W = energy.shape
    peak = float(energy.max())
    mask = energy > theta * peak if peak > 0 else np.zeros_like(energy, dtype=bool)
    if not mask.any():
        return BBox(0, 0, W, H)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    dy = int(round(rho * (y1 - y0)))
    dx = int(round(rho * (x1 - x0)))
    return BBox(max(0, x0 - dx), max(0, y0 - dy), min(W, x1 + dx), min(H, y1 + dy))


def detect_subject(clip: VideoClip, theta: float = 0.2, rho: float = 0.15,
                   mode: str = "motion") -> BBox:
    """Locate the subject from pixel energy; whole frame as fallback.

    Motion mode uses the per-pixel temporal standard deviation across
    frames (max over channels); intensity mode the mean absolute
    deviation from each frame's spatial mean. Pixels strictly above
    theta * max(energy) form the tight box, which is dilated by rho of
    its size per side and clipped to the frame. Auto mode tries motion
    first and switches to intensity when the motion box degenerates to
    (nearly) the whole frame, which happens for static subjects whose
    only temporal variation is sensor noise.
    """
    frames = clip.frames.astype(np.float64)  # exact zero energy for static clips
    n, C, H, W = frames.shape
    if mode not in ("motion", "intensity", "auto"):
        raise ValueError(f"unknown detect mode {mode!r}")

    if mode in ("motion", "auto"):
        if n < 2:
            energy = np.zeros((H, W), dtype=np.float64)
        else:
            energy = frames.std(axis=0).max(axis=0)
        box = _energy_box(energy, theta, rho)
        if mode == "motion" or box.width * box.height < 0.85 * H * W:
            return box

    spatial_mean = frames.mean(axis=(2, 3), keepdims=True)
    energy = np.abs(frames - spatial_mean).mean(axis=0).max(axis=0)
    return _energy_box(energy, theta, rho)


def crop_resize(frame: np.ndarray, box: BBox, out_hw: tuple[int, int] = (224, 224)) -> np.ndarray:
    """Crop a (C, H, W) frame to ``box`` and bilinearly resize to out_hw.

    Align-corners interpolation; outputs are convex combinations of the
    cropped pixels, so values stay inside the input range.
    """
    C, H, W = frame.shape
    if box.x1 > W or box.y1 > H:
        raise ValueError(f"box ({box.x0},{box.y0},{box.x1},{box.y1}) exceeds frame {H}x{W}")
    crop = np.ascontiguousarray(frame[:, box.y0:box.y1, box.x0:box.x1])
    return kernels.bilinear_resize(crop, out_hw[0], out_hw[1])


def preprocess_clip(clip: VideoClip, cfg: PreprocConfig, rng: Rng | None = None) -> np.ndarray:
    """Full preprocessing: embed, reduce to k keyframes, crop, resize.

    One subject box is computed from the whole clip so the actor's
    apparent scale stays consistent across the selected frames. Output is
    (k, C, h, w) float32 in chronological order.
    """
    if cfg.k > clip.n:
        raise ValueError(f"cfg.k={cfg.k} exceeds clip frame count {clip.n}")
    if rng is None:
        rng = Rng(cfg.seed)
    feats = embed_frames(clip.frames, cfg.grid)
    sel = select_keyframes(feats, cfg.k, rng, max_iter=cfg.kmeans_max_iter,
                           restarts=cfg.kmeans_restarts)
    box = detect_subject(clip, theta=cfg.theta, rho=cfg.rho, mode=cfg.detect_mode)
    out = np.stack([crop_resize(clip.frames[i], box, cfg.out_hw) for i in sel.indices])
    return np.ascontiguousarray(out, dtype=np.float32)
