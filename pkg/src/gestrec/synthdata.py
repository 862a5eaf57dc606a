"""Synthetic distance-parameterized gesture clips.

A clip shows a single actor (a filled body rectangle plus a bright
"arm" point following a per-class motion program) on a cluttered static
background. Apparent actor size follows the pinhole law
``scale = reference_scale * 4 / d``, so distance is encoded exactly as
the difficulty axis a distance-weighted loss targets: fewer signal
pixels against constant noise.

Clip files use a small binary format (magic ``GVID``) chosen over video
codecs so round-trips are bit-exact; manifests are plain CSV.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, HeaderMismatchError, TruncatedPayloadError
from .preproc import BBox, VideoClip
from .rng import Rng, derive_seed

# Motion programs map phase t in [0, 1] to (arm_dx, arm_dy, scale_mult):
# arm offset from the body center in units of body height (dy positive =
# downward in image coordinates) and a multiplier on the pinhole scale.
# sway_px adds per-frame whole-body position jitter, which keeps the body
# outline visible to the motion-energy detector at any distance. stop is
# exactly static by contract (the detector's fallback handles it); null
# sways strictly sub-pixel.


def _go_back(t):
    return 0.35, 0.05, 1.2 - 0.4 * t


def _beckoning(t):
    return 0.15 + 0.3 * (0.5 + 0.5 * math.cos(4.0 * math.pi * t)), -0.35, 1.0


def _lower(t):
    return 0.4, -0.55 + 0.9 * t, 1.0


def _move_left(t):
    return 0.55 - 1.1 * t, -0.3, 1.0


def _follow_me(t):
    return 0.35, -0.4, 0.8 + 0.4 * t


def _move_right(t):
    return -0.55 + 1.1 * t, -0.3, 1.0


def _higher(t):
    return 0.4, 0.35 - 0.9 * t, 1.0


def _spin(t):
    return 0.45 * math.cos(2.0 * math.pi * t), -0.15 + 0.45 * math.sin(2.0 * math.pi * t), 1.0


def _stop(t):
    return 0.05, -0.55, 1.0


def _null(t):
    return 0.15, 0.15, 1.0


@dataclass(frozen=True)
class GestureClass:
    id: int
    name: str
    motion_program: callable
    sway_px: float = 1.2      # body position jitter amplitude, pixels


GESTURE_CLASSES = (
    GestureClass(0, "go_back", _go_back),
    GestureClass(1, "beckoning", _beckoning),
    GestureClass(2, "lower", _lower),
    GestureClass(3, "move_left", _move_left),
    GestureClass(4, "follow_me", _follow_me),
    GestureClass(5, "move_right", _move_right),
    GestureClass(6, "higher", _higher),
    GestureClass(7, "spin", _spin),
    GestureClass(8, "stop", _stop, sway_px=0.0),
    GestureClass(9, "null", _null, sway_px=0.4),
)

N_CLASSES = len(GESTURE_CLASSES)

# Contrast keeps edge-flicker motion energy (~0.5 * |body - bg|) well above
# the noise floor, so the theta-relative detector threshold stays meaningful.
_BODY_VAL = 0.8
_ARM_VAL = 1.0
_BG_VAL = 0.06
_BODY_ASPECT = 0.45          # body width as a fraction of body height
_HAND_SIDE = 0.2             # hand square side as a fraction of body height
_LIMB_WIDTH = 0.1            # limb thickness as a fraction of body height
_LIMB_VAL = 0.95
_MAX_REACH = 0.7             # worst-case hand offset from center, body units
_MAX_MULT = 1.2              # largest scale multiplier any program emits
_REF_DISTANCE = 4.0


@dataclass
class SceneConfig:
    frame_hw: tuple[int, int] = (96, 96)
    n_frames: int = 84
    reference_scale: float = 32.0    # actor height in pixels at 4 m
    noise_sigma: float = 0.05
    clutter_count: int = 3
    channels: int = 1

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        H, W = self.frame_hw
        max_extent = self.reference_scale * _MAX_MULT * (1 + 2 * _MAX_REACH)
        if max_extent > min(H, W):
            raise ValueError(f"actor (extent {max_extent:.0f}px at 4 m) does not fit "
                             f"in a {H}x{W} frame")


@dataclass
class ManifestRecord:
    path: str
    distance_m: float
    label_id: int
    seed: int
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path

    def clip_path(self, record: ManifestRecord) -> Path:
        return self.root / record.path


@dataclass
class GenSpec:
    """How many clips to generate per one-meter interval, and for which split."""

    per_meter_count: int = 40
    meter_start: float = 4.0
    meter_stop: float = 20.0
    split: str = "train"

    def __post_init__(self):
        if self.per_meter_count < 1:
            raise ValueError("per_meter_count must be >= 1")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")


def render_clip(gesture: GestureClass, d: float, cfg: SceneConfig, rng: Rng):
    """Render one clip at distance d; returns (VideoClip, ground-truth BBox).

    The returned box is the union over frames of the body rectangle and
    arm square, so it bounds the actor for the whole clip.
    """
    H, W = cfg.frame_hw
    C = cfg.channels
    n = cfg.n_frames
    base_scale = cfg.reference_scale * _REF_DISTANCE / d
    mults = [gesture.motion_program(i / (n - 1))[2] for i in range(n)]
    if base_scale * min(mults) < 1.0:
        raise ValueError(f"actor would be smaller than one pixel at d={d} m "
                         f"(scale {base_scale * min(mults):.2f}px)")

    # One rng draw order for every class: center, clutter, jitter, noise.
    max_half = base_scale * max(mults) * (0.5 + _MAX_REACH)
    margin = min(max_half + 1.0, (min(H, W) - 2) / 2.0)
    cx = rng.uniform(margin, W - margin)
    cy = rng.uniform(margin, H - margin)

    background = np.full((C, H, W), _BG_VAL, dtype=np.float32)
    actor_clear = (cx - max_half - 2, cy - max_half - 2, cx + max_half + 2, cy + max_half + 2)
    for _ in range(cfg.clutter_count):
        for _attempt in range(50):
            bx = rng.uniform(0, W)
            by = rng.uniform(0, H)
            r = rng.uniform(2.0, 5.0)
            if not (actor_clear[0] - r < bx < actor_clear[2] + r
                    and actor_clear[1] - r < by < actor_clear[3] + r):
                break
        yy, xx = np.ogrid[:H, :W]
        blob = ((xx - bx) ** 2 + (yy - by) ** 2) <= r * r
        background[:, blob] = 0.0  # dark distractors, below intensity threshold

    sway = rng.uniform(-1.0, 1.0, (n, 2)) * gesture.sway_px

    frames = np.empty((n, C, H, W), dtype=np.float32)
    bounds = [W, H, 0, 0]

    def fill_square(frame, px, py, side, value):
        x0 = int(round(px - side / 2))
        y0 = int(round(py - side / 2))
        x1, y1 = x0 + max(1, int(round(side))), y0 + max(1, int(round(side)))
        x0c, x1c = max(0, x0), min(W, x1)
        y0c, y1c = max(0, y0), min(H, y1)
        if x0c < x1c and y0c < y1c:
            frame[:, y0c:y1c, x0c:x1c] = value
            bounds[0] = min(bounds[0], x0c)
            bounds[1] = min(bounds[1], y0c)
            bounds[2] = max(bounds[2], x1c)
            bounds[3] = max(bounds[3], y1c)

    for i in range(n):
        t = i / (n - 1)
        dx, dy, mult = gesture.motion_program(t)
        s = base_scale * mult
        jcx = cx + float(sway[i, 0])
        jcy = cy + float(sway[i, 1])

        frame = background.copy()
        bw, bh = s * _BODY_ASPECT, s
        bx0, bx1 = int(round(jcx - bw / 2)), int(round(jcx + bw / 2))
        by0, by1 = int(round(jcy - bh / 2)), int(round(jcy + bh / 2))
        bx0c, bx1c = max(0, bx0), min(W, max(bx1, bx0 + 1))
        by0c, by1c = max(0, by0), min(H, max(by1, by0 + 1))
        frame[:, by0c:by1c, bx0c:bx1c] = _BODY_VAL
        bounds[0] = min(bounds[0], bx0c)
        bounds[1] = min(bounds[1], by0c)
        bounds[2] = max(bounds[2], bx1c)
        bounds[3] = max(bounds[3], by1c)

        # limb from shoulder to hand, then a brighter hand square
        sx = jcx + math.copysign(0.16, dx if dx else 1.0) * s
        sy = jcy - 0.28 * s
        hx = jcx + dx * s
        hy = jcy + dy * s
        segs = 6
        for j in range(segs + 1):
            f = j / segs
            fill_square(frame, sx + (hx - sx) * f, sy + (hy - sy) * f,
                        _LIMB_WIDTH * s, _LIMB_VAL)
        fill_square(frame, hx, hy, _HAND_SIDE * s, _ARM_VAL)

        if cfg.noise_sigma > 0:
            frame = frame + rng.normal((C, H, W), scale=cfg.noise_sigma)
        frames[i] = frame
    gt_x0, gt_y0, gt_x1, gt_y1 = bounds

    clip = VideoClip(frames=frames, distance_m=float(np.float32(d)), label=gesture.id,
                     fps=n / 4.0)
    return clip, BBox(gt_x0, gt_y0, max(gt_x1, gt_x0 + 1), max(gt_y1, gt_y0 + 1))


# --- clip file format -------------------------------------------------------
# magic "GVID" | u32 version=1 | u16 n_frames | u16 height | u16 width |
# u8 channels | u8 dtype (0 = f32) | f32 distance_m | u16 label_id |
# payload n*C*H*W little-endian f32 in (t, c, y, x) order.
# All header integers little-endian.

_MAGIC = b"GVID"
_HEADER = struct.Struct("<4sIHHHBBfH")
_VERSION = 1


def save_clip(path, clip: VideoClip) -> None:
    n, C, H, W = clip.frames.shape
    header = _HEADER.pack(_MAGIC, _VERSION, n, H, W, C, 0,
                          np.float32(clip.distance_m), clip.label)
    payload = np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_clip(path) -> VideoClip:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, n, H, W, C, dtype_code, distance, label = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise HeaderMismatchError(f"{path}: unsupported version {version}")
    if dtype_code != 0:
        raise HeaderMismatchError(f"{path}: unknown dtype code {dtype_code}")
    expected = n * C * H * W * 4
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise HeaderMismatchError(
            f"{path}: {len(payload) - expected} trailing bytes beyond declared payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, C, H, W).copy()
    return VideoClip(frames=frames, distance_m=float(np.float32(distance)), label=label,
                     fps=n / 4.0)


_MANIFEST_FIELDS = ("path", "distance_m", "label_id", "seed", "split")


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_MANIFEST_FIELDS)
        for r in manifest.records:
            writer.writerow([r.path, repr(r.distance_m), r.label_id, r.seed, r.split])


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != _MANIFEST_FIELDS:
            raise HeaderMismatchError(f"{path}: manifest header {reader.fieldnames} != "
                                      f"{list(_MANIFEST_FIELDS)}")
        for row in reader:
            records.append(ManifestRecord(path=row["path"],
                                          distance_m=float(row["distance_m"]),
                                          label_id=int(row["label_id"]),
                                          seed=int(row["seed"]),
                                          split=row["split"]))
    return DatasetManifest(records=records, root=path.parent)


def generate_dataset(spec: GenSpec, cfg: SceneConfig, out_dir, master_seed: int,
                     manifest_name: str | None = None) -> DatasetManifest:
    """Render a full split to disk and write its manifest.

    Classes rotate round-robin inside each one-meter interval (uniform
    coverage when per_meter_count is a multiple of the class count);
    distances are sampled uniformly within the interval. Per-clip seeds
    are derived from (master_seed, split, interval, index), so train and
    test splits occupy disjoint seed spaces and regeneration with the
    same master seed is byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_id = 0 if spec.split == "train" else 1
    intervals = int(round(spec.meter_stop - spec.meter_start))
    records = []
    clip_idx = 0
    for interval in range(intervals):
        lo = spec.meter_start + interval
        for j in range(spec.per_meter_count):
            gesture = GESTURE_CLASSES[j % N_CLASSES]
            seed = derive_seed(master_seed, split_id, interval, j)
            rng = Rng(seed)
            d = min(rng.uniform(lo, lo + 1.0), spec.meter_stop)
            clip, _gt = render_clip(gesture, d, cfg, rng)
            rel = f"{spec.split}_{clip_idx:05d}.gvid"
            try:
                save_clip(out_dir / rel, clip)
            except OSError as exc:
                raise OSError(f"failed writing clip {out_dir / rel}: {exc}") from exc
            records.append(ManifestRecord(path=rel, distance_m=clip.distance_m,
                                          label_id=gesture.id, seed=seed, split=spec.split))
            clip_idx += 1
    manifest = DatasetManifest(records=records, root=out_dir)
    save_manifest(out_dir / (manifest_name or f"{spec.split}_manifest.csv"), manifest)
    return manifest
