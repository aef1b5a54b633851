"""Synthetic sprite videos with known cross-frame semantics.

Every video shows one sprite (shape x palette) moving under one of two
motion laws in front of a background gradient that is fixed per style
class. Sprite identity is constant across frames, which gives tests an
exact ground truth for "semantic consistency".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .containers import ensure_dir, read_video, write_video
from .errors import DimensionError, DomainError
from .seeding import derive, np_rng

SHAPES = ("circle", "square", "triangle")
MOTIONS = ("linear-bounce", "circular-orbit")

# Fixed sprite colors, one triple per palette id.
PALETTES = (
    (0.95, 0.30, 0.22),
    (0.25, 0.88, 0.35),
    (0.30, 0.50, 0.96),
)

NUM_CLASSES = len(SHAPES) * len(PALETTES) * len(MOTIONS)

# sprites are large and fast relative to the frame so adjacent frames differ
# substantially at the token level (cross-frame structure is measurable)
SPRITE_RADIUS_FRAC = 0.22
BOUNCE_SPEED_FRAC = 0.10
ORBIT_RADIUS_FRAC = 0.24
ORBIT_STEP_RAD = 0.9


@dataclass(frozen=True)
class StyleClass:
    """One of the 18 shape x palette x motion combinations."""

    id: int
    shape: str
    palette: int
    motion: str

    @staticmethod
    def from_id(class_id: int) -> "StyleClass":
        if not 0 <= class_id < NUM_CLASSES:
            raise DomainError(f"class_id must be in [0, {NUM_CLASSES}); got {class_id}")
        shape_idx, rest = divmod(class_id, len(PALETTES) * len(MOTIONS))
        palette_idx, motion_idx = divmod(rest, len(MOTIONS))
        return StyleClass(class_id, SHAPES[shape_idx], palette_idx, MOTIONS[motion_idx])

    @staticmethod
    def all() -> list["StyleClass"]:
        return [StyleClass.from_id(i) for i in range(NUM_CLASSES)]


@dataclass(frozen=True)
class VideoSpec:
    """Everything that determines a video, bit for bit."""

    class_id: int
    frames: int
    height: int
    width: int
    seed: int

    def validate(self) -> None:
        if not 0 <= self.class_id < NUM_CLASSES:
            raise DomainError(f"unknown class_id {self.class_id}")
        if self.frames < 2:
            raise DimensionError(f"frames must be >= 2; got {self.frames}")
        if self.height != self.width:
            raise DimensionError(f"frames must be square; got {self.height}x{self.width}")
        if self.height < 16 or self.height % 2:
            raise DimensionError(f"side must be an even integer >= 16; got {self.height}")


def class_background(class_id: int, height: int, width: int) -> np.ndarray:
    """Fixed per-class gradient, (H, W, 3) in [0, 1].

    Ramp colors and direction are deterministic functions of the class id,
    chosen so the 18 mean background colors are pairwise distinct.
    """
    if not 0 <= class_id < NUM_CLASSES:
        raise DomainError(f"unknown class_id {class_id}")
    phi = 2.0 * math.pi * class_id / NUM_CLASSES
    chan = np.array([0.0, 2.094, 4.189])
    c0 = 0.22 + 0.13 * np.cos(phi + chan)
    c1 = 0.30 + 0.13 * np.cos(phi + 2.1 + chan)
    theta = math.pi * class_id / NUM_CLASSES
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ramp = xs * math.cos(theta) + ys * math.sin(theta)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    bg = c0[None, None, :] + ramp[:, :, None] * (c1 - c0)[None, None, :]
    return np.clip(bg, 0.0, 1.0)


def _fold(value: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Reflect an unbounded coordinate into [lo, hi] (triangle wave)."""
    period = 2.0 * (hi - lo)
    q = np.mod(value - lo, period)
    return lo + np.minimum(q, period - q)


def sprite_trajectory(spec: VideoSpec) -> np.ndarray:
    """Ground-truth sprite centers, (F, 2) as (x, y) in pixel units."""
    spec.validate()
    style = StyleClass.from_id(spec.class_id)
    rng = np_rng(spec.seed, "trajectory", spec.class_id)
    h = float(spec.height)
    r = SPRITE_RADIUS_FRAC * h
    t = np.arange(spec.frames, dtype=np.float64)
    if style.motion == "linear-bounce":
        lo, hi = r + 1.0, h - 2.0 - r
        p0 = rng.uniform(lo, hi, size=2)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        v = BOUNCE_SPEED_FRAC * h * np.array([math.cos(ang), math.sin(ang)])
        # avoid near-zero velocity components so reflections stay well defined
        v = np.where(np.abs(v) < 0.2 * BOUNCE_SPEED_FRAC * h,
                     0.2 * BOUNCE_SPEED_FRAC * h * np.sign(v + 1e-12), v)
        raw = p0[None, :] + t[:, None] * v[None, :]
        return np.stack([_fold(raw[:, 0], lo, hi), _fold(raw[:, 1], lo, hi)], axis=1)
    center = (h - 1.0) / 2.0
    orbit_r = ORBIT_RADIUS_FRAC * h
    phase0 = rng.uniform(0.0, 2.0 * math.pi)
    ang = phase0 + ORBIT_STEP_RAD * t
    return np.stack([center + orbit_r * np.cos(ang), center + orbit_r * np.sin(ang)], axis=1)


def _sprite_mask(shape: str, cx: float, cy: float, radius: float, side: int) -> np.ndarray:
    """Boolean sprite mask on a side x side supersampled canvas."""
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= radius * radius
    if shape == "square":
        s = radius * 0.9
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    # upward triangle inscribed in the radius
    top = -radius
    base = radius * 0.8
    half_w = radius * 0.95
    inside = (dy >= top) & (dy <= base)
    # width shrinks linearly toward the apex
    frac = np.clip((dy - top) / (base - top + 1e-12), 0.0, 1.0)
    return inside & (np.abs(dx) <= half_w * frac)


def render_frame(shape: str, color, center, radius: float, background: np.ndarray) -> np.ndarray:
    """Render one anti-aliased sprite over a background (2x supersampling)."""
    h, w = background.shape[:2]
    super_bg = np.repeat(np.repeat(background, 2, axis=0), 2, axis=1)
    # pixel (i, j) covers super pixels 2i..2i+1; its center maps to 2*c + 0.5
    mask = _sprite_mask(shape, 2.0 * center[0] + 0.5, 2.0 * center[1] + 0.5, 2.0 * radius, 2 * h)
    frame = np.where(mask[:, :, None], np.asarray(color, dtype=np.float64)[None, None, :], super_bg)
    frame = frame.reshape(h, 2, w, 2, 3).mean(axis=(1, 3))
    return np.clip(frame, 0.0, 1.0)


def generate_video(spec: VideoSpec, *, static: bool = False) -> np.ndarray:
    """Render a video for ``spec``; (F, H, W, 3) float32 in [0, 1].

    Pure in ``spec``: identical specs give bit-identical tensors. With
    ``static=True`` the sprite is pinned to its first position (used by
    tests that need a motionless variant).
    """
    spec.validate()
    style = StyleClass.from_id(spec.class_id)
    bg = class_background(spec.class_id, spec.height, spec.width)
    centers = sprite_trajectory(spec)
    if static:
        centers = np.repeat(centers[:1], spec.frames, axis=0)
    radius = SPRITE_RADIUS_FRAC * spec.height
    color = PALETTES[style.palette]
    frames = [
        render_frame(style.shape, color, centers[f], radius, bg)
        for f in range(spec.frames)
    ]
    return np.stack(frames).astype(np.float32)


def extract_sprite_attributes(frame: np.ndarray) -> tuple[str, int]:
    """Recover (shape, palette id) from one clean frame.

    Matches the frame against all class backgrounds, segments the sprite as
    the residual, then reads the palette from the masked mean color and the
    shape from bounding-box fill plus vertical asymmetry (triangles are
    bottom-heavy). Reliable at the default 32 px resolution.
    """
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[:2]
    residuals = []
    for cid in range(NUM_CLASSES):
        diff = np.abs(frame - class_background(cid, h, w)).sum(axis=2)
        residuals.append((np.median(diff), cid))
    _, best = min(residuals)
    diff = np.abs(frame - class_background(best, h, w)).sum(axis=2)
    mask = diff > 0.25
    if not mask.any():
        raise DomainError("no sprite found in frame")
    color = frame[mask].mean(axis=0)
    palette = int(np.argmin([np.abs(color - np.array(p)).sum() for p in PALETTES]))
    ys, xs = np.nonzero(mask)
    bbox_h = ys.max() - ys.min() + 1
    fill = mask.sum() / (bbox_h * (xs.max() - xs.min() + 1))
    asym = (ys.mean() - (ys.max() + ys.min()) / 2.0) / bbox_h
    if asym > 0.06:
        shape = "triangle"
    elif fill > 0.91:
        shape = "square"
    else:
        shape = "circle"
    return shape, palette


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_id: int
    seed: int

    @property
    def split(self) -> str:
        return "train" if self.seed % 2 == 0 else "test"


def generate_dataset(
    out_dir,
    n_per_class: int = 4,
    frames: int = 8,
    size: int = 32,
    master_seed: int = 0,
    classes=None,
) -> list[ManifestEntry]:
    """Write videos plus a JSONL manifest; deterministic in ``master_seed``.

    Per-video seeds carry the train/test split in their parity: video i of
    each class gets parity i % 2, so even seeds are train, odd are test.
    """
    if n_per_class < 1:
        raise DomainError(f"n_per_class must be >= 1; got {n_per_class}")
    out = ensure_dir(out_dir)
    class_ids = list(classes) if classes is not None else list(range(NUM_CLASSES))
    entries: list[ManifestEntry] = []
    for cid in class_ids:
        for i in range(n_per_class):
            seed = (derive(master_seed, "video", cid, i) >> 1 << 1) | (i & 1)
            spec = VideoSpec(cid, frames, size, size, seed)
            name = f"class{cid:02d}_v{i:03d}.crpv"
            write_video(out / name, generate_video(spec))
            entries.append(ManifestEntry(name, cid, seed))
    with open(out / "manifest.jsonl", "w") as fh:
        for e in entries:
            fh.write(json.dumps({"path": e.path, "class_id": e.class_id, "seed": e.seed}) + "\n")
    return entries


def load_manifest(manifest_path) -> list[ManifestEntry]:
    entries = []
    with open(manifest_path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                entries.append(ManifestEntry(rec["path"], rec["class_id"], rec["seed"]))
    return entries


def load_video(entry: ManifestEntry, root) -> np.ndarray:
    return read_video(Path(root) / entry.path)


def video_from_entry(entry: ManifestEntry, frames: int, size: int) -> np.ndarray:
    """Re-render a manifest entry's video from its spec (no file needed)."""
    return generate_video(VideoSpec(entry.class_id, frames, size, size, entry.seed))
