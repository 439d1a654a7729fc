"""Deterministic synthetic video clips: moving shapes over textured backgrounds.

Clips are float64 arrays in [0, 1] with layout [T, H, W, C]. A SceneSpec fully
determines a clip; rendering twice yields bit-identical arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class VideoClip:
    frames: np.ndarray          # [T, H, W, C], values in [0, 1]
    frame_rate: float = 8.0
    clip_id: str = ""

    def validate(self, block_length: int | None = None) -> "VideoClip":
        f = self.frames
        if f.ndim != 4:
            raise ShapeError(f"frames must be [T,H,W,C], got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ShapeError("frames contain non-finite values")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ShapeError("frame values outside [0, 1]")
        if block_length is not None and f.shape[0] % block_length != 0:
            raise ConfigError(
                f"T_frames={f.shape[0]} is not a multiple of block length {block_length}")
        return self

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class SceneSpec:
    kind: str = "square"          # "square" or "disc"
    position: tuple = (4.0, 4.0)  # (x, y) in pixels, shape centre
    velocity: tuple = (1.0, 0.0)  # (dx, dy) pixels per frame
    contrast: float = 0.4         # added intensity of the shape
    texture_seed: int = 0         # background value-noise seed
    seed: int = 0                 # reserved for future stochastic elements

    def validate(self) -> "SceneSpec":
        if self.kind not in ("square", "disc"):
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        if self.contrast < 0:
            raise ConfigError("contrast must be >= 0")
        return self


def _value_noise_background(seed: int, H: int, W: int, amplitude: float = 0.08,
                            base: float = 0.42, cells: int = 4) -> np.ndarray:
    """Smooth seeded background: bilinear upsample of a coarse random grid."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, H)
    xs = np.linspace(0.0, cells, W)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    field = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
             + c10 * fy * (1 - fx) + c11 * fy * fx)
    return base + amplitude * field


def _reflect_position(p: float, lo: float, hi: float) -> float:
    """Fold a coordinate back into [lo, hi] with mirror reflection."""
    span = hi - lo
    if span <= 0:
        return lo
    q = (p - lo) % (2 * span)
    return lo + (q if q <= span else 2 * span - q)


def _coverage_1d(coords: np.ndarray, centre: float, half: float) -> np.ndarray:
    """Overlap of each unit pixel [c-0.5, c+0.5] with [centre-half, centre+half]."""
    left = np.maximum(coords - 0.5, centre - half)
    right = np.minimum(coords + 0.5, centre + half)
    return np.clip(right - left, 0.0, 1.0)


def _shape_mask(kind: str, cx: float, cy: float, H: int, W: int,
                half: float) -> np.ndarray:
    ys = np.arange(H, dtype=np.float64)
    xs = np.arange(W, dtype=np.float64)
    if kind == "square":
        return _coverage_1d(ys, cy, half)[:, None] * _coverage_1d(xs, cx, half)[None, :]
    # disc: smooth radial falloff about one pixel wide at the rim
    dy = ys[:, None] - cy
    dx = xs[None, :] - cx
    r = np.sqrt(dy * dy + dx * dx)
    return np.clip(half + 0.5 - r, 0.0, 1.0)


def shape_half_extent(H: int, W: int) -> float:
    """Half-width of the rendered shape at a given resolution."""
    return max(2.0, 0.14 * min(H, W))


def analytic_trajectory(spec: SceneSpec, T_frames: int, H: int,
                        W: int) -> np.ndarray:
    """Ground-truth shape centres [(cx, cy)] per frame, reflection included."""
    half = shape_half_extent(H, W)
    vx, vy = float(spec.velocity[0]), float(spec.velocity[1])
    x, y = float(spec.position[0]), float(spec.position[1])
    out = np.empty((T_frames, 2), dtype=np.float64)
    for k in range(T_frames):
        out[k, 0] = _reflect_position(x + vx * k, half, W - 1 - half)
        out[k, 1] = _reflect_position(y + vy * k, half, H - 1 - half)
    return out


def render_clip(spec: SceneSpec, T_frames: int, H: int, W: int,
                block_length: int = 3) -> VideoClip:
    """Render a deterministic clip; the shape translates by `velocity` each frame
    with mirror reflection at the frame bounds."""
    spec.validate()
    if T_frames <= 0 or H <= 0 or W <= 0:
        raise ConfigError("T_frames, H, W must be positive")
    if T_frames % block_length != 0:
        raise ConfigError(
            f"T_frames={T_frames} must be a multiple of block length {block_length}")
    vx, vy = float(spec.velocity[0]), float(spec.velocity[1])
    if np.hypot(vx, vy) >= min(H, W):
        raise ConfigError("velocity magnitude >= min(H, W) per frame is degenerate")

    half = shape_half_extent(H, W)
    bg = _value_noise_background(spec.texture_seed, H, W)
    centres = analytic_trajectory(spec, T_frames, H, W)
    frames = np.empty((T_frames, H, W, 1), dtype=np.float64)
    for k in range(T_frames):
        mask = _shape_mask(spec.kind, centres[k, 0], centres[k, 1], H, W, half)
        frames[k, :, :, 0] = np.clip(bg + spec.contrast * mask, 0.0, 1.0)
    return VideoClip(frames=frames, clip_id=f"scene-{spec.texture_seed}-{spec.seed}")


def scene_for_clip(dataset_seed: int, clip_index: int, H: int, W: int) -> SceneSpec:
    """Deterministic per-clip scene parameters derived from (seed, index)."""
    ss = np.random.SeedSequence([dataset_seed, clip_index])
    rng = np.random.default_rng(np.random.PCG64(ss))
    kind = "square" if rng.random() < 0.5 else "disc"
    margin = max(3.0, 0.2 * min(H, W))
    pos = (rng.uniform(margin, W - 1 - margin), rng.uniform(margin, H - 1 - margin))
    speed = rng.uniform(0.4, 1.4)
    angle = rng.uniform(0.0, 2 * np.pi)
    vel = (speed * np.cos(angle), speed * np.sin(angle))
    contrast = rng.uniform(0.25, 0.4)
    return SceneSpec(kind=kind, position=pos, velocity=vel, contrast=contrast,
                     texture_seed=int(rng.integers(0, 2 ** 31)), seed=clip_index)


def dataset_iter(seed: int, n_clips: int, batch: int, T_frames: int = 12,
                 H: int = 16, W: int = 16,
                 block_length: int = 3) -> Iterator[list[VideoClip]]:
    """One epoch of clips in a seed-reproducible shuffled order, never repeating."""
    if batch < 1 or n_clips < batch:
        raise ConfigError(f"need n_clips >= batch >= 1, got {n_clips}, {batch}")
    order = np.random.default_rng(np.random.PCG64(seed)).permutation(n_clips)
    for start in range(0, n_clips - batch + 1, batch):
        out = []
        for idx in order[start:start + batch]:
            spec = scene_for_clip(seed, int(idx), H, W)
            clip = render_clip(spec, T_frames, H, W, block_length)
            clip.clip_id = str(int(idx))
            out.append(clip)
        yield out


def shape_centroid(frame: np.ndarray, background: np.ndarray) -> tuple[float, float]:
    """(x, y) intensity centroid of frame minus background; brute-force scan."""
    diff = np.maximum(frame[:, :, 0] - background[:, :, 0], 0.0)
    total = diff.sum()
    if total <= 0:
        raise ValueError("no shape intensity above background")
    ys, xs = np.mgrid[0:frame.shape[0], 0:frame.shape[1]]
    return float((xs * diff).sum() / total), float((ys * diff).sum() / total)
