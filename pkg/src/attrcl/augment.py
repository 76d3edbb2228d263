"""Random perspective distortion for the teacher-side views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PerspectiveConfig:
    strength: float = 0.2
    apply_prob: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 0.5:
            raise ValueError(f"strength must lie in [0, 0.5], got {self.strength}")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError(f"apply_prob must lie in [0, 1], got {self.apply_prob}")


def source_corners(height: int, width: int) -> np.ndarray:
    """Image corners as (x, y), clockwise from top-left."""
    return np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]],
                    dtype=np.float64)


def jitter_corners(height: int, width: int, strength: float,
                   rng: np.random.Generator) -> np.ndarray:
    # inward moves of at most strength * min(H, W) / 2 per axis keep each
    # corner in its own quadrant margin, so the quad stays convex up to 0.5
    limit = strength * min(height, width) / 2.0
    step = rng.uniform(0.0, limit, size=(4, 2)) if limit > 0 else np.zeros((4, 2))
    inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
    return source_corners(height, width) + inward * step


def solve_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map (h33 = 1) sending four ``src`` points to ``dst``."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k], b[2 * k + 1] = u, v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def warp_perspective(image: np.ndarray, homography: np.ndarray) -> np.ndarray:
    """Inverse-map each output pixel through ``homography`` and sample bilinearly;
    samples outside the source frame read as zero."""
    h, w = image.shape[:2]
    inv = np.linalg.inv(homography)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = inv @ np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    sx, sy = pts[0] / pts[2], pts[1] / pts[2]

    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros((h * w,) + image.shape[2:], dtype=np.float64)
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = np.zeros_like(out)
        vals[ok] = image[yi[ok], xi[ok]]
        if image.ndim == 3:
            wgt = wgt[:, None]
        out += wgt * vals
    return out.reshape(image.shape).astype(image.dtype)


def random_perspective(image: np.ndarray, config: PerspectiveConfig = PerspectiveConfig(),
                       seed=0) -> np.ndarray:
    """Warp ``image`` (H x W or H x W x C) onto a randomly jittered quad."""
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    if config.strength == 0 or rng.random() >= config.apply_prob:
        return image.copy()
    dst = jitter_corners(h, w, config.strength, rng)
    return warp_perspective(image, solve_homography(source_corners(h, w), dst))


def perspective_corners(shape, config: PerspectiveConfig, seed=0) -> np.ndarray | None:
    """The destination corners ``random_perspective`` uses for this seed, or None
    when it returns the image unchanged."""
    rng = np.random.default_rng(seed)
    h, w = shape[:2]
    if config.strength == 0 or rng.random() >= config.apply_prob:
        return None
    return jitter_corners(h, w, config.strength, rng)
