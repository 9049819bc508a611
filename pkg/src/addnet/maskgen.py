"""Landmark-driven attention masks and the mask pyramid fed to the ADD block.

The attention mask is built from two binary hulls: the whole face and the
union of eyes, nose and mouth. Each hull is Gaussian-smoothed, the two are
summed and the sum is divided by its maximum, so deep organ pixels read 1.0,
face-only pixels 0.5 and background 0.0.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DegenerateHull, IncompatibleResolution
from .geometry import LEFT_EYE, MOUTH, NOSE, RIGHT_EYE, Landmark68

EYES = RIGHT_EYE + LEFT_EYE
ORGAN_GROUPS = {"eyes": EYES, "nose": NOSE, "mouth": MOUTH}


class EmptyMaskWarning(UserWarning):
    pass


def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull vertices by the monotone chain; raises on collinear input."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        raise DegenerateHull(f"need 3 distinct points for a hull, got {len(pts)}")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise DegenerateHull("points are collinear")
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1.0)
    x, y = hull[:, 0], hull[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    if area <= 1e-12 * scale * scale:
        raise DegenerateHull("points are collinear")
    return hull


def rasterize_hull_mask(points, size) -> np.ndarray:
    """Binary ``(H, W)`` uint8 mask of pixels whose centres lie in or on the hull of ``points``."""
    w, h = size
    return kernels.fill_convex(convex_hull(points), int(h), int(w))


def make_face_mask(landmarks: Landmark68, size) -> np.ndarray:
    mask = rasterize_hull_mask(landmarks.points, size)
    if not mask.any():
        warnings.warn("face hull does not cover any pixel of the image", EmptyMaskWarning, stacklevel=2)
    return mask


def make_organ_mask(landmarks: Landmark68, size) -> np.ndarray:
    """Union of the eye, nose and mouth hulls; a degenerate organ contributes nothing."""
    w, h = size
    mask = np.zeros((int(h), int(w)), dtype=np.uint8)
    for name, idx in ORGAN_GROUPS.items():
        try:
            mask |= rasterize_hull_mask(landmarks.subset(idx), size)
        except DegenerateHull:
            warnings.warn(f"degenerate {name} hull skipped", EmptyMaskWarning, stacklevel=2)
    return mask


def default_sigma(size) -> float:
    return 0.02 * min(size)


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_mask(mask, sigma: float, kernel_radius: int | None = None) -> np.ndarray:
    """Gaussian smoothing with a normalised kernel and reflected borders, clipped to [0, 1]."""
    kernel = gaussian_kernel1d(sigma, kernel_radius)
    out = kernels.blur_separable(np.asarray(mask, dtype=np.float64), kernel)
    return np.clip(out, 0.0, 1.0)


@dataclass
class AttentionMask:
    values: np.ndarray
    source_landmarks: Landmark68 | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"attention mask must be 2D, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("attention mask values must lie in [0, 1]")
        self.values = v

    @property
    def size(self) -> tuple[int, int]:
        h, w = self.values.shape
        return w, h

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.values * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, array) -> "AttentionMask":
        return cls(np.asarray(array, dtype=np.float64) / 255.0)


def generate_attention_mask(landmarks: Landmark68, size, sigma: float | None = None,
                            kernel_radius: int | None = None) -> AttentionMask:
    """Face + organ hulls, each smoothed, summed and divided by the maximum."""
    if sigma is None:
        sigma = default_sigma(size)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        face = make_face_mask(landmarks, size)
        organs = make_organ_mask(landmarks, size)
    for w in caught:
        warnings.warn(w.message, w.category, stacklevel=2)
    total = smooth_mask(face, sigma, kernel_radius) + smooth_mask(organs, sigma, kernel_radius)
    peak = total.max() if total.size else 0.0
    if peak > 0:
        values = np.clip(total / peak, 0.0, 1.0)
    else:
        values = np.zeros_like(total)
    return AttentionMask(values, landmarks)


@dataclass
class MaskPyramid:
    """Average-pooled copies of one mask, finest first."""

    levels: list = field(default_factory=list)

    def resolutions(self) -> list[tuple[int, int]]:
        return [lvl.size for lvl in self.levels]

    def level_for(self, size) -> AttentionMask:
        size = tuple(int(v) for v in size)
        for lvl in self.levels:
            if lvl.size == size:
                return lvl
        raise IncompatibleResolution(f"no pyramid level at resolution {size}; have {self.resolutions()}")


def avg_pool(values, factor_w: int, factor_h: int) -> np.ndarray:
    h, w = values.shape
    return values.reshape(h // factor_h, factor_h, w // factor_w, factor_w).mean(axis=(1, 3))


def build_mask_pyramid(mask: AttentionMask, target_resolutions) -> MaskPyramid:
    """Level 0 is ``mask`` itself; one further level per distinct target resolution."""
    base_w, base_h = mask.size
    levels = [mask]
    seen = {mask.size}
    for tw, th in sorted({tuple(int(v) for v in t) for t in target_resolutions}, reverse=True):
        if (tw, th) in seen:
            continue
        if tw <= 0 or th <= 0 or base_w % tw or base_h % th:
            raise IncompatibleResolution(f"{tw}x{th} does not evenly divide {base_w}x{base_h}")
        pooled = avg_pool(mask.values, base_w // tw, base_h // th)
        levels.append(AttentionMask(np.clip(pooled, 0.0, 1.0), mask.source_landmarks))
        seen.add((tw, th))
    return MaskPyramid(levels)


def overlay(image, mask: AttentionMask, color=(1.0, 0.0, 0.0), alpha: float = 0.5) -> np.ndarray:
    """Blend a coloured rendition of ``mask`` over a float RGB image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    a = alpha * mask.values[..., None]
    return img * (1 - a) + np.asarray(color, dtype=np.float64) * a
