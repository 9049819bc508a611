"""Procedural faces with known landmarks.

No face images ship with the toolkit, so fixtures and synthetic corpora are
drawn from simple rendered faces: a skin-toned hull with eyes, brows, nose and
mouth placed on a 68-point template, over a textured background.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import DEFAULT_LAYOUT, CanonicalLayout, Landmark68, SimilarityTransform
from .maskgen import convex_hull, smooth_mask


def _arc(cx, cy, rx, ry, start, stop, n):
    t = np.linspace(start, stop, n)
    return np.column_stack([cx + rx * np.cos(t), cy + ry * np.sin(t)])


def _ellipse(cx, cy, rx, ry, n, phase=np.pi):
    t = phase + np.arange(n) * 2 * np.pi / n
    return np.column_stack([cx + rx * np.cos(t), cy + ry * np.sin(t)])


def template_points(layout: CanonicalLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """68 landmark positions in unit coordinates whose anchors match ``layout``."""
    (rx_, ry_), (lx_, ly_), (mx_, my_) = layout.right_eye, layout.left_eye, layout.mouth
    eye_dx = lx_ - rx_
    cx = 0.5 * (rx_ + lx_)
    # jaw runs from the image-left temple, under the chin, to the image-right temple
    jaw = _arc(cx, ry_, 0.87 * eye_dx, 1.5 * (my_ - ry_), np.pi, 0.0, 17)
    brow_r = _arc(rx_, ry_ - 0.06, 0.09, 0.03, np.pi + 0.3, 2 * np.pi - 0.3, 5)
    brow_l = _arc(lx_, ly_ - 0.06, 0.09, 0.03, np.pi + 0.3, 2 * np.pi - 0.3, 5)
    nose_bridge = np.column_stack([np.full(4, cx), np.linspace(ry_ + 0.01, ry_ + 0.15, 4)])
    nose_base = np.column_stack([np.linspace(cx - 0.06, cx + 0.06, 5),
                                 ry_ + 0.19 + 0.015 * np.cos(np.linspace(-1.2, 1.2, 5))])
    eye_r = _ellipse(rx_, ry_, 0.07, 0.028, 6)
    eye_l = _ellipse(lx_, ly_, 0.07, 0.028, 6)
    # means of the 6-point ellipses are exactly the centres by symmetry
    mouth_outer = _ellipse(mx_, my_, 0.13, 0.055, 12)
    mouth_inner = _ellipse(mx_, my_, 0.08, 0.022, 8)
    pts = np.vstack([jaw, brow_r, brow_l, nose_bridge, nose_base, eye_r, eye_l, mouth_outer, mouth_inner])
    assert pts.shape == (68, 2)
    return pts


def template_landmarks(size, layout: CanonicalLayout = DEFAULT_LAYOUT) -> Landmark68:
    """Template landmarks scaled to an image of ``size`` (W, H)."""
    w, h = size
    return Landmark68(template_points(layout) * np.array([w, h], dtype=np.float64))


def random_landmarks(rng: np.random.Generator, size, jitter: float = 0.01, pose: float = 0.08) -> Landmark68:
    """Template landmarks under a random similarity pose plus per-point jitter (fractions of size)."""
    w, h = size
    base = template_landmarks(size).points
    centre = np.array([w / 2, h / 2])
    angle = rng.uniform(-0.3, 0.3) * pose / 0.08
    scale = 1.0 + rng.uniform(-pose, pose)
    shift = rng.uniform(-pose, pose, size=2) * np.array([w, h]) * 0.5
    t = SimilarityTransform(scale, angle, tuple(centre + shift))
    moved = t.apply(base - centre)
    moved += rng.normal(0.0, jitter, size=moved.shape) * np.array([w, h])
    return Landmark68(moved)


def _fill(canvas, points, color, softness=0.0):
    h, w, _ = canvas.shape
    region = kernels.fill_convex(convex_hull(points), h, w).astype(np.float64)
    if softness > 0:
        region = smooth_mask(region, softness)
    a = region[..., None]
    canvas *= 1 - a
    canvas += a * np.asarray(color, dtype=np.float64)


def _texture(rng, h, w, c, scale):
    coarse = rng.normal(0.0, 1.0, size=(max(h // 8, 2), max(w // 8, 2), c))
    ys = np.linspace(0, coarse.shape[0] - 1, h)
    xs = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.floor(ys).astype(int).clip(0, coarse.shape[0] - 2)
    x0 = np.floor(xs).astype(int).clip(0, coarse.shape[1] - 2)
    ay = (ys - y0)[:, None, None]
    ax = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    smooth = c00 * (1 - ax) * (1 - ay) + c01 * ax * (1 - ay) + c10 * (1 - ax) * ay + c11 * ax * ay
    return scale * smooth


@dataclass
class Face:
    """An RGB float image in [0, 1] with its landmarks."""

    image: np.ndarray
    landmarks: Landmark68
    identity: str = ""


def render_face(rng: np.random.Generator, size=(64, 64), identity: str = "") -> Face:
    w, h = size
    lm = random_landmarks(rng, size)
    bg = rng.uniform(0.05, 0.95, size=3)
    canvas = np.ones((h, w, 3)) * bg + _texture(rng, h, w, 3, 0.08)
    skin = np.array([rng.uniform(0.45, 0.95), rng.uniform(0.3, 0.8), rng.uniform(0.2, 0.7)])
    face_pts = lm.points
    _fill(canvas, face_pts, skin, softness=0.6)
    shade = _texture(rng, h, w, 1, 0.06)
    face_region = kernels.fill_convex(convex_hull(face_pts), h, w)[..., None].astype(np.float64)
    canvas += shade * face_region
    brow = skin * rng.uniform(0.2, 0.5)
    _fill(canvas, lm.subset(range(17, 22)) + [0, -0.01 * h], brow)
    _fill(canvas, lm.subset(range(22, 27)) + [0, -0.01 * h], brow)
    sclera = np.array([0.92, 0.92, 0.9])
    iris = rng.uniform(0.05, 0.5, size=3)
    for idx in (range(36, 42), range(42, 48)):
        pts = lm.subset(idx)
        _fill(canvas, pts, sclera)
        c = pts.mean(axis=0)
        _fill(canvas, c + (pts - c) * np.array([0.45, 0.9]), iris)
    _fill(canvas, lm.subset(range(31, 36)).tolist() + [lm.points[30].tolist()], skin * 0.75, softness=0.5)
    lip = np.array([rng.uniform(0.55, 0.85), rng.uniform(0.15, 0.4), rng.uniform(0.2, 0.4)])
    _fill(canvas, lm.subset(range(48, 60)), lip)
    _fill(canvas, lm.subset(range(60, 68)), lip * 0.5)
    canvas += rng.normal(0.0, 0.01, size=canvas.shape)
    return Face(np.clip(canvas, 0.0, 1.0), lm, identity)


def render_pool(n: int, size=(64, 64), seed: int = 0) -> list[Face]:
    """``n`` distinct procedural identities; deterministic in ``seed``."""
    seeds = np.random.SeedSequence(seed).spawn(n)
    return [render_face(np.random.default_rng(s), size, identity=f"id{i:04d}") for i, s in enumerate(seeds)]
