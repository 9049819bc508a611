"""Facial landmarks, similarity transforms and face alignment."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import kernels
from .errors import DegenerateLandmarks

JAW = tuple(range(0, 17))
BROWS = tuple(range(17, 27))
NOSE = tuple(range(27, 36))
RIGHT_EYE = tuple(range(36, 42))
LEFT_EYE = tuple(range(42, 48))
MOUTH = tuple(range(48, 68))


def _hull_area(points):
    from scipy.spatial import ConvexHull, QhullError

    try:
        return ConvexHull(points).volume
    except (QhullError, ValueError):
        return 0.0


@dataclass(frozen=True)
class Landmark68:
    """68 ``(x, y)`` pixel coordinates in the standard 68-point ordering."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (68, 2):
            raise ValueError(f"expected 68 (x, y) points, got array of shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def subset(self, indices) -> np.ndarray:
        return self.points[list(indices)]

    @property
    def right_eye_center(self) -> np.ndarray:
        return self.subset(RIGHT_EYE).mean(axis=0)

    @property
    def left_eye_center(self) -> np.ndarray:
        return self.subset(LEFT_EYE).mean(axis=0)

    @property
    def mouth_center(self) -> np.ndarray:
        return self.subset(MOUTH).mean(axis=0)

    def anchors(self) -> np.ndarray:
        """Right eye centre, left eye centre, mouth centre as a (3, 2) array."""
        return np.stack([self.right_eye_center, self.left_eye_center, self.mouth_center])

    def hull_area(self) -> float:
        return _hull_area(self.points)

    def transformed(self, transform: "SimilarityTransform") -> "Landmark68":
        return Landmark68(transform.apply(self.points))

    def to_text(self) -> str:
        return "\n".join(f"{x:.6f} {y:.6f}" for x, y in self.points) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Landmark68":
        values = [float(v) for v in re.split(r"[\s,]+", text.strip()) if v]
        if len(values) != 136:
            raise ValueError(f"landmark record needs 136 numbers, found {len(values)}")
        return cls(np.array(values).reshape(68, 2))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Landmark68":
        return cls.from_text(Path(path).read_text())


class LandmarkProvider(Protocol):
    """Anything that maps an image array to its 68 landmarks (e.g. an external detector)."""

    def __call__(self, image: np.ndarray) -> Landmark68: ...


class SidecarLandmarks:
    """Landmark provider backed by ``<stem>.landmarks.txt`` files next to images."""

    def __init__(self, directory=None):
        self.directory = None if directory is None else Path(directory)

    def path_for(self, image_path) -> Path:
        image_path = Path(image_path)
        base = self.directory if self.directory is not None else image_path.parent
        return base / f"{image_path.stem}.landmarks.txt"

    def for_path(self, image_path) -> Landmark68:
        return Landmark68.load(self.path_for(image_path))


@dataclass(frozen=True)
class SimilarityTransform:
    """``p' = scale * R(rotation) @ p + translation`` in image coordinates (y down)."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "SimilarityTransform":
        m = np.asarray(matrix, dtype=np.float64)
        a, b = m[0, 0], m[1, 0]
        return cls(math.hypot(a, b), math.atan2(b, a), (m[0, 2], m[1, 2]))

    @property
    def matrix(self) -> np.ndarray:
        """2x3 affine matrix."""
        c = self.scale * math.cos(self.rotation)
        s = self.scale * math.sin(self.rotation)
        tx, ty = self.translation
        return np.array([[c, -s, tx], [s, c, ty]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        m = self.matrix
        return pts @ m[:, :2].T + m[:, 2]

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c = inv_scale * math.cos(-self.rotation)
        s = inv_scale * math.sin(-self.rotation)
        tx, ty = self.translation
        return SimilarityTransform(inv_scale, -self.rotation, (-(c * tx - s * ty), -(s * tx + c * ty)))

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform applying ``other`` first, then ``self``."""
        a = np.vstack([self.matrix, [0, 0, 1]])
        b = np.vstack([other.matrix, [0, 0, 1]])
        return SimilarityTransform.from_matrix(a @ b)


@dataclass(frozen=True)
class CanonicalLayout:
    """Target anchor positions, as fractions of the output width/height."""

    right_eye: tuple[float, float] = (0.35, 0.40)
    left_eye: tuple[float, float] = (0.65, 0.40)
    mouth: tuple[float, float] = (0.50, 0.75)

    def anchors(self, output_size) -> np.ndarray:
        w, h = output_size
        frac = np.array([self.right_eye, self.left_eye, self.mouth], dtype=np.float64)
        return frac * np.array([w, h], dtype=np.float64)


DEFAULT_LAYOUT = CanonicalLayout()


def fit_similarity(src, dst) -> SimilarityTransform:
    """Least-squares similarity transform taking ``src`` points onto ``dst`` points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    # unknowns (a, b, tx, ty) with x' = a x - b y + tx, y' = b x + a y + ty
    design = np.zeros((2 * n, 4))
    design[0::2] = np.column_stack([src[:, 0], -src[:, 1], np.ones(n), np.zeros(n)])
    design[1::2] = np.column_stack([src[:, 1], src[:, 0], np.zeros(n), np.ones(n)])
    target = dst.reshape(-1)
    (a, b, tx, ty), *_ = np.linalg.lstsq(design, target, rcond=None)
    scale = math.hypot(a, b)
    if not scale > 0:
        raise DegenerateLandmarks("similarity fit collapsed to zero scale")
    return SimilarityTransform(scale, math.atan2(b, a), (tx, ty))


def estimate_alignment(landmarks: Landmark68, canonical: CanonicalLayout = DEFAULT_LAYOUT,
                       output_size=(224, 224)) -> SimilarityTransform:
    """Similarity transform taking the eye and mouth centres onto the canonical layout."""
    right, left = landmarks.right_eye_center, landmarks.left_eye_center
    if np.linalg.norm(right - left) <= 1e-9:
        raise DegenerateLandmarks("eye centres coincide (zero inter-ocular distance)")
    if landmarks.hull_area() <= 0.0:
        raise DegenerateLandmarks("landmark convex hull has zero area")
    return fit_similarity(landmarks.anchors(), canonical.anchors(output_size))


def warp_face(image, landmarks: Landmark68 | None, transform: SimilarityTransform, output_size):
    """Resample ``image`` through ``transform`` into an ``output_size`` (W, H) frame.

    Bilinear interpolation; pixels mapping outside the source are zero. Returns
    the warped image (same dtype family as the input, float64 for floats) and
    the transformed landmarks (or ``None``).
    """
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("image is empty")
    w, h = (int(v) for v in output_size)
    if w <= 0 or h <= 0:
        raise ValueError(f"output size must be positive, got {output_size}")
    squeeze = img.ndim == 2
    src = img[..., None] if squeeze else img
    is_int = np.issubdtype(src.dtype, np.integer)
    out = kernels.warp_bilinear(src.astype(np.float64), transform.inverse().matrix, h, w)
    if is_int:
        info = np.iinfo(src.dtype)
        out = np.clip(np.rint(out), info.min, info.max).astype(src.dtype)
    if squeeze:
        out = out[..., 0]
    mapped = None if landmarks is None else landmarks.transformed(transform)
    return out, mapped


def align_face(image, landmarks: Landmark68, output_size=(224, 224),
               canonical: CanonicalLayout = DEFAULT_LAYOUT):
    """Estimate the canonical alignment and warp in one step."""
    transform = estimate_alignment(landmarks, canonical, output_size)
    return warp_face(image, landmarks, transform, output_size)
