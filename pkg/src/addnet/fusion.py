"""Attention-based face fusion and synthetic fake-face corpora.

``fuse`` blends a generated face into a source face through an attention mask,
``O = t * (1 - A) + g * A``. Here the generated face is a real donor face warped
onto the source geometry, which leaves the same kind of blending seam a
deepfake pipeline leaves.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientPool, ShapeMismatch
from .facegen import Face
from .geometry import SimilarityTransform, fit_similarity, warp_face
from .maskgen import AttentionMask, generate_attention_mask


@dataclass
class FusionInputs:
    source: np.ndarray
    generated: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64)
        self.generated = np.asarray(self.generated, dtype=np.float64)
        m = self.mask.values if isinstance(self.mask, AttentionMask) else self.mask
        self.mask = np.asarray(m, dtype=np.float64)
        if self.source.shape != self.generated.shape:
            raise ShapeMismatch(f"source {self.source.shape} vs generated {self.generated.shape}")
        if self.mask.shape != self.source.shape[:2]:
            raise ShapeMismatch(f"mask {self.mask.shape} vs image {self.source.shape[:2]}")
        if self.mask.size and (self.mask.min() < 0 or self.mask.max() > 1):
            raise ValueError("attention mask must lie in [0, 1]")


def fuse(source, generated=None, mask=None) -> np.ndarray:
    """Per-pixel, per-channel convex blend; accepts a ``FusionInputs`` or three arrays."""
    inputs = source if isinstance(source, FusionInputs) else FusionInputs(source, generated, mask)
    a = inputs.mask
    if inputs.source.ndim == 3:
        a = a[..., None]
    return inputs.source * (1.0 - a) + inputs.generated * a


def synth_fake(source: Face, donor: Face, sigma: float | None = None, rng_seed: int = 0,
               jitter: float = 0.0) -> tuple[np.ndarray, int]:
    """Fuse ``donor`` onto ``source``; returns the fake image and label 1.

    The donor is warped so its eye and mouth centres land on the source's. The
    seed only drives an optional sub-pixel ``jitter`` of that placement.
    """
    h, w = source.image.shape[:2]
    rng = np.random.default_rng(rng_seed)
    transform = fit_similarity(donor.landmarks.anchors(), source.landmarks.anchors())
    if jitter > 0:
        dx, dy = rng.uniform(-jitter, jitter, size=2)
        transform = SimilarityTransform(1.0, 0.0, (dx, dy)).compose(transform)
    generated, _ = warp_face(donor.image, None, transform, (w, h))
    mask = generate_attention_mask(source.landmarks, (w, h), sigma)
    out = fuse(source.image, generated, mask.values)
    return np.clip(out, 0.0, 1.0), 1


def _split_identities(n: int, test_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    if test_fraction > 0:
        n_test = min(max(n_test, 1), n - 1)
    return sorted(order[n_test:].tolist()), sorted(order[:n_test].tolist())


def build_synthetic_corpus(face_pool, n_real: int, n_fake: int, rng_seed: int, out_dir,
                           test_fraction: float = 0.2, sigma: float | None = None,
                           frames_per_sequence: int = 1, frame_jitter: float = 0.0):
    """Write real and fused faces under ``out_dir`` and return the manifest.

    Identities are split first; every sample, real or fake, draws its source
    and donor from its own split, so no face crosses splits. Sample counts per
    split are proportional to the identity split. Each sample is a sequence of
    ``frames_per_sequence`` frames, later frames perturbed by a small random
    shift of up to ``frame_jitter`` pixels.
    """
    from .data import DatasetManifest, FaceSequence, FaceSample, write_image, write_manifest

    pool = list(face_pool)
    if len(pool) < 2:
        raise InsufficientPool(f"face pool needs at least 2 faces, got {len(pool)}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(rng_seed)
    train_ids, test_ids = _split_identities(len(pool), test_fraction, rng)
    if n_fake > 0:
        for name, ids in (("train", train_ids), ("test", test_ids)):
            if ids and len(ids) < 2:
                raise InsufficientPool(f"{name} split has {len(ids)} identity; fakes need 2")
    frac_test = len(test_ids) / len(pool)

    def per_split(n):
        n_test = int(round(n * frac_test))
        return {"train": n - n_test, "test": n_test}

    plan = []
    reals, fakes = per_split(n_real), per_split(n_fake)
    for split, ids in (("train", train_ids), ("test", test_ids)):
        plan += [(split, 0, ids) for _ in range(reals[split])]
        plan += [(split, 1, ids) for _ in range(fakes[split])]

    sub_seeds = np.random.SeedSequence(rng_seed).spawn(len(plan))
    sequences = []
    counters = {0: 0, 1: 0}
    for (split, label, ids), sub in zip(plan, sub_seeds):
        srng = np.random.default_rng(sub)
        src = pool[ids[srng.integers(len(ids))]]
        donor = None
        if label == 1:
            others = [i for i in ids if pool[i] is not src]
            donor = pool[others[srng.integers(len(others))]]
        seq_id = f"{'fake' if label else 'real'}_{counters[label]:05d}"
        counters[label] += 1
        samples = []
        for f in range(frames_per_sequence):
            face = src
            if f > 0 and frame_jitter > 0:
                shift = SimilarityTransform(1.0, 0.0, tuple(srng.uniform(-frame_jitter, frame_jitter, 2)))
                h, w = src.image.shape[:2]
                img, lm = warp_face(src.image, src.landmarks, shift, (w, h))
                face = Face(img, lm, src.identity)
            if label == 1:
                image, _ = synth_fake(face, donor, sigma, int(srng.integers(2**31)))
            else:
                image = face.image
            rel = Path(seq_id) / f"{f}.png"
            write_image(out_dir / rel, image)
            lm_rel = Path(seq_id) / f"{f}.landmarks.txt"
            face.landmarks.save(out_dir / lm_rel)
            samples.append(FaceSample(str(rel), label, seq_id, f, landmarks_path=str(lm_rel)))
        tag = src.identity if donor is None else f"{src.identity}<-{donor.identity}"
        sequences.append(FaceSequence(seq_id, samples, tag, split))
    manifest = DatasetManifest(sequences, root=out_dir, mode="image" if frames_per_sequence == 1 else "sequence")
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def save_pool(pool, directory) -> None:
    """Write faces as ``<identity>.png`` plus landmark sidecars."""
    from .data import write_image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, face in enumerate(pool):
        stem = face.identity or f"face{i:04d}"
        write_image(directory / f"{stem}.png", face.image)
        face.landmarks.save(directory / f"{stem}.landmarks.txt")


def load_pool(directory) -> list[Face]:
    """Read every image with a landmark sidecar in ``directory``."""
    from .data import read_image
    from .geometry import Landmark68

    directory = Path(directory)
    pool = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        side = path.with_name(f"{path.stem}.landmarks.txt")
        if side.exists():
            pool.append(Face(read_image(path), Landmark68.load(side), path.stem))
    return pool
