"""Dataset manifests, frame loading and batch sampling.

A manifest is a JSON-lines file. The first line is a header
``{"schema_version": 1, "mode": "image" | "sequence" | "any"}``; every other
line describes one face sequence::

    {"sequence_id": "real_00000", "label": 0, "split": "train",
     "source_tag": "id0003",
     "frames": [{"frame_index": 0, "image": "real_00000/0.png",
                 "landmarks": "real_00000/0.landmarks.txt"}]}

Paths are relative to the manifest's directory. ``landmarks`` may also be an
inline list of 68 ``[x, y]`` pairs, or absent.
"""
from __future__ import annotations

import json
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .errors import EmptySplit, MissingFile, NoEligibleSequence, SchemaError
from .geometry import Landmark68
from .maskgen import generate_attention_mask

SCHEMA_VERSION = 1
SPLITS = ("train", "test")
MODES = ("image", "sequence", "any")


def read_image(path) -> np.ndarray:
    """RGB float64 image in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, array) -> None:
    """Write a float image in [0, 1] (or uint8) as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


@dataclass
class FaceSample:
    image_path: str
    label: int
    sequence_id: str
    frame_index: int
    landmarks: Landmark68 | None = None
    landmarks_path: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {self.label!r}")
        if int(self.frame_index) < 0:
            raise SchemaError(f"frame_index must be >= 0, got {self.frame_index}")


@dataclass
class FaceSequence:
    sequence_id: str
    samples: list
    source_tag: str = ""
    split: str = "train"

    def __post_init__(self):
        labels = {s.label for s in self.samples}
        if len(labels) > 1:
            raise SchemaError(f"sequence {self.sequence_id} mixes labels {sorted(labels)}")
        idx = [s.frame_index for s in self.samples]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise SchemaError(f"sequence {self.sequence_id} frame indices not strictly increasing")
        if self.split not in SPLITS:
            raise SchemaError(f"sequence {self.sequence_id} has unknown split {self.split!r}")

    @property
    def label(self) -> int:
        return self.samples[0].label if self.samples else 0

    def __len__(self):
        return len(self.samples)


@dataclass
class DatasetManifest:
    sequences: list
    root: Path = Path(".")
    mode: str = "any"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.root = Path(self.root)
        seen = {}
        for seq in self.sequences:
            if seq.sequence_id in seen:
                raise SchemaError(f"sequence_id {seq.sequence_id!r} appears more than once "
                                  f"(splits {seen[seq.sequence_id]} and {seq.split})")
            seen[seq.sequence_id] = seq.split
        if self.mode not in MODES:
            raise SchemaError(f"unknown manifest mode {self.mode!r}")

    def split(self, name: str) -> list:
        return [s for s in self.sequences if s.split == name]

    def split_counts(self) -> dict:
        return {name: len(self.split(name)) for name in SPLITS}

    def frames(self, split) -> list:
        seqs = self.split(split) if isinstance(split, str) else list(split)
        return [smp for seq in seqs for smp in seq.samples]

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def with_splits(self, assignment: dict) -> "DatasetManifest":
        seqs = [FaceSequence(s.sequence_id, s.samples, s.source_tag, assignment.get(s.sequence_id, s.split))
                for s in self.sequences]
        return DatasetManifest(seqs, self.root, self.mode, self.schema_version)


def _sample_record(smp: FaceSample) -> dict:
    rec = {"frame_index": smp.frame_index, "image": smp.image_path}
    if smp.landmarks_path is not None:
        rec["landmarks"] = smp.landmarks_path
    elif smp.landmarks is not None:
        rec["landmarks"] = smp.landmarks.points.round(6).tolist()
    return rec


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"schema_version": manifest.schema_version, "mode": manifest.mode})]
    for seq in manifest.sequences:
        lines.append(json.dumps({
            "sequence_id": seq.sequence_id,
            "label": seq.label,
            "split": seq.split,
            "source_tag": seq.source_tag,
            "frames": [_sample_record(s) for s in seq.samples],
        }))
    path.write_text("\n".join(lines) + "\n")


def _parse_sequence(rec: dict, lineno: int) -> FaceSequence:
    try:
        seq_id = str(rec["sequence_id"])
        label = rec["label"]
        split = rec["split"]
        frames = rec["frames"]
    except KeyError as exc:
        raise SchemaError(f"line {lineno}: missing field {exc.args[0]!r}") from None
    if not isinstance(frames, list):
        raise SchemaError(f"line {lineno}: 'frames' must be a list")
    samples = []
    for fr in frames:
        if not isinstance(fr, dict) or "frame_index" not in fr:
            raise SchemaError(f"line {lineno}: frame entries need 'frame_index'")
        idx = fr["frame_index"]
        if not isinstance(idx, int):
            raise SchemaError(f"line {lineno}: frame_index must be an integer")
        image = fr.get("image", f"{seq_id}/{idx}.png")
        lm = fr.get("landmarks")
        lm_obj, lm_path = None, None
        if isinstance(lm, str):
            lm_path = lm
        elif lm is not None:
            try:
                lm_obj = Landmark68(np.asarray(lm, dtype=np.float64).reshape(68, 2))
            except ValueError as exc:
                raise SchemaError(f"line {lineno}: bad inline landmarks: {exc}") from None
        samples.append(FaceSample(image, label, seq_id, idx, lm_obj, lm_path))
    return FaceSequence(seq_id, samples, str(rec.get("source_tag", "")), split)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; every referenced file must exist."""
    path = Path(path)
    if not path.exists():
        raise MissingFile([path])
    lines = path.read_text().splitlines()
    header, sequences = None, []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise SchemaError(f"line {lineno}: expected an object")
        if header is None:
            if "schema_version" not in rec:
                raise SchemaError(f"line {lineno}: first line must be a header with schema_version")
            if rec["schema_version"] != SCHEMA_VERSION:
                raise SchemaError(f"line {lineno}: unsupported schema_version {rec['schema_version']!r}")
            header = rec
            continue
        try:
            sequences.append(_parse_sequence(rec, lineno))
        except SchemaError as exc:
            msg = str(exc)
            raise SchemaError(msg if msg.startswith("line") else f"line {lineno}: {msg}") from None
    if header is None:
        raise SchemaError("manifest is empty")
    manifest = DatasetManifest(sequences, root=path.parent, mode=header.get("mode", "any"))
    if check_files:
        missing = []
        for smp in manifest.frames(manifest.sequences):
            for rel in (smp.image_path, smp.landmarks_path):
                if rel is not None and not manifest.resolve(rel).exists():
                    missing.append(manifest.resolve(rel))
        if missing:
            raise MissingFile(missing)
    return manifest


class FrameStore:
    """Loads frames and their attention masks, memoising both.

    Masks are quantised to 8 bits whether they come from the on-disk cache
    or are generated fresh, so both routes give identical arrays. Frames with
    no landmarks get an all-ones (attention-neutral) mask.
    """

    def __init__(self, manifest: DatasetManifest, sigma: float | None = None,
                 mask_cache: str | Path | None = None, max_items: int = 100_000):
        self.manifest = manifest
        self.sigma = sigma
        self.mask_cache = None if mask_cache is None else Path(mask_cache)
        self.max_items = max_items
        self._images: OrderedDict = OrderedDict()
        self._masks: OrderedDict = OrderedDict()

    def _remember(self, table, key, value):
        table[key] = value
        if len(table) > self.max_items:
            table.popitem(last=False)
        return value

    def image(self, smp: FaceSample) -> np.ndarray:
        key = (smp.sequence_id, smp.frame_index)
        if key in self._images:
            return self._images[key]
        return self._remember(self._images, key, read_image(self.manifest.resolve(smp.image_path)).astype(np.float32))

    def landmarks(self, smp: FaceSample) -> Landmark68 | None:
        if smp.landmarks is not None:
            return smp.landmarks
        if smp.landmarks_path is not None:
            return Landmark68.load(self.manifest.resolve(smp.landmarks_path))
        return None

    def cache_path(self, smp: FaceSample) -> Path | None:
        if self.mask_cache is None:
            return None
        return self.mask_cache / smp.sequence_id / f"{smp.frame_index}.mask.png"

    def mask(self, smp: FaceSample) -> np.ndarray:
        key = (smp.sequence_id, smp.frame_index)
        if key in self._masks:
            return self._masks[key]
        cached = self.cache_path(smp)
        if cached is not None and cached.exists():
            with Image.open(cached) as im:
                q = np.asarray(im.convert("L"), dtype=np.uint8)
        else:
            h, w = self.image(smp).shape[:2]
            lm = self.landmarks(smp)
            if lm is None:
                warnings.warn(f"no landmarks for {smp.sequence_id}/{smp.frame_index}; using all-ones mask",
                              stacklevel=2)
                q = np.full((h, w), 255, dtype=np.uint8)
            else:
                q = generate_attention_mask(lm, (w, h), self.sigma).to_uint8()
            if cached is not None:
                cached.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(q).save(cached)
        return self._remember(self._masks, key, q.astype(np.float32) / np.float32(255.0))


class Batch(NamedTuple):
    images: np.ndarray  # (N, H, W, C) float32
    masks: np.ndarray  # (N, H, W) float32
    labels: np.ndarray  # (N,) int64


class ClipBatch(NamedTuple):
    images: np.ndarray  # (N, L, H, W, C)
    masks: np.ndarray  # (N, L, H, W)
    labels: np.ndarray  # (N,)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _balanced_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in (0, 1)]
    out = []
    for i in range(max(len(p) for p in pools)):
        for p in pools:
            if i < len(p):
                out.append(p[i])
    return np.asarray(out, dtype=np.int64)


def image_batch_indices(labels, batch_size: int, rng_seed: int, shuffle: bool = True,
                        balanced: bool = False, epochs: int | None = 1,
                        drop_last: bool = False) -> Iterator[np.ndarray]:
    """Index batches over frames; one pass over every frame per epoch."""
    labels = np.asarray(labels)
    n = len(labels)
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = _epoch_rng(rng_seed, epoch)
        if balanced:
            order = _balanced_order(labels, rng)
        elif shuffle:
            order = rng.permutation(n)
        else:
            order = np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield idx
        epoch += 1


def _resolve_split(manifest: DatasetManifest, split) -> list:
    return manifest.split(split) if isinstance(split, str) else list(split)


def sample_images(manifest: DatasetManifest, split, batch_size: int = 32, rng_seed: int = 0, *,
                  shuffle: bool = True, balanced: bool = False, epochs: int | None = 1,
                  drop_last: bool = False, store: FrameStore | None = None) -> Iterator[Batch]:
    """Stream ``(images, masks, labels)`` batches drawn uniformly over all frames of a split."""
    frames = manifest.frames(_resolve_split(manifest, split))
    if not frames:
        raise EmptySplit(f"split {split if isinstance(split, str) else '<custom>'} has no frames")
    store = store or FrameStore(manifest)
    labels = np.array([f.label for f in frames], dtype=np.int64)
    for idx in image_batch_indices(labels, batch_size, rng_seed, shuffle, balanced, epochs, drop_last):
        chosen = [frames[i] for i in idx]
        yield Batch(np.stack([store.image(f) for f in chosen]),
                    np.stack([store.mask(f) for f in chosen]),
                    labels[idx])


def clip_starts(n_frames: int, length: int) -> int:
    """Number of valid contiguous window starts."""
    return max(n_frames - length + 1, 0)


def clip_windows(sequences, length: int, rng_seed: int, shuffle: bool = True,
                 epochs: int | None = 1) -> Iterator[tuple[int, int]]:
    """Yield ``(sequence_position, start)`` pairs.

    Shuffled: each epoch visits every eligible sequence once, in random order,
    with a start drawn uniformly from its valid starts. Sequential: tiles each
    sequence with non-overlapping windows from frame 0.
    """
    eligible = [i for i, s in enumerate(sequences) if len(s) >= length]
    skipped = len(sequences) - len(eligible)
    if skipped:
        warnings.warn(f"{skipped} sequence(s) shorter than {length} frames skipped", stacklevel=3)
    if not eligible:
        raise NoEligibleSequence(f"no sequence has at least {length} frames")
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = _epoch_rng(rng_seed, epoch)
        if shuffle:
            for pos in rng.permutation(eligible):
                yield int(pos), int(rng.integers(clip_starts(len(sequences[pos]), length)))
        else:
            for pos in eligible:
                for start in range(0, len(sequences[pos]) - length + 1, length):
                    yield pos, start
        epoch += 1


def sample_clips(manifest: DatasetManifest, split, length: int = 50, batch_size: int = 32,
                 rng_seed: int = 0, *, shuffle: bool = True, epochs: int | None = 1,
                 store: FrameStore | None = None) -> Iterator[ClipBatch]:
    """Stream batches of contiguous ``length``-frame clips."""
    sequences = _resolve_split(manifest, split)
    store = store or FrameStore(manifest)
    windows = clip_windows(sequences, length, rng_seed, shuffle, epochs)
    while True:
        chunk = []
        for item in windows:
            chunk.append(item)
            if len(chunk) == batch_size:
                break
        if not chunk:
            return
        imgs, masks, labels = [], [], []
        for pos, start in chunk:
            frames = sequences[pos].samples[start:start + length]
            imgs.append(np.stack([store.image(f) for f in frames]))
            masks.append(np.stack([store.mask(f) for f in frames]))
            labels.append(sequences[pos].label)
        yield ClipBatch(np.stack(imgs), np.stack(masks), np.asarray(labels, dtype=np.int64))
        if len(chunk) < batch_size:
            return


def histogram_descriptor(root, bins: int = 8, max_frames: int = 8) -> Callable:
    """Mean per-channel intensity histogram over (up to ``max_frames``) frames of a sequence."""
    root = Path(root)

    def describe(seq: FaceSequence) -> np.ndarray:
        picks = seq.samples[:: max(1, len(seq.samples) // max_frames)][:max_frames]
        hists = []
        for smp in picks:
            p = Path(smp.image_path)
            img = read_image(p if p.is_absolute() else root / p)
            h = [np.histogram(img[..., c], bins=bins, range=(0.0, 1.0))[0] for c in range(img.shape[2])]
            h = np.concatenate(h).astype(np.float64)
            hists.append(h / h.sum())
        return np.mean(hists, axis=0)

    return describe


def split_by_similarity(sequences: Sequence[FaceSequence], test_fraction: float, rng_seed: int, *,
                        descriptor: Callable | None = None, root=".", threshold: float = 0.1) -> dict:
    """Assign each sequence to train/test so that near-duplicates never straddle splits.

    Sequences are clustered greedily: each joins the first cluster whose leader
    lies within ``threshold`` (L1 distance of descriptors), else starts a new
    cluster. Whole clusters are then moved to test, in seeded random order,
    while that brings the test count closer to ``test_fraction`` of the total.
    """
    if len(sequences) < 2:
        raise ValueError("need at least two sequences to split")
    describe = descriptor or histogram_descriptor(root)
    leaders, clusters = [], []
    for i, seq in enumerate(sequences):
        d = np.asarray(describe(seq), dtype=np.float64)
        for k, lead in enumerate(leaders):
            if np.abs(d - lead).sum() <= threshold:
                clusters[k].append(i)
                break
        else:
            leaders.append(d)
            clusters.append([i])
    rng = np.random.default_rng(rng_seed)
    target = test_fraction * len(sequences)
    count = 0
    assignment = {seq.sequence_id: "train" for seq in sequences}
    for k in rng.permutation(len(clusters)):
        size = len(clusters[k])
        if abs(count + size - target) < abs(count - target):
            for i in clusters[k]:
                assignment[sequences[i].sequence_id] = "test"
            count += size
    return assignment


def carve_heldout(sequences: Sequence[FaceSequence], fraction: float, rng_seed: int):
    """Split sequences into (kept, held_out) lists, ``fraction`` of them held out."""
    seqs = list(sequences)
    if fraction <= 0 or len(seqs) < 2:
        return seqs, []
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(seqs))
    n_out = min(max(int(round(fraction * len(seqs))), 1), len(seqs) - 1)
    out = set(order[:n_out].tolist())
    return [s for i, s in enumerate(seqs) if i not in out], [s for i, s in enumerate(seqs) if i in out]
