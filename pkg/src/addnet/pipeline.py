"""Glue between manifests, detectors and the trainer."""
from __future__ import annotations

from pathlib import Path

import torch

from .data import DatasetManifest, FrameStore, carve_heldout, sample_clips, sample_images
from .model import ModelSpec, build_detector
from .trainer import EvalReport, TrainConfig, TrainResult, evaluate, train

EVAL_BATCH = 128


def check_mode(spec: ModelSpec, manifest: DatasetManifest) -> None:
    if manifest.mode != "any" and manifest.mode != spec.mode:
        raise ValueError(f"mode mismatch: {spec.mode} model on {manifest.mode} data")


def batch_stream(spec: ModelSpec, manifest: DatasetManifest, sequences, batch_size: int, seed: int, *,
                 store: FrameStore, shuffle: bool = True, epochs=1, balanced: bool = False):
    if spec.mode == "image":
        return sample_images(manifest, sequences, batch_size, seed, shuffle=shuffle, balanced=balanced,
                             epochs=epochs, store=store)
    return sample_clips(manifest, sequences, spec.sequence_length, batch_size, seed, shuffle=shuffle,
                        epochs=epochs, store=store)


def run_training(manifest: DatasetManifest, spec: ModelSpec, config: TrainConfig, out_dir=None, *,
                 sigma: float | None = None, mask_cache=None, store: FrameStore | None = None) -> TrainResult:
    """Train a fresh detector on the manifest's train split.

    A seeded ``heldout_fraction`` of train sequences is kept aside for
    best-checkpoint selection; the test split is never touched.
    """
    check_mode(spec, manifest)
    torch.use_deterministic_algorithms(True)
    store = store or FrameStore(manifest, sigma, mask_cache)
    kept, held = carve_heldout(manifest.split("train"), config.heldout_fraction, config.seed)
    stream = batch_stream(spec, manifest, kept, config.batch_size, config.seed, store=store, epochs=None,
                          balanced=config.balanced)
    def heldout():
        return batch_stream(spec, manifest, held, EVAL_BATCH, 0, store=store, shuffle=False)
    net = build_detector(spec, seed=config.seed)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    return train(net, stream, config, heldout=heldout if held else None, out_dir=out_dir)


def run_evaluation(net, manifest: DatasetManifest, split: str = "test", *, dataset: str = "",
                   sigma: float | None = None, store: FrameStore | None = None,
                   config_fingerprint: str = "", checkpoint_id: str = "") -> EvalReport:
    """Frame-level (image mode) or clip-level (sequence mode) accuracy on ``split``."""
    check_mode(net.spec, manifest)
    store = store or FrameStore(manifest, sigma)
    batches = batch_stream(net.spec, manifest, manifest.split(split), EVAL_BATCH, 0, store=store, shuffle=False)
    return evaluate(net, batches, dataset or split, config_fingerprint, checkpoint_id)
