"""Command-line entry point: ``addnet {maskgen,synth,train,eval,visualize}``.

Outputs go to ``--out``; when omitted they go under ``$ADDNET_OUT`` (default
``./addnet_runs``). Existing outputs are never overwritten without ``--force``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from .errors import DivergenceDetected, EmptySplit, MissingFile, SchemaError

log = logging.getLogger("addnet")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DATA = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ConfigError(Exception):
    pass


class OutputExists(Exception):
    pass


def default_out(name: str) -> Path:
    return Path(os.environ.get("ADDNET_OUT", "addnet_runs")) / name


def claim_dir(path: Path, force: bool) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise OutputExists(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def claim_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise OutputExists(f"{path} already exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# --- configuration -------------------------------------------------------

def _key_lines(text: str) -> dict:
    """Map ``section.key`` to its 1-based line number in a YAML mapping document."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for knode, vnode in root.value:
        lines[knode.value] = knode.start_mark.line + 1
        if isinstance(vnode, yaml.MappingNode):
            for k2, _ in vnode.value:
                lines[f"{knode.value}.{k2.value}"] = k2.start_mark.line + 1
    return lines


def load_config_file(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: {problem}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: config must be a mapping with model/train/data sections")
    return raw, _key_lines(text)


def _coerce(value, current):
    if isinstance(current, bool) or current is None:
        return value
    if isinstance(current, (int, float)) and isinstance(value, str):
        return type(current)(float(value)) if isinstance(current, int) else float(value)
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    return value


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = yaml.safe_load(value)
    return out


def resolve_config(raw: dict, overrides: dict, lines: dict | None = None, source: str = "<config>") -> dict:
    """Merge file values and overrides (overrides win) into ``{"model", "train", "data"}``."""
    from .model import ModelSpec, preset
    from .trainer import TrainConfig

    lines = lines or {}

    def where(key):
        return f"{source}:{lines[key]}" if key in lines else source

    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{where(key)}: unknown section {key!r}")
    merged = {s: dict(raw.get(s) or {}) for s in ("model", "train", "data")}
    for section, values in overrides.items():
        if section not in merged:
            raise ConfigError(f"override: unknown section {section!r}")
        merged[section].update(values)

    model_cfg = dict(merged["model"])
    name = model_cfg.pop("preset", "desk")
    base_kwargs = {k: model_cfg.pop(k) for k in ("input_size", "mode", "sequence_length") if k in model_cfg}
    try:
        spec = preset(name, **base_kwargs)
        fields = {f.name for f in dataclasses.fields(ModelSpec)}
        for k in model_cfg:
            if k not in fields:
                raise ConfigError(f"{where('model.' + k)}: unknown model key {k!r}")
        if model_cfg:
            d = spec.to_dict()
            d.update(model_cfg)
            if "stages" not in model_cfg and "injection_points" not in model_cfg:
                d["injection_points"] = None
            spec = ModelSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where('model')}: {exc}") from None

    train_cfg = dict(merged["train"])
    train_cfg.setdefault("mode", spec.mode)
    defaults = TrainConfig()
    for k, v in list(train_cfg.items()):
        if not hasattr(defaults, k):
            raise ConfigError(f"{where('train.' + k)}: unknown train key {k!r}")
        try:
            train_cfg[k] = _coerce(v, getattr(defaults, k))
        except (TypeError, ValueError):
            raise ConfigError(f"{where('train.' + k)}: bad value {v!r}") from None
    try:
        config = TrainConfig(**train_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where('train')}: {exc}") from None

    data_cfg = {"manifest": None, "sigma": None, "mask_cache": None}
    for k, v in merged["data"].items():
        if k not in data_cfg:
            raise ConfigError(f"{where('data.' + k)}: unknown data key {k!r}")
        data_cfg[k] = v
    return {"model": {"preset": name, **spec.to_dict()}, "train": config.to_dict(), "data": data_cfg}


# --- subcommands ---------------------------------------------------------

def _find_images(directory: Path):
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES and not p.name.endswith(".mask.png"))


def cmd_maskgen(args) -> int:
    from .data import read_image, write_image
    from .geometry import SidecarLandmarks
    from .maskgen import generate_attention_mask, overlay

    images_dir = Path(args.images)
    if not images_dir.is_dir():
        print(f"error: {images_dir} is not a directory", file=sys.stderr)
        return EXIT_CONFIG
    out = claim_dir(Path(args.out) if args.out else default_out("masks"), args.force)
    provider = SidecarLandmarks(args.landmarks)
    ok = failed = 0
    for path in _find_images(images_dir):
        try:
            image = read_image(path)
            lm = provider.for_path(path)
            h, w = image.shape[:2]
            mask = generate_attention_mask(lm, (w, h), args.sigma)
        except (OSError, ValueError) as exc:
            print(f"warning: {path.name}: {exc}", file=sys.stderr)
            failed += 1
            continue
        write_image(out / f"{path.stem}.mask.png", mask.to_uint8())
        if args.overlay:
            write_image(out / f"{path.stem}.overlay.png", overlay(image, mask))
        ok += 1
    print(f"{ok} ok / {failed} failed")
    return EXIT_CONFIG if failed else EXIT_OK


def cmd_synth(args) -> int:
    from .facegen import render_pool
    from .fusion import build_synthetic_corpus, load_pool

    if args.pool:
        pool = load_pool(args.pool)
    else:
        pool = render_pool(args.procedural, (args.size, args.size), seed=args.seed)
    manifest_path = Path(args.out) if args.out else default_out("synth") / "manifest.jsonl"
    root = manifest_path.parent
    if manifest_path.exists() and not args.force:
        raise OutputExists(f"{manifest_path} already exists; pass --force to overwrite")
    root.mkdir(parents=True, exist_ok=True)
    try:
        manifest = build_synthetic_corpus(pool, args.n_real, args.n_fake, args.seed, root,
                                          test_fraction=args.test_fraction, sigma=args.sigma,
                                          frames_per_sequence=args.frames, frame_jitter=args.frame_jitter)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    written = root / "manifest.jsonl"
    if written != manifest_path:
        written.replace(manifest_path)
    counts = manifest.split_counts()
    n_frames = sum(len(s) for s in manifest.sequences)
    print(f"wrote {len(manifest.sequences)} sequences ({n_frames} frames; train {counts['train']}, "
          f"test {counts['test']}) to {manifest_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_manifest
    from .model import ModelSpec
    from .pipeline import run_training
    from .trainer import TrainConfig

    try:
        raw, lines = load_config_file(args.config) if args.config else ({}, {})
        overrides = parse_overrides(args.set)
        for flag, key in ((args.manifest, ("data", "manifest")), (args.steps, ("train", "total_steps")),
                          (args.seed, ("train", "seed"))):
            if flag is not None:
                overrides.setdefault(key[0], {})[key[1]] = flag
        resolved = resolve_config(raw, overrides, lines, str(args.config or "<flags>"))
        if not resolved["data"]["manifest"]:
            raise ConfigError(f"{args.config or '<flags>'}: data.manifest is required")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = claim_dir(Path(args.out) if args.out else default_out("train"), args.force)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    spec = ModelSpec.from_dict({k: v for k, v in resolved["model"].items() if k != "preset"})
    config = TrainConfig(**resolved["train"])
    try:
        manifest = load_manifest(resolved["data"]["manifest"])
    except MissingFile as exc:
        print("data error: missing files:\n  " + "\n  ".join(exc.paths), file=sys.stderr)
        return EXIT_DATA
    except SchemaError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        result = run_training(manifest, spec, config, out, sigma=resolved["data"]["sigma"],
                              mask_cache=resolved["data"]["mask_cache"])
    except DivergenceDetected as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (EmptySplit, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    last = result.log[-1] if result.log else {}
    print(f"trained {result.steps_run} steps; final loss {last.get('loss', float('nan')):.4f}; "
          f"best held-out accuracy {result.best_accuracy} at step {result.best_step}; outputs in {out}")
    return EXIT_OK


def _parse_manifest_arg(item: str):
    if "=" in item:
        name, path = item.split("=", 1)
        return name, Path(path)
    p = Path(item)
    return p.parent.name or p.stem, p


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .model import load_checkpoint
    from .pipeline import check_mode, run_evaluation
    from .trainer import TrainConfig, format_table

    try:
        net, step, extra = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: cannot load checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fingerprint = ""
    if "train_config" in extra:
        fingerprint = TrainConfig(**extra["train_config"]).fingerprint()
    ckpt_id = f"{Path(args.checkpoint).name}@{step}"
    reports = {}
    for item in args.manifest:
        name, path = _parse_manifest_arg(item)
        try:
            manifest = load_manifest(path)
            check_mode(net.spec, manifest)
            reports[name] = run_evaluation(net, manifest, args.split, dataset=name, sigma=args.sigma,
                                           config_fingerprint=fingerprint, checkpoint_id=ckpt_id)
        except MissingFile as exc:
            print("data error: missing files:\n  " + "\n  ".join(exc.paths), file=sys.stderr)
            return EXIT_CONFIG
        except EmptySplit:
            print(f"error: EmptySplit: split {args.split!r} of {path} has nothing to evaluate", file=sys.stderr)
            return EXIT_CONFIG
        except (SchemaError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    row = args.name or ("ADDNet-2D" if net.spec.mode == "image" else "ADDNet-3D")
    print(format_table({row: reports}))
    out = claim_file(Path(args.out) if args.out else default_out("eval") / "report.json", args.force)
    out.write_text(json.dumps({n: r.to_dict() for n, r in reports.items()}, sort_keys=True, indent=2) + "\n")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .data import read_image, write_image
    from .geometry import Landmark68, SidecarLandmarks
    from .maskgen import generate_attention_mask, make_face_mask, make_organ_mask, overlay

    image_path = Path(args.image)
    image = read_image(image_path)
    lm = Landmark68.load(args.landmarks) if args.landmarks else SidecarLandmarks().for_path(image_path)
    h, w = image.shape[:2]
    out = claim_dir(Path(args.out) if args.out else default_out("visualize") / image_path.stem, args.force)
    mask = generate_attention_mask(lm, (w, h), args.sigma)
    write_image(out / "face_mask.png", make_face_mask(lm, (w, h)) * np.uint8(255))
    write_image(out / "organ_mask.png", make_organ_mask(lm, (w, h)) * np.uint8(255))
    write_image(out / "attention_mask.png", mask.to_uint8())
    write_image(out / "overlay.png", overlay(image, mask))
    marked = image.copy()
    for x, y in np.rint(lm.points).astype(int):
        if 0 <= x < w and 0 <= y < h:
            marked[y, x] = (0.0, 1.0, 0.0)
    write_image(out / "landmarks.png", marked)
    print(f"wrote 5 images to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="addnet", description="Attention-based deepfake detection toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("maskgen", help="generate attention masks for a directory of images")
    p.add_argument("--images", required=True, help="directory of face images")
    p.add_argument("--landmarks", help="directory of <stem>.landmarks.txt sidecars (default: next to images)")
    p.add_argument("--out")
    p.add_argument("--sigma", type=float, help="Gaussian sigma in pixels (default 0.02*min(W,H))")
    p.add_argument("--overlay", action="store_true", help="also write overlay visualisations")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_maskgen)

    p = sub.add_parser("synth", help="build a synthetic real/fake corpus by attention-mask fusion")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pool", help="directory of face images with landmark sidecars")
    src.add_argument("--procedural", type=int, metavar="N", help="render N procedural identities instead")
    p.add_argument("--size", type=int, default=64, help="procedural face size in pixels")
    p.add_argument("--n-real", type=int, required=True)
    p.add_argument("--n-fake", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--frames", type=int, default=1, help="frames per sequence")
    p.add_argument("--frame-jitter", type=float, default=0.0)
    p.add_argument("--sigma", type=float)
    p.add_argument("--out", help="manifest path; frames are written next to it")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", help="YAML config with model/train/data sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and print an accuracy table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", action="append", required=True, metavar="[NAME=]PATH")
    p.add_argument("--split", default="test")
    p.add_argument("--name", help="row label in the table")
    p.add_argument("--sigma", type=float)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="write mask and overlay images for one face")
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", help="landmark file (default: sidecar next to the image)")
    p.add_argument("--sigma", type=float)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except OutputExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
