"""Training objective, learning-rate schedule, training loop and evaluation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .errors import DivergenceDetected, EmptySplit
from .model import save_checkpoint, to_tensors


@dataclass
class TrainConfig:
    mode: str = "image"
    batch_size: int = 32
    base_lr: float = 1e-4
    decay_factor: float = 0.9
    decay_every: int = 3000
    total_steps: int = 40000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int | None = None
    heldout_fraction: float = 0.1
    balanced: bool = False

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.mode not in ("image", "sequence"):
            raise ValueError(f"mode must be 'image' or 'sequence', got {self.mode!r}")
        self.betas = tuple(self.betas)

    @property
    def checkpoint_interval(self) -> int:
        return self.checkpoint_every or self.decay_every

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def cross_entropy(logits, labels):
    """Mean of ``logsumexp(z) - z[y]`` over the batch; a single logit pair gives a scalar.

    Accepts tensors or array-likes; array-like input returns a float.
    """
    as_float = not isinstance(logits, torch.Tensor)
    z = torch.as_tensor(np.asarray(logits, dtype=np.float64)) if as_float else logits
    y = torch.as_tensor(labels, dtype=torch.int64, device=z.device)
    if z.dim() == 1:
        z, y = z[None], y.reshape(1)
    loss = (torch.logsumexp(z, dim=1) - z.gather(1, y[:, None])[:, 0]).mean()
    return float(loss) if as_float else loss


def lr_at(step: int, config: TrainConfig) -> float:
    """Staircase decay: ``base_lr * decay_factor ** (step // decay_every)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.base_lr * config.decay_factor ** (step // config.decay_every)


def predict(logits) -> np.ndarray:
    """Argmax over the two logits; ties go to label 0."""
    z = np.asarray(logits)
    return (z[:, 1] > z[:, 0]).astype(np.int64)


@dataclass
class EvalReport:
    dataset: str
    accuracy: float
    total: int
    tp: int
    tn: int
    fp: int
    fn: int
    config_fingerprint: str = ""
    checkpoint_id: str = ""

    @classmethod
    def from_predictions(cls, predictions, labels, dataset="", config_fingerprint="", checkpoint_id=""):
        p = np.asarray(predictions, dtype=np.int64)
        y = np.asarray(labels, dtype=np.int64)
        if len(y) == 0:
            raise EmptySplit("nothing to evaluate")
        tp = int(((p == 1) & (y == 1)).sum())
        tn = int(((p == 0) & (y == 0)).sum())
        fp = int(((p == 1) & (y == 0)).sum())
        fn = int(((p == 0) & (y == 1)).sum())
        total = len(y)
        return cls(dataset, (tp + tn) / total, total, tp, tn, fp, fn, config_fingerprint, checkpoint_id)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def binomial_p_value(successes: int, trials: int, p: float = 0.5) -> float:
    """One-sided P(X >= successes) for X ~ Binomial(trials, p)."""
    from scipy.stats import binom

    return float(binom.sf(successes - 1, trials, p))


def format_table(rows: dict[str, dict[str, EvalReport]]) -> str:
    """Accuracy table: one row per network, one column per dataset."""
    datasets = []
    for reports in rows.values():
        for name in reports:
            if name not in datasets:
                datasets.append(name)
    width = max([len("Network")] + [len(r) for r in rows]) + 2
    cols = [max(len(d), 8) + 2 for d in datasets]
    lines = ["Network".ljust(width) + "".join(d.rjust(c) for d, c in zip(datasets, cols))]
    lines.append("-" * len(lines[0]))
    for net, reports in rows.items():
        cells = []
        for d, c in zip(datasets, cols):
            rep = reports.get(d)
            cells.append(("-" if rep is None else f"{100 * rep.accuracy:.2f}%").rjust(c))
        lines.append(net.ljust(width) + "".join(cells))
    return "\n".join(lines)


def _forward(net, batch, dtype):
    images, masks, labels = to_tensors(batch, dtype)
    return net(images, masks), labels


def evaluate(net, batches: Iterable, dataset: str = "", config_fingerprint: str = "",
             checkpoint_id: str = "") -> EvalReport:
    """Accuracy and confusion counts of frozen ``net`` over every batch in ``batches``."""
    dtype = next(net.parameters()).dtype
    was_training = net.training
    net.eval()
    preds, labels = [], []
    with torch.no_grad():
        for batch in batches:
            logits, y = _forward(net, batch, dtype)
            preds.append(predict(logits.numpy()))
            labels.append(y.numpy())
    net.train(was_training)
    if not labels:
        raise EmptySplit("nothing to evaluate")
    return EvalReport.from_predictions(np.concatenate(preds), np.concatenate(labels), dataset,
                                       config_fingerprint, checkpoint_id)


@dataclass
class TrainResult:
    net: torch.nn.Module
    log: list = field(default_factory=list)
    best_step: int | None = None
    best_accuracy: float | None = None
    checkpoints: list = field(default_factory=list)
    steps_run: int = 0


class JsonlLog:
    """Append-only, flush-on-write training log."""

    def __init__(self, path=None):
        self.records = []
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                fh.flush()


def train(net, batches: Iterable, config: TrainConfig, *, heldout=None, out_dir=None) -> TrainResult:
    """Minimise cross-entropy with Adam and the staircase schedule for ``total_steps`` updates.

    ``heldout`` is a zero-argument callable returning a fresh batch iterable;
    at every checkpoint the net is scored on it and the best-scoring state is
    restored at the end. Without it the final state is kept. A non-finite
    loss raises :class:`DivergenceDetected` before the update is applied.
    """
    if net.spec.mode != config.mode:
        raise ValueError(f"model mode {net.spec.mode!r} does not match config mode {config.mode!r}")
    torch.manual_seed(config.seed)
    dtype = next(net.parameters()).dtype
    opt = torch.optim.Adam(net.parameters(), lr=config.base_lr, betas=config.betas, eps=config.eps)
    out_dir = None if out_dir is None else Path(out_dir)
    log = JsonlLog(None if out_dir is None else out_dir / "train_log.jsonl")
    result = TrainResult(net)
    best_state = None
    window_loss, window_correct, window_seen = 0.0, 0, 0
    net.train()
    it = iter(batches)

    def checkpoint(step):
        nonlocal best_state
        entry = {"step": step}
        if out_dir is not None:
            path = out_dir / f"ckpt_{step:07d}.npz"
            save_checkpoint(path, net, step, {"train_config": config.to_dict()})
            entry["path"] = path.name
        if heldout is not None:
            rep = evaluate(net, heldout(), "heldout")
            entry["heldout_accuracy"] = rep.accuracy
            if result.best_accuracy is None or rep.accuracy > result.best_accuracy:
                result.best_accuracy, result.best_step = rep.accuracy, step
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        result.checkpoints.append(entry)
        log.write({"event": "checkpoint", **entry})

    for step in range(config.total_steps):
        lr = lr_at(step, config)
        for group in opt.param_groups:
            group["lr"] = lr
        try:
            batch = next(it)
        except StopIteration:
            raise EmptySplit(f"batch stream exhausted after {step} steps") from None
        logits, labels = _forward(net, batch, dtype)
        loss = cross_entropy(logits, labels)
        if not torch.isfinite(loss):
            value = float(loss.detach())
            log.write({"event": "divergence", "step": step, "loss": repr(value)})
            raise DivergenceDetected(step, value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        result.steps_run = step + 1
        n = len(labels)
        window_loss += float(loss.detach()) * n
        window_correct += int((predict(logits.detach().numpy()) == labels.numpy()).sum())
        window_seen += n
        done = step + 1
        if done % config.log_every == 0 or done == config.total_steps:
            rec = {"step": done, "loss": window_loss / window_seen, "lr": lr, "acc": window_correct / window_seen}
            result.log.append(rec)
            log.write(rec)
            window_loss, window_correct, window_seen = 0.0, 0, 0
        if done % config.checkpoint_interval == 0 and done != config.total_steps:
            checkpoint(done)
    if config.total_steps > 0:
        checkpoint(config.total_steps)
        if best_state is not None:
            net.load_state_dict(best_state)
            if out_dir is not None:
                save_checkpoint(out_dir / "best.npz", net, result.best_step,
                                {"train_config": config.to_dict(), "heldout_accuracy": result.best_accuracy})
        elif out_dir is not None:
            save_checkpoint(out_dir / "best.npz", net, config.total_steps, {"train_config": config.to_dict()})
    net.eval()
    return result
