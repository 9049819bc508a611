import json
import math

import numpy as np
import pytest
import torch

from addnet.data import Batch
from addnet.errors import DivergenceDetected, EmptySplit
from addnet.model import build_detector, load_checkpoint, mini_spec, to_tensors
from addnet.trainer import (
    EvalReport,
    TrainConfig,
    binomial_p_value,
    cross_entropy,
    evaluate,
    format_table,
    lr_at,
    predict,
    train,
)


class LogitEcho(torch.nn.Module):
    """Returns the two channels of a 1x1 'image' as logits."""

    def __init__(self):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, images, masks=None):
        return images[:, :2, 0, 0]


def echo_batch(logits, labels):
    z = np.asarray(logits, dtype=np.float32)
    return Batch(z[:, None, None, :], np.ones((len(z), 1, 1), np.float32), np.asarray(labels, np.int64))


def random_batches(n_batches, size=8, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_batches):
        labels = rng.integers(0, 2, size)
        images = rng.random((size, 8, 8, 3)).astype(dtype)
        images[labels == 1, :4] *= 0.3
        out.append(Batch(images, rng.random((size, 8, 8)).astype(dtype), labels))
    return out


class TestObjective:
    def test_equal_logits(self):
        assert cross_entropy([0.0, 0.0], 0) == pytest.approx(math.log(2), abs=1e-12)

    def test_extreme_logits_are_finite(self):
        assert cross_entropy([1000.0, 0.0], 1) == pytest.approx(1000.0, rel=1e-12)
        assert cross_entropy([1000.0, 0.0], 0) == pytest.approx(0.0, abs=1e-12)
        assert math.isfinite(cross_entropy([-1000.0, 1000.0], 0))

    def test_batch_mean_and_tensor_input(self):
        z = torch.tensor([[0.0, 0.0], [2.0, 0.0]], dtype=torch.float64)
        got = cross_entropy(z, torch.tensor([0, 1]))
        expect = (math.log(2) + 2 + math.log1p(math.exp(-2))) / 2
        assert isinstance(got, torch.Tensor)
        assert float(got) == pytest.approx(expect, rel=1e-12)

    def test_learning_rate_staircase(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 1e-4
        assert lr_at(2999, cfg) == 1e-4
        assert lr_at(3000, cfg) == pytest.approx(0.9e-4)
        assert lr_at(6000, cfg) == pytest.approx(0.81e-4)
        with pytest.raises(ValueError):
            lr_at(-1, cfg)

    @pytest.mark.parametrize("bad", [dict(base_lr=0), dict(decay_factor=1.5), dict(decay_every=0),
                                     dict(total_steps=-1), dict(mode="video")])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_fingerprint_tracks_config(self):
        assert TrainConfig(seed=1).fingerprint() == TrainConfig(seed=1).fingerprint()
        assert TrainConfig(seed=1).fingerprint() != TrainConfig(seed=2).fingerprint()


class TestEvaluation:
    def test_two_of_three(self):
        rep = evaluate(LogitEcho(), [echo_batch([[2, 1], [0, 3], [1, 2]], [0, 1, 0])], "toy")
        assert rep.accuracy == pytest.approx(2 / 3)
        assert (rep.tp, rep.tn, rep.fp, rep.fn, rep.total) == (1, 1, 1, 0, 3)

    def test_tie_goes_to_real(self):
        assert predict(np.array([[0.5, 0.5]])).tolist() == [0]
        rep = evaluate(LogitEcho(), [echo_batch([[1, 1]], [0])])
        assert rep.accuracy == 1.0

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(50, 2)).round(3)
        y = rng.integers(0, 2, 50)
        a = evaluate(LogitEcho(), [echo_batch(z, y)])
        b = evaluate(LogitEcho(), [echo_batch(z + 7.25, y)])
        assert a == b

    def test_report_invariants_and_json(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(1, 40))
            rep = EvalReport.from_predictions(rng.integers(0, 2, n), rng.integers(0, 2, n), "d", "fp", "ck")
            assert rep.tp + rep.tn + rep.fp + rep.fn == rep.total == n
            assert rep.accuracy == (rep.tp + rep.tn) / rep.total
            assert EvalReport.from_json(rep.to_json()) == rep

    def test_empty(self):
        with pytest.raises(EmptySplit):
            evaluate(LogitEcho(), [])

    def test_restores_training_flag(self):
        net = LogitEcho().train()
        evaluate(net, [echo_batch([[1, 0]], [0])])
        assert net.training

    def test_binomial_p_value(self):
        assert binomial_p_value(10, 10) == pytest.approx(0.5 ** 10)
        assert binomial_p_value(0, 10) == pytest.approx(1.0)
        assert binomial_p_value(60, 100) == pytest.approx(0.028443966820490392, rel=1e-9)

    def test_table(self):
        rep = EvalReport("a", 0.5, 2, 1, 0, 1, 0)
        table = format_table({"ADDNet-2D": {"setA": rep, "setB": rep}, "ADDNet-3D": {"setA": rep}})
        lines = table.splitlines()
        assert lines[0].split() == ["Network", "setA", "setB"]
        assert lines[2].split() == ["ADDNet-2D", "50.00%", "50.00%"]
        assert lines[3].split() == ["ADDNet-3D", "50.00%", "-"]


class TestTraining:
    def test_zero_steps_changes_nothing(self):
        net = build_detector(mini_spec(), seed=0)
        before = {k: v.clone() for k, v in net.state_dict().items()}
        result = train(net, iter([]), TrainConfig(total_steps=0))
        assert result.steps_run == 0
        assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())

    def test_nan_input_raises_before_update(self, tmp_path):
        net = build_detector(mini_spec(), seed=0)
        bad = random_batches(1)[0]
        bad.images[0, 0, 0, 0] = np.nan
        batches = random_batches(2) + [bad]
        with pytest.raises(DivergenceDetected) as exc:
            train(net, iter(batches), TrainConfig(total_steps=5, log_every=1), out_dir=tmp_path)
        assert exc.value.step == 2
        after_two = build_detector(mini_spec(), seed=0)
        train(after_two, iter(random_batches(2)), TrainConfig(total_steps=2))
        assert all(torch.equal(a, b) for a, b in zip(net.parameters(), after_two.parameters()))
        last = json.loads((tmp_path / "train_log.jsonl").read_text().splitlines()[-1])
        assert last["event"] == "divergence" and last["step"] == 2

    def test_first_step_decrease_is_first_order(self):
        # one Adam step moves each parameter by lr * g / (|g| + eps)
        lr = 1e-6
        net = build_detector(mini_spec(), seed=3, dtype=torch.float64)
        batch = random_batches(1, size=16, seed=4, dtype=np.float64)[0]
        images, masks, labels = to_tensors(batch, torch.float64)
        loss0 = cross_entropy(net(images, masks), labels)
        grads = torch.autograd.grad(loss0, list(net.parameters()))
        predicted = -lr * sum(float((g * g / (g.abs() + 1e-8)).sum()) for g in grads)
        train(net, iter([batch]), TrainConfig(total_steps=1, base_lr=lr))
        with torch.no_grad():
            actual = float(cross_entropy(net(images, masks), labels)) - float(loss0)
        assert actual < 0
        assert abs(actual - predicted) <= 0.05 * abs(predicted)

    def test_staircase_in_log(self):
        cfg = TrainConfig(total_steps=10, decay_every=3, base_lr=1e-3, decay_factor=0.5, log_every=1)
        result = train(build_detector(mini_spec()), iter(random_batches(10)), cfg)
        lrs = [r["lr"] for r in result.log]
        assert len(lrs) == 10
        assert len(set(lrs)) - 1 == 10 // 3
        assert lrs == [1e-3 * 0.5 ** (s // 3) for s in range(10)]

    def test_checkpoints_and_best_restore(self, tmp_path):
        cfg = TrainConfig(total_steps=6, decay_every=2, base_lr=1e-2, log_every=2)
        held = random_batches(2, seed=9)
        result = train(build_detector(mini_spec()), iter(random_batches(6)), cfg,
                       heldout=lambda: held, out_dir=tmp_path)
        assert [c["step"] for c in result.checkpoints] == [2, 4, 6]
        assert sorted(p.name for p in tmp_path.glob("ckpt_*.npz")) == [
            "ckpt_0000002.npz", "ckpt_0000004.npz", "ckpt_0000006.npz"]
        best = max(result.checkpoints, key=lambda c: (c["heldout_accuracy"], -c["step"]))
        assert result.best_step == best["step"]
        loaded, step, extra = load_checkpoint(tmp_path / "best.npz")
        assert step == result.best_step
        assert all(torch.equal(a, b) for a, b in zip(loaded.parameters(), result.net.parameters()))
        assert evaluate(result.net, held).accuracy == result.best_accuracy
        records = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in records if "loss" in r] == [2, 4, 6]

    def test_exhausted_stream(self):
        with pytest.raises(EmptySplit):
            train(build_detector(mini_spec()), iter(random_batches(2)), TrainConfig(total_steps=3))

    def test_mode_mismatch(self):
        with pytest.raises(ValueError, match="mode"):
            train(build_detector(mini_spec()), iter([]), TrainConfig(mode="sequence", total_steps=1))
