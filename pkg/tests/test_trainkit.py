"""Tests for the optimizer, schedules, checkpoints and the training loops."""

import json
import struct

import numpy as np
import pytest

import bsimlab.trainkit as tk
from bsimlab import ndgrad as nd
from bsimlab.datagen import synth_shapes
from bsimlab.models import tau_schedule
from bsimlab.trainkit import (
    Checkpoint,
    TrainConfig,
    Trainer,
    checkpoint_bytes,
    cosine_lr,
    epoch_losses,
    load_checkpoint,
    pair_indices,
    parse_checkpoint,
    save_checkpoint,
    sgd_update,
    train,
    train_byol_bsim,
    train_moco_bsim,
    train_simclr_bsim,
)

TINY = dict(
    batch=8, epochs=2, queue=16, conv_widths=(4,), conv_strides=(2, 2), dh=8, proj_hidden=32, dz=4,
    pred_hidden=32, synth_size=16,
)
METHODS = ["simclr", "moco", "byol"]


@pytest.fixture(scope="module")
def data():
    return synth_shapes(classes=4, per_class=6, size=16, seed=0)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def twin_configs(method):
    bsim = tiny(method=method, mix="cutmix", force_lambda=1.0, w1=1.0, w2=0.0)
    sim = tiny(method=method, mix="none", sim_denominator="bsim")
    return bsim, sim


class TestSgd:
    def test_hand_trace(self):
        p, v = {"a": np.array(1.0)}, {}
        p, v = sgd_update(p, {"a": np.array(1.0)}, v, 0.1, 0.9, 0.0)
        assert v["a"] == 1.0 and p["a"] == pytest.approx(0.9, abs=1e-15)
        p, v = sgd_update(p, {"a": np.array(1.0)}, v, 0.1, 0.9, 0.0)
        assert v["a"] == pytest.approx(1.9, abs=1e-15) and p["a"] == pytest.approx(0.71, abs=1e-15)

    def test_plain_gradient_descent(self):
        p = {"a": np.array([1.0, -2.0])}
        g = {"a": np.array([0.5, 0.25])}
        out, _ = sgd_update(p, g, {}, 0.1, 0.0, 0.0)
        np.testing.assert_array_equal(out["a"], p["a"] - 0.1 * g["a"])

    def test_geometric_decay(self):
        p, v = {"a": np.array(0.0)}, {"a": np.array(1.0)}
        for k in range(1, 6):
            p, v = sgd_update(p, {"a": np.array(0.0)}, v, 0.1, 0.5, 0.0)
            assert v["a"] == 0.5**k

    def test_weight_decay(self):
        out, v = sgd_update({"a": np.array(2.0)}, {"a": np.array(0.0)}, {}, 0.1, 0.9, 0.01)
        assert v["a"] == 0.02 and out["a"] == 2.0 - 0.002

    def test_inputs_untouched(self):
        p = {"a": np.ones(3)}
        sgd_update(p, {"a": np.ones(3)}, {}, 0.1, 0.9, 0.0)
        np.testing.assert_array_equal(p["a"], np.ones(3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_update({"a": np.ones(3)}, {"a": np.ones(2)}, {}, 0.1, 0.9, 0.0)


class TestSchedules:
    def test_warmup_boundary(self):
        assert cosine_lr(10, 100, 0.5, 10) == 0.5
        assert cosine_lr(5, 100, 0.5, 10) == 0.25
        assert cosine_lr(0, 100, 0.5, 10) == 0.0

    def test_end(self):
        assert cosine_lr(100, 100, 0.5, 10) == 0.0

    def test_nonincreasing(self):
        lrs = [cosine_lr(s, 1000, 1.0, 50) for s in range(50, 1001)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 0.5)


class TestPairing:
    def test_four(self):
        assert pair_indices(4) == [(0, 3), (1, 2), (2, 1), (3, 0)]

    def test_involution(self):
        j = dict(pair_indices(16))
        assert all(j[j[i]] == i and j[i] != i for i in range(16))

    def test_odd(self):
        with pytest.raises(ValueError):
            pair_indices(5)


class TestConfig:
    def test_mix_none_forces_sim(self):
        cfg = TrainConfig(mix="none", w1=1.0, w2=0.0)
        assert (cfg.w1, cfg.w2) == (0.0, 1.0)

    @pytest.mark.parametrize("kwargs", [
        {"batch": 6, "queue": 4}, {"batch": 7}, {"batch": 2}, {"alpha": 0.0}, {"temperature": -1.0},
        {"w1": 0.0, "w2": 0.0}, {"force_lambda": 1.5}, {"method": "swav"}, {"queue": 8},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = tiny(method="byol", alpha=0.5)
        again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"lr": 0.1, "lars": True})


class TestCheckpoint:
    def ck(self):
        t = {"a/w": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.random.default_rng(0).random(4)}
        return Checkpoint({"seed": 1}, 5, t, {"aug": {"x": 1}}, {"opt_step": 5})

    def test_round_trip(self, tmp_path):
        ck = self.ck()
        path = tmp_path / "ck.bsim"
        save_checkpoint(path, ck)
        back = load_checkpoint(path)
        assert back.step == 5 and back.config == ck.config and back.rng == ck.rng and back.meta == ck.meta
        for k, v in ck.tensors.items():
            assert back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].shape == v.shape
        assert checkpoint_bytes(back) == path.read_bytes()

    def test_layout(self):
        raw = checkpoint_bytes(self.ck())
        assert raw[:5] == b"BSIM1"
        assert struct.unpack("<H", raw[5:7]) == (1,)

    def test_bad_magic(self):
        raw = checkpoint_bytes(self.ck())
        with pytest.raises(ValueError, match="magic"):
            parse_checkpoint(b"XSIM1" + raw[5:])

    def test_bad_version(self):
        raw = checkpoint_bytes(self.ck())
        with pytest.raises(ValueError, match="version"):
            parse_checkpoint(raw[:5] + struct.pack("<H", 9) + raw[7:])

    def test_truncated(self):
        raw = checkpoint_bytes(self.ck())
        with pytest.raises(ValueError, match="truncated"):
            parse_checkpoint(raw[:-3])

    def test_trailing(self):
        with pytest.raises(ValueError, match="trailing"):
            parse_checkpoint(checkpoint_bytes(self.ck()) + b"\0")


class TestTrainer:
    def test_dataset_too_small(self, data):
        with pytest.raises(ValueError):
            Trainer(tiny(batch=32, queue=32), data)

    def test_method_mismatch(self, data):
        with pytest.raises(ValueError):
            train_moco_bsim(tiny(method="simclr"), data)

    @pytest.mark.parametrize("fn,method", [(train_simclr_bsim, "simclr"), (train_moco_bsim, "moco"),
                                           (train_byol_bsim, "byol")])
    def test_runs(self, data, fn, method):
        ck, recs = fn(tiny(method=method), data, max_steps=3)
        assert ck.step == 3 and [r.step for r in recs] == [0, 1, 2]
        assert all(np.isfinite(r.loss) for r in recs)
        assert all(r.wall_ms is None for r in recs)

    @pytest.mark.parametrize("method", METHODS)
    def test_twin_run(self, data, method):
        runs = []
        for cfg in twin_configs(method):
            tr = Trainer(cfg, data)
            snaps = []
            for _ in range(3):
                tr.train_step()
                snaps.append({k: v.copy() for k, v in tr.model.online.items()})
            runs.append(snaps)
        for a, b in zip(*runs):
            for k in a:
                assert a[k].tobytes() == b[k].tobytes(), k

    @pytest.mark.parametrize("method", METHODS)
    def test_deterministic(self, data, method, tmp_path):
        outs = []
        for i in range(2):
            path = tmp_path / f"m{i}.jsonl"
            ck, _ = train(tiny(method=method), data, max_steps=4, metrics_path=path)
            outs.append((checkpoint_bytes(ck), path.read_bytes()))
        assert outs[0] == outs[1]

    @pytest.mark.parametrize("method", METHODS)
    def test_resume(self, data, method, tmp_path):
        cfg = tiny(method=method)
        full, recs = train(cfg, data, max_steps=5)
        part, _ = train(cfg, data, max_steps=2)
        part = parse_checkpoint(checkpoint_bytes(part))
        resumed, recs2 = train(cfg, data, resume=part, max_steps=3)
        assert checkpoint_bytes(resumed) == checkpoint_bytes(full)
        assert [r.to_json() for r in recs2] == [r.to_json() for r in recs[2:]]

    def test_resume_appends_metrics(self, data, tmp_path):
        cfg = tiny()
        path = tmp_path / "m.jsonl"
        ck, _ = train(cfg, data, max_steps=2, metrics_path=path)
        train(cfg, data, resume=ck, max_steps=2, metrics_path=path)
        steps = [json.loads(line)["step"] for line in path.read_text().splitlines()]
        assert steps == [0, 1, 2, 3]

    def test_byol_ema_first_step(self, data):
        tr = Trainer(tiny(method="byol"), data)
        xi0 = {k: v.copy() for k, v in tr.model.ema.params.items()}
        tr.train_step()
        tau0 = tau_schedule(0, tr.total_steps, tr.config.tau_base)
        for k, v in tr.model.ema.params.items():
            np.testing.assert_array_equal(v, tau0 * xi0[k] + (1 - tau0) * tr.model.online[k])

    def test_moco_queue(self, data):
        tr = Trainer(tiny(method="moco"), data)
        captured = []
        push = tr.model.queue.push
        tr.model.queue.push = lambda keys: captured.append(keys.copy()) or push(keys)
        for _ in range(3):
            tr.train_step()
            assert len(tr.model.queue) == 16
        np.testing.assert_array_equal(tr.model.queue.keys, np.vstack(captured[-2:]))

    @pytest.mark.parametrize("method", ["moco", "byol"])
    def test_no_gradient_into_target(self, data, method, monkeypatch):
        tr = Trainer(tiny(method=method), data)
        target_leaves = []

        def leaves(params):
            out = {k: nd.Tensor(v, requires_grad=True) for k, v in params.items()}
            target_leaves.extend(out.values())
            return out

        monkeypatch.setattr(tk, "as_constants", leaves)
        v = tr._views(tr.images[tr._batch_indices(0)], method == "byol")
        online = tk.as_leaves(tr.model.online)
        tr._bn_stats = {}
        loss = tr._loss_moco(online, v)[0] if method == "moco" else tr._loss_byol(online, v)
        grads = nd.backward(loss.scalar, wrt=target_leaves + list(online.values()))
        assert target_leaves
        assert all(not np.any(grads[t]) for t in target_leaves)
        assert any(np.any(grads[t]) for t in online.values())

    def test_lambda_mean_is_effective(self, data, monkeypatch):
        tr = Trainer(tiny(method="simclr", alpha=0.5), data)
        seen = []
        orig = tr._views

        def spy(x, dual):
            v = orig(x, dual)
            seen.append(v.lambdas.copy())
            return v

        monkeypatch.setattr(tr, "_views", spy)
        recs = [tr.train_step() for _ in range(3)]
        for r, lam in zip(recs, seen):
            assert r.lambda_mean == float(np.mean(lam))
            assert np.all((lam * 256) == np.round(lam * 256))  # pixel fractions of a 16x16 image

    def test_mixup_runs(self, data):
        _, recs = train(tiny(mix="mixup", w1=1.0, w2=1.0), data, max_steps=2)
        assert len(recs) == 2

    def test_wall_time_optional(self, data):
        _, recs = train(tiny(wall_time=True), data, max_steps=1)
        assert recs[0].wall_ms > 0

    def test_epoch_losses(self):
        recs = [tk.MetricsRecord(i, i // 2, float(i), 0.1, 0.5) for i in range(4)]
        assert epoch_losses(recs) == [0.5, 2.5]

    def test_finished(self, data):
        tr = Trainer(tiny(epochs=1), data)
        list(tr.run())
        with pytest.raises(RuntimeError):
            tr.train_step()
