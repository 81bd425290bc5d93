"""Adam semantics, run determinism, checkpoint round-trips, resume
equivalence, NaN aborts, and the gradient audit."""

import json
import os

import numpy as np
import pytest

from oodaction import autodiff as ad
from oodaction.data import SynthConfig, generate_synthetic
from oodaction.errors import ContractError, NonFiniteError
from oodaction.losses import LossWeights
from oodaction.model import DetectionModel
from oodaction.training import (Adam, RunConfig, adam_step, gradcheck,
                             load_checkpoint, restore_model, save_checkpoint,
                             train)


class TestAdamStep:
    def test_zero_gradient_keeps_parameters(self):
        p = np.array([1.0, -2.0])
        m = np.zeros(2)
        v = np.zeros(2)
        p2, m2, v2 = adam_step(p, np.zeros(2), m, v, t=1, lr=0.1)
        np.testing.assert_array_equal(p2, p)

    def test_zero_learning_rate_keeps_parameters(self):
        p = np.array([1.0, -2.0])
        p2, _, _ = adam_step(p, np.ones(2), np.zeros(2), np.zeros(2), t=1, lr=0.0)
        np.testing.assert_array_equal(p2, p)

    def test_first_step_hand_value(self):
        lr, eps = 1e-4, 1e-8
        p, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
        p2, m2, v2 = adam_step(p, np.array([1.0]), m, v, t=1, lr=lr, eps=eps)
        expected = -lr * 1.0 / (1.0 + eps)  # m_hat = 1, sqrt(v_hat) = 1
        assert abs(p2[0] - expected) < 1e-10
        assert m2[0] == pytest.approx(0.1) and v2[0] == pytest.approx(0.001)

    def test_constant_gradient_update_approaches_lr(self):
        lr = 0.01
        p, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
        for t in range(1, 200):
            prev = p.copy()
            p, m, v = adam_step(p, np.array([2.5]), m, v, t=t, lr=lr)
        assert abs(abs(p[0] - prev[0]) - lr) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adam_step(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3), 1, 0.1)

    def test_optimizer_counter_advances_on_zero_grad(self):
        t = ad.Tensor(np.ones(3), requires_grad=True)
        opt = Adam([("p", t)], lr=0.1)
        opt.step({})
        assert opt.t == 1
        np.testing.assert_array_equal(t.data, np.ones(3))


class TestRunConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = RunConfig(d=16, epochs=3, loss=LossWeights(gamma1=0.5))
        path = tmp_path / "cfg.json"
        doc = json.loads(cfg.to_canonical_json())
        path.write_text(json.dumps(doc))
        loaded = RunConfig.from_file(str(path))
        assert loaded == cfg

    def test_toml_config(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text('d = 16\nepochs = 2\n[loss]\ngamma2 = 0.1\n')
        cfg = RunConfig.from_file(str(path))
        assert cfg.d == 16 and cfg.epochs == 2 and cfg.loss.gamma2 == 0.1

    def test_validation(self):
        with pytest.raises(ContractError):
            RunConfig(learning_rate=0.0).validate()
        with pytest.raises(ContractError):
            RunConfig(loss=LossWeights(gamma3=-1.0)).validate()

    def test_hash_ignores_run_control_fields(self):
        a = RunConfig(epochs=2)
        b = RunConfig(epochs=50, out_dir="/elsewhere")
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != RunConfig(learning_rate=9e-9).config_hash()


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("traindata")
    synth = SynthConfig(train_clips=6, val_clips=2, test_clips=2, frames=16,
                        objects=2, segment_min=4, segment_max=6)
    return generate_synthetic(synth, seed=21, out_dir=str(tmp))


def tiny_config(**overrides):
    base = dict(d=12, num_classes=3, d_in=32, epochs=3, batch_size=3,
                learning_rate=2e-3, seed=5, anchor_scales=(4, 8))
    base.update(overrides)
    return RunConfig(**base)


class TestTraining:
    def test_loss_decreases(self, tiny_data):
        _model, history = train(tiny_config(epochs=2), tiny_data["train"])
        assert history[1]["total"] < history[0]["total"]

    def test_identical_seeds_identical_artifacts(self, tiny_data, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        train(tiny_config(), tiny_data["train"], out_dir=str(out_a))
        train(tiny_config(), tiny_data["train"], out_dir=str(out_b))
        assert (out_a / "loss_log.csv").read_bytes() == (out_b / "loss_log.csv").read_bytes()
        assert (out_a / "checkpoint.bin").read_bytes() == (out_b / "checkpoint.bin").read_bytes()

    def test_loss_log_columns(self, tiny_data, tmp_path):
        out = tmp_path / "log"
        train(tiny_config(epochs=2), tiny_data["train"], out_dir=str(out))
        lines = (out / "loss_log.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,L_ABS,L_Beta,L_reg,L_DIoU,L_final"
        assert len(lines) == 3

    def test_checkpoint_round_trip_bit_exact(self, tiny_data, tmp_path):
        cfg = tiny_config()
        model, _ = train(cfg, tiny_data["train"], out_dir=str(tmp_path))
        ckpt = tmp_path / "checkpoint.bin"
        header, arrays = load_checkpoint(str(ckpt))
        again = tmp_path / "again.bin"
        restored = restore_model(str(ckpt), cfg)
        for (n1, a1), (n2, a2) in zip(model.state_arrays(), restored.state_arrays()):
            assert n1 == n2
            np.testing.assert_array_equal(a1, a2)
        opt = Adam([(n, p) for n, p in restored.named_parameters()], lr=cfg.learning_rate)
        opt.load_state(arrays, header["adam_t"])
        save_checkpoint(str(again), restored, opt, header["epoch"], cfg)
        assert again.read_bytes() == ckpt.read_bytes()

    def test_resume_matches_uninterrupted_run(self, tiny_data, tmp_path):
        straight = tmp_path / "straight"
        train(tiny_config(epochs=4), tiny_data["train"], out_dir=str(straight))

        part1 = tmp_path / "part1"
        train(tiny_config(epochs=2), tiny_data["train"], out_dir=str(part1))
        part2 = tmp_path / "part2"
        train(tiny_config(epochs=4), tiny_data["train"], out_dir=str(part2),
              resume_from=str(part1 / "checkpoint.bin"))
        assert (part2 / "checkpoint.bin").read_bytes() == (straight / "checkpoint.bin").read_bytes()

    def test_resume_rejects_other_config(self, tiny_data, tmp_path):
        train(tiny_config(epochs=1), tiny_data["train"], out_dir=str(tmp_path))
        with pytest.raises(ContractError, match="hash"):
            train(tiny_config(epochs=2, learning_rate=5e-3), tiny_data["train"],
                  resume_from=str(tmp_path / "checkpoint.bin"))

    def test_train_rejects_ood_labels(self, tiny_data):
        with pytest.raises(ContractError, match="OOD"):
            train(tiny_config(), tiny_data["test"])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_overflowing_parameter_names_the_op(self, tiny_data):
        from oodaction.data import load_clip
        from oodaction.training import clip_objective
        cfg = tiny_config()
        model = DetectionModel(d=cfg.d, num_classes=3, d_in=32,
                               anchor_scales=cfg.anchor_scales, seed=0)
        model.encoder.box.w1.data[:] = 1e200  # squares past float range downstream
        clip, ann = load_clip(tiny_data["train"].clip_paths[0])
        with pytest.raises(NonFiniteError) as exc:
            clip_objective(model, clip, ann, cfg)
        assert exc.value.op_name

    def test_abort_diagnostic_names_op_and_epoch(self, tiny_data, monkeypatch):
        import oodaction.training as tr
        original = tr.clip_objective
        calls = {"n": 0}

        def sabotaged(model, clip, ann, config):
            calls["n"] += 1
            if calls["n"] == 4:
                raise NonFiniteError("softmax_rows")
            return original(model, clip, ann, config)

        monkeypatch.setattr(tr, "clip_objective", sabotaged)
        with pytest.raises(NonFiniteError) as exc:
            tr.train(tiny_config(), tiny_data["train"])
        message = str(exc.value)
        assert "softmax_rows" in message and "epoch" in message


class TestGradcheck:
    def test_default_instance_passes(self):
        report = gradcheck(T=4, S=2, d=6, num_classes=3, seed=1)
        assert report.passed(1e-4)
        assert report.max_rel_error < 1e-4

    def test_deterministic(self):
        a = gradcheck(T=4, S=2, d=4, num_classes=2, seed=2)
        b = gradcheck(T=4, S=2, d=4, num_classes=2, seed=2)
        assert a.per_param == b.per_param

    def test_detects_corrupted_gradient_rule(self, monkeypatch):
        import oodaction.autodiff as adm
        original = adm.relu

        def corrupted_relu(a):
            a = adm.as_tensor(a)
            mask = (a.data > 0).astype(np.float64) * 1.1  # wrong slope

            def bwd(g):
                return (g * mask,)

            return adm._emit(np.maximum(a.data, 0.0), "relu", (a,), bwd)

        monkeypatch.setattr(adm, "relu", corrupted_relu)
        report = gradcheck(T=4, S=2, d=4, num_classes=2, seed=3)
        assert report.max_rel_error > 1e-2
