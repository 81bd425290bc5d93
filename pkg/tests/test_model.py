"""Model assembly: head semantics, parameter registry, forward shapes."""

import numpy as np
import pytest

from oodaction.autodiff import Tensor
from oodaction.data import SynthConfig, generate_synthetic, load_clip
from oodaction.errors import ContractError
from oodaction.fusion import FusedSequence
from oodaction.model import DetectionModel, HeadsParams, actionness_scores


def unit_fused(rng, T=5, d=8):
    X = rng.normal(size=(T, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return FusedSequence(X=Tensor(X), provenance=[[t] for t in range(T)])


class TestActionnessHead:
    def test_zero_head_gives_half(self):
        rng = np.random.default_rng(0)
        heads = HeadsParams.create(rng, d=8, num_classes=3)
        for t in (heads.actionness.w1, heads.actionness.b1,
                  heads.actionness.w2, heads.actionness.b2):
            t.data = np.zeros_like(t.data)
        scores = actionness_scores(unit_fused(rng), heads)
        np.testing.assert_array_equal(scores.data, 0.5)

    def test_monotone_in_logit(self):
        rng = np.random.default_rng(1)
        heads = HeadsParams.create(rng, d=8, num_classes=3)
        fused = unit_fused(rng)
        logits = heads.actionness(fused.X).data[:, 0]
        scores = actionness_scores(fused, heads).data[:, 0]
        order = np.argsort(logits)
        assert (np.diff(scores[order]) >= 0).all()
        assert (scores > 0).all() and (scores < 1).all()


class TestDetectionModel:
    def test_parameter_registry_unique_and_stable(self):
        model = DetectionModel(d=8, num_classes=3, d_in=16, seed=4)
        names = [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert names == [n for n, _ in model.named_parameters()]

    def test_same_seed_same_init(self):
        a = DetectionModel(d=8, num_classes=3, d_in=16, seed=4)
        b = DetectionModel(d=8, num_classes=3, d_in=16, seed=4)
        for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_unknown_evidence_fn_rejected(self):
        with pytest.raises(ContractError):
            DetectionModel(d=8, num_classes=3, d_in=16, evidence_fn="exp")

    def test_forward_shapes_and_evidence_floor(self, tmp_path):
        synth = SynthConfig(train_clips=1, val_clips=0, test_clips=0, frames=16,
                            objects=2, segment_min=4, segment_max=6)
        manifests = generate_synthetic(synth, seed=6, out_dir=str(tmp_path))
        clip, _ = load_clip(manifests["train"].clip_paths[0])
        model = DetectionModel(d=8, num_classes=3, d_in=32,
                               anchor_scales=(4, 8), seed=6)
        out = model.forward(clip)
        A = out.anchor_spans.shape[0]
        assert out.fused.X.shape == (16, 8)
        assert out.actionness.shape == (16, 1)
        assert (out.actionness.data > 0).all() and (out.actionness.data < 1).all()
        assert out.alphas.shape == (A, 3) and out.betas.shape == (A, 3)
        assert (out.alphas.data >= 1.0).all() and (out.betas.data >= 1.0).all()
        assert out.offsets.shape == (A, 2)

    def test_relu_evidence_variant(self, tmp_path):
        synth = SynthConfig(train_clips=1, val_clips=0, test_clips=0, frames=16,
                            objects=2, segment_min=4, segment_max=6)
        manifests = generate_synthetic(synth, seed=8, out_dir=str(tmp_path))
        clip, _ = load_clip(manifests["train"].clip_paths[0])
        model = DetectionModel(d=8, num_classes=3, d_in=32, anchor_scales=(4, 8),
                               evidence_fn="relu", seed=8)
        out = model.forward(clip)
        assert (out.alphas.data >= 1.0).all() and (out.betas.data >= 1.0).all()
