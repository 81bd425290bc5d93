"""Full detection model: encoder, the two graph branches, fusion, and the
actionness / evidence / boundary heads, with a deterministic parameter
registry used by the optimizer and checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ObjectFeatureClip
from .detector import generate_anchors
from .encoder import FFN, EncodedObjects, EncoderParams, encode_objects
from .errors import ContractError
from .fusion import FusedSequence, FusionParams, fuse
from .graph import GraphBranchParams, gcn_forward


@dataclass
class HeadsParams:
    """Prediction heads applied to fused frame features.

    actionness: d -> 1 (sigmoid applied downstream)
    evidence:   d -> 2K, split into positive/negative pre-evidence
    boundary:   d -> 2 start/end offsets, normalized by anchor length
    """

    actionness: FFN
    evidence: FFN
    boundary: FFN

    @classmethod
    def create(cls, rng, d: int, num_classes: int) -> "HeadsParams":
        return cls(
            actionness=FFN.create(rng, d, d, 1),
            evidence=FFN.create(rng, d, d, 2 * num_classes),
            boundary=FFN.create(rng, d, d, 2),
        )

    def named(self, prefix: str = "heads"):
        yield from self.actionness.named(f"{prefix}.actionness")
        yield from self.evidence.named(f"{prefix}.evidence")
        yield from self.boundary.named(f"{prefix}.boundary")


def actionness_scores(fused: FusedSequence, heads: HeadsParams) -> Tensor:
    """Per-frame probability of belonging to any action, in [0, 1]."""
    return ad.sigmoid(heads.actionness(fused.X))


@dataclass
class ModelOutputs:
    """Everything one forward pass produces for a clip."""

    encoded: EncodedObjects
    fused: FusedSequence
    act_logits: Tensor        # (T, 1)
    actionness: Tensor        # (T, 1), sigmoid of the logits
    anchor_spans: np.ndarray  # (A, 2) int frames
    alphas: Tensor            # (A, K), >= 1
    betas: Tensor             # (A, K), >= 1
    offsets: Tensor           # (A, 2)


class DetectionModel:
    """Backbone-free open-set temporal action detector."""

    def __init__(self, d: int, num_classes: int, d_in: int,
                 anchor_scales=(2, 4, 8, 16), evidence_fn: str = "softplus",
                 seed: int = 0):
        if evidence_fn not in ("softplus", "relu"):
            raise ContractError(f"unknown evidence function '{evidence_fn}'")
        self.d = d
        self.num_classes = num_classes
        self.d_in = d_in
        self.anchor_scales = tuple(anchor_scales)
        self.evidence_fn = evidence_fn
        rng = np.random.default_rng([seed, 11])
        self.encoder = EncoderParams.create(rng, d_in, d)
        self.graph_app = GraphBranchParams.create(rng, d)
        self.graph_mot = GraphBranchParams.create(rng, d)
        self.fusion = FusionParams.create(d)
        self.heads = HeadsParams.create(rng, d, num_classes)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        params.extend(self.encoder.named("encoder"))
        params.extend(self.graph_app.named("graph_app"))
        params.extend(self.graph_mot.named("graph_mot"))
        params.extend(self.fusion.named("fusion"))
        params.extend(self.heads.named("heads"))
        return params

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, t.data) for name, t in self.named_parameters()]

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in arrays:
                raise ContractError(f"checkpoint is missing parameter '{name}'")
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ContractError(f"shape mismatch for '{name}': {src.shape} vs {t.data.shape}")
            t.data = src.astype(np.float64, copy=True)

    def _pool_anchors(self, X: Tensor, spans: np.ndarray) -> Tensor:
        T = X.shape[0]
        pool = np.zeros((spans.shape[0], T))
        for i, (s, e) in enumerate(spans):
            pool[i, s:e] = 1.0 / (e - s)
        return ad.matmul(Tensor(pool), X)

    def forward(self, clip: ObjectFeatureClip) -> ModelOutputs:
        encoded = encode_objects(clip, self.encoder)
        F_a = gcn_forward(encoded.F_a, self.graph_app)
        F_m = gcn_forward(encoded.F_m, self.graph_mot)
        fused = fuse(F_a, F_m, encoded.S, self.fusion)

        act_logits = self.heads.actionness(fused.X)
        actionness = ad.sigmoid(act_logits)

        spans = generate_anchors(clip.T, self.anchor_scales)
        pooled = self._pool_anchors(fused.X, spans)
        raw = self.heads.evidence(pooled)
        K = self.num_classes
        pre_pos = ad.slice_cols(raw, 0, K)
        pre_neg = ad.slice_cols(raw, K, 2 * K)
        evidence = ad.softplus if self.evidence_fn == "softplus" else ad.relu
        alphas = evidence(pre_pos) + 1.0
        betas = evidence(pre_neg) + 1.0
        offsets = self.heads.boundary(pooled)

        return ModelOutputs(encoded=encoded, fused=fused, act_logits=act_logits,
                            actionness=actionness, anchor_spans=spans,
                            alphas=alphas, betas=betas, offsets=offsets)
