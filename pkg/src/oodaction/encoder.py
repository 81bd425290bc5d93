"""Object feature encoding: box/temporal position encodings plus FFN
projections that merge local object features with tiled per-frame global
context, producing one encoded row per (frame, object) for each branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ObjectFeatureClip
from .errors import ShapeError


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    """Weight uniform in +-1/sqrt(fan_in), bias zero."""
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


class FFN:
    """One hidden layer of width `hidden` with ReLU, then a linear output."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def create(cls, rng, d_in: int, hidden: int, d_out: int) -> "FFN":
        return cls(*init_linear(rng, d_in, hidden), *init_linear(rng, hidden, d_out))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def named(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


def temporal_encoding(t: int, d: int) -> np.ndarray:
    """Sinusoidal frame-position encoding of width d."""
    return temporal_encoding_matrix(np.array([t]), d)[0]


def temporal_encoding_matrix(ts, d: int) -> np.ndarray:
    """Rows of sinusoidal encodings for an array of frame indices."""
    ts = np.asarray(ts, dtype=np.float64)
    enc = np.zeros((ts.shape[0], d))
    pair = np.arange(0, d, 2)
    freq = 1.0 / np.power(10000.0, pair / d)
    angles = ts[:, None] * freq[None, :]
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles[:, : d // 2])  # odd d leaves a lone sine column
    return enc


@dataclass
class EncoderParams:
    """All feed-forward projections of the object encoder.

    The box encoder is shared; the appearance and motion branches carry
    separate parameter sets for the local, global, and final projections.
    """

    box: FFN            # 4 -> d
    app_local: FFN      # d_in + 2d -> d
    mot_local: FFN
    app_global: FFN     # d_in + d -> d
    mot_global: FFN
    app_final: FFN      # 2d -> d
    mot_final: FFN
    d: int

    @classmethod
    def create(cls, rng, d_in: int, d: int) -> "EncoderParams":
        return cls(
            box=FFN.create(rng, 4, d, d),
            app_local=FFN.create(rng, d_in + 2 * d, d, d),
            mot_local=FFN.create(rng, d_in + 2 * d, d, d),
            app_global=FFN.create(rng, d_in + d, d, d),
            mot_global=FFN.create(rng, d_in + d, d, d),
            app_final=FFN.create(rng, 2 * d, d, d),
            mot_final=FFN.create(rng, 2 * d, d, d),
            d=d,
        )

    def named(self, prefix: str = "encoder"):
        for field in ("box", "app_local", "mot_local", "app_global",
                      "mot_global", "app_final", "mot_final"):
            yield from getattr(self, field).named(f"{prefix}.{field}")


@dataclass
class EncodedObjects:
    """Encoded per-object rows; row t*S + k corresponds to object k of frame t."""

    F_a: Tensor  # (T*S, d)
    F_m: Tensor  # (T*S, d)
    T: int
    S: int

    def row(self, t: int, k: int) -> int:
        return t * self.S + k


def encode_objects(clip: ObjectFeatureClip, params: EncoderParams) -> EncodedObjects:
    """Run the full position/appearance/motion encoding of one clip."""
    T, S, d_in, d = clip.T, clip.S, clip.d_in, params.d
    if params.app_local.w1.shape[0] != d_in + 2 * d:
        raise ShapeError(
            f"encoder expects d_in={params.app_local.w1.shape[0] - 2 * d}, clip has {d_in}")
    N = T * S

    e_t_frames = temporal_encoding_matrix(np.arange(T), d)          # (T, d)
    e_t_local = Tensor(np.repeat(e_t_frames, S, axis=0))            # (N, d)
    boxes = Tensor(clip.boxes.reshape(N, 4))
    o_a = Tensor(clip.appearance_local.reshape(N, d_in))
    o_m = Tensor(clip.motion_local.reshape(N, d_in))

    e_b = params.box(boxes)                                         # shared by both branches
    v_a = params.app_local(ad.concat_cols([o_a, e_b, e_t_local]))
    v_m = params.mot_local(ad.concat_cols([o_m, e_b, e_t_local]))

    tile = np.repeat(np.arange(T), S)
    g_a = params.app_global(ad.concat_cols([Tensor(clip.appearance_global), Tensor(e_t_frames)]))
    g_m = params.mot_global(ad.concat_cols([Tensor(clip.motion_global), Tensor(e_t_frames)]))
    g_a_tiled = ad.gather_rows(g_a, tile)                           # (N, d)
    g_m_tiled = ad.gather_rows(g_m, tile)

    F_a = params.app_final(ad.concat_cols([v_a, g_a_tiled]))
    F_m = params.mot_final(ad.concat_cols([v_m, g_m_tiled]))
    return EncodedObjects(F_a=F_a, F_m=F_m, T=T, S=S)
