"""Per-frame embedding: a small conv backbone plus position embeddings.

The backbone is a stand-in for a large pretrained image network.  Anything
mapping a clip F×C×H×W to F×D can replace it as long as it registers its
weights under the ``embed.`` prefix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ModelParams
from .tensor import ShapeError, Tensor

PE_KINDS = ("sinusoidal", "learnable")


@dataclass(frozen=True)
class EmbedConfig:
    D: int = 64
    pe_kind: str = "sinusoidal"
    stages: tuple[tuple[int, int], ...] = ((8, 3), (16, 3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple((int(c), int(k)) for c, k in self.stages))
        if self.D < 1:
            raise ValueError("D must be positive")
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"pe_kind must be one of {PE_KINDS}, got {self.pe_kind!r}")
        for ch, k in self.stages:
            if ch < 1 or k < 1 or k % 2 == 0:
                raise ValueError(f"bad backbone stage ({ch}, {k})")


def init_embed_params(
    cfg: EmbedConfig, in_channels: int, n_frames: int, params: ModelParams, rng: np.random.Generator
) -> None:
    ch = in_channels
    for i, (out_ch, k) in enumerate(cfg.stages):
        params.uniform(f"embed.stage{i}.weight", (out_ch, ch, k, k), ch * k * k, rng)
        params.zeros(f"embed.stage{i}.bias", (out_ch,))
        ch = out_ch
    params.uniform("embed.proj.weight", (ch, cfg.D), ch, rng)
    params.zeros("embed.proj.bias", (cfg.D,))
    if cfg.pe_kind == "learnable":
        params.zeros("embed.pe", (n_frames, cfg.D))


def sinusoidal_table(n_positions: int, D: int) -> np.ndarray:
    """Rows are zero-based positions; even columns sin, odd columns cos."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    pair = np.arange(0, D, 2, dtype=np.float64)
    freq = 1.0 / np.power(10000.0, pair / D)
    table = np.zeros((n_positions, D))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: D // 2])
    return table


def position_embedding(t: int, kind: str, D: int, n_frames: int, params: ModelParams | None = None) -> Tensor:
    """Embedding of 1-based frame index ``t``."""
    if not 1 <= t <= n_frames:
        raise ValueError(f"frame index {t} outside 1..{n_frames}")
    if kind == "sinusoidal":
        return Tensor(sinusoidal_table(t, D)[t - 1])
    if kind == "learnable":
        if params is None:
            raise ValueError("learnable position embedding needs params")
        return T.reshape(T.slice_axis(params["embed.pe"], 0, t - 1, t), (D,))
    raise ValueError(f"unknown position embedding kind {kind!r}")


def _position_table(cfg: EmbedConfig, n_frames: int, params: ModelParams) -> Tensor:
    if cfg.pe_kind == "learnable":
        return params["embed.pe"]
    return Tensor(sinusoidal_table(n_frames, cfg.D))


def backbone(frames: Tensor, params: ModelParams, cfg: EmbedConfig) -> Tensor:
    """f_theta on a stack of frames: (N, C, H, W) -> (N, D)."""
    x = frames
    for i in range(len(cfg.stages)):
        x = T.tanh(T.convolve(x, params[f"embed.stage{i}.weight"], rank=2, bias=params[f"embed.stage{i}.bias"]))
    pooled = T.reduce_mean(x, axes=(2, 3))
    return T.linear(pooled, params["embed.proj.weight"], params["embed.proj.bias"])


def embed_frames(clip: Tensor, params: ModelParams, cfg: EmbedConfig) -> Tensor:
    """F×C×H×W -> F×D (or B×F×C×H×W -> B×F×D)."""
    if clip.ndim not in (4, 5):
        raise ShapeError(f"embed_frames expects F×C×H×W or B×F×C×H×W, got {clip.shape}")
    lead = clip.shape[:-3]
    n_frames = lead[-1]
    if cfg.pe_kind == "learnable" and params["embed.pe"].shape[0] != n_frames:
        raise ShapeError(f"clip has {n_frames} frames, position table has {params['embed.pe'].shape[0]}")
    frames = T.reshape(clip, (-1,) + clip.shape[-3:])
    feats = T.reshape(backbone(frames, params, cfg), lead + (cfg.D,))
    return T.add(feats, _position_table(cfg, n_frames, params))
