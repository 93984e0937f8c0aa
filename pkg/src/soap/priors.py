"""Prior-enhancement modules applied to raw clips before feature extraction.

Three gated residual branches share one shape contract, F×C×H×W in and out:

* ``three_dim_prior``      channel-mean -> 3-D conv -> per-pixel gate
* ``channel_wise_prior``   spatial-mean -> 1×1 expand -> temporal 1-D conv -> 1×1 recover
* ``hybrid_motion_prior``  multi-scale frame-tuple differences -> X→F linear -> gate

Every function also accepts a leading batch axis (B×F×C×H×W); the batch is
how the training loop pushes all clips of an episode through in one pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import ModelParams
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class SoapConfig:
    F: int = 8
    C: int = 3
    H: int = 32
    W: int = 32
    conv3d_extent: int = 3
    c_r: int = 16
    conv1d_extent: int = 3
    tuple_set: tuple[int, ...] = (1, 2, 3)
    motion_conv_extent: int = 3
    motion_conv_bias: bool = True
    z_bias: bool = True
    enabled: tuple[str, ...] = field(default=("3d", "cw", "motion"))

    def __post_init__(self) -> None:
        object.__setattr__(self, "tuple_set", tuple(int(t) for t in self.tuple_set))
        object.__setattr__(self, "enabled", tuple(self.enabled))
        for name in ("F", "C", "H", "W", "c_r"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("conv3d_extent", "conv1d_extent", "motion_conv_extent"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer, got {k}")
        ts = self.tuple_set
        if not ts:
            raise ValueError("tuple_set must be non-empty")
        if list(ts) != sorted(set(ts)):
            raise ValueError(f"tuple_set must be strictly increasing, got {ts}")
        bad = [t for t in ts if not 1 <= t < self.F]
        if bad:
            raise ValueError(f"tuple sizes {bad} must satisfy 1 <= T < F={self.F}")
        unknown = set(self.enabled) - {"3d", "cw", "motion"}
        if unknown:
            raise ValueError(f"unknown prior names {sorted(unknown)}")

    @property
    def X(self) -> int:
        """Total frame count of the concatenated motion tensor."""
        return sum((self.F - t) * t for t in self.tuple_set)

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.F, self.C, self.H, self.W)


@dataclass
class PriorBundle:
    p3d: Tensor
    pcw: Tensor
    pmotion: Tensor
    fused: Tensor


def init_prior_params(cfg: SoapConfig, params: ModelParams, rng: np.random.Generator) -> None:
    k3, k1, km = cfg.conv3d_extent, cfg.conv1d_extent, cfg.motion_conv_extent
    params.uniform("prior.3d.weight", (1, 1, k3, k3, k3), k3**3, rng)
    params.zeros("prior.3d.bias", (1,))
    params.uniform("prior.cw.expand.weight", (cfg.c_r, cfg.C, 1, 1), cfg.C, rng)
    params.zeros("prior.cw.expand.bias", (cfg.c_r,))
    params.uniform("prior.cw.temporal.weight", (cfg.c_r, cfg.c_r, k1), cfg.c_r * k1, rng)
    params.zeros("prior.cw.temporal.bias", (cfg.c_r,))
    params.uniform("prior.cw.recover.weight", (cfg.C, cfg.c_r, 1, 1), cfg.c_r, rng)
    params.zeros("prior.cw.recover.bias", (cfg.C,))
    params.uniform("prior.motion.conv.weight", (cfg.C, cfg.C, km, km), cfg.C * km * km, rng)
    if cfg.motion_conv_bias:
        params.zeros("prior.motion.conv.bias", (cfg.C,))
    params.uniform("prior.motion.z.weight", (cfg.F, cfg.X), cfg.X, rng)
    if cfg.z_bias:
        params.zeros("prior.motion.z.bias", (cfg.F,))


def _batched(clip: Tensor, cfg: SoapConfig) -> tuple[Tensor, bool]:
    if clip.ndim == 4:
        if clip.shape != cfg.clip_shape:
            raise ShapeError(f"clip shape {clip.shape} != configured {cfg.clip_shape}")
        return T.reshape(clip, (1,) + clip.shape), True
    if clip.ndim == 5 and clip.shape[1:] == cfg.clip_shape:
        return clip, False
    raise ShapeError(f"clip shape {clip.shape} != configured {cfg.clip_shape}")


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


def _gate(x: Tensor, logits: Tensor) -> Tensor:
    # x + sigmoid(logits) * x, logits broadcast over the singleton axes
    return T.add(x, T.mul(x, T.sigmoid(logits)))


def _framewise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Apply a 2-D conv to every frame of a B×F×C×H×W tensor."""
    b, f = x.shape[:2]
    flat = T.reshape(x, (b * f,) + x.shape[2:])
    out = T.convolve(flat, weight, rank=2, bias=bias)
    return T.reshape(out, (b, f) + out.shape[1:])


def three_dim_gate_logits(clip: Tensor, params: ModelParams, cfg: SoapConfig) -> Tensor:
    x, squeeze = _batched(clip, cfg)
    b = x.shape[0]
    avg = T.reduce_mean(x, axes=2, keep_dims=True)  # B×F×1×H×W
    vol = T.transpose(avg, (0, 2, 1, 3, 4))  # B×1×F×H×W
    rel = T.convolve(vol, params["prior.3d.weight"], rank=3, bias=params["prior.3d.bias"])
    out = T.transpose(rel, (0, 2, 1, 3, 4))
    assert out.shape == (b, cfg.F, 1, cfg.H, cfg.W)
    return _unbatch(out, squeeze)


def three_dim_prior(clip: Tensor, params: ModelParams, cfg: SoapConfig) -> Tensor:
    x, squeeze = _batched(clip, cfg)
    logits = three_dim_gate_logits(x, params, cfg)
    return _unbatch(_gate(x, logits), squeeze)


def channel_wise_gate_logits(clip: Tensor, params: ModelParams, cfg: SoapConfig) -> Tensor:
    x, squeeze = _batched(clip, cfg)
    b, f, c = x.shape[:3]
    pooled = T.reduce_mean(x, axes=(3, 4), keep_dims=True)  # B×F×C×1×1
    expanded = _framewise_conv2d(
        pooled, params["prior.cw.expand.weight"], params["prior.cw.expand.bias"]
    )  # B×F×Cr×1×1
    seq = T.transpose(T.reshape(expanded, (b, f, cfg.c_r)), (0, 2, 1))  # B×Cr×F
    calibrated = T.convolve(
        seq, params["prior.cw.temporal.weight"], rank=1, bias=params["prior.cw.temporal.bias"]
    )
    back = T.reshape(T.transpose(calibrated, (0, 2, 1)), (b, f, cfg.c_r, 1, 1))
    out = _framewise_conv2d(back, params["prior.cw.recover.weight"], params["prior.cw.recover.bias"])
    assert out.shape == (b, f, c, 1, 1)
    return _unbatch(out, squeeze)


def channel_wise_prior(clip: Tensor, params: ModelParams, cfg: SoapConfig) -> Tensor:
    x, squeeze = _batched(clip, cfg)
    logits = channel_wise_gate_logits(x, params, cfg)
    return _unbatch(_gate(x, logits), squeeze)


def sliding_windows(clip: Tensor, T_size: int) -> list[Tensor]:
    """All contiguous length-``T_size`` frame windows, in temporal order.

    The frame axis is axis 0 for a single clip and axis 1 for a batch.
    """
    axis = 0 if clip.ndim == 4 else 1
    n_frames = clip.shape[axis]
    if not 1 <= T_size < n_frames:
        raise ValueError(f"window size {T_size} must satisfy 1 <= T < F={n_frames}")
    n_windows = n_frames - T_size + 1
    return [T.slice_axis(clip, axis, i, i + T_size) for i in range(n_windows)]


def _difference_concat(moved: list[Tensor], windows: list[Tensor], axis: int) -> Tensor:
    diffs = [T.sub(m, w) for m, w in zip(moved[1:], windows[:-1])]
    return T.concat(diffs, axis=axis)


def motion_info_calc(
    windows: list[Tensor], conv_weight: Tensor, conv_bias: Tensor | None = None
) -> Tensor:
    """Concatenate ``conv(window[i+1]) - window[i]`` along the frame axis.

    The 2-D conv runs frame by frame (the window's frames form the batch).
    """
    if len(windows) < 2:
        raise ValueError(f"need at least 2 windows to difference, got {len(windows)}")
    batched = windows[0].ndim == 5
    if batched:
        moved = [_framewise_conv2d(w, conv_weight, conv_bias) for w in windows]
    else:
        moved = [T.convolve(w, conv_weight, rank=2, bias=conv_bias) for w in windows]
    return _difference_concat(moved, windows, axis=1 if batched else 0)


def motion_tensor(clip: Tensor, params: ModelParams, cfg: SoapConfig) -> Tensor:
    """Branch outputs for every tuple size, concatenated in ascending T: X×C×H×W."""
    x, squeeze = _batched(clip, cfg)
    weight = params["prior.motion.conv.weight"]
    bias = params["prior.motion.conv.bias"] if cfg.motion_conv_bias else None
    # the conv acts on single frames, so convolving every frame once and then
    # windowing gives the same tensors as convolving each window separately
    moved = _framewise_conv2d(x, weight, bias)
    branches = [
        _difference_concat(sliding_windows(moved, t), sliding_windows(x, t), axis=1)
        for t in cfg.tuple_set
    ]
    return _unbatch(T.concat(branches, axis=1), squeeze)


def hybrid_motion_gate_logits(clip: Tensor, params: ModelParams, cfg: SoapConfig) -> Tensor:
    x, squeeze = _batched(clip, cfg)
    b = x.shape[0]
    m = motion_tensor(x, params, cfg)  # B×X×C×H×W
    cols = cfg.C * cfg.H * cfg.W
    flat = T.reshape(m, (b, cfg.X, cols))
    mixed = T.matmul(params["prior.motion.z.weight"], flat)  # B×F×cols
    if cfg.z_bias:
        mixed = T.add(mixed, T.reshape(params["prior.motion.z.bias"], (cfg.F, 1)))
    z = T.reshape(mixed, (b,) + cfg.clip_shape)
    out = T.reduce_mean(z, axes=(3, 4), keep_dims=True)
    return _unbatch(out, squeeze)


def hybrid_motion_prior(clip: Tensor, params: ModelParams, cfg: SoapConfig) -> Tensor:
    x, squeeze = _batched(clip, cfg)
    logits = hybrid_motion_gate_logits(x, params, cfg)
    return _unbatch(_gate(x, logits), squeeze)


def fuse_priors(raw: Tensor, p3d: Tensor, pcw: Tensor, pmotion: Tensor) -> PriorBundle:
    for name, t in (("p3d", p3d), ("pcw", pcw), ("pmotion", pmotion)):
        if t.shape != raw.shape:
            raise ShapeError(f"{name} shape {t.shape} != raw shape {raw.shape}")
    fused = T.add(T.add(T.add(p3d, pcw), pmotion), raw)
    return PriorBundle(p3d=p3d, pcw=pcw, pmotion=pmotion, fused=fused)


_MODULES = {
    "3d": three_dim_prior,
    "cw": channel_wise_prior,
    "motion": hybrid_motion_prior,
}


def enhance(clip: Tensor, params: ModelParams, cfg: SoapConfig) -> Tensor:
    """Raw clip(s) plus every enabled prior; the raw clip when none is enabled."""
    x, squeeze = _batched(clip, cfg)
    if not cfg.enabled:
        return clip
    priors = [_MODULES[n](x, params, cfg) for n in ("3d", "cw", "motion") if n in cfg.enabled]
    total = priors[0]
    for p in priors[1:]:
        total = T.add(total, p)
    return _unbatch(T.add(total, x), squeeze)


def prior_bundle(clip: Tensor, params: ModelParams, cfg: SoapConfig) -> PriorBundle:
    """All three priors and their fusion, regardless of ``cfg.enabled``."""
    return fuse_priors(
        clip,
        three_dim_prior(clip, params, cfg),
        channel_wise_prior(clip, params, cfg),
        hybrid_motion_prior(clip, params, cfg),
    )
