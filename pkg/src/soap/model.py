"""The full pipeline: priors -> frame embedding -> prototype distances."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embedder import EmbedConfig, embed_frames, init_embed_params
from .head import HeadConfig, episode_distances, init_head_params, loss_ce
from .params import ModelParams
from .priors import SoapConfig, enhance, init_prior_params
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    soap: SoapConfig = field(default_factory=SoapConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    head: HeadConfig = field(default_factory=HeadConfig)


class SoapNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ModelParams()
        rng = np.random.default_rng(seed)
        init_prior_params(cfg.soap, self.params, rng)
        init_embed_params(cfg.embed, cfg.soap.C, cfg.soap.F, self.params, rng)
        init_head_params(cfg.head, cfg.embed.D, self.params, rng)

    def features(self, clips: Tensor) -> Tensor:
        """B×F×C×H×W -> B×F×D."""
        return embed_frames(enhance(clips, self.params, self.cfg.soap), self.params, self.cfg.embed)

    def distances(self, support: np.ndarray | Tensor, queries: np.ndarray | Tensor) -> Tensor:
        """support: N×K×F×C×H×W, queries: Q×F×C×H×W -> Q×N distances."""
        s = support if isinstance(support, Tensor) else Tensor(support)
        q = queries if isinstance(queries, Tensor) else Tensor(queries)
        clip_shape = self.cfg.soap.clip_shape
        if s.ndim != 6 or s.shape[2:] != clip_shape:
            raise ShapeError(f"support must be N×K×{clip_shape}, got {s.shape}")
        if q.ndim != 5 or q.shape[1:] != clip_shape:
            raise ShapeError(f"queries must be Q×{clip_shape}, got {q.shape}")
        n, k = s.shape[:2]
        nq = q.shape[0]
        batch = T.concat([T.reshape(s, (n * k,) + clip_shape), q], axis=0)
        feats = self.features(batch)
        s_feats = T.reshape(T.slice_axis(feats, 0, 0, n * k), (n, k) + feats.shape[1:])
        q_feats = T.slice_axis(feats, 0, n * k, n * k + nq)
        return episode_distances(q_feats, s_feats, self.params)

    def loss(self, support, queries, labels) -> Tensor:
        return loss_ce(self.distances(support, queries), labels)

    def predict(self, support, queries) -> np.ndarray:
        return np.argmin(self.distances(support, queries).data, axis=1)
