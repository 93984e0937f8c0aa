"""Query-conditioned prototypes, distances and the episode loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .params import ModelParams
from .tensor import ShapeError, Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class HeadConfig:
    d_k: int = 48
    d_v: int = 48

    def __post_init__(self) -> None:
        if self.d_k < 1 or self.d_v < 1:
            raise ValueError("d_k and d_v must be positive")


@dataclass
class Prototype:
    value: Tensor  # F×d_v
    class_id: int


def init_head_params(cfg: HeadConfig, D: int, params: ModelParams, rng: np.random.Generator) -> None:
    for name, out in (("psi", cfg.d_k), ("gamma", cfg.d_k), ("lambda", cfg.d_v)):
        params.uniform(f"head.{name}.weight", (D, out), D, rng)
        params.zeros(f"head.{name}.bias", (out,))


def _lin(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return T.linear(x, params[f"head.{name}.weight"], params[f"head.{name}.bias"])


def attention_logits(query_feat: Tensor, support_feat: Tensor, params: ModelParams) -> Tensor:
    """F×F map: LN(psi(query)) · LN(gamma(support))^T."""
    q = T.layer_norm(_lin(query_feat, params, "psi"), axis=-1, epsilon=LN_EPS)
    s = T.layer_norm(_lin(support_feat, params, "gamma"), axis=-1, epsilon=LN_EPS)
    return T.matmul(q, T.transpose(s, (1, 0)))


def prototype_values(query_feats: Tensor, support_feats: Tensor, params: ModelParams) -> Tensor:
    """Prototypes for every (query, class) pair.

    query_feats: Q×F×D; support_feats: N×K×F×D.  Returns Q×N×F×d_v.
    """
    if query_feats.ndim != 3 or support_feats.ndim != 4:
        raise ShapeError(
            f"expected Q×F×D queries and N×K×F×D supports, got {query_feats.shape}, {support_feats.shape}"
        )
    nq, F, D = query_feats.shape
    n, k = support_feats.shape[:2]
    if k < 1:
        raise ValueError("each class needs at least one support sample")
    if support_feats.shape[2:] != (F, D):
        raise ShapeError(f"support frames/features {support_feats.shape[2:]} != query {(F, D)}")

    q = T.layer_norm(_lin(query_feats, params, "psi"), axis=-1, epsilon=LN_EPS)
    s = T.layer_norm(_lin(support_feats, params, "gamma"), axis=-1, epsilon=LN_EPS)
    d_k = q.shape[-1]
    q = T.reshape(q, (nq, 1, 1, F, d_k))
    s = T.reshape(T.transpose(s, (0, 1, 3, 2)), (1, n, k, d_k, F))
    attn = T.softmax(T.matmul(q, s), axis=-1)  # Q×N×K×F×F, rows over support frames
    values = _lin(support_feats, params, "lambda")
    d_v = values.shape[-1]
    mixed = T.matmul(attn, T.reshape(values, (1, n, k, F, d_v)))
    # mean over shots taken around the first shot, so K identical shots
    # give back the one-shot prototype bit for bit
    first = T.slice_axis(mixed, 2, 0, 1)
    spread = T.reduce_mean(T.sub(mixed, first), axes=2)
    return T.add(spread, T.reshape(first, (nq, n, F, d_v)))


def build_prototype(
    query_feat: Tensor, support_feats: Sequence[Tensor], params: ModelParams, class_id: int = 0
) -> Prototype:
    if len(support_feats) == 0:
        raise ValueError("build_prototype needs at least one support sample")
    for s in support_feats:
        if s.shape != query_feat.shape:
            raise ShapeError(f"support {s.shape} and query {query_feat.shape} differ")
    F, D = query_feat.shape
    stacked = T.reshape(T.concat(list(support_feats), axis=0), (1, len(support_feats), F, D))
    value = prototype_values(T.reshape(query_feat, (1, F, D)), stacked, params)
    return Prototype(value=T.reshape(value, value.shape[2:]), class_id=class_id)


def distance(prototype: Prototype, query_feat: Tensor, params: ModelParams) -> Tensor:
    """Frobenius norm of prototype minus lambda(query)."""
    projected = _lin(query_feat, params, "lambda")
    if projected.shape != prototype.value.shape:
        raise ShapeError(f"prototype {prototype.value.shape} vs projected query {projected.shape}")
    return T.frobenius_norm(T.sub(prototype.value, projected), axes=(0, 1))


def episode_distances(query_feats: Tensor, support_feats: Tensor, params: ModelParams) -> Tensor:
    """Q×N distance matrix for a whole episode."""
    protos = prototype_values(query_feats, support_feats, params)
    nq, F = query_feats.shape[:2]
    projected = _lin(query_feats, params, "lambda")
    diff = T.sub(protos, T.reshape(projected, (nq, 1, F, projected.shape[-1])))
    return T.frobenius_norm(diff, axes=(2, 3))


def classify(distances) -> int:
    """Index of the smallest distance; ties go to the lowest index."""
    d = np.asarray(distances.data if isinstance(distances, Tensor) else distances, dtype=float)
    if d.size == 0:
        raise ValueError("classify needs at least one distance")
    return int(np.argmin(d))


def classify_batch(distances: np.ndarray) -> np.ndarray:
    return np.argmin(np.asarray(distances), axis=-1)


def loss_ce(distances: Tensor, true_class) -> Tensor:
    """Cross entropy of softmax(-distances) against the true class.

    Accepts one N-vector with an int label, or Q×N with a label sequence
    (mean over the Q rows).
    """
    d = distances if distances.ndim == 2 else T.reshape(distances, (1, distances.shape[0]))
    labels = [true_class] if np.ndim(true_class) == 0 else list(true_class)
    n = d.shape[1]
    if len(labels) != d.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {d.shape[0]} rows")
    for y in labels:
        if not 0 <= int(y) < n:
            raise ValueError(f"class {y} outside 0..{n - 1}")
    logp = T.log_softmax(T.scale(d, -1.0), axis=1)
    picked = T.pick(logp, [int(y) for y in labels])
    return T.scale(T.reduce_mean(picked, axes=0), -1.0)
