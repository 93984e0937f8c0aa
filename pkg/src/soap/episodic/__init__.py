"""Clip storage, synthetic data and few-shot episode sampling."""
from .clipio import ClipFormatError, decode_clip, encode_clip, read_clip, read_manifest, write_clip
from .episodes import (
    ClipRecord,
    Dataset,
    Episode,
    InsufficientDataError,
    Perturbations,
    apply_interval,
    episode_rngs,
    inject_frame_noise,
    inject_sample_noise,
    reverse_order,
    sample_episode,
    uniform_sparse_sample,
)
from .synthetic import ClassDef, SyntheticSpec, default_spec, generate_synthetic_dataset, static_spec

__all__ = [
    "ClassDef",
    "ClipFormatError",
    "ClipRecord",
    "Dataset",
    "Episode",
    "InsufficientDataError",
    "Perturbations",
    "SyntheticSpec",
    "apply_interval",
    "decode_clip",
    "default_spec",
    "encode_clip",
    "episode_rngs",
    "generate_synthetic_dataset",
    "inject_frame_noise",
    "inject_sample_noise",
    "read_clip",
    "read_manifest",
    "reverse_order",
    "sample_episode",
    "static_spec",
    "uniform_sparse_sample",
    "write_clip",
]
