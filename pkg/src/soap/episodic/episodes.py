"""Datasets, frame sampling, episode sampling and evaluation perturbations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .clipio import read_clip, read_manifest


class InsufficientDataError(ValueError):
    pass


@dataclass
class ClipRecord:
    frames: np.ndarray  # L×C×H×W
    class_id: int
    source_id: str

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@lru_cache(maxsize=4096)
def _cached_clip(path: str) -> np.ndarray:
    arr = read_clip(path)
    arr.setflags(write=False)
    return arr


class Dataset:
    """Immutable view of a clip manifest, optionally restricted to one split."""

    def __init__(self, root: str | Path, split: str | None = None):
        self.root = Path(root)
        manifest = read_manifest(self.root)
        self.dims = manifest["dims"]
        classes = manifest["classes"]
        if split is not None:
            classes = [c for c in classes if c.get("split", split) == split]
            if not classes:
                raise InsufficientDataError(f"split {split!r} has no classes in {self.root}")
        self.split = split
        self.class_names: list[str] = [c["name"] for c in classes]
        self.clips: list[list[str]] = [list(c["clips"]) for c in classes]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def counts(self) -> list[int]:
        return [len(c) for c in self.clips]

    def load(self, class_id: int, index: int) -> ClipRecord:
        rel = self.clips[class_id][index]
        frames = _cached_clip(str(self.root / rel)).astype(np.float64)
        return ClipRecord(frames=frames, class_id=class_id, source_id=rel)


# ---------------------------------------------------------------------------
# Per-clip transforms
# ---------------------------------------------------------------------------


def interval_indices(length: int, interval: int) -> np.ndarray:
    if interval < 1:
        raise ValueError(f"interval must be >= 1, got {interval}")
    return np.arange(0, length, interval)


def apply_interval(clip: ClipRecord, interval: int, n_frames: int = 1) -> ClipRecord:
    """Keep frames 0, interval, 2*interval, ...; reject if fewer than ``n_frames`` remain."""
    idx = interval_indices(clip.length, interval)
    if len(idx) < n_frames:
        raise ValueError(
            f"{clip.source_id}: interval {interval} leaves {len(idx)} frames, need {n_frames}"
        )
    if interval == 1:
        return clip
    return replace(clip, frames=clip.frames[idx])


def segment_bounds(length: int, n_frames: int) -> np.ndarray:
    """Integer boundaries splitting [0, length) into ``n_frames`` near-equal segments."""
    return (np.arange(n_frames + 1) * length) // n_frames


def sparse_indices(
    length: int, n_frames: int, train: bool = False, rng: np.random.Generator | None = None
) -> np.ndarray:
    if length < n_frames:
        raise ValueError(f"clip has {length} frames, need at least {n_frames}")
    bounds = segment_bounds(length, n_frames)
    lo, hi = bounds[:-1], bounds[1:]
    if train:
        if rng is None:
            raise ValueError("training-mode sampling needs an rng")
        return rng.integers(lo, hi)
    return lo + (hi - lo) // 2


def uniform_sparse_sample(
    clip: ClipRecord, n_frames: int, train: bool = False, rng: np.random.Generator | None = None
) -> np.ndarray:
    """One frame per equal segment: the centre (eval) or a random one (train)."""
    idx = sparse_indices(clip.length, n_frames, train=train, rng=rng)
    return clip.frames[idx]


def reverse_order(clip: np.ndarray) -> np.ndarray:
    return clip[::-1].copy()


def noise_count(ratio: float, k_shot: int) -> int:
    """round-half-up(ratio * K)."""
    return int(math.floor(ratio * k_shot + 0.5 + 1e-12))


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Perturbations:
    interval: int = 1
    reverse_query: bool = False
    sample_noise_ratio: float = 0.0
    frame_noise_count: int = 0
    any_shot_range: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not 0.0 <= self.sample_noise_ratio < 1.0:
            raise ValueError("sample_noise_ratio must lie in [0, 1)")
        if self.frame_noise_count < 0:
            raise ValueError("frame_noise_count must be >= 0")
        if self.any_shot_range is not None:
            lo, hi = self.any_shot_range
            if not 1 <= lo <= hi:
                raise ValueError(f"bad any-shot range {self.any_shot_range}")
            object.__setattr__(self, "any_shot_range", (int(lo), int(hi)))

    def to_dict(self) -> dict:
        return {
            "interval": self.interval,
            "reverse_query": self.reverse_query,
            "sample_noise_ratio": self.sample_noise_ratio,
            "frame_noise_count": self.frame_noise_count,
            "any_shot_range": list(self.any_shot_range) if self.any_shot_range else None,
        }


@dataclass
class Episode:
    support: np.ndarray  # N×K×F×C×H×W
    support_ids: list[list[str]]
    queries: np.ndarray  # Q×F×C×H×W
    query_labels: np.ndarray  # episode-local class index per query
    query_ids: list[str]
    class_ids: list[int]  # dataset class id for each episode-local class
    n_way: int
    k_shot: int
    perturbations: Perturbations
    noise_record: dict = field(default_factory=dict)

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.k_shot)


@dataclass
class _Slot:
    class_id: int
    index: int
    label_class: int  # class the slot is labelled as (differs from class_id for noise)


def episode_rngs(seed: int, episode_index: int, stream: int = 0) -> dict[str, np.random.Generator]:
    """Independent streams so each perturbation never shifts the clip draws.

    ``stream`` separates training episodes from evaluation episodes.
    """
    seq = np.random.SeedSequence([seed, stream, episode_index])
    names = ("select", "frames", "sample_noise", "frame_noise")
    return {n: np.random.default_rng(s) for n, s in zip(names, seq.spawn(len(names)))}


def _clip_tensor(
    ds: Dataset, class_id: int, index: int, n_frames: int, pert: Perturbations,
    train: bool, rng: np.random.Generator,
) -> np.ndarray:
    rec = apply_interval(ds.load(class_id, index), pert.interval, n_frames)
    return uniform_sparse_sample(rec, n_frames, train=train, rng=rng)


def inject_sample_noise(
    slots: list[list[_Slot]], ds: Dataset, ratio: float, used: set[tuple[int, int]],
    rng: np.random.Generator,
) -> tuple[list[list[_Slot]], list[dict]]:
    """Replace round(ratio*K) shots of every support class with clips of other classes.

    Replaced slots keep their original label.  Returns the new slot table and
    a record of (class, shot, donor) replacements.
    """
    k = len(slots[0]) if slots else 0
    n_noise = noise_count(ratio, k)
    if n_noise == 0:
        return slots, []
    if n_noise >= k:
        raise ValueError(f"noise ratio {ratio} would replace all {k} shots")
    record = []
    out = [list(row) for row in slots]
    for c, row in enumerate(out):
        own = row[0].label_class
        victims = sorted(rng.choice(k, size=n_noise, replace=False).tolist())
        for shot in victims:
            others = [cid for cid in range(ds.num_classes) if cid != own]
            for _ in range(1000):
                donor_cls = int(rng.choice(others))
                donor_idx = int(rng.integers(len(ds.clips[donor_cls])))
                if (donor_cls, donor_idx) not in used:
                    break
            else:
                raise InsufficientDataError("no unused donor clips left for sample noise")
            used.add((donor_cls, donor_idx))
            out[c][shot] = _Slot(donor_cls, donor_idx, own)
            record.append({"class": c, "shot": shot, "donor": ds.clips[donor_cls][donor_idx]})
    return out, record


def inject_frame_noise(
    clip: np.ndarray, count: int, donor_pool: list[np.ndarray], rng: np.random.Generator
) -> tuple[np.ndarray, list[int]]:
    """Overwrite ``count`` distinct frame positions with frames from donor clips."""
    n_frames = clip.shape[0]
    if not 0 <= count < n_frames:
        raise ValueError(f"frame noise count {count} must lie in [0, {n_frames})")
    if count == 0:
        return clip, []
    if not donor_pool:
        raise ValueError("frame noise needs at least one donor clip")
    positions = sorted(rng.choice(n_frames, size=count, replace=False).tolist())
    out = clip.copy()
    for pos in positions:
        donor = donor_pool[int(rng.integers(len(donor_pool)))]
        out[pos] = donor[int(rng.integers(donor.shape[0]))]
    return out, positions


def sample_episode(
    ds: Dataset,
    n_way: int,
    k_shot: int,
    queries_per_class: int,
    n_frames: int,
    rngs: dict[str, np.random.Generator],
    perturbations: Perturbations = Perturbations(),
    train: bool = False,
) -> Episode:
    pert = perturbations
    sel = rngs["select"]
    if pert.any_shot_range is not None:
        lo, hi = pert.any_shot_range
        k_shot = int(sel.integers(lo, hi + 1))
    need = k_shot + queries_per_class
    eligible = [c for c, n in enumerate(ds.counts()) if n >= need]
    if len(eligible) < n_way:
        raise InsufficientDataError(
            f"need {n_way} classes with >= {need} clips each; "
            f"only {len(eligible)} of {ds.num_classes} qualify (counts {ds.counts()})"
        )
    class_ids = [int(c) for c in sel.choice(eligible, size=n_way, replace=False)]
    slots: list[list[_Slot]] = []
    query_slots: list[_Slot] = []
    used: set[tuple[int, int]] = set()
    for label, cid in enumerate(class_ids):
        picks = sel.choice(len(ds.clips[cid]), size=need, replace=False)
        slots.append([_Slot(cid, int(i), label) for i in picks[:k_shot]])
        query_slots.extend(_Slot(cid, int(i), label) for i in picks[k_shot:])
        used.update((cid, int(i)) for i in picks)

    # labels inside slots are episode-local from here on
    noise_record: dict = {}
    if pert.sample_noise_ratio > 0:
        for row in slots:
            for s in row:
                s.label_class = class_ids[s.label_class]
        slots, replaced = inject_sample_noise(slots, ds, pert.sample_noise_ratio, used, rngs["sample_noise"])
        local = {cid: i for i, cid in enumerate(class_ids)}
        for row in slots:
            for s in row:
                s.label_class = local[s.label_class]
        noise_record["sample_noise"] = replaced

    frame_rng = rngs["frames"]
    support = np.stack([
        np.stack([
            _clip_tensor(ds, s.class_id, s.index, n_frames, pert, train, frame_rng) for s in row
        ])
        for row in slots
    ])
    queries = np.stack([
        _clip_tensor(ds, s.class_id, s.index, n_frames, pert, train, frame_rng) for s in query_slots
    ])

    if pert.frame_noise_count > 0:
        fn_rng = rngs["frame_noise"]
        placements = []
        for c, row in enumerate(slots):
            for k, s in enumerate(row):
                own = class_ids[c]
                others = [cid for cid in range(ds.num_classes) if cid != own]
                donor_cls = int(fn_rng.choice(others))
                donor_idx = int(fn_rng.integers(len(ds.clips[donor_cls])))
                donor = _clip_tensor(ds, donor_cls, donor_idx, n_frames, pert, False, fn_rng)
                support[c, k], pos = inject_frame_noise(
                    support[c, k], pert.frame_noise_count, [donor], fn_rng
                )
                placements.append({"class": c, "shot": k, "positions": pos})
        noise_record["frame_noise"] = placements

    if pert.reverse_query:
        queries = np.ascontiguousarray(queries[:, ::-1])

    return Episode(
        support=support,
        support_ids=[[ds.clips[s.class_id][s.index] for s in row] for row in slots],
        queries=queries,
        query_labels=np.array([s.label_class for s in query_slots]),
        query_ids=[ds.clips[s.class_id][s.index] for s in query_slots],
        class_ids=class_ids,
        n_way=n_way,
        k_shot=k_shot,
        perturbations=pert,
        noise_record=noise_record,
    )
