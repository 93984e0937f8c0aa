"""Training, evaluation, gradient checking and checkpoint I/O."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .embedder import EmbedConfig
from .episodic import Dataset, Perturbations, episode_rngs, sample_episode
from .episodic.synthetic import SyntheticSpec, default_spec, generate_synthetic_dataset
from .gradcheck import GradCheckReport, finite_diff_check
from .head import HeadConfig, episode_distances
from .model import ModelConfig, SoapNet
from .priors import SoapConfig
from .tensor import Tape, Tensor

TRAIN_STREAM = 0
EVAL_STREAM = 1
CHECKPOINT_FORMAT = 1


class NumericalAbort(RuntimeError):
    def __init__(self, episode: int, norms: dict[str, float]):
        self.episode = episode
        self.norms = norms
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)
        shown = ", ".join(f"{k}={v:.4g}" for k, v in worst[:8])
        super().__init__(f"non-finite loss at episode {episode}; parameter norms: {shown}")


class CheckpointMismatch(ValueError):
    def __init__(self, diff: dict[str, tuple]):
        self.diff = diff
        lines = ", ".join(f"{k}: checkpoint={a!r} config={b!r}" for k, (a, b) in sorted(diff.items()))
        super().__init__(f"checkpoint incompatible with config ({lines})")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "SGD"
    learning_rate: float = 1e-3
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if self.kind.upper() != "SGD":
            raise ValueError(f"only SGD is supported, got {self.kind!r}")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "data/default"
    train_split: str | None = "train"
    eval_split: str | None = "test"
    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 1
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
    enabled_priors: tuple[str, ...] = ("3d", "cw", "motion")
    D: int = 64
    pe_kind: str = "sinusoidal"
    backbone_stages: tuple[tuple[int, int], ...] = ((8, 3), (16, 3))
    d_k: int = 48
    d_v: int = 48
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    episodes_train: int = 2000
    episodes_eval: int = 1000
    metrics_every: int = 1
    seed: int = 0
    perturbations: Perturbations = field(default_factory=Perturbations)

    def __post_init__(self) -> None:
        for name in ("n_way", "k_shot", "queries_per_class", "episodes_train", "episodes_eval", "metrics_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_way < 2:
            raise ValueError("n_way must be at least 2")
        object.__setattr__(self, "tuple_set", tuple(self.tuple_set))
        object.__setattr__(self, "enabled_priors", tuple(self.enabled_priors))
        object.__setattr__(self, "backbone_stages", tuple(tuple(s) for s in self.backbone_stages))
        # building the sub-configs runs their validation
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            soap=SoapConfig(
                F=self.F, C=self.C, H=self.H, W=self.W,
                conv3d_extent=self.conv3d_extent, c_r=self.c_r, conv1d_extent=self.conv1d_extent,
                tuple_set=self.tuple_set, motion_conv_extent=self.motion_conv_extent,
                motion_conv_bias=self.motion_conv_bias, z_bias=self.z_bias,
                enabled=self.enabled_priors,
            ),
            embed=EmbedConfig(D=self.D, pe_kind=self.pe_kind, stages=self.backbone_stages),
            head=HeadConfig(d_k=self.d_k, d_v=self.d_v),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tuple_set"] = list(self.tuple_set)
        d["enabled_priors"] = list(self.enabled_priors)
        d["backbone_stages"] = [list(s) for s in self.backbone_stages]
        d["perturbations"] = self.perturbations.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if "perturbations" in d:
            p = dict(d["perturbations"])
            if p.get("any_shot_range") is not None:
                p["any_shot_range"] = tuple(p["any_shot_range"])
            d["perturbations"] = Perturbations(**p)
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        ds = Path(cfg.dataset)
        if not ds.is_absolute():
            # relative dataset paths are resolved against the config file
            cfg = replace(cfg, dataset=str((Path(path).parent / ds).resolve()))
        return cfg


# fields that must agree between a checkpoint and the config that loads it
MODEL_FIELDS = (
    "F", "C", "H", "W", "conv3d_extent", "c_r", "conv1d_extent", "tuple_set",
    "motion_conv_extent", "motion_conv_bias", "z_bias", "enabled_priors",
    "D", "pe_kind", "backbone_stages", "d_k", "d_v",
)


def config_diff(saved: dict, cfg: RunConfig) -> dict[str, tuple]:
    current = cfg.to_dict()
    return {k: (saved.get(k), current[k]) for k in MODEL_FIELDS if saved.get(k) != current[k]}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".json":
        return p, p.with_name("params.bin")
    return p / "params.json", p / "params.bin"


def quantize_params(model: SoapNet) -> None:
    """Round parameters to float32 so the in-memory model equals its checkpoint."""
    for p in model.params.values():
        p.data[...] = p.data.astype(np.float32)


def save_checkpoint(model: SoapNet, cfg: RunConfig, path: str | Path) -> Path:
    manifest_path, blob_path = _checkpoint_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "params": entries,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> tuple[SoapNet, RunConfig]:
    """Rebuild a model from ``params.json``/``params.bin``.

    When ``cfg`` is given its model fields must match the checkpoint's; the
    returned config is then ``cfg`` itself, otherwise the saved snapshot.
    """
    manifest_path, blob_path = _checkpoint_paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    saved_cfg = RunConfig.from_dict(manifest["config"])
    if cfg is not None:
        diff = config_diff(manifest["config"], cfg)
        if diff:
            raise CheckpointMismatch(diff)
    else:
        cfg = saved_cfg
    blob = blob_path.read_bytes()
    values, seen, end = {}, set(), 0
    for e in manifest["params"]:
        if e["name"] in seen:
            raise ValueError(f"parameter {e['name']!r} appears twice in checkpoint")
        seen.add(e["name"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + 4 * count > len(blob):
            raise ValueError(f"parameter {e['name']!r} runs past the end of {blob_path}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        values[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        end = max(end, start + 4 * count)
    if end != len(blob):
        raise ValueError(f"{blob_path} has {len(blob) - end} trailing bytes")
    model = SoapNet(saved_cfg.model_config(), seed=manifest.get("seed", 0))
    model.params.load(values)
    return model, cfg


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SoapNet
    losses: list[float]
    seconds: float


def param_norms(model: SoapNet) -> dict[str, float]:
    return {k: float(np.sqrt(np.sum(p.data * p.data))) for k, p in model.params.items()}


def _check_dataset(ds: Dataset, n_way: int, need: int, what: str) -> None:
    ok = [c for c in ds.counts() if c >= need]
    if len(ok) < n_way:
        raise ValueError(
            f"{what} dataset {ds.root} (split {ds.split}) is too small: need {n_way} classes "
            f"with >= {need} clips, have counts {ds.counts()}"
        )


def train_step(model: SoapNet, support: np.ndarray, queries: np.ndarray, labels: np.ndarray, lr: float,
               momentum: float = 0.0, velocity: dict | None = None) -> float:
    with Tape() as tape:
        loss = model.loss(support, queries, labels)
    value = loss.item()
    if math.isfinite(value):
        tape.backward(loss, model.params.values())
        model.params.sgd_step(lr, momentum, velocity)
        model.params.zero_grad()
    tape.release()
    return value


def cmd_train(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    on_episode: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Episodic SGD; writes ``metrics.jsonl`` and a checkpoint when ``out_dir`` is set."""
    ds = Dataset(cfg.dataset, cfg.train_split)
    _check_dataset(ds, cfg.n_way, cfg.k_shot + cfg.queries_per_class, "training")
    model = SoapNet(cfg.model_config(), seed=cfg.seed)
    # start from float32-representable values so a zero learning rate is a no-op end to end
    quantize_params(model)
    opt = cfg.optimizer
    velocity: dict = {}
    losses: list[float] = []
    start = time.perf_counter()

    metrics = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "w")
    try:
        for ep in range(cfg.episodes_train):
            episode = sample_episode(
                ds, cfg.n_way, cfg.k_shot, cfg.queries_per_class, cfg.F,
                episode_rngs(cfg.seed, ep, TRAIN_STREAM), train=True,
            )
            value = train_step(model, episode.support, episode.queries, episode.query_labels,
                               opt.learning_rate, opt.momentum, velocity)
            if not math.isfinite(value):
                raise NumericalAbort(ep, param_norms(model))
            losses.append(value)
            if metrics is not None and (ep + 1) % cfg.metrics_every == 0:
                metrics.write(json.dumps({"episode": ep, "loss": value}) + "\n")
                metrics.flush()
            if on_episode is not None:
                on_episode(ep, value)
    finally:
        if metrics is not None:
            metrics.close()

    quantize_params(model)
    if out_dir is not None:
        save_checkpoint(model, cfg, out_dir)
    return TrainResult(model=model, losses=losses, seconds=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    episodes: int
    correct: int
    predictions: int
    perturbations: Perturbations

    @property
    def accuracy(self) -> float:
        return self.correct / self.predictions if self.predictions else 0.0

    @property
    def ci95(self) -> float:
        return confidence_half_width(self.accuracy, self.predictions)

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "accuracy": self.accuracy,
            "ci95": self.ci95,
            "perturbations": self.perturbations.to_dict(),
        }


def confidence_half_width(p: float, n: int) -> float:
    """Normal-approximation 95% half-width for a proportion."""
    if n == 0:
        return 0.0
    return 1.96 * math.sqrt(p * (1.0 - p) / n)


class FeatureCache:
    """Per-clip features under fixed parameters.

    Every clip goes through the network on its own, so a clip's features
    depend only on its pixel values and never on which other clips share
    the episode.  Clips are keyed by their raw bytes.
    """

    def __init__(self, model: SoapNet):
        self.model = model
        self._store: dict[bytes, np.ndarray] = {}

    def __call__(self, clip: np.ndarray) -> np.ndarray:
        clip = np.ascontiguousarray(clip, dtype=np.float64)
        key = clip.tobytes()
        hit = self._store.get(key)
        if hit is None:
            hit = self.model.features(Tensor(clip[None])).data[0]
            self._store[key] = hit
        return hit


def evaluate(
    model: SoapNet,
    ds: Dataset,
    cfg: RunConfig,
    perturbations: Perturbations | None = None,
    episodes: int | None = None,
    k_shot: int | None = None,
    cache: FeatureCache | None = None,
) -> EvalReport:
    pert = perturbations if perturbations is not None else cfg.perturbations
    n_eps = episodes if episodes is not None else cfg.episodes_eval
    k = k_shot if k_shot is not None else cfg.k_shot
    need = (pert.any_shot_range[0] if pert.any_shot_range else k) + cfg.queries_per_class
    _check_dataset(ds, cfg.n_way, need, "evaluation")
    cache = cache if cache is not None else FeatureCache(model)
    correct = total = 0
    for ep in range(n_eps):
        episode = sample_episode(
            ds, cfg.n_way, k, cfg.queries_per_class, cfg.F,
            episode_rngs(cfg.seed, ep, EVAL_STREAM), perturbations=pert, train=False,
        )
        n, kk = episode.support.shape[:2]
        s_feats = np.stack([cache(c) for c in episode.support.reshape((n * kk,) + episode.support.shape[2:])])
        q_feats = np.stack([cache(c) for c in episode.queries])
        d = episode_distances(Tensor(q_feats), Tensor(s_feats.reshape((n, kk) + s_feats.shape[1:])), model.params)
        pred = np.argmin(d.data, axis=1)
        correct += int(np.sum(pred == episode.query_labels))
        total += len(pred)
    return EvalReport(episodes=n_eps, correct=correct, predictions=total, perturbations=pert)


def cmd_eval(
    cfg: RunConfig,
    checkpoint: str | Path | SoapNet,
    perturbations: Perturbations | None = None,
    episodes: int | None = None,
    out_path: str | Path | None = None,
) -> EvalReport:
    if isinstance(checkpoint, SoapNet):
        model = checkpoint
    else:
        model, cfg = load_checkpoint(checkpoint, cfg)
    ds = Dataset(cfg.dataset, cfg.eval_split)
    report = evaluate(model, ds, cfg, perturbations, episodes)
    if out_path is not None:
        with open(out_path, "a") as fh:
            fh.write(json.dumps(report.to_dict()) + "\n")
    return report


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def tiny_config() -> ModelConfig:
    return ModelConfig(
        soap=SoapConfig(F=4, C=2, H=8, W=8, c_r=4, tuple_set=(1, 2)),
        embed=EmbedConfig(D=16, pe_kind="learnable", stages=((4, 3),)),
        head=HeadConfig(d_k=8, d_v=8),
    )


def cmd_gradcheck(
    seed: int = 0,
    samples: int = 8,
    model_cfg: ModelConfig | None = None,
    n_way: int = 3,
    k_shot: int = 2,
    step: float = 1e-4,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Finite-difference check of every parameter through the full episode loss."""
    cfg = model_cfg if model_cfg is not None else tiny_config()
    model = SoapNet(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    # random nonzero parameters so zero-initialised biases and embeddings are exercised
    for p in model.params.values():
        p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape)
    shape = cfg.soap.clip_shape
    support = rng.uniform(0.0, 1.0, size=(n_way, k_shot) + shape)
    queries = rng.uniform(0.0, 1.0, size=(n_way,) + shape)
    labels = np.arange(n_way)

    def f() -> Tensor:
        return model.loss(support, queries, labels)

    return finite_diff_check(f, dict(model.params.items()), step=step, tolerance=tolerance,
                             samples=samples, rng=rng)


def format_gradcheck(report: GradCheckReport) -> str:
    lines = []
    for name, err in report.per_param().items():
        flag = "ok" if err <= report.tolerance else "FAIL"
        lines.append(f"  {flag:4s} {name:28s} max rel err {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    lines.append(f"{verdict}: max relative error {report.max_rel_error:.3e} "
                 f"(tolerance {report.tolerance:g}, {len(report.checks)} coordinates)")
    if not report.passed:
        lines.append("failing parameters: " + ", ".join(report.failing_params()))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def cmd_gen_data(spec_path: str | Path | None, out_dir: str | Path) -> Path:
    spec = SyntheticSpec.load(spec_path) if spec_path else default_spec()
    return generate_synthetic_dataset(spec, out_dir)
