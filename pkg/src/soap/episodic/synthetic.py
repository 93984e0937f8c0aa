"""Deterministic moving-square video generator.

Direction classes render the same solid square moving at a constant
sub-pixel speed, so two direction classes with the same colour differ only
in the sign/axis of motion.  ``static-textured`` classes hold a checkered
square still.  The background is a fixed lit scene plus a per-clip static
noise field, so every frame of a static clip is identical.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .clipio import write_clip, write_manifest

KINDS = ("translate-left", "translate-right", "translate-up", "translate-down", "static-textured")

# (axis, sign): axis 1 = rows (vertical), axis 2 = columns (horizontal)
_MOTION = {
    "translate-left": (2, -1),
    "translate-right": (2, 1),
    "translate-up": (1, -1),
    "translate-down": (1, 1),
}


@dataclass(frozen=True)
class ClassDef:
    name: str
    kind: str
    speed: float = 0.25
    size: int = 8
    noise: float = 0.1
    color: tuple[float, ...] = (0.9, 0.9, 0.9)
    texture: int = 2
    split: str = "train"
    lane: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown class kind {self.kind!r}; expected one of {KINDS}")
        if self.speed < 0 or self.size < 1 or self.noise < 0:
            raise ValueError(f"class {self.name!r}: speed/noise must be >= 0 and size >= 1")
        if any(not 0.0 <= c <= 1.0 for c in self.color):
            raise ValueError(f"class {self.name!r}: colour values must lie in [0, 1]")
        if self.lane is not None and not 0.0 <= self.lane <= 1.0:
            raise ValueError(f"class {self.name!r}: lane must lie in [0, 1]")
        object.__setattr__(self, "color", tuple(float(c) for c in self.color))


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple[ClassDef, ...]
    clip_length: int = 48
    C: int = 3
    H: int = 32
    W: int = 32
    clips_per_class: int = 40
    seed: int = 0
    scene: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.scene <= 1.0:
            raise ValueError("scene amplitude must lie in [0, 1]")
        if not self.classes:
            raise ValueError("spec needs at least one class")
        if min(self.clip_length, self.C, self.H, self.W, self.clips_per_class) < 1:
            raise ValueError("clip_length, dims and clips_per_class must be positive")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        for c in self.classes:
            if len(c.color) != self.C:
                raise ValueError(f"class {c.name!r}: colour has {len(c.color)} channels, need {self.C}")
            if c.size > min(self.H, self.W):
                raise ValueError(f"class {c.name!r}: object larger than the frame")
            if c.kind in _MOTION:
                axis, _ = _MOTION[c.kind]
                extent = self.H if axis == 1 else self.W
                if extent - c.size - c.speed * (self.clip_length - 1) < 0:
                    raise ValueError(
                        f"class {c.name!r}: object leaves the frame "
                        f"(size {c.size} + travel {c.speed * (self.clip_length - 1):.2f} > {extent})"
                    )

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        dims = d.get("dims", {})
        return cls(
            classes=tuple(ClassDef(**c) for c in d["classes"]),
            clip_length=d.get("clip_length", 48),
            C=dims.get("C", 3),
            H=dims.get("H", 32),
            W=dims.get("W", 32),
            clips_per_class=d.get("clips_per_class", 40),
            seed=d.get("seed", 0),
            scene=d.get("scene", 0.0),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "scene": self.scene,
            "clip_length": self.clip_length,
            "clips_per_class": self.clips_per_class,
            "dims": {"C": self.C, "H": self.H, "W": self.W},
            "classes": [asdict(c) for c in self.classes],
        }


def default_spec(seed: int = 0) -> SyntheticSpec:
    """Ten classes: the five kinds, each with a training and a test pool.

    Both pools of a kind share one look, so evaluation asks the model to
    recognise motion on clips it never trained on.  Every clip plays in
    front of the same lit scene and the object keeps to the middle lane,
    which means frame statistics move with the object while direction is
    still only visible across time.
    """
    look = dict(size=12, speed=0.35, noise=0.05, color=(0.1, 0.1, 0.1), lane=0.5)
    classes = tuple(
        ClassDef(name=f"{kind}-{split}", kind=kind, split=split, **look)
        for split in ("train", "test")
        for kind in KINDS
    )
    return SyntheticSpec(classes=classes, seed=seed, scene=1.0)


def static_spec(seed: int = 0) -> SyntheticSpec:
    """Static-textured classes only (five per split), told apart by colour and checker period."""
    looks = [
        ((0.9, 0.3, 0.3), 1),
        ((0.3, 0.9, 0.3), 2),
        ((0.3, 0.3, 0.9), 4),
        ((0.9, 0.9, 0.3), 1),
        ((0.3, 0.9, 0.9), 2),
    ]
    classes = tuple(
        ClassDef(
            name=f"static-{i}-{split}",
            kind="static-textured",
            speed=0.0,
            color=color,
            texture=period,
            split=split,
        )
        for split in ("train", "test")
        for i, (color, period) in enumerate(looks)
    )
    return SyntheticSpec(classes=classes, seed=seed)


def _coverage_1d(start: float, size: int, n: int) -> np.ndarray:
    """Fraction of each unit pixel [j, j+1) covered by [start, start+size)."""
    j = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(j + 1.0, start + size) - np.maximum(j, start), 0.0, 1.0)


def scene_background(spec: SyntheticSpec) -> np.ndarray:
    """Fixed lighting shared by every clip: channel 0 brightens left to right,
    channel 1 top to bottom, any further channel is flat."""
    C, H, W = spec.C, spec.H, spec.W
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ramps = [xx / max(W - 1, 1), yy / max(H - 1, 1)]
    out = np.full((C, H, W), 0.5)
    for c in range(min(C, 2)):
        out[c] = ramps[c]
    return spec.scene * out


def render_clip(spec: SyntheticSpec, cls: ClassDef, rng: np.random.Generator) -> np.ndarray:
    L, C, H, W = spec.clip_length, spec.C, spec.H, spec.W
    background = scene_background(spec) + cls.noise * rng.uniform(0.0, 1.0, size=(C, H, W))
    color = np.asarray(cls.color).reshape(C, 1, 1)
    frames = np.empty((L, C, H, W))

    if cls.kind == "static-textured":
        top = int(rng.integers(0, H - cls.size + 1))
        left = int(rng.integers(0, W - cls.size + 1))
        mask = np.zeros((H, W))
        mask[top : top + cls.size, left : left + cls.size] = 1.0
        yy, xx = np.mgrid[0:H, 0:W]
        checker = (((yy - top) // cls.texture + (xx - left) // cls.texture) % 2).astype(float)
        tex = 0.5 + 0.5 * checker
        frame = background * (1.0 - mask) + color * (mask * tex)
        frames[:] = frame
        return np.clip(frames, 0.0, 1.0)

    axis, sign = _MOTION[cls.kind]
    along, across = (W, H) if axis == 2 else (H, W)
    travel = cls.speed * (L - 1)
    slack = along - cls.size - travel
    u = rng.uniform(0.0, slack)
    start = u if sign > 0 else along - cls.size - u
    cross = rng.uniform(0.0, across - cls.size)
    if cls.lane is not None:
        cross = cls.lane * (across - cls.size)
    cross_cov = _coverage_1d(cross, cls.size, across)
    for t in range(L):
        pos = start + sign * cls.speed * t
        along_cov = _coverage_1d(pos, cls.size, along)
        if axis == 2:
            cov = np.outer(cross_cov, along_cov)
        else:
            cov = np.outer(along_cov, cross_cov)
        frames[t] = background * (1.0 - cov) + color * cov
    return np.clip(frames, 0.0, 1.0)


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write every clip plus ``manifest.json`` and ``spec.json`` under ``out_dir``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for ci, cls in enumerate(spec.classes):
        class_dir = root / cls.name
        class_dir.mkdir(exist_ok=True)
        rels = []
        for j in range(spec.clips_per_class):
            rng = np.random.default_rng([spec.seed, ci, j])
            clip = render_clip(spec, cls, rng)
            rel = f"{cls.name}/clip_{j:04d}.soapclip"
            write_clip(root / rel, clip)
            rels.append(rel)
        entries.append({"name": cls.name, "clips": rels, "split": cls.split, "kind": cls.kind})
    (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    write_manifest(root, entries, {"C": spec.C, "H": spec.H, "W": spec.W})
    return root
