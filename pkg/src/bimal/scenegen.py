"""Procedural street-scene generator with a controllable domain gap.

Scenes are banded: sky on top, then building, sidewalk, road, with smooth
per-column jitter on the band boundaries. Cars are rectangles inside the
road band, pedestrians inside the sidewalk band, so every column's class
sequence follows the same top-to-bottom grammar. The two domains share
that structure exactly; they differ only in appearance (palette,
brightness, noise, horizon height).

Images are stored float32 in [0, 1] (and generated with float32-exact
values so save/load round-trips bitwise), labels as uint8.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import LabelMap
from .numerics import Tensor
from . import tenio

__all__ = [
    "CLASS_NAMES",
    "NUM_CLASSES",
    "SceneConfig",
    "DomainParams",
    "SceneSample",
    "SceneDataset",
    "source_domain",
    "target_domain",
    "generate_scene",
    "generate_dataset",
    "load_dataset",
    "validate_labels",
    "labels_to_flow_input",
]

CLASS_NAMES = ("sky", "building", "sidewalk", "road", "car", "pedestrian")
NUM_CLASSES = 6
SKY, BUILDING, SIDEWALK, ROAD, CAR, PEDESTRIAN = range(6)

# vertical zone of each class; a column is grammatical iff its zone
# sequence is non-decreasing top to bottom (cars live in the road zone,
# pedestrians in the sidewalk zone)
_ZONE = np.array([0, 1, 2, 3, 3, 2])


@dataclass
class SceneConfig:
    """Layout knobs shared by both domains."""

    height: int = 32
    width: int = 32
    num_classes: int = 6
    horizon_frac: float = 0.28
    building_frac: float = 0.22
    sidewalk_frac: float = 0.15
    band_jitter: int = 2
    max_cars: int = 3
    max_pedestrians: int = 2

    def __post_init__(self) -> None:
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"class count is fixed at {NUM_CLASSES}")
        if self.height < 16 or self.width < 16:
            raise ValueError("scenes must be at least 16x16")
        if not 0.05 <= self.horizon_frac <= 0.6:
            raise ValueError("horizon_frac outside [0.05, 0.6]")
        if self.band_jitter < 0:
            raise ValueError("band_jitter must be >= 0")


@dataclass
class DomainParams:
    """Appearance-only domain description."""

    name: str
    class_colors: np.ndarray  # (6, 3) in [0, 1]
    noise_std: float = 0.02
    brightness: float = 0.0
    horizon_shift: float = 0.0

    def __post_init__(self) -> None:
        colors = np.asarray(self.class_colors, dtype=np.float64)
        if colors.shape != (NUM_CLASSES, 3):
            raise ValueError(f"class_colors must be ({NUM_CLASSES}, 3)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        self.class_colors = colors


def source_domain(**overrides) -> DomainParams:
    """Bright, clean daytime palette."""
    params = dict(
        name="source",
        class_colors=np.array(
            [
                [0.55, 0.75, 0.95],  # sky
                [0.55, 0.52, 0.50],  # building
                [0.78, 0.78, 0.72],  # sidewalk
                [0.33, 0.33, 0.36],  # road
                [0.85, 0.25, 0.20],  # car
                [0.95, 0.75, 0.30],  # pedestrian
            ]
        ),
        noise_std=0.02,
        brightness=0.0,
        horizon_shift=0.0,
    )
    params.update(overrides)
    return DomainParams(**params)


def target_domain(**overrides) -> DomainParams:
    """Darker, noisier dusk palette with a slightly raised horizon.

    The overcast gray sky sits close to the source road tone, so a model
    fit only on the source palette tends to mislabel the upper band.
    """
    params = dict(
        name="target",
        class_colors=np.array(
            [
                [0.44, 0.44, 0.47],  # sky
                [0.38, 0.34, 0.33],  # building
                [0.52, 0.50, 0.46],  # sidewalk
                [0.18, 0.18, 0.22],  # road
                [0.55, 0.18, 0.16],  # car
                [0.62, 0.48, 0.22],  # pedestrian
            ]
        ),
        noise_std=0.06,
        brightness=-0.04,
        horizon_shift=0.03,
    )
    params.update(overrides)
    return DomainParams(**params)


@dataclass
class SceneSample:
    image: Tensor  # (H, W, 3) in [0, 1]
    labels: LabelMap
    domain: str
    seed: int


@dataclass
class SceneDataset:
    """In-memory dataset: float64 images, int64 labels, source manifest."""

    images: np.ndarray  # (N, H, W, 3)
    labels: np.ndarray  # (N, H, W)
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES

    def label_map(self, i: int) -> LabelMap:
        return LabelMap(self.labels[i], NUM_CLASSES)

    def subset(self, start: int, stop: int) -> "SceneDataset":
        return SceneDataset(self.images[start:stop], self.labels[start:stop], self.manifest)


def _band_walk(rng: np.random.Generator, width: int, amp: int) -> np.ndarray:
    # smooth per-column offset: clipped random walk, stays within ±amp
    steps = rng.integers(-1, 2, size=width)
    walk = np.cumsum(steps)
    return np.clip(walk - walk[0], -amp, amp) if amp > 0 else np.zeros(width, dtype=np.int64)


def generate_scene(cfg: SceneConfig, dom: DomainParams, seed: int) -> SceneSample:
    """One deterministic scene; all randomness flows from one seeded generator."""
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width

    base1 = (cfg.horizon_frac + dom.horizon_shift) * h
    base2 = base1 + cfg.building_frac * h
    base3 = base2 + cfg.sidewalk_frac * h
    j1 = _band_walk(rng, w, cfg.band_jitter)
    j2 = _band_walk(rng, w, cfg.band_jitter)
    j3 = _band_walk(rng, w, cfg.band_jitter)
    r1 = np.clip(np.round(base1 + j1).astype(np.int64), 1, h - 8)
    r2 = np.clip(np.round(base2 + j2).astype(np.int64), r1 + 1, h - 5)
    r3 = np.clip(np.round(base3 + j3).astype(np.int64), r2 + 1, h - 2)

    rows = np.arange(h)[:, None]
    labels = np.full((h, w), ROAD, dtype=np.int64)
    labels[rows < r3] = SIDEWALK
    labels[rows < r2] = BUILDING
    labels[rows < r1] = SKY

    n_cars = int(rng.integers(0, cfg.max_cars + 1))
    for _ in range(n_cars):
        cw = int(rng.integers(3, 7))
        ch = int(rng.integers(2, 5))
        if cw > w:
            continue
        c0 = int(rng.integers(0, w - cw + 1))
        top_min = int(r3[c0 : c0 + cw].max())
        if top_min + ch > h:
            continue
        top = int(rng.integers(top_min, h - ch + 1))
        labels[top : top + ch, c0 : c0 + cw] = CAR

    n_peds = int(rng.integers(0, cfg.max_pedestrians + 1))
    for _ in range(n_peds):
        pw = int(rng.integers(1, 3))
        ph = int(rng.integers(2, 4))
        if pw > w:
            continue
        c0 = int(rng.integers(0, w - pw + 1))
        top_min = int(r2[c0 : c0 + pw].max())
        bot_max = int(r3[c0 : c0 + pw].min())
        if top_min + ph > bot_max:
            continue
        top = int(rng.integers(top_min, bot_max - ph + 1))
        labels[top : top + ph, c0 : c0 + pw] = PEDESTRIAN

    base = dom.class_colors[labels] + dom.brightness
    noise = rng.normal(0.0, dom.noise_std, size=(h, w, 3)) if dom.noise_std > 0 else 0.0
    img = np.clip(base + noise, 0.0, 1.0)
    img = img.astype(np.float32).astype(np.float64)  # storage-exact values

    return SceneSample(
        image=Tensor(img),
        labels=LabelMap(labels, NUM_CLASSES),
        domain=dom.name,
        seed=seed,
    )


def validate_labels(labels: np.ndarray) -> bool:
    """Structural grammar check, vectorized over columns.

    A map is valid iff every column starts in the sky zone, ends in the
    road zone, and its zone sequence never decreases downward. This implies
    the pairwise invariants: sky strictly above road, cars only on road
    rows, pedestrians only on sidewalk rows.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"labels must be (H, W), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        return False
    z = _ZONE[labels]
    return bool(
        (z[0] == 0).all() and (z[-1] == 3).all() and (np.diff(z, axis=0) >= 0).all()
    )


def labels_to_flow_input(
    labels: LabelMap,
    eps: float = 0.05,
    noise_amp: float = 0.01,
    seed: int = 0,
) -> Tensor:
    """Turn hard labels into a dequantized soft map for density fitting.

    One-hot, label-smoothed (1-eps on the true class, eps/(C-1) elsewhere),
    plus uniform noise of amplitude ``noise_amp``, then renormalized per
    pixel. eps = 0 and noise_amp = 0 reproduce the exact one-hot map.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must be in [0, 1), got {eps}")
    if noise_amp < 0:
        raise ValueError(f"noise_amp must be >= 0, got {noise_amp}")
    c = labels.num_classes
    oh = labels.one_hot()
    y = oh * (1.0 - eps) + (1.0 - oh) * (eps / (c - 1))
    if noise_amp > 0:
        y = y + np.random.default_rng(seed).uniform(-noise_amp, noise_amp, size=y.shape)
    y = y / y.sum(axis=2, keepdims=True)
    return Tensor(y)


def _content_hash(images_path: Path, labels_path: Path) -> str:
    h = hashlib.sha256()
    h.update(images_path.read_bytes())
    h.update(labels_path.read_bytes())
    return h.hexdigest()


def generate_dataset(
    cfg: SceneConfig, dom: DomainParams, n: int, seed: int, out_dir
) -> Path:
    """Write ``n`` scenes (per-sample seed = seed XOR index) plus a manifest."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = np.empty((n, cfg.height, cfg.width, 3), dtype=np.float32)
    labels = np.empty((n, cfg.height, cfg.width), dtype=np.uint8)
    for i in range(n):
        s = generate_scene(cfg, dom, seed ^ i)
        images[i] = s.image.data.astype(np.float32)
        labels[i] = s.labels.labels.astype(np.uint8)
    tenio.write_tensor(out_dir / "images.ten", images)
    tenio.write_tensor(out_dir / "labels.ten", labels)
    dom_dict = asdict(dom)
    dom_dict["class_colors"] = dom.class_colors.tolist()
    manifest = {
        "kind": "scene_dataset",
        "domain": dom.name,
        "seed": seed,
        "n": n,
        "scene_config": asdict(cfg),
        "domain_params": dom_dict,
        "content_hash": _content_hash(out_dir / "images.ten", out_dir / "labels.ten"),
    }
    tenio.write_manifest(out_dir / "manifest.json", manifest)
    return out_dir


def load_dataset(data_dir) -> SceneDataset:
    """Read a dataset directory back, verifying the content hash."""
    data_dir = Path(data_dir)
    manifest = tenio.read_manifest(data_dir / "manifest.json")
    if manifest.get("kind") != "scene_dataset":
        raise tenio.DataIntegrityError(f"{data_dir}: not a scene dataset")
    got = _content_hash(data_dir / "images.ten", data_dir / "labels.ten")
    if got != manifest.get("content_hash"):
        raise tenio.DataIntegrityError(f"{data_dir}: content hash mismatch")
    images = tenio.read_tensor(data_dir / "images.ten").astype(np.float64)
    labels = tenio.read_tensor(data_dir / "labels.ten").astype(np.int64)
    if images.ndim != 4 or labels.ndim != 3 or images.shape[:3] != labels.shape:
        raise tenio.DataIntegrityError(f"{data_dir}: images/labels shapes disagree")
    return SceneDataset(images=images, labels=labels, manifest=manifest)
