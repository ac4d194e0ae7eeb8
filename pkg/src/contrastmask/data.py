"""Procedural synthetic-shapes benchmark with a base/novel category split.

Every instance carries a ground-truth mask, but masks of novel training
instances are only reachable through :class:`RoiSample`, whose accessor
records reads made under :func:`training_guard`.
"""

from __future__ import annotations

import colorsys
import contextlib
import csv
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np
from matplotlib.path import Path as MplPath

from .config import ALL_CATEGORIES, ConfigError, TrainConfig

log = logging.getLogger(__name__)

MIN_INSTANCE_PIXELS = 16
TEXTURE_AMPLITUDE = 0.22
HUE_JITTER = 0.03
INDEX_FIELDS = (
    "scene_id",
    "instance",
    "r0",
    "c0",
    "r1",
    "c1",
    "category",
    "is_base",
    "mask_available",
    "mask_path",
    "center_row",
    "center_col",
    "scale",
    "rotation",
    "fill_texture_seed",
)


class DegenerateRoiError(ValueError):
    """The jittered box collapsed to zero area after clamping."""


class NovelMaskAccessError(RuntimeError):
    """A novel-category ground-truth mask was read on the training path."""


@dataclass(frozen=True)
class ShapeSpec:
    category: str
    center: tuple[float, float]
    scale: float
    rotation: float
    fill_texture_seed: int

    def __post_init__(self) -> None:
        if self.category not in ALL_CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass
class Instance:
    spec: ShapeSpec
    bbox: tuple[int, int, int, int]  # r0, c0, r1, c1 (end-exclusive)
    mask: np.ndarray  # bool, H_img x W_img
    is_base: bool
    category_id: int


@dataclass
class Scene:
    scene_id: int
    image: np.ndarray  # float32 H x W x 3 in [0, 1]
    instances: list[Instance]


@dataclass
class Dataset:
    config: TrainConfig
    train: list[Scene]
    val: list[Scene]

    def instance_refs(self, split: str) -> list[tuple[int, int]]:
        scenes = self.train if split == "train" else self.val
        return [(si, ii) for si, s in enumerate(scenes) for ii in range(len(s.instances))]


# --------------------------------------------------------------------------
# mask access audit

_audit = threading.local()


def _guard_state() -> tuple[bool, bool]:
    return getattr(_audit, "active", False), getattr(_audit, "strict", False)


@contextlib.contextmanager
def training_guard(strict: bool = False) -> Iterator[None]:
    """Mark novel gt_mask reads inside this block as audit violations."""
    prev = _guard_state()
    _audit.active, _audit.strict = True, strict
    try:
        yield
    finally:
        _audit.active, _audit.strict = prev


@contextlib.contextmanager
def audit_suspended() -> Iterator[None]:
    """Temporarily lift an enclosing training_guard (e.g. for validation)."""
    prev = _guard_state()
    _audit.active, _audit.strict = False, False
    try:
        yield
    finally:
        _audit.active, _audit.strict = prev


_trip_count = 0
_trip_lock = threading.Lock()


def audit_trip_count() -> int:
    return _trip_count


def reset_audit() -> None:
    global _trip_count
    with _trip_lock:
        _trip_count = 0


@dataclass
class RoiSample:
    crop: np.ndarray  # float32 R x R x 3
    category_id: int
    is_base: bool
    roi_resolution: int
    _gt_mask: np.ndarray | None = field(default=None, repr=False)
    audit_tripped: bool = False

    @property
    def has_mask(self) -> bool:
        return self._gt_mask is not None

    @property
    def gt_mask(self) -> np.ndarray | None:
        active, strict = _guard_state()
        if active and not self.is_base and self._gt_mask is not None:
            global _trip_count
            self.audit_tripped = True
            with _trip_lock:
                _trip_count += 1
            if strict:
                raise NovelMaskAccessError("novel gt_mask read inside training_guard")
        return self._gt_mask

    def oracle_mask(self) -> np.ndarray | None:
        """Explicit mask read for the upper-bound experiment; bypasses the audit."""
        return self._gt_mask

    def flipped(self) -> "RoiSample":
        mask = None if self._gt_mask is None else self._gt_mask[:, ::-1].copy()
        return RoiSample(
            crop=self.crop[:, ::-1].copy(),
            category_id=self.category_id,
            is_base=self.is_base,
            roi_resolution=self.roi_resolution,
            _gt_mask=mask,
        )


# --------------------------------------------------------------------------
# rasterisation


def _unit_polygon(category: str) -> np.ndarray | None:
    if category == "triangle":
        ang = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if category == "star":
        ang = np.pi / 2 + np.pi * np.arange(10) / 5
        rad = np.where(np.arange(10) % 2 == 0, 1.0, 0.45)
        return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    return None


def rasterize(spec: ShapeSpec, height: int, width: int) -> np.ndarray:
    """Boolean mask of ``spec`` sampled at pixel centres."""
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dy, dx = rows - spec.center[0], cols - spec.center[1]
    c, s = np.cos(spec.rotation), np.sin(spec.rotation)
    u = (c * dx + s * dy) / spec.scale
    v = (-s * dx + c * dy) / spec.scale
    cat = spec.category
    if cat == "disk":
        return u**2 + v**2 <= 1.0
    if cat == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 1.0
    if cat == "ring":
        r2 = u**2 + v**2
        return (r2 <= 1.0) & (r2 >= 0.55**2)
    if cat == "cross":
        au, av = np.abs(u), np.abs(v)
        return ((au <= 0.33) & (av <= 1.0)) | ((av <= 0.33) & (au <= 1.0))
    if cat == "crescent":
        return (u**2 + v**2 <= 1.0) & ((u - 0.5) ** 2 + v**2 > 0.8**2)
    if cat == "ellipse":
        return u**2 + (v / 0.55) ** 2 <= 1.0
    poly = _unit_polygon(cat)
    pts = np.stack([u.ravel(), -v.ravel()], axis=1)
    return MplPath(poly).contains_points(pts).reshape(height, width)


# --------------------------------------------------------------------------
# appearance

# Each category has a fixed texture family so the classifier (and therefore
# the CAM) has category evidence; per-instance hue and phase keep it noisy.
_TEXTURE = {
    "disk": ("stripes", 0.0, 0.9),
    "square": ("checker", 0.0, 0.8),
    "triangle": ("stripes", np.pi / 2, 0.7),
    "ring": ("dots", 0.0, 0.9),
    "cross": ("stripes", np.pi / 4, 0.9),
    "star": ("checker", np.pi / 4, 0.7),
    "crescent": ("waves", 0.0, 0.6),
    "ellipse": ("stripes", -np.pi / 4, 0.6),
}


# base and novel hues alternate around the colour wheel
_HUE_SLOT = {c: k for k, c in enumerate(("disk", "cross", "square", "star", "triangle", "crescent", "ring", "ellipse"))}


def _category_colour(category: str, rng: np.random.Generator) -> np.ndarray:
    """RGB around a per-category hue; saturation and value vary per instance."""
    hue = (_HUE_SLOT[category] / len(_HUE_SLOT) + rng.normal(0, HUE_JITTER)) % 1.0
    rgb = colorsys.hsv_to_rgb(hue, rng.uniform(0.45, 0.9), rng.uniform(0.45, 0.85))
    return np.asarray(rgb, dtype=np.float32)


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells, 3)).astype(np.float32)
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)


def _texture(category: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kind, angle, freq = _TEXTURE[category]
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float32)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * cols + np.sin(angle) * rows
    if kind == "stripes":
        pat = np.sin(freq * t + phase)
    elif kind == "checker":
        t2 = -np.sin(angle) * cols + np.cos(angle) * rows
        pat = np.sign(np.sin(freq * t + phase) * np.sin(freq * t2 + phase))
    elif kind == "dots":
        pat = np.sin(freq * cols + phase) * np.sin(freq * rows + phase)
        pat = np.where(pat > 0.3, 1.0, -1.0)
    else:  # waves
        pat = np.sin(freq * cols + 2.0 * np.sin(0.35 * rows) + phase)
    return pat.astype(np.float32)


def _render(
    instances: list[tuple[ShapeSpec, np.ndarray]], rng: np.random.Generator, size: int
) -> np.ndarray:
    img = 0.25 + 0.5 * _smooth_field(rng, size, size, 4)
    img += 0.08 * rng.standard_normal((size, size, 3)).astype(np.float32)
    for spec, mask in instances:
        trng = np.random.default_rng(spec.fill_texture_seed)
        base = _category_colour(spec.category, trng)
        pat = _texture(spec.category, trng, size, size)
        colour = base[None, None, :] + TEXTURE_AMPLITUDE * pat[..., None]
        colour += 0.06 * trng.standard_normal((size, size, 3)).astype(np.float32)
        img[mask] = colour[mask]
    img = np.clip(img, 0.0, 1.0)
    # quantise so in-memory scenes match what is written to disk
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


# --------------------------------------------------------------------------
# generation


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rr = np.flatnonzero(mask.any(axis=1))
    cc = np.flatnonzero(mask.any(axis=0))
    return int(rr[0]), int(cc[0]), int(rr[-1]) + 1, int(cc[-1]) + 1


def generate_scene(
    cfg: TrainConfig, rng: np.random.Generator, scene_id: int, categories: list[str]
) -> Scene:
    size = cfg.image_size
    n_target = int(rng.integers(1, cfg.max_instances + 1))
    specs: list[ShapeSpec] = []
    full: list[np.ndarray] = []
    attempts = 0
    while len(specs) < n_target and attempts < 200:
        attempts += 1
        category = categories[int(rng.integers(len(categories)))]
        scale = float(rng.uniform(0.11, 0.22) * size)
        lo, hi = scale, size - scale
        spec = ShapeSpec(
            category=category,
            center=(float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))),
            scale=scale,
            rotation=float(rng.uniform(0, 2 * np.pi)),
            fill_texture_seed=int(rng.integers(2**31)),
        )
        m = rasterize(spec, size, size)
        trial = full + [m]
        visible = _visible_masks(trial)
        if all(v.sum() >= MIN_INSTANCE_PIXELS for v in visible):
            specs.append(spec)
            full.append(m)
    visible = _visible_masks(full)
    image = _render(list(zip(specs, visible)), rng, size)
    instances = []
    for spec, vis in zip(specs, visible):
        cid = cfg.category_id(spec.category)
        instances.append(
            Instance(spec=spec, bbox=_bbox(vis), mask=vis, is_base=cfg.is_base_id(cid), category_id=cid)
        )
    return Scene(scene_id=scene_id, image=image, instances=instances)


def _visible_masks(masks: list[np.ndarray]) -> list[np.ndarray]:
    """Later instances occlude earlier ones."""
    out = []
    for i, m in enumerate(masks):
        vis = m.copy()
        for later in masks[i + 1 :]:
            vis &= ~later
        out.append(vis)
    return out


def generate_dataset(cfg: TrainConfig, seed: int) -> tuple[list[Scene], list[Scene]]:
    """Deterministic train/val scene lists for ``seed``.

    Each scene draws from its own child seed, so generation order does not
    matter. Validation scenes are resampled until both splits are present.
    """
    if set(cfg.base_categories) & set(cfg.novel_categories):
        raise ConfigError("base and novel categories overlap")
    root = np.random.SeedSequence([seed, 0xC0FFEE])
    train_ss, val_ss = root.spawn(2)
    cats = list(cfg.categories)
    train = [
        generate_scene(cfg, np.random.default_rng(ss), i, cats)
        for i, ss in enumerate(train_ss.spawn(cfg.n_train_scenes))
    ]
    val = [
        generate_scene(cfg, np.random.default_rng(ss), i, cats)
        for i, ss in enumerate(val_ss.spawn(cfg.n_val_scenes))
    ]
    flags = {inst.is_base for s in val for inst in s.instances}
    extra = cfg.n_val_scenes
    while flags != {True, False}:
        ss = np.random.SeedSequence([seed, 0xC0FFEE, 1, extra])
        scene = generate_scene(cfg, np.random.default_rng(ss), len(val), cats)
        val.append(scene)
        flags |= {inst.is_base for inst in scene.instances}
        extra += 1
    return train, val


def build_dataset(cfg: TrainConfig) -> Dataset:
    train, val = generate_dataset(cfg, cfg.data_seed)
    return Dataset(config=cfg, train=train, val=val)


# --------------------------------------------------------------------------
# RoI extraction


def jitter_box(
    bbox: tuple[int, int, int, int], jitter: float, size: tuple[int, int], rng: np.random.Generator | None
) -> tuple[int, int, int, int]:
    if not 0.0 <= jitter <= 0.2:
        raise ValueError(f"jitter must lie in [0, 0.2], got {jitter}")
    r0, c0, r1, c1 = (float(v) for v in bbox)
    if jitter > 0:
        if rng is None:
            raise ValueError("jitter > 0 needs an rng")
        h, w = r1 - r0, c1 - c0
        d = rng.uniform(-jitter, jitter, size=4)
        r0, r1 = r0 + d[0] * h, r1 + d[1] * h
        c0, c1 = c0 + d[2] * w, c1 + d[3] * w
    H, W = size
    r0i, c0i = max(0, int(np.floor(r0))), max(0, int(np.floor(c0)))
    r1i, c1i = min(H, int(np.ceil(r1))), min(W, int(np.ceil(c1)))
    if r1i <= r0i or c1i <= c0i:
        raise DegenerateRoiError(f"box {bbox} collapsed to ({r0i},{c0i},{r1i},{c1i})")
    return r0i, c0i, r1i, c1i


def extract_roi(
    scene: Scene,
    index: int,
    jitter: float = 0.0,
    R: int = 28,
    rng: np.random.Generator | None = None,
    with_mask: bool = True,
) -> RoiSample:
    if not 0 <= index < len(scene.instances):
        raise IndexError(f"instance index {index} out of range")
    inst = scene.instances[index]
    H, W = scene.image.shape[:2]
    r0, c0, r1, c1 = jitter_box(inst.bbox, jitter, (H, W), rng)
    crop = cv2.resize(scene.image[r0:r1, c0:c1], (R, R), interpolation=cv2.INTER_LINEAR)
    mask = None
    if with_mask:
        m = inst.mask[r0:r1, c0:c1].astype(np.uint8)
        mask = cv2.resize(m, (R, R), interpolation=cv2.INTER_NEAREST).astype(bool)
    return RoiSample(
        crop=np.clip(crop, 0.0, 1.0).astype(np.float32),
        category_id=inst.category_id,
        is_base=inst.is_base,
        roi_resolution=R,
        _gt_mask=mask,
    )


# --------------------------------------------------------------------------
# on-disk format


def _write_png(path: Path, arr: np.ndarray) -> None:
    if arr.ndim == 3:
        arr = arr[..., ::-1]  # RGB -> BGR for cv2
    if not cv2.imwrite(str(path), np.ascontiguousarray(arr)):
        raise OSError(f"failed to write {path}")


def _read_png(path: Path, color: bool) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_COLOR if color else cv2.IMREAD_GRAYSCALE)
    if arr is None:
        raise OSError(f"failed to read {path}")
    return arr[..., ::-1] if color else arr


def save_dataset(ds: Dataset, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset.json").write_text(json.dumps({"config": ds.config.to_dict()}, indent=2, sort_keys=True))
    for split, scenes in (("train", ds.train), ("val", ds.val)):
        d = out / split
        (d / "masks").mkdir(parents=True, exist_ok=True)
        with open(d / "index.tsv", "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(INDEX_FIELDS)
            for scene in scenes:
                name = f"scene_{scene.scene_id:05d}.png"
                _write_png(d / name, np.round(scene.image * 255).astype(np.uint8))
                for k, inst in enumerate(scene.instances):
                    mpath = f"masks/scene_{scene.scene_id:05d}_{k}.png"
                    _write_png(d / mpath, inst.mask.astype(np.uint8) * 255)
                    available = inst.is_base or split == "val"
                    s = inst.spec
                    writer.writerow(
                        [
                            scene.scene_id,
                            k,
                            *inst.bbox,
                            s.category,
                            int(inst.is_base),
                            int(available),
                            mpath,
                            repr(s.center[0]),
                            repr(s.center[1]),
                            repr(s.scale),
                            repr(s.rotation),
                            s.fill_texture_seed,
                        ]
                    )
    return out


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta = json.loads((path / "dataset.json").read_text())
    cfg = TrainConfig.from_dict(meta["config"])
    splits: dict[str, list[Scene]] = {}
    for split in ("train", "val"):
        d = path / split
        scenes: dict[int, Scene] = {}
        with open(d / "index.tsv", newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                sid = int(row["scene_id"])
                if sid not in scenes:
                    img = _read_png(d / f"scene_{sid:05d}.png", color=True)
                    scenes[sid] = Scene(sid, (img.astype(np.float32) / 255.0), [])
                spec = ShapeSpec(
                    category=row["category"],
                    center=(float(row["center_row"]), float(row["center_col"])),
                    scale=float(row["scale"]),
                    rotation=float(row["rotation"]),
                    fill_texture_seed=int(row["fill_texture_seed"]),
                )
                mask = _read_png(d / row["mask_path"], color=False) > 127
                cid = cfg.category_id(spec.category)
                scenes[sid].instances.append(
                    Instance(
                        spec=spec,
                        bbox=(int(row["r0"]), int(row["c0"]), int(row["r1"]), int(row["c1"])),
                        mask=mask,
                        is_base=bool(int(row["is_base"])),
                        category_id=cid,
                    )
                )
        splits[split] = [scenes[k] for k in sorted(scenes)]
    return Dataset(config=cfg, train=splits["train"], val=splits["val"])
