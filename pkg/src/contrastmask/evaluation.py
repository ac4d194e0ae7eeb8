"""Mask metrics over ground-truth boxes, evaluation reports and ablation runs.

There is no detector: every ground-truth box yields one prediction, ranked
by its mask confidence, and AP is computed from those rankings per
category.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import data as D
from .config import ConfigError, TrainConfig
from .heads import ContrastMaskModel, crops_to_tensor, load_checkpoint

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
ABLATION_AXES = (
    "use_cl",
    "use_cam",
    "supervision",
    "query_sharing",
    "sigma",
    "tau_easy",
    "encoder_blocks",
    "oracle_novel_masks",
)
REPORT_NOTE = "mask AP computed over ground-truth boxes (no detector); binarisation threshold 0.5"


def sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def mask_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """IoU of ``sigmoid(pred) >= threshold`` against a binary mask; empty vs empty is 1."""
    pred, gt = np.asarray(pred), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    binary = sigmoid(pred) >= threshold
    union = np.logical_or(binary, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(binary, gt).sum() / union)


def average_precision(scores: np.ndarray, ious: np.ndarray, threshold: float) -> float:
    """101-point interpolated AP, one prediction per ground truth."""
    n = len(scores)
    if n == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = (np.asarray(ious)[order] >= threshold).astype(np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, n + 1)
    recall = ctp / n
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        ap += envelope[idx] if idx < n else 0.0
    return ap / 101.0


@dataclass
class CategoryMetrics:
    count: int
    miou: float
    ap: dict[float, float]

    @property
    def map(self) -> float:
        return float(np.mean([self.ap[t] for t in IOU_THRESHOLDS]))


@dataclass
class EvalReport:
    """All metrics on the percent scale."""

    categories: dict[str, CategoryMetrics]
    splits: dict[str, list[str]]  # "base"/"novel" -> category names
    config: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    note: str = REPORT_NOTE

    def block(self, split: str) -> dict[str, float]:
        cats = [self.categories[c] for c in self.splits[split] if c in self.categories]
        if not cats:
            return {"mIoU": 0.0, "mAP": 0.0, "AP50": 0.0, "AP75": 0.0, "count": 0}
        return {
            "mIoU": 100 * float(np.mean([c.miou for c in cats])),
            "mAP": 100 * float(np.mean([c.map for c in cats])),
            "AP50": 100 * float(np.mean([c.ap[0.5] for c in cats])),
            "AP75": 100 * float(np.mean([c.ap[0.75] for c in cats])),
            "count": int(sum(c.count for c in cats)),
        }

    def summary(self) -> dict[str, dict[str, float]]:
        return {split: self.block(split) for split in ("base", "novel")}

    def to_dict(self) -> dict[str, Any]:
        return {
            "note": self.note,
            "seed": self.seed,
            "config": self.config,
            "splits": self.splits,
            "summary": self.summary(),
            "per_category": {
                name: {
                    "count": m.count,
                    "mIoU": 100 * m.miou,
                    "mAP": 100 * m.map,
                    "AP50": 100 * m.ap[0.5],
                    "AP75": 100 * m.ap[0.75],
                }
                for name, m in self.categories.items()
            },
        }

    def to_text(self) -> str:
        lines = [f"# {self.note}", f"{'split':<8}{'category':<10}{'n':>5}{'mIoU':>8}{'mAP':>8}{'AP50':>8}{'AP75':>8}"]
        for split in ("base", "novel"):
            for name in self.splits[split]:
                m = self.categories.get(name)
                if m is None:
                    continue
                lines.append(
                    f"{split:<8}{name:<10}{m.count:>5}{100 * m.miou:>8.2f}{100 * m.map:>8.2f}"
                    f"{100 * m.ap[0.5]:>8.2f}{100 * m.ap[0.75]:>8.2f}"
                )
            b = self.block(split)
            lines.append(
                f"{split:<8}{'ALL':<10}{b['count']:>5}{b['mIoU']:>8.2f}{b['mAP']:>8.2f}{b['AP50']:>8.2f}{b['AP75']:>8.2f}"
            )
        return "\n".join(lines) + "\n"


def predict_rois(
    model: ContrastMaskModel, samples: list[D.RoiSample], batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mask logits, CAMs and predicted classes; CAMs use the argmax class."""
    model.eval()
    logits, cams, classes = [], [], []
    with torch.no_grad():
        for k in range(0, len(samples), batch_size):
            chunk = samples[k : k + batch_size]
            out = model(crops_to_tensor([s.crop for s in chunk]), target_class=None)
            logits.append(out["mask_logits"].numpy())
            cams.append(out["cam"].numpy())
            classes.append(out["class_logits"].argmax(dim=1).numpy())
    return np.concatenate(logits), np.concatenate(cams), np.concatenate(classes)


def mask_score(logits: np.ndarray) -> float:
    """Mean foreground probability inside the predicted mask."""
    p = sigmoid(logits)
    fg = p >= 0.5
    return float(p[fg].mean()) if fg.any() else 0.0


def val_samples(scenes: list[D.Scene], R: int) -> list[D.RoiSample]:
    return [D.extract_roi(s, k, jitter=0.0, R=R) for s in scenes for k in range(len(s.instances))]


def evaluate_model(model: ContrastMaskModel, scenes: list[D.Scene], cfg: TrainConfig) -> EvalReport:
    samples = val_samples(scenes, cfg.roi_resolution)
    if any(not s.has_mask for s in samples):
        raise ValueError("validation split is missing ground-truth masks")
    logits, _, _ = predict_rois(model, samples)
    per_cat: dict[int, list[tuple[float, float]]] = {}
    for s, lg in zip(samples, logits):
        per_cat.setdefault(s.category_id, []).append((mask_score(lg), mask_iou(lg, s.gt_mask)))
    cats = {}
    for cid in sorted(per_cat):
        scores, ious = (np.array(v) for v in zip(*per_cat[cid]))
        cats[cfg.categories[cid]] = CategoryMetrics(
            count=len(ious),
            miou=float(ious.mean()),
            ap={t: average_precision(scores, ious, t) for t in IOU_THRESHOLDS},
        )
    return EvalReport(
        categories=cats,
        splits={"base": list(cfg.base_categories), "novel": list(cfg.novel_categories)},
        config=cfg.to_dict(),
        seed=cfg.seed,
    )


def evaluate(checkpoint: str | Path, data: str | Path | D.Dataset | None = None) -> EvalReport:
    """Evaluate a checkpoint on a validation split (regenerated from the config if not given)."""
    model, meta = load_checkpoint(checkpoint)
    cfg = model.cfg
    if data is None:
        ds = D.build_dataset(cfg)
    elif isinstance(data, D.Dataset):
        ds = data
    else:
        ds = D.load_dataset(data)
    return evaluate_model(model, ds.val, cfg)


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp, tp = out / f"{stem}.json", out / f"{stem}.txt"
    jp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    tp.write_text(report.to_text())
    return jp, tp


# --------------------------------------------------------------------------
# ablations


@dataclass
class AblationRun:
    label: str
    overrides: dict[str, Any]
    seed: int
    summary: dict[str, dict[str, float]]
    seconds: float
    audit_trips: int


@dataclass
class AblationMatrix:
    axis: str
    runs: list[AblationRun]

    def labels(self) -> list[str]:
        seen: list[str] = []
        for r in self.runs:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def metric(self, label: str, split: str = "novel", key: str = "mIoU") -> list[float]:
        return [r.summary[split][key] for r in self.runs if r.label == label]

    def mean(self, label: str, split: str = "novel", key: str = "mIoU") -> float:
        return float(np.mean(self.metric(label, split, key)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "axis": self.axis,
            "note": REPORT_NOTE,
            "runs": [r.__dict__ for r in self.runs],
            "means": {
                lab: {k: self.mean(lab, "novel", k) for k in ("mIoU", "mAP", "AP50", "AP75")} for lab in self.labels()
            },
        }

    def to_text(self) -> str:
        head = f"{'config':<28}{'seeds':>6}{'novel mIoU':>12}{'+-':>7}{'mAP':>8}{'AP50':>8}{'AP75':>8}{'base mIoU':>11}"
        lines = [f"# ablation over {self.axis}; {REPORT_NOTE}", head]
        for lab in self.labels():
            miou = self.metric(lab)
            lines.append(
                f"{lab:<28}{len(miou):>6}{np.mean(miou):>12.2f}{np.std(miou):>7.2f}"
                f"{self.mean(lab, key='mAP'):>8.2f}{self.mean(lab, key='AP50'):>8.2f}"
                f"{self.mean(lab, key='AP75'):>8.2f}{self.mean(lab, 'base', 'mIoU'):>11.2f}"
            )
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jp, tp = out / "ablation.json", out / "ablation.txt"
        jp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        tp.write_text(self.to_text())
        return jp, tp

    @classmethod
    def load(cls, path: str | Path) -> "AblationMatrix":
        d = json.loads(Path(path).read_text())
        return cls(axis=d["axis"], runs=[AblationRun(**r) for r in d["runs"]])


def run_one(
    cfg: TrainConfig,
    dataset: D.Dataset,
    out_dir: str | Path | None = None,
    cache_dir: str | Path | None = None,
) -> tuple[dict[str, dict[str, float]], float, int]:
    """Train and evaluate one configuration; returns (summary, seconds, audit trips).

    With ``cache_dir`` set, results are keyed by the config digest and reused.
    """
    from .training import train

    cache_file = Path(cache_dir) / f"{cfg.digest()}.json" if cache_dir is not None else None
    if cache_file is not None and cache_file.exists():
        d = json.loads(cache_file.read_text())
        return d["summary"], d["seconds"], d["audit_trips"]
    t0 = time.perf_counter()
    result = train(cfg, dataset, out_dir=out_dir)
    report = evaluate_model(result.model, dataset.val, cfg)
    seconds = time.perf_counter() - t0
    if out_dir is not None:
        write_report(report, out_dir)
    summary = report.summary()
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps({"summary": summary, "seconds": seconds, "audit_trips": result.audit_trips}))
    return summary, seconds, result.audit_trips


def run_configs(
    base: TrainConfig,
    variants: dict[str, dict[str, Any]],
    seeds: Sequence[int],
    axis: str = "custom",
    dataset: D.Dataset | None = None,
    out_dir: str | Path | None = None,
    cache_dir: str | Path | None = None,
) -> AblationMatrix:
    """Train/evaluate each named override set for every seed on one shared dataset."""
    ds = dataset if dataset is not None else D.build_dataset(base)
    runs = []
    for label, overrides in variants.items():
        for seed in seeds:
            cfg = base.replace(**overrides, seed=int(seed))
            run_dir = Path(out_dir) / f"{label}_seed{seed}" if out_dir is not None else None
            summary, seconds, trips = run_one(cfg, ds, run_dir, cache_dir)
            log.info("%s seed=%s novel mIoU=%.2f (%.0fs)", label, seed, summary["novel"]["mIoU"], seconds)
            runs.append(AblationRun(label, dict(overrides), int(seed), summary, seconds, trips))
    matrix = AblationMatrix(axis=axis, runs=runs)
    if out_dir is not None:
        matrix.save(out_dir)
    return matrix


def run_ablation(
    base: TrainConfig,
    axis: str,
    values: Sequence[Any],
    seeds: Sequence[int],
    dataset: D.Dataset | None = None,
    out_dir: str | Path | None = None,
    cache_dir: str | Path | None = None,
) -> AblationMatrix:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    from .config import coerce_value

    variants = {f"{axis}={v}": {axis: coerce_value(axis, v)} for v in values}
    return run_configs(base, variants, seeds, axis=axis, dataset=dataset, out_dir=out_dir, cache_dir=cache_dir)
