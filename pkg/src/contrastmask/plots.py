"""Figures from report and ablation JSON files plus qualitative RoI grids."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import data as D  # noqa: E402
from .evaluation import AblationMatrix, predict_rois, sigmoid, val_samples  # noqa: E402
from .heads import load_checkpoint  # noqa: E402
from .partition import EmptyPartitionSide, partition_from_cam, render_partition  # noqa: E402


def plot_ablation(matrix: AblationMatrix, path: Path) -> Path:
    """Bar chart of novel/base mIoU per variant, sorted by novel mAP."""
    labels = sorted(matrix.labels(), key=lambda lb: matrix.mean(lb, key="mAP"))
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.2))
    for off, split in ((-0.2, "novel"), (0.2, "base")):
        means = [matrix.mean(lb, split) for lb in labels]
        errs = [np.std(matrix.metric(lb, split)) for lb in labels]
        ax.bar(x + off, means, 0.4, yerr=errs, label=split, capsize=3)
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set_ylabel("mIoU (%)")
    ax.set_title(f"ablation: {matrix.axis}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_report(report: dict, path: Path) -> Path:
    per_cat = report["per_category"]
    cats = sorted(per_cat)
    novel = set(report["splits"]["novel"])
    vals = [per_cat[c]["mIoU"] for c in cats]
    colors = ["tab:orange" if c in novel else "tab:blue" for c in cats]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(cats, vals, color=colors)
    ax.set_ylabel("mIoU (%)")
    ax.set_title("per-category mIoU (orange = novel)")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def pseudo_mask_image(cam: np.ndarray, delta: float) -> np.ndarray:
    try:
        return render_partition(partition_from_cam(cam, delta))
    except EmptyPartitionSide:
        return np.full(cam.shape, 128, dtype=np.uint8)


def plot_examples(checkpoint: Path, path_stem: Path, per_split: int = 6) -> list[Path]:
    """Grids of crop / CAM / pseudo-mask / prediction / ground truth, one per split."""
    model, _ = load_checkpoint(checkpoint)
    cfg = model.cfg
    ds = D.build_dataset(cfg)
    samples = val_samples(ds.val, cfg.roi_resolution)
    logits, cams, _ = predict_rois(model, samples)
    written = []
    for split, want in (("base", True), ("novel", False)):
        idx = [n for n, s in enumerate(samples) if s.is_base == want][:per_split]
        if not idx:
            continue
        fig, axes = plt.subplots(len(idx), 5, figsize=(7.5, 1.5 * len(idx)), squeeze=False)
        for row, n in enumerate(idx):
            panels = (
                samples[n].crop,
                cams[n],
                pseudo_mask_image(cams[n], cfg.delta),
                sigmoid(logits[n]) >= 0.5,
                samples[n].gt_mask,
            )
            for col, (img, title) in enumerate(zip(panels, ("crop", "CAM", "pseudo", "pred", "GT"))):
                ax = axes[row, col]
                ax.imshow(img, cmap=None if img.ndim == 3 else "viridis")
                ax.set_axis_off()
                if row == 0:
                    ax.set_title(title, fontsize=8)
        fig.tight_layout()
        out = path_stem.with_name(f"{path_stem.name}_{split}.png")
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)
    return written


def emit_plots(in_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Render every ablation.json, report.json and checkpoint.npz found under ``in_dir``."""
    src, out = Path(in_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def stem(p: Path) -> str:
        rel = p.parent.relative_to(src).as_posix()
        return "root" if rel == "." else rel.replace("/", "_")

    for p in sorted(src.rglob("ablation.json")):
        written.append(plot_ablation(AblationMatrix.load(p), out / f"ablation_{stem(p)}.png"))
    for p in sorted(src.rglob("report.json")):
        written.append(plot_report(json.loads(p.read_text()), out / f"report_{stem(p)}.png"))
    for p in sorted(src.rglob("checkpoint.npz")):
        written += plot_examples(p, out / f"examples_{stem(p)}")
    return written
