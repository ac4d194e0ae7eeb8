"""Total objective, lambda warmup and the optimisation loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import data as D
from .config import TrainConfig
from .heads import ContrastMaskModel, crops_to_tensor, load_checkpoint, save_checkpoint
from .losses import query_sharing_loss
from .partition import EmptyPartitionSide, extract_boundary, partition_from_cam, partition_from_mask
from .sampling import compute_shared_queries, flatten_projected, mine_keys_base, mine_keys_novel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; a dump of the offending batch is written."""


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss_total: float
    loss_box: float
    loss_mask: float
    loss_con: float
    lam: float
    n_base: int
    n_novel: int
    n_skipped: int

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return json.dumps(d)


def lambda_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear from ``lambda_start`` to ``lambda_end`` over the warmup, then flat."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_fraction * total_steps
    if warm <= 0 or step >= warm:
        return cfg.lambda_end
    return cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * (step / warm)


LR_DECAY_POINTS = (2 / 3, 8 / 9)


def learning_rate_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Base rate, divided by 10 at each decay point when ``lr_schedule == "step"``."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    drops = sum(step >= int(f * total_steps) for f in LR_DECAY_POINTS)
    return cfg.learning_rate * 0.1**drops


def admitted_for_cl(is_base: bool, supervision: str) -> bool:
    return supervision == "all" or (supervision == "base") == is_base


def contrastive_inputs(
    z: torch.Tensor,
    cams: torch.Tensor,
    samples: list[D.RoiSample],
    cfg: TrainConfig,
    rng: np.random.Generator,
):
    """Partitions and key sets for the admitted proposals of one batch.

    Returns ``(pairs, keysets, n_skipped)`` where ``pairs`` holds the
    ``(Z, Partition)`` inputs to the query computation.
    """
    pairs, keysets, skipped = [], [], 0
    for n, s in enumerate(samples):
        if not admitted_for_cl(s.is_base, cfg.supervision):
            continue
        Z = flatten_projected(z[n])
        try:
            if s.is_base or cfg.oracle_novel_masks:
                M = s.gt_mask if s.is_base else s.oracle_mask()
                P = partition_from_mask(M)
                ks = mine_keys_base(Z, P, extract_boundary(M), cfg.sigma, rng)
            else:
                P = partition_from_cam(cams[n].numpy(), cfg.delta)
                ks = mine_keys_novel(Z, P, cfg.sigma, rng)
        except EmptyPartitionSide:
            skipped += 1
            continue
        pairs.append((Z, P))
        keysets.append(ks)
    return pairs, keysets, skipped


def contrastive_loss(out: dict, samples: list[D.RoiSample], cfg: TrainConfig, rng: np.random.Generator):
    """Returns (L_con tensor, n_skipped)."""
    pairs, keysets, skipped = contrastive_inputs(out["z"], out["cam"], samples, cfg, rng)
    if not pairs:
        return out["z"].new_zeros(()), skipped
    detach = cfg.query_gradient == "stop"
    if cfg.query_sharing:
        queries = compute_shared_queries(pairs, detach=detach)
    else:
        queries = [compute_shared_queries([p], detach=detach) for p in pairs]
    return query_sharing_loss(queries, keysets, cfg.tau_easy, cfg.tau_hard).total, skipped


def total_loss(
    out: dict,
    samples: list[D.RoiSample],
    cfg: TrainConfig,
    lam: float,
    rng: np.random.Generator,
    step: int = 0,
    epoch: int = 0,
) -> tuple[torch.Tensor, StepRecord]:
    """L = L_box + L_mask + lambda * L_con for one batch."""
    if not samples:
        raise ValueError("batch must contain at least one proposal")
    labels = torch.tensor([s.category_id for s in samples], dtype=torch.long)
    loss_box = F.cross_entropy(out["class_logits"], labels)

    base_idx = [n for n, s in enumerate(samples) if s.is_base]
    if base_idx:
        gt = torch.from_numpy(np.stack([samples[n].gt_mask for n in base_idx]).astype(np.float32))
        loss_mask = F.binary_cross_entropy_with_logits(out["mask_logits"][base_idx], gt)
    else:
        loss_mask = loss_box.new_zeros(())

    skipped = 0
    if cfg.use_cl:
        loss_con, skipped = contrastive_loss(out, samples, cfg, rng)
        L = loss_box + loss_mask + lam * loss_con
    else:
        loss_con = loss_box.new_zeros(())
        L = loss_box + loss_mask

    rec = StepRecord(
        step=step,
        epoch=epoch,
        loss_total=float(L.detach()),
        loss_box=float(loss_box.detach()),
        loss_mask=float(loss_mask.detach()),
        loss_con=float(loss_con.detach()),
        lam=float(lam),
        n_base=len(base_idx),
        n_novel=len(samples) - len(base_idx),
        n_skipped=skipped,
    )
    return L, rec


# --------------------------------------------------------------------------
# loop


def steps_per_epoch(n_instances: int, batch_size: int) -> int:
    return math.ceil(n_instances / batch_size)


def total_steps(cfg: TrainConfig, n_instances: int) -> int:
    n = cfg.epochs * steps_per_epoch(n_instances, cfg.batch_size)
    return min(n, cfg.max_steps) if cfg.max_steps > 0 else n


def make_batch(
    ds: D.Dataset, refs: list[tuple[int, int]], cfg: TrainConfig, rng: np.random.Generator
) -> list[D.RoiSample]:
    samples = []
    for si, ii in refs:
        try:
            s = D.extract_roi(ds.train[si], ii, jitter=cfg.roi_jitter, R=cfg.roi_resolution, rng=rng)
        except D.DegenerateRoiError:
            continue
        if cfg.hflip and rng.random() < 0.5:
            s = s.flipped()
        samples.append(s)
    return samples


def _make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


def _optimizer_arrays(opt: torch.optim.Optimizer) -> tuple[dict, dict[str, np.ndarray]]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for name, val in st.items():
            arrays[f"optim/{idx}/{name}"] = torch.as_tensor(val).detach().cpu().numpy()
    return {"param_groups": sd["param_groups"]}, arrays


def _dump_batch(out_dir: Path | None, samples: list[D.RoiSample], rec: StepRecord) -> Path | None:
    if out_dir is None:
        return None
    path = out_dir / f"diverged_step{rec.step}.npz"
    np.savez(
        path,
        crops=np.stack([s.crop for s in samples]),
        labels=np.array([s.category_id for s in samples]),
        is_base=np.array([s.is_base for s in samples]),
        record=np.frombuffer(rec.to_json().encode(), dtype=np.uint8),
    )
    return path


@dataclass
class TrainResult:
    model: ContrastMaskModel
    records: list[StepRecord]
    checkpoint: Path | None
    audit_trips: int
    eval_summaries: list[dict]


def train(
    cfg: TrainConfig,
    dataset: D.Dataset | None = None,
    out_dir: str | Path | None = None,
    deterministic: bool = True,
    resume: str | Path | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """Train a model; writes ``metrics.jsonl`` and ``checkpoint.npz`` when ``out_dir`` is given."""
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    ds = dataset if dataset is not None else D.build_dataset(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dumps())

    torch.manual_seed(cfg.seed)
    model = ContrastMaskModel(cfg)
    opt = _make_optimizer(model, cfg)
    start_step = 0
    if resume is not None:
        model, meta = load_checkpoint(resume)
        opt = _make_optimizer(model, cfg)
        _restore_optimizer(opt, resume, meta)
        start_step = int(meta["step"])
    model.train()

    refs = ds.instance_refs("train")
    per_epoch = steps_per_epoch(len(refs), cfg.batch_size)
    n_total = total_steps(cfg, len(refs))
    records: list[StepRecord] = []
    evals: list[dict] = []
    metrics_fh = open(out / "metrics.jsonl", "a" if resume else "w") if out is not None else None
    trips_before = D.audit_trip_count()
    guard = D.training_guard(strict=False)
    try:
        with guard:
            for step in range(start_step, n_total):
                epoch, k = divmod(step, per_epoch)
                order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(refs))
                batch_refs = [refs[j] for j in order[k * cfg.batch_size : (k + 1) * cfg.batch_size]]
                rng = np.random.default_rng([cfg.seed, 11, step])
                samples = make_batch(ds, batch_refs, cfg, rng)
                if not samples:
                    continue
                lam = lambda_schedule(step, n_total, cfg)
                labels = torch.tensor([s.category_id for s in samples])
                fwd = model(crops_to_tensor([s.crop for s in samples]), target_class=labels)
                L, rec = total_loss(fwd, samples, cfg, lam, rng, step=step, epoch=epoch)
                if not math.isfinite(rec.loss_total):
                    dump = _dump_batch(out, samples, rec)
                    raise TrainingDiverged(f"non-finite loss at step {step}: {rec.to_json()} (dump: {dump})")
                for group in opt.param_groups:
                    group["lr"] = learning_rate_at(step, n_total, cfg)
                opt.zero_grad(set_to_none=True)
                L.backward()
                opt.step()
                records.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(rec.to_json() + "\n")
                if on_step is not None:
                    on_step(rec)
                done = step + 1
                if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                    _save(model, opt, out / f"checkpoint_step{done}.npz", done)
                if cfg.eval_every_epoch and (done % per_epoch == 0 or done == n_total):
                    evals.append(_epoch_eval(model, ds, cfg, epoch, out))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    model.eval()
    ckpt = _save(model, opt, out / "checkpoint.npz", n_total) if out is not None else None
    trips = D.audit_trip_count() - trips_before
    if out is not None:
        (out / "audit.json").write_text(json.dumps({"novel_mask_reads": trips}) + "\n")
    return TrainResult(model=model, records=records, checkpoint=ckpt, audit_trips=trips, eval_summaries=evals)


def _epoch_eval(model, ds, cfg, epoch, out) -> dict:
    from .evaluation import evaluate_model

    model.eval()
    with D.audit_suspended():
        report = evaluate_model(model, ds.val, cfg)
    model.train()
    summary = {"epoch": epoch, **report.summary()}
    if out is not None:
        with open(out / "eval.jsonl", "a") as fh:
            fh.write(json.dumps(summary) + "\n")
    return summary


def _save(model, opt, path: Path, step: int) -> Path:
    meta, arrays = _optimizer_arrays(opt)
    save_checkpoint(model, path, step, extra={"optimizer": meta})
    with np.load(path) as existing:
        stored = {k: existing[k] for k in existing.files}
    stored.update(arrays)
    with open(path, "wb") as fh:
        np.savez(fh, **stored)
    return path


def _restore_optimizer(opt: torch.optim.Optimizer, path, meta: dict) -> None:
    state: dict[int, dict] = {}
    with np.load(path) as data:
        for key in data.files:
            if key.startswith("optim/"):
                _, idx, name = key.split("/", 2)
                state.setdefault(int(idx), {})[name] = torch.from_numpy(data[key].copy())
    opt.load_state_dict({"state": state, "param_groups": meta["optimizer"]["param_groups"]})
