"""Command-line entry point: ``contrastmask <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, coerce_value, load_config

log = logging.getLogger("contrastmask")

LOSS_TOL = 1e-6
GRAD_TOL = 1e-3


def _pairs(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(path: str | None, overrides: list[str] | None = None) -> TrainConfig:
    extra = _pairs(overrides)
    if path is None:
        return TrainConfig(**{k: coerce_value(k, v) for k, v in extra.items()})
    return load_config(path, **extra)


def _csv(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_generate_data(args) -> int:
    from . import data as D

    cfg = _config(args.config, args.set).replace(data_seed=args.seed)
    ds = D.build_dataset(cfg)
    out = D.save_dataset(ds, args.out)
    n_train = sum(len(s.instances) for s in ds.train)
    n_val = sum(len(s.instances) for s in ds.val)
    print(f"wrote {len(ds.train)} train scenes ({n_train} instances), {len(ds.val)} val scenes ({n_val}) to {out}")
    return 0


def cmd_train(args) -> int:
    from . import data as D
    from .training import train

    cfg = _config(args.config, args.set)
    ds = D.load_dataset(args.data) if args.data else None
    result = train(cfg, ds, out_dir=args.out, deterministic=args.deterministic, resume=args.resume)
    last = result.records[-1] if result.records else None
    print(f"trained {len(result.records)} steps; checkpoint {result.checkpoint}")
    if last is not None:
        print(f"final loss {last.loss_total:.4f} (box {last.loss_box:.4f}, mask {last.loss_mask:.4f}, con {last.loss_con:.4f})")
    if result.audit_trips and not cfg.oracle_novel_masks:
        print(f"warning: novel ground-truth masks were read {result.audit_trips} times", file=sys.stderr)
        return 3
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate, write_report

    report = evaluate(args.checkpoint, args.data)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    jp, _ = write_report(report, out)
    print(report.to_text(), end="")
    print(f"report written to {jp}")
    return 0


def cmd_ablate(args) -> int:
    from .config import desk_config
    from .evaluation import run_ablation

    if args.config:
        base = _config(args.config, args.set)
    else:
        base = desk_config(**{k: coerce_value(k, v) for k, v in _pairs(args.set).items()})
    seeds = [int(s) for s in _csv(args.seeds)]
    matrix = run_ablation(base, args.axis, _csv(args.values), seeds, out_dir=args.out, cache_dir=args.cache)
    print(matrix.to_text(), end="")
    return 0


def cmd_plot(args) -> int:
    from .plots import emit_plots

    paths = emit_plots(args.in_dir, args.out)
    for p in paths:
        print(p)
    if not paths:
        print(f"nothing to plot under {args.in_dir}", file=sys.stderr)
        return 1
    return 0


def cmd_check_loss(args) -> int:
    import torch

    from . import checks

    worst_loss = checks.oracle_equivalence(n=args.instances, seed=args.seed)
    print(f"oracle equivalence: max abs error {worst_loss:.3e} over {args.instances} instances (tol {LOSS_TOL:g})")
    ok = worst_loss <= LOSS_TOL
    for mode in ("stop", "flow"):
        err = checks.gradient_check(n=args.grad_instances, seed=args.seed, query_gradient=mode, dtype=torch.float32)
        print(f"finite differences [{mode}]: max rel error {err:.3e} over {args.grad_instances} instances (tol {GRAD_TOL:g})")
        ok &= err <= GRAD_TOL
    if args.dump_keys:
        _dump_keys(Path(args.dump_keys), args.seed)
        print(f"sampled key coordinates written to {args.dump_keys}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _dump_keys(path: Path, seed: int, R: int = 28) -> None:
    """Sampled key coordinates for a centred disk mask, one ``kind row col`` per line."""
    import torch

    from .partition import extract_boundary, partition_from_mask
    from .sampling import mine_keys_base

    yy, xx = np.mgrid[:R, :R]
    M = (yy - R / 2 + 0.5) ** 2 + (xx - R / 2 + 0.5) ** 2 <= (R / 3) ** 2
    P = partition_from_mask(M)
    ks = mine_keys_base(torch.zeros(R * R, 1), P, extract_boundary(M), 0.3, np.random.default_rng(seed))
    with open(path, "w") as fh:
        for kind in ("fg_easy", "fg_hard", "bg_easy", "bg_hard"):
            for i in getattr(ks, f"{kind}_idx"):
                fh.write(f"{kind}\t{i // R}\t{i % R}\n")


def cmd_dump_pseudo_masks(args) -> int:
    import cv2

    from . import data as D
    from .evaluation import predict_rois
    from .heads import load_checkpoint
    from .plots import pseudo_mask_image

    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    ds = D.load_dataset(args.data) if args.data else D.build_dataset(cfg)
    scenes = ds.train if args.split == "train" else ds.val
    samples = [
        D.extract_roi(s, k, jitter=0.0, R=cfg.roi_resolution, with_mask=False)
        for s in scenes
        for k in range(len(s.instances))
        if not s.instances[k].is_base or args.include_base
    ][: args.limit]
    _, cams, _ = predict_rois(model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, (s, cam) in enumerate(zip(samples, cams)):
        name = f"{n:05d}_{cfg.categories[s.category_id]}"
        cv2.imwrite(str(out / f"{name}_pseudo.png"), pseudo_mask_image(cam, cfg.delta))
        cv2.imwrite(str(out / f"{name}_crop.png"), cv2.cvtColor((s.crop * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR))
    print(f"wrote {len(samples)} pseudo-masks to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contrastmask", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")

    g = sub.add_parser("generate-data", help="render the synthetic scenes to disk")
    with_config(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one model")
    with_config(t)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory from generate-data (default: regenerate)")
    t.add_argument("--deterministic", action="store_true", help="single-threaded, bit-stable execution")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: regenerate from the checkpoint config)")
    e.add_argument("--out", help="report directory (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one axis over several values and seeds")
    with_config(a)
    a.add_argument("--axis", required=True)
    a.add_argument("--values", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out", default="ablation")
    a.add_argument("--cache", help="directory of cached run results keyed by config digest")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="render figures from reports, ablations and checkpoints")
    pl.add_argument("--in", dest="in_dir", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("check-loss", help="oracle and finite-difference checks of the contrastive loss")
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--grad-instances", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--dump-keys", metavar="FILE", help="write sampled key coordinates as text")
    c.set_defaults(func=cmd_check_loss)

    d = sub.add_parser("dump-pseudo-masks", help="write CAM partitions as 3-level images")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data")
    d.add_argument("--out", required=True)
    d.add_argument("--split", choices=("train", "val"), default="train")
    d.add_argument("--limit", type=int, default=64)
    d.add_argument("--include-base", action="store_true")
    d.set_defaults(func=cmd_dump_pseudo_masks)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
