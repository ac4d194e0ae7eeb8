import json

import numpy as np
import pytest
import torch

from contrastmask import data as D
from contrastmask.config import TrainConfig
from contrastmask.heads import ContrastMaskModel, crops_to_tensor
from contrastmask.partition import partition_from_mask
from contrastmask.sampling import compute_shared_queries, flatten_projected
from contrastmask.training import (
    admitted_for_cl,
    contrastive_inputs,
    lambda_schedule,
    total_loss,
    total_steps,
    train,
)


def tiny(**kw):
    base = dict(
        channels=4,
        encoder_blocks=2,
        projector_layers=2,
        n_train_scenes=10,
        n_val_scenes=4,
        batch_size=8,
        epochs=2,
        optimizer="adam",
        learning_rate=1e-3,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def ds():
    return D.build_dataset(tiny())


def batch(ds, cfg, n=8, seed=0):
    rng = np.random.default_rng(seed)
    refs = ds.instance_refs("train")[:n]
    return [D.extract_roi(ds.train[s], i, cfg.roi_jitter, cfg.roi_resolution, rng) for s, i in refs]


class TestLambda:
    def test_endpoints_and_midpoint(self):
        cfg = TrainConfig()
        assert lambda_schedule(0, 1000, cfg) == 0.25
        assert lambda_schedule(250, 1000, cfg) == pytest.approx(0.625)
        assert lambda_schedule(500, 1000, cfg) == 1.0
        assert lambda_schedule(1000, 1000, cfg) == 1.0

    def test_monotone(self):
        cfg = TrainConfig()
        vals = [lambda_schedule(s, 200, cfg) for s in range(201)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lambda_schedule(11, 10, TrainConfig())


@pytest.mark.parametrize(
    "sup,base_ok,novel_ok", [("all", True, True), ("base", True, False), ("novel", False, True)]
)
def test_admission(sup, base_ok, novel_ok):
    assert admitted_for_cl(True, sup) == base_ok
    assert admitted_for_cl(False, sup) == novel_ok


def test_total_is_sum_of_parts(ds):
    cfg = tiny()
    torch.manual_seed(0)
    model = ContrastMaskModel(cfg)
    samples = batch(ds, cfg)
    out = model(crops_to_tensor([s.crop for s in samples]), torch.tensor([s.category_id for s in samples]))
    with D.training_guard(strict=True):
        L, rec = total_loss(out, samples, cfg, 0.6, np.random.default_rng(0))
    assert rec.loss_total == pytest.approx(rec.loss_box + rec.loss_mask + 0.6 * rec.loss_con, rel=1e-5)
    assert float(L.detach()) == pytest.approx(rec.loss_total)
    assert rec.n_base + rec.n_novel == len(samples)


def test_mask_loss_small_for_perfect_logits(ds):
    cfg = tiny(use_cl=False)
    samples = [s for s in batch(ds, cfg, 12) if s.is_base]
    gt = np.stack([s.oracle_mask() for s in samples])
    logits = torch.from_numpy(np.where(gt, 30.0, -30.0).astype(np.float32))
    out = {"class_logits": torch.zeros(len(samples), cfg.num_classes), "mask_logits": logits}
    _, rec = total_loss(out, samples, cfg, 1.0, np.random.default_rng(0))
    assert rec.loss_mask < 1e-10


def test_mask_loss_ignores_novel(ds):
    cfg = tiny(use_cl=False)
    samples = [s for s in batch(ds, cfg, 12) if not s.is_base]
    out = {
        "class_logits": torch.zeros(len(samples), cfg.num_classes),
        "mask_logits": torch.zeros(len(samples), cfg.roi_resolution, cfg.roi_resolution),
    }
    with D.training_guard(strict=True):
        _, rec = total_loss(out, samples, cfg, 1.0, np.random.default_rng(0))
    assert rec.loss_mask == 0.0


def test_per_proposal_query_is_fg_mean():
    M = np.zeros((6, 6), dtype=bool)
    M[1:4, 1:4] = True
    Z = torch.randn(1, 3, 6, 6, dtype=torch.float64)
    flat = flatten_projected(Z[0])
    P = partition_from_mask(M)
    q = compute_shared_queries([(flat, P)])
    assert torch.allclose(q.q_fg, Z[0][:, M].mean(dim=1))
    assert torch.allclose(q.q_bg, Z[0][:, ~M].mean(dim=1))


def test_novel_path_uses_cam_without_reading_masks(ds):
    cfg = tiny()
    samples = [s for s in batch(ds, cfg, 16) if not s.is_base]
    R = cfg.roi_resolution
    cams = torch.linspace(0, 1, R * R).reshape(1, R, R).repeat(len(samples), 1, 1)
    z = torch.randn(len(samples), cfg.channels, R, R)
    with D.training_guard(strict=True):
        pairs, keysets, skipped = contrastive_inputs(z, cams, samples, cfg, np.random.default_rng(0))
    assert len(pairs) == len(samples) and skipped == 0
    assert all(P.source == "cam" for _, P in pairs)


def test_constant_cam_is_skipped(ds):
    cfg = tiny(supervision="novel")
    samples = [s for s in batch(ds, cfg, 16) if not s.is_base]
    R = cfg.roi_resolution
    cams = torch.full((len(samples), R, R), 0.5)
    z = torch.randn(len(samples), cfg.channels, R, R)
    pairs, _, skipped = contrastive_inputs(z, cams, samples, cfg, np.random.default_rng(0))
    assert pairs == [] and skipped == len(samples)


def test_train_writes_stream_and_is_deterministic(tmp_path, ds):
    cfg = tiny(max_steps=6)
    a = train(cfg, ds, out_dir=tmp_path / "a")
    b = train(cfg, ds, out_dir=tmp_path / "b")
    sa = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert sa == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rows = [json.loads(line) for line in sa.decode().splitlines()]
    assert len(rows) == 6 == len(a.records)
    assert {"step", "loss_total", "loss_box", "loss_mask", "loss_con", "lambda"} <= set(rows[0])
    assert a.audit_trips == 0 and b.audit_trips == 0
    assert json.loads((tmp_path / "a" / "audit.json").read_text()) == {"novel_mask_reads": 0}


def test_resume_matches_uninterrupted(tmp_path, ds):
    cfg = tiny(max_steps=6, checkpoint_every=3)
    full = train(cfg, ds, out_dir=tmp_path / "full")
    resumed = train(cfg, ds, out_dir=tmp_path / "half", resume=tmp_path / "full" / "checkpoint_step3.npz")
    assert [r.to_json() for r in resumed.records] == [r.to_json() for r in full.records[3:]]
    for p, q in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(p, q)


def test_total_steps_respects_max():
    assert total_steps(tiny(epochs=3, batch_size=10), 95) == 30
    assert total_steps(tiny(epochs=3, batch_size=10, max_steps=7), 95) == 7


def test_oracle_run_reads_novel_masks_only_via_oracle(tmp_path, ds):
    res = train(tiny(max_steps=3, oracle_novel_masks=True), ds)
    assert res.audit_trips == 0
