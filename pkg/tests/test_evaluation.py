import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contrastmask import data as D
from contrastmask.config import ConfigError, TrainConfig
from contrastmask.evaluation import (
    ABLATION_AXES,
    AblationMatrix,
    AblationRun,
    CategoryMetrics,
    EvalReport,
    IOU_THRESHOLDS,
    average_precision,
    mask_iou,
    run_ablation,
)


def logits_of(mask):
    return np.where(mask, 10.0, -10.0)


class TestIoU:
    def test_identical(self):
        m = np.zeros((6, 6), bool)
        m[1:4, 1:4] = True
        assert mask_iou(logits_of(m), m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
        a[0, 0], b[3, 3] = True, True
        assert mask_iou(logits_of(a), b) == 0.0

    def test_one_third(self):
        a, b = np.zeros((1, 4), bool), np.zeros((1, 4), bool)
        a[0, :2], b[0, 1:3] = True, True
        assert mask_iou(logits_of(a), b) == pytest.approx(1 / 3)

    def test_both_empty(self):
        z = np.zeros((3, 3), bool)
        assert mask_iou(logits_of(z), z) == 1.0

    @given(arrays(np.bool_, (5, 5)), arrays(np.bool_, (5, 5)))
    def test_symmetric_and_bounded(self, a, b):
        v = mask_iou(logits_of(a), b)
        assert v == mask_iou(logits_of(b), a)
        assert 0.0 <= v <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_iou(np.zeros((2, 2)), np.zeros((3, 3), bool))


class TestAP:
    def test_all_correct(self):
        assert average_precision(np.array([0.9, 0.8]), np.array([0.9, 0.95]), 0.5) == pytest.approx(1.0)

    def test_none_correct(self):
        assert average_precision(np.array([0.9, 0.8]), np.array([0.1, 0.2]), 0.5) == 0.0

    def test_ranking_matters(self):
        ious = np.array([0.9, 0.1])
        good = average_precision(np.array([0.9, 0.1]), ious, 0.5)
        bad = average_precision(np.array([0.1, 0.9]), ious, 0.5)
        assert good == pytest.approx(0.5, abs=0.01)
        assert bad < good

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30))
    def test_monotone_in_threshold(self, pairs):
        scores, ious = (np.array(v) for v in zip(*pairs))
        aps = [average_precision(scores, ious, t) for t in IOU_THRESHOLDS]
        assert all(b <= a + 1e-12 for a, b in zip(aps, aps[1:]))


def report_with(ious_by_cat):
    cats = {}
    for name, ious in ious_by_cat.items():
        ious = np.asarray(ious, dtype=float)
        scores = np.linspace(1, 0.5, len(ious))
        cats[name] = CategoryMetrics(len(ious), float(ious.mean()), {t: average_precision(scores, ious, t) for t in IOU_THRESHOLDS})
    return EvalReport(cats, {"base": ["disk"], "novel": ["star"]})


def test_perfect_report_is_100():
    s = report_with({"disk": [1.0, 1.0], "star": [1.0]}).summary()
    assert s["novel"]["mAP"] == pytest.approx(100.0)
    assert s["novel"]["mIoU"] == pytest.approx(100.0)


def test_map_bounded_by_ap50():
    s = report_with({"disk": [0.55, 0.8, 0.3], "star": [0.7, 0.92, 0.6, 0.2]}).summary()
    for split in ("base", "novel"):
        assert s[split]["mAP"] <= s[split]["AP50"]
        assert s[split]["AP75"] <= s[split]["AP50"]


def test_report_text_has_both_blocks():
    text = report_with({"disk": [0.5], "star": [0.9]}).to_text()
    assert "base" in text and "novel" in text and "ALL" in text


def test_unknown_axis():
    with pytest.raises(ConfigError):
        run_ablation(TrainConfig(), "nonsense", ["1"], [0])


def test_axes_are_config_fields():
    fields = set(TrainConfig().to_dict())
    assert set(ABLATION_AXES) <= fields


def test_ablation_matrix_round_trip(tmp_path):
    summ = lambda v: {"base": {"mIoU": v, "mAP": v, "AP50": v, "AP75": v, "count": 1},
                      "novel": {"mIoU": v, "mAP": v, "AP50": v, "AP75": v, "count": 1}}
    m = AblationMatrix("sigma", [AblationRun("a", {"sigma": 0.3}, 0, summ(10.0), 1.0, 0),
                                 AblationRun("a", {"sigma": 0.3}, 1, summ(20.0), 1.0, 0)])
    m.save(tmp_path)
    back = AblationMatrix.load(tmp_path / "ablation.json")
    assert back.mean("a") == 15.0
    assert (tmp_path / "ablation.txt").read_text().count("\n") >= 3


def test_tiny_ablation_runs_and_caches(tmp_path):
    cfg = TrainConfig(channels=4, encoder_blocks=2, projector_layers=2, n_train_scenes=6, n_val_scenes=3,
                      max_steps=2, optimizer="adam", learning_rate=1e-3)
    ds = D.build_dataset(cfg)
    m = run_ablation(cfg, "use_cam", ["true", "false"], [0], dataset=ds, out_dir=tmp_path / "ab", cache_dir=tmp_path / "c")
    assert m.labels() == ["use_cam=true", "use_cam=false"]
    assert len(list((tmp_path / "c").glob("*.json"))) == 2
    again = run_ablation(cfg, "use_cam", ["true", "false"], [0], dataset=ds, cache_dir=tmp_path / "c")
    assert [r.summary for r in again.runs] == [r.summary for r in m.runs]
