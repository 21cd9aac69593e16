import math

import numpy as np
import pytest

from invpt.metrics import (F_THRESHOLDS, MetricReport, delta_m, evaluate_predictions, max_f, mean_angular_error,
                           miou, ods_f, rmse)
from invpt.prelim import TaskSpec


def test_miou_perfect():
    gt = np.random.default_rng(0).integers(0, 4, (16, 16))
    assert miou(gt, gt, 4) == 1.0


def test_miou_disjoint():
    assert miou(np.array([0, 0, 1, 1]), np.array([1, 1, 0, 0]), 2) == 0.0


def test_miou_half_overlap():
    assert miou(np.array([0, 1, 1, 0]), np.array([1, 1, 0, 0]), 2) == pytest.approx(1 / 3)


def test_miou_ignores_void_and_absent_classes():
    gt = np.array([0, 0, 255, 255])
    pred = np.array([0, 0, 1, 2])
    assert miou(pred, gt, 3) == 1.0


def test_miou_out_of_range():
    with pytest.raises(ValueError):
        miou(np.array([0, 5]), np.array([0, 1]), 3)


def test_rmse_cases():
    x = np.random.default_rng(1).random((4, 4))
    assert rmse(x, x) == 0.0
    assert rmse(x + 0.25, x) == pytest.approx(0.25)
    y = np.random.default_rng(2).random((4, 4))
    total = 0.0
    for a, b in zip(x.ravel(), y.ravel()):
        total += (a - b) ** 2
    assert rmse(x, y) == pytest.approx(math.sqrt(total / 16), rel=1e-12)


def test_rmse_mask():
    x, y = np.zeros(4), np.array([0.0, 0.0, 3.0, 4.0])
    assert rmse(x, y, mask=np.array([0, 0, 1, 1])) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(ValueError):
        rmse(x, y, mask=np.zeros(4))


def test_angular_error():
    n = np.random.default_rng(0).standard_normal((3, 4, 4))
    assert mean_angular_error(n, n) == pytest.approx(0.0, abs=1e-6)
    ex, ey = np.zeros((3, 2, 2)), np.zeros((3, 2, 2))
    ex[0], ey[1] = 1, 1
    assert mean_angular_error(ex, ey) == pytest.approx(90.0)
    assert mean_angular_error(ex, -ex) == pytest.approx(180.0)


def test_angular_zero_vector():
    with pytest.raises(ValueError):
        mean_angular_error(np.zeros((3, 2, 2)), np.ones((3, 2, 2)))


def brute_f(probs, gts, beta2):
    """Enumerate every threshold with explicit counting loops."""
    best = 0.0
    for t in F_THRESHOLDS:
        tp = fp = fn = 0
        for p, g in zip(probs, gts):
            for pv, gv in zip(np.ravel(p), np.ravel(g)):
                pos = pv >= t
                tp += pos and gv
                fp += pos and not gv
                fn += (not pos) and gv
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f = (1 + beta2) * prec * rec / (beta2 * prec + rec) if prec + rec else 0.0
        best = max(best, f)
    return best


def test_max_f_perfect_and_zero():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:5, 3:7] = 1
    assert max_f(gt.astype(float), gt) == pytest.approx(1.0)
    assert max_f(np.zeros((8, 8)), gt) == 0.0


def test_max_f_enumeration():
    gt = np.array([[1, 1, 0, 0], [0, 1, 0, 0]])
    prob = np.array([[0.9, 0.4, 0.6, 0.1], [0.2, 0.8, 0.05, 0.3]])
    assert max_f(prob, gt) == pytest.approx(brute_f([prob], [gt], 0.3), rel=1e-12)


def test_ods_f_perfect_and_inverted():
    gt = np.zeros((6, 6), np.uint8)
    gt[:, 2] = 1
    assert ods_f([gt.astype(float)], [gt]) == pytest.approx(1.0)
    assert ods_f([1.0 - gt], [gt]) == 0.0


def test_ods_f_two_images():
    rng = np.random.default_rng(4)
    gts = [(rng.random((5, 5)) > 0.7).astype(np.uint8) for _ in range(2)]
    probs = [np.clip(g * 0.6 + rng.random((5, 5)) * 0.5, 0, 1) for g in gts]
    assert ods_f(probs, gts) == pytest.approx(brute_f(probs, gts, 1.0), rel=1e-12)


def test_thresholds_count():
    assert len(F_THRESHOLDS) == 255 and 0 < F_THRESHOLDS[0] and F_THRESHOLDS[-1] < 1


def test_delta_m_identity():
    m = {"a.miou": 0.5, "b.rmse": 0.2}
    assert delta_m(m, m, {"a.miou": False, "b.rmse": True}) == 0.0


def test_delta_m_half_gain():
    lib = {"a.miou": False, "b.odsf": False}
    assert delta_m({"a.miou": 0.55, "b.odsf": 0.3}, {"a.miou": 0.5, "b.odsf": 0.3}, lib) == pytest.approx(5.0, abs=1e-9)


def test_delta_m_lower_better_sign():
    lib = {"a.miou": False, "b.rmse": True, "c.odsf": False}
    single = {"a.miou": 0.4, "b.rmse": 0.5, "c.odsf": 0.7}
    multi = dict(single, **{"b.rmse": 0.45})
    assert delta_m(multi, single, lib) == pytest.approx(10 / 3, abs=1e-9)


def test_delta_m_task_mismatch():
    with pytest.raises(ValueError):
        delta_m({"a.miou": 1.0}, {"b.miou": 1.0}, {"a.miou": False})


def test_report_csv_roundtrip():
    rep = MetricReport({"semseg.miou": 0.5, "depth.rmse": 0.125}, {"semseg.miou": False, "depth.rmse": True})
    rep = rep.with_baseline(rep)
    back = MetricReport.from_csv(rep.to_csv())
    assert back.values == rep.values and back.lower_is_better == rep.lower_is_better
    assert back.delta_m == 0.0
    assert "delta_m=0" in rep.to_text()


def test_report_rejects_nan():
    with pytest.raises(ValueError):
        MetricReport({"a.miou": float("nan")}, {"a.miou": False})


def test_evaluate_predictions_keys():
    tasks = [TaskSpec("semseg", "discrete", 3), TaskSpec("depth", "continuous", 1),
             TaskSpec("boundary", "discrete", 2), TaskSpec("saliency", "discrete", 2)]
    rng = np.random.default_rng(0)
    seg = rng.integers(0, 3, (2, 4, 4))
    bnd = (rng.random((2, 4, 4)) > 0.5).astype(np.uint8)
    pred = {"semseg": np.eye(3)[seg].transpose(0, 3, 1, 2), "depth": np.zeros((2, 1, 4, 4)),
            "boundary": np.stack([1 - bnd, bnd], 1).astype(float), "saliency": np.stack([1 - bnd, bnd], 1).astype(float)}
    label = {"semseg": seg, "depth": np.full((2, 1, 4, 4), 0.5), "boundary": bnd, "saliency": bnd}
    rep = evaluate_predictions(pred, label, tasks)
    assert set(rep.values) == {"semseg.miou", "depth.rmse", "boundary.odsf", "saliency.maxf"}
    assert rep.values["semseg.miou"] == 1.0 and rep.values["depth.rmse"] == pytest.approx(0.5)
