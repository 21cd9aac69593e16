"""Dense-prediction metrics and the multi-task performance score."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

F_THRESHOLDS = np.linspace(0.0, 1.0, 257)[1:-1]  # 255 interior thresholds


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int | None = 255) -> float:
    """Mean IoU over classes present in the ground truth."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    keep = np.ones(gt.shape, bool) if ignore is None else gt != ignore
    pred, gt = pred[keep], gt[keep]
    if gt.size and (gt.max() >= num_classes or pred.max() >= num_classes or min(gt.min(), pred.min()) < 0):
        raise ValueError(f"class id outside [0, {num_classes})")
    conf = np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    present = conf.sum(1) > 0
    if not present.any():
        raise ValueError("ground truth has no valid pixels")
    return float(np.mean(inter[present] / union[present]))


def rmse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    m = np.ones(gt.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), gt.shape)
    if not m.any():
        raise ValueError("rmse mask is empty")
    return float(np.sqrt(np.mean((pred[m] - gt[m]) ** 2)))


def mean_angular_error(pred_normals: np.ndarray, gt_normals: np.ndarray, axis: int = 0) -> float:
    """Mean angle in degrees between per-pixel vectors along ``axis`` (3 channels)."""
    p = np.moveaxis(np.asarray(pred_normals, np.float64), axis, -1)
    g = np.moveaxis(np.asarray(gt_normals, np.float64), axis, -1)
    if p.shape != g.shape or p.shape[-1] != 3:
        raise ValueError(f"expected matching 3-channel fields, got {p.shape} and {g.shape}")
    pn = np.linalg.norm(p, axis=-1)
    gn = np.linalg.norm(g, axis=-1)
    if np.any(pn == 0) or np.any(gn == 0):
        raise ValueError("zero-length normal vector")
    cos = np.clip((p * g).sum(-1) / (pn * gn), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def _counts(prob: np.ndarray, gt: np.ndarray, thresholds: np.ndarray):
    """(tp, fp, fn) per threshold for ``prob >= t``."""
    prob = np.asarray(prob, np.float64).ravel()
    gt = np.asarray(gt).ravel().astype(bool)
    order = np.sort(prob[gt])
    pos = np.sort(prob)
    tp = gt.sum() - np.searchsorted(order, thresholds, side="left")
    pred_pos = prob.size - np.searchsorted(pos, thresholds, side="left")
    return tp.astype(np.float64), (pred_pos - tp).astype(np.float64), (gt.sum() - tp).astype(np.float64)


def max_f(saliency_prob: np.ndarray, gt_binary: np.ndarray, beta2: float = 0.3) -> float:
    """Maximum F_beta over 255 evenly spaced thresholds."""
    if not np.asarray(gt_binary).astype(bool).any():
        raise ValueError("ground truth has no positive pixels")
    tp, fp, fn = _counts(saliency_prob, gt_binary, F_THRESHOLDS)
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    recall = tp / (tp + fn)
    denom = beta2 * precision + recall
    f = np.divide((1 + beta2) * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f.max())


def ods_f(boundary_prob_maps, gt_boundaries) -> float:
    """Dataset-wide best F1 at a single threshold, exact pixel matching.

    Not comparable to benchmark odsF: there is no thinning and no distance tolerance.
    """
    probs = list(boundary_prob_maps)
    gts = list(gt_boundaries)
    if not probs or len(probs) != len(gts):
        raise ValueError("need a non-empty dataset with one ground truth per map")
    tp = fp = fn = 0.0
    for p, g in zip(probs, gts):
        a, b, c = _counts(p, g, F_THRESHOLDS)
        tp, fp, fn = tp + a, fp + b, fn + c
    denom = 2 * tp + fp + fn
    f = np.divide(2 * tp, denom, out=np.zeros_like(denom), where=denom > 0)
    return float(f.max())


def delta_m(multi: dict[str, float], single: dict[str, float], lower_is_better: dict[str, bool]) -> float:
    """Mean signed relative gain (percent) of ``multi`` over ``single``."""
    if set(multi) != set(single) or set(multi) != set(lower_is_better):
        raise ValueError(f"task sets differ: {sorted(multi)} vs {sorted(single)}")
    total = 0.0
    for key, m in multi.items():
        s = single[key]
        if s == 0:
            raise ValueError(f"zero baseline for {key}")
        sign = -1.0 if lower_is_better[key] else 1.0
        total += sign * (m - s) / s
    return 100.0 * total / len(multi)


@dataclass
class MetricReport:
    values: dict[str, float] = field(default_factory=dict)  # "<task>.<metric>" -> value
    lower_is_better: dict[str, bool] = field(default_factory=dict)
    delta_m: float | None = None

    def __post_init__(self):
        for k, v in self.values.items():
            if not np.isfinite(v):
                raise ValueError(f"metric {k} is not finite")

    def with_baseline(self, baseline: "MetricReport") -> "MetricReport":
        if set(baseline.values) != set(self.values):
            raise ValueError("baseline report does not cover the same task/metric set")
        dm = delta_m(self.values, baseline.values, self.lower_is_better)
        return MetricReport(dict(self.values), dict(self.lower_is_better), dm)

    def to_text(self) -> str:
        lines = [f"{k}={v:.6g}" for k, v in self.values.items()]
        if self.delta_m is not None:
            lines.append(f"delta_m={self.delta_m:.6g}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "metric", "value", "lower_is_better"])
        for k, v in self.values.items():
            task, metric = k.split(".", 1)
            w.writerow([task, metric, repr(float(v)), int(self.lower_is_better[k])])
        if self.delta_m is not None:
            w.writerow(["all", "delta_m", repr(float(self.delta_m)), 0])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        values, lib, dm = {}, {}, None
        for r in rows:
            if r["metric"] == "delta_m":
                dm = float(r["value"])
                continue
            key = f"{r['task']}.{r['metric']}"
            values[key] = float(r["value"])
            lib[key] = bool(int(r["lower_is_better"]))
        return cls(values, lib, dm)


def evaluate_predictions(pred: dict[str, np.ndarray], label: dict[str, np.ndarray], tasks,
                         ignore_index: int = 255) -> MetricReport:
    """Compute each task's metric from stacked predictions (probabilities for discrete tasks)."""
    values, lib = {}, {}
    for t in tasks:
        p, g = pred[t.name], label[t.name]
        if t.metric == "miou":
            v = miou(p.argmax(axis=1), g, t.channels, ignore_index)
        elif t.metric == "rmse":
            v = rmse(p, g)
        elif t.metric == "merr":
            v = float(np.mean([mean_angular_error(a, b) for a, b in zip(p, g)]))
        elif t.metric == "maxf":
            v = max_f(p[:, 1], g)
        elif t.metric == "odsf":
            v = ods_f(list(p[:, 1]), list(g))
        else:
            raise ValueError(f"unknown metric {t.metric!r}")
        key = f"{t.name}.{t.metric}"
        values[key] = v
        lib[key] = t.lower_is_better
    return MetricReport(values, lib)
