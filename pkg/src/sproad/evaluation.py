"""Pixel metrics in the KITTI road style, threshold sweeps and overlays."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import imaging
from .errors import DataError
from .imaging import LabelMap

COLUMNS = ("ACC", "F1", "PRE", "REC", "FPR", "FNR", "MaxF", "AP")
TP_COLOR = (0, 255, 0)
FP_COLOR = (0, 0, 255)
FN_COLOR = (255, 0, 0)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _ratio(a, b) -> float:
    return float(a) / float(b) if b else 0.0


def _road(pred) -> np.ndarray:
    labels = pred.labels if isinstance(pred, LabelMap) else np.asarray(pred)
    return labels == imaging.ROAD


def confusion(pred, gt: LabelMap) -> Confusion:
    """Counts over ``gt.valid`` pixels with road as the positive class."""
    p = _road(pred)
    if p.shape != gt.labels.shape:
        raise DataError(f"prediction {p.shape} and ground truth {gt.labels.shape} differ in size")
    g = gt.labels == imaging.ROAD
    v = gt.valid
    tp = int(np.count_nonzero(p & g & v))
    fp = int(np.count_nonzero(p & ~g & v))
    fn = int(np.count_nonzero(~p & g & v))
    tn = int(np.count_nonzero(~p & ~g & v))
    return Confusion(tp, fp, fn, tn)


def metrics(c: Confusion) -> dict:
    """ACC, F1, PRE, REC, FPR, FNR with 0/0 taken as 0."""
    pre = _ratio(c.tp, c.tp + c.fp)
    rec = _ratio(c.tp, c.tp + c.fn)
    return {
        "ACC": _ratio(c.tp + c.tn, c.total),
        "F1": _ratio(2 * pre * rec, pre + rec),
        "PRE": pre,
        "REC": rec,
        "FPR": _ratio(c.fp, c.fp + c.tn),
        "FNR": _ratio(c.fn, c.fn + c.tp),
    }


def sweep(prob: np.ndarray, gt: LabelMap):
    """Precision/recall at every threshold of the sweep, highest threshold first.

    A pixel is predicted road when its probability is >= the threshold.
    Returns (thresholds, tp, fp, n_pos) with counts as int arrays.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.shape != gt.labels.shape:
        raise DataError(f"probability map {prob.shape} and ground truth {gt.labels.shape} differ in size")
    if not np.all(np.isfinite(prob)) or prob.min(initial=0.0) < 0.0 or prob.max(initial=0.0) > 1.0:
        raise DataError("probabilities must lie in [0, 1]")
    p = prob[gt.valid]
    y = gt.labels[gt.valid] == imaging.ROAD
    thresholds = np.union1d(p, [0.0, 1.0])[::-1]
    order = np.argsort(-p, kind="stable")
    p_sorted, y_sorted = p[order], y[order]
    ctp = np.concatenate([[0], np.cumsum(y_sorted)])
    cfp = np.concatenate([[0], np.cumsum(~y_sorted)])
    # number of pixels with p >= t, via the descending order
    count = np.searchsorted(-p_sorted, -thresholds, side="right")
    return thresholds, ctp[count], cfp[count], int(y.sum())


def maxf_ap(prob: np.ndarray, gt: LabelMap) -> tuple[float, float]:
    """Best F1 over the sweep and the trapezoid area under its PR curve."""
    _, tp, fp, n_pos = sweep(prob, gt)
    tp = tp.astype(np.float64)
    fp = fp.astype(np.float64)
    predicted = tp + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        pre = np.where(predicted > 0, tp / np.maximum(predicted, 1), np.nan)
    rec = tp / n_pos if n_pos else np.zeros_like(tp)
    pre0 = np.where(np.isnan(pre), 0.0, pre)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(pre0 + rec > 0, 2 * pre0 * rec / np.where(pre0 + rec > 0, pre0 + rec, 1), 0.0)
    maxf = float(f1.max())
    finite = pre[~np.isnan(pre)]
    first = float(finite[0]) if finite.size else 0.0
    pre = np.where(np.isnan(pre), first, pre)
    r = np.concatenate([[0.0], rec])
    pr = np.concatenate([[first], pre])
    ap = float(np.sum(np.diff(r) * (pr[1:] + pr[:-1]) / 2.0))
    return maxf, min(max(ap, 0.0), 1.0)


def evaluate(pred, gt: LabelMap, prob: np.ndarray | None = None) -> dict:
    """Metric row for one image; MaxF/AP are None without a probability map."""
    row = metrics(confusion(pred, gt))
    if prob is not None:
        row["MaxF"], row["AP"] = maxf_ap(prob, gt)
    else:
        row["MaxF"] = row["AP"] = None
    return row


def overlay(image: np.ndarray, pred, gt: LabelMap) -> np.ndarray:
    """Tint TP green, FP blue and FN red at 50% over the image.

    Rounds half up: out = (src + color + 1) // 2.
    """
    image = imaging.check_image(image)
    p = _road(pred)
    if p.shape != image.shape[:2] or gt.labels.shape != image.shape[:2]:
        raise DataError("image, prediction and ground truth must share dimensions")
    g = gt.labels == imaging.ROAD
    out = image.copy()
    for sel, color in ((p & g, TP_COLOR), (p & ~g, FP_COLOR), (~p & g, FN_COLOR)):
        sel = sel & gt.valid
        blended = (image[sel].astype(np.uint16) + np.array(color, dtype=np.uint16) + 1) // 2
        out[sel] = blended.astype(np.uint8)
    return out


def mean_row(rows: list[dict]) -> dict:
    out = {}
    for k in COLUMNS:
        vals = [r[k] for r in rows if r.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_csv(names: list[str], rows: list[dict]) -> str:
    """Per-image rows followed by a ``mean`` row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("image",) + COLUMNS)
    for name, row in zip(names, rows):
        w.writerow([name] + [_fmt(row.get(k)) for k in COLUMNS])
    mean = mean_row(rows)
    w.writerow(["mean"] + [_fmt(mean[k]) for k in COLUMNS])
    return buf.getvalue()


def report_json(names: list[str], rows: list[dict]) -> str:
    images = [{"image": n, **{k: row.get(k) for k in COLUMNS}} for n, row in zip(names, rows)]
    return json.dumps({"columns": list(COLUMNS), "images": images, "mean": mean_row(rows)}, indent=2)
