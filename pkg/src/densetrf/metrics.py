"""DICE, IoU and Hausdorff distance on binary masks, plus multi-seed aggregation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

HD_UNDEFINED = math.nan


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 2 or pred.size == 0:
        raise ValueError(f"masks must be non-empty 2D grids, got {pred.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # distance from every pixel to the nearest foreground pixel of b, read off at a
    dist = ndimage.distance_transform_edt(~b)
    return float(dist[a].max())


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance in pixels over all foreground pixels.

    Returns ``HD_UNDEFINED`` (NaN) when either mask is empty.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return HD_UNDEFINED
    return max(_directed(pred, gt), _directed(gt, pred))


@dataclass
class MetricReport:
    dice: list[float]
    iou: list[float]
    hd: list[float]  # NaN marks an undefined class
    hd_undefined: int = 0

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou))

    @property
    def mean_hd(self) -> float:
        vals = [v for v in self.hd if not math.isnan(v)]
        return float(np.mean(vals)) if vals else HD_UNDEFINED


def evaluate_masks(pred_masks: np.ndarray, gt_masks: np.ndarray) -> MetricReport:
    """Per-class metrics for a stack of samples, shape (N, Hi, Wi, C).

    Each class score is the mean over samples; HD averages only the samples
    where it is defined and counts the rest in ``hd_undefined``.
    """
    pred_masks = np.asarray(pred_masks, dtype=bool)
    gt_masks = np.asarray(gt_masks, dtype=bool)
    if pred_masks.shape != gt_masks.shape:
        raise ValueError(f"prediction stack {pred_masks.shape} vs labels {gt_masks.shape}")
    n, _, _, c = pred_masks.shape
    dices, ious, hds = [], [], []
    undefined = 0
    for k in range(c):
        d = [dice(pred_masks[i, ..., k], gt_masks[i, ..., k]) for i in range(n)]
        j = [iou(pred_masks[i, ..., k], gt_masks[i, ..., k]) for i in range(n)]
        h = [hausdorff(pred_masks[i, ..., k], gt_masks[i, ..., k]) for i in range(n)]
        defined = [v for v in h if not math.isnan(v)]
        undefined += len(h) - len(defined)
        dices.append(float(np.mean(d)))
        ious.append(float(np.mean(j)))
        hds.append(float(np.mean(defined)) if defined else HD_UNDEFINED)
    if undefined:
        log.debug("hausdorff undefined for %d of %d mask pairs (empty mask); excluded", undefined, n * c)
    return MetricReport(dice=dices, iou=ious, hd=hds, hd_undefined=undefined)


@dataclass
class Aggregate:
    mean: dict[str, float]
    std: dict[str, float]
    n: int
    single_run: bool = field(init=False)

    def __post_init__(self):
        self.single_run = self.n == 1


def aggregate_runs(reports) -> Aggregate:
    """Mean and sample std (n-1) per metric over per-seed reports.

    ``reports`` is a list of mappings metric -> value (MetricReports are
    reduced to their class means). A single run reports std 0.
    """
    if not reports:
        raise ValueError("aggregate_runs needs at least one report")
    rows = []
    for r in reports:
        if isinstance(r, MetricReport):
            r = {"dice": r.mean_dice, "iou": r.mean_iou, "hd": r.mean_hd}
        rows.append(r)
    keys = list(rows[0])
    mean, std = {}, {}
    for key in keys:
        vals = np.array([row[key] for row in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            mean[key], std[key] = HD_UNDEFINED, HD_UNDEFINED
            continue
        mean[key] = float(vals.mean())
        std[key] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return Aggregate(mean=mean, std=std, n=len(rows))
