"""Per-class IoU and mIoU over voxel label grids, optionally restricted to visible voxels."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import LabelGrid, VisibilityMask, check_same_geometry


@dataclass
class IoUReport:
    class_names: tuple[str, ...]
    iou: np.ndarray  # NaN where the class is absent from both grids
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.iou)

    @property
    def miou(self) -> float:
        if not self.defined.any():
            return math.nan
        return float(self.iou[self.defined].mean())

    def to_json(self) -> dict:
        return {
            "miou": self.miou,
            "classes": [
                {
                    "name": name,
                    "iou": None if math.isnan(v) else float(v),
                    "tp": int(tp), "fp": int(fp), "fn": int(fn),
                }
                for name, v, tp, fp, fn in zip(self.class_names, self.iou, self.tp, self.fp, self.fn)
            ],
        }

    def to_table(self) -> str:
        width = max(len("mIoU"), *(len(n) for n in self.class_names))
        lines = [f"{'class':<{width}}  IoU"]
        for name, v in zip(self.class_names, self.iou):
            lines.append(f"{name:<{width}}  {'-' if math.isnan(v) else f'{100 * v:6.2f}'}")
        lines.append(f"{'mIoU':<{width}}  {100 * self.miou:6.2f}")
        return "\n".join(lines) + "\n"

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"


def iou(pred: LabelGrid, gt: LabelGrid, mask: Optional[VisibilityMask] = None) -> IoUReport:
    check_same_geometry(pred.geometry, gt.geometry)
    if pred.schema.num_classes != gt.schema.num_classes:
        raise ValueError("prediction and ground truth use different class counts")
    if mask is None:
        m = np.ones(gt.class_id.shape, dtype=bool)
    else:
        if mask.visible.shape != gt.class_id.shape:
            raise ValueError("mask shape does not match grids")
        m = mask.visible
    if not m.any():
        raise ValueError("mask selects no voxels")
    K = gt.schema.num_classes
    p = pred.class_id[m]
    g = gt.class_id[m]
    # joint histogram over (gt, pred) in 0..K
    conf = np.bincount(g * (K + 1) + p, minlength=(K + 1) ** 2).reshape(K + 1, K + 1)
    tp = np.diag(conf)[:K].copy()
    fp = conf[:, :K].sum(axis=0) - tp
    fn = conf[:K, :].sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    return IoUReport(gt.schema.class_names, vals, tp, fp, fn)
