"""Dice and lesion-wise false positive / false negative volumes."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class MetricsRecord:
    dice: float
    fpv_ml: float
    fnv_ml: float
    case_id: str = ""


def _binary(mask, what="mask") -> np.ndarray:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{what} must be binary")
    return m.astype(bool)


def dice_score(pred, gt) -> float:
    """2|P and G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def connected_components(mask, connectivity: int = 26):
    """Label foreground components; returns (labels, sizes) with sizes[k-1] for label k."""
    if connectivity not in _STRUCTURE_RANK:
        raise ValueError("connectivity must be 6, 18 or 26")
    structure = ndimage.generate_binary_structure(3, _STRUCTURE_RANK[connectivity])
    labels, n = ndimage.label(_binary(mask), structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def _unmatched_voxels(source, other, connectivity) -> int:
    labels, sizes = connected_components(source, connectivity)
    if not len(sizes):
        return 0
    hit = np.unique(labels[other & (labels > 0)])
    keep = np.ones(len(sizes), dtype=bool)
    keep[hit - 1] = False
    return int(sizes[keep].sum())


def fp_fn_volumes(pred, gt, spacing, gt_spacing=None, connectivity: int = 26):
    """Volumes (mL) of predicted components missing gt entirely and of gt components missed entirely."""
    if gt_spacing is not None and tuple(map(float, gt_spacing)) != tuple(map(float, spacing)):
        raise ValueError(f"spacing mismatch: {spacing} vs {gt_spacing}")
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    voxel_ml = float(np.prod(spacing)) / 1000.0
    return (_unmatched_voxels(p, g, connectivity) * voxel_ml,
            _unmatched_voxels(g, p, connectivity) * voxel_ml)


def case_metrics(pred, gt, spacing, case_id="", connectivity: int = 26) -> MetricsRecord:
    fpv, fnv = fp_fn_volumes(pred, gt, spacing, connectivity=connectivity)
    return MetricsRecord(dice_score(pred, gt), fpv, fnv, case_id)


def aggregate(records: list[MetricsRecord]) -> MetricsRecord:
    if not records:
        raise ValueError("no records to aggregate")
    return MetricsRecord(float(np.mean([r.dice for r in records])),
                         float(np.mean([r.fpv_ml for r in records])),
                         float(np.mean([r.fnv_ml for r in records])), "mean")


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["case_id", "dice", "fpv_ml", "fnv_ml"])
        w.writeheader()
        for r in [*records, aggregate(records)]:
            w.writerow(asdict(r))
