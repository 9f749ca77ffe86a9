"""Connected-component filtering with ground-truth thresholds, Dice and HD95."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .schema import LabelSchema

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class Component:
    id: int
    voxels: int
    bbox: tuple  # ((lo0, hi0), (lo1, hi1), (lo2, hi2)), hi exclusive


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])


def connected_components(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, list[Component]]:
    """Label maximal connected regions 1..n in raster order of each region's first voxel."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {mask.shape}")
    if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    labeled, n = ndimage.label(mask.astype(bool), structure=_structure(connectivity))
    labeled = labeled.astype(np.int32)
    counts = np.bincount(labeled.ravel(), minlength=n + 1)
    slices = ndimage.find_objects(labeled)
    report = [Component(i + 1, int(counts[i + 1]), tuple((s.start, s.stop) for s in sl))
              for i, sl in enumerate(slices)]
    return labeled, report


def component_report(labels: np.ndarray, classes: Iterable[int], connectivity: int = 26) -> dict:
    return {int(k): connected_components(labels == k, connectivity)[1] for k in classes}


def compute_class_thresholds(gt_dataset: Sequence[np.ndarray], schema: LabelSchema,
                             connectivity: int = 26, percentile: float = 0.5) -> dict[int, int]:
    """Per foreground class: lower nearest-rank ``percentile`` of pooled GT component volumes."""
    table = {}
    for k in range(1, schema.num_classes):
        sizes = [c.voxels for gt in gt_dataset for c in connected_components(np.asarray(gt) == k, connectivity)[1]]
        table[k] = int(np.percentile(sizes, percentile, method="lower")) if sizes else 0
    return table


def filter_small_components(pred: np.ndarray, thresholds: dict, connectivity: int = 26) -> np.ndarray:
    """Relabel components smaller than their class threshold as background."""
    out = np.array(pred, copy=True)
    for k, thr in thresholds.items():
        k = int(k)
        if thr <= 0:
            continue
        labeled, comps = connected_components(out == k, connectivity)
        small = [c.id for c in comps if c.voxels < thr]
        if small:
            out[np.isin(labeled, small)] = 0
    return out


def _check_extents(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")


def dice(pred: np.ndarray, gt: np.ndarray, cls: int | None = None) -> float:
    """2|A∩B| / (|A|+|B|) for class ``cls`` (or boolean masks); 1.0 when both are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_extents(pred, gt)
    a, b = (pred == cls, gt == cls) if cls is not None else (pred.astype(bool), gt.astype(bool))
    denom = int(a.sum()) + int(b.sum())
    return 1.0 if denom == 0 else 2.0 * int(np.logical_and(a, b).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background neighbour or on the volume edge."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=_structure(6), border_value=0)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def surface_distances(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distances from each boundary voxel of ``a`` to the nearest boundary voxel of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dist = ndimage.distance_transform_edt(~bb, sampling=spacing)
    return dist[ba]


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """95th percentile of pooled symmetric surface distances.

    Returns 0 when both masks are empty and ``None`` (undefined) when exactly one is.
    """
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    _check_extents(pred, gt)
    if np.any(np.asarray(spacing) <= 0):
        raise ValueError(f"spacing must be positive, got {spacing}")
    if not pred.any() and not gt.any():
        return 0.0
    if not pred.any() or not gt.any():
        return None
    pooled = np.concatenate([surface_distances(pred, gt, spacing), surface_distances(gt, pred, spacing)])
    return float(np.percentile(pooled, 95))


def evaluate_case(pred: np.ndarray, gt: np.ndarray, schema: LabelSchema, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Per-class {dice, hd95} plus means; undefined HD95 values are excluded and counted."""
    per_class = {}
    for k in range(1, schema.num_classes):
        per_class[schema.classes[k].name] = {"dice": dice(pred, gt, k), "hd95": hd95(pred == k, gt == k, spacing)}
    hds = [v["hd95"] for v in per_class.values() if v["hd95"] is not None]
    return {"per_class": per_class,
            "mean_dice": float(np.mean([v["dice"] for v in per_class.values()])),
            "mean_hd95": float(np.mean(hds)) if hds else None,
            "hd95_undefined": len(per_class) - len(hds)}


def mean_foreground_dice(pred: np.ndarray, gt: np.ndarray, classes: Iterable[int]) -> float:
    return float(np.mean([dice(pred, gt, k) for k in classes]))
