"""Sliding-window prediction with Gaussian blending and mirror TTA with laterality swapping."""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .prompts import ClickPrompt
from .schema import LabelSchema


@dataclass
class SlidingWindowConfig:
    patch_extents: list = field(default_factory=lambda: [32, 32, 32])
    step_fraction: float = 0.5
    gaussian_blend: bool = True
    normalize: bool = True
    threads: int = 1

    def __post_init__(self) -> None:
        self.patch_extents = list(T._triple(self.patch_extents))
        if not 0 < self.step_fraction <= 1:
            raise ValueError(f"step fraction must be in (0, 1], got {self.step_fraction}")


@dataclass
class TtaConfig:
    axes_subsets: list = field(default_factory=lambda: [(1, 2)])

    def __post_init__(self) -> None:
        seen = []
        for s in self.axes_subsets:
            s = tuple(sorted(set(int(a) for a in s)))
            if any(a not in (0, 1, 2) for a in s):
                raise ValueError(f"mirror axes must lie in (0, 1, 2), got {s}")
            if s not in seen:
                seen.append(s)
        self.axes_subsets = seen

    def passes(self) -> list[tuple[int, ...]]:
        """The identity pass first, then every configured non-empty subset."""
        return [()] + [s for s in self.axes_subsets if s]


def axes_subsets(universe: Sequence[int]) -> list[tuple[int, ...]]:
    """All non-empty subsets of ``universe``, by size then lexicographically."""
    items = sorted(set(universe))
    return [c for r in range(1, len(items) + 1) for c in itertools.combinations(items, r)]


def parse_tta_axes(text: str) -> list[tuple[int, ...]]:
    """``"1,2;2"`` -> ``[(1, 2), (2,)]``; empty string means no mirroring."""
    out = []
    for part in text.split(";"):
        part = part.strip()
        if part:
            out.append(tuple(int(a) for a in part.split(",")))
    return out


def _axis_starts(n: int, p: int, step_fraction: float) -> list[int]:
    if n <= p:
        return [0]
    target = p * step_fraction
    count = math.ceil((n - p) / target) + 1
    step = (n - p) / (count - 1)
    return [int(round(step * i)) for i in range(count)]


def window_positions(volume_extents: Sequence[int], patch_extents: Sequence[int],
                     step_fraction: float) -> list[tuple[int, int, int]]:
    """Window offsets: first at 0, last flush with the (padded) volume edge, evenly spread."""
    per_axis = [_axis_starts(n, p, step_fraction) for n, p in zip(volume_extents, patch_extents)]
    return list(itertools.product(*per_axis))


def gaussian_importance(patch_extents: Sequence[int]) -> np.ndarray:
    """Separable Gaussian with sigma = extent / 8, peak 1 at the centre, strictly positive."""
    axes = []
    for n in patch_extents:
        centre, sigma = (n - 1) / 2.0, n / 8.0
        axes.append(np.exp(-0.5 * ((np.arange(n) - centre) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w /= w.max()
    positive = w[w > 0]
    return np.maximum(w, positive.min())


def swap_laterality_channels(probs: np.ndarray, schema: LabelSchema, axis: int = 0) -> np.ndarray:
    """Exchange channels k and partner(k)."""
    return np.take(probs, schema.partner_map(), axis=axis)


def _model_fn(model) -> Callable:
    if hasattr(model, "predict_proba"):
        return lambda x, clicks: model.predict_proba(x, clicks)
    return model


def _window_clicks(clicks, start, patch):
    if clicks is None:
        return None
    out = []
    for c in clicks:
        local = tuple(v - s for v, s in zip(c.coord, start))
        if all(0 <= v < p for v, p in zip(local, patch)):
            out.append(ClickPrompt(local, c.class_label))
    return out


def sliding_window_predict(volume: np.ndarray, model, swcfg: SlidingWindowConfig,
                           clicks: Sequence[ClickPrompt] | None = None, report: dict | None = None,
                           dtype=np.float32) -> np.ndarray:
    """(K, H, W, D) class probabilities blended over overlapping windows.

    ``model`` is a network (``predict_proba``) or any callable ``(x[1,1,...], clicks) -> probs[1,K,...]``.
    Window results are accumulated in a fixed order regardless of ``swcfg.threads``.
    """
    from .training import normalize_intensity

    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise T.ShapeError(f"expected a single-channel 3D volume, got {vol.shape}")
    if swcfg.normalize:
        vol = normalize_intensity(vol)
    patch = swcfg.patch_extents
    pads = [((max(p - n, 0)) // 2, max(p - n, 0) - (max(p - n, 0)) // 2) for n, p in zip(vol.shape, patch)]
    padded = np.pad(vol, pads)
    shifted = None if clicks is None else [
        ClickPrompt(tuple(v + lo for v, (lo, _) in zip(c.coord, pads)), c.class_label) for c in clicks]
    starts = window_positions(padded.shape, patch, swcfg.step_fraction)
    weight = gaussian_importance(patch) if swcfg.gaussian_blend else np.ones(patch)
    fn = _model_fn(model)

    def run(start):
        sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
        with T.default_dtype(dtype):
            x = T.Tensor(padded[sl][None, None])
            return np.asarray(fn(x, _window_clicks(shifted, start, patch)), dtype=np.float64)[0]

    if swcfg.threads > 1:
        with ThreadPoolExecutor(swcfg.threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = map(run, starts)
    acc = None
    norm = np.zeros(padded.shape)
    for start, probs in zip(starts, results):
        if acc is None:
            acc = np.zeros((probs.shape[0],) + padded.shape)
        sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
        acc[(slice(None),) + sl] += probs * weight
        norm[sl] += weight
    out = acc / norm
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, vol.shape))
    if report is not None:
        report["windows"] = report.get("windows", 0) + len(starts)
    return out[(slice(None),) + crop]


def tta_predict(volume: np.ndarray, model, swcfg: SlidingWindowConfig, ttacfg: TtaConfig,
                schema: LabelSchema, clicks: Sequence[ClickPrompt] | None = None,
                report: dict | None = None, dtype=np.float32) -> np.ndarray:
    """Average of mirrored passes, each un-mirrored (and L/R channel-swapped) before averaging."""
    t0 = time.perf_counter()
    stats = {"windows": 0}
    partner = schema.partner_map()
    total = None
    passes = ttacfg.passes()
    for axes in passes:
        vol = np.flip(volume, axis=axes).copy() if axes else volume
        pass_clicks = None if clicks is None else [c.mirrored(axes, volume.shape, partner) for c in clicks]
        probs = sliding_window_predict(vol, model, swcfg, pass_clicks, stats, dtype)
        if axes:
            probs = np.flip(probs, axis=[a + 1 for a in axes])
            if 2 in axes:
                probs = swap_laterality_channels(probs, schema)
        total = probs.copy() if total is None else total + probs
    if report is not None:
        report.update(windows=stats["windows"], passes=len(passes), seconds=time.perf_counter() - t0)
    return total / len(passes)
