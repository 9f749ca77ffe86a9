"""Quick built-in checks: SSD equivalence, gradients, mirror involutions."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .inference import axes_subsets, swap_laterality_channels
from .schema import LabelSchema
from .ssd import SsdInputs, ssd_chunked, ssd_quadratic, ssd_recurrent
from .tensor import Tensor, gradcheck
from .training import mirror_augment


def _ssd_equivalence(rng) -> tuple[bool, str]:
    worst_q, worst_c = 0.0, 0.0
    for _ in range(20):
        steps, n, p = (int(v) for v in rng.integers(1, [65, 9, 9]))
        inp = SsdInputs.random(rng, steps, n, p)
        ref = ssd_recurrent(inp).data
        worst_q = max(worst_q, float(np.abs(ssd_quadratic(inp).data - ref).max()))
        worst_c = max(worst_c, float(np.abs(ssd_chunked(inp, int(rng.integers(1, 70))).data - ref).max()))
    return worst_q < 1e-10 and worst_c < 1e-8, f"quadratic {worst_q:.1e}, chunked {worst_c:.1e}"


def _gradients(rng) -> tuple[bool, str]:
    x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)))
    k = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
    w = rng.normal(size=(1, 3, 4, 4, 4))
    f = lambda x, k: (T.softmax(T.layer_norm(T.conv3d(x, k, padding=1), axis=1), axis=1) * w).sum()
    report = gradcheck(f, [x, k], max_entries=30, rng=rng)
    return report.passed, f"max rel err {report.max_rel_error:.1e}"


def _mirrors(rng, schema: LabelSchema) -> tuple[bool, str]:
    vol, lab = rng.normal(size=(6, 5, 4)), rng.integers(0, schema.num_classes, size=(6, 5, 4))
    ok = True
    for axes in axes_subsets((0, 1, 2)):
        v2, l2 = mirror_augment(*mirror_augment(vol, lab, axes, schema), axes, schema)
        ok &= np.array_equal(v2, vol) and np.array_equal(l2, lab)
    probs = rng.random((schema.num_classes, 3, 3, 3))
    ok &= np.array_equal(swap_laterality_channels(swap_laterality_channels(probs, schema), schema), probs)
    pm = schema.partner_map()
    ok &= np.array_equal(pm[pm], np.arange(schema.num_classes))
    return bool(ok), "7 subsets + channel swap"


def run_selftest(schema: LabelSchema, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        return [("ssd_equivalence", *_ssd_equivalence(rng)),
                ("gradcheck", *_gradients(rng)),
                ("mirror_involution", *_mirrors(rng, schema))]
