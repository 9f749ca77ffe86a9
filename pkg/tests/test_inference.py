import numpy as np
import pytest

from oracles import identity_model
from umamba2.architecture import ArchConfig, build_network
from umamba2.inference import (SlidingWindowConfig, TtaConfig, axes_subsets, gaussian_importance,
                               parse_tta_axes, sliding_window_predict, swap_laterality_channels, tta_predict,
                               window_positions)
from umamba2.prompts import ClickPrompt
from umamba2.schema import ClassInfo, LabelSchema, load_schema
from umamba2.ssd import SsdConfig
from umamba2.tensor import Tensor

SCHEMA = load_schema()


def test_single_window_when_volume_equals_patch():
    assert window_positions((32, 32, 32), (32, 32, 32), 0.5) == [(0, 0, 0)]


def test_enumeration_64_32_half():
    pos = window_positions((64, 64, 64), (32, 32, 32), 0.5)
    assert sorted({p[0] for p in pos}) == [0, 16, 32] and len(pos) == 27


def _enumerate_oracle(n, p, frac):
    """Smallest evenly spaced set of starts whose step does not exceed frac * p."""
    if n <= p:
        return [0]
    for count in range(2, n + 2):
        step = (n - p) / (count - 1)
        if step <= frac * p + 1e-12:
            return [int(round(step * i)) for i in range(count)]


@pytest.mark.parametrize("frac", [0.5, 0.9, 0.25, 1.0])
@pytest.mark.parametrize("n,p", [(20, 8), (17, 16), (33, 10), (8, 8), (50, 7)])
def test_coverage_and_even_spacing(n, p, frac):
    pos = window_positions((n, 9, 9), (p, 9, 9), frac)
    starts = sorted({q[0] for q in pos})
    assert starts == _enumerate_oracle(n, p, frac)
    covered = np.zeros(n, bool)
    for s in starts:
        covered[s:s + p] = True
    assert covered.all() and starts[0] == 0 and starts[-1] + p == max(n, p)


def test_window_count_monotone_in_step():
    counts = [len(window_positions((40, 50, 60), (16, 16, 16), f)) for f in (0.25, 0.5, 0.75, 0.9, 1.0)]
    assert counts == sorted(counts, reverse=True)


def test_gaussian_importance():
    w = gaussian_importance((9, 8, 7))
    assert w[4, 3:5, 3].max() == w.max() and np.all(w > 0)
    for ax in range(3):
        assert np.array_equal(w, np.flip(w, ax))
    assert gaussian_importance((1, 1, 1))[0, 0, 0] == 1.0
    assert gaussian_importance((5, 5, 5))[2, 2, 2] == 1.0


def test_swap_laterality():
    rng = np.random.default_rng(0)
    p = rng.random((12, 2, 2, 2))
    assert np.array_equal(swap_laterality_channels(swap_laterality_channels(p, SCHEMA), SCHEMA), p)
    plain = LabelSchema([ClassInfo(i, str(i)) for i in range(3)])
    assert np.array_equal(swap_laterality_channels(p[:3], plain), p[:3])
    s4 = LabelSchema([ClassInfo(0, "bg"), ClassInfo(1, "l", 2), ClassInfo(2, "r", 1), ClassInfo(3, "m")])
    v = np.array([0.1, 0.2, 0.3, 0.4]).reshape(4, 1, 1, 1)
    assert swap_laterality_channels(v, s4).ravel().tolist() == [0.1, 0.3, 0.2, 0.4]


def test_axes_subsets_counts():
    assert len(axes_subsets({0, 1})) == 3
    assert len(axes_subsets({0, 1, 2})) == 7
    assert axes_subsets(set()) == []
    assert axes_subsets((2, 0, 1)) == axes_subsets((0, 1, 2))
    assert parse_tta_axes("1,2;2") == [(1, 2), (2,)]


def test_sliding_window_single_window_equals_forward():
    net = build_network(ArchConfig(patch_size=[16, 16, 16], num_classes=4,
                                   ssd=SsdConfig(state_dim=4, num_heads=2, chunk_len=16)))
    vol = np.random.default_rng(1).normal(size=(16, 16, 16))
    cfg = SlidingWindowConfig(patch_extents=[16, 16, 16], normalize=False)
    out = sliding_window_predict(vol, net, cfg, dtype=np.float64)
    direct = net.predict_proba(Tensor(vol[None, None]))[0]
    assert np.abs(out - direct).max() < 1e-12


@pytest.mark.parametrize("blend", [True, False])
def test_blended_probabilities_sum_to_one(blend):
    vol = np.random.default_rng(2).normal(size=(20, 13, 9))
    cfg = SlidingWindowConfig(patch_extents=[8, 8, 8], gaussian_blend=blend)
    report = {}
    out = sliding_window_predict(vol, identity_model(5), cfg, report=report)
    assert out.shape == (5, 20, 13, 9)
    assert np.abs(out.sum(axis=0) - 1).max() < 1e-5
    assert report["windows"] == len(window_positions((20, 13, 9), (8, 8, 8), 0.5))


def test_identity_model_passthrough_is_exact():
    # a per-voxel model makes every window agree, so blending must return that value everywhere
    vol = np.random.default_rng(3).normal(size=(12, 10, 9))
    fn = identity_model(3)
    cfg = SlidingWindowConfig(patch_extents=[6, 6, 6], normalize=False)
    ref = fn(vol[None, None])[0]
    assert np.abs(sliding_window_predict(vol, fn, cfg, dtype=np.float64) - ref).max() < 1e-12


def test_small_volume_padded_and_cropped():
    vol = np.random.default_rng(4).normal(size=(5, 8, 3))
    out = sliding_window_predict(vol, identity_model(2), SlidingWindowConfig(patch_extents=[8, 8, 8]))
    assert out.shape == (2, 5, 8, 3)


def test_threads_do_not_change_result():
    vol = np.random.default_rng(5).normal(size=(14, 14, 14))
    cfg1 = SlidingWindowConfig(patch_extents=[8, 8, 8], threads=1)
    cfg3 = SlidingWindowConfig(patch_extents=[8, 8, 8], threads=3)
    fn = identity_model(3)
    assert np.array_equal(sliding_window_predict(vol, fn, cfg1), sliding_window_predict(vol, fn, cfg3))


def test_tta_identity_only_equals_sliding_window():
    vol = np.random.default_rng(6).normal(size=(10, 10, 10))
    cfg = SlidingWindowConfig(patch_extents=[8, 8, 8])
    fn = identity_model(12)
    a = tta_predict(vol, fn, cfg, TtaConfig([()]), SCHEMA)
    assert np.array_equal(a, sliding_window_predict(vol, fn, cfg))


def test_tta_unmirror_plumbing_with_passthrough_model():
    # a per-voxel model commutes with flips, so each pass un-mirrors back to the identity pass
    vol = np.random.default_rng(7).normal(size=(10, 12, 14))
    plain = LabelSchema([ClassInfo(i, str(i)) for i in range(4)])
    cfg = SlidingWindowConfig(patch_extents=[8, 8, 8], normalize=False)
    fn = identity_model(4)
    ref = fn(vol[None, None])[0]
    report = {}
    out = tta_predict(vol, fn, cfg, TtaConfig(axes_subsets((0, 1, 2))), plain, report=report,
                      dtype=np.float64)
    assert np.abs(out - ref).max() < 1e-12
    assert report["passes"] == 8 and report["seconds"] > 0


def test_tta_lr_pass_swaps_channels_back():
    # model whose output is L/R-equivariant only after swapping: it labels the larger-LR half "left"
    s = LabelSchema([ClassInfo(0, "bg"), ClassInfo(1, "l", 2), ClassInfo(2, "r", 1)])

    def sided(x, clicks=None):
        n = x.shape[-1]
        out = np.zeros((1, 3) + x.shape[2:])
        out[:, 1, ..., n // 2:] = 1
        out[:, 2, ..., :n // 2] = 1
        return out

    vol = np.zeros((8, 8, 8))
    cfg = SlidingWindowConfig(patch_extents=[8, 8, 8])
    out = tta_predict(vol, sided, cfg, TtaConfig([(2,)]), s)
    # the mirrored pass, once un-mirrored and swapped, agrees with the identity pass
    assert np.array_equal(out, sliding_window_predict(vol, sided, cfg))


def test_clicks_follow_windows_and_mirrors():
    seen = []

    def spy(x, clicks=None):
        seen.append(list(clicks or []))
        return np.ones((1, 12) + x.shape[2:]) / 12

    vol = np.zeros((16, 8, 8))
    cfg = SlidingWindowConfig(patch_extents=[8, 8, 8], step_fraction=1.0)
    sliding_window_predict(vol, spy, cfg, clicks=[ClickPrompt((10, 1, 2), 3)])
    assert seen == [[], [ClickPrompt((2, 1, 2), 3)]]
    seen.clear()
    tta_predict(vol, spy, cfg, TtaConfig([(2,)]), SCHEMA, clicks=[ClickPrompt((10, 1, 2), 3)])
    assert seen[3] == [ClickPrompt((2, 1, 5), 4)]
