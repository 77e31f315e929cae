import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsxplain.fusion import (FusionConfig, align, dtw_align, fit_projection, fuse, fuse_heatmaps, minmax_normalize,
                             runs, salient_mask, smooth_moving_average, threshold_regions, upsample_linear)
from tsxplain.saliency import Heatmap

unit_floats = st.floats(0.0, 1.0, allow_nan=False)


def hm(values, source="resnet", **kw):
    v = np.asarray(values, dtype=float)
    return Heatmap(v if v.ndim == 2 else v[:, None], source, **kw)


def brute_dtw_cost(a, b):
    """Minimum |a_i - b_j| path cost by enumerating every monotone path."""
    n, m = len(a), len(b)
    best = np.inf

    def walk(i, j, cost):
        nonlocal best
        cost += abs(a[i] - b[j])
        if (i, j) == (n - 1, m - 1):
            best = min(best, cost)
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, cost)

    walk(0, 0, 0.0)
    return best


def brute_runs(col, gap):
    """Scan run-lengths cell by cell, then merge small gaps."""
    raw, start = [], None
    for t, v in enumerate(list(col) + [False]):
        if v and start is None:
            start = t
        elif not v and start is not None:
            raw.append([start, t - 1])
            start = None
    merged = []
    for r in raw:
        if merged and r[0] - merged[-1][1] - 1 <= gap:
            merged[-1][1] = r[1]
        else:
            merged.append(r)
    return [tuple(r) for r in merged]


# -- upsampling --------------------------------------------------------------------------


def test_upsample_identity_when_lengths_match(rng):
    v = rng.uniform(size=(6, 2))
    np.testing.assert_array_equal(upsample_linear(hm(v), 6).values, v)


def test_upsample_two_to_three():
    np.testing.assert_allclose(upsample_linear(hm([0.0, 1.0]), 3).values[:, 0], [0.0, 0.5, 1.0])


def test_upsample_single_step_repeats():
    np.testing.assert_array_equal(upsample_linear(hm([[0.3, 0.7]]), 4).values, np.tile([0.3, 0.7], (4, 1)))


@settings(max_examples=60, deadline=None)
@given(steps=arrays(np.float64, st.integers(2, 15), elements=unit_floats), target=st.integers(1, 60))
def test_upsample_preserves_monotonicity(steps, target):
    out = upsample_linear(hm(np.cumsum(steps)), target).values[:, 0]
    assert (np.diff(out) >= -1e-12).all()


def test_upsample_rejects_empty_target():
    with pytest.raises(ValueError):
        upsample_linear(hm([0.0, 1.0]), 0)


# -- DTW --------------------------------------------------------------------------------------


def test_dtw_identical_sequences_follow_diagonal():
    a = np.array([0.0, 2.0, 1.0, 3.0])
    warped, path, cost = dtw_align(a, a)
    assert cost == 0.0 and path == [(i, i) for i in range(4)]
    np.testing.assert_array_equal(warped, a)


def test_dtw_collapses_repeated_value():
    warped, path, cost = dtw_align([0.0, 0.0, 1.0], [0.0, 1.0])
    assert cost == 0.0
    assert path == [(0, 0), (1, 0), (2, 1)]
    np.testing.assert_array_equal(warped, [0.0, 1.0])


@settings(max_examples=60, deadline=None)
@given(a=arrays(np.float64, st.integers(1, 5), elements=st.floats(-3, 3)),
       b=arrays(np.float64, st.integers(1, 5), elements=st.floats(-3, 3)))
def test_dtw_cost_matches_exhaustive_paths_and_is_symmetric(a, b):
    _, path, cost = dtw_align(a, b)
    _, path_t, cost_t = dtw_align(b, a)
    assert cost == pytest.approx(brute_dtw_cost(a, b), abs=1e-9)
    assert cost == pytest.approx(cost_t, abs=1e-9)
    assert sum(abs(a[i] - b[j]) for i, j in path) == pytest.approx(cost, abs=1e-9)
    assert sum(abs(b[i] - a[j]) for i, j in path_t) == pytest.approx(cost, abs=1e-9)


def test_dtw_rejects_empty():
    with pytest.raises(ValueError):
        dtw_align([], [1.0])


def test_align_upsamples_onto_transformer_grid(rng):
    hr = hm(rng.uniform(size=(5, 3)))
    ht = hm(rng.uniform(size=(20, 3)), "transformer")
    assert align(hr, ht).shape == (20, 3)
    assert align(hr, ht, use_dtw=True).shape == (20, 3)
    with pytest.raises(ValueError, match="channel"):
        align(hm(np.ones((5, 2))), ht)


# -- fusion laws ------------------------------------------------------------------------------------


def test_weighted_alpha_one_returns_resnet_map(rng):
    a, b = rng.uniform(size=(8, 3)), rng.uniform(size=(8, 3))
    out = fuse(hm(a), hm(b, "transformer"), FusionConfig("weighted", alpha=1.0))
    np.testing.assert_array_equal(out.values, a)


def test_multiplicative_with_ones_returns_resnet_map(rng):
    a = rng.uniform(size=(8, 3))
    out = fuse(hm(a), hm(np.ones((8, 3)), "transformer"), FusionConfig("multiplicative"))
    np.testing.assert_array_equal(out.values, a)


@settings(max_examples=60, deadline=None)
@given(a=arrays(np.float64, (6, 2), elements=unit_floats), b=arrays(np.float64, (6, 2), elements=unit_floats),
       alpha=unit_floats)
def test_multiplicative_zero_annihilates(a, b, alpha):
    a[2, 1] = 0.0
    out = fuse(hm(a), hm(b, "transformer"), FusionConfig("multiplicative", alpha=alpha)).values
    assert out[2, 1] == 0.0
    assert (out >= 0).all()


@settings(max_examples=60, deadline=None)
@given(a=arrays(np.float64, (5, 2), elements=unit_floats), b=arrays(np.float64, (5, 2), elements=unit_floats),
       w=st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1)))
def test_projection_output_is_nonnegative(a, b, w):
    out = fuse(hm(a), hm(b, "transformer"), FusionConfig("concat_project", weights=w)).values
    assert (out >= 0).all()


def test_fusion_config_validation():
    with pytest.raises(ValueError, match="strategy"):
        FusionConfig("max")
    with pytest.raises(ValueError):
        FusionConfig(alpha=1.5)
    with pytest.raises(ValueError):
        FusionConfig(smoothing_window=4)
    with pytest.raises(ValueError):
        FusionConfig("learned", weights=(-0.1, 1.0, 0.0))


def test_fuse_rejects_shape_mismatch_and_negatives():
    with pytest.raises(ValueError, match="shapes"):
        fuse(hm(np.ones((3, 2))), hm(np.ones((4, 2))), FusionConfig())


def test_fit_projection_recovers_known_weights(rng):
    a = [rng.uniform(size=(10, 2)) for _ in range(4)]
    b = [rng.uniform(size=(10, 2)) for _ in range(4)]
    y = [0.3 * x + 0.6 * z + 0.05 for x, z in zip(a, b)]
    for nonneg in (True, False):
        np.testing.assert_allclose(fit_projection(a, b, y, nonneg), (0.3, 0.6, 0.05), atol=1e-8)


def test_fit_projection_learned_weights_stay_nonnegative(rng):
    a = [rng.uniform(size=(10, 2))]
    b = [rng.uniform(size=(10, 2))]
    y = [-a[0] + b[0]]
    wr, wt, _ = fit_projection(a, b, y, nonnegative=True)
    assert wr >= 0 and wt >= 0
    assert fit_projection(a, b, y, nonnegative=False)[0] == pytest.approx(-1.0)


# -- normalisation and smoothing -----------------------------------------------------------------------


def test_minmax_cases():
    np.testing.assert_allclose(minmax_normalize(hm([2.0, 4.0, 3.0])).values[:, 0], [0.0, 1.0, 0.5])
    const = minmax_normalize(hm(np.full((4, 2), 7.0)))
    assert (const.values == 0).all() and const.normalized


@settings(max_examples=60, deadline=None)
@given(v=arrays(np.float64, (7, 3), elements=st.floats(0, 100)))
def test_minmax_range(v):
    out = minmax_normalize(hm(v)).values
    assert out.min() >= 0.0 and out.max() <= 1.0
    if v.max() - v.min() > 1e-9:
        assert out.max() == 1.0 and out.min() == 0.0


def test_smoothing_examples():
    np.testing.assert_array_equal(smooth_moving_average(hm([1.0, 5.0, 2.0]), 1).values[:, 0], [1.0, 5.0, 2.0])
    np.testing.assert_allclose(smooth_moving_average(hm([0.0, 3.0, 0.0]), 3).values[:, 0], [1.5, 1.0, 1.5])


def test_smoothing_impulse_peak_stays_put():
    v = np.zeros(21)
    v[9] = 1.0
    out = smooth_moving_average(hm(v), 5).values[:, 0]
    # a box filter turns the impulse into a plateau centred on it
    assert out[9] == out.max() == pytest.approx(0.2)
    np.testing.assert_array_equal(np.flatnonzero(out), np.arange(7, 12))


def test_smoothing_rejects_bad_windows():
    with pytest.raises(ValueError):
        smooth_moving_average(hm(np.ones(5)), 2)
    with pytest.raises(ValueError, match="exceeds"):
        smooth_moving_average(hm(np.ones(5)), 7)


def test_fuse_heatmaps_chain_is_normalised(rng):
    hr = hm(rng.uniform(size=(10, 3)))
    ht = hm(rng.uniform(size=(40, 3)), "transformer")
    out = fuse_heatmaps(hr, ht, FusionConfig(smoothing_window=3))
    assert out.shape == (40, 3) and out.normalized
    assert out.values.max() == 1.0 and out.values.min() == 0.0


# -- thresholding ----------------------------------------------------------------------------------------


def test_uniform_map_gives_one_region_per_channel():
    regions = threshold_regions(hm(np.full((12, 3), 0.4)), q=0.2)
    assert [(r.channel, r.t_start, r.t_end) for r in regions] == [(c, 0, 11) for c in range(3)]


def test_single_spike_region():
    v = np.zeros((20, 4))
    v[7, 2] = 1.0
    regions = threshold_regions(hm(v), q=0.2)
    assert len(regions) == 1
    r = regions[0]
    assert (r.channel, r.t_start, r.t_end, r.peak_time, r.peak_value) == (2, 7, 7, 7, 1.0)


def test_all_zero_map_has_no_regions():
    assert threshold_regions(hm(np.zeros((10, 2)))) == []


def test_runs_merge_small_gaps():
    m = np.array([1, 1, 0, 0, 1, 0, 0, 0, 1], dtype=bool)
    assert runs(m, gap_merge=2) == [(0, 4), (8, 8)]
    assert runs(m, gap_merge=0) == [(0, 1), (4, 4), (8, 8)]


@settings(max_examples=80, deadline=None)
@given(v=arrays(np.float64, (25, 3), elements=unit_floats), q=st.floats(0.05, 0.95), gap=st.integers(0, 3))
def test_regions_match_run_length_oracle(v, q, gap):
    mask = salient_mask(v, q)
    got = [(r.channel, r.t_start, r.t_end) for r in threshold_regions(hm(v), q, gap)]
    expected = [(c, s, e) for c in range(3) for s, e in brute_runs(mask[:, c], gap)]
    assert got == expected


def test_region_carries_names_and_timestamps():
    v = np.zeros((4, 2))
    v[1:3, 1] = 1.0
    h = hm(v, channel_names=["a", "b"], timestamps=["00:00", "00:10", "00:20", "00:30"])
    (r,) = threshold_regions(h, q=0.5)
    assert r.channel_name == "b" and r.timestamps == ("00:10", "00:20")
    assert r.to_dict()["timestamps"] == ["00:10", "00:20"]


def test_threshold_rejects_bad_quantile():
    for q in (0.0, 1.0):
        with pytest.raises(ValueError):
            threshold_regions(hm(np.ones((3, 1))), q=q)


# -- invariants ----------------------------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(a=arrays(np.float64, (4, 2), elements=unit_floats), b=arrays(np.float64, (4, 2), elements=unit_floats),
       bump=st.floats(0.0, 1.0), cell=st.tuples(st.integers(0, 3), st.integers(0, 1)),
       strategy=st.sampled_from(["multiplicative", "weighted", "learned", "concat_project"]),
       w=st.tuples(st.floats(0, 2), st.floats(0, 2), st.floats(-1, 1)))
def test_fuse_is_pointwise_monotone(a, b, bump, cell, strategy, w):
    cfg = FusionConfig(strategy, alpha=0.7, weights=w)
    base = fuse(hm(a), hm(b, "transformer"), cfg).values
    a2, b2 = a.copy(), b.copy()
    a2[cell] += bump
    b2[cell] += bump
    assert (fuse(hm(a2), hm(b), cfg).values >= base - 1e-15).all()
    assert (fuse(hm(a), hm(b2), cfg).values >= base - 1e-15).all()


@settings(max_examples=60, deadline=None)
@given(v=arrays(np.float64, (15, 2), elements=st.floats(0.01, 1.0)), scale=st.floats(0.1, 10),
       shift=st.floats(0.0, 5.0), q=st.floats(0.05, 0.5))
def test_normalise_then_threshold_ignores_affine_rescaling(v, scale, shift, q):
    def spans(x):
        return [(r.channel, r.t_start, r.t_end) for r in threshold_regions(minmax_normalize(hm(x)), q)]

    # identical up to float rounding in the rescale, so compare on a rounded grid
    v = np.round(v, 3)
    assert spans(v) == spans(np.round(v * scale + shift, 9))


@settings(max_examples=60, deadline=None)
@given(v=arrays(np.float64, st.integers(1, 8), elements=st.floats(-3, 3)),
       reps=st.lists(st.integers(1, 3), min_size=8, max_size=8))
def test_dtw_restepped_sequence_costs_zero(v, reps):
    stretched = np.repeat(v, reps[: len(v)])
    assert dtw_align(stretched, v)[2] == 0.0
    assert dtw_align(v, stretched)[2] == 0.0


def test_dtw_different_values_cost_positive():
    assert dtw_align([0.0, 1.0], [0.0, 2.0])[2] > 0


@settings(max_examples=60, deadline=None)
@given(v=arrays(np.float64, (12, 2), elements=st.floats(0, 10)), window=st.sampled_from([1, 3, 5, 7]))
def test_smoothing_stays_within_input_range(v, window):
    out = smooth_moving_average(hm(v), window).values
    assert out.min() >= v.min() - 1e-12 and out.max() <= v.max() + 1e-12


@settings(max_examples=60, deadline=None)
@given(v=arrays(np.float64, (9, 3), elements=st.floats(0, 10)))
def test_minmax_preserves_argmax(v):
    out = minmax_normalize(hm(v)).values
    if v.max() - v.min() > 1e-9:
        assert v.flat[out.argmax()] == v.max()


def test_minmax_examples_from_contract():
    np.testing.assert_allclose(minmax_normalize(hm([2.0, 4.0, 6.0])).values[:, 0], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(minmax_normalize(hm([5.0, 5.0])).values[:, 0], [0.0, 0.0])
