import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mask3d, vol3d
from oracles import gamma_variate as gamma_oracle
from oracles import trapezoid
from perfmap.aif import (
    AifCandidateCluster,
    AifConfig,
    GammaFit,
    auc_map,
    candidate_search,
    cluster_candidates,
    filter_clusters,
    fit_gamma_variate,
    gamma_variate,
    noise_metric,
    score_and_select,
    score_clusters,
    select_aif,
)
from perfmap.bolus_ctc import CtcField, TimeSeries, baseline_s0, compute_ctc, ttp_map
from perfmap.errors import AllClustersRejected, NoCandidates, NoPeak
from perfmap.phantom import default_spec, generate

TRUE = dict(amplitude=5.0, t0=4.0, alpha=3.0, beta=1.5)


def _ctc(curves, onset=1, dt=1.0, mask=None):
    curves = np.asarray(curves, dtype=float)
    if mask is None:
        mask = np.ones(curves.shape[:3], bool)
    return CtcField(curves, onset, mask3d(mask), dt)


# ---------------------------------------------------------------- gamma variate


def test_gamma_variate_matches_oracle_and_peaks_at_amplitude():
    t = np.linspace(0, 30, 301)
    g = gamma_variate(t, **TRUE)
    np.testing.assert_allclose(g, gamma_oracle(t, 5.0, 4.0, 3.0, 1.5), rtol=1e-12, atol=1e-300)
    fit = GammaFit(**TRUE)
    assert fit(np.array([fit.peak_time]))[0] == pytest.approx(5.0, rel=1e-14)
    assert g[t <= 4.0].max() == 0.0
    assert t[np.argmax(g)] == pytest.approx(4.0 + 3.0 * 1.5)


def test_noiseless_parameters_recovered():
    t = np.arange(40.0)
    fit = fit_gamma_variate(TimeSeries(gamma_variate(t, **TRUE), 1.0))
    for key, val in TRUE.items():
        assert getattr(fit, key) == pytest.approx(val, rel=1e-3)
    assert fit.rmse < 1e-6


def test_zero_curve_has_no_peak():
    with pytest.raises(NoPeak):
        fit_gamma_variate(TimeSeries(np.zeros(20), 1.0))


def test_noisy_fit_rmse_tracks_noise_level():
    t = np.arange(40.0)
    clean = gamma_variate(t, **TRUE)
    sigma = 0.05 * TRUE["amplitude"]
    rmses = []
    for seed in range(20):
        noisy = clean + np.random.default_rng(seed).normal(0, sigma, t.size)
        rmses.append(fit_gamma_variate(TimeSeries(noisy, 1.0)).rmse)
    assert 0.5 * sigma <= np.median(rmses) <= 1.5 * sigma


@settings(max_examples=25, deadline=None)
@given(a=st.floats(1.0, 50.0), t0=st.floats(0.0, 8.0), alpha=st.floats(1.5, 5.0),
       beta=st.floats(0.8, 2.5))
def test_fit_is_fixed_point_on_model_output(a, t0, alpha, beta):
    t = np.arange(60.0)
    g = gamma_variate(t, a, t0, alpha, beta)
    fit = fit_gamma_variate(TimeSeries(g, 1.0))
    np.testing.assert_allclose(fit(t), g, atol=1e-4 * a)


# ---------------------------------------------------------------- AUC


def test_auc_zero_curve():
    assert not auc_map(_ctc(np.zeros((1, 1, 1, 5)))).data.any()


def test_auc_hand_trapezoid():
    c = np.array([0.0, 1.0, 0.0]).reshape(1, 1, 1, 3)
    assert auc_map(_ctc(c)).data[0, 0, 0] == 1.0


def test_auc_rectangle():
    c = np.full((1, 1, 1, 12), 2.5)
    assert auc_map(_ctc(c, dt=0.5)).data[0, 0, 0] == pytest.approx(2.5 * 11 * 0.5)


def test_auc_matches_oracle():
    rng = np.random.default_rng(0)
    c = rng.random((2, 2, 1, 9))
    out = auc_map(_ctc(c, dt=1.7)).data
    for idx in np.ndindex(2, 2, 1):
        assert out[idx] == pytest.approx(trapezoid(c[idx], 1.7), rel=1e-12)


# ---------------------------------------------------------------- candidates


def _phantom_ctc(**kw):
    ph_spec = default_spec(**kw)
    ph = generate(ph_spec)
    vol = ph.volume
    s0 = baseline_s0(vol, ph_spec.n_baseline)
    ctc = compute_ctc(vol, s0, ph.mask, ph_spec.n_baseline)
    return ph_spec, ph, ctc, ttp_map(ctc)


def test_vessel_selected_at_first_step():
    spec, ph, ctc, ttp = _phantom_ctc()
    auc = auc_map(ctc)
    cands = candidate_search(ttp, auc, ph.mask, ((5, 95),), min_candidates=50)
    assert cands.count >= 50
    assert not (cands.data & ~spec.arterial).any()


def test_uniform_maps_select_everything_or_nothing():
    m = mask3d(np.ones((5, 5, 4)))
    flat = vol3d(np.ones((5, 5, 4)))
    assert candidate_search(flat, flat, m, min_candidates=50).count == 100
    with pytest.raises(NoCandidates):
        candidate_search(flat, flat, m, min_candidates=101)


def test_empty_mask_no_candidates():
    m = mask3d(np.zeros((3, 3, 3)))
    v = vol3d(np.zeros((3, 3, 3)))
    with pytest.raises(NoCandidates):
        candidate_search(v, v, m)


def test_schedule_relaxes_in_order():
    rng = np.random.default_rng(0)
    ttp = vol3d(rng.random((10, 10, 10)))
    auc = vol3d(rng.random((10, 10, 10)))
    m = mask3d(np.ones((10, 10, 10)))
    sched = ((5, 95), (25, 75))
    strict = candidate_search(ttp, auc, m, sched[:1], min_candidates=1)
    relaxed = candidate_search(ttp, auc, m, sched, min_candidates=strict.count + 1)
    assert (strict.data <= relaxed.data).all() and relaxed.count > strict.count


def test_clusters_sorted_by_size():
    d = np.zeros((12, 12, 12), bool)
    d[0:5, 0:3, 0:2] = True  # 30
    d[8:10, 8:13, 8:9] = True  # 2 x 4 x 1 = 8
    d[8:10, 8:9, 10:11] = True  # separate: 2
    clusters = cluster_candidates(mask3d(d))
    assert [c.size for c in clusters] == [30, 8, 2]


def test_two_blobs_30_and_10():
    d = np.zeros((10, 10, 10), bool)
    d[0:5, 0:3, 0:2] = True
    d[7:9, 7:9, 7:10] = True  # 12
    d[7:9, 7:9, 9] = False  # back to 8
    d[9, 9, 7:9] = True  # 10, still connected
    sizes = [c.size for c in cluster_candidates(mask3d(d))]
    assert sizes == [30, 10]


def test_single_voxel_and_empty():
    d = np.zeros((4, 4, 4), bool)
    assert cluster_candidates(mask3d(d)) == []
    d[1, 2, 3] = True
    clusters = cluster_candidates(mask3d(d))
    assert len(clusters) == 1 and clusters[0].size == 1


def test_diagonal_voxels_are_26_connected():
    d = np.zeros((4, 4, 4), bool)
    d[0, 0, 0] = d[1, 1, 1] = True
    assert len(cluster_candidates(mask3d(d))) == 1


# ---------------------------------------------------------------- filtering


def test_noise_metric_smooth_gamma_small():
    assert noise_metric(gamma_variate(np.arange(40.0), **TRUE)) < 0.1


def test_noise_metric_alternating_closed_form():
    alt = np.array([(-1.0) ** i for i in range(20)])
    assert noise_metric(alt) == pytest.approx(4.0)
    assert noise_metric(3 * alt) == pytest.approx(4.0)


def _cluster_field(curves_by_cluster, sizes):
    """CtcField laying clusters out along x with the given mean curves."""
    total = sum(sizes)
    t = len(curves_by_cluster[0])
    curves = np.zeros((total, 1, 1, t))
    vox, start = [], 0
    for c, n in zip(curves_by_cluster, sizes):
        curves[start : start + n, 0, 0] = c
        vox.append(np.arange(start, start + n))
        start += n
    return _ctc(curves), vox


def test_filter_keeps_smooth_rejects_noisy():
    g = gamma_variate(np.arange(30.0), **TRUE)
    alt = np.array([(-1.0) ** i for i in range(30)])
    ctc, vox = _cluster_field([g, alt], [6, 6])
    kept = filter_clusters(vox, ctc, 5, 2000, 0.5)
    assert len(kept) == 1 and kept[0].voxels[0] == 0
    np.testing.assert_allclose(kept[0].mean_curve.values, g)


def test_filter_size_bounds():
    g = gamma_variate(np.arange(30.0), **TRUE)
    ctc, vox = _cluster_field([g, g, g], [4, 5, 11])
    kept = filter_clusters(vox, ctc, min_size=5, max_size=10)
    assert [c.volume_voxels for c in kept] == [5]


def test_filter_all_rejected():
    g = gamma_variate(np.arange(30.0), **TRUE)
    ctc, vox = _cluster_field([g], [3])
    with pytest.raises(AllClustersRejected):
        filter_clusters(vox, ctc, min_size=5)


# ---------------------------------------------------------------- scoring


def _cluster(size, peak, rmse, first=0):
    curve = np.zeros(10)
    curve[3] = peak
    c = AifCandidateCluster(np.arange(first, first + size), TimeSeries(curve, 1.0))
    c.fit = GammaFit(peak, 1.0, 2.0, 1.0, rmse)
    return c


LIKE = mask3d(np.zeros((10, 10, 10)))


def test_single_cluster_selected():
    res = score_and_select([_cluster(10, 3.0, 0.2)], LIKE)
    assert res.segmentation.count == 10
    assert res.score == 2.0


def test_higher_peak_wins():
    a, b = _cluster(10, 10.0, 0.1, 0), _cluster(10, 5.0, 0.1, 100)
    assert score_and_select([b, a], LIKE).segmentation.data.ravel()[0]


def test_lower_rmse_wins():
    a, b = _cluster(10, 5.0, 0.1, 0), _cluster(10, 5.0, 0.5, 100)
    assert score_and_select([b, a], LIKE).segmentation.data.ravel()[0]


def test_full_tie_broken_by_first_voxel():
    a, b = _cluster(10, 5.0, 0.1, 0), _cluster(10, 5.0, 0.1, 100)
    assert score_and_select([b, a], LIKE).segmentation.data.ravel()[0]


def test_score_formula_by_hand():
    clusters = [_cluster(10, 1.0, 0.3), _cluster(20, 3.0, 0.1), _cluster(40, 2.0, 0.5)]
    s = score_clusters(clusters, (1.0, 2.0, 0.5))
    v = np.array([0, 1 / 3, 1])
    p = np.array([0, 1, 0.5])
    e = np.array([0.5, 0, 1])
    np.testing.assert_allclose(s, v + 2 * p - 0.5 * e)


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.integers(5, 500), min_size=2, max_size=6),
       scale=st.integers(1, 20), offset=st.integers(0, 1000), seed=st.integers(0, 1000))
def test_argmax_invariant_under_affine_volume_rescaling(sizes, scale, offset, seed):
    rng = np.random.default_rng(seed)
    peaks = rng.uniform(1, 10, len(sizes))
    rmses = rng.uniform(0, 1, len(sizes))
    base = [_cluster(s, p, r) for s, p, r in zip(sizes, peaks, rmses)]
    moved = [_cluster(scale * s + offset, p, r) for s, p, r in zip(sizes, peaks, rmses)]
    np.testing.assert_allclose(score_clusters(base), score_clusters(moved), atol=1e-12)
    pick = score_and_select(base, mask3d(np.zeros((10, 10, 100)))).segmentation.count
    pick2 = score_and_select(moved, mask3d(np.zeros((10, 10, 100)))).segmentation.count
    assert sizes.index(pick) == [scale * s + offset for s in sizes].index(pick2)


# ---------------------------------------------------------------- full stage


def test_select_aif_on_phantom():
    spec, ph, ctc, ttp = _phantom_ctc()
    res = select_aif(ctc, ttp)
    seg = res.segmentation.data
    assert seg.any()
    assert not (seg & ~spec.arterial).any()
    assert not (seg & ~res.candidates.data).any()
    assert not (res.candidates.data & ~ph.mask.data).any()
    assert len(res.curve) == ctc.n_frames
    np.testing.assert_allclose(res.curve.values, ph.aif.values, rtol=1e-9, atol=1e-9)
    assert res.peak_time == (int(np.argmax(ph.aif.values)) - spec.n_baseline) * spec.dt


def test_select_aif_deterministic():
    _, _, ctc, ttp = _phantom_ctc(noise_sigma=0.05, seed=3)
    a = select_aif(ctc, ttp)
    b = select_aif(ctc, ttp)
    np.testing.assert_array_equal(a.segmentation.data, b.segmentation.data)
    np.testing.assert_array_equal(a.curve.values, b.curve.values)


def test_use_fitted_curve_option():
    _, _, ctc, ttp = _phantom_ctc()
    res = select_aif(ctc, ttp, AifConfig(use_fitted_curve=True))
    np.testing.assert_array_equal(res.curve.values, res.fitted_curve.values)


def test_aif_config_validation():
    with pytest.raises(ValueError):
        AifConfig(schedule=())
    with pytest.raises(ValueError):
        AifConfig(schedule=((5, 120),))
    with pytest.raises(ValueError):
        AifConfig(min_cluster=10, max_cluster=5)
    with pytest.raises(ValueError):
        AifConfig(weights=(1, 1))
