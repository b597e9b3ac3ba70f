import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import CAMERA
from nrfusion.energy import LearnedConstraint, filter_learned
from nrfusion.geometry import RgbdFrame, backproject
from nrfusion.provider import (OCCLUDED_VISIBILITY, FileProvider, HeatmapPrediction, ProviderLookupError,
                               ProviderSpec, SyntheticOracle, compose_heatmap, export_predictions, make_provider,
                               normalize_to_max_one, peak_and_backproject, read_heatmap, write_heatmap)

K = CAMERA


def _frame(frame_id, depth=1.0):
    return RgbdFrame(None, np.full(K.shape, depth), K, frame_id=frame_id)


def _identity_warp(depth=1.0):
    return lambda s, t, px: backproject(np.asarray(px, float), np.full(len(px), depth), K)


def test_prediction_validation():
    with pytest.raises(ValueError):
        HeatmapPrediction(-np.ones((2, 2)), 1.0, 0.5, (0, 0))
    with pytest.raises(ValueError):
        HeatmapPrediction(np.ones((2, 2)), 1.0, 1.5, (0, 0))
    with pytest.raises(ValueError):
        HeatmapPrediction(np.ones((2, 2)), 0.0, 0.5, (0, 0))
    with pytest.raises(ValueError):
        ProviderSpec(kind="file-backed")
    with pytest.raises(ValueError):
        ProviderSpec(kind="cnn")


def test_compose_examples():
    rng = np.random.default_rng(0)
    sm = rng.random((5, 6))
    assert np.array_equal(compose_heatmap(np.ones((5, 6)), sm), sm)
    one_hot = np.zeros((5, 6))
    one_hot[2, 3] = 1.0
    out = compose_heatmap(np.full((5, 6), 0.8), one_hot)
    assert np.count_nonzero(out) == 1 and out[2, 3] == pytest.approx(0.8)
    a, b = rng.random((5, 6)), rng.random((5, 6))
    c = compose_heatmap(a, b)
    for r in range(5):
        for col in range(6):
            assert c[r, col] == a[r, col] * b[r, col]
    assert np.all(c <= np.minimum(a, b))
    with pytest.raises(ValueError):
        compose_heatmap(a, b[:, :5])


def test_peak_examples():
    f = _frame(0)
    one = np.zeros(K.shape)
    one[7, 11] = 1.0
    (u, v), p = peak_and_backproject(HeatmapPrediction(one, 1.0, 1.0, (0, 0)), f)
    assert (u, v) == (11, 7) and np.allclose(p, backproject((11, 7), 1.0, K))
    tie = np.zeros(K.shape)
    tie[3, 9] = tie[3, 2] = tie[10, 0] = 1.0
    assert peak_and_backproject(HeatmapPrediction(tie, 1.0, 1.0, (0, 0)), f)[0] == (2, 3)
    holes = RgbdFrame(None, np.zeros(K.shape), K)
    assert peak_and_backproject(HeatmapPrediction(one, 1.0, 1.0, (0, 0)), holes)[1] is None


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_peak_matches_scan_and_ignores_scaling(seed, scale):
    heat = np.random.default_rng(seed).random((9, 13))
    best, where = -1.0, None
    for r in range(9):
        for c in range(13):
            if heat[r, c] > best:
                best, where = heat[r, c], (c, r)
    small = RgbdFrame(None, np.ones((9, 13)), K.__class__(10.0, 10.0, 6.0, 4.0, 13, 9))
    pred = HeatmapPrediction(heat * scale, 1.0, 1.0, (0, 0))
    assert peak_and_backproject(pred, small)[0] == where
    norm = HeatmapPrediction(normalize_to_max_one(heat * scale), 1.0, 1.0, (0, 0))
    assert peak_and_backproject(norm, small)[0] == where


def test_normalize_examples():
    m = np.array([[0.2, 1.0], [0.5, 0.0]])
    assert np.array_equal(normalize_to_max_one(m), m)
    assert np.allclose(normalize_to_max_one(np.full((3, 3), 0.2)), 1.0)
    r = np.random.default_rng(1).random((4, 4)) * 3
    out = normalize_to_max_one(r)
    assert out.max() == 1.0 and np.allclose(out * r.max(), r)
    with pytest.raises(ValueError):
        normalize_to_max_one(np.zeros((2, 2)))


def test_oracle_identity_warp_peaks_at_query():
    oracle = SyntheticOracle(_identity_warp())
    q = np.array([[10, 5], [40, 30], [0, 0]])
    preds = oracle.predict(_frame(0), _frame(1), q)
    for (u, v), p in zip(q, preds):
        assert peak_and_backproject(p, _frame(1))[0] == (u, v)
        assert p.visibility == 1.0 and p.heatmap.max() == pytest.approx(1.0)
        assert p.depth == pytest.approx(1.0)


def test_oracle_occlusion():
    oracle = SyntheticOracle(_identity_warp(depth=1.2))
    preds = oracle.predict(_frame(0), _frame(1, depth=1.0), [[20, 20]])
    assert preds[0].visibility == OCCLUDED_VISIBILITY < 0.5
    c = LearnedConstraint(0, preds[0].heatmap, np.zeros(3), preds[0].visibility, preds[0].depth)
    assert filter_learned([c], _frame(1).depth) == []


def test_oracle_noise_is_seeded():
    a = SyntheticOracle(_identity_warp(), noise_px=2.0, seed=5).predict(_frame(0), _frame(3), [[20, 20], [30, 9]])
    b = SyntheticOracle(_identity_warp(), noise_px=2.0, seed=5).predict(_frame(0), _frame(3), [[20, 20], [30, 9]])
    c = SyntheticOracle(_identity_warp(), noise_px=2.0, seed=6).predict(_frame(0), _frame(3), [[20, 20], [30, 9]])
    assert all(np.array_equal(x.heatmap, y.heatmap) for x, y in zip(a, b))
    assert not np.array_equal(a[0].heatmap, c[0].heatmap)


def test_oracle_unknown_ground_truth():
    warp = lambda s, t, px: np.full((len(px), 3), np.nan)  # noqa: E731
    pred = SyntheticOracle(warp).predict(_frame(0), _frame(1), [[3, 3]])[0]
    assert pred.visibility == 0.0 and np.all(pred.heatmap > 0)


def test_heatmap_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    preds = [HeatmapPrediction(rng.random(K.shape).astype(np.float32), 1.25, 0.75, (int(u), 7))
             for u in range(3)]
    export_predictions(tmp_path, "0_4", preds)
    export_predictions(tmp_path, "0_5", preds[:1])
    fp = FileProvider(tmp_path)
    got = fp.predict(_frame(0), _frame(4), [[0, 7], [2, 7]])
    assert np.array_equal(got[0].heatmap, preds[0].heatmap) and np.array_equal(got[1].heatmap, preds[2].heatmap)
    assert got[0].depth == 1.25 and got[0].visibility == 0.75
    with pytest.raises(ProviderLookupError, match="0_5"):
        fp.predict(_frame(0), _frame(5), [[1, 7]])
    assert len(fp.predict(_frame(9), _frame(9), [[1, 7]], pair_id="0_4")) == 1


def test_heatmap_resampling_and_bad_magic(tmp_path):
    heat = np.zeros((12, 16), np.float32)
    heat[6, 8] = 1.0
    write_heatmap(tmp_path / "h.ddhm", HeatmapPrediction(heat, 1.0, 1.0, (1, 2)))
    up = read_heatmap(tmp_path / "h.ddhm", (24, 32))
    assert up.heatmap.shape == (24, 32) and up.heatmap.min() >= 0
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ValueError):
        read_heatmap(tmp_path / "bad")


def test_make_provider(tmp_path):
    assert isinstance(make_provider(ProviderSpec(), _identity_warp()), SyntheticOracle)
    with pytest.raises(ValueError):
        make_provider(ProviderSpec())
    export_predictions(tmp_path, "x", [])
    assert isinstance(make_provider(ProviderSpec(kind="file-backed", directory=str(tmp_path))), FileProvider)
