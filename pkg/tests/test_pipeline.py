import numpy as np
import pytest

from nrfusion.energy import SparseMatch
from nrfusion.geometry import RgbdFrame, backproject
from nrfusion.graph import DeformationGraph, rotation_exp
from nrfusion.pipeline import (AlignmentConfig, PairAlignment, PipelineError, ReconstructionConfig,
                               align_pair, deformation_weights, forward_backward_interpolate, procrustes,
                               read_dense_matches, reconstruct_sequence, write_dense_matches,
                               write_sequence_result)
from nrfusion.provider import HeatmapPrediction, ProviderLookupError, SyntheticOracle
from nrfusion.render import rasterize
from nrfusion.solver import SolverConfig
from nrfusion.synth import SceneSpec, SyntheticScene


def _scene(frames=4, **kw):
    kw.setdefault("bend_deg", 0.0)
    kw.setdefault("twist_deg", 0.0)
    spec = SceneSpec.preset("bending-cylinder", frames=frames, width=128, height=96, fx=200.0, fy=200.0, **kw)
    scene = SyntheticScene(spec)
    return scene, [scene.frame(i) for i in range(frames)]


FAST = ReconstructionConfig(voxel_size=0.01, solver=SolverConfig(gn_iterations=3))


def test_static_scene_stays_put():
    scene, frames = _scene()
    res = reconstruct_sequence(frames, frames[0].mask, SyntheticOracle(scene.ground_truth_warp()), config=FAST)
    assert res.num_frames == 4 and len(res.warped) == 4
    for g in res.graphs[1:]:
        assert np.max(np.abs(g.translations)) < 1e-3
    assert not res.canonical.is_empty
    assert all(c > 0 for c in res.constraint_counts[1:])


class _Blind:
    """Provider that sees nothing: every query comes back invisible."""

    def predict(self, source, target, queries, pair_id=None):
        h, w = target.intrinsics.shape
        return [HeatmapPrediction(np.ones((h, w)), 1.0, 0.0, (int(q[0]), int(q[1]))) for q in queries]


class _Missing:
    def predict(self, source, target, queries, pair_id=None):
        raise ProviderLookupError(f"no heatmap for pair {pair_id!r}")


def test_zero_visibility_provider_still_runs():
    _, frames = _scene()
    res = reconstruct_sequence(frames, frames[0].mask, _Blind(), config=FAST)
    assert res.constraint_counts == [0, 0, 0, 0]
    # ICP alone against a coarse fused surface settles within a few millimetres
    assert all(np.all(np.isfinite(g.params)) for g in res.graphs)
    assert np.max(np.abs(res.graphs[-1].translations)) < 5e-3


def test_lookup_failure_and_bad_inputs():
    _, frames = _scene()
    with pytest.raises(PipelineError) as err:
        reconstruct_sequence(frames, frames[0].mask, _Missing(), config=FAST)
    assert err.value.frame == 1
    with pytest.raises(ValueError):
        reconstruct_sequence(frames[:1], frames[0].mask, _Blind(), config=FAST)
    with pytest.raises(ValueError):
        reconstruct_sequence(frames, np.zeros_like(frames[0].mask), _Blind(), config=FAST)
    with pytest.raises(ValueError):
        ReconstructionConfig(voxel_size=0.0)


def test_write_sequence_result(tmp_path):
    _, frames = _scene()
    res = reconstruct_sequence(frames, frames[0].mask, _Blind(), config=FAST)
    out = write_sequence_result(res, tmp_path)
    assert len(list((out / "graphs").glob("*.json"))) == 4
    assert len(list((out / "meshes").glob("*.ply"))) == 4
    assert (out / "canonical.ply").exists() and (out / "trace.csv").exists()


def test_align_identical_frames_is_identity():
    _, frames = _scene(frames=2)
    f = frames[0]
    cfg = AlignmentConfig(solver=SolverConfig(gn_iterations=5))
    fwd = align_pair(f, f, config=cfg)
    bwd = align_pair(f, f, config=cfg)
    for a in (fwd, bwd):
        assert a.valid.all()
        assert np.max(np.linalg.norm(a.matches - a.source_points, axis=1)) < 1e-3
    fb = forward_backward_interpolate(fwd, bwd)
    assert fb.valid.all() and np.max(np.abs(fb.matches - fb.source_points)) < 1e-3
    with pytest.raises(ValueError):
        align_pair(f.with_mask(np.zeros_like(f.mask)), f, config=cfg)


def test_align_pair_recovers_translation_with_sparse_matches():
    _, frames = _scene(frames=2)
    f = frames[0]
    shift = np.array([0.01, 0.0, 0.0])
    moved = _shifted(f, shift)
    vs, us = np.nonzero(f.mask)
    pick = np.linspace(0, len(us) - 1, 20).astype(int)
    src = [backproject((us[i], vs[i]), f.depth[vs[i], us[i]], f.intrinsics) for i in pick]
    matches = [SparseMatch(s, s + shift) for s in src]
    a = align_pair(f, moved, matches, config=AlignmentConfig(solver=SolverConfig(gn_iterations=10)))
    err = np.linalg.norm(a.matches[a.valid] - (a.source_points[a.valid] + shift), axis=1)
    assert np.median(err) < 0.003


def _shifted(frame, shift):
    """Re-render a frame of the scene translated by ``shift`` (camera space)."""
    scene, _ = _scene(frames=2)
    v = scene.vertices(0) + shift
    buf = rasterize(v, scene.template.triangles, scene.spec.intrinsics)
    return RgbdFrame(scene._shade(buf), buf.depth, scene.spec.intrinsics, buf.mask, frame_id=1)


def _alignment(points, graph, matches=None, valid=None):
    n = len(points)
    matches = graph_warp(graph, points) if matches is None else matches
    return PairAlignment(np.zeros((n, 2), np.int64), points, matches,
                         np.ones(n, bool) if valid is None else valid, graph)


def graph_warp(graph, points):
    return PairAlignment(np.zeros((len(points), 2), np.int64), points, points, np.ones(len(points), bool),
                         graph).warp(points)


def _rigid_graph(theta, t):
    return DeformationGraph([[0, 0, 1.0]], [theta], [t], np.zeros((0, 2), int), 0.1)


def test_forward_backward_rules():
    rng = np.random.default_rng(0)
    pts = rng.normal([0, 0, 1.0], 0.03, (30, 3))
    fwd_g = _rigid_graph([0, 0.1, 0], [0.02, 0, 0])
    exact = graph_warp(fwd_g, pts)
    # W(p) = R (p - g) + g + t, so W^-1 has node g + t, rotation -theta and translation -t
    inv = DeformationGraph([[0.02, 0, 1.0]], [[0, -0.1, 0]], [[-0.02, 0, 0]], np.zeros((0, 2), int), 0.1)
    assert np.allclose(graph_warp(inv, exact), pts, atol=1e-12)
    fb = forward_backward_interpolate(_alignment(pts, fwd_g), _alignment(exact, inv))
    assert fb.valid.all() and np.allclose(fb.matches, exact, atol=1e-8)

    # midpoint rule: forward matches off by 1 cm blend halfway back
    off = exact + [0, 0.01, 0]
    fb = forward_backward_interpolate(_alignment(pts, fwd_g, off), _alignment(exact, inv))
    assert fb.valid.all() and np.allclose(fb.matches, exact + [0, 0.005, 0], atol=1e-8)

    # a 5 cm cycle error invalidates
    far = exact.copy()
    far[3] += [0.05, 0, 0]
    fb = forward_backward_interpolate(_alignment(pts, fwd_g, far), _alignment(exact, inv))
    assert not fb.valid[3] and np.all(np.isnan(fb.matches[3])) and fb.valid.sum() == 29

    # invalid in, invalid out
    valid = np.ones(30, bool)
    valid[7] = False
    fb = forward_backward_interpolate(_alignment(pts, fwd_g, exact, valid), _alignment(exact, inv))
    assert not fb.valid[7] and fb.valid.sum() == 29


def test_dense_match_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    n = 25
    valid = rng.random(n) > 0.3
    m = rng.normal(0, 1, (n, 3))
    a = PairAlignment(rng.integers(0, 640, (n, 2)), m, m, valid)
    write_dense_matches(tmp_path / "m.bin", a)
    px, got, ok = read_dense_matches(tmp_path / "m.bin")
    assert np.array_equal(px, a.source_pixels) and np.array_equal(ok, valid)
    assert np.allclose(got[valid], m[valid].astype(np.float32), rtol=0, atol=0)
    assert not got[~valid].any()


def test_procrustes_and_deformation_weights():
    rng = np.random.default_rng(2)
    R = rotation_exp(rng.normal(0, 0.5, 3))
    t = rng.normal(0, 0.1, 3)
    s = rng.normal(0, 0.1, (12, 3))
    Rf, tf = procrustes(s, s @ R.T + t)
    assert np.allclose(Rf, R, atol=1e-10) and np.allclose(tf, t, atol=1e-10)

    rigid = [SparseMatch(p, p + [0.05, 0, 0]) for p in s]
    fit = deformation_weights(rigid)
    assert fit.inliers.all() and np.allclose(fit.weights, 1 / 12)
    assert fit.weights.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        deformation_weights(rigid[:2])
