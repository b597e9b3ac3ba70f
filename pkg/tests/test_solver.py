import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from helpers import gradient_problem, random_graph
from nrfusion.energy import ArapTerm, EnergyWeights, SparseMatch, SparseTerm, assemble
from nrfusion.graph import DeformationGraph
from nrfusion.solver import (LinearSystem, SolverConfig, SolverError, apply_normal_matrix, gauss_newton, pcg,
                             pcg_solve, write_trace)


def _system(rng, n, m=None, damping=1e-3, threads=1):
    m = m or 2 * n
    J = sparse.csr_matrix(rng.standard_normal((m, n)))
    return LinearSystem(J, rng.standard_normal(m), damping, threads)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(gn_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(pcg_tolerance=0.0)
    with pytest.raises(ValueError):
        SolverConfig(damping=-1.0)
    with pytest.raises(ValueError):
        LinearSystem(sparse.eye(3), np.zeros(2))


def test_pcg_examples():
    b = np.array([1.0, -2.0, 3.0])
    res = pcg(lambda x: x, np.ones(3), b, 20, 1e-10)
    assert res.iterations == 1 and np.allclose(res.x, b)
    assert not pcg(lambda x: x, np.ones(3), np.zeros(3), 20, 1e-10).x.any()

    rng = np.random.default_rng(0)
    A = rng.standard_normal((30, 30))
    A = A @ A.T + 30 * np.eye(30)
    b = rng.standard_normal(30)
    res = pcg(lambda x: A @ x, np.diag(A), b, 200, 1e-10)
    assert np.allclose(res.x, np.linalg.solve(A, b), rtol=1e-6, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 20))
def test_pcg_converges_within_n_iterations(seed, n):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = Q @ np.diag(rng.uniform(1.0, 4.0, n)) @ Q.T
    b = rng.standard_normal(n)
    res = pcg(lambda x: A @ x, np.diag(A), b, n, 1e-10)
    assert np.allclose(A @ res.x, b, atol=1e-8)


def test_apply_normal_matrix_examples():
    rng = np.random.default_rng(1)
    s = _system(rng, 5)
    assert not apply_normal_matrix(s, np.zeros(5)).any()
    zero = LinearSystem(sparse.csr_matrix((4, 3)), np.zeros(4), damping=0.5)
    x = np.array([1.0, 2.0, -3.0])
    assert np.allclose(apply_normal_matrix(zero, x), 0.5 * x)
    for _ in range(10):
        g = random_graph(rng, 5)
        J = ArapTerm(g).evaluate(g)[0].jacobian
        sys_ = LinearSystem(J, np.zeros(J.shape[0]), 1e-6)
        x = rng.standard_normal(30)
        dense = (J.T @ J).toarray() + 1e-6 * np.eye(30)
        assert np.allclose(apply_normal_matrix(sys_, x), dense @ x, rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_apply_normal_matrix_symmetric_and_linear(seed):
    rng = np.random.default_rng(seed)
    s = _system(rng, 12)
    x, y = rng.standard_normal(12), rng.standard_normal(12)
    Ax, Ay = apply_normal_matrix(s, x), apply_normal_matrix(s, y)
    assert abs(x @ Ay - y @ Ax) <= 1e-10 * max(1.0, abs(x @ Ay))
    assert np.allclose(apply_normal_matrix(s, 2 * x + y), 2 * Ax + Ay, rtol=1e-10, atol=1e-10)


def test_threaded_reduction_is_deterministic():
    rng = np.random.default_rng(2)
    s = _system(rng, 40, m=500, threads=4)
    x = rng.standard_normal(40)
    first = apply_normal_matrix(s, x)
    assert all(np.array_equal(first, apply_normal_matrix(s, x)) for _ in range(5))
    serial = apply_normal_matrix(s, x, threads=1)
    assert np.allclose(first, serial, rtol=1e-8)
    d1 = pcg_solve(s).x
    assert np.array_equal(d1, pcg_solve(s).x)


def test_gauss_newton_zero_residual_start():
    g = random_graph(np.random.default_rng(0), 4)
    g = g.with_params(np.zeros(g.num_params))
    res = gauss_newton(assemble([ArapTerm(g)], EnergyWeights()), g, SolverConfig(gn_iterations=3))
    assert np.array_equal(res.graph.params, g.params)
    assert res.energies == [0.0, 0.0, 0.0, 0.0]


def test_gauss_newton_single_sparse_match():
    s = np.array([0.0, 0.0, 1.0])
    g = DeformationGraph([s], np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((0, 2), int), 0.05)
    term = SparseTerm(g, [SparseMatch(s, s + [0.05, 0, 0])])
    res = gauss_newton(assemble([term], EnergyWeights(lambda_sparse=1.0)), g, SolverConfig(gn_iterations=3))
    assert np.allclose(res.graph.translations[0], [0.05, 0, 0], atol=1e-6)
    assert res.final_energy < 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gauss_newton_never_increases_energy(seed):
    g, terms = gradient_problem(seed)
    start = g.with_params(np.random.default_rng(seed).normal(0, 0.2, g.num_params))
    w = EnergyWeights(lambda_sparse=1.0, lambda_silh=1e-3, lambda_photo=1e-2)
    spec = assemble([terms["arap"], terms["sparse"], terms["learned"], terms["silhouette"]], w)
    res = gauss_newton(spec, start, SolverConfig(gn_iterations=5))
    e = res.energies
    assert e[-1] <= e[0]
    assert all(b <= a for a, b in zip(e, e[1:]))


def test_gauss_newton_rejects_non_finite_start():
    s = np.array([0.0, 0.0, 1.0])
    g = DeformationGraph([s], [[np.nan, 0, 0]], np.zeros((1, 3)), np.zeros((0, 2), int), 0.05)
    term = SparseTerm(g, [SparseMatch(s, s)])
    with pytest.raises(SolverError):
        gauss_newton(assemble([term], EnergyWeights(lambda_sparse=1.0)), g)


def test_trace_csv(tmp_path):
    s = np.array([0.0, 0.0, 1.0])
    g = DeformationGraph([s], np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((0, 2), int), 0.05)
    spec = assemble([SparseTerm(g, [SparseMatch(s, s + 0.01)])], EnergyWeights(lambda_sparse=1.0))
    res = gauss_newton(spec, g, SolverConfig(gn_iterations=2))
    path = tmp_path / "trace.csv"
    write_trace(path, res.log, frame=3)
    write_trace(path, res.log, frame=4, append=True)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("frame,gn_iter,E_total,E_icp_plane")
    assert len(lines) == 5 and lines[3].startswith("4,0,")
