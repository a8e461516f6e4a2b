from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insitu_wfs.basis import make_basis
from insitu_wfs.interferometry import measure, reconstruct_full
from insitu_wfs.optics import DetectorModel, GlassSlide, make_bench
from insitu_wfs.solver import (
    SensingProblem,
    SolverOptions,
    SparsifyingBasis,
    basis_pursuit,
    cs_reconstruct,
    dct_forward,
    dct_inverse,
    project_l1_ball,
)


@dataclass
class DenseProblem:
    A: np.ndarray
    b: np.ndarray
    sigma: float = 0.0

    @property
    def n(self):
        return self.A.shape[1]

    def apply(self, s):
        return self.A @ s

    def adjoint(self, r):
        return self.A.T @ r


def planted(seed=0, m=64, n=256, k=8):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, n)) / np.sqrt(m)
    s = np.zeros(n)
    s[rng.choice(n, k, replace=False)] = rng.choice([-1.0, 1.0], k)
    return a, s


# ---------------------------------------------------------------- DCT


def test_dct_roundtrip_and_parseval():
    x = np.random.default_rng(0).standard_normal(256)
    s = dct_forward(x)
    assert np.allclose(dct_inverse(s), x, rtol=0, atol=1e-10 * np.abs(x).max())
    assert np.linalg.norm(s) == pytest.approx(np.linalg.norm(x), rel=1e-10)


def test_dct_dc_atom():
    s = dct_forward(np.full(64, 3.0))
    assert s[0] == pytest.approx(3.0 * 8)
    assert np.allclose(s[1:], 0, atol=1e-12)


@pytest.mark.parametrize("two_d", [False, True])
def test_sparsifying_basis_orthonormal(two_d):
    psi = SparsifyingBasis(64, two_d)
    mat = psi.inverse(np.eye(64))
    assert np.allclose(mat.T @ mat, np.eye(64), atol=1e-12)
    x = np.random.default_rng(1).standard_normal(64)
    assert np.allclose(psi.inverse(psi.forward(x)), x, atol=1e-12)


# ---------------------------------------------------------------- projection


def test_project_example():
    assert np.allclose(project_l1_ball(np.array([3.0, 1.0]), 2.0), [2.0, 0.0])


def test_project_inside_ball_unchanged():
    v = np.array([0.5, -0.25, 0.1])
    assert np.array_equal(project_l1_ball(v, 1.0), v)
    assert not project_l1_ball(v, 0.0).any()
    with pytest.raises(ValueError):
        project_l1_ball(v, -1.0)


@pytest.mark.parametrize("seed", range(4))
def test_project_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-2, 2, 3)
    tau = float(rng.uniform(0.2, 0.9) * np.abs(v).sum())
    h = tau / 40
    axis = np.arange(-tau, tau + h / 2, h)
    g = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    g = g[np.abs(g).sum(1) <= tau + 1e-12]
    d = np.linalg.norm(g - v, axis=1)
    w_grid = g[np.argmin(d)]
    w = project_l1_ball(v, tau)
    assert np.abs(w).sum() <= tau * (1 + 1e-12)
    assert np.linalg.norm(w - v) <= d.min() + 1e-12
    assert np.linalg.norm(w - w_grid) <= h * np.sqrt(3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(0, 200))
def test_project_feasible_and_optimal(values, tau):
    v = np.array(values)
    w = project_l1_ball(v, tau)
    assert np.abs(w).sum() <= tau * (1 + 1e-12) + 1e-12
    # optimality: v - w is in the normal cone, i.e. equal to theta * sign(w) on the support
    if np.abs(v).sum() > tau and tau > 0:
        diff = (v - w)[w != 0]
        if diff.size:
            theta = np.abs(diff)
            assert np.allclose(theta, theta[0], atol=1e-9 * max(1, np.abs(v).max()))
            assert np.all(np.abs(v[w == 0]) <= theta[0] + 1e-9 * max(1, np.abs(v).max()))


# ---------------------------------------------------------------- operator


@pytest.mark.parametrize("ordering,cr,two_d", [("natural", 0.3, False), ("walsh", 0.1, False),
                                               ("cake", 0.5, True), ("random:4", 1.0, False)])
def test_adjoint_dot_product(ordering, cr, two_d):
    basis = make_basis(256, "hadamard", ordering)
    m = int(round(cr * 256))
    prob = SensingProblem(basis, m, np.zeros(m), psi=SparsifyingBasis(256, two_d))
    assert prob.dot_test(trials=20) < 1e-8


def test_operator_matches_dense():
    basis = make_basis(64, "hadamard", "walsh")
    prob = SensingProblem(basis, 20, np.zeros(20))
    psi = dct_inverse(np.eye(64))  # column j is the j-th DCT atom
    theta = (basis.dense() @ psi.T)[:20]
    s = np.random.default_rng(3).standard_normal(64)
    assert np.allclose(prob.apply(s), theta @ s)


def test_problem_validation():
    basis = make_basis(16, "hadamard")
    with pytest.raises(ValueError):
        SensingProblem(basis, 0, np.zeros(0))
    with pytest.raises(ValueError):
        SensingProblem(basis, 4, np.zeros(5))
    with pytest.raises(ValueError):
        SensingProblem(basis, 4, np.zeros(4), sigma=-1)


# ---------------------------------------------------------------- basis pursuit


def test_identity_sparse():
    b = np.zeros(50)
    b[[1, 5, 9, 20, 33]] = [3, -1, 2, 5, -4]
    res = basis_pursuit(DenseProblem(np.eye(50), b))
    assert res.converged
    assert np.allclose(res.s, b, atol=1e-6)


def test_small_lp():
    res = basis_pursuit(DenseProblem(np.array([[1.0, 0, 1], [0, 1, 1]]), np.array([1.0, 1.0])))
    assert res.converged
    assert np.allclose(res.s, [0, 0, 1], atol=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_recovery(seed):
    a, s = planted(seed)
    res = basis_pursuit(DenseProblem(a, a @ s))
    assert res.converged
    assert np.abs(res.s - s).max() < 1e-4
    support = np.abs(res.s) > 0.5
    assert np.array_equal(support, s != 0)
    assert np.array_equal(np.sign(res.s[support]), s[s != 0])


def test_pareto_residuals_non_increasing():
    a, s = planted(5)
    res = basis_pursuit(DenseProblem(a, a @ s))
    taus = [t for _, t, _ in res.pareto_path]
    resid = [r for _, _, r in res.pareto_path]
    assert np.all(np.diff(taus) >= 0)
    assert np.all(np.diff(resid) <= 1e-12)


def test_trivial_when_sigma_exceeds_data():
    a, s = planted(1)
    b = a @ s
    res = basis_pursuit(DenseProblem(a, b, sigma=2 * np.linalg.norm(b)))
    assert res.converged and not res.s.any() and res.iterations == 0


def test_denoise_feasible():
    a, s = planted(2)
    rng = np.random.default_rng(9)
    b = a @ s + 0.01 * rng.standard_normal(64)
    sigma = 0.01 * np.sqrt(64)
    opts = SolverOptions()
    res = basis_pursuit(DenseProblem(a, b, sigma), opts)
    assert res.converged
    assert np.linalg.norm(a @ res.s - b) <= sigma * (1 + opts.pareto_tol)
    assert np.abs(res.s).sum() <= np.abs(s).sum() * 1.05


def test_non_convergence_is_flagged():
    a, s = planted(3)
    res = basis_pursuit(DenseProblem(a, a @ s), SolverOptions(max_iters=2))
    assert not res.converged
    assert "limit" in res.message
    assert res.diagnostics()["iterations"] == 2


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(opt_tol=0)
    with pytest.raises(ValueError):
        SolverOptions(max_iters=0)
    assert SolverOptions().iteration_cap(256) == 2560


def test_hadamard_dct_sparse_recovery():
    basis = make_basis(1024, "hadamard", "walsh")
    s = np.zeros(1024)
    s[[0, 3, 10, 40]] = [4.0, -2.0, 1.0, 0.5]
    x = dct_inverse(s)
    m = 100
    res = basis_pursuit(SensingProblem(basis, m, basis.apply(x)[:m]))
    assert res.converged
    assert np.allclose(res.s, s, atol=1e-4)


# ---------------------------------------------------------------- reconstruction


@pytest.fixture(scope="module")
def glass_igrams():
    bench = make_bench(512, GlassSlide(), DetectorModel().ideal())
    nat = make_basis(64, "hadamard")
    return bench, measure(bench, nat)


def test_cs_full_sampling_matches_full(glass_igrams):
    _, ig = glass_igrams
    for order in ("natural", "walsh"):
        basis = make_basis(64, "hadamard", order)
        rec = cs_reconstruct(ig.reorder(basis), basis, 1.0)
        assert rec.converged and rec.m == 64
        assert rec.field.correlation(reconstruct_full(basis, ig)) >= 0.999


def test_cs_accepts_unordered_set(glass_igrams):
    _, ig = glass_igrams
    basis = make_basis(64, "hadamard", "cake")
    a = cs_reconstruct(ig, basis, 0.5)
    b = cs_reconstruct(ig.reorder(basis), basis, 0.5)
    assert np.array_equal(a.field.values, b.field.values)


def test_cs_errors(glass_igrams):
    _, ig = glass_igrams
    with pytest.raises(ValueError):
        cs_reconstruct(ig, make_basis(64, "canonical"), 0.5)
    with pytest.raises(ValueError):
        cs_reconstruct(ig, make_basis(64, "hadamard"), 0.0)
    with pytest.raises(ValueError):
        cs_reconstruct(ig, make_basis(64, "hadamard"), 0.001)
    with pytest.raises(ValueError):
        cs_reconstruct(ig, make_basis(256, "hadamard"), 0.5)


def test_cs_diagnostics_shape(glass_igrams):
    _, ig = glass_igrams
    basis = make_basis(64, "hadamard", "walsh")
    d = cs_reconstruct(ig.reorder(basis), basis, 0.25).diagnostics()
    assert d["m"] == 16 and len(d["shifts"]) == 3
    assert all("pareto_path" in s for s in d["shifts"])
