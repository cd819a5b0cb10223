import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from surfglm.linalg import NotPositiveDefiniteError, factorize, log_det, read_triplets, write_triplets
from surfglm.mesh import build_fem_matrices
from surfglm.simulate import grid_mesh, icosphere
from surfglm.spde import (Hyperparameters, SpdeOperator, build_precision, build_qtilde, marginal_variance,
                          sample_gaussian_field, tau2_from_phi)


@pytest.fixture(scope="module")
def fem():
    return build_fem_matrices(grid_mesh(7, 7, 1.0))


def test_qtilde_at_one(fem):
    Q = build_qtilde(1.0, fem)
    ref = fem.C + 2 * fem.G + fem.GCinvG
    assert abs(Q - ref).max() < 1e-14


@pytest.mark.parametrize("k2", [1e-3, 1.0, 1e3])
@pytest.mark.parametrize("mesh", [grid_mesh(7, 7, 1.0), icosphere(1, 3.0)], ids=["grid", "sphere"])
def test_qtilde_spd_and_logdet(mesh, k2):
    f = build_fem_matrices(mesh)
    Q = build_qtilde(k2, f).toarray()
    ev = np.linalg.eigvalsh(Q)
    assert ev.min() > 0
    assert log_det(sp.csc_matrix(Q)) == pytest.approx(np.sum(np.log(ev)), rel=1e-9)
    # memoized identity through kappa2 C + G
    assert SpdeOperator(f).logdet_qtilde(k2) == pytest.approx(np.sum(np.log(ev)), rel=1e-9)


def test_qtilde_null_space_and_pattern(fem):
    one = np.ones(fem.n)
    patterns = set()
    for k2 in (0.01, 0.7, 30.0):
        Q = build_qtilde(k2, fem)
        assert np.allclose(Q @ one, k2 * fem.c_diag, atol=1e-12)
        patterns.add((tuple(Q.indptr), tuple(Q.indices)))
    assert len(patterns) == 1


def test_qtilde_rejects_nonpositive(fem):
    with pytest.raises(ValueError):
        build_qtilde(0.0, fem)
    with pytest.raises(ValueError):
        build_precision((1.0, -1.0), fem)


def test_precision_scaling(fem):
    Qt = build_qtilde(0.3, fem)
    P = build_precision((0.3, 1 / (4 * np.pi)), fem)
    assert abs(P.matrix() - Qt).max() < 1e-14
    for phi in (0.2, 3.0):
        Q = build_precision((0.3, phi), fem).matrix()
        assert abs(Q - Qt / (4 * np.pi * phi)).max() <= 1e-14 * abs(Qt).max()
    a = build_precision((0.3, 1.0), fem).matrix()
    b = build_precision((0.3, 2.0), fem).matrix()
    assert abs(2 * b - a).max() < 1e-15


def test_precision_logdet(fem):
    P = build_precision((0.5, 0.7), fem)
    ref = np.linalg.slogdet(P.matrix().toarray())[1]
    assert P.log_det() == pytest.approx(ref, rel=1e-10)


def test_marginal_variance_interior():
    # 50-ish vertex mesh with range well inside it: interior variance close to phi
    m = grid_mesh(8, 8, 1.0)
    f = build_fem_matrices(m)
    k2, phi = 2.0, 0.8
    S = np.linalg.inv(build_precision((k2, phi), f).matrix().toarray())
    xy = m.vertices[:, :2]
    interior = np.all((xy >= 2.5) & (xy <= 4.5), axis=1)
    assert interior.sum() >= 4
    assert np.all(np.abs(np.diag(S)[interior] / phi - 1) < 0.25)


def test_logdet_examples():
    assert log_det(sp.identity(5, format="csc")) == pytest.approx(0.0, abs=1e-15)
    assert log_det(sp.diags([2.0, 2.0, 2.0], format="csc")) == pytest.approx(3 * np.log(2), abs=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_logdet_random_spd(seed):
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((20, 20))
    A = R @ R.T / 20 + 0.1 * np.eye(20)
    assert log_det(sp.csc_matrix(A)) == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(A))), rel=1e-9, abs=1e-9)


def test_factorization_rejects_indefinite():
    A = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotPositiveDefiniteError):
        factorize(A)


@pytest.mark.parametrize("backend", ["cholmod", "superlu"])
def test_backends_agree(fem, backend):
    pytest.importorskip("sksparse") if backend == "cholmod" else None
    Q = build_qtilde(0.4, fem)
    fac = factorize(Q, backend=backend)
    b = np.arange(fem.n, dtype=float)
    assert np.allclose(Q @ fac.solve(b), b, atol=1e-10)
    assert fac.logdet() == pytest.approx(np.linalg.slogdet(Q.toarray())[1], rel=1e-10)
    # solve_lt gives x with x x' averaging to Q^-1: check L^-T structure via x'Qx = z'z
    z = np.random.default_rng(1).standard_normal(fem.n)
    x = fac.solve_lt(z)
    assert x @ (Q @ x) == pytest.approx(z @ z, rel=1e-10)


def test_triplets_round_trip(tmp_path, fem):
    p = tmp_path / "q.txt"
    write_triplets(p, fem.GCinvG)
    assert abs(read_triplets(p) - fem.GCinvG).max() == 0


def test_sampling_identity_covariance():
    x = sample_gaussian_field(sp.identity(4, format="csc"), np.zeros(4), seed=5, count=100_000)
    assert np.abs(np.cov(x.T) - np.eye(4)).max() < 0.05


def test_sampling_precision_recovered():
    rng = np.random.default_rng(0)
    R = rng.standard_normal((10, 10))
    Q = R @ R.T / 10 + np.eye(10)
    x = sample_gaussian_field(sp.csc_matrix(Q), np.zeros(10), seed=1, count=100_000)
    Qhat = np.linalg.inv(np.cov(x.T))
    assert np.linalg.norm(Qhat - Q, 2) / np.linalg.norm(Q, 2) < 0.05


def test_sampling_determinism_and_mean(fem):
    Q = build_precision((0.5, 1.0), fem)
    a = sample_gaussian_field(Q, 3.0, seed=11, count=4000)
    b = sample_gaussian_field(Q, 3.0, seed=11, count=4000)
    assert np.array_equal(a, b)
    assert abs(a.mean() - 3.0) < 0.1
    with pytest.raises(ValueError):
        sample_gaussian_field(Q, np.full(fem.n, np.nan), seed=0)


def test_marginal_variance_mapping():
    assert marginal_variance(1.0, 1 / (4 * np.pi)) == pytest.approx(1.0)
    for c in (0.1, 3.0, 50.0):
        assert marginal_variance(2.0 * c, 0.3 / c) == pytest.approx(marginal_variance(2.0, 0.3), rel=1e-14)
    assert tau2_from_phi(0.7, marginal_variance(0.7, 0.123)) == pytest.approx(0.123, rel=1e-12)
    with pytest.raises(ValueError):
        marginal_variance(0.0, 1.0)


def test_hyperparameters_vector_round_trip():
    th = Hyperparameters([1.0, 2.0], [0.5, 0.25], 3.0)
    assert np.array_equal(th.to_vector(), [1, 2, 0.5, 0.25, 3])
    assert Hyperparameters.from_vector(th.to_vector()).to_dict() == th.to_dict()
    assert Hyperparameters.from_dict(th.to_dict()).to_dict() == th.to_dict()
    with pytest.raises(ValueError):
        Hyperparameters([1.0], [0.0], 1.0)
    with pytest.raises(ValueError):
        Hyperparameters([1.0, 2.0], [1.0], 1.0)
