import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopid.analysis import compliance_residual, nrms, observability_rank, spectral_radius
from koopid.benchmarks.poly import PolySystem, poly_lifted_A, poly_output_matrix


def test_identity_dynamics_unobservable():
    for n in range(1, 5):
        assert observability_rank(np.eye(2), [[1.0, 0.0]], n).rank == 1


def test_rotation_observable():
    th = 0.3
    A = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    O = np.vstack([[1.0, 0.0], np.array([[1.0, 0.0]]) @ A])
    assert np.linalg.matrix_rank(O) == 2
    r = observability_rank(A, [[1.0, 0.0]], 2)
    assert r.rank == 2 and r.full_rank


def test_full_output_observable_at_one_step(rng):
    A = rng.standard_normal((4, 4))
    r = observability_rank(A, np.eye(4), 1)
    assert r.rank == 4 and r.full_rank and r.n_z == 4


def test_observability_errors():
    with pytest.raises(ValueError):
        observability_rank(np.ones((2, 3)), np.ones((1, 2)), 1)
    with pytest.raises(ValueError):
        observability_rank(np.eye(2), np.ones((1, 3)), 1)
    with pytest.raises(ValueError):
        observability_rank(np.eye(2), np.ones((1, 2)), 0)


def test_poly_lifted_rank():
    # C picks x1 and x2; x1^2 reaches the output through the -c coupling into x2
    A, C = poly_lifted_A(PolySystem()), poly_output_matrix()
    O = np.vstack([C, C @ A])
    assert np.linalg.matrix_rank(O) == 3
    assert observability_rank(A, C, 2).rank == 3
    assert observability_rank(A, C, 1).rank == 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 5))
def test_rank_invariant_under_similarity(seed, n):
    rng = np.random.default_rng(seed)
    n_z = 4
    A = rng.standard_normal((n_z, n_z))
    C = rng.standard_normal((1, n_z))
    if seed % 2:  # make some draws rank deficient
        A[:, -1] = 0.0
        A[-1, :] = 0.0
        C[:, -1] = 0.0
    T = rng.standard_normal((n_z, n_z)) + 3 * np.eye(n_z)
    Ti = np.linalg.inv(T)
    r1 = observability_rank(A, C, n).rank
    r2 = observability_rank(Ti @ A @ T, C @ T, n).rank
    assert r1 == r2
    assert r1 <= min(n, n_z)


def test_report_rank_bound(rng):
    r = observability_rank(rng.standard_normal((5, 5)), rng.standard_normal((2, 5)), 2)
    assert r.rank <= min(2 * 2, 5)
    assert len(r.singular_values) == 4


def test_compliance_residual_examples():
    assert compliance_residual([2.0, 5.0, 4.0]) == 0.0
    assert compliance_residual([0.0, 0.0, 0.0]) == 0.0
    assert compliance_residual([1.0, 7.0, 0.0]) == 1.0
    with pytest.raises(ValueError):
        compliance_residual([1.0, 2.0])


def test_spectral_radius_examples():
    assert spectral_radius(np.diag([0.5, -0.9])) == pytest.approx(0.9, abs=1e-15)
    assert spectral_radius(np.zeros((3, 3))) == 0.0
    assert spectral_radius(poly_lifted_A(PolySystem(0.99, 0.9, 0.9))) == pytest.approx(0.99, abs=1e-14)
    with pytest.raises(ValueError):
        spectral_radius(np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), alpha=st.floats(-5, 5, allow_nan=False))
def test_spectral_radius_homogeneous(seed, alpha):
    A = np.random.default_rng(seed).standard_normal((4, 4))
    assert spectral_radius(alpha * A) == pytest.approx(abs(alpha) * spectral_radius(A), rel=1e-9, abs=1e-12)


# NRMS ------------------------------------------------------------------------------


def test_nrms_perfect_prediction():
    y = np.array([1.0, 3.0, 2.0, 5.0])
    assert nrms(y, y) == 0.0


def test_nrms_hand_value():
    y = np.array([1.0, 2.0, 4.0, 3.0, 5.0])
    y_hat = np.array([1.5, 2.0, 3.0, 3.5, 4.0])
    # errors .5, 0, -1, .5, -1 -> squared sum 2.5; mean 3, deviations -2,-1,1,0,2 -> 10
    assert abs(nrms(y_hat, y) - np.sqrt(2.5 / 10.0)) < 1e-12
    assert abs(nrms(np.full(5, 3.0), y) - 1.0) < 1e-12


def test_nrms_skips_prefix():
    y = np.array([1e6, -1e6, 1.0, 2.0, 4.0, 3.0, 5.0])
    y_hat = np.array([0.0, 0.0, 1.5, 2.0, 3.0, 3.5, 4.0])
    assert abs(nrms(y_hat, y, skip=2) - np.sqrt(0.25)) < 1e-12


def test_nrms_constant_output_fails():
    with pytest.raises(ValueError):
        nrms(np.zeros(4), np.ones(4))


def test_nrms_multichannel_pools(rng):
    y = rng.standard_normal((50, 2))
    y_hat = y + 0.1 * rng.standard_normal((50, 2))
    expected = np.sqrt(np.sum((y_hat - y) ** 2) / np.sum((y - y.mean(0)) ** 2))
    assert nrms(y_hat, y) == pytest.approx(expected, rel=1e-14)
