import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopid.analysis import compliance_residual
from koopid.benchmarks.data import (DataError, Dataset, LinearSystem, generate_dataset, read_csv,
                                    read_dataset, write_csv, write_dataset)
from koopid.benchmarks.poly import (PolySystem, lifted_trajectory, poly_lift, poly_lifted_A, poly_step,
                                    poly_trajectory)
from koopid.benchmarks.wiener_hammerstein import (WhLiftedModel, WhSystem, symmetric_reduction, wh_simulate,
                                                  wh_step)

# polynomial system -----------------------------------------------------------------


def test_poly_step_example():
    np.testing.assert_allclose(poly_step(PolySystem(0.99, 0.9, 0.9), [1.0, 1.0]), [0.99, 0.0], atol=1e-16)


def test_poly_lift_example():
    np.testing.assert_array_equal(poly_lift([2.0, 3.0]), [2.0, 3.0, 4.0])


def test_poly_embedding_commutes(rng):
    sys = PolySystem()
    A = poly_lifted_A(sys)
    x = rng.uniform(-2, 2, (100, 2))
    np.testing.assert_allclose(poly_lift(poly_step(sys, x)), poly_lift(x) @ A.T, atol=1e-12)


def test_poly_wrong_dims():
    with pytest.raises(ValueError):
        poly_step(PolySystem(), [1.0, 2.0, 3.0])


@pytest.mark.parametrize("seed", range(20))
def test_poly_trajectory_commutes(seed):
    sys = PolySystem()
    x0 = np.random.default_rng(seed).uniform(-1, 1, 2)
    xs = poly_trajectory(sys, x0, 500)
    zs = lifted_trajectory(sys, poly_lift(x0), 500)
    assert np.max(np.abs(poly_lift(xs) - zs)) < 1e-9


def test_compliant_surface_is_invariant(rng):
    sys = PolySystem()
    for x0 in rng.uniform(-1, 1, (10, 2)):
        zs = lifted_trajectory(sys, poly_lift(x0), 200)
        assert np.max(np.abs(compliance_residual(zs))) < 1e-9


# Wiener-Hammerstein system ---------------------------------------------------------


def test_wh_zero_trajectory():
    sys = WhSystem.default()
    y, xs, xbs = wh_simulate(sys, np.zeros(50))
    assert not np.any(y) and not np.any(xs) and not np.any(xbs)


def test_wh_single_step_hand_arithmetic():
    sys = WhSystem(A1=[[0.5, 0.0], [0.1, 0.2]], B1=[1.0, 0.0], K1=[0.0, 1.0], C1=[1.0, 1.0],
                   A2=[[0.3, 0.0], [0.0, 0.4]], B2=[1.0, 2.0], K2=[1.0, 0.0], C2=[0.0, 1.0],
                   alpha=[0.1, 1.0, 0.5, 0.25])
    x, xb, u, e = np.array([1.0, 2.0]), np.array([-1.0, 0.5]), 0.5, 0.2
    x_next, xb_next, y = wh_step(sys, x, xb, u, e)
    # v = 3, w = 0.1 + 3 + 4.5 + 6.75 = 14.35
    np.testing.assert_allclose(x_next, [0.5 + 0.5, 0.1 + 0.4 + 0.2])
    np.testing.assert_allclose(xb_next, [-0.3 + 14.35 + 0.2, 0.2 + 28.7])
    assert y == pytest.approx(0.5 + 0.2)


def test_wh_linear_case_matches_cascade(rng):
    sys = WhSystem.random(3, alpha=(0.0, 0.7, 0.0, 0.0))
    u = rng.uniform(-1, 1, 200)
    y, _, _ = wh_simulate(sys, u)
    # impulse responses of the two blocks, convolved
    h1 = np.array([0.0] + [sys.C1 @ np.linalg.matrix_power(sys.A1, k) @ sys.B1 for k in range(199)])
    h2 = np.array([0.0] + [sys.C2 @ np.linalg.matrix_power(sys.A2, k) @ sys.B2 for k in range(199)])
    v = np.convolve(u, h1)[:200]
    y_ref = np.convolve(0.7 * v, h2)[:200]
    np.testing.assert_allclose(y, y_ref, atol=1e-12)


def test_wh_step_matches_simulation(rng):
    sys = WhSystem.default()
    u, e = rng.uniform(-1, 1, 30), 0.1 * rng.standard_normal(30)
    y, xs, xbs = wh_simulate(sys, u, e)
    x, xb = np.zeros(2), np.zeros(2)
    for k in range(30):
        x, xb, yk = wh_step(sys, x, xb, u[k], e[k])
        assert yk == pytest.approx(y[k], abs=1e-14)


def test_default_system_file_matches_generator():
    a = WhSystem.default()
    b = WhSystem.random(0, stable_predictor=True)
    for k, v in a.to_dict().items():
        assert v == b.to_dict()[k]
    assert max(np.abs(np.linalg.eigvals(a.A1)).max(), np.abs(np.linalg.eigvals(a.A2)).max()) < 0.9 + 1e-12
    np.testing.assert_array_equal(a.alpha, [0.0, 1.0, 0.5, 0.25])
    for v in (a.B1, a.K1, a.C1, a.B2, a.K2, a.C2):
        assert np.linalg.norm(v) == pytest.approx(1.0)
    assert a.predictor_radius() < 0.95


@pytest.mark.parametrize("seed", range(20))
def test_random_systems_stable(seed):
    s = WhSystem.random(seed)
    for A in (s.A1, s.A2):
        rho = np.abs(np.linalg.eigvals(A)).max()
        assert 0.7 - 1e-12 <= rho <= 0.9 + 1e-12


def test_symmetric_reduction_left_inverse(rng):
    for p in (2, 3):
        R, E = symmetric_reduction(2, p)
        np.testing.assert_array_equal(R @ E, np.eye(R.shape[0]))
        x = rng.standard_normal(2)
        t = x
        for _ in range(p - 1):
            t = np.kron(t, x)
        np.testing.assert_allclose(E @ (R @ t), t, rtol=1e-15)
    assert symmetric_reduction(2, 2)[0].shape == (3, 4)
    assert symmetric_reduction(2, 3)[0].shape == (4, 8)


def test_embedding_dimensions():
    sys = WhSystem.default()
    assert WhLiftedModel(sys).n_z == 12
    assert WhLiftedModel(sys, reduced=False).n_z == 17


@pytest.mark.parametrize("reduced", [True, False])
def test_embedding_autonomous_part(reduced, rng):
    sys = WhSystem.default()
    m = WhLiftedModel(sys, reduced)
    x, xb = rng.uniform(-2, 2, (50, 2)), rng.uniform(-2, 2, (50, 2))
    xn, xbn, _ = wh_step(sys, x, xb, np.zeros(50), np.zeros(50))
    np.testing.assert_allclose(m.lift(xn, xbn), m.lift(x, xb) @ m.A.T, atol=1e-10)


@pytest.mark.parametrize("reduced", [True, False])
def test_embedding_full_commutation(reduced, rng):
    sys = WhSystem.random(11)
    m = WhLiftedModel(sys, reduced)
    n = 1000
    x, xb = rng.uniform(-2, 2, (n, 2)), rng.uniform(-2, 2, (n, 2))
    u, e = rng.uniform(-1, 1, n), rng.standard_normal(n)
    xn, xbn, y = wh_step(sys, x, xb, u, e)
    z = m.lift(x, xb)
    assert np.max(np.abs(m.step(z, u, e) - m.lift(xn, xbn))) <= 1e-9
    assert np.max(np.abs(m.output(z)[:, 0] + e - y)) <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_embedding_trajectory_commutes(seed):
    rng = np.random.default_rng(seed)
    sys = WhSystem.random(seed)
    m = WhLiftedModel(sys)
    u, e = rng.uniform(-1, 1, 500), 0.1 * rng.standard_normal(500)
    _, xs, xbs = wh_simulate(sys, u, e)
    z = m.lift(xs[0], xbs[0])[0]
    for k in range(499):
        z = m.step(z, u[k], e[k])
        assert np.max(np.abs(z - m.lift(xs[k + 1], xbs[k + 1])[0])) < 1e-9


def test_states_read_back(rng):
    m = WhLiftedModel(WhSystem.default())
    x, xb = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    x2, xb2 = m.states(m.lift(x, xb))
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(xb2, xb)


# datasets --------------------------------------------------------------------------


def test_noiseless_rerun_identical():
    a = generate_dataset(WhSystem.default(), 300, 100, 100, None, seed=5)
    b = generate_dataset(WhSystem.default(), 300, 100, 100, None, seed=5)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.u, b.u)
    assert not np.any(a.e)
    assert a.meta["sigma_e"] == 0.0


def test_noisy_twin_shares_inputs():
    a = generate_dataset(WhSystem.default(), 300, 100, 100, 10.0, seed=5)
    b = generate_dataset(WhSystem.default(), 300, 100, 100, None, seed=5)
    assert np.array_equal(a.u, b.u)
    assert not np.array_equal(a.y, b.y)


def test_inputs_uniform():
    ds = generate_dataset(WhSystem.default(), 5000, 100, 100, None, seed=1)
    assert ds.u.min() >= -1.0 and ds.u.max() <= 1.0
    assert abs(ds.u.var() - 1.0 / 3.0) < 0.02


@pytest.mark.parametrize("snr", [5.0, 20.0, 30.0])
def test_empirical_snr(snr):
    ds = generate_dataset(WhSystem.default(), 12000, 4000, 4000, snr, seed=0)
    clean = generate_dataset(WhSystem.default(), 12000, 4000, 4000, None, seed=0)
    seg = slice(0, 12000)
    measured = 10 * np.log10(np.var(clean.y[seg]) / np.var(ds.e[seg]))
    assert abs(measured - snr) < 0.5


def test_split_boundaries():
    ds = generate_dataset(WhSystem.default(), 12000, 4000, 4000, 10.0, seed=0)
    assert ds.boundaries == (12000, 16000)
    assert ds.N == 20000
    assert len(ds.segment("train")) == 12000 and ds.segment("test").start == 16000


def test_zero_variance_output_rejected():
    sys = WhSystem.default()
    sys.B1 = np.zeros(2)
    with pytest.raises(ValueError, match="variance"):
        generate_dataset(sys, 100, 50, 50, 10.0, seed=0)


def test_initial_states_reproduce_outputs():
    sys = WhSystem.default()
    ds = generate_dataset(sys, 400, 200, 200, None, seed=2)
    for name in ("train", "val", "test"):
        seg = ds.segment(name)
        s = ds.meta["initial_state"][name]
        y, _, _ = wh_simulate(sys, seg.u[:, 0], x0=s["x"], xbar0=s["xbar"])
        np.testing.assert_allclose(y, seg.y[:, 0], atol=1e-12)


def test_poly_dataset_autonomous():
    ds = generate_dataset(PolySystem(), 50, 20, 20, None, seed=0)
    assert ds.n_u == 0 and ds.n_y == 2
    x0 = np.array(ds.meta["initial_state"]["train"]["x"])
    np.testing.assert_allclose(ds.segment("train").y, poly_trajectory(PolySystem(), x0, 50))
    with pytest.raises(ValueError):
        generate_dataset(PolySystem(), 50, 20, 20, 10.0, seed=0)


def test_linear_system_dataset():
    sys = LinearSystem.random(4, 1, 1, seed=0)
    assert np.abs(np.linalg.eigvals(sys.A)).max() < 0.9 + 1e-12
    ds = generate_dataset(sys, 300, 100, 100, None, seed=0)
    assert ds.n_u == 1 and ds.n_y == 1


def test_csv_round_trip(tmp_path):
    ds = generate_dataset(WhSystem.default(), 60, 30, 30, 10.0, seed=3)
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert np.array_equal(back.u, ds.u) and np.array_equal(back.y, ds.y)
    assert back.boundaries == ds.boundaries
    assert back.meta["snr_db"] == 10.0
    assert (tmp_path / "train.csv").read_text().splitlines()[0] == "k,u0,y0"


def test_csv_bytes_deterministic(tmp_path):
    for d in ("a", "b"):
        write_dataset(generate_dataset(WhSystem.default(), 60, 30, 30, 10.0, seed=3), tmp_path / d)
    for f in ("train.csv", "val.csv", "test.csv", "meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("k,u0,y0\n0,1.0,2.0\n2,1.0,2.0\n")
    with pytest.raises(DataError, match="contiguous"):
        read_csv(p)
    p.write_text("x,y\n")
    with pytest.raises(DataError):
        read_csv(p)
    with pytest.raises(DataError):
        read_csv(tmp_path / "missing.csv")


@settings(max_examples=30, deadline=None)
@given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_floats_round_trip_exactly(tmp_path_factory, values):
    p = tmp_path_factory.mktemp("csv") / "t.csv"
    y = np.array(values)
    write_csv(p, np.arange(len(y)), np.zeros((len(y), 0)), y)
    _, u, y2 = read_csv(p)
    assert np.array_equal(y2[:, 0], y) and u.shape == (len(y), 0)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((5, 1)), np.zeros((4, 1)), (2, 3))
    with pytest.raises(DataError):
        Dataset(np.zeros((5, 1)), np.zeros((5, 1)), (4, 3))
