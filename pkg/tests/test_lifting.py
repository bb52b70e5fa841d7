import json
import math

import numpy as np
import pytest
import scipy.linalg

from koopctl.dynamics import generate_snapshots, integrate, make_system
from koopctl.edmd import eval_dictionary, eval_dictionary_jacobian, identify_koopman, make_dictionary
from koopctl.errors import (
    DegenerateSamplingError,
    IllConditionedBasisError,
    LogSingularityError,
    ParseError,
    SpanViolationError,
)
from koopctl.lifting import (
    BilinearModel,
    build_A,
    build_B_exact,
    build_B_lsq,
    decode,
    lift,
    realify,
)


def _identified(system, box, D, M=3000, dt=0.01, seed=0):
    ds = generate_snapshots(system, box, M=M, dt=dt, seed=seed)
    d = make_dictionary(system.n, D)
    km = identify_koopman(ds, d)
    return realify(km.eigenvalues, km.eigenvectors, km.dt, d)


@pytest.fixture
def linear_basis(diag2):
    return _identified(diag2, [[-1, 1], [-1, 1]], 3)


@pytest.fixture
def pendulum_basis():
    return _identified(make_system("pendulum"), [[-1, 1], [-1, 1]], 5, M=5000)


# realify ------------------------------------------------------------------


def test_all_real_spectrum_keeps_vectors(rng):
    V = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    basis = realify(np.array([0.9, 0.8, 0.7]), V.astype(complex), 0.1)
    np.testing.assert_array_equal(basis.V, V)
    assert basis.kinds == ["real"] * 3


def test_complex_pair_continuous_eigenvalue():
    dt = 0.01
    mu = np.exp(np.array([-1 + 2j, -1 - 2j]) * dt)
    v = np.array([1.0, 1j]) / math.sqrt(2)
    basis = realify(mu, np.column_stack([v, np.conj(v)]), dt)
    np.testing.assert_allclose(basis.continuous_eigenvalues, [-1 + 2j, -1 - 2j], atol=1e-9)
    np.testing.assert_allclose(basis.V[:, 0], 2 * v.real)
    np.testing.assert_allclose(basis.V[:, 1], -2 * v.imag)
    assert basis.kinds == ["complex_re", "complex_im"]


def test_constant_mode_dropped():
    mu = np.array([1.0, 0.9, 0.8])
    basis = realify(mu, np.eye(3, dtype=complex), 0.1)
    assert basis.dim == 2
    assert basis.retained.tolist() == [1, 2]


def test_log_singularity():
    with pytest.raises(LogSingularityError):
        realify(np.array([1.0, 1e-13]), np.eye(2, dtype=complex), 0.1)


def test_ill_conditioned_basis():
    V = np.array([[1.0, 1.0], [0.0, 1e-14]], dtype=complex)
    with pytest.raises(IllConditionedBasisError):
        realify(np.array([0.9, 0.8]), V, 0.1)


def test_realify_deterministic(pendulum_basis):
    d = pendulum_basis.dictionary
    ds = generate_snapshots(make_system("pendulum"), [[-1, 1], [-1, 1]], M=5000, dt=0.01, seed=0)
    km = identify_koopman(ds, d)
    again = realify(km.eigenvalues, km.eigenvectors, km.dt, d)
    assert again.V.tobytes() == pendulum_basis.V.tobytes()


def test_kinds_pairing(pendulum_basis):
    kinds = pendulum_basis.kinds
    for i, k in enumerate(kinds):
        if k == "complex_re":
            assert kinds[i + 1] == "complex_im"
        if k == "complex_im":
            assert kinds[i - 1] == "complex_re"


def test_centering(pendulum_basis):
    z0 = lift(pendulum_basis, np.zeros(2))
    assert np.all(z0 == 0.0)


# A ------------------------------------------------------------------------


def test_build_A_real_block():
    basis = realify(np.array([math.exp(-0.1)]), np.eye(1, dtype=complex), 0.1)
    np.testing.assert_allclose(build_A(basis), [[-1.0]])


def test_build_A_pair_block():
    dt = 0.01
    mu = np.exp(np.array([-1 + 2j, -1 - 2j]) * dt)
    v = np.array([1.0, 1j]) / math.sqrt(2)
    A = build_A(realify(mu, np.column_stack([v, np.conj(v)]), dt))
    np.testing.assert_allclose(A, [[-1, 2], [-2, -1]], atol=1e-9)


def test_build_A_discrete_variant():
    mu = np.array([0.5])
    np.testing.assert_allclose(build_A(realify(mu, np.eye(1, dtype=complex), 0.1), "discrete"), [[0.5]])


def test_lifted_flow_matches_A_on_linear_system(linear_basis, diag2, rng):
    A = build_A(linear_basis)
    for _ in range(10):
        x0 = rng.uniform(-1, 1, size=2)
        tr = integrate(diag2, x0, dt=0.01, T=0.5)
        X = tr.states.T
        Z = lift(linear_basis, X)
        J = eval_dictionary_jacobian(linear_basis.dictionary, X)
        dZ = linear_basis.V_r.T @ np.einsum("kis,is->ks", J, diag2.f(X))
        err = np.linalg.norm(dZ - A @ Z, axis=0)
        assert np.all(err <= 1e-4 * np.maximum(1.0, np.linalg.norm(A @ Z, axis=0)))


def test_A_consistency_one_step(linear_basis, diag2, rng):
    A = build_A(linear_basis)
    E = scipy.linalg.expm(A * 0.01)
    for _ in range(50):
        x = rng.uniform(-1, 1, size=2)
        y = integrate(diag2, x, dt=0.01, T=0.01).states[-1]
        z = lift(linear_basis, x)
        assert np.linalg.norm(lift(linear_basis, y) - E @ z) <= 5e-3 * (1 + np.linalg.norm(z))


# B ------------------------------------------------------------------------


def test_exact_B_hand_example():
    # dictionary {1, x}, V = I, g = 1: d/dt (1, x) = u (0, 1)
    d = make_dictionary(1, 1)
    basis = realify(np.array([1.0, 0.9]), np.eye(2, dtype=complex), 0.1, d)
    B, b, res = build_B_exact(basis, [1.0])
    assert res == 0.0
    Bbar = np.block([[B, b[:, None]], [np.zeros((1, 2))]])
    # reorder (z, 1) -> (1, x) to compare with the uncentered form
    perm = [1, 0]
    np.testing.assert_array_equal(Bbar[np.ix_(perm, perm)], [[0, 0], [1, 0]])


def test_exact_B_zero_field(pendulum_basis):
    B, b, res = build_B_exact(pendulum_basis, [0.0, 0.0])
    assert not B.any() and not b.any() and res == 0.0


def test_exact_B_exists_for_constant_input(pendulum_basis, rng):
    B, b, _ = build_B_exact(pendulum_basis, make_system("pendulum").input_poly)
    X = rng.uniform(-1, 1, size=(2, 1000))
    J = eval_dictionary_jacobian(pendulum_basis.dictionary, X)
    lhs = pendulum_basis.V_r.T @ J[:, 1, :]
    rhs = B @ lift(pendulum_basis, X) + b[:, None]
    assert np.max(np.abs(lhs - rhs)) <= 1e-8 * max(1.0, np.abs(lhs).max())


def test_exact_B_span_violation(linear_basis):
    # g = (x1^3, 0) pushes degree-3 monomials to degree 5 > D = 3
    with pytest.raises(SpanViolationError):
        build_B_exact(linear_basis, [{(3, 0): 1.0}, {}])


def test_lsq_matches_exact(pendulum_basis, rng):
    s = make_system("pendulum")
    Be, be, _ = build_B_exact(pendulum_basis, s.input_poly)
    Bl, bl, res = build_B_lsq(pendulum_basis, s.g, rng.uniform(-1, 1, size=(2, 500)))
    assert res <= 1e-8
    np.testing.assert_allclose(Bl, Be, atol=1e-6)
    np.testing.assert_allclose(bl, be, atol=1e-6)


def test_lsq_zero_field(pendulum_basis, rng):
    B, b, res = build_B_lsq(pendulum_basis, [0.0, 0.0], rng.uniform(-1, 1, size=(2, 100)))
    assert not B.any() and not b.any() and res == 0.0


def test_lsq_rank_deficient(pendulum_basis):
    X = np.tile(np.array([[0.3], [0.2]]), (1, 100))
    with pytest.raises(DegenerateSamplingError):
        build_B_lsq(pendulum_basis, [0.0, 1.0], X)


def test_lsq_reports_residual_for_non_polynomial_field(pendulum_basis, rng):
    def g(X):
        return np.vstack([np.zeros(X.shape[1]), np.cos(X[0])])

    _, _, res = build_B_lsq(pendulum_basis, g, rng.uniform(-1, 1, size=(2, 400)))
    assert 0.0 < res < 1.0


# lift / decode ------------------------------------------------------------


def test_lift_linear_scalar(decay):
    basis = _identified(decay, [[-2, 2]], 2, M=500, dt=0.1)
    kinds = basis.coordinate_eigenvalues
    j = int(np.argmin(np.abs(kinds - (-1.0))))
    z1 = lift(basis, np.array([1.0]))[j]
    z2 = lift(basis, np.array([2.0]))[j]
    assert abs(z2 / z1 - 2.0) <= 1e-6


def test_decode_round_trip(pendulum_basis, rng):
    X = rng.uniform(-1, 1, size=(2, 200))
    np.testing.assert_allclose(decode(pendulum_basis, lift(pendulum_basis, X)), X, atol=1e-9)
    x = X[:, 0]
    np.testing.assert_allclose(decode(pendulum_basis, lift(pendulum_basis, x)), x, atol=1e-9)


def test_lift_batch_matches_single(pendulum_basis, rng):
    X = rng.uniform(-1, 1, size=(2, 5))
    Z = lift(pendulum_basis, X)
    for j in range(5):
        np.testing.assert_allclose(Z[:, j], lift(pendulum_basis, X[:, j]), atol=1e-14)


# model file ---------------------------------------------------------------


def test_model_json_round_trip(pendulum_basis, tmp_path):
    s = make_system("pendulum")
    B, b, res = build_B_exact(pendulum_basis, s.input_poly)
    m = BilinearModel(build_A(pendulum_basis), B, b, pendulum_basis, res)
    path = tmp_path / "model.json"
    m.save(path)
    data = json.loads(path.read_text())
    for key in ("A", "B", "V", "offset", "dt", "dictionary", "eigenvalues"):
        assert key in data
    back = BilinearModel.load(path)
    assert np.array_equal(back.A, m.A) and np.array_equal(back.B, m.B)
    assert np.array_equal(back.input_offset, m.input_offset)
    x = np.array([0.3, -0.4])
    assert np.array_equal(back.lift(x), m.lift(x))


def test_model_minimal_file():
    m = BilinearModel.from_json({"A": [[-1.0, 0.0], [0.0, -1.0]], "B": [[1.0, 0.0], [0.0, 1.0]]})
    assert m.N == 2 and not m.input_offset.any() and m.basis is None


@pytest.mark.parametrize("payload,field", [
    ({"B": [[1.0]]}, "A"),
    ({"A": [[1.0]], "B": "x"}, "B"),
    ({"A": [[1.0, 2.0]], "B": [[1.0]]}, "A"),
    ({"A": [[1.0]], "B": [[1.0]], "input_offset": [1.0, 2.0]}, "input_offset"),
])
def test_model_parse_errors_name_field(payload, field):
    with pytest.raises(ParseError) as info:
        BilinearModel.from_json(payload)
    assert info.value.field == field


def test_model_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        BilinearModel.load(path)


def test_homogeneous_form():
    m = BilinearModel(-np.eye(2), np.eye(2), [1.0, 2.0])
    Abar, Bbar = m.homogeneous()
    zbar = np.array([0.5, -1.0, 1.0])
    z = zbar[:2]
    np.testing.assert_allclose((Bbar @ zbar)[:2], m.B @ z + m.input_offset)
    assert not Bbar[2].any() and not Abar[2].any()
