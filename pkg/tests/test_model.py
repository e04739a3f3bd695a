import json

import numpy as np
import pytest

from lrsysid.lifted import lift_explicit
from lrsysid.model import (
    CertificateError,
    Dimensions,
    ExplicitModel,
    ImplicitModel,
    make_random_stable_system,
    mass_spring_damper,
    sample_trajectory,
    simulate,
    spectral_radius,
    to_explicit,
)


def scalar_model(a=0.5, sw=1.0, sv=1.0, s1=0.0):
    one = np.ones((1, 1))
    return ExplicitModel(np.zeros(1), s1 * one, sw * one, sv * one, a * one, one, one, one, 0 * one)


def test_dimensions_reject_more_disturbances_than_states():
    Dimensions(2, 1, 1, 1)
    with pytest.raises(ValueError):
        Dimensions(2, 1, 1, 3)
    with pytest.raises(ValueError):
        Dimensions(0, 1, 1, 1)


def test_model_rejects_inconsistent_shapes_and_indefinite_covariance():
    m = scalar_model()
    with pytest.raises(ValueError):
        m.replace(B=np.ones((2, 1)))
    with pytest.raises(ValueError):
        m.replace(Sigma_w=-np.ones((1, 1)))


def test_simulate_zero_dynamics_and_geometric_decay():
    m = scalar_model()
    zero = np.zeros((3, 1))
    assert np.allclose(simulate(m, zero, [0.0], zero), 0.0)
    assert np.allclose(simulate(m, zero, [1.0], zero)[:, 0], [1.0, 0.5, 0.25])


def test_simulate_rejects_wrong_length():
    m = scalar_model()
    with pytest.raises(ValueError):
        simulate(m, np.zeros((3, 1)), [0.0], np.zeros((4, 1)))


@pytest.mark.parametrize("seed", range(5))
def test_simulate_matches_lifted_matrices(seed):
    dims = Dimensions(3, 2, 1, 2)
    m = make_random_stable_system(dims, 0.9, seed)
    rng = np.random.default_rng(seed)
    T = 8
    u, x1, w = rng.standard_normal((T, 2)), rng.standard_normal(3), rng.standard_normal((T, 2))
    Fbar, Gbar, *_ = lift_explicit(m, T)
    Z = np.concatenate([x1, w[:-1].ravel()])
    expected = Fbar @ Z + Gbar @ u.ravel()
    assert np.max(np.abs(simulate(m, u, x1, w).ravel() - expected)) < 1e-12


def test_simulate_is_linear():
    m = make_random_stable_system(Dimensions(2, 1, 1, 2), 0.7, 3)
    rng = np.random.default_rng(0)
    u, x1, w = rng.standard_normal((10, 1)), rng.standard_normal(2), rng.standard_normal((10, 2))
    assert np.allclose(simulate(m, 2.5 * u, 2.5 * x1, 2.5 * w), 2.5 * simulate(m, u, x1, w))


def test_sample_trajectory_degenerate_and_deterministic():
    m = make_random_stable_system(Dimensions(2, 1, 1, 2), 0.7, 1, sigma_1=0.0, sigma_w=0.0, sigma_v=0.0)
    m = m.replace(mu=np.array([1.0, -2.0]))
    u = np.random.default_rng(0).standard_normal((12, 1))
    tr = sample_trajectory(m, u, 5)
    x = simulate(m, u, m.mu, np.zeros((12, 2)))
    assert np.array_equal(tr.y, x @ m.C.T + u @ m.D.T)
    noisy = m.replace(Sigma_w=np.eye(2), Sigma_v=np.eye(1))
    a, b = sample_trajectory(noisy, u, 9), sample_trajectory(noisy, u, 9)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.w, b.w)


def test_sample_trajectory_disturbance_covariance_monte_carlo():
    Sw = np.array([[2.0, 0.6], [0.6, 1.0]])
    m = make_random_stable_system(Dimensions(2, 1, 1, 2), 0.5, 2).replace(Sigma_w=Sw)
    tr = sample_trajectory(m, np.zeros((100_000, 1)), 4)
    emp = np.cov(tr.w.T)
    assert np.max(np.abs(emp - Sw) / np.abs(Sw)) < 0.05


def test_to_explicit_identity_and_scaling():
    n = 2
    F = np.array([[0.3, 0.1], [0.0, 0.2]])
    K, L, C, D, Sv = np.ones((n, 1)), np.eye(n), np.ones((1, n)), np.zeros((1, 1)), np.eye(1)
    g = to_explicit(ImplicitModel(np.eye(n), F, K, L, C, D, Sv, np.eye(n)))
    assert np.array_equal(g.A, F) and np.array_equal(g.B, K) and np.array_equal(g.G, L)
    g = to_explicit(ImplicitModel(2 * np.eye(n), np.eye(n), K, L, C, D, Sv, np.eye(n)))
    assert np.allclose(g.A, 0.5 * np.eye(n))


def test_to_explicit_rejects_singular_E():
    n = 2
    E = np.array([[1.0, 1.0], [1.0, 1.0]])
    eta = ImplicitModel(E, np.eye(n), np.ones((n, 1)), np.eye(n), np.ones((1, n)), np.zeros((1, 1)),
                        np.eye(1), np.eye(n))
    with pytest.raises(CertificateError):
        to_explicit(eta)


def test_to_explicit_inverts_left_multiplication(rng):
    m = make_random_stable_system(Dimensions(3, 1, 1, 3), 0.9, 8)
    E = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    eta = ImplicitModel.from_explicit(m, np.eye(3), E=E)
    g = to_explicit(eta)
    assert np.linalg.norm(E @ g.A - eta.F) <= 1e-10
    assert np.allclose(g.A, m.A) and np.allclose(g.B, m.B) and np.allclose(g.G, m.G)


def test_spectral_radius_examples(rng):
    assert spectral_radius(np.zeros((3, 3))) == 0.0
    assert spectral_radius(np.diag([0.5, -0.9])) == pytest.approx(0.9)
    A = rng.standard_normal((4, 4))
    roots = np.roots(np.poly(A))
    assert spectral_radius(A) == pytest.approx(np.abs(roots).max(), rel=1e-9)
    with pytest.raises(ValueError):
        spectral_radius(np.ones((2, 3)))


def test_random_stable_system_radius_and_seed_separation():
    for seed in range(5):
        m = make_random_stable_system(Dimensions(4, 1, 1, 4), 0.9, seed)
        assert abs(spectral_radius(m.A) - 0.9) <= 1e-9
    m1 = make_random_stable_system(Dimensions(1, 1, 1, 1), 0.5, 0)
    assert abs(abs(m1.A[0, 0]) - 0.5) <= 1e-12
    a = make_random_stable_system(Dimensions(3, 1, 1, 3), 0.8, 0).A
    b = make_random_stable_system(Dimensions(3, 1, 1, 3), 0.8, 1).A
    assert not np.allclose(a, b)
    with pytest.raises(ValueError):
        make_random_stable_system(Dimensions(2, 1, 1, 2), 1.2, 0)


@pytest.mark.parametrize("radius,k", [(0.9, 200), (0.95, 400)])
def test_powers_vanish_for_stable_radius(radius, k):
    # radius**k must sit well below the threshold: 0.95**200 is about 3.5e-5.
    for seed in range(5):
        A = make_random_stable_system(Dimensions(3, 1, 1, 3), radius, seed).A
        assert np.linalg.norm(np.linalg.matrix_power(A, k)) < 1e-6


def test_mass_spring_damper_structure():
    m = mass_spring_damper(1.0, 0.0, 0.0, 0.1)
    assert np.allclose(m.A, [[1.0, 0.1], [0.0, 1.0]])
    assert np.allclose(m.G, [[0.0], [0.1]]) and np.allclose(m.B, m.G)
    m = mass_spring_damper(1.0, 0.4, 1.0, 0.1, sigma_w=3.0)
    assert np.linalg.matrix_rank(m.G @ m.Sigma_w @ m.G.T) == 1
    assert spectral_radius(m.A) < 1.01
    with pytest.raises(ValueError):
        mass_spring_damper(0.0, 0.4, 1.0, 0.1)


def test_model_json_round_trip():
    m = make_random_stable_system(Dimensions(2, 1, 2, 1), 0.6, 3)
    text = m.to_json()
    back = ExplicitModel.from_json(text)
    assert list(json.loads(text)) == ["mu", "Sigma_1", "Sigma_w", "Sigma_v", "A", "B", "G", "C", "D"]
    for name in ("mu", "A", "B", "G", "C", "D", "Sigma_v"):
        assert np.array_equal(getattr(m, name), getattr(back, name))
    with pytest.raises(ValueError):
        ExplicitModel.from_dict({"A": [[1.0]]})
