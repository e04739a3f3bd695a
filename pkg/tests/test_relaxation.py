import numpy as np
import pytest
from scipy import optimize

from conftest import random_problem
from lrsysid.em_disturbances import estep, q3_value
from lrsysid.model import ImplicitModel, simulate, to_explicit
from lrsysid.relaxation import (
    ColumnSet,
    MStepConfig,
    Multiplier,
    SimErrorInstance,
    UnboundedSupremumError,
    compute_h,
    compute_h_columns,
    concavity_matrix,
    cross_term_bound,
    epigraph_matrix,
    fit_multiplier_H,
    jhat_closed_form,
    jlambda,
    lyapunov_certificate,
    prepare_multipliers,
    qhat,
    relaxation_maximizer,
    simulation_error,
    solve_mstep_sdp,
    stability_lmi,
    stability_margin,
)


def setup(seed, T=8, n_x=2):
    model, u, y = random_problem(seed, n_x=n_x, T=T)
    H, P = lyapunov_certificate(model.A, model.C, model.Sigma_v)
    eta = ImplicitModel.from_explicit(model, P)
    rng = np.random.default_rng(seed)
    inst = SimErrorInstance(u, y, rng.standard_normal(n_x), 0.3 * rng.standard_normal((T, model.n_w)))
    return model, eta, H, inst


def feasible_pairs(seed, count):
    """Random implicit models with a multiplier that satisfies the stability LMI."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(1, 4))
        E = rng.standard_normal((n, n)) + 2 * np.eye(n)
        F = 1.5 * rng.standard_normal((n, n))
        C = rng.standard_normal((1, n))
        Sv = np.array([[rng.uniform(0.1, 2)]])
        H = rng.standard_normal((n, n)) + 3 * np.eye(n)
        Pm = rng.standard_normal((n, n))
        P = Pm @ Pm.T + np.eye(n)
        eta = ImplicitModel(E, F, np.zeros((n, 1)), np.eye(n), C, np.zeros((1, 1)), Sv, P)
        if stability_margin(eta, H) > 0:
            out.append((eta, H))
    return out


def test_stability_set_implies_stable_explicit_model():
    for eta, H in feasible_pairs(0, 40):
        A = np.linalg.solve(eta.E, eta.F)
        assert np.max(np.abs(np.linalg.eigvals(A))) < 1


def test_stability_set_implies_concavity():
    for eta, H in feasible_pairs(1, 15):
        eta = eta.replace(K=np.zeros((eta.n_x, 1)))
        assert np.linalg.eigvalsh(concavity_matrix(eta, H, 6))[0] > 0


def test_scalar_stability_lmi():
    # E = 1, F = a, C = 1, Sigma_v = 1: M = [[2h - p, h a, 1], [h a, p, 0], [1, 0, 1]]
    def eta(a):
        return ImplicitModel(np.eye(1), np.array([[a]]), np.zeros((1, 1)), np.eye(1), np.eye(1),
                             np.zeros((1, 1)), np.eye(1), np.eye(1))
    M = stability_lmi(eta(0.5), np.array([[3.0]]), np.array([[2.0]]))
    assert np.allclose(M, [[4.0, 1.5, 1.0], [1.5, 2.0, 0.0], [1.0, 0.0, 1.0]])
    H, P = lyapunov_certificate(np.array([[0.5]]), np.eye(1), np.eye(1))
    assert stability_margin(eta(0.5), H, P) > 0
    # for |a| >= 1 no (h, p) on a fine grid satisfies the LMI
    grid = np.geomspace(1e-2, 1e3, 80)
    assert all(stability_margin(eta(1.02), np.array([[h]]), np.array([[p]])) <= 0
               for h in grid for p in grid)


@pytest.mark.parametrize("seed", range(3))
def test_closed_form_matches_numerical_supremum(seed):
    model, eta, H, inst = setup(seed, T=6)
    rng = np.random.default_rng(seed + 1)
    mult = Multiplier(H, rng.standard_normal(6 * model.n_x))
    res = optimize.minimize(lambda X: -jlambda(eta, mult, inst, X.reshape(6, -1)),
                            np.zeros(6 * model.n_x), method="BFGS", options={"gtol": 1e-10})
    jh = jhat_closed_form(eta, mult, inst)
    assert abs(-res.fun - jh) < 1e-6 * max(1.0, abs(jh))
    assert np.allclose(relaxation_maximizer(eta, mult, inst).ravel(), res.x, atol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_relaxation_bounds_simulation_error(seed):
    model, eta, H, inst = setup(seed)
    rng = np.random.default_rng(seed + 2)
    for _ in range(5):
        mult = Multiplier(H, rng.standard_normal(8 * model.n_x))
        assert jhat_closed_form(eta, mult, inst) >= simulation_error(eta, inst) - 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_offset_makes_relaxation_tight(seed):
    model, eta, H, inst = setup(seed)
    mult = Multiplier(H, compute_h(eta, H, inst))
    sim = simulation_error(model, inst)
    assert abs(jhat_closed_form(eta, mult, inst) - sim) < 1e-8 * max(1.0, sim)
    cols = ColumnSet.from_instances([inst, inst])
    hc = compute_h_columns(eta, H, cols)
    assert np.allclose(hc[..., 1].ravel(), mult.h)


def test_zero_multiplier_is_unbounded():
    model, eta, H, inst = setup(0)
    with pytest.raises(UnboundedSupremumError):
        jhat_closed_form(eta, Multiplier(np.zeros_like(H)), inst)


def test_epigraph_brackets_jhat():
    model, eta, H, inst = setup(4)
    mult = Multiplier(H, compute_h(eta, H, inst))
    jh = jhat_closed_form(eta, mult, inst)
    scale = max(1.0, jh)
    assert np.linalg.eigvalsh(epigraph_matrix(eta, mult, inst, jh + 1e-6 * scale))[0] > -1e-9
    assert np.linalg.eigvalsh(epigraph_matrix(eta, mult, inst, jh - 1e-3 * scale))[0] < 0


def test_cross_term_bound(rng):
    for _ in range(50):
        n = 3
        x, xn = rng.standard_normal(n), rng.standard_normal(n)
        H, F = rng.standard_normal((n, n)), rng.standard_normal((n, n))
        R = rng.standard_normal((n, n))
        P = R @ R.T + 0.1 * np.eye(n)
        lhs, rhs = cross_term_bound(x, xn, H, F, P)
        assert lhs <= rhs + 1e-9
        lhs, rhs = cross_term_bound(x, np.linalg.solve(P, H.T @ F @ x), H, F, P)
        assert abs(lhs - rhs) < 1e-8 * max(1.0, rhs)


def test_fit_is_feasible_and_improves_on_start():
    model, eta, H0, inst = setup(5, T=10)
    grp = fit_multiplier_H(eta, inst)
    assert stability_margin(eta, grp.H, grp.P) > 0
    start = jhat_closed_form(eta, Multiplier(H0), inst)
    assert grp.fit_value <= start + 1e-9
    assert abs(grp.fit_value - jhat_closed_form(eta, Multiplier(grp.H), inst)) < 1e-6 * max(1.0, start)


def test_fit_barrier_agrees_with_conic_solver():
    model, eta, _, inst = setup(6, T=5)
    a = fit_multiplier_H(eta, inst, MStepConfig(fit_gap_tol=1e-9, ftol=1e-12, max_newton=400, stage_newton=50))
    b = fit_multiplier_H(eta, inst, MStepConfig(method="sdp"))
    assert abs(a.fit_value - b.fit_value) <= 1e-4 * max(1.0, abs(b.fit_value))


def mstep_setup(seed, T=12):
    model, u, y = random_problem(seed, n_x=2, T=T)
    theta_k = model.replace(A=0.8 * model.A, C=1.2 * model.C)
    bundle = estep(theta_k, u, y)
    P0 = lyapunov_certificate(theta_k.A, theta_k.C, theta_k.Sigma_v)[1]
    eta_k = ImplicitModel.from_explicit(theta_k, P0)
    return theta_k, bundle, eta_k


@pytest.mark.parametrize("seed", range(2))
def test_bound_is_tight_at_current_iterate_and_majorizes(seed):
    theta_k, bundle, eta_k = mstep_setup(seed)
    T, n_y = bundle.T, 1
    groups = prepare_multipliers(eta_k, bundle.columns())
    target = -2 * q3_value(theta_k.gamma, bundle) - T * n_y * np.log(2 * np.pi)
    assert abs(qhat(eta_k, groups, theta_k.Sigma_v, T) - target) < 1e-7 * max(1.0, abs(target))
    rng = np.random.default_rng(seed)
    for _ in range(10):
        eta = eta_k.replace(F=eta_k.F + 0.05 * rng.standard_normal((2, 2)),
                            C=eta_k.C + 0.05 * rng.standard_normal((1, 2)),
                            Sigma_v=eta_k.Sigma_v * np.exp(0.2 * rng.standard_normal()))
        q = qhat(eta, groups, theta_k.Sigma_v, T)
        exact = -2 * q3_value(to_explicit(eta), bundle) - T * n_y * np.log(2 * np.pi)
        assert q >= exact - 1e-7 * max(1.0, abs(exact))


@pytest.mark.parametrize("seed", range(2))
def test_mstep_decreases_bound_and_keeps_stability(seed):
    theta_k, bundle, eta_k = mstep_setup(seed)
    groups = prepare_multipliers(eta_k, bundle.columns())
    res = solve_mstep_sdp(eta_k, groups, theta_k.Sigma_v, bundle.T)
    assert res.qhat_new <= res.qhat_k + 1e-9
    g = to_explicit(res.eta)
    assert np.max(np.abs(np.linalg.eigvals(g.A))) < 1
    assert q3_value(g, bundle) >= q3_value(theta_k.gamma, bundle) - 1e-9
    assert stability_margin(res.eta, groups[0].H, res.certificates[0]) > 0 or res.status == "kept"


def test_mstep_barrier_agrees_with_conic_solver():
    theta_k, bundle, eta_k = mstep_setup(3, T=5)
    groups = prepare_multipliers(eta_k, bundle.columns())
    a = solve_mstep_sdp(eta_k, groups, theta_k.Sigma_v, 5,
                        MStepConfig(gap_tol=1e-10, ftol=1e-12, max_newton=600, stage_newton=60))
    b = solve_mstep_sdp(eta_k, groups, theta_k.Sigma_v, 5, MStepConfig(method="sdp"))
    assert abs(a.qhat_new - b.qhat_new) <= 1e-4 * max(1.0, abs(b.qhat_k))


def test_realizable_noise_free_data_is_fitted():
    model, u, _ = random_problem(8, n_x=1, T=20)
    x1 = np.array([1.0])
    w = np.zeros((20, model.n_w))
    x = simulate(model, u, x1, w)
    y = x @ model.C.T + u @ model.D.T
    inst = SimErrorInstance(u, y, x1, w)
    start = model.replace(A=0.3 * model.A, B=0.5 * model.B)
    P0 = lyapunov_certificate(start.A, start.C, start.Sigma_v)[1]
    eta = ImplicitModel.from_explicit(start, P0)
    cfg = MStepConfig(estimate_D=True)
    e0 = simulation_error(start, inst)
    for _ in range(4):
        groups = prepare_multipliers(eta, ColumnSet.from_instances([inst]), cfg)
        res = solve_mstep_sdp(eta, groups, eta.Sigma_v, 20, cfg)
        eta = res.eta
    assert simulation_error(eta, inst) < 0.1 * e0
