"""Acceptance checks; each test prints one PASS/FAIL line for its criterion."""

import time

import numpy as np

from conftest import ACCEPTANCE_LINES, random_problem
from lrsysid import sdp
from lrsysid.em_disturbances import default_initial_model, em_dist_run, estep, q_eval
from lrsysid.em_states import SingularModelError, em_states_run
from lrsysid.experiments import (
    ExperimentConfig,
    convergence_summary,
    iterations_to_level,
    read_csv_rows,
    run_experiment,
    sweep_gaps,
)
from lrsysid.inference import disturbance_smoother, lifted_conditioning_oracle, log_likelihood
from lrsysid.model import ImplicitModel, mass_spring_damper, sample_trajectory, spectral_radius
from lrsysid.relaxation import (
    Multiplier,
    SimErrorInstance,
    conic_from_affine,
    compute_h,
    cross_term_bound,
    epigraph_matrix,
    jhat_closed_form,
    prepare_multipliers,
    simulation_error,
    stability_lmi,
    stability_margin,
)

STABILITY_CACHE = {}


def report(capsys, number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def perturbed(theta, rng, scale):
    n = theta.n_x
    return theta.replace(
        A=theta.A + scale * rng.standard_normal((n, n)) / n,
        B=theta.B + scale * rng.standard_normal(theta.B.shape),
        G=theta.G + scale * rng.standard_normal(theta.G.shape),
        C=theta.C + scale * rng.standard_normal(theta.C.shape),
        D=theta.D + scale * rng.standard_normal(theta.D.shape),
        mu=theta.mu + scale * rng.standard_normal(n),
        Sigma_v=theta.Sigma_v * np.exp(scale * rng.standard_normal()),
        Sigma_w=theta.Sigma_w * np.exp(scale * rng.standard_normal()),
        Sigma_1=theta.Sigma_1 * np.exp(scale * rng.standard_normal()),
    )


def test_criterion_01_smoother_matches_lifted_oracle(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        n_x = 1 + seed % 3
        model, u, y = random_problem(seed, n_x=n_x, n_y=1 + seed % 2, n_w=1 if seed % 5 == 0 else None,
                                     T=5 + seed % 16)
        post = disturbance_smoother(model, u, y)
        ref, ll = lifted_conditioning_oracle(model, u, y)
        for name in ("x1_mean", "x1_cov", "Z_mean", "Omega"):
            worst = max(worst, float(np.max(np.abs(getattr(post, name) - getattr(ref, name)))))
        worst = max(worst, abs(log_likelihood(model, u, y) - ll))
    wall = time.perf_counter() - t0
    report(capsys, 1, worst <= 1e-8 and wall < 60,
           f"smoother vs lifted oracle on 50 systems: max error {worst:.2e} (tol 1e-8), {wall:.1f} s (limit 60 s)")


def test_criterion_02_em_inequality(capsys):
    rng = np.random.default_rng(2)
    worst = np.inf
    pairs = 0
    for seed in range(20):
        theta_k, u, y = random_problem(100 + seed, n_x=1 + seed % 3, T=15)
        b = estep(theta_k, u, y)
        Lk, Qk = log_likelihood(theta_k, u, y), q_eval(theta_k, b)
        for j in range(5):
            th = perturbed(theta_k, rng, (1e-4, 1e-3, 1e-2, 0.05, 0.2)[j])
            worst = min(worst, (log_likelihood(th, u, y) - Lk) - (q_eval(th, b) - Qk))
            pairs += 1
    report(capsys, 2, pairs == 100 and worst >= -1e-7,
           f"{pairs} pairs: min [L(th)-L(th_k)] - [Q(th)-Q(th_k)] = {worst:.3e} (tol -1e-7)")


def test_criterion_03_tightness_at_current_iterate(capsys):
    worst = 0.0
    count = 0
    for seed in range(20):
        theta_k, u, y = random_problem(200 + seed, n_x=1 + seed % 2, T=10)
        b = estep(theta_k, u, y)
        eta_k = ImplicitModel.from_explicit(theta_k, np.eye(theta_k.n_x))
        (grp,) = prepare_multipliers(eta_k, b.columns())
        for j, inst in enumerate(b.instances):
            e = simulation_error(theta_k, inst)
            jh = jhat_closed_form(eta_k, grp.multiplier(j), inst)
            worst = max(worst, abs(jh - e) / max(1.0, e))
            count += 1
    report(capsys, 3, worst <= 1e-7,
           f"{count} instances over 20 E-steps: max |Jhat - E| / max(1, E) = {worst:.2e} (tol 1e-7)")


def random_certified_model(rng):
    while True:
        n = int(rng.integers(1, 4))
        n_u, n_y, n_w = 1, int(rng.integers(1, 3)), int(rng.integers(1, 3))
        R = rng.standard_normal((n_y, n_y))
        eta = ImplicitModel(
            E=rng.standard_normal((n, n)) + 2 * np.eye(n), F=1.5 * rng.standard_normal((n, n)),
            K=rng.standard_normal((n, n_u)), L=rng.standard_normal((n, n_w)),
            C=rng.standard_normal((n_y, n)), D=rng.standard_normal((n_y, n_u)),
            Sigma_v=R @ R.T + 0.1 * np.eye(n_y), P=np.eye(n))
        H = rng.standard_normal((n, n)) + 3 * np.eye(n)
        Pm = rng.standard_normal((n, n))
        P = Pm @ Pm.T + np.eye(n)
        if stability_margin(eta, H, P) > 0:
            return eta.replace(P=P), H


def random_instance(rng, eta, T):
    n_x, n_u, n_y, n_w = eta.E.shape[0], eta.K.shape[1], eta.C.shape[0], eta.L.shape[1]
    return SimErrorInstance(rng.standard_normal((T, n_u)), rng.standard_normal((T, n_y)),
                            rng.standard_normal(n_x), rng.standard_normal((T, n_w)))


def test_criterion_04_bound_validity(capsys):
    rng = np.random.default_rng(4)
    worst = np.inf
    for _ in range(100):
        eta, H = random_certified_model(rng)
        T = int(rng.integers(3, 10))
        inst = random_instance(rng, eta, T)
        pick = rng.integers(3)
        h = (None, rng.standard_normal(T * eta.E.shape[0]), compute_h(eta, H, inst))[pick]
        jh = jhat_closed_form(eta, Multiplier(H, h), inst)
        worst = min(worst, jh - simulation_error(eta, inst))
    report(capsys, 4, worst >= -1e-9, f"100 random certified models: min Jhat - E = {worst:.3e} (margin -1e-9)")


def smallest_feasible_s(eta, mult, inst, hi):
    def psd(s):
        N = epigraph_matrix(eta, mult, inst, s)
        return np.linalg.eigvalsh(N)[0] >= -1e-12 * max(1.0, np.abs(N).max())

    lo = -hi
    while not psd(hi):
        hi *= 2
    while psd(lo):
        lo = lo * 2 if lo < 0 else lo - 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if psd(mid):
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            break
    return hi


def test_criterion_05_epigraph_exactness(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        eta, H = random_certified_model(rng)
        T = int(rng.integers(3, 8))
        inst = random_instance(rng, eta, T)
        mult = Multiplier(H, compute_h(eta, H, inst))
        jh = jhat_closed_form(eta, mult, inst)
        s = smallest_feasible_s(eta, mult, inst, max(1.0, 2 * abs(jh)))
        worst = max(worst, abs(s - jh) / max(1.0, abs(jh)))
    report(capsys, 5, worst <= 1e-6,
           f"20 instances: max |s_min - Jhat| / max(1, |Jhat|) = {worst:.2e} (tol 1e-6)")


def stability_feasibility(A, C, Sigma_v, margin=1e-6):
    n = A.shape[0]
    eta = ImplicitModel(np.eye(n), A, np.zeros((n, 1)), np.eye(n), C, np.zeros((C.shape[0], 1)), Sigma_v, np.eye(n))
    nH = n * n
    iu = np.triu_indices(n)

    def build(z):
        H = z[:nH].reshape(n, n)
        P = np.zeros((n, n))
        P[iu] = z[nH:]
        P = P + np.triu(P, 1).T
        M = stability_lmi(eta, H, P)
        return [M - margin * np.eye(M.shape[0])]

    prog = conic_from_affine(build, nH + len(iu[0]), np.zeros(nH + len(iu[0])))
    return sdp.solve(prog).status


def test_criterion_06_stability_lmi_both_directions(capsys):
    rng = np.random.default_rng(6)
    ok_stable = ok_unstable = 0
    for i in range(20):
        for rho, stable in ((rng.uniform(0.3, 0.95), True), (rng.uniform(1.05, 1.5), False)):
            n = 1 + i % 3
            A = rng.standard_normal((n, n))
            A *= rho / spectral_radius(A)
            status = stability_feasibility(A, rng.standard_normal((1, n)), np.eye(1))
            if stable and status in ("optimal", "near-optimal"):
                ok_stable += 1
            if not stable and status == "infeasible":
                ok_unstable += 1
    report(capsys, 6, ok_stable == 20 and ok_unstable == 20,
           f"feasible for {ok_stable}/20 stable systems, infeasible for {ok_unstable}/20 unstable systems")


ACCEPT_MONO = dict(n_x=2, T=100, max_iters=30, delta=1e-4)


def test_criterion_07_algorithm_monotone_and_stable(capsys):
    worst_drop, worst_rho, iters, errors = np.inf, 0.0, [], []
    for seed in range(10):
        truth, u, y = random_problem(700 + seed, n_x=ACCEPT_MONO["n_x"], T=ACCEPT_MONO["T"],
                                     sigma_w=0.05, sigma_v=0.05)
        theta0 = default_initial_model(truth.dims(), u, y, seed=seed)
        hist = em_dist_run(theta0, u, y, max_iters=ACCEPT_MONO["max_iters"], delta=ACCEPT_MONO["delta"])
        if hist.error:
            errors.append(hist.error)
        worst_drop = min(worst_drop, float(np.min(np.diff(hist.logliks))))
        worst_rho = max(worst_rho, max(r.spectral_radius for r in hist.records))
        iters.append(len(hist.records) - 1)
    ok = worst_drop >= -1e-6 and worst_rho < 1 and not errors
    report(capsys, 7, ok,
           f"10 seeds (n_x=2, T=100, iterations {min(iters)}-{max(iters)}): smallest step in L {worst_drop:.2e} "
           f"(tol -1e-6), max spectral radius {worst_rho:.4f}, solver errors {len(errors)}")


def test_criterion_08_singular_model(capsys):
    truth = mass_spring_damper(1.0, 0.4, 1.0, 0.1, sigma_w=1.0, sigma_v=1e-2)
    u = np.random.default_rng(8).standard_normal((100, 1))
    y = sample_trajectory(truth, u, 8).y
    theta0 = default_initial_model(truth.dims(), u, y, seed=0)
    hist = em_dist_run(theta0, u, y, max_iters=5, delta=1e-4)
    gain = float(hist.logliks[-1] - hist.logliks[0])
    try:
        em_states_run(theta0, u, y, max_iters=1)
        rejected = "no rejection"
    except SingularModelError as exc:
        rejected = f"rejected ({exc})"
    ok = gain > 0 and hist.error is None and rejected.startswith("rejected")
    report(capsys, 8, ok, f"mass-spring-damper n_w=1: likelihood gain {gain:.3f}; latent-states baseline {rejected}")


def test_criterion_09_convergence_ordering(capsys):
    cfg = ExperimentConfig(kind="convergence")
    t0 = time.perf_counter()
    text = run_experiment(cfg, 0)
    wall = time.perf_counter() - t0
    summary = convergence_summary(text)
    m_ld, per_ld = summary["latent-disturbances"]
    m_ls, per_ls = summary["latent-states"]
    # secondary view: iterations until each run is within 0.1 of the baseline's final value
    _, rows = read_csv_rows(text)
    reach = {}
    monotone = True
    for trial in range(cfg.trials):
        base = [float(r["loglik_gap"]) for r in rows if r["algorithm"] == "latent-states" and int(r["trial"]) == trial]
        for alg in ("latent-states", "latent-disturbances"):
            vals = [float(r["loglik_gap"]) for r in rows if r["algorithm"] == alg and int(r["trial"]) == trial]
            reach.setdefault(alg, []).append(iterations_to_level(vals, base[-1] - 0.1))
            monotone = monotone and bool(np.all(np.diff(vals) >= -1e-6))
    ok = m_ld < m_ls and wall < 1800 and cfg.trials >= 5 and cfg.T == 100 and monotone
    report(capsys, 9, ok,
           f"{cfg.trials} trials, T={cfg.T}: median iterations to within 0.1 of final "
           f"{m_ld:g} (latent disturbances, {per_ld}) vs {m_ls:g} (latent states, {per_ls}); "
           f"to within 0.1 of the baseline final {reach['latent-disturbances']} vs {reach['latent-states']}; "
           f"curves non-decreasing: {'yes' if monotone else 'NO'}; {wall / 60:.1f} min (limit 30)")


def test_criterion_10_bound_fidelity(capsys):
    g = sweep_gaps(run_experiment(ExperimentConfig(kind="bound-sweep"), 0))
    ok = (g["small"]["ld"] <= g["small"]["ls"] and g["large"]["ld"] > g["large"]["ls"]
          and g["dirac"]["ld_abs"] <= 1e-8)
    report(capsys, 10, ok,
           f"small: max L-Q_ld {g['small']['ld']:.4g} <= max L-Q_ls {g['small']['ls']:.4g}; "
           f"large: {g['large']['ld']:.4g} > {g['large']['ls']:.4g}; dirac: max |Q_ld-L| {g['dirac']['ld_abs']:.1e}")


def test_criterion_11_cross_term_inequality(capsys):
    rng = np.random.default_rng(11)
    worst, worst_eq = np.inf, 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        x, xn = rng.standard_normal(n), rng.standard_normal(n)
        H, F = rng.standard_normal((n, n)), rng.standard_normal((n, n))
        R = rng.standard_normal((n, n))
        P = R @ R.T + 0.05 * np.eye(n)
        lhs, rhs = cross_term_bound(x, xn, H, F, P)
        worst = min(worst, rhs - lhs)
        lhs, rhs = cross_term_bound(x, np.linalg.solve(P, H.T @ F @ x), H, F, P)
        worst_eq = max(worst_eq, abs(lhs - rhs) / max(1.0, abs(rhs)))
    report(capsys, 11, worst >= 0 and worst_eq <= 1e-10,
           f"1000 samples: min rhs - lhs = {worst:.3e}; equality case max relative error {worst_eq:.1e} (tol 1e-10)")


DETERMINISM_CONFIGS = {
    "bound-sweep": {},
    "convergence": dict(n_x=2, T=40, trials=2, max_iters=2, baseline_max_iters=50),
    "stability": dict(max_iters=2),
    "singular": dict(T=60, max_iters=2),
}


def test_criterion_12_determinism(capsys):
    same = {}
    for kind, over in DETERMINISM_CONFIGS.items():
        cfg = ExperimentConfig.from_mapping(dict(kind=kind, **over))
        a, b = run_experiment(cfg, 0), run_experiment(cfg, 0)
        same[kind] = a == b
        if kind == "stability":
            STABILITY_CACHE["text"] = a
    report(capsys, 12, all(same.values()),
           "byte-identical repeat runs: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in same.items()))


def test_stability_experiment_shows_baseline_instability():
    text = STABILITY_CACHE.get("text") or run_experiment(
        ExperimentConfig.from_mapping(dict(kind="stability", **DETERMINISM_CONFIGS["stability"])), 0)
    _, rows = read_csv_rows(text)
    base = [r for r in rows if r["algorithm"] == "latent-states"]
    dist = [r for r in rows if r["algorithm"] == "latent-disturbances"]
    unstable = [i for i, r in enumerate(base) if float(r["spectral_radius"]) >= 1]
    assert unstable
    assert all(float(r["spectral_radius"]) < 1 for r in dist)
    # the likelihood keeps increasing while the baseline iterates are unstable
    L = [float(r["loglik"]) for r in base[:unstable[-1] + 2]]
    assert np.all(np.diff(L) >= -1e-6)
