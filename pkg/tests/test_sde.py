import numpy as np
import pytest

from sdebnn import autodiff as ad
from sdebnn.brownian import BrownianBatch, BrownianPath, SeedKey
from sdebnn.errors import BudgetExceeded, ConfigError, ContractError, IntegrationDiverged
from sdebnn.model import PriorSpec, SdeBnnModel, build_model
from sdebnn.nets import HiddenDynamics, PosteriorDriftNet
from sdebnn.sde import (ESTIMATORS, AugmentedState, SolverConfig, em_step, grad_adjoint,
                        grad_backprop, solve)

from conftest import AffineDrift, ConstDrift, central_diff, latent_model, rel_err


def state(w, kl=0.0, mart=0.0):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    n = w.shape[0]
    return AugmentedState(w, None, np.full(n, kl), np.full(n, mart))


def test_zero_gap_keeps_accumulators_exactly_zero():
    m = latent_model(ConstDrift(3), 0.1, [0.0], np.zeros(3))
    s = state(np.ones((2, 3)))
    for i in range(5):
        s = em_step(s, 0.1 * i, 0.1, np.full((2, 3), 0.3), m)
    assert np.all(s.kl == 0.0) and np.all(s.mart == 0.0)


def test_single_ou_step_without_noise():
    m = latent_model(ConstDrift(), 0.1, [0.0], np.zeros(1))
    assert em_step(state([[1.0]]), 0.0, 0.5, np.zeros((1, 1)), m).w[0, 0] == 0.5


def test_constant_gap_kl_increment():
    # gap b - a = 1 with sigma = 1: 0.5 * 1 * dt
    m = latent_model(ConstDrift(), 1.0, [1.0], np.zeros(1))
    out = em_step(state([[0.0]]), 0.0, 0.1, np.zeros((1, 1)), m)
    assert out.kl[0] == pytest.approx(0.05, abs=1e-15)


def test_mart_increment_is_u_dot_noise():
    m = latent_model(ConstDrift(2), 0.5, [0.25], np.zeros(2))
    out = em_step(state([[0.0, 0.0]]), 0.0, 0.1, np.array([[0.2, -0.4]]), m)
    assert out.mart[0] == pytest.approx(0.5 * (0.2 - 0.4), abs=1e-15)


def test_divergence_names_time():
    m = latent_model(ConstDrift(), 0.1, [np.inf], np.zeros(1))
    with pytest.raises(IntegrationDiverged, match="t=0.25"):
        em_step(state([[0.0]]), 0.25, 0.1, np.zeros((1, 1)), m)


def test_em_step_contract_checks():
    m = latent_model(ConstDrift(), 0.1, [0.0], np.zeros(1))
    with pytest.raises(ContractError):
        em_step(state([[0.0]]), 0.0, 0.0, np.zeros((1, 1)), m)
    with pytest.raises(ContractError):
        em_step(state([[0.0]]), 0.0, 0.1, np.zeros((1, 2)), m)
    with pytest.raises(ConfigError):
        em_step(state([[0.0]]), 0.0, 0.1, np.zeros((1, 1)), m, estimator="reinforce")


def test_deterministic_linear_ode_limit():
    m = latent_model(ConstDrift(), 0.0, [0.0], np.ones(1))
    w1 = solve(m, None, BrownianPath(SeedKey(0, 0), 1), SolverConfig(steps=1024)).final.w[0, 0]
    assert w1 == pytest.approx((1 - 1 / 1024) ** 1024, rel=1e-12)
    assert abs(w1 - np.exp(-1)) < 2e-4


def test_ode_solve_equals_residual_network():
    rng = np.random.default_rng(0)
    hidden = HiddenDynamics(2, width=5)
    drift = PosteriorDriftNet(hidden.weight_dim, hidden=(2, 4, 2))
    m = SdeBnnModel(PriorSpec(0.0), drift, hidden,
                    {"phi": drift.init_params(rng), "w0": hidden.init_weights(rng)})
    x = rng.normal(size=(3, 2))
    n = 8
    traj = solve(m, x, BrownianBatch(0, [0], m.weight_dim), SolverConfig(steps=n))
    h, w, eps = x[None], m.params["w0"][None], 1.0 / n
    for k in range(n):
        h = h + eps * hidden(k * eps, h, w).value
        w = w - eps * w
    np.testing.assert_allclose(traj.final.h, h, rtol=0, atol=1e-14)


def test_zero_init_posterior_matches_prior_em():
    sigma, n = 0.3, 16
    m = latent_model(ConstDrift(2), sigma, [0.0], np.array([0.5, -1.0]))
    paths = BrownianBatch(4, np.arange(5), 2)
    traj = solve(m, None, paths, SolverConfig(steps=n), retain=True)
    w = np.tile(m.params["w0"], (5, 1))
    inc = paths.grid_increments(n)
    for i in range(n):
        w = w - w / n + sigma * inc[:, i]
    np.testing.assert_array_equal(traj.final.w, w)
    assert all(np.all(s.kl == 0) for s in traj.states)


def test_kl_non_decreasing_along_trajectory():
    m = latent_model(AffineDrift(), 0.2, [0.5, -1.0, 0.3], np.ones(1))
    traj = solve(m, None, BrownianBatch(1, np.arange(8), 1), SolverConfig(steps=32), retain=True)
    kl = np.array([s.kl for s in traj.states])
    assert np.all(np.diff(kl, axis=0) >= 0)
    assert traj.times[0] == 0.0 and traj.times[-1] == 1.0 and len(traj.states) == 33


def test_states_only_retained_on_request():
    m = latent_model(ConstDrift(), 0.1, [0.0], np.zeros(1))
    assert solve(m, None, BrownianBatch(0, [0], 1), SolverConfig(steps=4)).states == []


def test_ou_variance_small_budget():
    n = 4000
    m = latent_model(ConstDrift(), 0.1, [0.0], np.zeros(1))
    w1 = solve(m, None, BrownianBatch(0, np.arange(n), 1), SolverConfig(steps=64)).final.w[:, 0]
    var = 0.01 / 2 * (1 - np.exp(-2))
    assert abs(w1.var() - var) < 3 * var * np.sqrt(2 / n)


def test_mismatched_brownian_dimension():
    m = latent_model(ConstDrift(2), 0.1, [0.0], np.zeros(2))
    with pytest.raises(ContractError):
        solve(m, None, BrownianBatch(0, [0], 3), SolverConfig(steps=4))


# -- gradients ---------------------------------------------------------------------


def oracle_objective(phi, w0, phi_bar, sigma, inc, estimator):
    """Independent numpy re-implementation for AffineDrift: mean of w1^2 + kl (+ mart)."""
    n = inc.shape[1]
    dt = 1.0 / n
    w = np.full(inc.shape[0], w0)
    kl = np.zeros_like(w)
    mart = np.zeros_like(w)
    for i in range(n):
        t = i * dt
        nn = phi[0] * w + phi[1] * t + phi[2]
        nb = phi_bar[0] * w + phi_bar[1] * t + phi_bar[2]
        db = inc[:, i, 0]
        kl += 0.5 * (nn / sigma) ** 2 * dt
        u_m = {"fullmc": nn, "stl": nb, "standard": 0.0 * nn}[estimator] / sigma
        mart += u_m * db
        w = w + (nn - w) * dt + sigma * db
    return float(np.mean(w**2 + kl + mart))


def sq_loss(final, params):
    return ad.sum(ad.sum(ad.square(final.w), axis=-1) + final.kl + final.mart) * (1.0 / final.w.shape[0])


@pytest.mark.parametrize("estimator", ESTIMATORS)
def test_backprop_matches_finite_differences(estimator):
    sigma, phi, w0 = 0.4, np.array([0.3, -0.5, 0.2]), 0.7
    paths = BrownianBatch(2, np.arange(4), 1)
    inc = paths.grid_increments(16)
    m = latent_model(AffineDrift(), sigma, phi, [w0])
    g = grad_backprop(sq_loss, m, None, paths, SolverConfig(steps=16), estimator).grads
    fd_phi = central_diff(lambda p: oracle_objective(p, w0, phi, sigma, inc, estimator), phi)
    fd_w0 = central_diff(lambda v: oracle_objective(phi, v[0], phi, sigma, inc, estimator), [w0])
    assert rel_err(g["phi"], fd_phi) < 1e-6
    assert rel_err(g["w0"], fd_w0) < 1e-6


def test_stl_and_fullmc_share_value_but_not_gradient():
    m = latent_model(AffineDrift(), 0.4, [0.3, -0.5, 0.2], [0.7])
    paths = BrownianBatch(2, np.arange(4), 1)
    a = grad_backprop(sq_loss, m, None, paths, SolverConfig(steps=8), "fullmc")
    b = grad_backprop(sq_loss, m, None, paths, SolverConfig(steps=8), "stl")
    assert a.value == b.value
    assert not np.allclose(a.grads["phi"], b.grads["phi"])


def test_scalar_linear_chain_rule():
    # sigma = 0, NN = a * w: w1 = (1 + (a - 1) dt)^n w0
    a, w0, n = 0.4, 1.3, 10
    m = latent_model(AffineDrift(), 0.0, [a, 0.0, 0.0], [w0])
    r = grad_backprop(sq_loss, m, None, BrownianBatch(0, [0], 1), SolverConfig(steps=n), "standard")
    q = 1 + (a - 1) / n
    w1 = q**n * w0
    assert r.grads["w0"][0] == pytest.approx(2 * w1 * q**n, rel=1e-12)
    assert r.grads["phi"][0] == pytest.approx(2 * w1 * n * q ** (n - 1) * w0 / n, rel=1e-12)


def test_zero_loss_zero_gradient():
    m = latent_model(AffineDrift(), 0.4, [0.3, -0.5, 0.2], [0.7])
    zero = lambda final, params: ad.sum(final.kl) * 0.0
    g = grad_backprop(zero, m, None, BrownianBatch(0, [0, 1], 1), SolverConfig(steps=4)).grads
    assert not g["phi"].any() and not g["w0"].any()


def small_bnn(seed=0, sigma=0.2):
    rng = np.random.default_rng(seed)
    m = build_model(2, rng, sigma=sigma, width=4, drift_hidden=(2, 6, 2))
    return m.with_params(phi=0.3 * rng.normal(size=m.params["phi"].shape)), rng.normal(size=(3, 2))


def h_loss(final, params):
    return ad.sum(ad.sum(ad.sum(ad.tanh(final.h), axis=-1), axis=-1) - final.kl - final.mart) * 0.5


@pytest.mark.parametrize("estimator", ESTIMATORS)
@pytest.mark.parametrize("steps", [8, 10])
def test_adjoint_matches_backprop(estimator, steps):
    m, x = small_bnn()
    paths = BrownianBatch(3, np.arange(2), m.weight_dim)
    cfg = SolverConfig(steps=steps)
    a = grad_backprop(h_loss, m, x, paths, cfg, estimator)
    b = grad_adjoint(h_loss, m, x, paths, cfg, estimator)
    for k in a.grads:
        assert rel_err(b.grads[k], a.grads[k]) < 1e-10, k
    assert a.value == pytest.approx(b.value, rel=1e-14)


def test_adjoint_ode_case():
    m, x = small_bnn(sigma=0.0)
    paths = BrownianBatch(3, [0], m.weight_dim)
    a = grad_backprop(h_loss, m, x, paths, SolverConfig(steps=8))
    b = grad_adjoint(h_loss, m, x, paths, SolverConfig(steps=8))
    assert rel_err(b.grads["w0"], a.grads["w0"]) < 1e-10


def test_peak_state_counter():
    m, x = small_bnn()
    paths = BrownianBatch(3, [0], m.weight_dim)
    for n in (4, 16, 32):
        cfg = SolverConfig(steps=n)
        assert grad_backprop(h_loss, m, x, paths, cfg).peak_states == n + 1
        assert grad_adjoint(h_loss, m, x, paths, cfg).peak_states == 1


def test_gradients_need_fixed_mode():
    m, x = small_bnn()
    with pytest.raises(ConfigError):
        grad_backprop(h_loss, m, x, BrownianBatch(0, [0], m.weight_dim), SolverConfig(mode="adaptive"))


# -- adaptive ----------------------------------------------------------------------


def test_adaptive_grid_is_dyadic_and_ends_at_one():
    m = latent_model(AffineDrift(), 0.3, [1.5, 0.0, 0.0], [1.0])
    traj = solve(m, None, BrownianBatch(0, np.arange(4), 1), SolverConfig(mode="adaptive", rtol=1e-2, atol=1e-3))
    t = traj.times
    assert t[0] == 0.0 and t[-1] == 1.0 and np.all(np.diff(t) > 0)
    assert np.all(t * 2**12 == np.round(t * 2**12))


def test_adaptive_budget():
    m = latent_model(AffineDrift(), 0.3, [1.5, 0.0, 0.0], [1.0])
    with pytest.raises(BudgetExceeded):
        solve(m, None, BrownianBatch(0, [0], 1), SolverConfig(mode="adaptive", rtol=1e-6, atol=1e-8, max_steps=20))


def test_adaptive_tightening_never_hurts_ou_mean():
    n = 2000
    m = latent_model(ConstDrift(), 0.1, [0.0], np.ones(1))
    paths = BrownianBatch(5, np.arange(n), 1)
    errs = []
    for tol in (1e-1, 1e-2, 1e-3, 1e-4):
        w1 = solve(m, None, paths, SolverConfig(mode="adaptive", rtol=tol, atol=tol)).final.w[:, 0]
        errs.append(abs(w1.mean() - np.exp(-1)))
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs


def test_solver_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(mode="rk4")
    with pytest.raises(ConfigError):
        SolverConfig(steps=0)
    with pytest.raises(ConfigError):
        SolverConfig(dt0=0.3)
