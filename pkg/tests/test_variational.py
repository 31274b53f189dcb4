import numpy as np
import pytest

from sdebnn import autodiff as ad
from sdebnn.brownian import BrownianBatch
from sdebnn.errors import ConfigError, DomainError
from sdebnn.metrics import Likelihood
from sdebnn.model import build_model
from sdebnn.sde import SolverConfig, solve
from sdebnn.variational import (ESTIMATORS, conjugate_toy, elbo_and_grad, elbo_estimate,
                                exp_brownian_toy, grad_variance_probe, kl_closed_form_check)

from conftest import AffineDrift, ConstDrift, latent_model


def test_kl_closed_form_examples():
    assert kl_closed_form_check(0.3, 0.3, 1.0) == 0.0
    assert kl_closed_form_check(0.0, 1.0, 1.0, 1.0) == 0.5
    assert kl_closed_form_check(0.0, 1.0, 2.0) == pytest.approx(0.5 / 4)
    with pytest.raises(DomainError):
        kl_closed_form_check(0.0, 1.0, 0.0)


@pytest.mark.parametrize("steps", [16, 32, 64, 128, 256, 512])
def test_constant_gap_kl_accumulator(steps):
    # f_q - f_p = b - a = 1, sigma = 1 over unit horizon
    m = latent_model(ConstDrift(), 1.0, [1.0], np.zeros(1))
    kl = solve(m, None, BrownianBatch(0, np.arange(8), 1), SolverConfig(steps=steps)).final.kl
    assert np.max(np.abs(kl - kl_closed_form_check(0.0, 1.0, 1.0))) <= 1.0 / steps


def toy_regression_model(seed=0):
    rng = np.random.default_rng(seed)
    model = build_model(2, rng, sigma=0.1, width=4, drift_hidden=(2, 8, 2))
    lik = Likelihood("gaussian", scale=0.5)
    model = model.with_params(readout=lik.init_readout(2, rng))
    x, y = rng.normal(size=(6, 2)), rng.normal(size=6)
    return model, lik, x, y


@pytest.mark.parametrize("estimator", ESTIMATORS)
def test_zero_init_elbo_is_loglik(estimator):
    model, lik, x, y = toy_regression_model()
    br = elbo_estimate(model, lik, (x, y), BrownianBatch(0, np.arange(3), model.weight_dim),
                       SolverConfig(steps=8), estimator)
    assert br.kl == 0.0 and br.mart == 0.0 and br.value == br.loglik


def test_loglik_rescaled_to_dataset_units():
    model, lik, x, y = toy_regression_model()
    paths = BrownianBatch(0, [0], model.weight_dim)
    a = elbo_estimate(model, lik, (x, y), paths, SolverConfig(steps=4), "standard")
    b = elbo_estimate(model, lik, (x, y), paths, SolverConfig(steps=4), "standard", n_data=60)
    assert b.loglik == pytest.approx(10 * a.loglik, rel=1e-14)


def test_unknown_estimator():
    model, lik, x, y = toy_regression_model()
    with pytest.raises(ConfigError):
        elbo_estimate(model, lik, (x, y), BrownianBatch(0, [0], model.weight_dim), estimator="iwae")


def test_estimators_differ_only_by_mart_and_agree_in_mean():
    n = 10_000
    m = latent_model(AffineDrift(), 0.5, [0.4, -0.3, 0.6], [0.2])
    traj = solve(m, None, BrownianBatch(1, np.arange(n), 1), SolverConfig(steps=32))
    ll = -traj.final.w[:, 0] ** 2
    std = ll - traj.final.kl
    full = std - traj.final.mart
    se = np.sqrt(np.var(std) / n + np.var(full) / n)
    assert abs(std.mean() - full.mean()) < 3 * se
    assert abs(traj.final.mart.mean()) < 3 * traj.final.mart.std() / np.sqrt(n)


def test_elbo_and_grad_methods_agree():
    model, lik, x, y = toy_regression_model()
    model = model.with_params(phi=0.1 * np.random.default_rng(1).normal(size=model.params["phi"].shape))
    paths = BrownianBatch(0, np.arange(2), model.weight_dim)
    a, ga = elbo_and_grad(model, lik, (x, y), paths, SolverConfig(steps=8), "stl")
    b, gb = elbo_and_grad(model, lik, (x, y), paths, SolverConfig(steps=8), "stl", method="adjoint")
    assert a.value == pytest.approx(b.value, rel=1e-13)
    for k in ga:
        np.testing.assert_allclose(gb[k], ga[k], rtol=1e-9, atol=1e-12)
    with pytest.raises(ConfigError):
        elbo_and_grad(model, lik, (x, y), paths, SolverConfig(steps=8), method="finite")


def test_conjugate_toy_exact_posterior_moments():
    toy = conjugate_toy(sigma=0.5, y=1.0, obs_scale=0.3)
    m = toy.model.with_params(phi=np.array([1.0, 1.0]))
    w1 = toy.sample(m, BrownianBatch(0, np.arange(10_000), 1))[:, -1]
    v1 = 0.25 / 2 * (1 - np.exp(-2))
    mean = v1 / (v1 + 0.09)
    assert abs(w1.mean() - mean) < 3 * w1.std() / 100 + 0.01


def test_conjugate_toy_stl_variance_vanishes_at_optimum():
    toy = conjugate_toy()
    m = toy.model.with_params(phi=np.array([1.0, 1.0]))
    stl = grad_variance_probe(m, toy, "stl", 100)
    std = grad_variance_probe(m, toy, "standard", 100)
    assert stl.var_per_param < 0.05 * std.var_per_param


def test_gradient_estimators_unbiased():
    toy = conjugate_toy()
    m = toy.model.with_params(phi=np.array([0.4, 0.2]))
    probes = {e: grad_variance_probe(m, toy, e, 400, seed=7) for e in ESTIMATORS}
    for a in ESTIMATORS:
        for b in ESTIMATORS:
            pa, pb = probes[a], probes[b]
            se = np.sqrt(pa.var_per_param / 400 + pb.var_per_param / 400)
            assert np.all(np.abs(pa.mean_grad - pb.mean_grad) < 3 * se + 1e-12), (a, b)


def test_variance_rows_schema():
    toy = conjugate_toy(steps=8)
    row = grad_variance_probe(toy.model, toy, "fullmc", 5).to_row(3)
    assert list(row) == ["estimator", "step", "mean_grad_norm", "var_grad", "var_grad_norm"]
    assert row["estimator"] == "fullmc" and row["step"] == 3


def test_exp_brownian_toy_layout():
    toy = exp_brownian_toy(n_obs=10, steps=40)
    assert toy.obs_steps == [4 * k for k in range(1, 11)]
    assert np.all(toy.y > 0) and toy.model.params["w0"][0] == 1.0
    with pytest.raises(ConfigError):
        exp_brownian_toy(n_obs=3, steps=40)


# -- two-observation Cauchy toy ----------------------------------------------------


def _modes(x):
    from scipy.signal import find_peaks
    from scipy.stats import gaussian_kde
    g = np.linspace(x.min(), x.max(), 512)
    d = gaussian_kde(x)(g)
    return g[find_peaks(d, prominence=0.05 * d.max())[0]]


def test_cauchy_toy_layout():
    from sdebnn.variational import cauchy_toy
    toy = cauchy_toy()
    assert toy.obs_steps == [8, 8] and toy.y.tolist() == [1.0, -1.0]
    assert toy.likelihood.kind == "cauchy" and toy.model.params["w0"][0] == 0.0


def test_cauchy_empty_dataset_posterior_is_prior():
    from sdebnn.train import fit_latent
    from sdebnn.variational import cauchy_toy
    toy = cauchy_toy(values=())
    paths = BrownianBatch(0, np.arange(16), 1)
    res = toy.grad(toy.model, paths, "stl")
    assert res.value == 0.0
    assert not res.grads["phi"].any()
    # from a perturbed drift, fitting drives the KL back toward zero
    phi = 0.3 * np.random.default_rng(0).normal(size=toy.model.params["phi"].shape)
    toy.model = toy.model.with_params(phi=phi)
    before = toy.grad(toy.model, paths, "stl").value
    fitted = fit_latent(toy, "stl", 150, lr=1e-2, n_paths=8, seed=1).model
    after = toy.grad(fitted, paths, "stl").value
    assert before > 0.05 and after < 0.1 * before


@pytest.mark.slow
def test_cauchy_single_observation_is_unimodal():
    from sdebnn.train import fit_latent
    from sdebnn.variational import cauchy_toy
    toy = cauchy_toy(values=(1.0,))
    model = fit_latent(toy, "stl", 1500, lr=1e-2, n_paths=16, seed=0).model
    w = toy.sample(model, BrownianBatch(99, np.arange(10_000), 1))[:, toy.obs_steps[0]]
    modes = _modes(w)
    assert len(modes) == 1 and modes[0] > 0.3
