"""Path-space ELBO, the three gradient estimators, and gradient-variance probes.

With the OU prior ``f_p = -w`` and shared diffusion ``sigma I``, the
per-path ELBO estimators are

* ``standard``: ``loglik - kl``
* ``fullmc``:   ``loglik - kl - mart``
* ``stl``:      as ``fullmc`` but the martingale integrand sees ``phi``
  through a stop-gradient, so only its dependence on the sampled path is
  differentiated.

where ``kl = int 1/2 |u|^2 dt`` and ``mart = int u dB`` with
``u = (f_q - f_p) / sigma``.  All three have the same expectation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .brownian import BrownianBatch, BrownianPath, SeedKey
from .errors import ConfigError, DomainError
from .metrics import Likelihood
from .model import PriorSpec, SdeBnnModel
from .nets import PosteriorDriftNet
from .sde import ESTIMATORS, AugmentedState, SolverConfig, grad_adjoint, grad_backprop, solve

__all__ = [
    "PriorSpec", "ElboBreakdown", "kl_closed_form_check", "elbo_loss", "elbo_estimate",
    "elbo_and_grad", "LatentToy", "exp_brownian_toy", "conjugate_toy", "cauchy_toy", "FeatureDrift",
    "grad_variance_probe", "ESTIMATORS",
]


def _check_estimator(estimator: str):
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


@dataclass
class ElboBreakdown:
    """Monte Carlo ELBO estimate, averaged over sampled paths."""

    loglik: float
    kl: float
    mart: float
    estimator: str
    value: float
    n_samples: int = 1

    def to_dict(self) -> dict:
        return {"elbo": self.value, "loglik": self.loglik, "kl": self.kl, "mart": self.mart,
                "estimator": self.estimator}


def _combine(loglik, kl, mart, estimator: str, beta: float):
    if estimator == "standard":
        return loglik - kl * beta
    return loglik - (kl + mart) * beta


def kl_closed_form_check(a: float, b: float, sigma: float, T: float = 1.0) -> float:
    """Exact path-space KL between SDEs with constant drifts ``b`` and ``a``."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    return T * (b - a) ** 2 / (2.0 * sigma**2)


def elbo_loss(likelihood: Likelihood, y, estimator: str = "stl", scale: float = 1.0,
              beta: float = 1.0) -> Callable:
    """Loss ``-ELBO`` (path average) built from the final augmented state.

    ``scale`` multiplies the minibatch log-likelihood (``N / batch_size`` for
    full-dataset units).
    """
    _check_estimator(estimator)

    def loss_fn(final: AugmentedState, params: Mapping[str, ad.Node]) -> ad.Node:
        ll = ad.sum(likelihood.log_prob(final.h, y, params.get("readout")), axis=-1) * scale
        value = _combine(ll, final.kl, final.mart, estimator, beta)
        return ad.sum(value) * (-1.0 / value.shape[0])

    return loss_fn


def _breakdown(model, likelihood, final, y, estimator, scale, beta) -> ElboBreakdown:
    ll = np.sum(likelihood.log_prob(final.h, y, model.params.get("readout")).value, axis=-1) * scale
    kl, mart = np.asarray(final.kl), np.asarray(final.mart)
    value = _combine(ll, kl, mart, estimator, beta)
    return ElboBreakdown(float(ll.mean()), float(kl.mean()), float(mart.mean()), estimator,
                         float(value.mean()), n_samples=len(ll))


def elbo_estimate(model: SdeBnnModel, likelihood: Likelihood, batch, paths,
                  cfg: SolverConfig = SolverConfig(), estimator: str = "stl",
                  n_data: int | None = None, beta: float = 1.0) -> ElboBreakdown:
    """ELBO of a minibatch ``(x, y)`` averaged over every path in ``paths``."""
    _check_estimator(estimator)
    x, y = batch
    scale = 1.0 if n_data is None else n_data / len(y)
    traj = solve(model, x, paths, cfg, estimator=estimator)
    return _breakdown(model, likelihood, traj.final, y, estimator, scale, beta)


def elbo_and_grad(model: SdeBnnModel, likelihood: Likelihood, batch, paths, cfg: SolverConfig,
                  estimator: str = "stl", n_data: int | None = None, beta: float = 1.0,
                  method: str = "backprop"):
    """ELBO breakdown and gradients of ``-ELBO`` for all model parameters."""
    x, y = batch
    scale = 1.0 if n_data is None else n_data / len(y)
    loss_fn = elbo_loss(likelihood, y, estimator, scale, beta)
    if method == "backprop":
        res = grad_backprop(loss_fn, model, x, paths, cfg, estimator)
    elif method == "adjoint":
        res = grad_adjoint(loss_fn, model, x, paths, cfg, estimator)
    else:
        raise ConfigError(f"unknown gradient method {method!r}")
    return _breakdown(model, likelihood, res.final, y, estimator, scale, beta), res.grads


class FeatureDrift:
    """Drift gap linear in two fixed features: ``k(t) * (phi_0 - phi_1 * m(t) * w)``.

    Used for the conjugate OU toy, where the exact posterior drift gap has
    exactly this form at ``phi = (y, 1)``.
    """

    weight_dim = 1
    n_params = 2

    def __init__(self, k: Callable[[float], float], m: Callable[[float], float]):
        self.k, self.m = k, m

    def __call__(self, t: float, w: ad.Node, phi: ad.Node) -> ad.Node:
        w, phi = ad.as_node(w), ad.as_node(phi)
        n = w.shape[0]
        a = ad.expand(phi[0:1], 0, n)
        b = ad.expand(phi[1:2], 0, n)
        return (a - ad.mul(b, w) * self.m(t)) * self.k(t)


@dataclass
class LatentToy:
    """A one-dimensional latent SDE observed at grid times.

    ``obs_steps`` are indices into the solver grid, ``y`` the observed values.
    """

    name: str
    model: SdeBnnModel
    likelihood: Likelihood
    obs_steps: Sequence[int]
    y: np.ndarray
    cfg: SolverConfig

    def observe(self, i: int, t: float, state: AugmentedState):
        hits = [k for k, s in enumerate(self.obs_steps) if s == i]
        if not hits:
            return None
        total = None
        for k in hits:
            lp = self.likelihood.log_prob(ad.reshape(state.w, (state.w.shape[0], 1, 1)),
                                          np.array([self.y[k]]))
            lp = ad.sum(lp, axis=-1)
            total = lp if total is None else total + lp
        return total

    def loss_fn(self, estimator: str, beta: float = 1.0) -> Callable:
        _check_estimator(estimator)

        def loss(final, params):
            ll = params.get("__obs_loglik__")
            if ll is None:
                ll = ad.as_node(np.zeros(final.kl.shape))
            value = _combine(ll, final.kl, final.mart, estimator, beta)
            return ad.sum(value) * (-1.0 / value.shape[0])

        return loss

    def grad(self, model: SdeBnnModel, paths, estimator: str):
        return grad_backprop(self.loss_fn(estimator), model, None, paths, self.cfg,
                             estimator, observe=self.observe)

    def sample(self, model: SdeBnnModel, paths) -> np.ndarray:
        """Posterior weight paths on the solver grid, shape (P, steps + 1)."""
        traj = solve(model, None, paths, self.cfg, retain=True)
        return np.stack([s.w[:, 0] for s in traj.states], axis=1)


def exp_brownian_toy(sigma: float = 0.5, seed: int = 0, n_obs: int = 10, steps: int = 40,
                     obs_scale: float = 0.2, hidden: Sequence[int] = (32,)) -> LatentToy:
    """Fit a latent OU-prior SDE to ``exp(b_t)`` observed at ``n_obs`` uniform times.

    ``b`` is one fixed Brownian sample (path id ``2**63``, reserved for data).
    The process starts at ``w0 = exp(b_0) = 1``.
    """
    if steps % n_obs:
        raise ConfigError("steps must be a multiple of n_obs so observations sit on the grid")
    cfg = SolverConfig(steps=steps)
    times = cfg.grid()
    obs_steps = [steps // n_obs * k for k in range(1, n_obs + 1)]
    target = BrownianPath(SeedKey(seed, 2**63), 1).values(times[obs_steps], snap=True)[:, 0]
    y = np.exp(target)
    drift = PosteriorDriftNet(1, hidden=hidden)
    rng = np.random.default_rng(seed)
    model = SdeBnnModel(PriorSpec(sigma), drift, None,
                        {"phi": drift.init_params(rng), "w0": np.ones(1)})
    lik = Likelihood("gaussian", scale=obs_scale, readout=False)
    return LatentToy("exp_brownian", model, lik, obs_steps, y, cfg)


def conjugate_toy(sigma: float = 0.5, y: float = 1.0, obs_scale: float = 0.3,
                  steps: int = 64) -> LatentToy:
    """OU prior from ``w0 = 0`` with one Gaussian observation of ``w_1``.

    The exact posterior is an OU-bridge-like Gaussian process whose drift gap
    ``sigma^2 d/dw log p(y | w_t = w)`` is representable by :class:`FeatureDrift`.
    """
    def mean_factor(t):
        return np.exp(-(1.0 - t))

    def gain(t):
        var = 0.5 * sigma**2 * (1.0 - np.exp(-2.0 * (1.0 - t)))
        return sigma**2 * mean_factor(t) / (var + obs_scale**2)

    drift = FeatureDrift(gain, mean_factor)
    model = SdeBnnModel(PriorSpec(sigma), drift, None, {"phi": np.zeros(2), "w0": np.zeros(1)})
    lik = Likelihood("gaussian", scale=obs_scale, readout=False)
    return LatentToy("conjugate", model, lik, [steps], np.array([y]), SolverConfig(steps=steps))


def cauchy_toy(values=(1.0, -1.0), time: float = 0.5, obs_scale: float = 0.1, sigma: float = 1.0,
               steps: int = 16, hidden: Sequence[int] = (32, 32), seed: int = 0) -> LatentToy:
    """Latent OU-prior SDE from ``w0 = 0`` with Cauchy observations of ``w_time``.

    With the defaults (``y = +1`` and ``y = -1`` both observed at ``t = 0.5``)
    the posterior marginal at ``t = 0.5`` has two well separated modes.
    """
    cfg = SolverConfig(steps=steps)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    obs_step = int(round(time * steps))
    if not np.isclose(obs_step / steps, time):
        raise ConfigError(f"observation time {time} is not on the {steps}-step grid")
    drift = PosteriorDriftNet(1, hidden=hidden)
    model = SdeBnnModel(PriorSpec(sigma), drift, None,
                        {"phi": drift.init_params(np.random.default_rng(seed)), "w0": np.zeros(1)})
    lik = Likelihood("cauchy", scale=obs_scale, readout=False)
    return LatentToy("cauchy2", model, lik, [obs_step] * len(values), values, cfg)


@dataclass
class VarianceSummary:
    estimator: str
    mean_grad: np.ndarray
    var_per_param: float
    mean_grad_norm: float
    var_grad_norm: float
    n_samples: int

    def to_row(self, step: int = 0) -> dict:
        return {"estimator": self.estimator, "step": step, "mean_grad_norm": self.mean_grad_norm,
                "var_grad": self.var_per_param, "var_grad_norm": self.var_grad_norm}


def grad_variance_probe(model: SdeBnnModel, problem: LatentToy, estimator: str,
                        n_grad_samples: int = 200, seed: int = 12345,
                        first_path: int = 0) -> VarianceSummary:
    """Variance of single-path gradients of ``-ELBO`` w.r.t. ``phi``.

    Path ids ``first_path .. first_path + n_grad_samples - 1`` are used, so
    probes for different estimators share their noise.
    """
    _check_estimator(estimator)
    grads = []
    for i in range(n_grad_samples):
        path = BrownianBatch(seed, [first_path + i], model.weight_dim)
        grads.append(problem.grad(model, path, estimator).grads["phi"])
    g = np.array(grads)
    norms = np.linalg.norm(g, axis=1)
    return VarianceSummary(estimator, g.mean(axis=0), float(g.var(axis=0, ddof=1).mean()),
                           float(norms.mean()), float(norms.var(ddof=1)), n_grad_samples)
