"""Integration of the augmented SDE and its two gradient paths.

The augmented state carries the weights ``w``, the hidden units ``h``, and two
running integrals: the KL accumulator ``int 1/2 |u|^2 dt`` and the martingale
accumulator ``int u dB``.  Shapes carry a leading path axis ``P``: ``w`` is
(P, D_w), ``h`` is (P, B, D_h), ``kl`` and ``mart`` are (P,).  All minibatch
items of one path share that path's weight trajectory.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Generic, Mapping, TypeVar

import numpy as np

from . import autodiff as ad
from .brownian import BrownianBatch
from .errors import (BudgetExceeded, ConfigError, ContractError, IntegrationDiverged,
                     ReconstructionError)
from .model import SdeBnnModel

log = logging.getLogger(__name__)

T = TypeVar("T")

# martingale treatment per gradient estimator:
#   standard - value recorded, no gradient; fullmc - gradient flows everywhere;
#   stl - phi enters through a stop-gradient, the path dependence stays live
MART_MODES = {"standard": "none", "fullmc": "live", "stl": "blocked"}
ESTIMATORS = tuple(MART_MODES)


@dataclass
class AugmentedState(Generic[T]):
    w: T
    h: T | None
    kl: T
    mart: T

    def numpy(self) -> "AugmentedState[np.ndarray]":
        val = lambda x: None if x is None else (x.value if isinstance(x, ad.Node) else np.asarray(x))
        return AugmentedState(val(self.w), val(self.h), val(self.kl), val(self.mart))


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``steps`` applies to fixed mode.  Powers of two align with the Brownian
    tree leaves; other counts are accepted and their grid times are snapped
    to the finest dyadic lattice.  Adaptive mode only ever halves or doubles
    dyadic steps between ``2**-max_depth`` and ``dt0 * 2**k <= 1``.
    """

    mode: str = "fixed"
    steps: int = 16
    rtol: float = 1e-3
    atol: float = 1e-4
    max_steps: int = 100_000
    dt0: float = 0.125
    max_depth: int = 12

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ConfigError(f"unknown solver mode {self.mode!r}")
        if self.steps < 1 or self.max_steps < 1:
            raise ConfigError("steps and max_steps must be positive")
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigError("rtol and atol must be positive")
        if not 1 <= self.max_depth <= 30:
            raise ConfigError("max_depth must be in [1, 30]")
        lvl = -np.log2(self.dt0)
        if lvl != int(lvl) or not 0 <= lvl <= self.max_depth:
            raise ConfigError(f"dt0 must be a power of two >= 2**-{self.max_depth}")

    @property
    def dyadic(self) -> bool:
        return self.steps & (self.steps - 1) == 0

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.steps + 1)


@dataclass
class Trajectory:
    times: np.ndarray
    final: AugmentedState
    states: list = field(default_factory=list)
    n_rejected: int = 0
    peak_states: int = 1
    loglik: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


@dataclass
class GradResult:
    value: float
    grads: dict
    final: AugmentedState
    peak_states: int


def _check_finite(t: float, *nodes):
    for n in nodes:
        if n is None:
            continue
        v = n.value if isinstance(n, ad.Node) else n
        if not np.all(np.isfinite(v)):
            finite = np.where(np.isfinite(v), v, 0.0)
            raise IntegrationDiverged(t, float(np.linalg.norm(finite)) if np.any(np.isfinite(v)) else np.inf)


def _step(model: SdeBnnModel, state: AugmentedState, t: float, dt: float, noise: np.ndarray,
          phi: ad.Node, mart_mode: str) -> AugmentedState:
    sigma = model.prior.sigma
    w, h = state.w, state.h
    nn = model.drift(t, w, phi)
    f_q = nn + model.prior.drift(w)
    w_new = w + f_q * dt
    h_new = h
    if model.hidden is not None:
        h_new = h + model.hidden(t, h, w) * dt
    if model.prior.is_ode:
        return AugmentedState(w_new, h_new, state.kl, state.mart)
    dB = ad.constant(noise)
    w_new = w_new + dB * sigma
    u = nn * (1.0 / sigma)
    kl = state.kl + ad.sum(ad.square(u), axis=-1) * (0.5 * dt)
    if mart_mode == "live":
        ub = u
    elif mart_mode == "blocked" and phi.requires_grad:
        ub = model.drift(t, w, ad.stop_gradient(phi)) * (1.0 / sigma)
    else:
        ub = ad.stop_gradient(u)
    mart = state.mart + ad.sum(ub * dB, axis=-1)
    return AugmentedState(w_new, h_new, kl, mart)


def em_step(state: AugmentedState, t: float, dt: float, noise, model: SdeBnnModel,
            estimator: str = "stl") -> AugmentedState:
    """One Euler-Maruyama step of the augmented system.

    ``noise`` is the Brownian increment over ``[t, t + dt]``.  Accepts numpy
    arrays (returns numpy) or graph nodes (returns nodes).
    """
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    if estimator not in MART_MODES:
        raise ConfigError(f"unknown estimator {estimator!r}")
    numeric = not isinstance(state.w, ad.Node)
    wrap = lambda x: None if x is None else ad.as_node(x)
    s = AugmentedState(wrap(state.w), wrap(state.h), wrap(state.kl), wrap(state.mart))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != s.w.shape:
        raise ContractError(f"noise shape {noise.shape} does not match weights {s.w.shape}")
    out = _step(model, s, t, dt, noise, ad.as_node(model.params["phi"]), MART_MODES[estimator])
    _check_finite(t, out.w, out.h, out.kl, out.mart)
    return out.numpy() if numeric else out


def initial_state(model: SdeBnnModel, h0, n_paths: int, w0=None) -> AugmentedState:
    """Replicate ``w0`` and ``h0`` (shape (B, D_h)) across ``n_paths`` paths."""
    w0 = ad.as_node(model.params["w0"] if w0 is None else w0)
    w = ad.expand(w0, 0, n_paths)
    h = None
    if model.hidden is not None:
        h0 = ad.as_node(h0)
        if h0.value.ndim != 2 or h0.shape[1] != model.state_dim:
            raise ContractError(f"h0 must have shape (batch, {model.state_dim}), got {h0.shape}")
        h = ad.expand(h0, 0, n_paths)
    zero = ad.constant(np.zeros(n_paths))
    return AugmentedState(w, h, zero, zero)


def _as_batch(path) -> BrownianBatch:
    if hasattr(path, "as_batch"):
        return path.as_batch()
    return path


def _check_path(model: SdeBnnModel, batch: BrownianBatch):
    if batch.dim != model.weight_dim:
        raise ContractError(f"Brownian dimension {batch.dim} != weight dimension {model.weight_dim}")


def _integrate_fixed(model, state, batch, cfg, phi, mart_mode, retain=False, observe=None):
    times = cfg.grid()
    noise = batch.grid_increments(cfg.steps)
    states = [state] if retain else []
    obs_ll = None
    for i in range(cfg.steps):
        t, dt = float(times[i]), float(times[i + 1] - times[i])
        state = _step(model, state, t, dt, noise[:, i], phi, mart_mode)
        _check_finite(t, state.w, state.h, state.kl)
        if retain:
            states.append(state)
        if observe is not None:
            contrib = observe(i + 1, float(times[i + 1]), state)
            if contrib is not None:
                obs_ll = contrib if obs_ll is None else obs_ll + contrib
    return times, state, states, obs_ll


def _error_ratio(cfg: SolverConfig, a: AugmentedState, b: AugmentedState, ref: AugmentedState) -> float:
    err = 0.0
    for x, y, r in ((a.w, b.w, ref.w), (a.h, b.h, ref.h)):
        if x is None:
            continue
        x, y, r = x.value, y.value, r.value
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(r))
        err = max(err, float(np.max(np.abs(x - y) / scale)))
    return err


def _integrate_adaptive(model, state, batch, cfg, phi, mart_mode, retain=False):
    """Step-doubling Euler-Maruyama on the dyadic grid (one step size for all paths)."""
    min_dt = 2.0**-cfg.max_depth
    t, dt = 0.0, cfg.dt0
    times = [0.0]
    states = [state] if retain else []
    n_rejected = 0
    while t < 1.0:
        if len(times) - 1 + n_rejected >= cfg.max_steps:
            raise BudgetExceeded(f"adaptive solver exceeded {cfg.max_steps} steps at t={t:.6g}")
        dt = min(dt, 1.0 - t)
        half = 0.5 * dt
        b = batch.values([t, t + half, t + dt])
        db1, db2 = b[:, 1] - b[:, 0], b[:, 2] - b[:, 1]
        full = _step(model, state, t, dt, db1 + db2, phi, mart_mode)
        mid = _step(model, state, t, half, db1, phi, mart_mode)
        fine = _step(model, mid, t + half, half, db2, phi, mart_mode)
        _check_finite(t, fine.w, fine.h, full.w, full.h)
        err = _error_ratio(cfg, full, fine, state)
        if err <= 1.0 or half < min_dt:
            if err > 1.0:
                log.debug("accepting step at minimum size dt=%g with error ratio %.3g", dt, err)
            t += dt
            state = fine
            times.append(t)
            if retain:
                states.append(state)
            factor = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 / err))
        else:
            n_rejected += 1
            factor = min(0.5, max(0.2, 0.9 / err))
        new_dt = 2.0 ** np.floor(np.log2(dt * factor))
        new_dt = min(max(new_dt, min_dt), 1.0)
        # keep t a multiple of dt so every step is a tree node interval
        while t % new_dt != 0.0:
            new_dt *= 0.5
        dt = new_dt
    return np.array(times), state, states, n_rejected


def solve(model: SdeBnnModel, h0, path, cfg: SolverConfig = SolverConfig(),
          estimator: str = "stl", retain: bool = False) -> Trajectory:
    """Integrate the augmented SDE from t=0 to t=1 for every path in ``path``.

    ``path`` is a :class:`BrownianPath` or :class:`BrownianBatch` of dimension
    ``D_w``; the returned states have a leading axis of size ``n_paths``.
    """
    if estimator not in MART_MODES:
        raise ConfigError(f"unknown estimator {estimator!r}")
    batch = _as_batch(path)
    _check_path(model, batch)
    state = initial_state(model, h0, batch.n_paths)
    phi = ad.constant(model.params["phi"])
    mode = MART_MODES[estimator]
    if cfg.mode == "fixed":
        times, final, states, _ = _integrate_fixed(model, state, batch, cfg, phi, mode, retain)
        rejected = 0
    else:
        times, final, states, rejected = _integrate_adaptive(model, state, batch, cfg, phi, mode, retain)
    return Trajectory(times=times, final=final.numpy(), states=[s.numpy() for s in states],
                      n_rejected=rejected, peak_states=len(states) if retain else 1)


LossFn = Callable[[AugmentedState, Mapping[str, ad.Node]], ad.Node]


def grad_backprop(loss_fn: LossFn, model: SdeBnnModel, h0, path, cfg: SolverConfig,
                  estimator: str = "stl", observe=None) -> GradResult:
    """Gradient of a scalar loss by differentiating the taped, unrolled solve.

    ``loss_fn(final_state, params)`` builds the loss from the final augmented
    state and parameter nodes.  ``observe(step_index, t, state)`` optionally
    returns per-path log-likelihood contributions at intermediate grid times;
    their sum is passed to the loss as ``params['__obs_loglik__']``.
    """
    if cfg.mode != "fixed":
        raise ConfigError("gradients require a fixed-step solver")
    batch = _as_batch(path)
    _check_path(model, batch)
    nodes = {k: ad.param(v, k) for k, v in model.params.items()}
    state = initial_state(model, h0, batch.n_paths, w0=nodes["w0"])
    _, final, states, obs_ll = _integrate_fixed(model, state, batch, cfg, nodes["phi"],
                                                MART_MODES[estimator], retain=True, observe=observe)
    extra = dict(nodes)
    if obs_ll is not None:
        extra["__obs_loglik__"] = obs_ll
    loss = loss_fn(final, extra)
    grads = ad.backward(loss, nodes)
    return GradResult(float(loss.value), grads, final.numpy(), peak_states=len(states))


def _invert(forward: Callable[[np.ndarray], np.ndarray], target: np.ndarray, t: float,
            max_iter: int = 200) -> np.ndarray:
    """Solve ``x + forward(x) = target`` by fixed-point iteration."""
    x = target - forward(target)
    for _ in range(max_iter):
        nxt = target - forward(x)
        if np.all(np.abs(nxt - x) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(x))):
            return nxt
        x = nxt
    raise ReconstructionError(f"backward state reconstruction did not converge at t={t:.6g}")


def grad_adjoint(loss_fn: LossFn, model: SdeBnnModel, h0, path, cfg: SolverConfig,
                 estimator: str = "stl") -> GradResult:
    """Gradient by a backward adjoint sweep that keeps one state in memory.

    The forward pass stores nothing but the current state.  The backward
    sweep re-queries each Brownian increment, reconstructs the previous state
    by inverting the Euler-Maruyama step, and propagates the adjoints of
    ``(w, h)`` through a one-step local tape.  On the same grid and noise the
    result equals :func:`grad_backprop` up to rounding.
    """
    if cfg.mode != "fixed":
        raise ConfigError("gradients require a fixed-step solver")
    batch = _as_batch(path)
    _check_path(model, batch)
    mode = MART_MODES[estimator]
    times = cfg.grid()
    snap = not cfg.dyadic

    def noise_at(i):
        b = batch.values(times[i:i + 2], snap=snap)
        return b[:, 1] - b[:, 0]

    phi_c = ad.constant(model.params["phi"])
    state = initial_state(model, h0, batch.n_paths)
    for i in range(cfg.steps):
        t, dt = float(times[i]), float(times[i + 1] - times[i])
        state = _step(model, state, t, dt, noise_at(i), phi_c, mode)
        _check_finite(t, state.w, state.h, state.kl)
    final = state.numpy()

    nodes = {k: ad.param(v, k) for k, v in model.params.items()}
    leaves = {"w": ad.param(final.w, "w"), "kl": ad.param(final.kl, "kl"),
              "mart": ad.param(final.mart, "mart")}
    if final.h is not None:
        leaves["h"] = ad.param(final.h, "h")
    loss = loss_fn(AugmentedState(leaves["w"], leaves.get("h"), leaves["kl"], leaves["mart"]), nodes)
    g = ad.backward(loss, {**nodes, **leaves})
    grads = {k: g[k] for k in nodes}
    a_w, a_h, a_kl, a_mart = g["w"], g.get("h"), g["kl"], g["mart"]

    sigma = model.prior.sigma
    w, h = final.w, final.h
    for i in reversed(range(cfg.steps)):
        t, dt = float(times[i]), float(times[i + 1] - times[i])
        dB = noise_at(i)
        shift = w - (sigma * dB if not model.prior.is_ode else 0.0)
        w_prev = _invert(lambda x: model.posterior_drift(t, ad.constant(x)).value * dt, shift, t)
        h_prev = None
        if h is not None:
            w_node = ad.constant(w_prev)
            h_prev = _invert(lambda x: model.hidden(t, ad.constant(x), w_node).value * dt, h, t)

        phi = ad.param(model.params["phi"], "phi")
        wl = ad.param(w_prev, "w")
        hl = None if h_prev is None else ad.param(h_prev, "h")
        zero = ad.constant(np.zeros(batch.n_paths))
        nxt = _step(model, AugmentedState(wl, hl, zero, zero), t, dt, dB, phi, mode)
        out = ad.sum(ad.mul(ad.constant(a_w), nxt.w))
        if hl is not None:
            out = out + ad.sum(ad.mul(ad.constant(a_h), nxt.h))
        if not model.prior.is_ode:
            out = out + ad.sum(ad.mul(ad.constant(a_kl), nxt.kl))
            out = out + ad.sum(ad.mul(ad.constant(a_mart), nxt.mart))
        local = ad.backward(out, {"phi": phi, "w": wl, **({"h": hl} if hl is not None else {})})
        grads["phi"] = grads["phi"] + local["phi"]
        a_w = local["w"]
        a_h = local.get("h")
        w, h = w_prev, h_prev
    grads["w0"] = grads["w0"] + np.sum(a_w, axis=0)
    return GradResult(float(loss.value), grads, final, peak_states=1)
