"""The SDE-BNN model container: OU weight prior, posterior drift, hidden dynamics."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .nets import HiddenDynamics, PosteriorDriftNet


@dataclass(frozen=True)
class PriorSpec:
    """Ornstein-Uhlenbeck weight prior ``dw = -w dt + sigma dB``.

    ``sigma = 0`` turns the model into a deterministic ODE-Net ablation; the
    KL and martingale terms are then identically zero.
    """

    sigma: float = 0.1

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError(f"prior sigma must be >= 0, got {self.sigma}")

    @property
    def is_ode(self) -> bool:
        return self.sigma == 0.0

    def drift(self, w):
        return -w if isinstance(w, ad.Node) else -np.asarray(w)


@dataclass(frozen=True)
class SdeBnnModel:
    """Static structure plus an immutable snapshot of the learnable parameters.

    ``params`` always contains ``phi`` (drift-net parameters) and ``w0``
    (initial weights, point-estimated); task heads may add e.g. ``readout``.
    ``hidden`` may be ``None`` for latent-SDE toys where only ``w`` evolves.
    """

    prior: PriorSpec
    drift: PosteriorDriftNet
    hidden: HiddenDynamics | None
    params: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("phi", "w0"):
            if name not in self.params:
                raise ContractError(f"model parameters must include {name!r}")
        if self.params["phi"].shape != (self.drift.n_params,):
            raise ContractError(f"phi has shape {self.params['phi'].shape}, "
                                f"drift net needs ({self.drift.n_params},)")
        if self.params["w0"].shape != (self.weight_dim,):
            raise ContractError(f"w0 has shape {self.params['w0'].shape}, expected ({self.weight_dim},)")
        if self.hidden is not None and self.hidden.weight_dim != self.drift.weight_dim:
            raise ContractError("drift net and hidden dynamics disagree on the weight dimension")

    @property
    def weight_dim(self) -> int:
        return self.drift.weight_dim

    @property
    def state_dim(self) -> int:
        return 0 if self.hidden is None else self.hidden.state_dim

    def with_params(self, params: Mapping[str, np.ndarray] | None = None, **updates) -> "SdeBnnModel":
        new = dict(self.params if params is None else params)
        new.update(updates)
        return replace(self, params={k: np.asarray(v, dtype=np.float64) for k, v in new.items()})

    def posterior_drift(self, t: float, w, phi=None) -> ad.Node:
        """``f_q(w, t) = NN_phi(w, t) + f_p(w, t)``."""
        phi = self.params["phi"] if phi is None else phi
        w = ad.as_node(w)
        return self.drift(t, w, phi) + self.prior.drift(w)

    def u(self, t: float, w, phi=None) -> ad.Node:
        """Diffusion-scaled drift gap ``(f_q - f_p) / sigma = NN_phi / sigma``."""
        if self.prior.is_ode:
            raise ContractError("u is undefined for sigma = 0")
        phi = self.params["phi"] if phi is None else phi
        return self.drift(t, ad.as_node(w), phi) * (1.0 / self.prior.sigma)


def build_model(state_dim: int | None, rng: np.random.Generator, sigma: float = 0.1,
                width: int = 32, activation: str = "tanh", drift_hidden=(2, 128, 2),
                drift_activation: str = "tanh", weight_dim: int | None = None,
                extra: Mapping[str, np.ndarray] | None = None) -> SdeBnnModel:
    """Construct a freshly initialised model.

    With ``state_dim=None`` there are no hidden units and ``weight_dim`` must
    be given (latent-SDE toys).
    """
    if state_dim is None:
        if weight_dim is None:
            raise ConfigError("weight_dim is required when there are no hidden units")
        hidden = None
        w0 = np.zeros(weight_dim)
    else:
        hidden = HiddenDynamics(state_dim, width=width, activation=activation)
        weight_dim = hidden.weight_dim
        w0 = hidden.init_weights(rng)
    drift = PosteriorDriftNet(weight_dim, hidden=drift_hidden, activation=drift_activation)
    params = {"phi": drift.init_params(rng), "w0": w0}
    if extra:
        params.update({k: np.asarray(v, dtype=np.float64) for k, v in extra.items()})
    return SdeBnnModel(PriorSpec(sigma), drift, hidden, params)
