"""Dense networks used inside the SDE: hidden dynamics and posterior drift.

Parameters always live in flat vectors.  A layer stores its weight matrix
(row-major, ``fan_in x fan_out``, where ``fan_in`` includes the time input for
time-conditioned layers) followed by its bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ConfigError

ACTIVATIONS = {
    "tanh": ad.tanh,
    "swish": ad.swish,
    "softplus": ad.softplus,
    "none": None,
}


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "tanh"
    time_conditioned: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ContractError(f"layer dims must be positive, got {self.input_dim}->{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self) -> int:
        return self.input_dim + int(self.time_conditioned)

    @property
    def n_params(self) -> int:
        return self.fan_in * self.output_dim + self.output_dim


def mlp_layers(dims: Sequence[int], activation: str = "tanh",
               time_conditioned: bool = True) -> list[LayerSpec]:
    """Layer specs for widths ``dims``; the last layer has no activation."""
    dims = list(dims)
    if len(dims) < 2:
        raise ContractError("an MLP needs at least input and output widths")
    n = len(dims) - 1
    return [LayerSpec(dims[i], dims[i + 1], activation if i < n - 1 else "none", time_conditioned)
            for i in range(n)]


class MLP:
    """A stack of :class:`LayerSpec` applied to a flat parameter vector."""

    def __init__(self, layers: Sequence[LayerSpec]):
        layers = list(layers)
        for a, b in zip(layers, layers[1:]):
            if a.output_dim != b.input_dim:
                raise ContractError(f"layer widths do not chain: {a.output_dim} -> {b.input_dim}")
        self.layers = layers
        self.offsets = np.cumsum([0] + [l.n_params for l in layers])

    @property
    def n_params(self) -> int:
        return int(self.offsets[-1])

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    def unpack(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got shape {flat.shape}")
        out = []
        for spec, start in zip(self.layers, self.offsets):
            split = start + spec.fan_in * spec.output_dim
            w = flat[start:split].reshape(spec.fan_in, spec.output_dim).copy()
            b = flat[split:split + spec.output_dim].copy()
            out.append((w, b))
        return out

    def pack(self, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        if len(layers) != len(self.layers):
            raise ContractError(f"expected {len(self.layers)} layers, got {len(layers)}")
        parts = []
        for spec, (w, b) in zip(self.layers, layers):
            w, b = np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)
            if w.shape != (spec.fan_in, spec.output_dim) or b.shape != (spec.output_dim,):
                raise ContractError(f"layer shapes {w.shape}, {b.shape} do not match {spec}")
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def init(self, rng: np.random.Generator, zero_last: bool = False) -> np.ndarray:
        """Uniform fan-in initialisation (unit-variance preserving), zero biases."""
        layers = []
        for i, spec in enumerate(self.layers):
            bound = np.sqrt(3.0 / spec.fan_in)
            w = rng.uniform(-bound, bound, size=(spec.fan_in, spec.output_dim))
            if zero_last and i == len(self.layers) - 1:
                w = np.zeros_like(w)
            layers.append((w, np.zeros(spec.output_dim)))
        return self.pack(layers)

    def apply_shared(self, x: ad.Node, t: float, params: ad.Node) -> ad.Node:
        """Apply to rows of ``x`` (shape (P, in)) with one parameter vector."""
        n = x.shape[0]
        for spec, start in zip(self.layers, self.offsets):
            if spec.time_conditioned:
                x = ad.concat([x, ad.constant(np.full((n, 1), t))], axis=-1)
            split = start + spec.fan_in * spec.output_dim
            w = ad.reshape(params[start:split], (spec.fan_in, spec.output_dim))
            b = ad.expand(params[split:split + spec.output_dim], 0, n)
            x = ad.matmul(x, w) + b
            act = ACTIVATIONS[spec.activation]
            if act is not None:
                x = act(x)
        return x

    def apply_batched(self, x: ad.Node, t: float, params: ad.Node) -> ad.Node:
        """Apply with one parameter vector per leading index.

        ``x`` has shape (P, B, in) and ``params`` shape (P, n_params).
        """
        p, n = x.shape[0], x.shape[1]
        if params.shape != (p, self.n_params):
            raise ContractError(f"expected weights of shape {(p, self.n_params)}, got {params.shape}")
        for spec, start in zip(self.layers, self.offsets):
            if spec.time_conditioned:
                x = ad.concat([x, ad.constant(np.full((p, n, 1), t))], axis=-1)
            split = start + spec.fan_in * spec.output_dim
            w = ad.reshape(params[:, start:split], (p, spec.fan_in, spec.output_dim))
            b = ad.expand(params[:, split:split + spec.output_dim], 1, n)
            x = ad.matmul(x, w) + b
            act = ACTIVATIONS[spec.activation]
            if act is not None:
                x = act(x)
        return x


class HiddenDynamics:
    """``f_h(t, h, w)``: an MLP on the hidden state whose weights are ``w``."""

    def __init__(self, state_dim: int, width: int = 32, activation: str = "tanh",
                 depth: int = 2, time_conditioned: bool = True):
        dims = [state_dim] + [width] * (depth - 1) + [state_dim]
        self.net = MLP(mlp_layers(dims, activation, time_conditioned))
        self.state_dim = state_dim

    @classmethod
    def from_layers(cls, layers: Sequence[LayerSpec]) -> "HiddenDynamics":
        obj = cls.__new__(cls)
        obj.net = MLP(layers)
        if obj.net.input_dim != obj.net.output_dim:
            raise ContractError("hidden dynamics must map the state space to itself")
        obj.state_dim = obj.net.input_dim
        return obj

    @property
    def weight_dim(self) -> int:
        return self.net.n_params

    @property
    def layers(self) -> list[LayerSpec]:
        return self.net.layers

    def __call__(self, t: float, h: ad.Node, w: ad.Node) -> ad.Node:
        h, w = ad.as_node(h), ad.as_node(w)
        if w.shape[-1] != self.weight_dim:
            raise ContractError(f"f_h expects {self.weight_dim} weights, got {w.shape[-1]}")
        if h.shape[-1] != self.state_dim:
            raise ContractError(f"f_h expects state dim {self.state_dim}, got {h.shape[-1]}")
        return self.net.apply_batched(h, t, w)

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        return self.net.init(rng)


class PosteriorDriftNet:
    """``NN_phi(w, t)``: the learned part of the posterior weight drift.

    The posterior drift is ``f_q = NN_phi + f_p``; with the final layer set to
    zero the posterior coincides with the prior.
    """

    def __init__(self, weight_dim: int, hidden: Sequence[int] = (2, 128, 2),
                 activation: str = "tanh", time_conditioned: bool = True):
        dims = [weight_dim, *hidden, weight_dim]
        self.net = MLP(mlp_layers(dims, activation, time_conditioned))
        self.weight_dim = weight_dim

    @property
    def n_params(self) -> int:
        return self.net.n_params

    @property
    def layers(self) -> list[LayerSpec]:
        return self.net.layers

    def __call__(self, t: float, w: ad.Node, phi: ad.Node) -> ad.Node:
        w, phi = ad.as_node(w), ad.as_node(phi)
        if w.shape[-1] != self.weight_dim:
            raise ContractError(f"drift net expects {self.weight_dim} weights, got {w.shape[-1]}")
        return self.net.apply_shared(w, t, phi)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return self.net.init(rng, zero_last=True)
