"""Output likelihoods ``log p(y | h_1)`` and evaluation metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .errors import ConfigError, ContractError

N_BINS = 15
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Likelihood:
    """Observation model on the final hidden state.

    With ``readout=True`` a learned linear map (parameters under the
    ``readout`` key) takes ``h_1`` to the output space; otherwise the first
    ``out_dim`` components of ``h_1`` are used directly.
    """

    kind: str
    scale: float = 1.0
    n_classes: int = 0
    readout: bool = True

    def __post_init__(self):
        if self.kind not in ("gaussian", "cauchy", "categorical"):
            raise ConfigError(f"unknown likelihood {self.kind!r}")
        if self.kind == "categorical" and self.n_classes < 2:
            raise ConfigError("categorical likelihood needs n_classes >= 2")
        if self.kind != "categorical" and not self.scale > 0:
            raise ConfigError(f"likelihood scale must be positive, got {self.scale}")

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.kind == "categorical" else 1

    def readout_size(self, state_dim: int) -> int:
        return state_dim * self.out_dim + self.out_dim if self.readout else 0

    def init_readout(self, state_dim: int, rng: np.random.Generator) -> np.ndarray:
        bound = np.sqrt(3.0 / state_dim)
        w = rng.uniform(-bound, bound, size=state_dim * self.out_dim)
        return np.concatenate([w, np.zeros(self.out_dim)])

    def outputs(self, h1, readout=None) -> ad.Node:
        """Map ``h1`` of shape (..., B, D_h) to (..., B, out_dim)."""
        h1 = ad.as_node(h1)
        d = h1.shape[-1]
        if not self.readout:
            if d < self.out_dim:
                raise ContractError(f"state dim {d} smaller than output dim {self.out_dim}")
            return h1[..., :self.out_dim]
        if readout is None:
            raise ContractError("this likelihood needs readout parameters")
        readout = ad.as_node(readout)
        k = self.out_dim
        if readout.shape != (d * k + k,):
            raise ContractError(f"readout has shape {readout.shape}, expected ({d * k + k},)")
        lead = h1.shape[:-1]
        n = int(np.prod(lead))
        flat = ad.reshape(h1, (n, d))
        out = ad.matmul(flat, ad.reshape(readout[:d * k], (d, k))) + ad.expand(readout[d * k:], 0, n)
        return ad.reshape(out, (*lead, k))

    def log_prob(self, h1, y, readout=None) -> ad.Node:
        """Per-example log density / mass, shape (..., B)."""
        out = self.outputs(h1, readout)
        lead = out.shape[:-1]
        if self.kind == "categorical":
            y = np.asarray(y)
            if y.shape != lead[-1:] or not np.issubdtype(y.dtype, np.integer):
                raise ContractError(f"categorical targets must be integer labels of shape {lead[-1:]}")
            if np.any(y < 0) or np.any(y >= self.n_classes):
                raise ContractError(f"labels must lie in [0, {self.n_classes}), got {y.min()}..{y.max()}")
            onehot = np.broadcast_to(np.eye(self.n_classes)[y], out.shape)
            picked = ad.sum(ad.mul(out, ad.constant(onehot)), axis=-1)
            return picked - ad.logsumexp(out, axis=-1)
        y = np.broadcast_to(np.asarray(y, dtype=np.float64).reshape(lead[-1:]), lead)
        z = (ad.sum(out, axis=-1) - ad.constant(y)) * (1.0 / self.scale)
        if self.kind == "gaussian":
            const = -np.log(self.scale) - 0.5 * _LOG_2PI
            return ad.square(z) * -0.5 + ad.constant(np.full(lead, const))
        const = -np.log(np.pi) - np.log(self.scale)
        return ad.log(ad.square(z) + ad.constant(np.ones(lead))) * -1.0 + ad.constant(np.full(lead, const))


def log_prob(lik: Likelihood, h1, y, readout=None) -> float:
    """Total log-likelihood of a batch as a float."""
    return float(np.sum(lik.log_prob(h1, y, readout).value))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class CalibrationReport:
    ece: float
    brier: float
    nll: float
    accuracy: float
    bins: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def calibration(probs, labels, n_bins: int = N_BINS) -> CalibrationReport:
    """Top-1 calibration metrics.

    ECE uses ``n_bins`` equal-width confidence bins ``(lo, hi]`` weighted by
    bin counts.  Brier is the sum over classes of squared error against the
    one-hot label, averaged over examples (range [0, 2]).
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ContractError(f"probabilities {p.shape} and labels {y.shape} disagree")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("probability rows must sum to 1 within 1e-6")
    n, k = p.shape
    conf = p.max(axis=1)
    pred = p.argmax(axis=1)
    correct = (pred == y).astype(np.float64)
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    ece = 0.0
    bins = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count:
            acc_b, conf_b = float(correct[mask].mean()), float(conf[mask].mean())
            ece += count / n * abs(acc_b - conf_b)
        else:
            acc_b = conf_b = 0.0
        bins.append({"lo": b / n_bins, "hi": (b + 1) / n_bins,
                     "confidence": conf_b, "accuracy": acc_b, "count": count})
    onehot = np.eye(k)[y]
    brier = float(np.mean(np.sum((p - onehot) ** 2, axis=1)))
    nll = float(-np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None))))
    return CalibrationReport(ece=float(ece), brier=brier, nll=nll,
                             accuracy=float(correct.mean()), bins=bins)


def regression_report(samples: np.ndarray, y: np.ndarray, scale: float, kind: str = "gaussian",
                      rng: np.random.Generator | None = None, level: float = 0.95) -> dict:
    """Posterior-predictive summary for scalar regression.

    ``samples`` holds predicted locations of shape (S, N).  The predictive
    band adds observation noise drawn from the likelihood.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    mean = samples.mean(axis=0)
    if kind == "gaussian":
        noisy = samples + scale * rng.standard_normal(samples.shape)
    else:
        noisy = samples + scale * rng.standard_cauchy(samples.shape)
    lo, hi = np.quantile(noisy, [(1 - level) / 2, (1 + level) / 2], axis=0)
    inside = (y >= lo) & (y <= hi)
    z = (samples - y) / scale
    if kind == "gaussian":
        logp = -0.5 * z**2 - np.log(scale) - 0.5 * _LOG_2PI
    else:
        logp = -np.log1p(z**2) - np.log(np.pi * scale)
    nll = -np.mean(logsumexp(logp, axis=0) - np.log(len(samples)))
    return {"mse": float(np.mean((mean - y) ** 2)), "coverage": float(inside.mean()),
            "nll": float(nll), "band_lo": lo, "band_hi": hi, "mean": mean}
