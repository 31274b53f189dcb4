"""Training loop: Adam, minibatching, evaluation, checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import __version__
from .brownian import BrownianBatch
from .data import Dataset
from .errors import ConfigError, FormatError, IntegrationDiverged, SdeBnnError
from .metrics import Likelihood, calibration, regression_report, softmax
from .model import SdeBnnModel, build_model
from .sde import ESTIMATORS, SolverConfig, solve
from .variational import LatentToy, cauchy_toy, elbo_and_grad

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# disjoint path-id ranges for training gradients and evaluation draws
_EVAL_PATH_BASE = 2**62


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 40
    epochs: int = 800
    estimator: str = "standard"
    sigma: float = 0.1
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    eval_every: int = 50
    kl_scale: float = 1.0
    n_samples: int = 1
    eval_samples: int = 20
    grad_method: str = "backprop"
    max_lr_halvings: int = 3

    def __post_init__(self):
        if isinstance(self.solver, Mapping):
            self.solver = SolverConfig(**self.solver)
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.grad_method not in ("backprop", "adjoint"):
            raise ConfigError(f"unknown gradient method {self.grad_method!r}")
        for name in ("lr", "batch_size", "n_samples", "eval_samples", "eval_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.kl_scale < 0 or self.sigma < 0:
            raise ConfigError("epochs, kl_scale and sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam descent step; returns ``(params, state)``.

    A non-finite gradient leaves everything untouched except ``state.skipped``.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("skipping Adam step %d: non-finite gradient", state.step + 1)
        return dict(params), replace(state, skipped=state.skipped + 1)
    step = state.step + 1
    m, v, new = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = m[k] / (1 - beta1**step)
        vhat = v[k] / (1 - beta2**step)
        new[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return new, AdamState(m, v, step, state.skipped)


def predict(model: SdeBnnModel, likelihood: Likelihood, x: np.ndarray, n_samples: int,
            cfg: SolverConfig, seed: int, path_base: int = _EVAL_PATH_BASE) -> np.ndarray:
    """Model outputs per posterior sample, shape (n_samples, N, out_dim)."""
    paths = BrownianBatch(seed, path_base + np.arange(n_samples), model.weight_dim)
    traj = solve(model, x, paths, cfg)
    return likelihood.outputs(traj.final.h, model.params.get("readout")).value


def evaluate(model: SdeBnnModel, likelihood: Likelihood, x: np.ndarray, y: np.ndarray,
             n_samples: int, cfg: SolverConfig, seed: int) -> dict:
    """Posterior-predictive metrics; probabilities are averaged, not logits."""
    out = predict(model, likelihood, x, n_samples, cfg, seed)
    if likelihood.kind == "categorical":
        probs = softmax(out).mean(axis=0)
        return calibration(probs, y).to_dict()
    rep = regression_report(out[..., 0], y, likelihood.scale, likelihood.kind,
                            rng=np.random.default_rng(seed))
    return {"mse": rep["mse"], "coverage": rep["coverage"], "nll": rep["nll"]}


@dataclass
class FitResult:
    model: SdeBnnModel
    log: list
    optimizer: AdamState
    lr: float


def fit(model: SdeBnnModel, likelihood: Likelihood, data: Dataset, cfg: TrainConfig,
        on_epoch: Callable[[dict], None] | None = None,
        optimizer: AdamState | None = None, start_epoch: int = 0,
        lr: float | None = None) -> FitResult:
    """Maximise the configured ELBO estimator with Adam.

    Emits one record per epoch (``epoch, elbo, loglik, kl, mart`` averaged over
    minibatches, plus ``eval`` metrics every ``eval_every`` epochs on the
    ``val`` split when present).  Deterministic for a fixed seed.
    ``optimizer``, ``start_epoch`` and ``lr`` resume an interrupted run.
    """
    x, y = data.split("train")
    n = len(y)
    if n == 0:
        raise ConfigError("training split is empty")
    bs = min(cfg.batch_size, n)
    opt = AdamState.zeros_like(model.params) if optimizer is None else optimizer
    lr = cfg.lr if lr is None else lr
    halvings = 0
    records = []
    params = dict(model.params)
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = dict(elbo=0.0, loglik=0.0, kl=0.0, mart=0.0)
        n_batches = 0
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            step_id = opt.step + opt.skipped
            paths = BrownianBatch(cfg.seed, step_id * cfg.n_samples + np.arange(cfg.n_samples),
                                  model.weight_dim)
            current = model.with_params(params)
            try:
                br, grads = elbo_and_grad(current, likelihood, (x[idx], y[idx]), paths, cfg.solver,
                                          cfg.estimator, n_data=n, beta=cfg.kl_scale,
                                          method=cfg.grad_method)
            except IntegrationDiverged as exc:
                br, grads = None, None
                log.warning("epoch %d: %s", epoch, exc)
            if grads is None or not all(np.all(np.isfinite(g)) for g in grads.values()):
                halvings += 1
                if halvings > cfg.max_lr_halvings:
                    raise SdeBnnError(f"training diverged at epoch {epoch} after {cfg.max_lr_halvings} "
                                      f"learning-rate halvings (lr={lr:g})")
                lr *= 0.5
                opt = replace(opt, skipped=opt.skipped + 1)
                log.warning("divergence: halving learning rate to %g", lr)
                continue
            params, opt = adam_step(params, grads, opt, lr)
            for k in sums:
                sums[k] += br.value if k == "elbo" else getattr(br, k)
            n_batches += 1
        rec = {"epoch": epoch + 1, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        if "val" in data.splits and len(data.splits["val"]) and (epoch + 1) % cfg.eval_every == 0:
            xv, yv = data.split("val")
            rec["eval"] = evaluate(model.with_params(params), likelihood, xv, yv,
                                   cfg.eval_samples, cfg.solver, cfg.seed)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return FitResult(model.with_params(params), records, opt, lr)


def fit_latent(toy: LatentToy, estimator: str, iters: int, lr: float = 1e-2, n_paths: int = 16,
               seed: int = 0, on_step: Callable[[dict], None] | None = None,
               record_every: int = 1) -> FitResult:
    """Fit the posterior drift ``phi`` of a latent toy; ``w0`` stays fixed."""
    model = toy.model
    params = dict(model.params)
    opt = AdamState.zeros_like(params)
    records = []
    for it in range(iters):
        paths = BrownianBatch(seed, it * n_paths + np.arange(n_paths), model.weight_dim)
        res = toy.grad(model.with_params(params), paths, estimator)
        params, opt = adam_step(params, {"phi": res.grads["phi"]}, opt, lr)
        if (it + 1) % record_every == 0:
            rec = {"step": it + 1, "elbo": -res.value}
            records.append(rec)
            if on_step is not None:
                on_step(rec)
    return FitResult(model.with_params(params), records, opt, lr)


# -- model specs and checkpoints ------------------------------------------------


def model_from_spec(spec: Mapping, seed: int) -> tuple[SdeBnnModel, Likelihood]:
    """Build an initialised model and its likelihood from a plain-dict spec.

    Keys: ``input_dim``, ``augment``, ``width``, ``activation``,
    ``drift_hidden``, ``drift_activation``, ``sigma``, ``likelihood``
    (``kind``, ``scale``, ``n_classes``).  A spec with ``latent: "cauchy2"``
    instead describes the latent Cauchy toy (``values``, ``sigma``,
    ``obs_scale``, ``steps``, ``drift_hidden``).
    """
    if spec.get("latent") == "cauchy2":
        toy = latent_from_spec(spec, seed)
        return toy.model, toy.likelihood
    rng = np.random.default_rng(seed)
    lik_spec = dict(spec.get("likelihood", {"kind": "gaussian", "scale": 0.1}))
    lik = Likelihood(**lik_spec)
    state_dim = int(spec["input_dim"]) + int(spec.get("augment", 0))
    model = build_model(state_dim, rng, sigma=float(spec.get("sigma", 0.1)),
                        width=int(spec.get("width", 32)), activation=spec.get("activation", "tanh"),
                        drift_hidden=tuple(spec.get("drift_hidden", (2, 128, 2))),
                        drift_activation=spec.get("drift_activation", "tanh"))
    if lik.readout:
        model = model.with_params(readout=lik.init_readout(state_dim, rng))
    return model, lik


def latent_from_spec(spec: Mapping, seed: int) -> LatentToy:
    return cauchy_toy(values=tuple(spec.get("values", (1.0, -1.0))), time=float(spec.get("time", 0.5)),
                      obs_scale=float(spec.get("obs_scale", 0.1)), sigma=float(spec.get("sigma", 1.0)),
                      steps=int(spec.get("steps", 16)),
                      hidden=tuple(spec.get("drift_hidden", (32, 32))), seed=seed)


def augment_inputs(x: np.ndarray, augment: int) -> np.ndarray:
    """Append ``augment`` zero-initialised state dimensions."""
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([x, np.zeros((x.shape[0], augment))], axis=1) if augment else x


def save_checkpoint(path, model: SdeBnnModel, optimizer: AdamState | None, step: int,
                    config: Mapping, spec: Mapping, lr: float | None = None) -> None:
    """Write an ``.npz`` container: little-endian float64 arrays plus JSON metadata."""
    arrays = {f"param/{k}": np.asarray(v, dtype="<f8") for k, v in model.params.items()}
    if optimizer is not None:
        arrays.update({f"adam_m/{k}": np.asarray(v, dtype="<f8") for k, v in optimizer.m.items()})
        arrays.update({f"adam_v/{k}": np.asarray(v, dtype="<f8") for k, v in optimizer.v.items()})
    meta = {"format": "sdebnn-checkpoint", "version": CHECKPOINT_VERSION, "endianness": "little",
            "package_version": __version__, "step": int(step),
            "adam_step": None if optimizer is None else optimizer.step,
            "adam_skipped": None if optimizer is None else optimizer.skipped, "lr": lr,
            "config": config, "model_spec": spec}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(model, likelihood, optimizer, meta)``."""
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            data = {k: np.array(z[k]) for k in z.files if k != "meta"}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})") from None
    if meta.get("format") != "sdebnn-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    model, lik = model_from_spec(meta["model_spec"], seed=0)
    params = {k.split("/", 1)[1]: v.astype(np.float64) for k, v in data.items() if k.startswith("param/")}
    model = model.with_params(params)
    opt = None
    if meta.get("adam_step") is not None:
        opt = AdamState({k.split("/", 1)[1]: v for k, v in data.items() if k.startswith("adam_m/")},
                        {k.split("/", 1)[1]: v for k, v in data.items() if k.startswith("adam_v/")},
                        meta["adam_step"], meta["adam_skipped"])
    return model, lik, opt, meta
