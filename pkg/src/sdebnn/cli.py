"""Command-line entry point: ``sdebnn {train,eval,gradvar,sample,bench}``.

Every artifact is self-describing.  JSON outputs carry ``version``,
``seed`` and ``config`` keys; JSON-lines streams start with a header record
holding the same; CSV files start with one ``# {...}`` comment line of JSON
metadata followed by a fixed header row.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(divergence, solver budget, reconstruction).  Errors are printed to stderr
as one JSON object ``{"code", "message", "context"}``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .brownian import BrownianBatch
from .data import Dataset, data_dir, gen_toy1d, gen_two_moons, load_idx
from .errors import ConfigError, FormatError, SdeBnnError
from .metrics import softmax
from .sde import ESTIMATORS, SolverConfig, grad_adjoint, grad_backprop, solve
from .train import (TrainConfig, augment_inputs, evaluate, fit, fit_latent, latent_from_spec,
                    load_checkpoint, model_from_spec, predict, save_checkpoint)
from .variational import conjugate_toy, elbo_loss, exp_brownian_toy, grad_variance_probe

log = logging.getLogger(__name__)

TASKS = ("toy1d", "cauchy2", "twomoons", "mnist")
SPLITS = {"train": 0.8, "val": 0.1, "test": 0.1}

TRAJECTORY_COLUMNS = ("path", "t")  # followed by w_*, h_*, kl_accum
GRADVAR_COLUMNS = ("estimator", "step", "mean_grad_norm", "var_grad", "var_grad_norm")
BENCH_COLUMNS = ("steps", "method", "wall_time_s", "peak_states", "rel_err_vs_backprop")


class UsageError(SdeBnnError):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; unset fields take task defaults."""

    task: str = "toy1d"
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 40
    epochs: int = 800
    estimator: str = "standard"
    sigma: float = 0.1
    kl_scale: float = 1.0
    eval_every: int = 50
    n_samples: int = 1
    eval_samples: int = 20
    grad_method: str = "backprop"
    steps: int = 16
    solver_mode: str = "fixed"
    rtol: float = 1e-3
    atol: float = 1e-4
    n_data: int = 200
    noise: float = 0.1
    augment: int = 2
    width: int = 32
    activation: str = "tanh"
    drift_hidden: tuple = (2, 128, 2)
    obs_scale: float = 0.1
    n_paths: int = 16
    gradvar_toy: str = "exp_brownian"
    probe_every: int = 200
    probe_samples: int = 200
    workers: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.gradvar_toy not in ("exp_brownian", "conjugate"):
            raise ConfigError(f"unknown gradvar_toy {self.gradvar_toy!r}")
        self.drift_hidden = tuple(int(v) for v in self.drift_hidden)
        self.train_config()

    def solver(self) -> SolverConfig:
        return SolverConfig(mode=self.solver_mode, steps=self.steps, rtol=self.rtol, atol=self.atol)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           estimator=self.estimator, sigma=self.sigma, solver=self.solver(),
                           seed=self.seed, eval_every=self.eval_every, kl_scale=self.kl_scale,
                           n_samples=self.n_samples, eval_samples=self.eval_samples,
                           grad_method=self.grad_method)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drift_hidden"] = list(self.drift_hidden)
        return d


TASK_DEFAULTS = {
    "toy1d": {},
    "cauchy2": {"sigma": 1.0, "obs_scale": 0.1, "steps": 16, "lr": 1e-2, "epochs": 1500,
                "estimator": "stl", "drift_hidden": (32, 32), "augment": 0, "eval_every": 50},
    "twomoons": {"n_data": 1000, "batch_size": 128, "epochs": 100, "lr": 1e-2, "augment": 2,
                 "eval_every": 10},
    "mnist": {"batch_size": 128, "epochs": 10, "augment": 0, "width": 32, "eval_every": 1},
}


def make_config(task: str | None = None, file_values: dict | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Merge task defaults, config-file values and overrides; unknown keys are errors."""
    known = {f.name for f in fields(RunConfig)}
    merged: dict = {}
    for source in (file_values or {}, overrides or {}):
        unknown = sorted(set(source) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    task = (overrides or {}).get("task") or (file_values or {}).get("task") or task or "toy1d"
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    merged.update(TASK_DEFAULTS[task])
    merged.update(file_values or {})
    merged.update(overrides or {})
    merged["task"] = task
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def read_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml
        values = yaml.safe_load(text)
    else:
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc.msg}", offset=exc.pos) from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return values


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# -- task plumbing -----------------------------------------------------------------


def _pool_images(x: np.ndarray, side: int = 28, factor: int = 4) -> np.ndarray:
    n = x.shape[0]
    k = side // factor
    return x.reshape(n, k, factor, k, factor).mean(axis=(2, 4)).reshape(n, k * k)


def task_dataset(cfg: RunConfig) -> Dataset:
    """Deterministically (re)build the dataset for a config, standardized and augmented."""
    if cfg.task == "toy1d":
        ds = gen_toy1d(cfg.n_data, cfg.noise, cfg.seed)
    elif cfg.task == "twomoons":
        ds = gen_two_moons(cfg.n_data, cfg.noise, cfg.seed)
    elif cfg.task == "mnist":
        root = data_dir()
        raw = load_idx(_find(root, "train-images-idx3-ubyte"), _find(root, "train-labels-idx1-ubyte"))
        ds = Dataset(_pool_images(raw.inputs), raw.targets, meta=raw.meta)
    else:
        raise ConfigError(f"task {cfg.task!r} has no tabular dataset")
    ds = ds.with_splits(SPLITS, cfg.seed).standardized()
    return Dataset(augment_inputs(ds.inputs, cfg.augment), ds.targets, ds.splits, ds.meta)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    raise ConfigError(f"{stem} not found in {root} (set SDEBNN_DATA_DIR)")


def model_spec(cfg: RunConfig, input_dim: int) -> dict:
    if cfg.task == "cauchy2":
        return {"latent": "cauchy2", "values": [1.0, -1.0], "time": 0.5, "sigma": cfg.sigma,
                "obs_scale": cfg.obs_scale, "steps": cfg.steps, "drift_hidden": list(cfg.drift_hidden)}
    if cfg.task == "toy1d":
        lik = {"kind": "gaussian", "scale": cfg.obs_scale}
    else:
        lik = {"kind": "categorical", "n_classes": 10 if cfg.task == "mnist" else 2}
    return {"input_dim": input_dim - cfg.augment, "augment": cfg.augment, "width": cfg.width,
            "activation": cfg.activation, "drift_hidden": list(cfg.drift_hidden), "sigma": cfg.sigma,
            "likelihood": lik}


def _meta(cfg: RunConfig, **extra) -> dict:
    return {"version": __version__, "seed": cfg.seed, "config": cfg.to_dict(), **extra}


def _write_csv(path: Path, meta: dict, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _config_from_checkpoint(meta: dict) -> RunConfig:
    return make_config(file_values=meta["config"])


# -- commands ----------------------------------------------------------------------


def cmd_train(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    stream = open(out / "metrics.jsonl", "w")
    emit = lambda rec: (stream.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n"), stream.flush())
    emit({"kind": "header", **_meta(cfg)})
    try:
        if cfg.task == "cauchy2":
            spec = model_spec(cfg, 1)
            toy = latent_from_spec(spec, cfg.seed)
            res = fit_latent(toy, cfg.estimator, cfg.epochs, cfg.lr, cfg.n_paths, cfg.seed,
                             on_step=lambda r: emit({"kind": "step", **r}), record_every=cfg.eval_every)
            step = cfg.epochs
        else:
            ds = task_dataset(cfg)
            spec = model_spec(cfg, ds.inputs.shape[1])
            model, lik = model_from_spec(spec, cfg.seed)
            tc = cfg.train_config()
            res = fit(model, lik, ds, tc, on_epoch=lambda r: emit({"kind": "epoch", **r}))
            x, y = ds.split("test")
            emit({"kind": "final", "split": "test",
                  "eval": evaluate(res.model, lik, x, y, cfg.eval_samples, tc.solver, cfg.seed)})
            step = cfg.epochs
        save_checkpoint(out / "checkpoint.npz", res.model, res.optimizer, step, cfg.to_dict(), spec,
                        lr=res.lr)
    finally:
        stream.close()
    return 0


def cmd_eval(ckpt: Path, split: str, n_samples: int | None, steps: list, rtols: list,
             out: Path | None) -> int:
    model, lik, _, meta = load_checkpoint(ckpt)
    cfg = _config_from_checkpoint(meta)
    n_samples = n_samples or cfg.eval_samples
    solvers = [SolverConfig(mode="fixed", steps=s) for s in steps]
    solvers += [SolverConfig(mode="adaptive", rtol=r, atol=r / 10) for r in rtols]
    if not solvers:
        solvers = [cfg.solver()]
    rows = []
    if cfg.task == "cauchy2":
        toy = latent_from_spec(meta["model_spec"], 0)
        for sc in solvers:
            toy.cfg = sc
            paths = BrownianBatch(cfg.seed, 2**62 + np.arange(n_samples), 1)
            res = toy.grad(model, paths, "standard")
            rows.append({"mode": sc.mode, "steps": sc.steps, "rtol": sc.rtol, "elbo": -res.value})
    else:
        ds = task_dataset(cfg)
        if split not in ds.splits:
            raise UsageError(f"unknown split {split!r}")
        x, y = ds.split(split)
        for sc in solvers:
            t0 = time.perf_counter()
            m = evaluate(model, lik, x, y, n_samples, sc, cfg.seed)
            m.pop("bins", None)
            rows.append({"mode": sc.mode, "steps": sc.steps, "rtol": sc.rtol, **m,
                         "wall_time_s": time.perf_counter() - t0})
    doc = _jsonable({**_meta(cfg, checkpoint=str(ckpt), split=split, n_samples=n_samples), "rows": rows})
    text = json.dumps(doc, sort_keys=True, indent=1)
    if out is None:
        print(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return 0


def cmd_gradvar(cfg: RunConfig, out: Path) -> int:
    """Train one model per estimator and probe its own gradient variance along the way."""
    rows = []
    for est in ESTIMATORS:
        if cfg.gradvar_toy == "exp_brownian":
            toy = exp_brownian_toy(seed=cfg.seed)
        else:
            toy = conjugate_toy()
        probe_steps = list(range(0, cfg.epochs + 1, cfg.probe_every))
        model = toy.model
        done = 0
        for target in probe_steps:
            if target > done:
                toy.model = model
                model = fit_latent(toy, est, target - done, cfg.lr, cfg.n_paths, cfg.seed + done).model
                done = target
            s = grad_variance_probe(model, toy, est, cfg.probe_samples, seed=cfg.seed + 10_000)
            row = s.to_row(done)
            rows.append([row[c] for c in GRADVAR_COLUMNS])
    _write_csv(out, _meta(cfg, toy=cfg.gradvar_toy), GRADVAR_COLUMNS, rows)
    return 0


def cmd_sample(ckpt: Path, n_paths: int, out_dir: Path, max_weights: int = 8) -> int:
    model, lik, _, meta = load_checkpoint(ckpt)
    cfg = _config_from_checkpoint(meta)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = BrownianBatch(cfg.seed, 2**62 + np.arange(n_paths), model.weight_dim)
    sc = latent_from_spec(meta["model_spec"], 0).cfg if cfg.task == "cauchy2" else cfg.solver()
    ds = None if cfg.task == "cauchy2" else task_dataset(cfg)
    h0 = None if ds is None else ds.split("test")[0][:1]
    traj = solve(model, h0, paths, sc, retain=True)
    k = min(model.weight_dim, max_weights)
    d_h = 0 if h0 is None else model.state_dim
    header = [*TRAJECTORY_COLUMNS, *(f"w_{j}" for j in range(k)), *(f"h_{j}" for j in range(d_h)),
              "kl_accum"]
    rows = []
    for p in range(n_paths):
        for t, s in zip(traj.times, traj.states):
            hv = [] if h0 is None else list(s.h[p, 0])
            rows.append([p, float(t), *s.w[p, :k], *hv, float(s.kl[p])])
    _write_csv(out_dir / "trajectories.csv", _meta(cfg, checkpoint=str(ckpt)), header, rows)
    if ds is not None:
        if cfg.task == "toy1d":
            grid = np.linspace(-3.0, 3.0, 201)
            mu, sd = ds.meta["input_mean"][0], ds.meta["input_std"][0]
            xs = augment_inputs(((grid - mu) / sd)[:, None], cfg.augment)
            f = predict(model, lik, xs, n_paths, sc, cfg.seed)[..., 0]
            lo, hi = np.quantile(f, [0.025, 0.975], axis=0)
            rows = [[g, m, a, b] for g, m, a, b in zip(grid, f.mean(axis=0), lo, hi)]
            header = ["x", "mean", "lo", "hi"]
        else:
            x, y = ds.split("test")
            probs = softmax(predict(model, lik, x, n_paths, sc, cfg.seed)).mean(axis=0)
            rows = [[i, int(y[i]), *probs[i]] for i in range(len(y))]
            header = ["index", "label", *(f"p_{c}" for c in range(probs.shape[1]))]
        _write_csv(out_dir / "predictive.csv", _meta(cfg, checkpoint=str(ckpt)), header, rows)
    return 0


def cmd_bench(cfg: RunConfig, out: Path, steps: list) -> int:
    """Backprop vs adjoint on one minibatch: wall time, retained states, agreement."""
    if cfg.task == "cauchy2":
        raise UsageError("bench needs a task with hidden dynamics (toy1d, twomoons, mnist)")
    ds = task_dataset(cfg)
    model, lik = model_from_spec(model_spec(cfg, ds.inputs.shape[1]), cfg.seed)
    x, y = ds.split("train")
    x, y = x[:cfg.batch_size], y[:cfg.batch_size]
    loss = elbo_loss(lik, y, cfg.estimator)
    paths = BrownianBatch(cfg.seed, np.arange(cfg.n_samples), model.weight_dim)
    rows = []
    for n in steps:
        sc = SolverConfig(steps=n)
        t0 = time.perf_counter()
        bp = grad_backprop(loss, model, x, paths, sc, cfg.estimator)
        t1 = time.perf_counter()
        adj = grad_adjoint(loss, model, x, paths, sc, cfg.estimator)
        t2 = time.perf_counter()
        ref = np.concatenate([bp.grads[k].ravel() for k in sorted(bp.grads)])
        got = np.concatenate([adj.grads[k].ravel() for k in sorted(bp.grads)])
        err = float(np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-300))
        rows.append([n, "backprop", t1 - t0, bp.peak_states, 0.0])
        rows.append([n, "adjoint", t2 - t1, adj.peak_states, err])
    _write_csv(out, _meta(cfg), BENCH_COLUMNS, rows)
    return 0


# -- argument parsing --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdebnn", description="SDE Bayesian neural networks: train, evaluate, benchmark.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_opts(sp):
        sp.add_argument("--config", type=Path, help="JSON or YAML config file")
        sp.add_argument("--task", choices=TASKS)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--estimator", choices=ESTIMATORS)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (value parsed as JSON when possible)")

    t = sub.add_parser("train", help="fit a model and write a checkpoint plus metric stream")
    run_opts(t)
    t.add_argument("--out", type=Path, required=True, help="output directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint, optionally sweeping solver settings")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--samples", type=int)
    e.add_argument("--sweep-steps", type=_int_list, default=[], metavar="N,N,...")
    e.add_argument("--sweep-rtol", type=_float_list, default=[], metavar="R,R,...")
    e.add_argument("--out", type=Path)

    g = sub.add_parser("gradvar", help="gradient variance of the three estimators during training")
    run_opts(g)
    g.add_argument("--out", type=Path, required=True, help="CSV path")

    s = sub.add_parser("sample", help="posterior trajectories and predictive curves")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--paths", type=int, default=20)
    s.add_argument("--max-weights", type=int, default=8)
    s.add_argument("--out", type=Path, required=True, help="output directory")

    b = sub.add_parser("bench", help="backprop vs adjoint gradients")
    run_opts(b)
    b.add_argument("--bench-steps", type=_int_list, default=[8, 16, 32, 64], metavar="N,N,...")
    b.add_argument("--out", type=Path, required=True, help="CSV path")
    return p


def _run_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in ("task", "seed", "epochs", "estimator", "lr", "steps", "workers")
                 if getattr(args, k) is not None}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)
    cfg = make_config(file_values=file_values, overrides=overrides)
    if cfg.workers > 1:
        log.warning("workers=%d requested; computation runs in one process", cfg.workers)
    return cfg


def _fail(code: int, exc: BaseException, command: str | None) -> int:
    err = {"code": code, "message": str(exc), "context": {"command": command, "type": type(exc).__name__}}
    if isinstance(exc, FormatError) and exc.offset is not None:
        err["context"]["offset"] = exc.offset
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if command == "train":
            return cmd_train(_run_config(args), args.out)
        if command == "eval":
            return cmd_eval(args.checkpoint, args.split, args.samples, args.sweep_steps,
                            args.sweep_rtol, args.out)
        if command == "gradvar":
            return cmd_gradvar(_run_config(args), args.out)
        if command == "sample":
            return cmd_sample(args.checkpoint, args.paths, args.out, args.max_weights)
        return cmd_bench(_run_config(args), args.out, args.bench_steps)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(1, exc, command)
    except (SdeBnnError, ArithmeticError, RuntimeError) as exc:
        return _fail(2, exc, command)


if __name__ == "__main__":
    sys.exit(main())
