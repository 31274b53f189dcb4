"""Fit an SDE-BNN to a non-monotonic 1D curve and inspect the predictive band.

Takes about a minute on one core.  Run: python3 demos/02_toy_regression.py
"""
# %%
import numpy as np

from sdebnn.cli import make_config, model_spec, task_dataset
from sdebnn.data import toy1d_target
from sdebnn.train import augment_inputs, fit, model_from_spec, predict

cfg = make_config("toy1d", overrides={"seed": 0})
ds = task_dataset(cfg)
model, lik = model_from_spec(model_spec(cfg, ds.inputs.shape[1]), cfg.seed)


def report(rec):
    if rec["epoch"] % 100 == 0:
        print(f"epoch {rec['epoch']:4d}  elbo {rec['elbo']:9.2f}  kl {rec['kl']:7.3f}")


res = fit(model, lik, ds, cfg.train_config(), on_epoch=report)

# %% posterior predictive on a grid
grid = np.linspace(-3, 3, 13)
mu, sd = ds.meta["input_mean"][0], ds.meta["input_std"][0]
f = predict(res.model, lik, augment_inputs(((grid - mu) / sd)[:, None], cfg.augment), 50,
            cfg.solver(), seed=0)[..., 0]
lo, hi = np.quantile(f, [0.025, 0.975], axis=0)
print("\n    x    target    mean    band")
for x, t, m, a, b in zip(grid, toy1d_target(grid), f.mean(axis=0), lo, hi):
    print(f"{x:5.1f}  {t:7.3f}  {m:7.3f}  [{a:6.3f}, {b:6.3f}]")
