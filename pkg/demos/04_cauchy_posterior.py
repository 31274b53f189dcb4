"""Two Cauchy observations of opposite sign give a two-humped posterior.

Fits the latent SDE posterior (about 30 s), then prints a text histogram of
w at the observation time.  Run: python3 demos/04_cauchy_posterior.py
"""
# %%
import numpy as np

from sdebnn.brownian import BrownianBatch
from sdebnn.train import fit_latent
from sdebnn.variational import cauchy_toy

toy = cauchy_toy()
res = fit_latent(toy, "stl", 1500, lr=1e-2, n_paths=16, record_every=300,
                 on_step=lambda r: print(f"step {r['step']:5d}  elbo {r['elbo']:8.3f}"))
w = toy.sample(res.model, BrownianBatch(99, np.arange(10_000), 1))[:, toy.obs_steps[0]]

# %%
counts, edges = np.histogram(w, bins=24, range=(-2, 2))
for c, a in zip(counts, edges):
    print(f"{a:+5.2f} {'#' * int(60 * c / counts.max())}")
print(f"P(w > 0) = {np.mean(w > 0):.3f}")
