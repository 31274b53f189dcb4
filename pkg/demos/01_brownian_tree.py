"""Seeded Brownian paths: query any dyadic interval, get the same numbers back.

Run: python3 demos/01_brownian_tree.py
"""
# %%
import numpy as np

from sdebnn.brownian import BrownianBatch, BrownianPath, SeedKey

path = BrownianPath(SeedKey(seed=0, path_id=3), dim=2)
print("B(1)            ", path.increment(0.0, 1.0))
print("B(.5) + (B1-B.5)", path.increment(0.0, 0.5) + path.increment(0.5, 1.0))

# %% the same increments come back regardless of query order
fine = path.grid_increments(8)
print("8 leaves sum to B(1):", np.array_equal(fine.sum(axis=0), path.increment(0.0, 1.0)))

# %% many paths at once: Var[B(1/4)] should be close to 0.25
batch = BrownianBatch(seed=1, path_ids=np.arange(100_000), dim=1)
inc = batch.increment(0.0, 0.25)[:, 0]
print(f"Var[B(0.25)] = {inc.var():.4f}  (SE {0.25 * np.sqrt(2 / inc.size):.4f})")
