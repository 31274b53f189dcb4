"""Seed-reproducible Brownian motion on [0, 1] built from a dyadic bridge tree.

Every node of the binary subdivision tree of [0, 1] owns one standard normal
vector, generated by the counter-based Philox4x32-10 generator keyed by
``(seed, path_id)`` with the node's heap index as counter (counter 0 is
reserved for the endpoint value B(1), heap index 1 is the root).  The value of the
path at any dyadic time is obtained by descending the tree and sampling
Brownian-bridge midpoints, so no noise is ever stored and any interval can be
recomputed on demand (forward solves, adjoint replays, step-size rejection).

Path values are rounded onto a fixed lattice of spacing ``2**-44``.  All sums
and differences of lattice values are then exact in double precision, which
makes increments exactly additive under subdivision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import ContractError, DomainError

MAX_DEPTH = 32
_QUANTUM = 2.0**-44
_INV_QUANTUM = 2.0**44

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)
_PATH_TAG = 0xB0B0CAFE


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function, vectorised over broadcastable arrays.

    Parameters
    ----------
    counter : sequence of 4 integer arrays (each word < 2**32)
    key : sequence of 2 integer arrays (each word < 2**32)

    Returns
    -------
    tuple of 4 ``uint64`` arrays holding 32-bit output words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    k0, k1 = (np.asarray(k, dtype=np.uint64) & _MASK for k in key)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    for r in range(rounds):
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0, lo0 = p0 >> _SHIFT, p0 & _MASK
        hi1, lo1 = p1 >> _SHIFT, p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        if r + 1 < rounds:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


def _split64(x):
    x = np.asarray(x, dtype=np.uint64)
    return x & _MASK, x >> _SHIFT


def path_keys(seed: int, path_ids) -> tuple[np.ndarray, np.ndarray]:
    """Derive the 64-bit Philox key of each path from ``(seed, path_id)``."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ids = np.asarray(path_ids, dtype=np.uint64)
    lo, hi = _split64(ids)
    out = philox4x32((lo, hi, 0, _PATH_TAG), (seed & 0xFFFFFFFF, seed >> 32))
    return out[0], out[1]


def _uniform_pairs(words):
    x0, x1, x2, x3 = words
    scale = 1.0 / 2.0**53
    u0 = ((x0 >> np.uint64(5)).astype(np.float64) * 67108864.0
          + (x1 >> np.uint64(6)).astype(np.float64) + 0.5) * scale
    u1 = ((x2 >> np.uint64(5)).astype(np.float64) * 67108864.0
          + (x3 >> np.uint64(6)).astype(np.float64) + 0.5) * scale
    return u0, u1


def node_normals(keys, nodes, dim: int) -> np.ndarray:
    """Standard normals owned by tree nodes.

    ``keys`` is a pair of arrays of shape (P,), ``nodes`` an integer array of
    heap indices of shape (K,).  Returns an array of shape (P, K, dim).
    """
    k0 = np.asarray(keys[0], dtype=np.uint64)[:, None, None]
    k1 = np.asarray(keys[1], dtype=np.uint64)[:, None, None]
    lo, hi = _split64(nodes)
    lo = lo[None, :, None]
    hi = hi[None, :, None]
    blocks = np.arange((dim + 1) // 2, dtype=np.uint64)[None, None, :]
    u0, u1 = _uniform_pairs(philox4x32((lo, hi, blocks, 0), (k0, k1)))
    u = np.stack([u0, u1], axis=-1).reshape(u0.shape[0], u0.shape[1], -1)[..., :dim]
    return ndtri(u)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.rint(x * _INV_QUANTUM) * _QUANTUM


def _bridge(b_left, b_right, length: float, z):
    # length is an exact power of two, so the midpoint std is exact too
    return _quantize(0.5 * (b_left + b_right) + np.sqrt(0.25 * length) * z)


def to_ticks(times, snap: bool = False, depth: int = MAX_DEPTH) -> np.ndarray:
    """Convert times in [0, 1] to integer positions on the ``2**-depth`` lattice."""
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"times must lie in the horizon [0, 1], got {t}")
    scaled = t * 2.0**depth
    ticks = np.rint(scaled)
    if not snap and np.any(ticks != scaled):
        raise DomainError(f"times {t[ticks != scaled]} are not on the dyadic grid of depth {depth}")
    return ticks.astype(np.int64)


def _values_uniform(keys, level: int, dim: int) -> np.ndarray:
    """Path values at all ``2**level + 1`` points of a uniform dyadic grid."""
    n_paths = keys[0].shape[0]
    vals = np.zeros((n_paths, 2, dim))
    vals[:, 1] = _quantize(node_normals(keys, np.array([0]), dim)[:, 0])
    for lev in range(level):
        n = 2**lev
        nodes = np.arange(n, 2 * n, dtype=np.uint64)
        z = node_normals(keys, nodes, dim)
        mids = _bridge(vals[:, :-1], vals[:, 1:], 2.0**-lev, z)
        new = np.empty((n_paths, 2 * n + 1, dim))
        new[:, 0::2] = vals
        new[:, 1::2] = mids
        vals = new
    return vals


def _values_descend(keys, ticks: np.ndarray, dim: int, depth: int) -> np.ndarray:
    """Path values at arbitrary lattice ticks by per-point tree descent."""
    n_paths = keys[0].shape[0]
    k = ticks.shape[0]
    lo = np.zeros(k, dtype=np.int64)
    hi = np.full(k, 2**depth, dtype=np.int64)
    node = np.ones(k, dtype=np.uint64)
    b_lo = np.zeros((n_paths, k, dim))
    b_hi = np.repeat(_quantize(node_normals(keys, np.array([0]), dim)), k, axis=1)
    out = np.where((ticks == hi)[None, :, None], b_hi, 0.0)
    active = (ticks != lo) & (ticks != hi)
    for lev in range(depth):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        z = node_normals(keys, node[idx], dim)
        b_mid = _bridge(b_lo[:, idx], b_hi[:, idx], 2.0**-lev, z)
        mid = (lo[idx] + hi[idx]) // 2
        go_left = ticks[idx] < mid
        hit = ticks[idx] == mid
        out[:, idx[hit]] = b_mid[:, hit]
        left, right = idx[go_left], idx[~go_left]
        hi[left] = mid[go_left]
        b_hi[:, left] = b_mid[:, go_left]
        lo[right] = mid[~go_left]
        b_lo[:, right] = b_mid[:, ~go_left]
        node[idx] = 2 * node[idx] + (~go_left).astype(np.uint64)
        active[idx[hit]] = False
    return out


def _dyadic_level(ticks: np.ndarray, depth: int) -> int | None:
    """Level ``k`` if ``ticks`` are exactly the uniform grid ``i / 2**k``."""
    n = ticks.shape[0] - 1
    if n < 1 or n & (n - 1):
        return None
    level = n.bit_length() - 1
    if level > depth:
        return None
    expected = np.arange(n + 1, dtype=np.int64) * 2 ** (depth - level)
    return level if np.array_equal(ticks, expected) else None


@dataclass(frozen=True)
class SeedKey:
    """Identifies one Brownian path: a global seed and a path index."""

    seed: int
    path_id: int = 0

    def __post_init__(self):
        for name in ("seed", "path_id"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise DomainError(f"{name} must be an unsigned 64-bit integer, got {v}")


class BrownianBatch:
    """Independent Brownian paths sharing a seed, indexed by ``path_ids``.

    All query methods return arrays with a leading path axis of size
    ``n_paths``.  Instances are immutable and hold no cached noise.
    """

    def __init__(self, seed: int, path_ids, dim: int, max_depth: int = MAX_DEPTH):
        if int(dim) < 1:
            raise ContractError(f"Brownian dimension must be positive, got {dim}")
        if not 1 <= max_depth <= MAX_DEPTH:
            raise DomainError(f"max_depth must be in [1, {MAX_DEPTH}]")
        self.seed = int(seed)
        self.path_ids = np.atleast_1d(np.asarray(path_ids, dtype=np.uint64))
        self.dim = int(dim)
        self.max_depth = int(max_depth)
        self._keys = path_keys(self.seed, self.path_ids)

    @property
    def n_paths(self) -> int:
        return self.path_ids.shape[0]

    def values(self, times, snap: bool = False) -> np.ndarray:
        """B at each time, shape (n_paths, len(times), dim)."""
        ticks = to_ticks(times, snap=snap, depth=self.max_depth)
        level = _dyadic_level(ticks, self.max_depth)
        if level is not None:
            return _values_uniform(self._keys, level, self.dim)
        uniq, inverse = np.unique(ticks, return_inverse=True)
        vals = _values_descend(self._keys, uniq, self.dim, self.max_depth)
        return vals[:, inverse]

    def increment(self, t0: float, t1: float) -> np.ndarray:
        """B(t1) - B(t0) for every path, shape (n_paths, dim)."""
        if t1 < t0:
            raise DomainError(f"increment needs t0 <= t1, got t0={t0}, t1={t1}")
        v = self.values([t0, t1])
        return v[:, 1] - v[:, 0]

    def subdivide(self, t0: float, t1: float, t_mid: float) -> np.ndarray:
        """B(t_mid) - B(t0): the bridge sample inside the known interval [t0, t1]."""
        if not t0 < t_mid < t1:
            raise DomainError(f"t_mid={t_mid} must lie strictly inside ({t0}, {t1})")
        v = self.values([t0, t_mid, t1])
        return v[:, 1] - v[:, 0]

    def grid_increments(self, n_steps: int) -> np.ndarray:
        """Increments over the uniform grid of ``n_steps`` steps, shape (n_paths, n_steps, dim).

        Non power-of-two grids are snapped onto the ``2**-max_depth`` lattice.
        """
        times = np.linspace(0.0, 1.0, int(n_steps) + 1)
        v = BrownianBatch.values(self, times, snap=True)
        return np.diff(v, axis=1)

    def path(self, i: int) -> "BrownianPath":
        return BrownianPath(SeedKey(self.seed, int(self.path_ids[i])), self.dim, self.max_depth)


class BrownianPath(BrownianBatch):
    """A single reproducible Brownian path; queries drop the path axis."""

    def __init__(self, key: SeedKey, dim: int, max_depth: int = MAX_DEPTH):
        super().__init__(key.seed, [key.path_id], dim, max_depth)
        self.key = key

    def values(self, times, snap: bool = False) -> np.ndarray:
        return super().values(times, snap=snap)[0]

    def increment(self, t0: float, t1: float) -> np.ndarray:
        if t1 < t0:
            raise DomainError(f"increment needs t0 <= t1, got t0={t0}, t1={t1}")
        v = self.values([t0, t1])
        return v[1] - v[0]

    def subdivide(self, t0: float, t1: float, t_mid: float) -> np.ndarray:
        if not t0 < t_mid < t1:
            raise DomainError(f"t_mid={t_mid} must lie strictly inside ({t0}, {t1})")
        v = self.values([t0, t_mid, t1])
        return v[1] - v[0]

    def grid_increments(self, n_steps: int) -> np.ndarray:
        return super().grid_increments(n_steps)[0]

    def as_batch(self) -> BrownianBatch:
        return BrownianBatch(self.seed, self.path_ids, self.dim, self.max_depth)
