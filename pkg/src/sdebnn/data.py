"""Datasets: synthetic regression/classification toys and an IDX (MNIST) reader.

The 1D regression target is ``f(x) = sin(2x) * exp(-0.3 x^2)`` on
``x ~ Uniform(-3, 3)`` plus Gaussian noise; it has two interior extrema of
each kind and is therefore not representable by a monotone map.
"""
from __future__ import annotations

import csv
import gzip
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

DATA_DIR_ENV = "SDEBNN_DATA_DIR"


def toy1d_target(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sin(2.0 * x) * np.exp(-0.3 * x**2)


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ContractError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if not self.splits:
            self.splits = {"train": np.arange(len(self.inputs))}
        seen = np.concatenate([np.asarray(v) for v in self.splits.values()]) if self.splits else []
        if len(seen) != len(self.inputs) or len(np.unique(seen)) != len(seen):
            raise ContractError("splits must partition the example indices")

    def __len__(self) -> int:
        return len(self.inputs)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.inputs[idx], self.targets[idx]

    def with_splits(self, fractions: dict, seed: int) -> "Dataset":
        """Random partition, e.g. ``{"train": 0.8, "val": 0.1, "test": 0.1}``."""
        perm = np.random.default_rng(seed).permutation(len(self))
        names = list(fractions)
        cuts = np.cumsum([int(round(fractions[k] * len(self))) for k in names[:-1]])
        parts = np.split(perm, cuts)
        return Dataset(self.inputs, self.targets, {k: np.sort(p) for k, p in zip(names, parts)},
                       dict(self.meta))

    def standardized(self, ref: str = "train") -> "Dataset":
        """Zero-mean / unit-variance inputs using statistics of split ``ref``."""
        x = self.inputs[self.splits[ref]]
        mu, sd = x.mean(axis=0), x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        meta = dict(self.meta, input_mean=mu.tolist(), input_std=sd.tolist())
        return Dataset((self.inputs - mu) / sd, self.targets, self.splits, meta)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.inputs.shape[1])] + ["y", "split"])
            tags = np.empty(len(self), dtype=object)
            for name, idx in self.splits.items():
                tags[idx] = name
            for x, y, s in zip(self.inputs, self.targets, tags):
                w.writerow([*map(repr, map(float, x)), repr(y.item() if hasattr(y, "item") else y), s])


def gen_toy1d(n: int = 200, noise: float = 0.1, seed: int = 0) -> Dataset:
    if n < 2:
        raise ContractError("need at least two points")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, size=n)
    y = toy1d_target(x) + noise * rng.standard_normal(n)
    return Dataset(x[:, None], y, meta={"task": "toy1d", "noise": noise, "seed": seed})


def gen_two_moons(n: int = 1000, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles, labels 0 (upper) and 1 (lower).

    Angles are evenly spaced on each arc; only the noise and order are random.
    """
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    a0 = np.linspace(0.0, np.pi, n0)
    a1 = np.linspace(0.0, np.pi, n1)
    upper = np.stack([np.cos(a0), np.sin(a0)], axis=1)
    lower = np.stack([1.0 - np.cos(a1), 0.5 - np.sin(a1)], axis=1)
    x = np.concatenate([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], meta={"task": "twomoons", "noise": noise, "seed": seed})


def gen_cauchy_two_obs(values=(1.0, -1.0), time: float = 0.5, scale: float = 0.1) -> Dataset:
    """Observations ``(t, y)`` of a latent path, each with a Cauchy likelihood.

    Two observations of opposite sign at the same time make the posterior
    over the path bimodal.  Passing fewer values gives the degenerate cases.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    times = np.full((len(values), 1), float(time))
    splits = {"train": np.arange(len(values))} if len(values) else {"train": np.arange(0)}
    return Dataset(times, values, splits, meta={"task": "cauchy2", "scale": scale})


_IDX_TYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
              0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def read_idx(path) -> np.ndarray:
    """Read an IDX array file (optionally gzip-compressed)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError("file too short for an IDX header", offset=len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"bad IDX magic {raw[:4].hex()}", offset=0)
    if raw[2] not in _IDX_TYPES:
        raise FormatError(f"unknown IDX element type 0x{raw[2]:02x}", offset=2)
    dtype, ndim = _IDX_TYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX dimension table", offset=len(raw))
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndim, offset=4))
    count = int(np.prod(dims)) if dims else 0
    need = header + count * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"truncated IDX payload: need {need} bytes, have {len(raw)}", offset=len(raw))
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """MNIST-style pair of IDX files: images (magic 0x803) and labels (0x801)."""
    for p, magic in ((images_path, 0x803), (labels_path, 0x801)):
        with (gzip.open if str(p).endswith(".gz") else open)(p, "rb") as fh:
            head = fh.read(4)
        if len(head) < 4 or int.from_bytes(head, "big") != magic:
            raise FormatError(f"{p}: expected magic 0x{magic:08x}, got 0x{head.hex()}", offset=0)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), meta={"task": "mnist", "image_shape": images.shape[1:]})


def write_idx(path, array: np.ndarray) -> None:
    """Write ``array`` as an IDX file (big-endian), inverse of :func:`read_idx`."""
    array = np.asarray(array)
    code = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    key = array.dtype.newbyteorder("=")
    if key not in code:
        raise ContractError(f"dtype {array.dtype} has no IDX code")
    t = code[key]
    header = bytes([0, 0, t, array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + array.astype(_IDX_TYPES[t]).tobytes())


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))
