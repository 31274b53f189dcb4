import numpy as np
import pytest


def central_diff(f, x, eps=1e-5):
    """Central finite-difference gradient of a scalar function of a flat array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


from sdebnn import autodiff as ad  # noqa: E402
from sdebnn.model import PriorSpec, SdeBnnModel  # noqa: E402


class ConstDrift:
    """Drift gap ``NN = phi[0]`` in every weight component."""

    n_params = 1

    def __init__(self, weight_dim=1):
        self.weight_dim = weight_dim

    def __call__(self, t, w, phi):
        w, phi = ad.as_node(w), ad.as_node(phi)
        row = ad.expand(phi, 0, self.weight_dim)  # (D, 1)
        return ad.expand(ad.reshape(row, (self.weight_dim,)), 0, w.shape[0])


class AffineDrift:
    """Drift gap ``NN = phi[0] * w + phi[1] * t + phi[2]`` (scalar weight)."""

    weight_dim = 1
    n_params = 3

    def __call__(self, t, w, phi):
        w, phi = ad.as_node(w), ad.as_node(phi)
        n = w.shape[0]
        a = ad.expand(phi[0:1], 0, n)
        b = ad.expand(phi[1:2], 0, n)
        c = ad.expand(phi[2:3], 0, n)
        return ad.mul(a, w) + b * t + c


def latent_model(drift, sigma, phi, w0):
    return SdeBnnModel(PriorSpec(sigma), drift, None,
                       {"phi": np.asarray(phi, dtype=float), "w0": np.asarray(w0, dtype=float)})


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory):
    """One full-default toy1d training run through the CLI (seed 7), shared across tests."""
    import time
    from sdebnn.cli import main
    out = tmp_path_factory.mktemp("toy1d")
    t0 = time.perf_counter()
    assert main(["train", "--task", "toy1d", "--seed", "7", "--out", str(out)]) == 0
    return {"dir": out, "wall_time_s": time.perf_counter() - t0}


# -- acceptance report -------------------------------------------------------------

ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one pass/fail line, then asserts."""
    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_RESULTS[n] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
