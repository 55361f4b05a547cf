import numpy as np
import pytest

from dino import DinoConfig, DinoModel, Grid2D
from dino.opdiff import DiffBranchConfig
from dino.opint import AttentionConfig


def tiny_config(n=16, channels=4, d_z=8, n_layers=2, diff_layers=2, patch=4, dtype="float64", seed=3):
    return DinoConfig(
        Grid2D(n, n),
        lift_channels=channels,
        diff=DiffBranchConfig(n_layers=diff_layers, channels=channels),
        attn=AttentionConfig(n_layers=n_layers, d_z=d_z, n_heads=2, patch=patch),
        dtype=dtype,
        seed=seed,
    )


def perturb(model, scale=0.1, seed=0):
    """Give the zero-initialised projection random weights so the model is not the identity."""
    rng = np.random.default_rng(seed)
    for name in ("proj.w2", "proj.b2"):
        p = model.params[name]
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    for name, p in model.params.items():
        if name.endswith((".wo", ".mlp.w2")):
            p.data[...] = rng.normal(0.0, 0.2, size=p.shape)
    return model


@pytest.fixture
def tiny_model():
    return DinoModel(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient(fn, arrays, cot, eps=1e-5):
    """Central differences of ``sum(cot * fn(*arrays))`` w.r.t. every array entry."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + eps
            up = np.sum(cot * fn(*arrays))
            a[idx] = old - eps
            down = np.sum(cot * fn(*arrays))
            a[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
