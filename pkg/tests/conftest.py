import numpy as np
import pytest

from infkit.gradstore import GradientDataset, LayerSpec


def make_dataset(rng, layers, n_train, n_val=3, dtype="f64", scale=1.0):
    """Random gradient rows with metadata; ids are shuffled so order != id order."""
    n = n_train + n_val
    d = sum(layer.dim for layer in layers)
    rows = scale * rng.standard_normal((n, d))
    ids = rng.permutation(np.arange(100, 100 + 3 * n))[:n]
    split = np.array(["train"] * n_train + ["val"] * n_val, dtype=object)
    labels = rng.integers(0, 2, n)
    source = np.array([f"s{i % 3}" for i in range(n)], dtype=object)
    flipped = rng.random(n) < 0.3
    return GradientDataset(list(layers), rows, ids, labels, source, split, flipped, dtype=dtype)


def random_layers(rng, max_layers=3, max_dim=12, linear=False):
    out = []
    for i in range(int(rng.integers(1, max_layers + 1))):
        if linear:
            out.append(LayerSpec.linear(f"l{i}", int(rng.integers(1, 6)), int(rng.integers(1, 5))))
        else:
            out.append(LayerSpec(f"l{i}", int(rng.integers(1, max_dim + 1))))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
