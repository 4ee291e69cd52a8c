import numpy as np
import pytest

from dsen.data import SyntheticSpec, gen_synthetic
from dsen.losses import Batch
from dsen.model import DsenModel


def finite_difference_grads(loss_fn, params: dict, step: float = 1e-5) -> dict:
    """Central differences of ``loss_fn()`` with respect to every entry of ``params``."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    worst = 0.0
    for name, num in numeric.items():
        ana = analytic.get(name, np.zeros_like(num))
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst


def toy_batch(seed: int = 0, n: int = 4, attr_dim: int = 5, feat_dim: int = 6, hidden: int = 7,
              n_seen: int = 3, n_unseen: int = 2, adapter: bool = False):
    rng = np.random.default_rng(seed)
    model = DsenModel.init(attr_dim, feat_dim, hidden, range(n_seen), range(n_seen, n_seen + n_unseen),
                           seed=seed, adapter=adapter)
    if adapter:
        model.adapter.weight += rng.normal(0, 0.1, model.adapter.weight.shape)
    batch = Batch(
        features=rng.normal(size=(n, feat_dim)),
        labels=rng.integers(0, n_seen, size=n),
        seen_attrs=rng.normal(size=(n_seen, attr_dim)),
        unseen_attrs=rng.normal(size=(n_unseen, attr_dim)),
    )
    return model, batch


@pytest.fixture(scope="session")
def toy_dataset():
    return gen_synthetic(SyntheticSpec(n_seen=4, n_unseen=3, samples_per_class=12, seed=3))


_ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
