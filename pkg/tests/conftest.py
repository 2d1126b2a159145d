import numpy as np
import pytest
import torch

from xprot.model import Encoder, ModelConfig, init_weights

torch.set_num_threads(1)


def random_model(n_layers=1, n_heads=2, d_model=8, d_ff=12, seed=0, std=0.3, n_classes=2,
                 max_positions=40, task_kind="multiclass"):
    """Small model with weights large enough that every nonlinearity is exercised."""
    cfg = ModelConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_ff=d_ff,
                      max_positions=max_positions, n_classes=n_classes, head_hidden=10,
                      task_kind=task_kind, dropout_rate=0.0)
    return Encoder(cfg, init_weights(cfg, seed, std=std, scheme="normal"))


@pytest.fixture
def small_model():
    return random_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_relative_error(analytic, numeric, floor=1e-4):
    """Relative error with an absolute floor on the denominator.

    Central differences carry an O(eps^2) truncation term, so coordinates
    whose derivative is itself tiny are compared on an absolute scale.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_difference(fn, x, index, eps=1e-4):
    xp, xm = x.copy(), x.copy()
    xp[index] += eps
    xm[index] -= eps
    return (fn(xp) - fn(xm)) / (2 * eps)


def random_tokens(gen, lo=1, hi=10):
    return [2] + [int(t) for t in gen.integers(4, 24, size=int(gen.integers(lo, hi + 1)))] + [3]


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion; printed in the terminal summary."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
