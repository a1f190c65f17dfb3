import numpy as np
import pytest

from pessimlab.dynamics import ModelConfig, train_ensemble
from pessimlab.envlab import generate_dataset, make_env


@pytest.fixture(scope="session")
def cliffcar():
    return make_env("cliffcar")


@pytest.fixture(scope="session")
def small_medium(cliffcar):
    return generate_dataset(cliffcar, "medium", 1200, 0)


@pytest.fixture(scope="session")
def small_model(small_medium):
    return train_ensemble(small_medium, ModelConfig(n_total=5, n_elite=3, hidden_sizes=(32, 32), epochs=8, seed=0))


@pytest.fixture(scope="session")
def fitted_medium(cliffcar):
    """A model good enough that a planner can find and exploit its errors."""
    ds = generate_dataset(cliffcar, "medium", 3000, 0)
    return ds, train_ensemble(ds, ModelConfig(n_total=5, n_elite=3, epochs=40, seed=0))


def random_dataset(rng, n=None, d_s=None, d_a=None, meta=None):
    from pessimlab.core import Dataset

    n = n or int(rng.integers(1, 50))
    d_s = d_s or int(rng.integers(1, 5))
    d_a = d_a or int(rng.integers(1, 3))
    return Dataset(rng.normal(size=(n, d_s)) * 10 ** rng.uniform(-3, 3), rng.uniform(-1, 1, (n, d_a)),
                   rng.normal(size=n), rng.normal(size=(n, d_s)), rng.random(n) < 0.2,
                   meta=meta or {"env_id": "synthetic", "tier": "random", "seed": 0})


ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
