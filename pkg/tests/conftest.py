import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


def random_step_mixture(rng: np.random.Generator, B=None, T=3, M=3, dtype=torch.float64, spread=2.0):
    from dualmix.gm import StepMixture, factor_from_raw

    lead = () if B is None else (B,)
    means = torch.as_tensor(rng.normal(0, spread, lead + (T, M, 2)), dtype=dtype)
    raw = torch.as_tensor(rng.normal(0, 0.7, lead + (T, M, 3)), dtype=dtype)
    logits = torch.as_tensor(rng.normal(0, 1, lead + (T, M)), dtype=dtype)
    return StepMixture(means, factor_from_raw(raw), logits)


_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    _CRITERIA[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
