import numpy as np
import pytest

from killchain.data import make_toy2d_dataset
from killchain.model import ArchitectureSpec, TrainConfig, init_model, train


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("KILLCHAIN_CACHE", str(tmp_path_factory.getbasetemp() / "cache"))


@pytest.fixture(scope="session")
def tiny_classifier():
    spec = ArchitectureSpec.classifier((8, 8, 3), 4, filters=[4], dense=[8])
    return init_model(spec, seed=3)


@pytest.fixture(scope="session")
def tiny_localizer():
    spec = ArchitectureSpec.localizer((8, 8, 3), filters=[4], dense=[8])
    return init_model(spec, seed=4)


@pytest.fixture(scope="session")
def toy_victim():
    data = make_toy2d_dataset(400, seed=0)
    spec = ArchitectureSpec.classifier((1, 1, 2), 3, filters=[], dense=[16])
    return train(spec, data, TrainConfig(epochs=40, batch_size=32, learning_rate=0.01, optimizer="adam", seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
