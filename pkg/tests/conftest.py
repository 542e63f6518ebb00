import time

import numpy as np
import pytest

from lwta_icp import trainer
from lwta_icp.config import TrainConfig
from lwta_icp.data import ingest

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def central_difference(fn, x, step=1e-6):
    """Numerical gradient of scalar ``fn`` at array ``x`` (modified in place and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        up = fn()
        x[i] = old - step
        down = fn()
        x[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad


class TrainedRuns:
    """Lazily trained desk-scale runs shared across the session."""

    def __init__(self):
        self._cache = {}

    def get(self, dataset, preset, seed, epochs):
        key = (dataset, preset, seed, epochs)
        if key not in self._cache:
            data = ingest(dataset, seed=seed)
            config = TrainConfig(preset=preset, dataset=dataset, seed=seed, epochs=epochs)
            start = time.process_time()
            ckpt = trainer.train(config, data)
            self._cache[key] = (ckpt, data, time.process_time() - start)
        return self._cache[key]

    def digits(self, seed):
        return self.get("digits8x8", "cnn-mini", seed, 30)

    def blobs(self, seed):
        return self.get("blobs", "mlp-tiny", seed, 50)


@pytest.fixture(scope="session")
def runs():
    return TrainedRuns()


@pytest.fixture(scope="session")
def quick_blobs():
    """A short blobs run for tests that only need some trained checkpoint."""
    data = ingest("blobs", seed=3)
    config = TrainConfig(seed=3, epochs=8)
    return trainer.train(config, data), data
