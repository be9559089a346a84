import os

import numpy as np
import pytest

from ucad.encoder import EncoderConfig, init_encoder
from ucad.harness.protocol import run_continual
from ucad.harness.synthetic import StreamConfig


@pytest.fixture(scope="session")
def tiny_encoder():
    return init_encoder(EncoderConfig(patch_size=4, embed_dim=8, num_layers=2, num_heads=2, tap_layer=2))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


def _single_threaded(fn):
    old = os.environ.pop("UCAD_THREADS", None)
    try:
        return fn()
    finally:
        if old is not None:
            os.environ["UCAD_THREADS"] = old


@pytest.fixture(scope="session")
def default_report():
    """The seed-42 default benchmark, run once per session."""
    return _single_threaded(lambda: run_continual(StreamConfig()))


@pytest.fixture(scope="session")
def oracle_report():
    return _single_threaded(lambda: run_continual(StreamConfig(), oracle_routing=True))


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, passed, detail)``."""
    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}"
        if detail:
            line += f" ({detail})"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
