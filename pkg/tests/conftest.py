from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=100)
settings.register_profile("ci", deadline=None, max_examples=300, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("quick", deadline=None, max_examples=20)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def ledger_path(tmp_path: Path) -> Path:
    return tmp_path / "ledger.jsonl"


@pytest.fixture
def loopback():
    from qvote.transport import LoopbackChannel

    channel = LoopbackChannel()
    yield channel
    channel.close()


@pytest.fixture
def committee(loopback, ledger_path):
    """A noiseless committee listening on the loopback channel."""
    from qvote.bb84 import NoiseModel
    from qvote.protocol import ElectionConfig
    from qvote.service import serve

    service = serve(ElectionConfig(noise=NoiseModel.fixed(0.0), seed=7), loopback, ledger_path, fsync=False)
    yield service
    service.stop()


@pytest.fixture
def broker_uri():
    """``QVOTE_BROKER_URI`` if set, else a throwaway in-process broker."""
    uri = os.environ.get("QVOTE_BROKER_URI")
    if uri:
        yield uri
        return
    from mqtt_broker import MiniBroker

    with MiniBroker() as broker:
        yield broker.uri


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
