import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("KADAPTER_SEED", raising=False)


@pytest.fixture
def report(capsys):
    """Print a line straight to the terminal, bypassing output capture."""
    def emit(line: str) -> None:
        with capsys.disabled():
            print(line)
    return emit
