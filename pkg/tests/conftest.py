import os

import pytest
from hypothesis import HealthCheck, settings

from pmtrain import envelope as env
from pmtrain.toydata import OVERLAPPING, SEPARABLE, write_toy

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


@pytest.fixture
def key():
    return env.generate_key()


@pytest.fixture
def key_file(tmp_path, key):
    path = tmp_path / "key.bin"
    env.save_key(key, path)
    return str(path)


@pytest.fixture(scope="session")
def toy_separable(tmp_path_factory):
    return write_toy(tmp_path_factory.mktemp("toy-sep"), SEPARABLE)


@pytest.fixture(scope="session")
def toy_overlapping(tmp_path_factory):
    return write_toy(tmp_path_factory.mktemp("toy-ovl"), OVERLAPPING)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
