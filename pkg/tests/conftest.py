import os

import hypothesis
import pytest

from qdnet.config import parse_config

hypothesis.settings.register_profile("ci", deadline=None, max_examples=60)
hypothesis.settings.register_profile("quick", deadline=None, max_examples=10)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

STAR_YAML = """
engine_host: engine
time_scale: 50
nodes:
  - {name: Quintin, api_port: 8001}
  - {name: Quijote, api_port: 8002}
  - {name: Quevedo, api_port: 8003}
  - {name: Aquiles, api_port: 8004}
links:
  - {endpoint_a: Quintin, endpoint_b: Quijote, length_km: 20.0, attenuation_db: 8.0}
  - {endpoint_a: Quijote, endpoint_b: Quevedo, length_km: 7.4, attenuation_db: 5.4}
  - endpoint_a: Quijote
    endpoint_b: Aquiles
    length_km: 40.68
    attenuation_db: 11.9
    eve: {intercept_fraction: 0.3, position_km: 20.34}
"""


@pytest.fixture
def star():
    return parse_config(STAR_YAML)


# -- acceptance summary ------------------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test decides")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if call.when == "call" or call.excinfo is not None:
        failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
        prev = _criteria.get(n, (title, "PASS"))[1]
        _criteria[n] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, verdict = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}")
