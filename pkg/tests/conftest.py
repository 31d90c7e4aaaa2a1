import numpy as np
import pytest

from confrank.features import DriftStreamConfig, ExampleSet, generate_drift_stream

_CRITERIA: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.setdefault(name, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _CRITERIA.items():
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_stream():
    """Six short days over four fields; cheap enough for pipeline tests."""
    cfg = DriftStreamConfig(
        days=6, examples_per_day=600, n_fields=4, cardinality=40, hash_dim=64, seed=3, base_ctr=0.3
    )
    return generate_drift_stream(cfg)


def make_examples(n_days, per_day, field_count=3, hash_dim=16, seed=0, ctr=0.4):
    rng = np.random.default_rng(seed)
    n = n_days * per_day
    return ExampleSet(
        ids=np.arange(n),
        timestamps=np.repeat(np.arange(1, n_days + 1), per_day),
        labels=(rng.random(n) < ctr).astype(np.int8),
        indices=rng.integers(0, hash_dim, size=(n, field_count)),
    )
