import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_CRITERIA = {
    1: "gradient oracle",
    2: "EMA law",
    3: "loss identities",
    4: "gap reduction",
    5: "downstream direction",
    6: "similarity monitoring",
    7: "distance-function matrix",
    8: "intra toggle",
    9: "determinism and persistence",
    10: "CIFAR ingestion",
}
_acceptance_results = {}


@pytest.fixture
def criterion():
    """Record the verdict of one acceptance criterion for the end-of-run summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _acceptance_results[number] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, name in ACCEPTANCE_CRITERIA.items():
        ok, detail = _acceptance_results.get(number, (False, "not run"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number:>2}. {name}: {detail}")
