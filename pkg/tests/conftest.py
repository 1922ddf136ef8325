import numpy as np
import pytest

from querytagger.corpus import GenConfig, generate_synthetic_corpus
from querytagger.training import Corpora

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = CRITERIA.setdefault(number, {"title": title, "passed": True, "detail": []})
    if rep.failed:
        entry["passed"] = False
    for key, value in item.user_properties:
        if key == "detail" and rep.when == "call":
            entry["detail"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        entry = CRITERIA[number]
        status = "PASS" if entry["passed"] else "FAIL"
        detail = "; ".join(entry["detail"])
        line = f"criterion {number:2d} {status}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement to the acceptance summary."""
    def add(text):
        record_property("detail", text)
    return add


@pytest.fixture(scope="session")
def small_corpus():
    cfg = GenConfig(seed=11, n_unlabeled=300, n_weak=160, n_strong=60, n_test=60)
    return generate_synthetic_corpus(cfg)


@pytest.fixture(scope="session")
def small_corpora(small_corpus):
    c = small_corpus
    return Corpora(c.unlabeled, c.weak, c.strong, c.test, c.scheme)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
