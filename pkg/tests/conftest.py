import numpy as np
import pytest
import torch

from dems.data import synth_generate

ACCEPTANCE_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    crit = props.get("criterion")
    if crit is not None:
        ACCEPTANCE_RESULTS.append((crit, report.outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), outcome, detail in sorted(ACCEPTANCE_RESULTS):
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        line = f"criterion {num:>2}: {verdict:<7} {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)


@pytest.fixture(autouse=True)
def _criterion_property(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        record_property("criterion", tuple(marker.args))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """20 synthetic 64x64 pairs."""
    root = tmp_path_factory.mktemp("tiny")
    from dems.data import SynthParams

    synth_generate(20, 7, root, SynthParams(size=64))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
