import numpy as np
import pytest

from uqal import presets, uq


@pytest.fixture(scope="session")
def toy_clf():
    """Ad-hoc dropout MLP (rate 0.3) on the 5-class blob task."""
    return presets.train_classifier("ad-hoc")


@pytest.fixture(scope="session")
def toy_mc(toy_clf):
    return uq.McDropoutModel(toy_clf.spec, toy_clf.params)


@pytest.fixture(scope="session")
def toy_det(toy_clf):
    """Same task, no dropout during training; feature extractor for DUQ."""
    return presets.train_classifier("none", splits=(toy_clf.train, toy_clf.test))


@pytest.fixture(scope="session")
def toy_duq(toy_det):
    return presets.fit_duq(toy_det)


@pytest.fixture(scope="session")
def toy_seg():
    return presets.train_segmenter()


@pytest.fixture(scope="session")
def toy_seg_mc(toy_seg):
    return uq.McDropoutModel(toy_seg.spec, toy_seg.params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance reporting


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


@pytest.fixture
def report(request):
    """``report(n, ok, detail)`` records one PASS/FAIL line and fails the test on FAIL."""

    def _report(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.acceptance_lines[n] = line
        assert ok, line

    return _report
