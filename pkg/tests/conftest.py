import numpy as np
import pytest

from privcxr.nn.model import ModelConfig, build_model


TINY = ModelConfig(widths=(4, 4, 8, 8), groups_per_norm=2, image_size=8, stem_stride=1)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=3)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 1, 8, 8))
    y = (rng.random((6, 8)) < 0.3).astype(float)
    w = np.full(8, 2.0)
    return x, y, w


# -- acceptance verdicts: one PASS/FAIL line per criterion -------------------

_VERDICTS: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _VERDICTS.setdefault(mark.args[0], []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        outs = _VERDICTS[n]
        verdict = "FAIL" if "failed" in outs else "SKIP" if all(o == "skipped" for o in outs) else "PASS"
        terminalreporter.write_line(f"criterion {n}: {verdict} ({len(outs)} checks)")
