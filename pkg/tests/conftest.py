import numpy as np
import pytest

from ucan.core import TrainConfig
from ucan.data import generate_phantom_study, phantom_cohort

_ACCEPTANCE: dict[int, tuple[str, str]] = {}
_DETAILS: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    marker = report.__dict__.get("acceptance")
    if marker is None:
        return
    n, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE[n] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.__dict__["acceptance"] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, outcome = _ACCEPTANCE[n]
        extra = f"  ({_DETAILS[n]})" if n in _DETAILS else ""
        terminalreporter.write_line(f"[{outcome}] criterion {n:2d}: {title}{extra}")


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance summary line of the running test."""
    m = request.node.get_closest_marker("acceptance")

    def record(text: str) -> None:
        _DETAILS[m.args[0]] = text
        print(f"criterion {m.args[0]}: {text}")

    return record


@pytest.fixture(scope="session")
def small_study():
    return generate_phantom_study("s0", (16, 16, 16), np.random.default_rng(0))


@pytest.fixture(scope="session")
def study32():
    return phantom_cohort(1, (32, 32, 32), 0)[0]


def tiny_config(**kw) -> TrainConfig:
    """Smallest config whose discriminator still sees more than one voxel after the trunk."""
    base = dict(
        patch_shape=(32, 32, 32),
        base_width=4,
        depth=2,
        d_base_width=4,
        se_reduction=4,
        res_blocks=1,
        batch_size=2,
        epochs=1,
        steps_per_epoch=1,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)
