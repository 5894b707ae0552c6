import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatdiff.gaussians import GaussianCloud

settings.register_profile(
    "splatdiff", deadline=None, derandomize=True, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("splatdiff")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SPLATDIFF_EXTENDED") == "1":
        return
    skip = pytest.mark.skip(reason="extended criterion; set SPLATDIFF_EXTENDED=1 to run")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    if status == "FAIL" or number not in _CRITERIA:
        details = ", ".join(f"{k}={v}" for k, v in item.user_properties)
        _CRITERIA[number] = (status, title, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, details = _CRITERIA[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}" + (f" ({details})" if details else ""))


def random_quaternions(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_cloud(rng, n, spread=0.5, scale=(0.03, 0.15), opacity=(0.2, 0.95)):
    """Gaussians scattered in a ball around the origin, sized to cover a few pixels at the rig radius."""
    return GaussianCloud(
        rng.uniform(-spread, spread, (n, 3)),
        rng.uniform(*scale, (n, 3)),
        rng.uniform(0.0, 1.0, (n, 3)),
        rng.uniform(*opacity, n),
        random_quaternions(rng, n),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_MODEL = {"base_channels": 8, "channel_multipliers": [1, 2], "blocks_per_scale": 1, "time_embed_dim": 16}


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two objects, six 32x32 rig views and two unseen views each."""
    from splatdiff.camera import rig_default
    from splatdiff.data import build_dataset

    root = tmp_path_factory.mktemp("tiny_dataset")
    build_dataset(2, rig_default(6, (32, 32)), 2, root, seed=5)
    return root
