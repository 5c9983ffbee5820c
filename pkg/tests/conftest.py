"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import numpy as np
import pytest

_ACCEPTANCE: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when == "teardown":
        return
    number, title = marker.args
    # fixture time counts too: the end-to-end criterion does its work in setup
    spent = _ACCEPTANCE.get(number, (title, "PASS", 0.0))[2] + report.duration
    if report.when == "call" or report.outcome != "passed":
        _ACCEPTANCE[number] = (title, "PASS" if report.outcome == "passed" else "FAIL", spent)
    else:
        _ACCEPTANCE[number] = (title, "PENDING", spent)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, duration = _ACCEPTANCE[number]
        terminalreporter.write_line(f"AC{number} {status} {title} ({duration:.2f}s)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Five individuals, six views each plus two body-only views, with a small net."""
    from flankid.cnn import random_weights, save_spec, save_weights
    from flankid.synthetic import generate_dataset, small_conv_spec
    root = tmp_path_factory.mktemp("tiny")
    paths = generate_dataset(root / "data", n_individuals=5, n_views=6, seed=2, size=(200, 150), n_flankless=2)
    spec = small_conv_spec(64, 96)
    save_spec(spec, root / "net.yaml")
    save_weights(random_weights(spec, seed=0), root / "weights.ntc")
    paths.update(root=root, net=root / "net.yaml", weights=root / "weights.ntc")
    return paths


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    from flankid.annotations import build_manifest
    return build_manifest(tiny_dataset["annotations"], tiny_dataset["identities"], species="tiger")


@pytest.fixture
def tiny_config(tiny_dataset):
    from flankid.config import load_config
    return load_config(overrides={"net_spec": str(tiny_dataset["net"]), "weights": str(tiny_dataset["weights"]),
                                  "flank_resize": (96, 64), "seed": 3})
