import os
import sys

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

hypothesis.settings.register_profile("default", deadline=None, max_examples=30)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_acceptance = {}


def pytest_runtest_logreport(report):
    marker = _acceptance.get(report.nodeid)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        marker["outcome"] = report.outcome


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _acceptance[item.nodeid] = {"number": m.args[0], "title": m.args[1], "outcome": "not run"}


def pytest_terminal_summary(terminalreporter):
    if all(e["outcome"] == "not run" for e in _acceptance.values()):
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(_acceptance.values(), key=lambda e: e["number"]):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(entry["outcome"], "NOT RUN")
        terminalreporter.write_line(f"[{status}] {entry['number']:>2}. {entry['title']}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def trained_toy():
    """Small CNN briefly trained on 6x6 gratings: (net, images[512], labels[512])."""
    from clat.data import synth_dataset
    from clat.network import build_network
    from clat.trainer import TrainConfig, run_clat

    data = synth_dataset(3, 600, size=6, seed=11, noise=0.05)
    net = build_network(["conv 4 k=3 pad=1 relu maxpool:2", "dense 16 relu", "dense 3"], (1, 6, 6), 3, seed=1)
    cfg = TrainConfig(epochs=6, pretrain_epochs=6, pretrain_mode="clean", lr0=0.05, batch_size=32)
    run_clat(net, data, cfg)
    return net, data.images[:512], data.labels[:512]
