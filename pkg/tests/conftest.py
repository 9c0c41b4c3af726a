import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    from earlyflow.nn import init_model
    return init_model(input_dim=8, class_count=3, seed=5, channels=4, hidden=5)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """A 300-flow synthetic capture assembled into a labeled dataset."""
    from earlyflow.capture import FilterSpec
    from earlyflow.dataset import load_labeled_dataset
    from earlyflow.synth import default_config, synth_generate

    root = tmp_path_factory.mktemp("synth_small")
    cap, labels = root / "s.pcap", root / "s.csv"
    summary = synth_generate(default_config(flows=300, imbalance=(4, 2, 2, 1)), 11, cap, labels)
    ds = load_labeled_dataset(cap, labels, summary.classes, FilterSpec.web())
    return {"capture": cap, "labels": labels, "dataset": ds, "summary": summary}


@pytest.fixture(scope="session")
def synth_model(synth_small):
    """A model fitted for a few epochs on the augmented small synthetic set."""
    from earlyflow.dataset import AugmentConfig, augment, class_weights
    from earlyflow.nn import TrainConfig, init_model, train

    ds = augment(synth_small["dataset"], AugmentConfig(0.1))
    model = init_model(448, 4, seed=3, classes=ds.classes)
    return train(model, ds, class_weights(ds), TrainConfig(epochs=6, seed=3)).model


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
