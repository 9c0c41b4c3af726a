import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from earlyflow.capture import FilterSpec, read_capture
from earlyflow.dataset import load_labeled_dataset, read_labels
from earlyflow.synth import (DEFAULT_MARKERS, SynthClass, SynthConfig, class_allocation, default_config,
                             synth_generate)


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_same_seed_same_bytes(tmp_path):
    cfg = default_config(flows=80)
    a = synth_generate(cfg, 4, tmp_path / "a.pcap", tmp_path / "a.csv")
    b = synth_generate(cfg, 4, tmp_path / "b.pcap", tmp_path / "b.csv")
    assert _digest(tmp_path / "a.pcap") == _digest(tmp_path / "b.pcap")
    assert _digest(tmp_path / "a.csv") == _digest(tmp_path / "b.csv")
    assert a.counts == b.counts
    synth_generate(cfg, 5, tmp_path / "c.pcap", tmp_path / "c.csv")
    assert _digest(tmp_path / "a.pcap") != _digest(tmp_path / "c.pcap")


@pytest.mark.parametrize("weights,total,expected", [
    ((100, 10, 5, 1), 2000, [1724, 173, 86, 17]),
    ((1, 1), 3, [2, 1]),
    ((1, 1, 1), 9, [3, 3, 3]),
])
def test_class_allocation_examples(weights, total, expected):
    assert class_allocation(weights, total) == expected


@given(st.lists(st.floats(0.1, 100), min_size=2, max_size=6), st.integers(0, 5000))
def test_class_allocation_sums_and_stays_within_one(weights, total):
    counts = class_allocation(weights, total)
    assert sum(counts) == total
    exact = np.asarray(weights) * total / sum(weights)
    assert np.all(np.abs(np.asarray(counts) - exact) < 1)


def test_labels_match_allocation_and_dataset(synth_small):
    summary = synth_small["summary"]
    assert summary.counts == class_allocation((4, 2, 2, 1), 300)
    rows = read_labels(synth_small["labels"], summary.classes)
    assert len(rows) == 300
    ds = synth_small["dataset"]
    assert ds.class_counts() == summary.counts


def test_noise_is_removed_by_web_filter(synth_small):
    summary = synth_small["summary"]
    cap = read_capture(synth_small["capture"], FilterSpec.web())
    kept = sum(1 for _ in cap)
    assert kept == summary.packets - summary.noise_packets
    assert sum(f.T for f in synth_small["dataset"].flows) == kept


def test_marker_in_every_attack_client_payload(tmp_path):
    cfg = default_config(flows=60, imbalance=(1, 1, 1, 1), noise_packets=0)
    summary = synth_generate(cfg, 2, tmp_path / "s.pcap", tmp_path / "s.csv")
    ds = load_labeled_dataset(tmp_path / "s.pcap", tmp_path / "s.csv", summary.classes, FilterSpec.web())
    for flow, label in ds:
        first = flow.matrix()[0]
        name = ds.classes[label]
        # payload starts after the 48 header bytes
        head = np.round(first[48:56] * 255).astype(np.uint8).tobytes()
        if name in DEFAULT_MARKERS:
            assert head == DEFAULT_MARKERS[name]
        else:
            assert all(0x20 <= b < 0x7F for b in head)


def test_config_validation():
    ok = SynthClass("a", 1.0)
    with pytest.raises(ValueError):
        SynthConfig(classes=(ok,))
    with pytest.raises(ValueError):
        SynthConfig(classes=(ok, SynthClass("b", 0.0)))
    with pytest.raises(ValueError):
        SynthConfig(classes=(ok, SynthClass("b", 1.0, min_packets=5, max_packets=2)))
    with pytest.raises(ValueError):
        SynthConfig(classes=(ok, SynthClass("b", 1.0, marker=b"x" * 8, marker_offset=10)))
    with pytest.raises(ValueError):
        default_config(imbalance=(1, 2))
