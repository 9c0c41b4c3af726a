import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from earlyflow.capture import FilterSpec
from earlyflow.dataset import (AugmentConfig, FlowDataset, SplitConfig, augment, class_weights,
                               load_dataset, load_labeled_dataset, save_dataset, segment_size,
                               segments_of, stratified_split, write_labels)
from earlyflow.errors import DatasetFormatError, DomainError, EmptyClass, LabelSchemaError
from earlyflow.flowtable import Flow
from earlyflow.preprocess import VectorizerConfig, vectorize

from oracles import augmented_count, raw_capture, raw_frame, split_train_count

SMALL = VectorizerConfig(4, 4)


def make_flow(T, seed=0, cfg=SMALL):
    r = np.random.default_rng(seed)
    flow = Flow(key=None)
    for t in range(T):
        flow.append(vectorize(r.bytes(3), r.bytes(5), cfg), float(t))
    return flow


def make_ds(lengths, labels, classes=("a", "b")):
    return FlowDataset([make_flow(T, i) for i, T in enumerate(lengths)], list(labels), list(classes))


@pytest.mark.parametrize("T,rate,size", [(6, 0.25, 2), (15, 0.25, 4), (70, 0.25, 18), (1, 0.1, 1)])
def test_segment_size(T, rate, size):
    assert segment_size(T, rate) == size


@pytest.mark.parametrize("rate", [0.0, 1.0, -0.1, 1.5])
def test_segment_rate_domain(rate):
    with pytest.raises(DomainError):
        segment_size(5, rate)
    with pytest.raises(DomainError):
        AugmentConfig(rate)


def test_table_one_segments():
    got = {T: [s.T for s in segments_of(make_flow(T), 0.25)] for T in (6, 15, 70)}
    assert got == {6: [2, 4], 15: [4, 8, 12], 70: [18, 36, 54]}
    assert segments_of(make_flow(1), 0.5) == []


def test_augment_table_one_dataset():
    ds = make_ds([6, 15, 70], [0, 1, 0])
    before = [f.matrix().copy() for f in ds.flows]
    out = augment(ds, AugmentConfig(0.25))
    assert out.N == 11
    assert out.labels[:3] == [0, 1, 0] and out.labels[3:5] == [0, 0] and out.labels[5:8] == [1, 1, 1]
    for f, m in zip(ds.flows, before):
        assert np.array_equal(f.matrix(), m)


def test_augment_single_packet_flows_unchanged():
    ds = make_ds([1, 1, 1], [0, 1, 1])
    assert augment(ds, AugmentConfig(0.3)).N == 3


def test_augment_count_oracle():
    r = np.random.default_rng(0)
    lengths = r.integers(1, 80, 500).tolist()
    ds = make_ds(lengths, [i % 2 for i in range(500)])
    assert augment(ds, AugmentConfig(0.1)).N == augmented_count(lengths, 0.1)


@given(st.lists(st.integers(1, 60), min_size=1, max_size=12), st.floats(0.01, 0.99))
def test_segments_are_strict_prefixes(lengths, rate):
    ds = make_ds(lengths, [0] * len(lengths))
    out = augment(ds, AugmentConfig(rate))
    assert out.N == augmented_count(lengths, rate) >= ds.N
    for seg in out.flows[ds.N :]:
        parent = next(f for f in ds.flows if f.packets[: seg.T] == seg.packets and f.T > seg.T)
        assert np.array_equal(parent.matrix()[: seg.T], seg.matrix())


def test_class_weights_examples():
    assert class_weights(make_ds([1] * 4, [0, 0, 0, 1])) == pytest.approx([4 / 6, 2.0])
    assert class_weights(make_ds([1] * 10, [0] * 5 + [1] * 5)) == pytest.approx([1.0, 1.0])
    assert class_weights(make_ds([1] * 7, [0] * 7, ["a"])) == pytest.approx([1.0])
    with pytest.raises(EmptyClass):
        class_weights(make_ds([1, 1], [0, 0]))


@given(st.lists(st.integers(0, 3), min_size=4, max_size=60).filter(lambda l: len(set(l)) == 4))
def test_weighted_mass_equals_n(labels):
    ds = make_ds([1] * len(labels), labels, "abcd")
    w = class_weights(ds)
    assert sum(w[y] for y in labels) == pytest.approx(len(labels))


def test_split_example():
    ds = make_ds([1] * 100, [0] * 90 + [1] * 10)
    train, test = stratified_split(ds, SplitConfig(0.7, seed=4))
    assert train.class_counts() == [63, 7] and test.class_counts() == [27, 3]


def test_split_single_flow_goes_to_train():
    ds = make_ds([1] * 5, [0, 0, 0, 0, 1])
    train, test = stratified_split(ds, SplitConfig(0.7, 0))
    assert train.class_counts()[1] == 1 and test.class_counts()[1] == 0


def test_split_deterministic_and_shuffled():
    ds = make_ds(list(range(1, 41)), [i % 2 for i in range(40)])
    a = stratified_split(ds, SplitConfig(0.7, 11))
    b = stratified_split(ds, SplitConfig(0.7, 11))
    c = stratified_split(ds, SplitConfig(0.7, 12))
    ids = lambda split: [[id(f) for f in part.flows] for part in split]  # noqa: E731
    assert ids(a) == ids(b) and ids(a) != ids(c)
    assert [f.T for f in a[0].flows] != sorted(f.T for f in a[0].flows)


@given(st.lists(st.integers(0, 2), min_size=1, max_size=80), st.floats(0.05, 0.95), st.integers(0, 99))
def test_split_preserves_counts(labels, fraction, seed):
    ds = make_ds([1] * len(labels), labels, "abc")
    train, test = stratified_split(ds, SplitConfig(fraction, seed))
    assert train.N + test.N == ds.N
    assert {id(f) for f in train.flows}.isdisjoint(id(f) for f in test.flows)
    for c, n in enumerate(ds.class_counts()):
        assert train.class_counts()[c] == split_train_count(n, fraction)
        assert train.class_counts()[c] + test.class_counts()[c] == n


def test_split_config_domain():
    with pytest.raises(DomainError):
        SplitConfig(1.0)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        make_ds([1], [2])
    with pytest.raises(ValueError):
        FlowDataset([make_flow(1)], [0, 1], ["a", "b"])


# label-file ingestion

def _two_flow_capture(tmp_path):
    recs = [
        (10, 0, raw_frame("10.0.0.1", "10.0.0.9", 4000, 80, b"GET /a")),
        (10, 5, raw_frame("10.0.0.9", "10.0.0.1", 80, 4000, b"200 OK")),
        (11, 0, raw_frame("10.0.0.2", "10.0.0.9", 4001, 80, b"GET /b")),
        (11, 1, raw_frame("10.0.0.2", "10.0.0.9", 4001, 443, b"tls")),
    ]
    path = tmp_path / "two.pcap"
    path.write_bytes(raw_capture(recs))
    return path


def _row(src, sport, label, start="10", end="12"):
    return {"src_ip": src, "src_port": sport, "dst_ip": "10.0.0.9", "dst_port": 80, "protocol": "TCP",
            "start_ts": start, "end_ts": end, "label": label}


def test_load_labeled_dataset(tmp_path):
    cap = _two_flow_capture(tmp_path)
    labels = tmp_path / "l.csv"
    write_labels(labels, [_row("10.0.0.1", 4000, "normal"), _row("10.0.0.2", 4001, "xss")])
    ds = load_labeled_dataset(cap, labels, ["normal", "xss"], FilterSpec.web())
    assert ds.N == 2 and ds.labels == [0, 1]
    assert [f.T for f in ds.flows] == [2, 1]
    assert ds.stats["capture"]["filtered_out"] == 1


def test_unknown_label_and_default_class(tmp_path):
    cap = _two_flow_capture(tmp_path)
    labels = tmp_path / "l.csv"
    write_labels(labels, [_row("10.0.0.1", 4000, "ddos")])
    with pytest.raises(LabelSchemaError):
        load_labeled_dataset(cap, labels, ["normal", "xss"])
    write_labels(labels, [_row("10.0.0.1", 4000, "xss")])
    ds = load_labeled_dataset(cap, labels, ["normal", "xss"], FilterSpec.web(), default_class="normal")
    assert ds.labels == [1, 0] and ds.stats["unmatched_flows"] == 1
    dropped = load_labeled_dataset(cap, labels, ["normal", "xss"], FilterSpec.web())
    assert dropped.N == 1


def test_time_window_versus_exact_key(tmp_path):
    cap = _two_flow_capture(tmp_path)
    labels = tmp_path / "l.csv"
    write_labels(labels, [_row("10.0.0.1", 4000, "xss", "500", "600")])
    assert load_labeled_dataset(cap, labels, ["normal", "xss"], FilterSpec.web()).N == 0
    assert load_labeled_dataset(cap, labels, ["normal", "xss"], FilterSpec.web(), exact_key=True).N == 1


def test_bad_label_header(tmp_path):
    labels = tmp_path / "l.csv"
    labels.write_text("a,b\n1,2\n")
    with pytest.raises(LabelSchemaError):
        load_labeled_dataset(_two_flow_capture(tmp_path), labels, ["normal", "xss"])


# container round trip

def test_efds_round_trip_bit_exact(tmp_path):
    ds = make_ds([3, 1, 7], [1, 0, 1])
    path = tmp_path / "d.efds"
    save_dataset(ds, path, {"note": 1})
    back = load_dataset(path)
    assert back.labels == ds.labels and back.classes == ds.classes
    for a, b in zip(ds.flows, back.flows):
        assert a.matrix(np.float32).tobytes() == b.matrix(np.float32).tobytes()
        assert [p.payload_len_kept for p in a.packets] == [p.payload_len_kept for p in b.packets]
        assert a.timestamps == b.timestamps


def test_efds_corruption(tmp_path):
    ds = make_ds([3, 2], [1, 0])
    path = tmp_path / "d.efds"
    save_dataset(ds, path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    path.write_bytes(raw[:4] + b"\x09" + raw[5:])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_efds_layout(tmp_path):
    ds = make_ds([2], [1])
    path = tmp_path / "d.efds"
    save_dataset(ds, path)
    raw = path.read_bytes()
    assert raw[:4] == b"EFDS"
    count, dim, y, T = np.frombuffer(raw[8:24], "<u4")
    assert (count, dim, y, T) == (1, 8, 1, 2)
    assert np.array_equal(np.frombuffer(raw[24:], "<f4").reshape(2, 8), ds.flows[0].matrix(np.float32))
    assert len(raw) == 24 + 4 * 16 and math.isclose(raw.count(b"EFDS"), 1)
