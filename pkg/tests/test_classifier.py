import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from earlyflow.classifier import (UNKNOWN, FlowPredictionState, classify_prefixes, decide, decision_record,
                                  update_prediction, write_decision)
from earlyflow.errors import DomainError, ShapeMismatch
from earlyflow.flowtable import FlowKey
from earlyflow.nn import forward, init_model
from earlyflow.preprocess import vectorize

from oracles import loop_decide


@pytest.mark.parametrize("p,threshold,expected", [
    ((0.7, 0.1, 0.1, 0.1), 0.5, 0),
    ((0.4, 0.3, 0.2, 0.1), 0.5, UNKNOWN),
    ((0.5, 0.5, 0.0, 0.0), 0.4, UNKNOWN),
    ((0.5, 0.3, 0.2), 0.5, UNKNOWN),
    ((0.1, 0.9), 0.0, 1),
])
def test_decide_examples(p, threshold, expected):
    assert decide(p, threshold) is expected or decide(p, threshold) == expected


@pytest.mark.parametrize("threshold", [-0.1, 1.0, 1.5])
def test_decide_threshold_domain(threshold):
    with pytest.raises(DomainError):
        decide([0.5, 0.5], threshold)


probabilities = st.lists(st.floats(0, 1), min_size=2, max_size=6).filter(lambda v: sum(v) > 0).map(
    lambda v: [x / sum(v) for x in v])


@given(probabilities, st.floats(0, 0.999))
def test_decided_iff_threshold_below_unique_max(p, threshold):
    got = decide(p, threshold)
    expected = loop_decide(p, threshold)
    assert (got is UNKNOWN) == (expected is None)
    if expected is not None:
        assert got == expected


@given(probabilities, st.lists(st.floats(0, 0.999), min_size=2, max_size=8))
def test_raising_threshold_never_resolves_unknown(p, grid):
    decisions = [decide(p, t) for t in sorted(grid)]
    seen_unknown = False
    for d in decisions:
        if d is UNKNOWN:
            seen_unknown = True
        else:
            assert not seen_unknown


def _vectors(model, T, seed=0):
    r = np.random.default_rng(seed)
    return r.random((T, model.input_dim))


def test_update_prediction_matches_forward(tiny_model):
    x = _vectors(tiny_model, 6)
    state = FlowPredictionState()
    for t in range(1, 7):
        d = update_prediction(state, tiny_model, x[t - 1])
        assert d.t == t
        assert np.array_equal(d.probabilities, forward(tiny_model, x[:t]).probabilities)
    assert state.latest is d


def test_first_packet_and_packet_vector_input():
    m = init_model(448, 4, seed=1)
    d = update_prediction(FlowPredictionState(), m, vectorize(b"\x01" * 20, b"GET /"))
    assert d.t == 1 and d.probabilities.shape == (4,)


def test_dimension_mismatch(tiny_model):
    with pytest.raises(ShapeMismatch):
        update_prediction(FlowPredictionState(), tiny_model, np.zeros(9))


@pytest.mark.parametrize("T", [1, 2, 3, 8, 33])
def test_incremental_matches_reference(T):
    m = init_model(448, 4, seed=T)
    x = _vectors(m, T, seed=T)
    ref = classify_prefixes(m, x)
    inc = classify_prefixes(m, x, incremental=True)
    for a, b in zip(ref, inc):
        assert np.max(np.abs(a.probabilities - b.probabilities)) < 1e-6
        assert a.t == b.t


def test_history_is_strictly_increasing_and_replay_is_pure(tiny_model):
    x = _vectors(tiny_model, 5)
    first = classify_prefixes(tiny_model, x, 0.3)
    again = classify_prefixes(tiny_model, x, 0.3)
    assert [d.t for d in first] == [1, 2, 3, 4, 5]
    assert [d.decided for d in first] == [d.decided for d in again]
    assert all(np.array_equal(a.probabilities, b.probabilities) for a, b in zip(first, again))


def test_decision_record_and_log_line(tiny_model):
    key = FlowKey.of(0x0A000001, 5000, 0x0A000002, 80)
    d = classify_prefixes(tiny_model, _vectors(tiny_model, 2), 0.999)[-1]
    record = decision_record(key, d, 12.5, ["a", "b", "c"])
    assert set(record) == {"flow_key", "t", "probs", "decided", "ts"}
    assert record["decided"] == "Unknown" and record["t"] == 2
    buf = io.StringIO()
    write_decision(buf, record)
    line = buf.getvalue()
    assert line.endswith("\n") and json.loads(line) == record
