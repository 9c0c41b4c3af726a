"""Per-packet early classification of in-progress flows with an Unknown outcome."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, ShapeMismatch
from .nn.model import Model, forward, head_probabilities, packet_features
from .preprocess import PacketVector


class _Unknown:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Unknown"

    def __reduce__(self):
        return (_Unknown, ())


UNKNOWN = _Unknown()
Label = Union[int, _Unknown]
DEFAULT_THRESHOLD = 0.5


def decide(probabilities: Sequence[float], threshold: float = DEFAULT_THRESHOLD) -> Label:
    """The arg-max class if it beats the threshold and every rival strictly, else ``UNKNOWN``."""
    if not 0.0 <= threshold < 1.0:
        raise DomainError(f"threshold must lie in [0, 1), got {threshold}")
    p = np.asarray(probabilities)
    best = int(np.argmax(p))
    top = p[best]
    if top <= threshold or np.count_nonzero(p == top) > 1:
        return UNKNOWN
    return best


@dataclass(frozen=True)
class Decision:
    probabilities: np.ndarray
    decided: Label
    t: int
    threshold: float

    @property
    def is_unknown(self) -> bool:
        return self.decided is UNKNOWN

    def label_name(self, classes: Optional[Sequence[str]] = None) -> str:
        if self.decided is UNKNOWN:
            return "Unknown"
        return classes[self.decided] if classes else str(self.decided)


@dataclass
class FlowPredictionState:
    """Prediction state of one flow, owned by one worker at a time.

    With ``incremental`` the per-packet layer-norm activations are cached and
    only the pooling and dense head are recomputed for each new packet.
    """

    flow_key: object = None
    incremental: bool = False
    keep_history: bool = False
    vectors: list[np.ndarray] = field(default_factory=list, repr=False)
    latest: Optional[Decision] = None
    history: list[Decision] = field(default_factory=list, repr=False)
    _features: list[np.ndarray] = field(default_factory=list, repr=False)
    _pair_sum: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def t(self) -> int:
        return len(self.vectors)


def _incremental_probs(state: FlowPredictionState, model: Model, values: np.ndarray) -> np.ndarray:
    n = packet_features(model, values)[0]
    state._features.append(n)
    t = len(state._features)
    if state._pair_sum is None:
        state._pair_sum = np.zeros_like(n)
    if t % 2 == 0:
        # the previous packet's window is now complete
        state._pair_sum = state._pair_sum + (state._features[-2] + n) / 2
        g = state._pair_sum / (t // 2)
    else:
        g = (state._pair_sum + n) / ((t + 1) // 2)
    return head_probabilities(model, g[None])[0]


def update_prediction(state: FlowPredictionState, model: Model, new_vec: PacketVector | np.ndarray,
                      threshold: float = DEFAULT_THRESHOLD) -> Decision:
    """Append one packet to the flow prefix and classify the prefix."""
    values = new_vec.values if isinstance(new_vec, PacketVector) else np.asarray(new_vec)
    if values.shape != (model.input_dim,):
        raise ShapeMismatch(f"packet vector of shape {values.shape}, model expects ({model.input_dim},)")
    state.vectors.append(values)
    if state.incremental:
        probs = _incremental_probs(state, model, values)
    else:
        probs = forward(model, np.stack(state.vectors)).probabilities
    decision = Decision(probs, decide(probs, threshold), state.t, threshold)
    state.latest = decision
    if state.keep_history:
        state.history.append(decision)
    return decision


def classify_prefixes(model: Model, flow_matrix: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                      incremental: bool = False) -> list[Decision]:
    """Decisions after every packet of a complete flow, as a live monitor would emit them."""
    state = FlowPredictionState(incremental=incremental, keep_history=True)
    for row in np.asarray(flow_matrix):
        update_prediction(state, model, row, threshold)
    return state.history


def decision_record(flow_key, decision: Decision, ts: float,
                    classes: Optional[Sequence[str]] = None) -> dict:
    return {
        "flow_key": str(flow_key),
        "t": decision.t,
        "probs": [float(p) for p in decision.probabilities],
        "decided": decision.label_name(classes),
        "ts": ts,
    }


def write_decision(fh: IO[str], record: dict) -> None:
    fh.write(json.dumps(record, separators=(",", ":")) + "\n")
