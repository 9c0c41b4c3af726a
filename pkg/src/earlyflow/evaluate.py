"""Per-class detection metrics, balanced accuracy, earliness and MNP."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .classifier import UNKNOWN, Label, decide
from .errors import DomainError, EmptyClass
from .nn.model import Model, prefix_probabilities


class ConfusionTable:
    """Counts indexed by (true class, predicted class); the last column counts Unknown."""

    def __init__(self, classes: Sequence[str]):
        self.classes = list(classes)
        k = len(self.classes)
        self.counts = np.zeros((k, k + 1), dtype=np.int64)

    @property
    def unknown_column(self) -> int:
        return len(self.classes)

    def add(self, true: int, predicted: Label, n: int = 1) -> None:
        col = self.unknown_column if predicted is UNKNOWN else int(predicted)
        self.counts[true, col] += n

    @classmethod
    def from_pairs(cls, classes, pairs) -> "ConfusionTable":
        ct = cls(classes)
        for true, pred in pairs:
            ct.add(true, pred)
        return ct

    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def unknown_count(self) -> int:
        return int(self.counts[:, -1].sum())


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def per_class_metrics(ct: ConfusionTable, c: int) -> dict:
    """One-vs-rest precision, recall, FPR and BM; ``None`` where a denominator is 0.

    An Unknown prediction is a miss for the true class and never a false
    positive for any class.
    """
    if ct.total == 0:
        raise ValueError("confusion table is empty")
    counts = ct.counts
    tp = counts[c, c]
    fn = counts[c].sum() - tp
    fp = counts[:, c].sum() - tp
    negatives = ct.total - counts[c].sum()
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    fpr = _ratio(fp, negatives)
    bm = None if recall is None or fpr is None else recall - fpr
    return {"precision": precision, "recall": recall, "fpr": fpr, "bm": bm}


def balanced_accuracy(ct: ConfusionTable) -> float:
    rows = ct.row_totals()
    empty = [ct.classes[c] for c in range(len(rows)) if rows[c] == 0]
    if empty:
        raise EmptyClass(f"no evaluation flows for: {', '.join(empty)}")
    return float(np.mean([ct.counts[c, c] / rows[c] for c in range(len(rows))]))


def balanced_accuracy_from_recalls(recalls: Sequence[float]) -> float:
    return float(np.mean(recalls))


def earliness(t: int, T: int) -> float:
    """``(T - t) / (T - 1)``: 1 when the first packet suffices, 0 when all are needed."""
    if T < 2:
        raise DomainError("earliness is undefined for flows shorter than 2 packets")
    if not 1 <= t <= T:
        raise DomainError(f"prefix length {t} outside 1..{T}")
    return (T - t) / (T - 1)


def _decisions(probs: np.ndarray, threshold: float) -> list[Label]:
    return [decide(p, threshold) for p in probs]


def mnp_from_decisions(decisions: Sequence[Label], true: int) -> Optional[int]:
    for t, d in enumerate(decisions, start=1):
        if d is not UNKNOWN and d == true:
            return t
    return None


def stable_mnp_from_decisions(decisions: Sequence[Label], true: int) -> Optional[int]:
    """Earliest ``t`` from which every later prefix, the full flow included, is correct."""
    t_stable = None
    for t in range(len(decisions), 0, -1):
        d = decisions[t - 1]
        if d is UNKNOWN or d != true:
            break
        t_stable = t
    return t_stable


def mnp(model: Model, flow_matrix: np.ndarray, true: int, threshold: float = 0.5,
        stable: bool = False) -> Optional[int]:
    """Minimum number of packets after which the thresholded prediction is correct."""
    decisions = _decisions(prefix_probabilities(model, flow_matrix), threshold)
    return (stable_mnp_from_decisions if stable else mnp_from_decisions)(decisions, true)


@dataclass
class FlowOutcome:
    true: int
    T: int
    complete: Label
    mnp: Optional[int]
    mnp_stable: Optional[int]


@dataclass
class ClassReport:
    name: str
    flows: int
    precision: Optional[float]
    recall: Optional[float]
    fpr: Optional[float]
    bm: Optional[float]
    earliness: Optional[float]
    mnp: Optional[float]
    mnp_stable: Optional[float]
    mean_flow_length: Optional[float]
    earliness_flows: int
    single_packet_flows: int


@dataclass
class EvalReport:
    classes: list[ClassReport]
    ba: Optional[float]
    threshold: float
    flows: int
    unknown_complete: int
    confusion: list[list[int]]
    config: dict = field(default_factory=dict)

    def by_name(self, name: str) -> ClassReport:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        data = dict(data)
        data["classes"] = [ClassReport(**c) for c in data["classes"]]
        return cls(**data)

    def render(self, stable: bool = False) -> str:
        def fmt(v, spec=".3f"):
            return "-" if v is None else format(v, spec)

        head = (f"{'Class':<16}{'Flows':>7}{'Precision':>11}{'Recall':>8}{'FPR':>8}{'BM':>8}"
                f"{'Earliness':>11}{'MNP':>7}" + (f"{'MNP-st':>8}" if stable else "") + f"{'Avg len':>9}")
        lines = [head, "-" * len(head)]
        for c in self.classes:
            lines.append(
                f"{c.name:<16}{c.flows:>7}{fmt(c.precision):>11}{fmt(c.recall):>8}{fmt(c.fpr):>8}"
                f"{fmt(c.bm):>8}{fmt(c.earliness):>11}{fmt(c.mnp, '.2f'):>7}"
                + (f"{fmt(c.mnp_stable, '.2f'):>8}" if stable else "")
                + f"{fmt(c.mean_flow_length, '.2f'):>9}"
            )
        lines.append(f"balanced accuracy: {fmt(self.ba)}   threshold: {self.threshold}   "
                     f"unknown (complete flows): {self.unknown_complete}/{self.flows}")
        return "\n".join(lines)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("EARLYFLOW_THREADS", "1")))
    except ValueError:
        return 1


def flow_outcome(model: Model, flow_matrix: np.ndarray, true: int, threshold: float) -> FlowOutcome:
    decisions = _decisions(prefix_probabilities(model, flow_matrix), threshold)
    return FlowOutcome(true, len(decisions), decisions[-1],
                       mnp_from_decisions(decisions, true), stable_mnp_from_decisions(decisions, true))


def flow_outcomes(model: Model, ds, threshold: float = 0.5) -> list[FlowOutcome]:
    jobs = [(flow.matrix(np.float64), y) for flow, y in ds]
    run = lambda job: flow_outcome(model, job[0], job[1], threshold)  # noqa: E731
    workers = worker_count()
    if workers == 1:
        return [run(j) for j in jobs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(run, jobs))


def report_from_outcomes(outcomes: Sequence[FlowOutcome], classes: Sequence[str], threshold: float,
                         config: Optional[dict] = None) -> EvalReport:
    ct = ConfusionTable.from_pairs(classes, [(o.true, o.complete) for o in outcomes])
    rows = []
    for c, name in enumerate(classes):
        mine = [o for o in outcomes if o.true == c]
        decided = [o for o in mine if o.mnp is not None]
        early = [earliness(o.mnp, o.T) for o in decided if o.T >= 2]
        stable = [o.mnp_stable for o in mine if o.mnp_stable is not None]
        metrics = per_class_metrics(ct, c) if ct.total else dict.fromkeys(("precision", "recall", "fpr", "bm"))
        rows.append(ClassReport(
            name=name,
            flows=len(mine),
            **metrics,
            earliness=float(np.mean(early)) if early else None,
            mnp=float(np.mean([o.mnp for o in decided])) if decided else None,
            mnp_stable=float(np.mean(stable)) if stable else None,
            mean_flow_length=float(np.mean([o.T for o in mine])) if mine else None,
            earliness_flows=len(early),
            single_packet_flows=sum(1 for o in decided if o.T < 2),
        ))
    try:
        ba = balanced_accuracy(ct)
    except EmptyClass:
        ba = None
    return EvalReport(rows, ba, threshold, ct.total, ct.unknown_count, ct.counts.tolist(), dict(config or {}))


def evaluate_dataset(model: Model, ds, threshold: float = 0.5, config: Optional[dict] = None) -> EvalReport:
    """Complete-flow confusion metrics plus per-class earliness and MNP."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    outcomes = flow_outcomes(model, ds, threshold)
    cfg = {"threshold": threshold, **(config or {})}
    return report_from_outcomes(outcomes, ds.classes, threshold, cfg)


def aggregate_reports(reports: Sequence[EvalReport]) -> dict:
    """Mean and standard deviation of every metric across repeated runs."""

    def stats(values):
        vals = [v for v in values if v is not None]
        if not vals:
            return None
        return {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}

    out = {"runs": len(reports), "ba": stats([r.ba for r in reports]), "classes": {}}
    for i, c in enumerate(reports[0].classes):
        out["classes"][c.name] = {
            metric: stats([getattr(r.classes[i], metric) for r in reports])
            for metric in ("precision", "recall", "fpr", "bm", "earliness", "mnp", "mnp_stable")
        }
    return out
