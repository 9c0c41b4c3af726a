"""Small builders shared by several test modules."""
import numpy as np

from earlyflow.dataset import FlowDataset
from earlyflow.flowtable import Flow
from earlyflow.preprocess import PacketVector


def dataset_from_arrays(samples, labels, classes):
    flows = []
    for x in samples:
        f = Flow(key=None)
        for t, row in enumerate(x):
            f.append(PacketVector(np.asarray(row, dtype=np.float32), 0, 0), float(t))
        flows.append(f)
    return FlowDataset(flows, list(labels), list(classes))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
