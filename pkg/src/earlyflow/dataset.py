"""Labeled flow datasets: prefix augmentation, class weights, stratified
splitting, label-file joins and the ``EFDS`` container."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .capture import FilterSpec, Protocol, read_capture, ip_from_str
from .errors import DatasetFormatError, DomainError, EmptyClass, LabelSchemaError
from .flowtable import Flow, FlowKey, FlowState, FlowTableConfig, assemble_flows
from .preprocess import PacketVector, VectorizerConfig

log = logging.getLogger(__name__)

LABEL_COLUMNS = ("src_ip", "src_port", "dst_ip", "dst_port", "protocol", "start_ts", "end_ts", "label")
EFDS_MAGIC = b"EFDS"
EFDS_VERSION = 1


@dataclass
class FlowDataset:
    flows: list[Flow]
    labels: list[int]
    classes: list[str]
    stats: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.flows) != len(self.labels):
            raise ValueError("flows and labels differ in length")
        k = len(self.classes)
        for flow, y in zip(self.flows, self.labels):
            if not 0 <= y < k:
                raise ValueError(f"label {y} outside the {k} declared classes")
            if flow.T < 1:
                raise ValueError("every flow needs at least one packet")

    @property
    def N(self) -> int:
        return len(self.flows)

    def __len__(self) -> int:
        return len(self.flows)

    def __iter__(self) -> Iterator[tuple[Flow, int]]:
        return iter(zip(self.flows, self.labels))

    def class_counts(self) -> list[int]:
        counts = Counter(self.labels)
        return [counts.get(c, 0) for c in range(len(self.classes))]

    def subset(self, indices: Sequence[int]) -> "FlowDataset":
        return FlowDataset([self.flows[i] for i in indices], [self.labels[i] for i in indices],
                           list(self.classes))


@dataclass(frozen=True)
class AugmentConfig:
    segmentation_rate: float = 0.1

    def __post_init__(self):
        if not 0 < self.segmentation_rate < 1:
            raise DomainError(f"segmentation rate must lie in (0, 1), got {self.segmentation_rate}")


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise DomainError(f"train fraction must lie in (0, 1), got {self.train_fraction}")


def segment_size(T: int, rate: float) -> int:
    if not 0 < rate < 1:
        raise DomainError(f"segmentation rate must lie in (0, 1), got {rate}")
    if T < 1:
        raise DomainError("flow length must be positive")
    return math.ceil(rate * T)


def segment_lengths(T: int, rate: float) -> list[int]:
    size = segment_size(T, rate)
    return [k * size for k in range(1, (T - 1) // size + 1)]


def segments_of(flow: Flow, rate: float) -> list[Flow]:
    """Cumulative proper prefixes of ``flow`` at multiples of the segment size."""
    return [flow.prefix(t) for t in segment_lengths(flow.T, rate)]


def augment(ds: FlowDataset, cfg: AugmentConfig) -> FlowDataset:
    """Originals first, in order, followed by every segment of every flow."""
    flows, labels = list(ds.flows), list(ds.labels)
    for flow, y in ds:
        for seg in segments_of(flow, cfg.segmentation_rate):
            seg.label = y
            flows.append(seg)
            labels.append(y)
    return FlowDataset(flows, labels, list(ds.classes))


def class_weights(ds: FlowDataset) -> np.ndarray:
    """Per-class weights ``N / (K * n_c)``: unit weights on balanced data."""
    counts = ds.class_counts()
    empty = [ds.classes[c] for c, n in enumerate(counts) if n == 0]
    if empty:
        raise EmptyClass(f"classes without flows: {', '.join(empty)}")
    n_total, k = ds.N, len(ds.classes)
    return np.array([n_total / (k * n) for n in counts], dtype=np.float64)


def stratified_split(ds: FlowDataset, cfg: SplitConfig) -> tuple[FlowDataset, FlowDataset]:
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(ds.N)
    members = defaultdict(list)
    for i in order:
        members[ds.labels[i]].append(int(i))
    in_train = set()
    for idx in members.values():
        n = len(idx)
        k = math.floor(cfg.train_fraction * n + 0.5)
        if n >= 2:
            k = min(max(k, 1), n - 1)
        else:
            k = n
        in_train.update(idx[:k])
    train = [int(i) for i in order if i in in_train]
    test = [int(i) for i in order if i not in in_train]
    return ds.subset(train), ds.subset(test)


@dataclass(frozen=True)
class LabelRecord:
    key: FlowKey
    start_ts: float
    end_ts: float
    label: int


def read_labels(path: str | Path, classes: Sequence[str]) -> list[LabelRecord]:
    index = {name: i for i, name in enumerate(classes)}
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in LABEL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise LabelSchemaError(f"labels file lacks columns: {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            name = row["label"].strip()
            if name not in index:
                raise LabelSchemaError(f"line {lineno}: unknown class {name!r}")
            proto = row["protocol"].strip().lower()
            if proto not in ("tcp", "6"):
                continue
            try:
                key = FlowKey.of(ip_from_str(row["src_ip"]), int(row["src_port"]),
                                 ip_from_str(row["dst_ip"]), int(row["dst_port"]), Protocol.TCP)
                start, end = float(row["start_ts"]), float(row["end_ts"])
            except ValueError as exc:
                raise LabelSchemaError(f"line {lineno}: {exc}") from None
            records.append(LabelRecord(key, start, end, index[name]))
    return records


def write_labels(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LABEL_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def match_label(flow: Flow, candidates: Sequence[LabelRecord], exact_key: bool = False,
                slack: float = 1e-6) -> Optional[LabelRecord]:
    """First label record whose time window overlaps the flow's span.

    ``slack`` absorbs microsecond rounding between capture and label timestamps.
    """
    if exact_key:
        return candidates[0] if candidates else None
    for rec in candidates:
        if flow.first_ts <= rec.end_ts + slack and rec.start_ts <= flow.last_ts + slack:
            return rec
    return None


def load_labeled_dataset(capture_path: str | Path, labels_path: str | Path, classes: Sequence[str],
                         filter_spec: FilterSpec | None = None,
                         vectorizer: VectorizerConfig = VectorizerConfig(),
                         flow_config: FlowTableConfig = FlowTableConfig(),
                         default_class: Optional[str] = None,
                         exact_key: bool = False) -> FlowDataset:
    classes = list(classes)
    if default_class is not None and default_class not in classes:
        raise LabelSchemaError(f"default class {default_class!r} is not a declared class")
    by_key = defaultdict(list)
    for rec in read_labels(labels_path, classes):
        by_key[rec.key].append(rec)
    for recs in by_key.values():
        recs.sort(key=lambda r: r.start_ts)

    capture = read_capture(capture_path, filter_spec)
    flows, labels = [], []
    unmatched = 0
    for flow in assemble_flows(capture, vectorizer, flow_config):
        rec = match_label(flow, by_key.get(flow.key, ()), exact_key)
        if rec is not None:
            y = rec.label
        elif default_class is not None:
            unmatched += 1
            y = classes.index(default_class)
        else:
            unmatched += 1
            continue
        flow.label = y
        flows.append(flow)
        labels.append(y)
    if unmatched:
        log.info("%d flows had no label record", unmatched)
    ds = FlowDataset(flows, labels, classes)
    ds.stats = {"capture": capture.counts.as_dict(), "unmatched_flows": unmatched}
    return ds


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_dataset(ds: FlowDataset, path: str | Path, config: Optional[dict] = None) -> None:
    """Write ``path`` (binary vectors) and ``path.json`` (class names and flow metadata).

    Layout: ``EFDS``, version byte, 3 zero bytes, u32 flow count, u32 dim,
    then per flow u32 class id, u32 T and ``T * dim`` little-endian float32.
    """
    path = Path(path)
    dim = ds.flows[0].dim if ds.flows else 0
    meta = []
    with path.open("wb") as fh:
        fh.write(EFDS_MAGIC + bytes([EFDS_VERSION, 0, 0, 0]) + struct.pack("<II", ds.N, dim))
        for flow, y in ds:
            block = flow.matrix(np.float32)
            if block.shape[1] != dim:
                raise DatasetFormatError("flows have inconsistent vector dimensions")
            fh.write(struct.pack("<II", y, flow.T))
            fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
            meta.append({
                "key": str(flow.key) if flow.key is not None else None,
                "first_ts": flow.first_ts,
                "last_ts": flow.last_ts,
                "state": flow.state.value,
                "lengths": [list(x) for x in flow.raw_lengths],
                "kept": [[p.header_len_kept, p.payload_len_kept] for p in flow.packets],
                "timestamps": flow.timestamps,
            })
    sidecar = {"format": "EFDS", "version": EFDS_VERSION, "classes": list(ds.classes), "dim": dim,
               "count": ds.N, "config": config or {}, "flows": meta}
    _sidecar(path).write_text(json.dumps(sidecar))


def load_dataset(path: str | Path) -> FlowDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != EFDS_MAGIC:
        raise DatasetFormatError(f"{path} is not an EFDS file")
    if raw[4] != EFDS_VERSION:
        raise DatasetFormatError(f"unsupported EFDS version {raw[4]}")
    try:
        sidecar = json.loads(_sidecar(path).read_text())
    except (OSError, ValueError) as exc:
        raise DatasetFormatError(f"unreadable sidecar for {path}: {exc}") from None
    count, dim = struct.unpack_from("<II", raw, 8)
    classes = sidecar["classes"]
    meta = sidecar.get("flows") or [{}] * count
    if len(meta) != count:
        raise DatasetFormatError("sidecar flow count disagrees with the data file")
    off = 16
    flows, labels = [], []
    for i in range(count):
        if off + 8 > len(raw):
            raise DatasetFormatError("truncated record header")
        y, T = struct.unpack_from("<II", raw, off)
        off += 8
        nbytes = 4 * T * dim
        if off + nbytes > len(raw):
            raise DatasetFormatError("truncated vector block")
        block = np.frombuffer(raw, dtype="<f4", count=T * dim, offset=off).reshape(T, dim)
        block = block.astype(np.float32)
        block.flags.writeable = False
        off += nbytes
        info = meta[i]
        lengths = [tuple(x) for x in info.get("lengths", [])] or [(0, 0)] * T
        kept = info.get("kept") or [(0, 0)] * T
        packets = [PacketVector(block[t], *kept[t]) for t in range(T)]
        flow = Flow(
            key=FlowKey.parse(info["key"]) if info.get("key") else None,
            packets=packets,
            raw_lengths=lengths,
            timestamps=list(info.get("timestamps", [])),
            first_ts=info.get("first_ts", 0.0),
            last_ts=info.get("last_ts", 0.0),
            state=FlowState(info.get("state", "active")),
            label=y,
        )
        flow._stack = block
        flows.append(flow)
        labels.append(y)
    if off != len(raw):
        raise DatasetFormatError("trailing bytes after the last record")
    return FlowDataset(flows, labels, classes)
