"""Replay a capture through the live pipeline and measure timing.

A reader thread delivers packets at the original pacing (scaled by
``time_scale``) into a bounded queue; the consumer filters, assembles flows
and re-classifies the affected flow after every packet.
"""
from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Sequence

import numpy as np

from .capture import CaptureCounts, FilterSpec, LinkType, ParsedPacket, Protocol, matches_filter, parse_packet, read_capture
from .classifier import FlowPredictionState, decision_record, update_prediction, write_decision
from .errors import FragmentedPacket, MalformedFrame
from .flowtable import FlowEvent, FlowTable, FlowTableConfig
from .nn.model import Model
from .preprocess import VectorizerConfig, vectorize_packet

log = logging.getLogger(__name__)

QUEUE_SIZE = 4096
_END = object()


@dataclass
class ReplayStats:
    packets_replayed: int = 0
    packets_filtered: int = 0
    interarrival_all_ms: dict = field(default_factory=dict)
    interarrival_filtered_ms: dict = field(default_factory=dict)
    latency_ms: dict = field(default_factory=dict)
    session_seconds: float = 0.0
    decisions: int = 0
    flows_created: int = 0
    flows_finished: int = 0
    capture: dict = field(default_factory=dict)
    dropped: int = 0
    prefix_lengths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    latencies: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def mean_latency_ms(self) -> float:
        return self.latency_ms.get("mean", float("nan"))

    @property
    def mean_filtered_interarrival_ms(self) -> float:
        return self.interarrival_filtered_ms.get("mean", float("nan"))

    def mean_latency_for_prefixes(self, max_t: int) -> float:
        keep = self.prefix_lengths <= max_t
        return float(self.latencies[keep].mean() * 1e3) if keep.any() else float("nan")

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("prefix_lengths")
        out.pop("latencies")
        return out


def summarize_ms(seconds: Sequence[float]) -> dict:
    if len(seconds) == 0:
        return {}
    ms = np.asarray(seconds) * 1e3
    return {"mean": float(ms.mean()), "p50": float(np.percentile(ms, 50)),
            "p95": float(np.percentile(ms, 95)), "p99": float(np.percentile(ms, 99)), "n": int(ms.size)}


def throughput_check(stats: ReplayStats) -> bool:
    """True when predictions keep up: mean latency strictly below mean filtered inter-arrival."""
    return stats.mean_latency_ms < stats.mean_filtered_interarrival_ms


def paced(packets: Iterable[ParsedPacket], time_scale: float) -> Iterator[ParsedPacket]:
    """Yield packets no sooner than their original gaps times ``time_scale``.

    Each gap is measured from the previous actual release, so a released gap
    is never shorter than the scaled original even if a release runs late.
    """
    prev_ts = prev_release = None
    for pkt in packets:
        if time_scale > 0 and prev_ts is not None:
            target = prev_release + max(pkt.timestamp - prev_ts, 0.0) * time_scale
            while (remaining := target - time.perf_counter()) > 0:
                time.sleep(remaining)
        prev_ts = pkt.timestamp
        prev_release = time.perf_counter()
        yield pkt


@dataclass
class ReplayResult:
    stats: ReplayStats
    decisions: list[dict]
    flows: list = field(default_factory=list, repr=False)


class _Reader(threading.Thread):
    def __init__(self, source: Iterable[ParsedPacket], out: queue.Queue):
        super().__init__(daemon=True, name="replay-reader")
        self.source = source
        self.out = out
        self.error: Optional[BaseException] = None

    def run(self) -> None:
        try:
            for pkt in self.source:
                self.out.put((pkt, time.perf_counter()))
        except BaseException as exc:  # surfaced by the consumer
            self.error = exc
        finally:
            self.out.put((_END, 0.0))


def _forget(table: FlowTable, states: dict, keep: Optional[list]) -> int:
    done = table.drain()
    for flow in done:
        states.pop(flow.key, None)
    if keep is not None:
        keep.extend(done)
    return len(done)


def run_pipeline(source: Iterable[ParsedPacket], model: Model, filter_spec: FilterSpec,
                 threshold: float = 0.5, time_scale: float = 0.0,
                 vectorizer: VectorizerConfig = VectorizerConfig(),
                 flow_config: FlowTableConfig = FlowTableConfig(),
                 decision_log: Optional[IO[str]] = None, incremental: bool = False,
                 keep_decisions: bool = True, keep_flows: bool = False) -> ReplayResult:
    """Drive ``source`` (already paced) through filter, flow table and classifier.

    With ``keep_flows`` the result also lists every assembled flow, finished
    flows first and still-active ones last.
    """
    classes = model.classes
    inbox: queue.Queue = queue.Queue(maxsize=QUEUE_SIZE)
    reader = _Reader(source, inbox)
    table = FlowTable(flow_config)
    states: dict = {}
    decisions: list[dict] = []
    kept_flows: Optional[list] = [] if keep_flows else None
    arrivals, filtered_arrivals, latencies, prefix_lens = [], [], [], []
    flows_created = flows_finished = 0
    first_ts = None
    start = time.perf_counter()
    reader.start()
    while True:
        pkt, arrived = inbox.get()
        if pkt is _END:
            break
        arrivals.append(arrived)
        if not matches_filter(pkt, filter_spec) or pkt.protocol is not Protocol.TCP:
            continue
        filtered_arrivals.append(arrived)
        if first_ts is None:
            first_ts = pkt.timestamp
        # virtual time at scale 0, replay wall clock mapped onto capture time otherwise
        now = pkt.timestamp if time_scale <= 0 else first_ts + (time.perf_counter() - start) / time_scale
        table.sweep(now)
        vec = vectorize_packet(pkt, vectorizer)
        flow, event = table.upsert_packet(pkt, vec)
        flows_finished += _forget(table, states, kept_flows)
        if event is FlowEvent.CREATED:
            flows_created += 1
            states[flow.key] = FlowPredictionState(flow.key, incremental=incremental)
        state = states[flow.key]
        t0 = time.perf_counter()
        decision = update_prediction(state, model, vec, threshold)
        latencies.append(time.perf_counter() - t0)
        prefix_lens.append(decision.t)
        record = decision_record(flow.key, decision, pkt.timestamp, classes)
        if decision_log is not None:
            write_decision(decision_log, record)
        if keep_decisions:
            decisions.append(record)
        table.on_packet_flags(flow, pkt)
        flows_finished += _forget(table, states, kept_flows)
    reader.join()
    if reader.error is not None:
        raise reader.error
    remaining = table.flush()
    if kept_flows is not None:
        kept_flows.extend(remaining)

    counts = getattr(source, "counts", None)
    stats = ReplayStats(
        packets_replayed=len(arrivals),
        packets_filtered=len(filtered_arrivals),
        interarrival_all_ms=summarize_ms(np.diff(arrivals)),
        interarrival_filtered_ms=summarize_ms(np.diff(filtered_arrivals)),
        latency_ms=summarize_ms(latencies),
        session_seconds=time.perf_counter() - start,
        decisions=len(latencies),
        flows_created=flows_created,
        flows_finished=flows_finished,
        capture=counts.as_dict() if isinstance(counts, CaptureCounts) else {},
        dropped=getattr(source, "dropped", 0),
        prefix_lengths=np.asarray(prefix_lens, dtype=np.int64),
        latencies=np.asarray(latencies),
    )
    return ReplayResult(stats, decisions, kept_flows or [])


class _PacedCapture:
    """Unfiltered capture stream with pacing; exposes the reader's counts."""

    def __init__(self, path, time_scale: float):
        self._capture = read_capture(path)
        self.counts = self._capture.counts
        self.time_scale = time_scale

    def __iter__(self):
        return paced(self._capture.packets(), self.time_scale)


def replay(capture_path: str | Path, model: Model, filter_spec: Optional[FilterSpec] = None,
           threshold: float = 0.5, time_scale: float = 0.0,
           decision_log: Optional[str | Path] = None, **kw) -> ReplayResult:
    """Replay a capture file in-process. ``time_scale`` 0 runs as fast as possible."""
    if time_scale < 0:
        raise ValueError("time_scale must be >= 0")
    source = _PacedCapture(capture_path, time_scale)
    spec = FilterSpec.web() if filter_spec is None else filter_spec
    if decision_log is None:
        return run_pipeline(source, model, spec, threshold, time_scale, **kw)
    with open(decision_log, "w", encoding="utf-8") as fh:
        return run_pipeline(source, model, spec, threshold, time_scale, decision_log=fh, **kw)


# Datagram layout for the two-process mode: u32 sequence, u32 ts_sec, u32 ts_usec,
# then the raw Ethernet frame. An empty frame marks the end of the stream.
_UDP_HEADER = struct.Struct("<III")


def send_capture_udp(capture_path: str | Path, address: tuple[str, int], time_scale: float = 1.0,
                     filter_spec: Optional[FilterSpec] = None) -> int:
    capture = read_capture(capture_path, filter_spec)
    frames = ((s, u, f) for s, u, f, _ in capture.frames())
    sent = 0
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        prev_ts = prev_release = None
        for ts_sec, ts_usec, frame in frames:
            ts = ts_sec + ts_usec * 1e-6
            if time_scale > 0 and prev_ts is not None:
                target = prev_release + max(ts - prev_ts, 0.0) * time_scale
                while (remaining := target - time.perf_counter()) > 0:
                    time.sleep(remaining)
            prev_ts, prev_release = ts, time.perf_counter()
            sock.sendto(_UDP_HEADER.pack(sent, ts_sec, ts_usec) + frame, address)
            sent += 1
        sock.sendto(_UDP_HEADER.pack(sent, 0, 0), address)
    return sent


class UdpPacketSource:
    """Receives frames sent by :func:`send_capture_udp`; counts sequence gaps as drops."""

    def __init__(self, bind: tuple[str, int], timeout: float = 5.0,
                 link_type: LinkType = LinkType.ETHERNET):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
        self.sock.bind(bind)
        self.sock.settimeout(timeout)
        self.link_type = link_type
        self.counts = CaptureCounts()
        self.dropped = 0

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def __iter__(self) -> Iterator[ParsedPacket]:
        expected = 0
        try:
            while True:
                try:
                    data = self.sock.recv(1 << 17)
                except socket.timeout:
                    log.warning("UDP source timed out waiting for packets")
                    return
                if len(data) < _UDP_HEADER.size:
                    continue
                seq, ts_sec, ts_usec = _UDP_HEADER.unpack_from(data)
                frame = data[_UDP_HEADER.size :]
                if seq > expected:
                    self.dropped += seq - expected
                expected = seq + 1
                if not frame:
                    return
                self.counts.read += 1
                try:
                    yield parse_packet(frame, self.link_type, ts_sec=ts_sec, ts_usec=ts_usec)
                except MalformedFrame:
                    self.counts.malformed += 1
                except FragmentedPacket:
                    self.counts.fragmented += 1
        finally:
            self.sock.close()


def stats_json(stats: ReplayStats, passed: Optional[bool] = None) -> str:
    out = stats.to_dict()
    if passed is not None:
        out["throughput_check"] = passed
    return json.dumps(out, indent=2)
