"""Deterministic synthetic web traffic with labeled attack flows.

Each flow is an HTTP-like exchange on port 80 that alternates client and
server packets. Attack classes embed a fixed byte marker at a fixed offset of
every client payload; the normal class sends random printable ASCII.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .capture import CaptureWriter, FrameBuilder, TcpFlags, ip_from_str, ip_to_str
from .dataset import write_labels

DEFAULT_CLASSES = ("normal", "brute_force", "xss", "sqli")
DEFAULT_MARKERS = {
    "brute_force": bytes([0xFF, 0xFE, 0xFD, 0xFC, 0xFB, 0xFA, 0xF9, 0xF8]),
    "xss": bytes([0xFF, 0x01] * 4),
    "sqli": bytes([0x01, 0xFF] * 4),
}


@dataclass(frozen=True)
class SynthClass:
    name: str
    weight: float
    marker: Optional[bytes] = None
    marker_offset: int = 0
    min_packets: int = 2
    max_packets: int = 20
    mean_gap_ms: float = 5.0


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple[SynthClass, ...]
    flows: int = 1000
    start_ts: float = 1_499_335_200.0
    mean_flow_gap_ms: float = 10.0
    client_payload: tuple[int, int] = (16, 300)
    server_payload: tuple[int, int] = (16, 400)
    server_ip: str = "192.168.10.50"
    server_port: int = 80
    teardown: bool = True
    noise_packets: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a synthetic dataset needs at least 2 classes")
        for c in self.classes:
            if c.min_packets < 1 or c.max_packets < c.min_packets:
                raise ValueError(f"bad flow length range for class {c.name}")
            if c.weight <= 0:
                raise ValueError(f"class {c.name} needs a positive weight")
            if c.marker is not None and c.marker_offset + len(c.marker) > self.client_payload[0]:
                raise ValueError(f"marker of class {c.name} does not fit the shortest client payload")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


def default_config(flows: int = 2000, imbalance: Sequence[float] = (100, 10, 5, 1),
                   noise_packets: Optional[int] = None) -> SynthConfig:
    if len(imbalance) != len(DEFAULT_CLASSES):
        raise ValueError(f"imbalance needs {len(DEFAULT_CLASSES)} weights")
    lengths = {"normal": (4, 40), "brute_force": (3, 20), "xss": (3, 14), "sqli": (2, 8)}
    classes = tuple(
        SynthClass(name, float(w), DEFAULT_MARKERS.get(name), 0, *lengths[name])
        for name, w in zip(DEFAULT_CLASSES, imbalance)
    )
    noise = flows if noise_packets is None else noise_packets
    return SynthConfig(classes=classes, flows=flows, noise_packets=noise)


def class_allocation(weights: Sequence[float], total: int) -> list[int]:
    """Split ``total`` flows in proportion to ``weights`` by largest remainder."""
    w = np.asarray(weights, dtype=np.float64)
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(int)
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class SynthSummary:
    classes: list[str]
    counts: list[int]
    packets: int
    noise_packets: int
    rows: list[dict] = field(repr=False, default_factory=list)


def _ascii(rng, n: int) -> bytes:
    return rng.integers(0x20, 0x7F, size=n, dtype=np.uint8).tobytes()


def synth_generate(cfg: SynthConfig, seed: int, capture_path: str | Path,
                   labels_path: str | Path) -> SynthSummary:
    rng = np.random.default_rng(seed)
    counts = class_allocation([c.weight for c in cfg.classes], cfg.flows)
    assignment = np.repeat(np.arange(len(cfg.classes)), counts)
    assignment = assignment[rng.permutation(len(assignment))]

    builder = FrameBuilder()
    server_ip = ip_from_str(cfg.server_ip)
    start_us = int(round(cfg.start_ts * 1e6))
    events = []  # (ts_us, seq, frame)
    rows = []
    clock = start_us
    for i, cls_idx in enumerate(assignment):
        spec = cfg.classes[cls_idx]
        clock += max(1, int(rng.exponential(cfg.mean_flow_gap_ms * 1000)))
        client_ip = ip_from_str("10.0.0.0") + i + 1
        client_port = int(rng.integers(1024, 65536))
        T = int(rng.integers(spec.min_packets, spec.max_packets + 1))
        seq = {0: int(rng.integers(0, 2**32)), 1: int(rng.integers(0, 2**32))}
        ts = clock
        first_ts = last_ts = ts
        for k in range(T):
            side = k % 2  # 0 = client -> server
            closing = cfg.teardown and T >= 4 and k >= T - 2
            if closing:
                payload, flags = b"", TcpFlags.FIN | TcpFlags.ACK
            elif side == 0:
                n = int(rng.integers(cfg.client_payload[0], cfg.client_payload[1] + 1))
                buf = bytearray(_ascii(rng, n))
                if spec.marker is not None:
                    buf[spec.marker_offset : spec.marker_offset + len(spec.marker)] = spec.marker
                payload, flags = bytes(buf), TcpFlags.PSH | TcpFlags.ACK
            else:
                n = int(rng.integers(cfg.server_payload[0], cfg.server_payload[1] + 1))
                payload, flags = _ascii(rng, n), TcpFlags.PSH | TcpFlags.ACK
            if k:
                ts += max(1, int(rng.exponential(spec.mean_gap_ms * 1000)))
            if side == 0:
                frame = builder.tcp(client_ip, server_ip, client_port, cfg.server_port, payload,
                                    flags, seq[0], seq[1])
            else:
                frame = builder.tcp(server_ip, client_ip, cfg.server_port, client_port, payload,
                                    flags, seq[1], seq[0])
            seq[side] = (seq[side] + len(payload) + (1 if closing else 0)) & 0xFFFFFFFF
            events.append((ts, len(events), frame))
            last_ts = ts
        rows.append({
            "src_ip": ip_to_str(client_ip), "src_port": client_port,
            "dst_ip": cfg.server_ip, "dst_port": cfg.server_port, "protocol": "TCP",
            "start_ts": f"{first_ts // 1_000_000}.{first_ts % 1_000_000:06d}",
            "end_ts": f"{last_ts // 1_000_000}.{last_ts % 1_000_000:06d}",
            "label": spec.name,
        })

    # unrelated traffic on other ports, dropped by a port-80 filter
    span = max(clock - start_us, 1)
    for j in range(cfg.noise_packets):
        ts = start_us + int(rng.integers(0, span + 1))
        src = ip_from_str("172.16.0.0") + int(rng.integers(1, 65535))
        if j % 2:
            frame = builder.udp(src, server_ip, int(rng.integers(1024, 65536)), 53, _ascii(rng, 40))
        else:
            frame = builder.tcp(src, server_ip, int(rng.integers(1024, 65536)), 443,
                                bytes(rng.integers(0, 256, 64, dtype=np.uint8)), TcpFlags.ACK)
        events.append((ts, len(events), frame))

    events.sort(key=lambda e: (e[0], e[1]))
    with CaptureWriter(capture_path) as out:
        for ts, _, frame in events:
            out.write(ts // 1_000_000, ts % 1_000_000, frame)
    write_labels(labels_path, rows)
    return SynthSummary(cfg.class_names, counts, len(events), cfg.noise_packets, rows)
