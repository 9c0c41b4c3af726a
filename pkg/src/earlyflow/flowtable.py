"""Bidirectional TCP flow assembly with FIN/RST teardown and idle timeout."""
from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .capture import ParsedPacket, Protocol, TcpFlags, ip_from_str, ip_to_str
from .errors import NonFlowablePacket
from .preprocess import PacketVector, VectorizerConfig, vectorize_packet

Endpoint = tuple[int, int]


@dataclass(frozen=True)
class FlowKey:
    endpoint_a: Endpoint
    endpoint_b: Endpoint
    protocol: Protocol = Protocol.TCP

    @classmethod
    def of(cls, ip1: int, port1: int, ip2: int, port2: int,
           protocol: Protocol = Protocol.TCP) -> "FlowKey":
        a, b = (ip1, port1), (ip2, port2)
        if b < a:
            a, b = b, a
        return cls(a, b, protocol)

    def __str__(self) -> str:
        (ia, pa), (ib, pb) = self.endpoint_a, self.endpoint_b
        return f"{ip_to_str(ia)}:{pa}<->{ip_to_str(ib)}:{pb}/{self.protocol.value}"

    @classmethod
    def parse(cls, text: str) -> "FlowKey":
        pair, proto = text.rsplit("/", 1)
        left, right = pair.split("<->")
        ia, pa = left.rsplit(":", 1)
        ib, pb = right.rsplit(":", 1)
        return cls.of(ip_from_str(ia), int(pa), ip_from_str(ib), int(pb), Protocol(proto))


def flow_key_of(pkt: ParsedPacket) -> FlowKey:
    if pkt.protocol is not Protocol.TCP:
        raise NonFlowablePacket("only TCP packets belong to flows")
    return FlowKey.of(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, pkt.protocol)


class FlowState(enum.Enum):
    ACTIVE = "active"
    TERMINATED_FIN = "terminated_fin"
    TERMINATED_TIMEOUT = "terminated_timeout"


class FlowEvent(enum.Enum):
    CREATED = "created"
    APPENDED = "appended"


@dataclass(eq=False)
class Flow:
    key: Optional[FlowKey]
    packets: list[PacketVector] = field(default_factory=list)
    raw_lengths: list[tuple[int, int]] = field(default_factory=list)
    timestamps: list[float] = field(default_factory=list, repr=False)
    first_ts: float = 0.0
    last_ts: float = 0.0
    state: FlowState = FlowState.ACTIVE
    label: Optional[int] = None
    initiator: Optional[Endpoint] = None
    fin_from: set = field(default_factory=set, repr=False)
    _stack: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.packets)

    @property
    def T(self) -> int:
        return len(self.packets)

    @property
    def dim(self) -> int:
        return len(self.packets[0]) if self.packets else 0

    def append(self, vec: PacketVector, ts: float, lengths: tuple[int, int] = (0, 0)) -> None:
        if self.state is not FlowState.ACTIVE:
            raise RuntimeError(f"cannot append to a {self.state.value} flow")
        if not self.packets:
            self.first_ts = ts
        self.packets.append(vec)
        self.raw_lengths.append(lengths)
        self.timestamps.append(ts)
        self.last_ts = ts
        self._stack = None

    def terminate(self, state: FlowState) -> None:
        if state is FlowState.ACTIVE:
            raise ValueError("terminate() needs a terminated state")
        if self.state is not FlowState.ACTIVE:
            raise RuntimeError(f"flow already {self.state.value}")
        self.state = state

    def matrix(self, dtype=np.float64) -> np.ndarray:
        """Packet vectors stacked into a ``(T, d)`` array."""
        if self._stack is None:
            self._stack = np.stack([p.values for p in self.packets])
            self._stack.flags.writeable = False
        if self._stack.dtype == dtype:
            return self._stack
        return self._stack.astype(dtype)

    def prefix(self, t: int) -> "Flow":
        """The first ``t`` packets as a new flow carrying the same label."""
        if not 1 <= t <= len(self.packets):
            raise ValueError(f"prefix length {t} outside 1..{len(self.packets)}")
        sub = Flow(
            key=self.key,
            packets=self.packets[:t],
            raw_lengths=self.raw_lengths[:t],
            timestamps=self.timestamps[:t],
            first_ts=self.first_ts,
            last_ts=self.timestamps[t - 1] if self.timestamps else self.last_ts,
            state=self.state,
            label=self.label,
            initiator=self.initiator,
        )
        sub._stack = self.matrix(np.float32)[:t]
        return sub


@dataclass(frozen=True)
class FlowTableConfig:
    timeout_seconds: float = 120.0
    direction_of_initiator: bool = True
    max_flows: Optional[int] = None

    def __post_init__(self):
        if not self.timeout_seconds > 0:
            raise ValueError("timeout_seconds must be positive")
        if self.max_flows is not None and self.max_flows < 1:
            raise ValueError("max_flows must be at least 1")


class FlowTable:
    """Single-writer table of active flows.

    Flows leave the table when they terminate; they are queued on
    :attr:`finished` in termination order until :meth:`drain` is called.
    """

    def __init__(self, config: FlowTableConfig = FlowTableConfig()):
        self.config = config
        # insertion order == least recently updated first; the flow cap evicts from the front
        self.active: OrderedDict[FlowKey, Flow] = OrderedDict()
        self.finished: list[Flow] = []
        self._last_sweep = float("-inf")
        self._sweep_every = min(1.0, config.timeout_seconds / 10)

    def __len__(self) -> int:
        return len(self.active)

    def _retire(self, key: FlowKey, state: FlowState) -> Flow:
        flow = self.active.pop(key)
        flow.terminate(state)
        self.finished.append(flow)
        return flow

    def upsert_packet(self, pkt: ParsedPacket, vec: PacketVector) -> tuple[Flow, FlowEvent]:
        key = flow_key_of(pkt)
        ts = pkt.timestamp
        flow = self.active.get(key)
        if flow is not None and ts - flow.last_ts > self.config.timeout_seconds:
            self._retire(key, FlowState.TERMINATED_TIMEOUT)
            flow = None
        if flow is None:
            cap = self.config.max_flows
            while cap is not None and len(self.active) >= cap:
                self._retire(next(iter(self.active)), FlowState.TERMINATED_TIMEOUT)
            flow = Flow(key=key, initiator=pkt.src if self.config.direction_of_initiator else None)
            self.active[key] = flow
            event = FlowEvent.CREATED
        else:
            self.active.move_to_end(key)
            event = FlowEvent.APPENDED
        flow.append(vec, ts, (len(pkt.transport_header), len(pkt.payload)))
        return flow, event

    def on_packet_flags(self, flow: Flow, pkt: ParsedPacket) -> Optional[FlowState]:
        """Tear the flow down on RST, or once both sides have sent FIN."""
        if flow.state is not FlowState.ACTIVE:
            return None
        flags = pkt.tcp_flags
        if flags & TcpFlags.FIN:
            flow.fin_from.add(pkt.src)
        if flags & TcpFlags.RST or len(flow.fin_from) >= 2 or (
            flow.fin_from and flow.key.endpoint_a == flow.key.endpoint_b
        ):
            self._retire(flow.key, FlowState.TERMINATED_FIN)
            return FlowState.TERMINATED_FIN
        return None

    def expire_flows(self, now: float) -> list[Flow]:
        limit = self.config.timeout_seconds
        stale = [k for k, f in self.active.items() if now - f.last_ts > limit]
        self._last_sweep = now
        return [self._retire(k, FlowState.TERMINATED_TIMEOUT) for k in stale]

    def sweep(self, now: float) -> list[Flow]:
        """Expire idle flows if at least ``timeout / 10`` (max 1 s) passed since the last sweep."""
        if now - self._last_sweep >= self._sweep_every or now < self._last_sweep:
            return self.expire_flows(now)
        return []

    def process(self, pkt: ParsedPacket, vec: PacketVector,
                now: Optional[float] = None) -> tuple[Flow, FlowEvent]:
        """Place the packet, apply teardown flags, and periodically expire idle flows.

        ``now`` defaults to the packet timestamp (virtual time). Sweeps run at
        most every ``timeout / 10`` seconds of clock time; a late packet for
        an idle flow is still split off by :meth:`upsert_packet`, so flow
        contents do not depend on sweep timing.
        """
        self.sweep(pkt.timestamp if now is None else now)
        flow, event = self.upsert_packet(pkt, vec)
        self.on_packet_flags(flow, pkt)
        return flow, event

    def drain(self) -> list[Flow]:
        out, self.finished = self.finished, []
        return out

    def flush(self) -> list[Flow]:
        """Remove every active flow as an ACTIVE snapshot (end of input)."""
        snap = list(self.active.values())
        self.active.clear()
        return self.drain() + snap


def assemble_flows(packets: Iterable[ParsedPacket],
                   vectorizer: VectorizerConfig = VectorizerConfig(),
                   config: FlowTableConfig = FlowTableConfig()) -> Iterator[Flow]:
    """Group already-filtered packets into flows, yielding each as it leaves the table.

    Non-TCP packets are skipped.
    """
    table = FlowTable(config)
    for pkt in packets:
        if pkt.protocol is not Protocol.TCP:
            continue
        table.process(pkt, vectorize_packet(pkt, vectorizer))
        if table.finished:
            yield from table.drain()
    yield from table.flush()
