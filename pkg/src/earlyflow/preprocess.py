"""Packet truncation and transformation into fixed-length byte vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capture import ParsedPacket, Protocol
from .errors import NonFlowablePacket

_SCALE = np.float32(255.0)


@dataclass(frozen=True)
class VectorizerConfig:
    header_budget: int = 48
    payload_budget: int = 400

    def __post_init__(self):
        if self.header_budget <= 0 or self.payload_budget <= 0:
            raise ValueError("byte budgets must be positive")

    @property
    def dim(self) -> int:
        return self.header_budget + self.payload_budget


@dataclass(frozen=True, eq=False)
class PacketVector:
    values: np.ndarray  # float32, shape (dim,), read-only
    header_len_kept: int
    payload_len_kept: int

    def __len__(self) -> int:
        return self.values.shape[0]


def strip_headers(pkt: ParsedPacket) -> tuple[bytes, bytes]:
    """Drop the link and network headers, keeping the TCP header and payload."""
    if pkt.protocol is not Protocol.TCP:
        raise NonFlowablePacket(f"cannot vectorize a {pkt.protocol.value} packet")
    return pkt.transport_header, pkt.payload


def vectorize(transport_bytes: bytes, payload_bytes: bytes,
              cfg: VectorizerConfig = VectorizerConfig()) -> PacketVector:
    head = transport_bytes[: cfg.header_budget]
    body = payload_bytes[: cfg.payload_budget]
    raw = np.zeros(cfg.dim, dtype=np.uint8)
    raw[: len(head)] = np.frombuffer(head, dtype=np.uint8)
    raw[cfg.header_budget : cfg.header_budget + len(body)] = np.frombuffer(body, dtype=np.uint8)
    values = raw.astype(np.float32) / _SCALE
    values.flags.writeable = False
    return PacketVector(values, len(head), len(body))


def vectorize_packet(pkt: ParsedPacket, cfg: VectorizerConfig = VectorizerConfig()) -> PacketVector:
    return vectorize(*strip_headers(pkt), cfg)
