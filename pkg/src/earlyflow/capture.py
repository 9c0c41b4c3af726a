"""Packet capture files, frame decoding and the port/protocol filter.

Only Ethernet (optionally VLAN-tagged) and raw-IP link types are decoded, and
only IPv4/TCP is decoded down to the payload. Anything else comes out as
``Protocol.OTHER`` with empty transport and payload spans.
"""
from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Protocol as TypingProtocol

from .errors import FragmentedPacket, MalformedFrame, UnsupportedCaptureFormat

ETH_HEADER_LEN = 14
ETHERTYPE_IPV4 = 0x0800
VLAN_ETHERTYPES = (0x8100, 0x88A8, 0x9100)
IPPROTO_TCP = 6

PCAP_MAGIC_USEC = 0xA1B2C3D4
PCAP_MAGIC_NSEC = 0xA1B23C4D
# incl_len sanity bound used when the global header advertises snaplen 0
MAX_SNAPLEN = 262144


class LinkType(enum.IntEnum):
    ETHERNET = 1
    RAW = 101


class Protocol(enum.Enum):
    TCP = "tcp"
    OTHER = "other"


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


def ip_to_str(addr: int) -> str:
    return str(ipaddress.IPv4Address(addr))


def ip_from_str(text: str) -> int:
    return int(ipaddress.IPv4Address(text.strip()))


@dataclass(frozen=True)
class ParsedPacket:
    ts_sec: int
    ts_usec: int
    link_header: bytes
    net_header: bytes
    transport_header: bytes
    payload: bytes
    src_ip: int = 0
    dst_ip: int = 0
    src_port: int = 0
    dst_port: int = 0
    protocol: Protocol = Protocol.OTHER
    tcp_flags: TcpFlags = TcpFlags(0)
    frame_len: int = 0

    @property
    def timestamp(self) -> float:
        return self.ts_sec + self.ts_usec * 1e-6

    @property
    def src(self) -> tuple[int, int]:
        return (self.src_ip, self.src_port)

    @property
    def dst(self) -> tuple[int, int]:
        return (self.dst_ip, self.dst_port)

    def __repr__(self) -> str:
        return (
            f"ParsedPacket({self.timestamp:.6f} {ip_to_str(self.src_ip)}:{self.src_port} -> "
            f"{ip_to_str(self.dst_ip)}:{self.dst_port} {self.protocol.value} "
            f"flags={int(self.tcp_flags):#04x} payload={len(self.payload)}B)"
        )


@dataclass(frozen=True)
class FilterSpec:
    """Port/protocol filter. An empty set accepts everything on that dimension."""

    ports: frozenset[int] = frozenset()
    protocols: frozenset[Protocol] = frozenset()

    @classmethod
    def web(cls) -> "FilterSpec":
        return cls(ports=frozenset({80}), protocols=frozenset({Protocol.TCP}))

    @classmethod
    def from_strings(cls, ports: str | None = None, protocol: str | None = None) -> "FilterSpec":
        port_set = set()
        for item in (ports or "").split(","):
            item = item.strip()
            if not item:
                continue
            value = int(item)
            if not 0 <= value <= 0xFFFF:
                raise ValueError(f"port out of range: {value}")
            port_set.add(value)
        protos = set()
        for item in (protocol or "").split(","):
            item = item.strip().lower()
            if not item or item == "any":
                continue
            protos.add(Protocol(item))
        return cls(ports=frozenset(port_set), protocols=frozenset(protos))


def matches_filter(pkt: ParsedPacket, spec: FilterSpec) -> bool:
    if spec.protocols and pkt.protocol not in spec.protocols:
        return False
    if spec.ports and pkt.src_port not in spec.ports and pkt.dst_port not in spec.ports:
        return False
    return True


def parse_packet(
    frame: bytes,
    link_type: LinkType = LinkType.ETHERNET,
    *,
    ts_sec: int = 0,
    ts_usec: int = 0,
    truncated: bool = False,
) -> ParsedPacket:
    """Decode one captured frame.

    ``truncated`` marks frames cut short by the capture snaplen; for those the
    IPv4 total length may exceed the captured bytes and the payload is clipped
    instead of raising :class:`MalformedFrame`.
    """
    frame = bytes(frame)
    n = len(frame)
    stamp = dict(ts_sec=ts_sec, ts_usec=ts_usec, frame_len=n)

    if link_type == LinkType.ETHERNET:
        if n < ETH_HEADER_LEN:
            raise MalformedFrame(f"frame of {n} bytes is shorter than an Ethernet header")
        off = 12
        ethertype = struct.unpack_from("!H", frame, off)[0]
        while ethertype in VLAN_ETHERTYPES:
            if off + 6 > n:
                raise MalformedFrame("VLAN tag runs past end of frame")
            off += 4
            ethertype = struct.unpack_from("!H", frame, off)[0]
        off += 2
        link = frame[:off]
        if ethertype != ETHERTYPE_IPV4:
            return ParsedPacket(link_header=link, net_header=b"", transport_header=b"", payload=b"", **stamp)
    elif link_type == LinkType.RAW:
        off = 0
        link = b""
        if n < 1 or frame[0] >> 4 != 4:
            return ParsedPacket(link_header=b"", net_header=b"", transport_header=b"", payload=b"", **stamp)
    else:
        raise UnsupportedCaptureFormat(f"link type {link_type} not supported")

    if off + 20 > n:
        raise MalformedFrame("IPv4 header runs past end of frame")
    ver_ihl, _tos, total_len, _ident, frag, _ttl, proto = struct.unpack_from("!BBHHHBB", frame, off)
    if ver_ihl >> 4 != 4:
        raise MalformedFrame(f"IP version {ver_ihl >> 4} in an IPv4 frame")
    ihl = (ver_ihl & 0x0F) * 4
    if ihl < 20:
        raise MalformedFrame(f"IHL {ihl // 4} below minimum 5")
    if off + ihl > n:
        raise MalformedFrame("IPv4 options run past end of frame")
    if total_len < ihl:
        raise MalformedFrame(f"IPv4 total length {total_len} shorter than header {ihl}")
    ip_end = off + total_len
    if ip_end > n:
        if not truncated:
            raise MalformedFrame(f"IPv4 total length {total_len} exceeds frame")
        ip_end = n
    if frag & 0x2000 or frag & 0x1FFF:
        raise FragmentedPacket("IPv4 fragment")

    src_ip, dst_ip = struct.unpack_from("!II", frame, off + 12)
    net = frame[off : off + ihl]
    if proto != IPPROTO_TCP:
        return ParsedPacket(
            link_header=link, net_header=net, transport_header=b"", payload=b"",
            src_ip=src_ip, dst_ip=dst_ip, **stamp,
        )

    t_off = off + ihl
    if t_off + 20 > ip_end:
        raise MalformedFrame("TCP header runs past end of IP datagram")
    sport, dport = struct.unpack_from("!HH", frame, t_off)
    data_offset = (frame[t_off + 12] >> 4) * 4
    if data_offset < 20:
        raise MalformedFrame(f"TCP data offset {data_offset // 4} below minimum 5")
    if t_off + data_offset > ip_end:
        raise MalformedFrame("TCP options run past end of IP datagram")
    return ParsedPacket(
        link_header=link,
        net_header=net,
        transport_header=frame[t_off : t_off + data_offset],
        payload=frame[t_off + data_offset : ip_end],
        src_ip=src_ip,
        dst_ip=dst_ip,
        src_port=sport,
        dst_port=dport,
        protocol=Protocol.TCP,
        tcp_flags=TcpFlags(frame[t_off + 13] & 0x3F),
        **stamp,
    )


class PacketSource(TypingProtocol):
    """Anything that yields decoded packets in arrival order.

    A live sniffer plugs in by implementing this; the package ships the file
    reader below plus the UDP source in :mod:`earlyflow.monitor`.
    """

    counts: "CaptureCounts"

    def __iter__(self) -> Iterator[ParsedPacket]: ...


@dataclass
class CaptureCounts:
    read: int = 0
    malformed: int = 0
    filtered_out: int = 0
    fragmented: int = 0

    def as_dict(self) -> dict:
        return {"read": self.read, "malformed": self.malformed,
                "filtered_out": self.filtered_out, "fragmented": self.fragmented}


@dataclass(frozen=True)
class CaptureHeader:
    byte_order: str
    nanosecond: bool
    version: tuple[int, int]
    snaplen: int
    link_type: LinkType


def _read_header(fh: BinaryIO) -> CaptureHeader:
    raw = fh.read(24)
    if len(raw) < 24:
        raise UnsupportedCaptureFormat("file too short for a capture header")
    for order in ("<", ">"):
        magic = struct.unpack(order + "I", raw[:4])[0]
        if magic in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
            break
    else:
        raise UnsupportedCaptureFormat(f"unrecognized magic {raw[:4].hex()}")
    major, minor, _zone, _sigfigs, snaplen, network = struct.unpack(order + "HHiIII", raw[4:])
    try:
        link = LinkType(network & 0x0FFFFFFF)
    except ValueError:
        raise UnsupportedCaptureFormat(f"link type {network} not supported") from None
    return CaptureHeader(order, magic == PCAP_MAGIC_NSEC, (major, minor), snaplen, link)


class CaptureFile:
    """Streaming reader for classic capture savefiles.

    Iterating yields packets that pass ``spec`` in file order; ``counts`` is
    updated as the stream advances.
    """

    def __init__(self, path: str | Path, spec: FilterSpec | None = None):
        self.path = Path(path)
        self.spec = spec or FilterSpec()
        self.counts = CaptureCounts()
        with self.path.open("rb") as fh:
            self.header = _read_header(fh)

    def frames(self) -> Iterator[tuple[int, int, bytes, bool]]:
        """Raw ``(ts_sec, ts_usec, frame, truncated)`` records, unfiltered."""
        hdr = self.header
        rec = struct.Struct(hdr.byte_order + "IIII")
        limit = hdr.snaplen if hdr.snaplen > 0 else MAX_SNAPLEN
        with self.path.open("rb") as fh:
            fh.seek(24)
            while True:
                head = fh.read(16)
                if not head:
                    return
                if len(head) < 16:
                    raise UnsupportedCaptureFormat("truncated record header")
                ts_sec, frac, incl_len, orig_len = rec.unpack(head)
                if incl_len > max(limit, MAX_SNAPLEN):
                    raise UnsupportedCaptureFormat(f"record length {incl_len} exceeds snaplen")
                data = fh.read(incl_len)
                if len(data) < incl_len:
                    raise UnsupportedCaptureFormat("truncated record body")
                usec = frac // 1000 if hdr.nanosecond else frac
                yield ts_sec, usec, data, incl_len < orig_len

    def packets(self) -> Iterator[ParsedPacket]:
        """Decoded packets before filtering; malformed and fragmented frames are counted and skipped."""
        for ts_sec, ts_usec, data, truncated in self.frames():
            self.counts.read += 1
            try:
                yield parse_packet(data, self.header.link_type, ts_sec=ts_sec, ts_usec=ts_usec,
                                   truncated=truncated)
            except MalformedFrame:
                self.counts.malformed += 1
            except FragmentedPacket:
                self.counts.fragmented += 1

    def __iter__(self) -> Iterator[ParsedPacket]:
        for pkt in self.packets():
            if matches_filter(pkt, self.spec):
                yield pkt
            else:
                self.counts.filtered_out += 1


def read_capture(path: str | Path, spec: FilterSpec | None = None) -> CaptureFile:
    return CaptureFile(path, spec)


class CaptureWriter:
    """Writes a little-endian, microsecond-resolution capture file."""

    def __init__(self, path: str | Path, link_type: LinkType = LinkType.ETHERNET, snaplen: int = 65535):
        self._fh = open(path, "wb")
        self._snaplen = snaplen
        self._fh.write(struct.pack("<IHHiIII", PCAP_MAGIC_USEC, 2, 4, 0, 0, snaplen, int(link_type)))

    def write(self, ts_sec: int, ts_usec: int, frame: bytes) -> None:
        kept = frame[: self._snaplen]
        self._fh.write(struct.pack("<IIII", ts_sec, ts_usec, len(kept), len(frame)))
        self._fh.write(kept)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "CaptureWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_capture(path: str | Path, records: Iterable[tuple[int, int, bytes]],
                  link_type: LinkType = LinkType.ETHERNET, snaplen: int = 65535) -> int:
    count = 0
    with CaptureWriter(path, link_type, snaplen) as out:
        for ts_sec, ts_usec, frame in records:
            out.write(ts_sec, ts_usec, frame)
            count += 1
    return count


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


@dataclass
class FrameBuilder:
    """Builds Ethernet/IPv4/TCP frames with valid checksums (used by the synthetic generator)."""

    src_mac: bytes = bytes.fromhex("020000000001")
    dst_mac: bytes = bytes.fromhex("020000000002")
    ttl: int = 64
    _ident: int = field(default=0, repr=False)

    def tcp(self, src_ip: int, dst_ip: int, sport: int, dport: int, payload: bytes = b"",
            flags: TcpFlags = TcpFlags.ACK, seq: int = 0, ack: int = 0, window: int = 64240,
            options: bytes = b"") -> bytes:
        if len(options) % 4:
            raise ValueError("TCP options must be padded to a multiple of 4 bytes")
        doff = (20 + len(options)) // 4
        tcp_hdr = struct.pack("!HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                              doff << 4, int(flags), window, 0, 0) + options
        pseudo = struct.pack("!IIBBH", src_ip, dst_ip, 0, IPPROTO_TCP, len(tcp_hdr) + len(payload))
        csum = _checksum(pseudo + tcp_hdr + payload)
        tcp_hdr = tcp_hdr[:16] + struct.pack("!H", csum) + tcp_hdr[18:]
        return self._ip_frame(src_ip, dst_ip, IPPROTO_TCP, tcp_hdr + payload)

    def udp(self, src_ip: int, dst_ip: int, sport: int, dport: int, payload: bytes = b"") -> bytes:
        udp_hdr = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0)
        return self._ip_frame(src_ip, dst_ip, 17, udp_hdr + payload)

    def _ip_frame(self, src_ip: int, dst_ip: int, proto: int, body: bytes) -> bytes:
        self._ident = (self._ident + 1) & 0xFFFF
        ip_hdr = struct.pack("!BBHHHBBHII", 0x45, 0, 20 + len(body), self._ident, 0x4000,
                             self.ttl, proto, 0, src_ip, dst_ip)
        ip_hdr = ip_hdr[:10] + struct.pack("!H", _checksum(ip_hdr)) + ip_hdr[12:]
        eth = self.dst_mac + self.src_mac + struct.pack("!H", ETHERTYPE_IPV4)
        return eth + ip_hdr + body
