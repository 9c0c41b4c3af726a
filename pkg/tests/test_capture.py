import struct

import pytest
from hypothesis import given, strategies as st

from earlyflow.capture import (FilterSpec, FrameBuilder, LinkType, Protocol, TcpFlags, ip_from_str,
                               ip_to_str, matches_filter, parse_packet, read_capture, write_capture)
from earlyflow.errors import FragmentedPacket, MalformedFrame, UnsupportedCaptureFormat

from oracles import raw_capture, raw_frame


def test_minimal_syn_frame():
    frame = raw_frame("10.0.0.1", "10.0.0.2", 5000, 80, flags=0x02)
    assert len(frame) == 54
    pkt = parse_packet(frame)
    assert pkt.protocol is Protocol.TCP
    assert pkt.payload == b""
    assert pkt.tcp_flags == TcpFlags.SYN
    assert (len(pkt.link_header), len(pkt.net_header), len(pkt.transport_header)) == (14, 20, 20)


def test_ihl_below_minimum_is_malformed():
    frame = raw_frame("10.0.0.1", "10.0.0.2", 5000, 80, ihl=3)
    with pytest.raises(MalformedFrame):
        parse_packet(frame)


def test_payload_span_matches_byte_layout():
    frame = raw_frame("10.0.0.1", "10.0.0.2", 5000, 80, payload=b"GET / ")
    assert len(frame) == 60
    pkt = parse_packet(frame)
    assert pkt.payload == b"GET / "
    assert frame[54:60] == pkt.payload


def test_options_vlan_and_spans():
    frame = raw_frame("1.2.3.4", "5.6.7.8", 1234, 80, payload=b"x" * 100,
                      tcp_options=b"\x01" * 12, ip_options=b"\x00" * 8, vlan=42)
    pkt = parse_packet(frame)
    assert len(pkt.link_header) == 18
    assert len(pkt.net_header) == 28
    assert len(pkt.transport_header) == 32
    assert pkt.payload == b"x" * 100
    assert pkt.link_header + pkt.net_header + pkt.transport_header + pkt.payload == frame
    assert ip_to_str(pkt.src_ip) == "1.2.3.4" and pkt.dst_port == 80


def test_non_tcp_is_other_with_empty_spans():
    frame = raw_frame("10.0.0.1", "10.0.0.2", 5000, 53, payload=b"q" * 10, proto=17)
    pkt = parse_packet(frame)
    assert pkt.protocol is Protocol.OTHER
    assert pkt.transport_header == b"" and pkt.payload == b""
    arp = b"\xff" * 12 + b"\x08\x06" + b"\x00" * 28
    assert parse_packet(arp).protocol is Protocol.OTHER


def test_fragment_and_overlong_total_length():
    with pytest.raises(FragmentedPacket):
        parse_packet(raw_frame("10.0.0.1", "10.0.0.2", 1, 80, frag=0x2000))
    with pytest.raises(MalformedFrame):
        parse_packet(raw_frame("10.0.0.1", "10.0.0.2", 1, 80, total_len=500))
    # the same frame cut by the snaplen is clipped rather than rejected
    pkt = parse_packet(raw_frame("10.0.0.1", "10.0.0.2", 1, 80, payload=b"ab", total_len=500),
                       truncated=True)
    assert pkt.payload == b"ab"


def test_short_frame_is_malformed():
    with pytest.raises(MalformedFrame):
        parse_packet(b"\x00" * 10)


def test_raw_ip_link_type():
    frame = raw_frame("10.0.0.1", "10.0.0.2", 5000, 80, payload=b"hi")[14:]
    pkt = parse_packet(frame, LinkType.RAW)
    assert pkt.link_header == b"" and pkt.payload == b"hi"


@pytest.mark.parametrize("pkt_ports,expected", [((45000, 80), True), ((80, 45000), True),
                                                ((45000, 443), False)])
def test_filter_port_either_direction(pkt_ports, expected):
    pkt = parse_packet(raw_frame("10.0.0.1", "10.0.0.2", *pkt_ports))
    assert matches_filter(pkt, FilterSpec(ports=frozenset({80}))) is expected


def test_empty_filter_accepts_everything():
    for frame in (raw_frame("1.1.1.1", "2.2.2.2", 1, 2), raw_frame("1.1.1.1", "2.2.2.2", 1, 2, proto=17)):
        assert matches_filter(parse_packet(frame), FilterSpec())


def test_filter_from_strings():
    spec = FilterSpec.from_strings("80, 443", "tcp")
    assert spec.ports == {80, 443} and spec.protocols == {Protocol.TCP}
    with pytest.raises(ValueError):
        FilterSpec.from_strings("70000", None)
    with pytest.raises(ValueError):
        FilterSpec.from_strings("80", "sctp")


def _ten_packet_file(path):
    records = []
    for i in range(10):
        dport = 80 if i % 5 in (0, 2) else 8080
        records.append((100 + i, i, raw_frame("10.0.0.1", "10.0.0.2", 3000 + i, dport)))
    path.write_bytes(raw_capture(records))
    return records


def test_read_capture_counts(tmp_path):
    path = tmp_path / "ten.pcap"
    _ten_packet_file(path)
    cap = read_capture(path, FilterSpec.web())
    pkts = list(cap)
    assert len(pkts) == 4
    assert cap.counts.as_dict() == {"read": 10, "malformed": 0, "filtered_out": 6, "fragmented": 0}
    assert [p.ts_sec for p in pkts] == sorted(p.ts_sec for p in pkts)


def test_header_only_and_bad_magic(tmp_path):
    empty = tmp_path / "empty.pcap"
    empty.write_bytes(raw_capture([]))
    cap = read_capture(empty)
    assert list(cap) == []
    assert cap.counts.as_dict() == {"read": 0, "malformed": 0, "filtered_out": 0, "fragmented": 0}
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"\x00" * 24)
    with pytest.raises(UnsupportedCaptureFormat):
        read_capture(bad)


@pytest.mark.parametrize("big_endian,nanosecond", [(False, False), (True, False), (False, True), (True, True)])
def test_header_variants(tmp_path, big_endian, nanosecond):
    path = tmp_path / "v.pcap"
    path.write_bytes(raw_capture([(5, 123456, raw_frame("10.0.0.1", "10.0.0.2", 1, 80))],
                                 big_endian, nanosecond))
    (pkt,) = list(read_capture(path))
    assert (pkt.ts_sec, pkt.ts_usec) == (5, 123456)


def test_malformed_records_are_counted(tmp_path):
    path = tmp_path / "m.pcap"
    good = raw_frame("10.0.0.1", "10.0.0.2", 1, 80)
    path.write_bytes(raw_capture([(1, 0, good), (2, 0, good[:30]), (3, 0, raw_frame("10.0.0.1", "10.0.0.2", 1, 80, frag=0x2001))]))
    cap = read_capture(path)
    assert len(list(cap)) == 1
    assert cap.counts.malformed == 1 and cap.counts.fragmented == 1


def test_writer_round_trip_and_builder_checksums(tmp_path):
    fb = FrameBuilder()
    a, b = ip_from_str("192.168.1.1"), ip_from_str("192.168.1.2")
    frames = [fb.tcp(a, b, 1000, 80, b"hello", TcpFlags.PSH | TcpFlags.ACK), fb.udp(a, b, 5, 53, b"q")]
    path = tmp_path / "w.pcap"
    assert write_capture(path, [(1, 2, f) for f in frames]) == 2
    pkts = list(read_capture(path))
    assert pkts[0].payload == b"hello" and pkts[1].protocol is Protocol.OTHER
    ip_hdr = frames[0][14:34]
    words = sum(struct.unpack("!10H", ip_hdr))
    while words >> 16:
        words = (words & 0xFFFF) + (words >> 16)
    assert words == 0xFFFF


@given(st.binary(max_size=200), st.sampled_from([LinkType.ETHERNET, LinkType.RAW]))
def test_parse_never_reads_past_frame(data, link):
    try:
        pkt = parse_packet(data, link)
    except (MalformedFrame, FragmentedPacket):
        return
    spans = pkt.link_header + pkt.net_header + pkt.transport_header + pkt.payload
    assert len(spans) <= len(data)
    assert data.startswith(spans[: len(pkt.link_header)])
    if pkt.protocol is Protocol.TCP:
        assert len(pkt.transport_header) >= 20 and len(pkt.transport_header) % 4 == 0


@given(st.lists(st.tuples(st.integers(0, 65535), st.integers(0, 65535), st.booleans()), max_size=30),
       st.frozensets(st.integers(0, 65535), max_size=3))
def test_filter_idempotent(specs, ports):
    pkts = [parse_packet(raw_frame("10.0.0.1", "10.0.0.2", s, d, proto=6 if tcp else 17))
            for s, d, tcp in specs]
    spec = FilterSpec(ports=ports, protocols=frozenset({Protocol.TCP}))
    once = [p for p in pkts if matches_filter(p, spec)]
    twice = [p for p in once if matches_filter(p, spec)]
    assert once == twice
