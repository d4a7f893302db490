import struct

import pytest

import framekit as fk
from hpnet.capture import Frame, iter_frames, write_pcap
from hpnet.errors import CaptureError, UnsupportedLinkType

scapy_all = pytest.importorskip("scapy.all")


def _scapy_packets(n=5):
    s = scapy_all
    pkts = []
    for i in range(n):
        p = s.Ether() / s.IP(src=f"10.0.0.{i + 1}", dst="10.0.0.200") / s.UDP(dport=1000 + i) / (bytes([i]) * (i + 1))
        p.time = 1_700_000_000 + i + 0.25
        pkts.append(p)
    return pkts


def test_reads_scapy_pcap(tmp_path):
    pkts = _scapy_packets()
    path = tmp_path / "a.pcap"
    scapy_all.wrpcap(str(path), pkts)
    frames = list(iter_frames(path))
    assert [f.data for f in frames] == [bytes(p) for p in pkts]
    assert all(f.link_type == 1 for f in frames)
    assert frames[2].ts_sec == 1_700_000_002 and frames[2].ts_nsec == 250_000_000


def test_reads_scapy_pcapng(tmp_path):
    pkts = _scapy_packets()
    path = tmp_path / "a.pcapng"
    scapy_all.wrpcapng(str(path), pkts)
    frames = list(iter_frames(path))
    assert [f.data for f in frames] == [bytes(p) for p in pkts]
    assert frames[0].ts_sec == 1_700_000_000
    assert abs(frames[0].ts_nsec - 250_000_000) < 1000


def _classic(order, magic, linktype, recs):
    out = struct.pack(order + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)
    for sec, frac, data in recs:
        out += struct.pack(order + "IIII", sec, frac, len(data), len(data)) + data
    return out


@pytest.mark.parametrize("order", ["<", ">"])
@pytest.mark.parametrize("nano", [False, True])
def test_classic_both_endiannesses(tmp_path, order, nano):
    data = fk.eth(fk.ipv4(17, fk.udp(b"hi")))
    magic = 0xA1B23C4D if nano else 0xA1B2C3D4
    path = tmp_path / "x.pcap"
    path.write_bytes(_classic(order, magic, 1, [(7, 123, data), (8, 5, data[:20])]))
    frames = list(iter_frames(path))
    assert frames[0] == Frame(7, 123 if nano else 123_000, 1, data)
    assert frames[1].data == data[:20]


def test_write_then_read_nanosecond(tmp_path):
    path = tmp_path / "n.pcap"
    fr = [Frame(1, 999_999_999, 101, fk.ipv4(6, fk.tcp(b"x"))), Frame(2, 1, 101, b"\x45")]
    write_pcap(path, fr, link_type=101, nanosecond=True)
    assert list(iter_frames(path)) == fr


def test_write_microsecond_matches_scapy_reader(tmp_path):
    path = tmp_path / "u.pcap"
    data = [fk.eth(fk.ipv4(17, fk.udp(bytes([i])))) for i in range(4)]
    write_pcap(path, [Frame(10 + i, 5000 * i, 1, d) for i, d in enumerate(data)])
    ref = scapy_all.rdpcap(str(path))
    assert [bytes(p) for p in ref] == data


def test_unsupported_link_type(tmp_path):
    path = tmp_path / "wifi.pcap"
    path.write_bytes(_classic("<", 0xA1B2C3D4, 105, []))
    with pytest.raises(UnsupportedLinkType, match="105"):
        list(iter_frames(path))


def test_fcs_bits_in_linktype_are_ignored(tmp_path):
    path = tmp_path / "fcs.pcap"
    path.write_bytes(_classic("<", 0xA1B2C3D4, 1 | 0x10000000, [(0, 0, b"\x00" * 20)]))
    assert len(list(iter_frames(path))) == 1


def test_truncated_record(tmp_path):
    path = tmp_path / "t.pcap"
    raw = _classic("<", 0xA1B2C3D4, 1, [(0, 0, bytes(60))])
    path.write_bytes(raw[:-10])
    with pytest.raises(CaptureError, match="t.pcap"):
        list(iter_frames(path))


def test_garbage_file(tmp_path):
    path = tmp_path / "junk.pcap"
    path.write_bytes(b"this is not a capture file at all")
    with pytest.raises(CaptureError, match="junk.pcap"):
        list(iter_frames(path))


def test_missing_file(tmp_path):
    with pytest.raises(CaptureError):
        list(iter_frames(tmp_path / "nope.pcap"))


def test_empty_capture(tmp_path):
    path = tmp_path / "e.pcap"
    write_pcap(path, [])
    assert list(iter_frames(path)) == []
