"""Packet dissection and the aligned header/payload byte representation.

Header layout (128 bytes, 0xff where a field does not exist)::

    [  0,  60)  IPv4 header incl. options
    [ 60, 120)  TCP header incl. options
    [120, 128)  UDP header

The data-link header never enters the representation.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import FrameTooShort, UnsupportedProtocol

HEADER_LEN = 128
IPV4_SLOT = slice(0, 60)
TCP_SLOT = slice(60, 120)
UDP_SLOT = slice(120, 128)
FILL = 0xFF

ETH_HLEN = 14
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = (0x8100, 0x88A8)
PROTO_TCP = 6
PROTO_UDP = 17


class LinkType(enum.IntEnum):
    ETHERNET = 1
    RAW = 101
    OTHER = -1


class Transport(enum.Enum):
    TCP = "tcp"
    UDP = "udp"


@dataclass(frozen=True)
class IPv4View:
    ihl_bytes: int
    total_length: int
    protocol: int
    src_addr: bytes
    dst_addr: bytes
    header_bytes: bytes
    offset: int  # position of the IPv4 header inside raw_bytes
    fragment_offset: int = 0


@dataclass(frozen=True)
class TransportView:
    kind: Transport
    header_bytes: bytes
    src_port: int
    dst_port: int


@dataclass(frozen=True)
class PacketRecord:
    ts_sec: int
    ts_nsec: int
    link_type: LinkType
    raw_bytes: bytes
    parsed_ipv4: IPv4View | None = None
    parsed_transport: TransportView | None = None
    payload_bytes: bytes = b""

    @property
    def timestamp(self) -> float:
        return self.ts_sec + self.ts_nsec * 1e-9


def _parse_ipv4(frame: bytes, off: int) -> IPv4View | None:
    avail = len(frame) - off
    if avail < 20 or frame[off] >> 4 != 4:
        return None
    ihl = (frame[off] & 0x0F) * 4
    if ihl < 20:
        return None
    total_length, frag = struct.unpack_from("!H2xH", frame, off + 2)
    return IPv4View(
        ihl_bytes=ihl,
        total_length=total_length,
        protocol=frame[off + 9],
        src_addr=bytes(frame[off + 12:off + 16]),
        dst_addr=bytes(frame[off + 16:off + 20]),
        header_bytes=bytes(frame[off:off + min(ihl, avail)]),
        offset=off,
        fragment_offset=frag & 0x1FFF,
    )


def _parse_transport(frame: bytes, off: int, end: int, proto: int) -> TransportView | None:
    avail = end - off
    if proto == PROTO_TCP:
        if avail < 20:
            return None
        hlen = (frame[off + 12] >> 4) * 4
        if hlen < 20:
            return None
        sport, dport = struct.unpack_from("!HH", frame, off)
        return TransportView(Transport.TCP, bytes(frame[off:off + min(hlen, avail)]), sport, dport)
    if proto == PROTO_UDP:
        if avail < 8:
            return None
        sport, dport = struct.unpack_from("!HH", frame, off)
        return TransportView(Transport.UDP, bytes(frame[off:off + 8]), sport, dport)
    return None


def parse_packet(frame: bytes, link_type=LinkType.ETHERNET, ts_sec: int = 0,
                 ts_nsec: int = 0) -> PacketRecord:
    """Dissect one captured frame as far as its layers are valid.

    Only a frame too short for its link header raises (:class:`FrameTooShort`);
    any deeper malformation leaves the corresponding view as ``None``.
    """
    frame = bytes(frame)
    if not frame:
        raise FrameTooShort("empty frame")
    try:
        link_type = LinkType(link_type)
    except ValueError:
        link_type = LinkType.OTHER
    base = dict(ts_sec=ts_sec, ts_nsec=ts_nsec, link_type=link_type, raw_bytes=frame)

    if link_type == LinkType.ETHERNET:
        if len(frame) < ETH_HLEN:
            raise FrameTooShort(f"{len(frame)}-byte frame is shorter than an Ethernet header")
        off = 12
        ethertype = struct.unpack_from("!H", frame, off)[0]
        while ethertype in ETHERTYPE_VLAN and len(frame) >= off + 6:
            off += 4
            ethertype = struct.unpack_from("!H", frame, off)[0]
        off += 2
        if ethertype != ETHERTYPE_IPV4:
            return PacketRecord(**base, payload_bytes=frame[off:])
    elif link_type == LinkType.RAW:
        off = 0
    else:
        return PacketRecord(**base, payload_bytes=frame)

    ip = _parse_ipv4(frame, off)
    if ip is None:
        return PacketRecord(**base, payload_bytes=frame[off:])
    end = len(frame)
    if ip.total_length >= ip.ihl_bytes:
        end = min(end, off + ip.total_length)  # drop link-layer trailer padding
    l4 = off + ip.ihl_bytes
    tp = None
    if ip.fragment_offset == 0 and l4 <= end:
        tp = _parse_transport(frame, l4, end, ip.protocol)
    if tp is not None:
        l4 += len(tp.header_bytes)
    payload = frame[l4:end] if l4 < end else b""
    return PacketRecord(**base, parsed_ipv4=ip, parsed_transport=tp, payload_bytes=payload)


def anonymize(record: PacketRecord) -> PacketRecord:
    """Zero the IPv4 source and destination addresses (view, header bytes and raw frame)."""
    ip = record.parsed_ipv4
    if ip is None:
        return record
    zero = bytes(4)
    hb = bytearray(ip.header_bytes)
    hb[12:20] = bytes(min(8, max(0, len(hb) - 12)))
    raw = bytearray(record.raw_bytes)
    a, b = ip.offset + 12, min(ip.offset + 20, len(raw))
    raw[a:b] = bytes(b - a)
    new_ip = replace(ip, src_addr=zero, dst_addr=zero, header_bytes=bytes(hb))
    return replace(record, parsed_ipv4=new_ip, raw_bytes=bytes(raw))


def build_header_vector(record: PacketRecord, mode: str = "permissive") -> np.ndarray:
    """Aligned 128-byte header vector (uint8).

    ``strict`` raises :class:`UnsupportedProtocol` unless the packet is IPv4 with
    a TCP or UDP header; ``permissive`` fills every missing region with 0xff.
    """
    ip, tp = record.parsed_ipv4, record.parsed_transport
    if mode == "strict" and (ip is None or tp is None):
        raise UnsupportedProtocol("strict mode accepts only IPv4 with TCP or UDP")
    if mode not in ("strict", "permissive"):
        raise ValueError(f"unknown header mode {mode!r}")
    vec = np.full(HEADER_LEN, FILL, dtype=np.uint8)
    if ip is not None:
        hb = ip.header_bytes[:60]
        vec[:len(hb)] = np.frombuffer(hb, dtype=np.uint8)
    if tp is not None:
        slot = TCP_SLOT if tp.kind is Transport.TCP else UDP_SLOT
        hb = tp.header_bytes[:slot.stop - slot.start]
        vec[slot.start:slot.start + len(hb)] = np.frombuffer(hb, dtype=np.uint8)
    return vec


@dataclass(frozen=True)
class PayloadVector:
    data: np.ndarray
    original_length: int


def build_payload_vector(record_or_payload, P: int = 64) -> PayloadVector:
    """First ``P`` payload bytes, zero-padded when the payload is shorter."""
    if P < 1:
        raise ValueError("payload length must be >= 1")
    payload = getattr(record_or_payload, "payload_bytes", record_or_payload)
    vec = np.zeros(P, dtype=np.uint8)
    n = min(P, len(payload))
    vec[:n] = np.frombuffer(bytes(payload[:n]), dtype=np.uint8)
    return PayloadVector(vec, len(payload))


def to_model_input(header, payload) -> tuple[np.ndarray, np.ndarray]:
    """Scale byte vectors to [0, 1] floats."""
    if isinstance(payload, PayloadVector):
        payload = payload.data
    return (np.asarray(header, dtype=np.float32) / np.float32(255.0),
            np.asarray(payload, dtype=np.float32) / np.float32(255.0))


def represent(record: PacketRecord, P: int = 64, mode: str = "permissive",
              anonymize_ip: bool = True) -> tuple[np.ndarray, PayloadVector]:
    """Header and payload vectors for one parsed packet."""
    if anonymize_ip:
        record = anonymize(record)
    return build_header_vector(record, mode), build_payload_vector(record, P)
